"""Dense float64 kernels used by every other module.

Matrices are plain 2-d numpy arrays (row-major, float64). Functions accept
stacked inputs where noted; reductions keep numpy's fixed summation order so
repeated runs give identical bits for a fixed thread count.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UndefinedStatisticError

# Coefficient of the cubic term in the tanh-approximated GeLU.
GELU_CUBIC = 0.044715

RNG_ALGORITHM = "pcg64"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check (supports stacked inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        # fold the stack into one GEMM instead of one GEMM per batch entry
        return (a.reshape(-1, k_a) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return np.matmul(a, b)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(m: np.ndarray) -> np.ndarray:
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    m = np.asarray(m, dtype=np.float64)
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * m * (1.0 + np.tanh(c * (m + GELU_CUBIC * (m * m * m))))


def gelu_grad(m: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the tanh-approximated GeLU."""
    m = np.asarray(m, dtype=np.float64)
    c = np.sqrt(2.0 / np.pi)
    sq = m * m
    t = np.tanh(c * (m + GELU_CUBIC * (sq * m)))
    du = c * (1.0 + 3.0 * GELU_CUBIC * sq)
    return 0.5 * (1.0 + t) + 0.5 * m * (1.0 - t * t) * du


def layer_norm_rows(
    m: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    if eps <= 0.0:
        raise ShapeError(f"layer_norm: eps must be positive, got {eps}")
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64).reshape(-1)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if gain.shape[0] != m.shape[-1] or bias.shape[0] != m.shape[-1]:
        raise ShapeError(
            f"layer_norm: gain/bias lengths {gain.shape[0]}/{bias.shape[0]} "
            f"do not match row width {m.shape[-1]}"
        )
    mean = m.mean(axis=-1, keepdims=True)
    var = np.mean((m - mean) ** 2, axis=-1, keepdims=True)
    return (m - mean) / np.sqrt(var + eps) * gain + bias


def normalize_rows(m: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """layer_norm_rows without the affine part."""
    m = np.asarray(m, dtype=np.float64)
    mean = m.mean(axis=-1, keepdims=True)
    var = np.mean((m - mean) ** 2, axis=-1, keepdims=True)
    return (m - mean) / np.sqrt(var + eps)


def frobenius_sq(m: np.ndarray) -> float:
    """Sum of squared entries."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


def mean_pairwise_cosine(m: np.ndarray) -> float:
    """Mean cosine over all unordered row pairs; zero rows are excluded."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"mean_pairwise_cosine expects a matrix, got shape {m.shape}")
    norms = np.sqrt(np.sum(m * m, axis=1))
    keep = norms > 0.0
    n = int(keep.sum())
    if n < 2:
        raise UndefinedStatisticError(
            f"mean_pairwise_cosine needs >=2 nonzero rows, found {n}"
        )
    unit = m[keep] / norms[keep, None]
    gram = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(gram[iu].mean())


def tune_allocator() -> bool:
    """Keep freed large buffers on the heap instead of returning pages.

    Elementwise kernels allocate many short-lived MB-sized temporaries; on
    kernels with slow page faults the default glibc behaviour (mmap per large
    block, trim on free) dominates the runtime. Safe to call more than once.
    Returns False when the platform allocator does not support mallopt.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_trim_threshold, m_mmap_max = -1, -4
        ok = libc.mallopt(m_trim_threshold, ctypes.c_int(2**30))
        ok &= libc.mallopt(m_mmap_max, ctypes.c_int(0))
        return bool(ok)
    except (OSError, AttributeError):
        return False


class Rng:
    """Seeded random stream (PCG64). Single-owner: pass explicitly, never share."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.algorithm = RNG_ALGORITHM
        self.gen = np.random.default_rng(self.seed)

    def child(self, tag: int) -> "Rng":
        """Derive an independent, reproducible stream for a sub-task."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(tag),))
        return Rng(int(seq.generate_state(1, np.uint64)[0]))

    def normal(self, scale: float, shape) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape)

    def uniform(self, shape) -> np.ndarray:
        return self.gen.uniform(0.0, 1.0, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)
