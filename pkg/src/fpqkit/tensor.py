"""Dense tensor helpers with deterministic reductions.

Tensors throughout the package are C-contiguous float32 numpy arrays; this
module is the only place that defines how they are created, multiplied and
normalized, so every downstream number is reproducible bit-for-bit.

Determinism contract:

* ``matmul`` accumulates in float64 over the contracted axis in ascending
  index order (a vectorized version of the naive triple loop, and bitwise
  equal to it).  A BLAS-backed path exists behind ``backend="blas"`` for
  interactive use but is never selected by default.
* ``make_rng`` returns a numpy ``Generator`` seeded with PCG64; identical
  seeds give identical streams across runs and platforms.
* ``gelu`` uses the exact erf form x * Phi(x), not the tanh approximation.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .errors import NumericError, ShapeError

DTYPE = np.float32

LAYER_NORM_EPS = 1e-5


def as_tensor(x, check: bool = True) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32 array, rejecting NaN/Inf."""
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if check and not np.all(np.isfinite(a)):
        raise NumericError("tensor contains non-finite values")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single entropy source for the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in float64 with left-to-right accumulation over k.

    Supports ``(..., M, K) @ (K, N)`` and ``(..., M, K) @ (..., K, N)``.
    Equivalent, bit for bit, to the naive triple loop with the innermost
    loop over k in ascending order (each step is one multiply rounding
    followed by one add rounding).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    kdim = a.shape[-1]
    if b.ndim == 2:
        out = np.zeros(a.shape[:-1] + (b.shape[-1],), dtype=np.float64)
        for k in range(kdim):
            out += a[..., k, None] * b[k]
    else:
        try:
            shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as e:
            raise ShapeError(f"batch dimensions disagree: {a.shape} @ {b.shape}") from e
        out = np.zeros(shape + (a.shape[-2], b.shape[-1]), dtype=np.float64)
        for k in range(kdim):
            out += a[..., :, k, None] * b[..., None, k, :]
    return out


def matmul_fast(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float64 matrix product via numpy's native kernel.

    Same math as ``matmul_f64`` up to reduction order; run-to-run stable
    within a process, which is what the larger model graphs need.  Anything
    whose result is pinned against the accumulation-order oracle must use
    ``matmul_f64`` instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def matmul(a: np.ndarray, b: np.ndarray, backend: str = "loop") -> np.ndarray:
    """float32 matrix product; ``backend="loop"`` is the deterministic path."""
    if backend == "blas":
        out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    elif backend == "loop":
        out = matmul_f64(a, b)
    else:
        raise ShapeError(f"unknown matmul backend {backend!r}")
    return out.astype(DTYPE)


def gelu_f64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error linear unit, x * Phi(x)."""
    return gelu_f64(x).astype(DTYPE)


def gelu_grad_f64(x: np.ndarray) -> np.ndarray:
    """d/dx of x * Phi(x) = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return ndtr(x) + x * pdf


def layer_norm_f64(x, scale=1.0, shift=0.0, eps: float = LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine.

    Returns ``(y, cache)`` where the cache holds what the backward pass needs.
    Rows with zero variance come out as all-shift (the epsilon keeps the
    division defined; no error is raised).
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * scale + shift
    return y, (xhat, inv, np.asarray(scale, dtype=np.float64))


def layer_norm_bwd_f64(g, cache):
    """Backward of ``layer_norm_f64`` with respect to x (affine fixed)."""
    xhat, inv, scale = cache
    gx = g * scale
    n = xhat.shape[-1]
    return inv * (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)


def layer_norm(x, scale, shift, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """float32 layer normalization over the last axis with affine scale/shift."""
    y, _ = layer_norm_f64(x, np.asarray(scale, dtype=np.float64),
                          np.asarray(shift, dtype=np.float64), eps)
    return y.astype(DTYPE)


def softmax_f64(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
