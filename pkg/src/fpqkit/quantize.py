"""Rounding machinery: uniform integer quantization, min-max quantization to
ExMy grids, group-wise weight quantization, and online per-token activation
quantization.

Min-max quantization works element-wise with a per-element effective scale:
the clip value fixes the exponent bias, each element's scale bucket is
``S_log = max(floor(log2|x| + bias), 1)`` and its spacing is
``S = 2^(S_log - m - bias)``; the result is ``rint(x / S) * S``.  The lower
clamp at 1 merges the subnormal range into one uniform bucket.  Rounding is
half-to-even everywhere (the same rule serves the integer path), and the
per-element S is kept on the result for the calibrator.

Codes are signed indices into the ascending magnitude list of the grid
(0 -> 0, K -> maxval); bit-packing is a concern of the file format, not of
the in-memory representation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DecodeError, NumericError, ShapeError
from .formats import FpFormat, exp2, fp_bias, grid_magnitudes
from .tensor import DTYPE


@dataclass(frozen=True)
class IntQuantParams:
    """Uniform integer quantizer: codes = clip(rint(x / scale) + zero_point, ...)."""

    scale: float
    zero_point: int
    code_min: int
    code_max: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not self.code_min < self.code_max:
            raise ConfigError("code_min must be below code_max")


@dataclass(frozen=True)
class TokenQuantConfig:
    """Online activation quantization: one scale per token row, no state."""

    fmt: FpFormat
    granularity: str = "per-token"


@dataclass
class QuantizedTensor:
    """Packed grid indices plus the per-group scale metadata to invert them.

    ``group_maxvals`` has one row per output row and one column per group
    (a single entry for per-tensor quantization).  ``elem_scale`` is the
    per-element effective spacing S produced by the minmax pass; it is
    recomputable from the maxvals and is not serialized.
    """

    codes: np.ndarray
    fmt: FpFormat | IntQuantParams
    shape: tuple
    group_size: int | None = None
    group_axis: int | None = None
    group_maxvals: np.ndarray | None = None
    elem_scale: np.ndarray | None = field(default=None, repr=False)
    zero_tensor: bool = False

    def elem_maxvals(self) -> np.ndarray:
        """Per-element clip value, expanded from the group metadata."""
        if self.group_maxvals is None:
            raise ConfigError("integer-quantized tensors carry no maxval metadata")
        if self.group_size is None:
            return np.full(self.shape, float(self.group_maxvals.reshape(-1)[0]))
        reps = np.repeat(self.group_maxvals, self.group_size, axis=1)
        return reps[:, : self.shape[1]]


def _fp_encode(x: np.ndarray, fmt: FpFormat, maxval: np.ndarray):
    """Core of min-max quantization; ``maxval`` is broadcast per element.

    Returns (codes, scale, values) in float64; zero-maxval elements get
    code 0 and a dummy scale of 1.
    """
    m = fmt.man_bits
    p_top = max(2 ** fmt.exp_bits - 1, 1)
    live = maxval > 0
    safe_max = np.where(live, maxval, 1.0)
    if fmt.exp_bits == 0:
        top = 2.0 - 2.0 ** (1 - m)
    else:
        top = 2.0 - 2.0 ** (-m)
    bias = 2.0 ** fmt.exp_bits - np.log2(safe_max) + np.log2(top) - 1.0

    xc = np.clip(x, -safe_max, safe_max)
    with np.errstate(divide="ignore"):
        slog = np.maximum(np.floor(np.log2(np.abs(xc)) + bias), 1.0)
    scale = exp2(slog - m - bias)
    k = np.rint(np.abs(xc) / scale)

    # signed index into the ascending magnitude list
    base = 2 ** (m + 1)
    idx = np.where(slog == 1.0, k, base + (slog - 2.0) * 2 ** m + (k - 2 ** m))
    codes = (np.sign(xc) * idx).astype(np.int32)
    values = np.sign(xc) * k * scale

    codes[~live] = 0
    values = np.where(live, values, 0.0)
    scale = np.where(live, scale, 1.0)
    return codes, scale, values


def _fp_decode(codes: np.ndarray, fmt: FpFormat, maxval: np.ndarray) -> np.ndarray:
    """Inverse of ``_fp_encode`` on its own outputs, bit for bit."""
    m = fmt.man_bits
    k_top = grid_magnitudes(fmt, 1.0).size - 1
    idx = np.abs(codes).astype(np.int64)
    if idx.max(initial=0) > k_top:
        raise DecodeError(f"code magnitude {idx.max()} exceeds grid top {k_top}")
    live = maxval > 0
    safe_max = np.where(live, maxval, 1.0)
    if fmt.exp_bits == 0:
        top = 2.0 - 2.0 ** (1 - m)
    else:
        top = 2.0 - 2.0 ** (-m)
    bias = 2.0 ** fmt.exp_bits - np.log2(safe_max) + np.log2(top) - 1.0

    base = 2 ** (m + 1)
    over = np.maximum(idx - base, 0)
    p = np.where(idx <= base, 1, 2 + over // 2 ** m)
    k = np.where(idx <= base, idx, 2 ** m + over % 2 ** m)
    scale = exp2(p - m - bias)
    values = np.sign(codes) * k * scale
    return np.where(live, values, 0.0)


def _canon(a: np.ndarray, who: str) -> np.ndarray:
    """Working copy of the input: float32 values widened to float64.

    Quantizing the float32 view keeps every clip value and grid point exactly
    representable in the library dtype, so reconstructions stay bounded after
    the final narrowing cast.
    """
    a = np.asarray(a, dtype=DTYPE).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{who} input contains non-finite values")
    return a


def int_quantize(x: np.ndarray, params: IntQuantParams) -> QuantizedTensor:
    """Uniform integer quantization with half-to-even rounding."""
    x = _canon(x, "int_quantize")
    codes = np.clip(np.rint(x / params.scale) + params.zero_point,
                    params.code_min, params.code_max).astype(np.int32)
    return QuantizedTensor(codes=codes, fmt=params, shape=x.shape)


def fp_minmax_quantize(a: np.ndarray, fmt: FpFormat) -> QuantizedTensor:
    """Per-tensor min-max quantization to ``fmt``.

    The clip value is ``fmt.maxval`` when set, otherwise the tensor's
    absolute maximum.  An all-zero tensor quantizes to zeros with a dummy
    scale and a warning (its clip value is undefined).
    """
    a = _canon(a, "fp_minmax_quantize")
    maxval = float(fmt.maxval) if fmt.maxval is not None else float(np.max(np.abs(a)))
    zero = maxval == 0.0
    if zero:
        warnings.warn("all-zero tensor: quantizing to zeros with degenerate scale",
                      RuntimeWarning, stacklevel=2)
    full = np.full(a.shape, maxval)
    codes, scale, _ = _fp_encode(a, fmt, full)
    return QuantizedTensor(codes=codes, fmt=fmt.with_maxval(maxval) if not zero else fmt,
                           shape=a.shape, group_maxvals=np.array([[maxval]]),
                           elem_scale=scale, zero_tensor=zero)


def group_quantize(w: np.ndarray, fmt: FpFormat, group_size: int) -> QuantizedTensor:
    """Quantize each output row in contiguous groups with per-group maxval.

    A group size beyond the row length simply yields one group per row.
    """
    w = _canon(w, "group_quantize")
    if w.ndim != 2:
        raise ShapeError(f"group_quantize expects a 2-D weight matrix, got {w.shape}")
    if group_size < 1:
        raise ConfigError(f"group_size must be >= 1, got {group_size}")
    rows, cols = w.shape
    n_groups = -(-cols // group_size)
    padded = np.zeros((rows, n_groups * group_size))
    padded[:, :cols] = np.abs(w)
    maxvals = padded.reshape(rows, n_groups, group_size).max(axis=2)
    elem_max = np.repeat(maxvals, group_size, axis=1)[:, :cols]
    codes, scale, _ = _fp_encode(w, fmt, elem_max)
    return QuantizedTensor(codes=codes, fmt=fmt, shape=w.shape,
                           group_size=group_size, group_axis=1,
                           group_maxvals=maxvals, elem_scale=scale)


def token_quantize(acts: np.ndarray, cfg: TokenQuantConfig) -> QuantizedTensor:
    """Quantize each token row with its own absmax clip value, online.

    Zero rows pass through as zeros.
    """
    acts = _canon(acts, "token_quantize")
    if acts.ndim != 2:
        raise ShapeError(f"token_quantize expects (tokens, features), got {acts.shape}")
    maxvals = np.abs(acts).max(axis=1, keepdims=True)
    codes, scale, _ = _fp_encode(acts, cfg.fmt, np.broadcast_to(maxvals, acts.shape))
    return QuantizedTensor(codes=codes, fmt=cfg.fmt, shape=acts.shape,
                           group_size=acts.shape[1], group_axis=1,
                           group_maxvals=maxvals, elem_scale=scale)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct real values from codes; exact on everything a quantizer emits."""
    if isinstance(q.fmt, IntQuantParams):
        p = q.fmt
        if q.codes.min(initial=0) < p.code_min or q.codes.max(initial=0) > p.code_max:
            raise DecodeError("integer code outside the configured clip bounds")
        return ((q.codes.astype(np.float64) - p.zero_point) * p.scale).astype(DTYPE)
    values = _fp_decode(q.codes, q.fmt, q.elem_maxvals())
    return values.astype(DTYPE)


def quantize_dequantize(a: np.ndarray, fmt: FpFormat) -> np.ndarray:
    """Round-trip convenience: the quantized reconstruction of ``a``."""
    return dequantize(fp_minmax_quantize(a, fmt))
