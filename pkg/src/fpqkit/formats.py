"""ExMy minifloat format descriptors and their representable value grids.

A format has one sign bit, ``exp_bits`` exponent bits and ``man_bits``
mantissa bits.  The clipping value ``maxval`` fixes the exponent bias so
that the largest representable magnitude lands exactly on ``maxval``:

    bias = 2^e - log2(maxval) + log2(top) - 1

where ``top`` is the largest significand, ``2 - 2^-m`` when a normal range
exists (e >= 1) and ``2 - 2^(1-m)`` in the exponent-free case e == 0, whose
whole grid is the uniform "subnormal" range (spacing maxval / (2^m - 1), the
INT grid of the same width).

The grid is what min-max quantization can produce: zero, the subnormal
multiples of the smallest spacing, and per-octave normal values whose
spacing doubles with each exponent step.  Sign-magnitude encoding means +0
and -0 collapse, so an n-bit grid has 2^n - 1 distinct values.

All scale arithmetic goes through :func:`exp2` so that the quantizer, the
grid enumeration and dequantization agree bit for bit (C ``pow`` and
``exp2`` can differ in the last ulp).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

_FMT_RE = re.compile(r"^[Ee](\d+)[Mm](\d+)$")


def exp2(x):
    """The one exponential used for every scale computation."""
    return np.exp2(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class FpFormat:
    """ExMy datatype descriptor: exponent bits, mantissa bits, clip value."""

    exp_bits: int
    man_bits: int
    maxval: float | None = None

    def __post_init__(self):
        if self.exp_bits < 0 or self.man_bits < 0:
            raise ConfigError("exponent/mantissa bit counts must be non-negative")
        if self.exp_bits + self.man_bits < 1:
            raise ConfigError("format needs at least one exponent or mantissa bit")
        if self.exp_bits == 0 and self.man_bits < 1:
            raise ConfigError("exponent-free format needs man_bits >= 1")
        if self.maxval is not None:
            if not (math.isfinite(self.maxval) and self.maxval > 0):
                raise ConfigError(f"maxval must be positive and finite, got {self.maxval}")

    @property
    def bits(self) -> int:
        """Total width including the sign bit."""
        return 1 + self.exp_bits + self.man_bits

    @property
    def name(self) -> str:
        return f"E{self.exp_bits}M{self.man_bits}"

    def with_maxval(self, maxval: float) -> "FpFormat":
        return replace(self, maxval=float(maxval))

    def __str__(self) -> str:
        return self.name


def parse_format(text: str, bits: int | None = None) -> FpFormat:
    """Parse an "EeMm" format string, optionally checking the declared width."""
    m = _FMT_RE.match(text.strip())
    if not m:
        raise ConfigError(f"bad format string {text!r}, expected e.g. 'E2M1'")
    fmt = FpFormat(int(m.group(1)), int(m.group(2)))
    if bits is not None and fmt.bits != bits:
        raise ConfigError(
            f"format {fmt.name} is {fmt.bits}-bit, declared width is {bits}")
    return fmt


def fp_value(sign_bit: int, exp_code: int, mantissa, bias: float) -> float:
    """Value of a normal code: (-1)^s * 2^(p - b) * (1 + sum d_i / 2^i)."""
    if sign_bit not in (0, 1):
        raise ConfigError(f"sign bit must be 0 or 1, got {sign_bit}")
    if exp_code < 0:
        raise ConfigError(f"exponent code must be non-negative, got {exp_code}")
    frac = 0.0
    for i, d in enumerate(mantissa, start=1):
        if d not in (0, 1):
            raise ConfigError("mantissa entries must be bits")
        frac += d / (1 << i)
    return (-1.0) ** sign_bit * float(exp2(exp_code - bias)) * (1.0 + frac)


def fp_bias(fmt: FpFormat, maxval: float) -> float:
    """Exponent bias that puts the top of the grid exactly at ``maxval``."""
    if fmt.exp_bits == 0:
        top = 2.0 - 2.0 ** (1 - fmt.man_bits)
    else:
        top = 2.0 - 2.0 ** (-fmt.man_bits)
    return float(2.0 ** fmt.exp_bits - np.log2(maxval) + np.log2(top) - 1.0)


def _top_bucket(fmt: FpFormat) -> int:
    """Largest effective scale bucket; 1 when only the uniform range exists."""
    return max(2 ** fmt.exp_bits - 1, 1)


def grid_magnitudes(fmt: FpFormat, maxval: float) -> np.ndarray:
    """Non-negative grid values, ascending, starting at 0 and ending at maxval.

    Bucket p has spacing 2^(p - m - bias); bucket 1 covers the uniform
    subnormal range, and each bucket's top coincides with the next bucket's
    bottom.  The two encodings of a shared boundary point can disagree by
    one ulp (their exp2 calls round independently), so deduplication is by
    relative tolerance, keeping the lower bucket's representative.
    """
    b = fp_bias(fmt, maxval)
    m = fmt.man_bits
    p_top = _top_bucket(fmt)
    mags = [0.0]
    for p in range(1, p_top + 1):
        step = float(exp2(p - m - b))
        k_lo = 1 if p == 1 else 2 ** m
        k_hi = int(np.rint(maxval / step)) if p == p_top else 2 ** (m + 1)
        for k in range(k_lo, k_hi + 1):
            mags.append(k * step)
    arr = np.sort(np.array(mags, dtype=np.float64))
    keep = np.ones(arr.size, dtype=bool)
    keep[1:] = np.diff(arr) > arr[1:] * 2.0 ** -48
    return arr[keep]


@dataclass(frozen=True)
class ValueGrid:
    """The sorted, sign-symmetric set of representable values of a format."""

    fmt: FpFormat
    values: np.ndarray

    @property
    def cardinality(self) -> int:
        return int(self.values.size)

    @property
    def magnitudes(self) -> np.ndarray:
        """Non-negative half of the grid (0 included)."""
        return self.values[self.values >= 0]


def enumerate_grid(fmt: FpFormat) -> ValueGrid:
    """Every value min-max quantization to ``fmt`` can output."""
    if fmt.maxval is None:
        raise ConfigError("enumerate_grid needs a format with maxval set")
    mags = grid_magnitudes(fmt, fmt.maxval)
    values = np.unique(np.concatenate([-mags, mags]))
    return ValueGrid(fmt=fmt, values=values)


def grid_density_near_zero(fmt: FpFormat, radius: float) -> int:
    """Number of grid points v with |v| <= radius."""
    if fmt.maxval is None:
        raise ConfigError("grid_density_near_zero needs a format with maxval set")
    if not 0 <= radius <= fmt.maxval:
        raise ConfigError(f"radius must lie in [0, maxval], got {radius}")
    grid = enumerate_grid(fmt)
    return int(np.count_nonzero(np.abs(grid.values) <= radius))
