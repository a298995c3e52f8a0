"""Learned rounding for quantized layers, in two flavours.

Each weight keeps its floor code and a continuous gate decides floor vs
ceil.  The gate is a rectified sigmoid ``h(V) = clip(sigmoid(V)*1.2 - 0.1,
0, 1)``; the scale-aware variant stores the logit pre-multiplied by the
per-element scale (``V' = S * V``) and gates on ``h(V'/S)``, which makes
the logit gradient independent of S and equalizes the effective step size
across scale buckets.  Optimization is plain full-batch gradient descent on
the layer-output Frobenius error plus an annealed binarization penalty.

The soft weight is ``S * clip(floor(W/S) + h, -n_lim, n_lim)`` where n_lim
is the per-element top code of the grid bucket, so the soft path can never
leave the representable range.  Initialization reproduces the input weight
exactly, and finalization falls back to plain rounding whenever the learned
mask would be worse (or the loop diverges), so calibration never regresses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError
from .quantize import QuantizedTensor, dequantize, group_quantize
from .tensor import DTYPE, matmul_fast

log = logging.getLogger(__name__)

ZETA = 1.1
GAMMA = -0.1
STRETCH = ZETA - GAMMA  # 1.2


def _c64(a: np.ndarray) -> np.ndarray:
    """Float32 view widened to float64, matching the quantizer's working copy.

    Keeping both sides on the same representation stops floor(W/S) from
    straddling a bucket boundary between here and the quantizer.
    """
    return np.asarray(a, dtype=DTYPE).astype(np.float64)


def rectified_sigmoid(v: np.ndarray) -> np.ndarray:
    """Gate value h(V): a sigmoid stretched to overshoot [0, 1], then clipped."""
    sig = expit(np.asarray(v, dtype=np.float64))
    return np.clip(sig * STRETCH + GAMMA, 0.0, 1.0)


def scale_aware_gate(v_scaled: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Gate for the reparameterized logit: h(V'/S)."""
    scale = np.asarray(scale, dtype=np.float64)
    if not np.all(scale > 0):
        raise NumericError("scale_aware_gate requires strictly positive scales")
    return rectified_sigmoid(np.asarray(v_scaled, dtype=np.float64) / scale)


@dataclass
class RoundingMask:
    """Learnable rounding state for one weight matrix.

    ``v`` holds the raw logit for the original variant and the
    scale-premultiplied logit for the scale-aware one; ``gate()`` hides the
    difference.
    """

    v: np.ndarray
    scale: np.ndarray
    variant: str = "scale-aware"

    def __post_init__(self):
        if self.variant not in ("original", "scale-aware"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.v.shape != self.scale.shape:
            raise ShapeError("logit and scale shapes differ")

    def gate(self) -> np.ndarray:
        if self.variant == "scale-aware":
            return scale_aware_gate(self.v, self.scale)
        return rectified_sigmoid(self.v)

    def hard(self) -> np.ndarray:
        """Binarized gate: ceil wherever the learned preference is >= 1/2."""
        return (self.gate() >= 0.5).astype(np.float64)


def init_mask(w: np.ndarray, q: QuantizedTensor, variant: str = "scale-aware") -> RoundingMask:
    """Warm-start logits so the soft weight reproduces the quantized rounding of w.

    The gate is set to the fractional part of W/S, i.e. the soft weight
    starts at W itself (clipped to the grid); inverting the rectified
    sigmoid keeps every logit in its linear region.
    """
    w = _c64(w)
    scale = q.elem_scale
    if scale is None:
        raise ConfigError("quantized tensor carries no per-element scale")
    if w.shape != scale.shape:
        raise ShapeError("weight and scale shapes differ")
    frac = w / scale - np.floor(w / scale)
    # inverse of h: V = logit((h - gamma) / stretch), clipped clear of +-inf
    p = np.clip((frac - GAMMA) / STRETCH, 1e-9, 1 - 1e-9)
    v = np.log(p / (1.0 - p))
    if variant == "scale-aware":
        v = v * scale
    return RoundingMask(v=v, scale=scale.copy(), variant=variant)


def _n_limit(q: QuantizedTensor) -> np.ndarray:
    """Per-element magnitude cap of the soft code, the top index of each bucket."""
    return np.rint(q.elem_maxvals() / q.elem_scale)


def soft_quantized_weight(w: np.ndarray, q: QuantizedTensor, gate: np.ndarray) -> np.ndarray:
    """Continuous surrogate weight: S * clip(floor(W/S) + h, -n_lim, n_lim)."""
    w = _c64(w)
    s = q.elem_scale
    n_lim = _n_limit(q)
    soft_code = np.clip(np.floor(w / s) + gate, -n_lim, n_lim)
    return s * soft_code


def _beta_at(cfg: "CalibConfig", it: int) -> float:
    """Annealing temperature: off during warmup, then linear high -> low."""
    warm = int(cfg.iters * cfg.warmup)
    if it < warm or cfg.iters == warm:
        return cfg.beta_start
    t = (it - warm) / max(cfg.iters - warm - 1, 1)
    return cfg.beta_start + t * (cfg.beta_end - cfg.beta_start)


def regularizer(gate: np.ndarray, beta: float) -> float:
    """Binarization penalty sum(1 - |2h - 1|^beta); zero once every gate is 0/1."""
    return float(np.sum(1.0 - np.abs(2.0 * gate - 1.0) ** beta))


def reconstruction_loss(w, q, x, y_ref, mask, lam=0.01, beta=2.0) -> float:
    """Frobenius output error of the soft weight plus the binarization penalty."""
    gate = mask.gate()
    w_soft = soft_quantized_weight(w, q, gate)
    err = matmul_fast(x, w_soft.T) - y_ref
    return float(np.sum(err * err)) + lam * regularizer(gate, beta)


def _soft_forward(w, q, mask):
    """Soft weight plus the context the backward chain needs."""
    w = _c64(w)
    s = q.elem_scale
    n_lim = _n_limit(q)
    arg = mask.v / s if mask.variant == "scale-aware" else mask.v
    sig = expit(arg)
    raw = sig * STRETCH + GAMMA
    gate = np.clip(raw, 0.0, 1.0)
    gate_open = (raw > 0.0) & (raw < 1.0)
    pre_clip = np.floor(w / s) + gate
    soft_code = np.clip(pre_clip, -n_lim, n_lim)
    code_open = (pre_clip > -n_lim) & (pre_clip < n_lim)
    return s * soft_code, (s, sig, gate, gate_open, code_open)


def _soft_backward(ctx, g_wsoft, mask, q, lam, beta):
    """Chain d loss / d w_soft back to the mask logits.

    The Frobenius chain passes through two clips (soft code range, gate
    range); both contribute indicator masks.  The reparameterized logit
    cancels the S of ``d w_soft / d gate``; the penalty acts on the gate
    directly, so only the reparameterized variant picks up a 1/S there.
    """
    s, sig, gate, gate_open, code_open = ctx
    dsig = STRETCH * sig * (1.0 - sig)
    chain = g_wsoft * code_open * gate_open * dsig
    grad = chain if mask.variant == "scale-aware" else chain * s
    if lam != 0.0:
        ab = np.abs(2.0 * gate - 1.0)
        dpen = -2.0 * beta * ab ** (beta - 1.0) * np.sign(2.0 * gate - 1.0)
        pchain = dpen * gate_open * dsig
        if mask.variant == "scale-aware":
            pchain = pchain / s
        grad = grad + lam * pchain
    return grad


def _loss_and_grad(w, q, x, y_ref, mask, lam, beta):
    """Layer loss and its gradient in the mask's own logit parameterization."""
    w_soft, ctx = _soft_forward(w, q, mask)
    err = matmul_fast(x, w_soft.T) - y_ref
    frob = float(np.sum(err * err))
    g_wsoft = 2.0 * matmul_fast(err.T, x)
    grad = _soft_backward(ctx, g_wsoft, mask, q, lam, beta)
    pen = regularizer(ctx[2], beta) if lam != 0.0 else 0.0
    return frob + lam * pen, frob, grad


def loss_gradient(w, q, x, y_ref, mask, lam=0.01, beta=2.0) -> np.ndarray:
    """Gradient of ``reconstruction_loss`` with respect to the mask logits."""
    return _loss_and_grad(_c64(w), q, np.asarray(x, np.float64),
                          np.asarray(y_ref, np.float64), mask, lam, beta)[2]


@dataclass
class CalibConfig:
    variant: str = "scale-aware"
    iters: int = 1000
    lr: float = 0.05
    lam: float = 6.0
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    group_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("original", "scale-aware"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class CalibResult:
    quantized: QuantizedTensor
    mask: RoundingMask
    loss_history: list = field(repr=False)
    final_loss: float = 0.0
    rtn_loss: float = 0.0
    fallback: bool = False
    diverged: bool = False


def _hard_output_loss(w_hard, x, y_ref) -> float:
    err = matmul_fast(x, w_hard.T) - y_ref
    return float(np.sum(err * err))


def finalize_mask(q: QuantizedTensor, mask: RoundingMask, w: np.ndarray) -> QuantizedTensor:
    """Bake the binarized gate into grid codes (same clip as the soft path)."""
    w = _c64(w)
    s = q.elem_scale
    n_lim = _n_limit(q)
    code = np.clip(np.floor(w / s) + mask.hard(), -n_lim, n_lim)
    return _tensor_with_codes(q, code)


def _tensor_with_codes(q: QuantizedTensor, signed_mag_code: np.ndarray) -> QuantizedTensor:
    """Rebuild a QuantizedTensor whose value is S * signed_mag_code.

    The incoming code counts steps of the per-element scale; re-encoding the
    exact value through the minmax quantizer recovers canonical grid indices.
    A step that lands on a power-of-two bucket boundary has two encodings
    whose dequantized values can disagree by one ulp (libm's exp2 rounds the
    two exponents independently), so the match is checked to a few ulps and
    the canonical encoding wins.  Anything further off than that means the
    code really left the grid.
    """
    from .quantize import _fp_encode

    values = q.elem_scale * signed_mag_code
    codes, scale, check = _fp_encode(values, q.fmt, q.elem_maxvals())
    if not np.allclose(check, values, rtol=2 ** -48, atol=0.0):
        raise NumericError("re-encoded calibrated weight left the grid")
    return QuantizedTensor(codes=codes, fmt=q.fmt, shape=q.shape,
                           group_size=q.group_size, group_axis=q.group_axis,
                           group_maxvals=q.group_maxvals, elem_scale=scale,
                           zero_tensor=q.zero_tensor)


def calibrate_layer(w: np.ndarray, x: np.ndarray, cfg: CalibConfig,
                    q: QuantizedTensor | None = None) -> CalibResult:
    """Learn the rounding mask of one linear layer against its float output.

    ``x`` is the calibration batch (rows of input features), flattened from
    whatever leading shape the caller had.  ``q`` defaults to group-wise
    minmax quantization of ``w`` at ``cfg.group_size``.
    """
    from .formats import parse_format

    w = _c64(w)
    if w.ndim != 2:
        raise ShapeError(f"calibrate_layer expects a 2-D weight, got {w.shape}")
    x = np.asarray(x, dtype=np.float64).reshape(-1, w.shape[1])
    if q is None:
        q = group_quantize(w, parse_format("E2M1"), cfg.group_size)
    y_ref = matmul_fast(x, w.T)

    rtn = dequantize(q).astype(np.float64)
    rtn_loss = _hard_output_loss(rtn, x, y_ref)

    mask = init_mask(w, q, cfg.variant)
    history, diverged = [], False
    for it in range(cfg.iters):
        beta = _beta_at(cfg, it)
        lam = 0.0 if it < int(cfg.iters * cfg.warmup) else cfg.lam
        loss, frob, grad = _loss_and_grad(w, q, x, y_ref, mask, lam, beta)
        if not np.isfinite(loss):
            log.warning("calibration diverged at iteration %d; falling back", it)
            diverged = True
            break
        history.append(frob)
        mask.v = mask.v - cfg.lr * grad

    q_hard = finalize_mask(q, mask, w)
    final = _hard_output_loss(dequantize(q_hard).astype(np.float64), x, y_ref)
    fallback = diverged or final > rtn_loss
    if fallback:
        q_hard = q  # plain rounding is exactly the source tensor
        final = rtn_loss
    return CalibResult(quantized=q_hard, mask=mask, loss_history=history,
                       final_loss=final, rtn_loss=rtn_loss,
                       fallback=fallback, diverged=diverged)
