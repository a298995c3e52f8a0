"""A miniature diffusion-transformer test bed.

One block = AdaLN-modulated self-attention, cross-attention on a conditioning
sequence, and a gated GELU feed-forward, all residual.  The modulation
parameters (three scale/shift pairs and the feed-forward gate) come from a
small MLP on a sinusoidal timestep embedding plus a per-block embedding; that
MLP stays unquantized.  The ten weight matrices of the main path are the
quantization targets.

The forward pass runs in float64 on the deterministic matmul so results are
bitwise reproducible; the block backward is written out by hand against the
fixed graph (no autodiff) and returns gradients for the ten matrices, which
is all the block calibrator needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import fileio
from .adaround import (CalibConfig, calibrate_layer, finalize_mask, init_mask,
                       regularizer, _beta_at, _soft_forward, _soft_backward)
from .errors import ConfigError, NumericError, ShapeError
from .formats import parse_format
from .quantize import TokenQuantConfig, dequantize, group_quantize, token_quantize
from .tensor import (gelu_f64, gelu_grad_f64, layer_norm_bwd_f64, layer_norm_f64,
                     make_rng, matmul_fast, softmax_f64)

QUANT_MATS = ("wq", "wk", "wv", "wo", "cq", "ck", "cv", "co", "ff1", "ff2")
MOD_CHUNKS = 7  # sc1, sh1, sc2, sh2, sc3, sh3, gate


@dataclass(frozen=True)
class ToyDiTConfig:
    embed: int = 64
    heads: int = 4
    tokens: int = 16
    blocks: int = 2
    ff_expansion: int = 4
    cond_tokens: int = 4

    def __post_init__(self):
        if self.embed % self.heads:
            raise ConfigError("embed must be divisible by heads")


@dataclass
class BlockParams:
    mats: dict
    embed: np.ndarray


@dataclass
class ToyDiTModel:
    cfg: ToyDiTConfig
    blocks: list
    adaln_w1: np.ndarray
    adaln_w2: np.ndarray
    adaln_b2: np.ndarray


def _heavy(rng, out_dim, in_dim, outlier_frac, outlier_mag):
    """Gaussian bulk with sparse large outliers and per-row scale jitter."""
    w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
    spikes = rng.random((out_dim, in_dim)) < outlier_frac
    w = np.where(spikes, w * outlier_mag, w)
    w *= np.exp2(rng.uniform(-1.0, 1.0, (out_dim, 1)))
    return w


def make_toy_model(seed: int, cfg: ToyDiTConfig | None = None, init: str = "heavy") -> ToyDiTModel:
    """Seeded toy model; "heavy" init plants outliers that pin group maxvals.

    The feed-forward input projection gets a denser, stronger outlier
    population than the attention matrices, mimicking the skewed ranges that
    make that layer format-sensitive.
    """
    if init not in ("heavy", "gauss"):
        raise ConfigError(f"unknown init {init!r}")
    cfg = cfg or ToyDiTConfig()
    rng = make_rng(seed)
    d, ff = cfg.embed, cfg.embed * cfg.ff_expansion
    dims = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "cq": (d, d), "ck": (d, d), "cv": (d, d), "co": (d, d),
            "ff1": (ff, d), "ff2": (d, ff)}
    blocks = []
    for _ in range(cfg.blocks):
        mats = {}
        for name, (o, i) in dims.items():
            if init == "gauss":
                mats[name] = rng.standard_normal((o, i)) / np.sqrt(i)
            elif name == "ff1":
                mats[name] = _heavy(rng, o, i, 0.04, 14.0)
            else:
                mats[name] = _heavy(rng, o, i, 0.01, 6.0)
        blocks.append(BlockParams(mats=mats, embed=rng.standard_normal(d) * 0.5))
    w1 = rng.standard_normal((d, d)) / np.sqrt(d) * 0.5
    w2 = rng.standard_normal((MOD_CHUNKS * d, d)) / np.sqrt(d) * 0.2
    b2 = np.zeros(MOD_CHUNKS * d)
    b2[6 * d:] = 1.0  # open the feed-forward gate at init
    return ToyDiTModel(cfg=cfg, blocks=blocks, adaln_w1=w1, adaln_w2=w2, adaln_b2=b2)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos embedding of timesteps in [0, 1]."""
    t = np.asarray(t, dtype=np.float64) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _mod_params(model: ToyDiTModel, bi: int, t: np.ndarray):
    """The seven modulation chunks for block ``bi``, each (B, 1, d)."""
    d = model.cfg.embed
    s = sinusoidal_embedding(t, d) + model.blocks[bi].embed
    h = gelu_f64(matmul_fast(s, model.adaln_w1.T))
    mods = matmul_fast(h, model.adaln_w2.T) + model.adaln_b2
    return [mods[:, i * d:(i + 1) * d][:, None, :] for i in range(MOD_CHUNKS)]


def _tok2d(x):
    return x.reshape(-1, x.shape[-1])


def _mat_apply(w, x, afmt):
    """Token-rows times a weight matrix, optionally through the online
    activation quantizer."""
    x2 = _tok2d(x)
    if afmt is not None:
        x2 = dequantize(token_quantize(x2, TokenQuantConfig(afmt))).astype(np.float64)
    y = matmul_fast(x2, w.T)
    return y.reshape(x.shape[:-1] + (w.shape[0],))


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention(q, k, v, heads):
    """Multi-head softmax attention; returns merged context plus cache."""
    qh, kh, vh = (_split_heads(a, heads) for a in (q, k, v))
    inv = 1.0 / np.sqrt(qh.shape[-1])
    logits = matmul_fast(qh, kh.transpose(0, 1, 3, 2)) * inv
    p = softmax_f64(logits, axis=-1)
    ctx = matmul_fast(p, vh)
    return _merge_heads(ctx), (qh, kh, vh, p, inv)


def _attention_bwd(g_ctx, cache, heads):
    qh, kh, vh, p, inv = cache
    g_ctx_h = _split_heads(g_ctx, heads)
    g_p = matmul_fast(g_ctx_h, vh.transpose(0, 1, 3, 2))
    g_vh = matmul_fast(p.transpose(0, 1, 3, 2), g_ctx_h)
    g_logits = p * (g_p - np.sum(g_p * p, axis=-1, keepdims=True))
    g_qh = matmul_fast(g_logits, kh) * inv
    g_kh = matmul_fast(g_logits.transpose(0, 1, 3, 2), qh) * inv
    return _merge_heads(g_qh), _merge_heads(g_kh), _merge_heads(g_vh)


def forward_block(model: ToyDiTModel, bi: int, x, cond, t,
                  overrides: dict | None = None, afmt=None, want_cache: bool = False):
    """One block forward; ``overrides`` substitutes any of the ten matrices."""
    cfg = model.cfg
    W = dict(model.blocks[bi].mats)
    if overrides:
        W.update(overrides)
    sc1, sh1, sc2, sh2, sc3, sh3, gate = _mod_params(model, bi, t)

    ln1, c_ln1 = layer_norm_f64(x)
    a1 = ln1 * (1.0 + sc1) + sh1
    q = _mat_apply(W["wq"], a1, afmt)
    k = _mat_apply(W["wk"], a1, afmt)
    v = _mat_apply(W["wv"], a1, afmt)
    ctx, c_att1 = _attention(q, k, v, cfg.heads)
    sa = _mat_apply(W["wo"], ctx, afmt)
    h1 = x + sa

    ln2, c_ln2 = layer_norm_f64(h1)
    a2 = ln2 * (1.0 + sc2) + sh2
    qc = _mat_apply(W["cq"], a2, afmt)
    kc = _mat_apply(W["ck"], cond, afmt)
    vc = _mat_apply(W["cv"], cond, afmt)
    ctx2, c_att2 = _attention(qc, kc, vc, cfg.heads)
    ca = _mat_apply(W["co"], ctx2, afmt)
    h2 = h1 + ca

    ln3, c_ln3 = layer_norm_f64(h2)
    a3 = ln3 * (1.0 + sc3) + sh3
    f1 = _mat_apply(W["ff1"], a3, afmt)
    g = gelu_f64(f1)
    f2 = _mat_apply(W["ff2"], g, afmt)
    out = h2 + gate * f2

    if not want_cache:
        return out, None
    cache = dict(W=W, x=x, cond=cond, sc1=sc1, sc2=sc2, sc3=sc3, gate=gate,
                 c_ln1=c_ln1, a1=a1, c_att1=c_att1, ctx=ctx,
                 c_ln2=c_ln2, a2=a2, c_att2=c_att2, ctx2=ctx2,
                 c_ln3=c_ln3, a3=a3, f1=f1, g=g)
    return out, cache


MAT_INPUT_KEYS = {"wq": "a1", "wk": "a1", "wv": "a1", "wo": "ctx",
                  "cq": "a2", "ck": "cond", "cv": "cond", "co": "ctx2",
                  "ff1": "a3", "ff2": "g"}


def mat_inputs(model: ToyDiTModel, bi: int, x, cond, t) -> dict:
    """Full-precision input rows seen by each of the ten matrices of a block."""
    _, cache = forward_block(model, bi, x, cond, t, want_cache=True)
    return {n: _tok2d(cache[MAT_INPUT_KEYS[n]]).copy() for n in QUANT_MATS}


def _dw(g_y, x):
    """Weight gradient for y = x @ w.T over token rows."""
    return matmul_fast(_tok2d(g_y).T, _tok2d(x))


def backward_block(model: ToyDiTModel, bi: int, cache: dict, g_out):
    """Gradients of a scalar loss wrt the ten matrices, given d loss / d out."""
    cfg = model.cfg
    W = cache["W"]
    grads = {}

    g_h2 = np.array(g_out)
    g_f2 = g_out * cache["gate"]
    grads["ff2"] = _dw(g_f2, cache["g"])
    g_g = _mat_apply(W["ff2"].T.copy(), g_f2, None)
    g_f1 = g_g * gelu_grad_f64(cache["f1"])
    grads["ff1"] = _dw(g_f1, cache["a3"])
    g_a3 = _mat_apply(W["ff1"].T.copy(), g_f1, None)
    g_h2 = g_h2 + layer_norm_bwd_f64(g_a3 * (1.0 + cache["sc3"]), cache["c_ln3"])

    g_h1 = np.array(g_h2)
    g_ca = g_h2
    grads["co"] = _dw(g_ca, cache["ctx2"])
    g_ctx2 = _mat_apply(W["co"].T.copy(), g_ca, None)
    g_qc, g_kc, g_vc = _attention_bwd(g_ctx2, cache["c_att2"], cfg.heads)
    grads["cq"] = _dw(g_qc, cache["a2"])
    grads["ck"] = _dw(g_kc, cache["cond"])
    grads["cv"] = _dw(g_vc, cache["cond"])
    g_a2 = _mat_apply(W["cq"].T.copy(), g_qc, None)
    g_h1 = g_h1 + layer_norm_bwd_f64(g_a2 * (1.0 + cache["sc2"]), cache["c_ln2"])

    g_sa = g_h1
    grads["wo"] = _dw(g_sa, cache["ctx"])
    g_ctx = _mat_apply(W["wo"].T.copy(), g_sa, None)
    g_q, g_k, g_v = _attention_bwd(g_ctx, cache["c_att1"], cfg.heads)
    grads["wq"] = _dw(g_q, cache["a1"])
    grads["wk"] = _dw(g_k, cache["a1"])
    grads["wv"] = _dw(g_v, cache["a1"])
    g_a1 = (_mat_apply(W["wq"].T.copy(), g_q, None)
            + _mat_apply(W["wk"].T.copy(), g_k, None)
            + _mat_apply(W["wv"].T.copy(), g_v, None))
    # input gradient not needed: calibration is per block
    _ = layer_norm_bwd_f64(g_a1 * (1.0 + cache["sc1"]), cache["c_ln1"])
    return grads


def forward_model(model: ToyDiTModel, x, cond, t, per_block_overrides=None, afmt=None):
    """All blocks in sequence; overrides is a list of per-block dicts."""
    h = np.asarray(x, dtype=np.float64)
    for bi in range(model.cfg.blocks):
        ov = per_block_overrides[bi] if per_block_overrides else None
        h, _ = forward_block(model, bi, h, cond, t, overrides=ov, afmt=afmt)
    return h


@dataclass
class TrajectorySet:
    """Teacher-forced calibration data: one row per (sample, timestep)."""

    block_inputs: list
    block_outputs: list
    cond: np.ndarray
    ts: np.ndarray
    states: np.ndarray   # (samples, steps, tokens, embed) pre-block states
    timesteps: np.ndarray  # the step grid, shape (steps,)


def run_trajectories(model: ToyDiTModel, n_samples: int, steps: int, seed: int,
                     beta: float = 0.1, drift: float = 0.05) -> TrajectorySet:
    """Variance-preserving synthetic denoising runs through the FP model.

    Each update mixes the state toward fresh noise and nudges it with the
    model output, so activation ranges stay O(1) across steps while their
    distribution shifts with t.
    """
    cfg = model.cfg
    rng = make_rng(seed)
    cond = rng.standard_normal((n_samples, cfg.cond_tokens, cfg.embed))
    x = rng.standard_normal((n_samples, cfg.tokens, cfg.embed))
    tgrid = np.linspace(1.0, 0.0, steps)
    states = np.empty((n_samples, steps, cfg.tokens, cfg.embed))
    b_in = [[] for _ in range(cfg.blocks)]
    b_out = [[] for _ in range(cfg.blocks)]
    ts_rows = []
    for si, tval in enumerate(tgrid):
        states[:, si] = x
        t = np.full(n_samples, tval)
        h = x
        for bi in range(cfg.blocks):
            b_in[bi].append(h)
            h, _ = forward_block(model, bi, h, cond, t)
            b_out[bi].append(h)
        ts_rows.append(t)
        noise = rng.standard_normal(x.shape)
        # convex mix with the model output keeps per-step RMS from compounding
        x = np.sqrt(1.0 - beta) * ((1.0 - drift) * x + drift * h) + np.sqrt(beta) * noise
    block_inputs = [np.concatenate(v, axis=0) for v in b_in]
    block_outputs = [np.concatenate(v, axis=0) for v in b_out]
    cond_rep = np.concatenate([cond] * steps, axis=0)
    ts = np.concatenate(ts_rows)
    return TrajectorySet(block_inputs=block_inputs, block_outputs=block_outputs,
                         cond=cond_rep, ts=ts, states=states, timesteps=tgrid)


@dataclass
class FormatAssignment:
    weight: str = "E2M1"
    ff1: str | None = None
    activation: str | None = None

    def fmt_for(self, name: str):
        if name == "ff1" and self.ff1:
            return parse_format(self.ff1)
        return parse_format(self.weight)


@dataclass
class BlockCalibReport:
    loss_history: list = field(repr=False)
    final_loss: float = 0.0
    rtn_loss: float = 0.0
    fallback: bool = False
    diverged: bool = False


@dataclass
class QuantizedModel:
    model: ToyDiTModel
    assignment: FormatAssignment
    group_size: int
    tensors: list            # per block: dict name -> QuantizedTensor
    reports: list = field(default_factory=list)

    def overrides(self) -> list:
        """Dequantized weights for every block, ready for forward_model."""
        return [{n: dequantize(q).astype(np.float64) for n, q in blk.items()}
                for blk in self.tensors]

    def afmt(self):
        return parse_format(self.assignment.activation) if self.assignment.activation else None


def _block_loss(model, bi, batch, overrides) -> float:
    x, cond, t, y_ref = batch
    out, _ = forward_block(model, bi, x, cond, t, overrides=overrides)
    err = out - y_ref
    return float(np.sum(err * err))


def calibrate_block(model: ToyDiTModel, bi: int, batch, quants: dict,
                    cfg: CalibConfig) -> tuple[dict, BlockCalibReport]:
    """Jointly learn rounding masks for all ten matrices of one block.

    The loss is the squared error of the block output on the calibration
    batch plus the binarization penalty summed over matrices.  The update
    runs in the logit coordinates of each gate with Adam: curvature through
    a whole block varies by orders of magnitude across matrices, and a raw
    gradient step that is stable for the stiffest element would never move
    the rest.  A block-level safeguard keeps plain rounding whenever the
    learned masks do not beat it.
    """
    x, cond, t, y_ref = batch
    mats = model.blocks[bi].mats
    masks = {n: init_mask(mats[n], quants[n], cfg.variant) for n in QUANT_MATS}
    rtn_over = {n: dequantize(quants[n]).astype(np.float64) for n in QUANT_MATS}
    rtn_loss = _block_loss(model, bi, batch, rtn_over)

    scales = {n: quants[n].elem_scale for n in QUANT_MATS}
    m1 = {n: np.zeros_like(mats[n], dtype=np.float64) for n in QUANT_MATS}
    m2 = {n: np.zeros_like(mats[n], dtype=np.float64) for n in QUANT_MATS}
    b1, b2, eps = 0.9, 0.999, 1e-8

    history, diverged = [], False
    for it in range(cfg.iters):
        beta = _beta_at(cfg, it)
        lam = 0.0 if it < int(cfg.iters * cfg.warmup) else cfg.lam
        soft, ctxs = {}, {}
        for n in QUANT_MATS:
            soft[n], ctxs[n] = _soft_forward(mats[n], quants[n], masks[n])
        out, cache = forward_block(model, bi, x, cond, t, overrides=soft, want_cache=True)
        err = out - y_ref
        frob = float(np.sum(err * err))
        if not np.isfinite(frob):
            diverged = True
            break
        history.append(frob)
        g_mats = backward_block(model, bi, cache, 2.0 * err)
        for n in QUANT_MATS:
            grad = _soft_backward(ctxs[n], g_mats[n], masks[n], quants[n], lam, beta)
            if masks[n].variant == "scale-aware":
                grad = grad * scales[n]
            m1[n] = b1 * m1[n] + (1.0 - b1) * grad
            m2[n] = b2 * m2[n] + (1.0 - b2) * grad * grad
            c1 = m1[n] / (1.0 - b1 ** (it + 1))
            c2 = m2[n] / (1.0 - b2 ** (it + 1))
            step = cfg.lr * c1 / (np.sqrt(c2) + eps)
            if masks[n].variant == "scale-aware":
                step = step * scales[n]
            masks[n].v = masks[n].v - step

    hard = {n: finalize_mask(quants[n], masks[n], mats[n]) for n in QUANT_MATS}
    hard_over = {n: dequantize(hard[n]).astype(np.float64) for n in QUANT_MATS}
    final = _block_loss(model, bi, batch, hard_over)
    fallback = diverged or final > rtn_loss
    if fallback:
        hard, final = dict(quants), rtn_loss
    report = BlockCalibReport(loss_history=history, final_loss=final,
                              rtn_loss=rtn_loss, fallback=fallback, diverged=diverged)
    return hard, report


def quantize_model(model: ToyDiTModel, assignment: FormatAssignment, group_size: int,
                   calib: TrajectorySet | None = None,
                   cfg: CalibConfig | None = None,
                   granularity: str = "layer") -> QuantizedModel:
    """Group-quantize every block; with calibration data, learn the rounding.

    ``granularity`` picks the reconstruction target: ``"layer"`` fits each
    matrix against its own float output (ten independent problems per block),
    ``"block"`` fits all ten masks jointly against the block output.
    """
    if granularity not in ("layer", "block"):
        raise ConfigError(f"unknown calibration granularity {granularity!r}")
    tensors, reports = [], []
    for bi in range(model.cfg.blocks):
        quants = {n: group_quantize(model.blocks[bi].mats[n], assignment.fmt_for(n), group_size)
                  for n in QUANT_MATS}
        if calib is not None:
            ccfg = cfg or CalibConfig()
            if granularity == "block":
                batch = (calib.block_inputs[bi], calib.cond, calib.ts, calib.block_outputs[bi])
                quants, rep = calibrate_block(model, bi, batch, quants, ccfg)
                reports.append(rep)
            else:
                xs = mat_inputs(model, bi, calib.block_inputs[bi], calib.cond, calib.ts)
                layer_reps = {}
                for n in QUANT_MATS:
                    res = calibrate_layer(model.blocks[bi].mats[n], xs[n], ccfg, q=quants[n])
                    quants[n] = res.quantized
                    layer_reps[n] = res
                reports.append(layer_reps)
        tensors.append(quants)
    return QuantizedModel(model=model, assignment=assignment, group_size=group_size,
                          tensors=tensors, reports=reports)


def save_checkpoint(model: ToyDiTModel, dirpath) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    names = {}
    for bi, blk in enumerate(model.blocks):
        for n, w in blk.mats.items():
            names[f"blocks.{bi}.{n}"] = w
        names[f"blocks.{bi}.embed"] = blk.embed
    names["adaln_w1"] = model.adaln_w1
    names["adaln_w2"] = model.adaln_w2
    names["adaln_b2"] = model.adaln_b2
    for n, w in names.items():
        fileio.write_fpqt(d / f"{n}.fpqt", w)
    fileio.write_json(d / "manifest.json", {
        "kind": "toy-dit", "config": asdict(model.cfg), "tensors": sorted(names)})


def load_checkpoint(dirpath) -> ToyDiTModel:
    d = Path(dirpath)
    man = fileio.read_json(d / "manifest.json")
    if man.get("kind") != "toy-dit":
        raise ConfigError(f"{dirpath}: not a toy model checkpoint")
    cfg = ToyDiTConfig(**man["config"])
    get = lambda n: fileio.read_fpqt(d / f"{n}.fpqt").astype(np.float64)
    blocks = []
    for bi in range(cfg.blocks):
        mats = {n: get(f"blocks.{bi}.{n}") for n in QUANT_MATS}
        blocks.append(BlockParams(mats=mats, embed=get(f"blocks.{bi}.embed")))
    return ToyDiTModel(cfg=cfg, blocks=blocks, adaln_w1=get("adaln_w1"),
                       adaln_w2=get("adaln_w2"), adaln_b2=get("adaln_b2"))


def resolve_model(spec: str) -> ToyDiTModel:
    """A model argument: either a checkpoint directory or "toy:<seed>"."""
    if isinstance(spec, str) and spec.startswith("toy:"):
        try:
            seed = int(spec[4:])
        except ValueError as e:
            raise ConfigError(f"bad toy model spec {spec!r}") from e
        return make_toy_model(seed)
    p = Path(spec)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"{spec}: no checkpoint manifest found")
    return load_checkpoint(p)
