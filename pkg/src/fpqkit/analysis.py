"""Reporting helpers behind the CLI: grid tables, activation statistics,
storage/compute accounting, calibration budget sweeps, and the stacked
quantization comparison.

Everything here returns plain rows or small dataclasses; serialization is
the caller's business.  All randomness is routed through seeded generators
so every report is reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adaround import CalibConfig, calibrate_layer
from .dit import (FormatAssignment, QUANT_MATS, ToyDiTModel, TrajectorySet,
                  forward_block, make_toy_model, mat_inputs, quantize_model,
                  run_trajectories)
from .errors import ConfigError, ShapeError
from .formats import FpFormat, enumerate_grid, grid_density_near_zero, parse_format
from .quantize import dequantize, fp_minmax_quantize, group_quantize
from .tensor import gelu_f64, make_rng, matmul_fast

DENSITY_RADII = (1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2)

GRID_HEADER = ("format", "kind", "x", "value")


def _as_format(fmt, maxval: float) -> FpFormat:
    f = parse_format(fmt) if isinstance(fmt, str) else fmt
    if f.maxval is None:
        f = replace(f, maxval=maxval)
    return f


def grid_report(fmts, maxval: float = 1.0) -> list[tuple]:
    """Rows enumerating each format's representable values and how many grid
    points sit within the standard radii (fractions of the clip value).

    ``kind`` is ``value`` (x = 0-based index in ascending order) or
    ``density`` (x = radius, value = point count within it).
    """
    rows = []
    for fmt in fmts:
        f = _as_format(fmt, maxval)
        grid = enumerate_grid(f)
        for i, v in enumerate(grid.values):
            rows.append((f.name, "value", float(i), float(v)))
        for frac in DENSITY_RADII:
            radius = f.maxval * frac
            rows.append((f.name, "density", float(radius),
                         float(grid_density_near_zero(f, radius))))
    return rows


# ---------------------------------------------------------------------------
# activation statistics

STATS_HEADER = ("site", "step", "t", "q1", "median", "q3",
                "whisker_lo", "whisker_hi", "absmax")


@dataclass
class ActivationStats:
    """Per-timestep spread of one activation site's token absolute maxima.

    ``absmax`` has one row per timestep and one column per token row seen at
    that step.  The box statistics summarize each row: quartiles by linear
    interpolation and Tukey whiskers (the most extreme points within 1.5
    interquartile ranges of the quartiles).
    """

    site: str
    timesteps: np.ndarray
    absmax: np.ndarray
    q1: np.ndarray
    median: np.ndarray
    q3: np.ndarray
    whisker_lo: np.ndarray
    whisker_hi: np.ndarray
    channel_min: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        if np.any(self.absmax < 0):
            raise ShapeError("token absmax cannot be negative")
        if np.any(self.q1 > self.median) or np.any(self.median > self.q3):
            raise ShapeError("quartiles out of order")


def _box_row(vals: np.ndarray):
    q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    inside = vals[(vals >= q1 - 1.5 * iqr) & (vals <= q3 + 1.5 * iqr)]
    return q1, med, q3, float(inside.min()), float(inside.max())


class StatsCollector:
    """Streaming accumulator; one ``update`` per timestep slice."""

    def __init__(self, site: str, features: int):
        self.site = site
        self._absmax = []
        self._tvals = []
        self._cmin = np.full(features, np.inf)
        self._cmax = np.full(features, -np.inf)

    def update(self, t: float, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError(f"stats update expects 2-D rows, got {rows.shape}")
        self._absmax.append(np.max(np.abs(rows), axis=1))
        self._tvals.append(float(t))
        np.minimum(self._cmin, rows.min(axis=0), out=self._cmin)
        np.maximum(self._cmax, rows.max(axis=0), out=self._cmax)

    def finalize(self) -> ActivationStats:
        absmax = np.stack(self._absmax)
        boxes = np.array([_box_row(row) for row in absmax])
        return ActivationStats(site=self.site, timesteps=np.array(self._tvals),
                               absmax=absmax, q1=boxes[:, 0], median=boxes[:, 1],
                               q3=boxes[:, 2], whisker_lo=boxes[:, 3],
                               whisker_hi=boxes[:, 4], channel_min=self._cmin,
                               channel_max=self._cmax)


def collect_activation_stats(model: ToyDiTModel, traj: TrajectorySet) -> dict:
    """Token-absmax statistics at every quantized matrix input, per timestep.

    Processes the trajectory one timestep slice at a time; the result is
    identical to materializing all activations first and reducing once.
    """
    steps = len(traj.timesteps)
    n = traj.block_inputs[0].shape[0] // steps
    collectors = {}
    for si in range(steps):
        sl = slice(si * n, (si + 1) * n)
        t = traj.timesteps[si]
        for bi in range(model.cfg.blocks):
            xs = mat_inputs(model, bi, traj.block_inputs[bi][sl],
                            traj.cond[sl], traj.ts[sl])
            for name, rows in xs.items():
                site = f"block{bi}.{name}"
                if site not in collectors:
                    collectors[site] = StatsCollector(site, rows.shape[1])
                collectors[site].update(t, rows)
    return {site: c.finalize() for site, c in collectors.items()}


def stats_rows(stats: dict) -> list[tuple]:
    """Flatten a stats mapping into CSV rows (one per site and timestep)."""
    rows = []
    for site in sorted(stats):
        s = stats[site]
        for i, t in enumerate(s.timesteps):
            rows.append((site, i, float(t), float(s.q1[i]), float(s.median[i]),
                         float(s.q3[i]), float(s.whisker_lo[i]),
                         float(s.whisker_hi[i]), float(s.absmax[i].max())))
    return rows


# ---------------------------------------------------------------------------
# storage and compute accounting

COST_HEADER = ("quantity", "value")


def default_manifest() -> list[dict]:
    """Layer table standing in for the full-size backbone.

    One aggregate row carries every quantized projection (their parameter
    count and spatial extent chosen so the 16-bit checkpoint lands at
    610.86 MB decimal), one small row holds the layers that stay in 16 bit
    (time embedding, modulation, final projection).
    """
    return [
        {"name": "backbone", "out": 238539, "in": 1280, "spatial": 457,
         "quantize": True},
        {"name": "side", "out": 100080, "in": 1, "spatial": 457,
         "quantize": False},
    ]


@dataclass(frozen=True)
class CostReport:
    model_size_bytes: float
    bops: float
    quantized_params: int
    unquantized_params: int
    groups: int

    @property
    def model_size_mb(self) -> float:
        return self.model_size_bytes / 1e6


def cost_report(manifest: list[dict] | None = None, wbits: int = 16,
                abits: int = 16, group_size: int | None = None,
                scale_bits: int = 16) -> CostReport:
    """Checkpoint bytes and multiply bit-operations for one precision choice.

    Quantized layers store ``wbits`` per weight plus one ``scale_bits`` scale
    per group (groups of ``group_size`` along each output row); unquantized
    layers stay at 16 bit.  BOPs charge each multiply-accumulate at
    ``wbits * abits`` for quantized layers and ``16 * 16`` otherwise.
    """
    manifest = default_manifest() if manifest is None else manifest
    if wbits < 1 or abits < 1:
        raise ConfigError("bit-widths must be positive")
    size = 0.0
    bops = 0.0
    qparams = uparams = groups = 0
    for row in manifest:
        params = row["out"] * row["in"]
        macs = params * row["spatial"]
        if row["quantize"]:
            qparams += params
            size += params * wbits / 8.0
            if group_size is not None:
                g = row["out"] * -(-row["in"] // group_size)
                groups += g
                size += g * scale_bits / 8.0
            bops += macs * wbits * abits
        else:
            uparams += params
            size += params * 2.0
            bops += macs * 256.0
    return CostReport(model_size_bytes=size, bops=bops, quantized_params=qparams,
                      unquantized_params=uparams, groups=groups)


def cost_rows(report: CostReport) -> list[tuple]:
    return [("model_size_bytes", report.model_size_bytes),
            ("model_size_mb", report.model_size_mb),
            ("bops", report.bops),
            ("quantized_params", report.quantized_params),
            ("unquantized_params", report.unquantized_params),
            ("groups", report.groups)]


# ---------------------------------------------------------------------------
# calibration budget sweep

SWEEP_HEADER = ("variant", "iters", "final_loss")

SWEEP_BUDGETS = (250, 500, 1000, 2000)


def make_sweep_layer(seed: int, out: int = 16, inp: int = 64, batch: int = 96,
                     group_size: int = 32, bulk_sigma: float = 0.5,
                     spike: float = 4.0, damp: float = 0.25):
    """A layer built so rounding quality, not range, is what calibration moves.

    The leading lane of every group carries a +-``spike`` entry that pins the
    group maxval to a grid-exact value and leaves nothing for rounding to
    recover there; all improvable error lives in the small-scale bulk.  The
    calibration batch damps the spike lanes so their columns contribute
    little output energy.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((out, inp)) * bulk_sigma
    lanes = list(range(0, inp, group_size))
    for i in range(out):
        for j in lanes:
            w[i, j] = spike * rng.choice([-1.0, 1.0])
    x = rng.standard_normal((batch, inp))
    x[:, lanes] *= damp
    return w, x


def budget_sweep(seed: int = 2, variants=("scale-aware", "original"),
                 budgets=SWEEP_BUDGETS, lr: float = 0.02, lam: float = 6.0,
                 fmt: str = "E3M0", group_size: int = 32) -> list[tuple]:
    """Final hard loss per (variant, budget) on the shared sweep layer.

    Rows come out in grid order (variants outer, budgets inner) so repeated
    runs serialize identically.
    """
    w, x = make_sweep_layer(seed, group_size=group_size)
    q = group_quantize(w, parse_format(fmt), group_size)
    rows = []
    for variant in variants:
        for iters in budgets:
            cfg = CalibConfig(variant=variant, iters=int(iters), lr=lr, lam=lam,
                              group_size=group_size, seed=seed)
            res = calibrate_layer(w, x, cfg, q=q)
            rows.append((variant, int(iters), float(res.final_loss)))
    return rows


# ---------------------------------------------------------------------------
# stacked quantization comparison

STACK_HEADER = ("stage", "block_mse")

STACK_STAGES = ("minmax", "+group", "+adaround", "+e3m0-ff1")


def _block_mse(model: ToyDiTModel, traj: TrajectorySet, overrides_per_block) -> float:
    total, count = 0.0, 0
    for bi in range(model.cfg.blocks):
        out, _ = forward_block(model, bi, traj.block_inputs[bi], traj.cond,
                               traj.ts, overrides=overrides_per_block[bi])
        err = out - traj.block_outputs[bi]
        total += float(np.sum(err * err))
        count += err.size
    return total / count


def _model_overrides(qm) -> list[dict]:
    return [{n: dequantize(qm.tensors[bi][n]).astype(np.float64) for n in QUANT_MATS}
            for bi in range(len(qm.tensors))]


def ablation_stack(seed: int = 0, group_size: int = 128, n_samples: int = 4,
                   steps: int = 4, cfg: CalibConfig | None = None,
                   weight_fmt: str = "E2M1", ff1_fmt: str = "E3M0") -> list[tuple]:
    """Block-output MSE as pipeline components stack up.

    Stages: whole-tensor min-max quantization; group-wise scales; learned
    rounding (per-matrix reconstruction); and the coarser wide-range format
    on the feed-forward input projection.  Later stages reuse the earlier
    stages' solutions wherever the subproblem is unchanged, so each step
    isolates exactly one new component.
    """
    model = make_toy_model(seed)
    traj = run_trajectories(model, n_samples=n_samples, steps=steps, seed=seed + 100)
    cfg = cfg or CalibConfig(group_size=group_size)
    base_fmt = parse_format(weight_fmt)
    rows = []

    ov = [{n: dequantize(fp_minmax_quantize(model.blocks[bi].mats[n], base_fmt)).astype(np.float64)
           for n in QUANT_MATS} for bi in range(model.cfg.blocks)]
    rows.append((STACK_STAGES[0], _block_mse(model, traj, ov)))

    plain = quantize_model(model, FormatAssignment(weight=weight_fmt), group_size)
    rows.append((STACK_STAGES[1], _block_mse(model, traj, _model_overrides(plain))))

    calibrated = quantize_model(model, FormatAssignment(weight=weight_fmt),
                                group_size, calib=traj, cfg=cfg)
    rows.append((STACK_STAGES[2], _block_mse(model, traj, _model_overrides(calibrated))))

    mixed = quantize_model(model, FormatAssignment(weight=weight_fmt, ff1=ff1_fmt),
                           group_size, calib=traj, cfg=cfg)
    rows.append((STACK_STAGES[3], _block_mse(model, traj, _model_overrides(mixed))))
    return rows


# ---------------------------------------------------------------------------
# nonlinearity-weighted format comparison

def truncated_normal(rng: np.random.Generator, shape, bound: float = 2.0) -> np.ndarray:
    """Standard normal draws conditioned on |x| <= bound, by rejection."""
    need = int(np.prod(shape))
    out = np.empty(0)
    while out.size < need:
        draw = rng.standard_normal(max(need, 1024))
        out = np.concatenate([out, draw[np.abs(draw) <= bound]])
    return out[:need].reshape(shape)


def gelu_output_error(w: np.ndarray, fmt, x: np.ndarray,
                      group_size: int = 128) -> float:
    """Mean |GELU(x W_q^T) - GELU(x W^T)| under group-wise quantization."""
    f = parse_format(fmt) if isinstance(fmt, str) else fmt
    w = np.asarray(w, dtype=np.float64)
    wq = dequantize(group_quantize(w, f, group_size)).astype(np.float64)
    ref = gelu_f64(matmul_fast(x, w.T))
    approx = gelu_f64(matmul_fast(x, wq.T))
    return float(np.mean(np.abs(approx - ref)))


def gelu_format_comparison(seed: int, fmts=("E2M1", "E3M0"), rows: int = 256,
                           bound: float = 2.0, group_size: int = 128) -> dict:
    """GELU-output error of each format on one toy model's ff1 weights."""
    model = make_toy_model(seed)
    w = model.blocks[0].mats["ff1"]
    rng = make_rng(seed + 77)
    x = truncated_normal(rng, (rows, w.shape[1]), bound=bound)
    return {str(f): gelu_output_error(w, f, x, group_size=group_size) for f in fmts}
