"""Command-line front end.

Six subcommands: ``grid``, ``quantize``, ``calibrate``, ``stats``, ``cost``,
``sweep``.  Report commands write a CSV (or JSON for ``calibrate``) plus a
rendered PNG into the output directory; ``quantize`` writes a single
quantized-tensor file.  Exit codes: 0 on success, 2 for configuration
problems (bad flags, malformed config, shape misuse), 3 for numeric
failures (divergence, NaN, corrupt payloads).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, fileio, plots
from .adaround import CalibConfig
from .dit import FormatAssignment, QUANT_MATS, quantize_model, resolve_model, run_trajectories
from .errors import ConfigError, DecodeError, NumericError, ShapeError
from .formats import parse_format
from .quantize import group_quantize

DEFAULT_FORMATS = ("E0M3", "E1M2", "E2M1", "E3M0")


def _out_dir(args) -> Path:
    d = Path(args.out or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_config(args) -> dict:
    if not args.config:
        return {}
    cfg = fileio.read_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _calib_config(args, overrides: dict) -> CalibConfig:
    fields = {k: overrides[k] for k in
              ("variant", "iters", "lr", "lam", "beta_start", "beta_end",
               "warmup", "group_size", "seed") if k in overrides}
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for flag in ("variant", "iters", "group_size"):
        v = getattr(args, flag, None)
        if v is not None:
            fields[flag] = v
    fields.setdefault("seed", args.seed)
    return CalibConfig(**fields)


def cmd_grid(args) -> None:
    fmts = args.fmts.split(",") if args.fmts else list(DEFAULT_FORMATS)
    fmts = [f for f in fmts if f]
    rows = analysis.grid_report(fmts, maxval=args.maxval)
    out = _out_dir(args)
    fileio.write_csv(out / "grid.csv", analysis.GRID_HEADER, rows)
    plots.plot_grid(rows, out / "grid.png")


def cmd_quantize(args) -> None:
    fmt = parse_format(args.fmt)
    w = fileio.read_fpqt(args.infile)
    q = group_quantize(w, fmt, args.group_size)
    if args.out is None:
        raise ConfigError("quantize requires --out for the encoded tensor")
    fileio.write_quantized(args.out, q)


def cmd_calibrate(args) -> None:
    model = resolve_model(args.model)
    cfg = _calib_config(args, _load_config(args))
    traj = run_trajectories(model, n_samples=args.samples, steps=args.steps,
                            seed=args.seed)
    assignment = FormatAssignment(weight=args.wfmt, ff1=args.ff1_fmt,
                                  activation=args.afmt)
    qm = quantize_model(model, assignment, args.group_size, calib=traj,
                        cfg=cfg, granularity=args.granularity)
    out = _out_dir(args)
    report = {"model": args.model, "weight_format": args.wfmt,
              "ff1_format": args.ff1_fmt, "activation_format": args.afmt,
              "group_size": args.group_size, "granularity": args.granularity,
              "samples": args.samples, "steps": args.steps, "seed": args.seed,
              "config": vars(cfg).copy(), "blocks": []}
    histories = {}
    for bi, (tensors, rep) in enumerate(zip(qm.tensors, qm.reports)):
        if args.granularity == "block":
            entry = {"loss_history": rep.loss_history,
                     "final_loss": rep.final_loss, "rtn_loss": rep.rtn_loss,
                     "fallback": rep.fallback, "diverged": rep.diverged}
            histories[f"block{bi}"] = rep.loss_history
        else:
            entry = {}
            for name, r in rep.items():
                entry[name] = {"loss_history": r.loss_history,
                               "final_loss": r.final_loss,
                               "rtn_loss": r.rtn_loss, "fallback": r.fallback,
                               "diverged": r.diverged}
                histories[f"block{bi}.{name}"] = r.loss_history
        report["blocks"].append(entry)
        for name in QUANT_MATS:
            fileio.write_quantized(out / f"block{bi}.{name}.q", tensors[name])
    fileio.write_json(out / "report.json", report)
    plots.plot_loss_history(histories, out / "loss.png")


def cmd_stats(args) -> None:
    model = resolve_model(args.model)
    traj = run_trajectories(model, n_samples=args.samples, steps=args.steps,
                            seed=args.seed)
    stats = analysis.collect_activation_stats(model, traj)
    out = _out_dir(args)
    fileio.write_csv(out / "stats.csv", analysis.STATS_HEADER,
                     analysis.stats_rows(stats))
    plots.plot_stats(stats, out / "stats.png")


def cmd_cost(args) -> None:
    manifest = fileio.read_json(args.manifest) if args.manifest else None
    rep = analysis.cost_report(manifest, wbits=args.wbits, abits=args.abits,
                               group_size=args.group_size,
                               scale_bits=args.scale_bits)
    base = analysis.cost_report(manifest)
    out = _out_dir(args)
    rows = analysis.cost_rows(rep) + [
        ("size_ratio_vs_16bit", rep.model_size_bytes / base.model_size_bytes),
        ("bops_ratio_vs_16bit", rep.bops / base.bops)]
    fileio.write_csv(out / "cost.csv", analysis.COST_HEADER, rows)
    plots.plot_cost([("w16a16", base),
                     (f"w{args.wbits}a{args.abits}", rep)], out / "cost.png")


def cmd_sweep(args) -> None:
    budgets = tuple(int(b) for b in args.budgets.split(","))
    variants = tuple(v for v in args.variants.split(",") if v)
    rows = analysis.budget_sweep(seed=args.seed, variants=variants,
                                 budgets=budgets, lr=args.lr, lam=args.lam,
                                 fmt=args.fmt, group_size=args.group_size)
    out = _out_dir(args)
    fileio.write_csv(out / "sweep.csv", analysis.SWEEP_HEADER, rows)
    plots.plot_sweep(rows, out / "sweep.png")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpqkit",
                                description="Low-bit FP quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None)
        sp.add_argument("--config", default=None)

    g = sub.add_parser("grid", help="representable values and densities")
    common(g)
    g.add_argument("--fmts", default=None,
                   help="comma-separated format names (default all 4-bit)")
    g.add_argument("--maxval", type=float, default=1.0)
    g.set_defaults(func=cmd_grid)

    q = sub.add_parser("quantize", help="group-quantize one tensor file")
    common(q)
    q.add_argument("--fmt", required=True)
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--in", dest="infile", required=True)
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("calibrate", help="quantize a model with learned rounding")
    common(c)
    c.add_argument("--model", required=True,
                   help="checkpoint directory or toy:<seed>")
    c.add_argument("--wfmt", default="E2M1")
    c.add_argument("--ff1-fmt", default=None)
    c.add_argument("--afmt", default=None)
    c.add_argument("--group-size", type=int, default=128)
    c.add_argument("--iters", type=int, default=None)
    c.add_argument("--variant", default=None,
                   choices=("original", "scale-aware"))
    c.add_argument("--granularity", default="layer", choices=("layer", "block"))
    c.add_argument("--samples", type=int, default=4)
    c.add_argument("--steps", type=int, default=4)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("stats", help="activation-range statistics")
    common(s)
    s.add_argument("--model", default="toy:0")
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--steps", type=int, default=8)
    s.set_defaults(func=cmd_stats)

    co = sub.add_parser("cost", help="model size and BOPs accounting")
    common(co)
    co.add_argument("--wbits", type=int, default=4)
    co.add_argument("--abits", type=int, default=8)
    co.add_argument("--group-size", type=int, default=None)
    co.add_argument("--scale-bits", type=int, default=16)
    co.add_argument("--manifest", default=None, help="layer-table JSON path")
    co.set_defaults(func=cmd_cost)

    sw = sub.add_parser("sweep", help="calibration budget sweep")
    common(sw)
    sw.add_argument("--budgets", default="250,500,1000,2000")
    sw.add_argument("--variants", default="scale-aware,original")
    sw.add_argument("--lr", type=float, default=0.02)
    sw.add_argument("--lam", type=float, default=6.0)
    sw.add_argument("--fmt", default="E3M0")
    sw.add_argument("--group-size", type=int, default=32)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, DecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
