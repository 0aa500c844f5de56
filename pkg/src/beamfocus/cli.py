"""Command-line interface.

Verbs: ``train`` (one method -> curve CSV + checkpoint), ``eval``
(checkpoint -> deployment RSSI CSVs), ``sweep`` (error-matched noise
sweep), ``dims`` (control-dimension report), ``coverage`` (RSSI map CSV).
Figures are rendered next to every delimited output.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import CoverageGrid
from .errors import BeamfocusError, ConfigError, DimensionMismatch, NonFinite
from .harness import (
    RunConfig,
    dimensionality_report,
    evaluate,
    export_coverage_map,
    load_trainer,
    run_method,
    run_sweep,
    write_eval_csv,
    write_eval_summary_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beamfocus",
        description="Steered-reflector simulator and hierarchical RL trainer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one method; writes curve, echo, checkpoint")
    t.add_argument("--config", help="run-config JSON (defaults to the canonical desk scene)")
    t.add_argument("--method", choices=("allocator", "no_compat", "no_allocator", "random"))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--episodes", type=int, help="override total training episodes")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint under mobility")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sigma", type=float, default=0.0, help="localization error std (m)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--horizon", type=int, help="override evaluation timesteps")
    e.add_argument("--out", help="output directory (defaults next to the checkpoint)")

    s = sub.add_parser("sweep", help="error-matched training over the sigma list")
    s.add_argument("--config")
    s.add_argument("--quiet", action="store_true")

    d = sub.add_parser("dims", help="control-dimension report")
    d.add_argument("--k", type=int, required=True, help="number of users")
    d.add_argument("--l", type=int, required=True, help="number of segments")
    d.add_argument("--nr", type=int, required=True, help="tile rows")
    d.add_argument("--nc", type=int, required=True, help="tile cols")

    c = sub.add_parser("coverage", help="export a coverage map CSV (+PNG)")
    c.add_argument("--config")
    c.add_argument("--out", required=True, help="output CSV path")
    return parser


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {}
    if args.method:
        overrides["method"] = args.method
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
    if args.episodes:
        cfg = replace(cfg, ppo=replace(cfg.ppo, total_episodes=args.episodes))
    curve, ckpt = run_method(cfg, log_every=0 if args.quiet else 10)
    tail = curve[-min(100, len(curve)):]
    mean_tail = float(np.mean([r.mean_reward for r in tail]))
    print(f"trained {cfg.method}: {len(curve)} episodes, "
          f"final-{len(tail)} mean reward {mean_tail:.3f}")
    print(f"checkpoint: {ckpt}")
    print(f"outputs in: {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    trainer, cfg = load_trainer(args.checkpoint)
    report = evaluate(cfg, trainer, args.sigma, seed=args.seed, horizon=args.horizon)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out_dir / "eval_rssi.csv", [report])
    write_eval_summary_csv(out_dir / "eval_summary.csv", [report])
    from .report import plot_eval_rssi

    plot_eval_rssi([report], out_dir / "eval_rssi.png")
    print(f"eval {report.method} sigma={args.sigma:g}: "
          f"mean RSSI {report.mean_rssi_dbm:.2f} dBm (std {report.std_rssi_dbm:.2f})")
    print(f"outputs in: {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    reports = run_sweep(cfg, log_every=0 if args.quiet else 10)
    for rep in reports:
        print(f"sigma={rep.sigma_err:<5g} mean RSSI {rep.mean_rssi_dbm:8.2f} dBm "
              f"(std {rep.std_rssi_dbm:.2f})")
    print(f"outputs in: {cfg.out_dir}")
    return EXIT_OK


def cmd_dims(args) -> int:
    d_tile, d_focal = dimensionality_report(args.k, args.l, args.nr, args.nc)
    print(f"per-tile control dimension:  {d_tile}")
    print(f"focal-point control dimension: {d_focal}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = _load_config(args.config)
    grid = CoverageGrid(**cfg.coverage_grid)
    if cfg.coverage_focals is not None:
        focals = np.asarray(cfg.coverage_focals, dtype=float)
    else:
        focals = np.asarray([s.target for s in cfg.scene.segments], dtype=float)
    matrix = export_coverage_map(cfg, focals, grid, args.out)
    print(f"coverage map {matrix.shape[0]}x{matrix.shape[1]} cells -> {args.out}")
    print(f"peak {matrix.max():.2f} dBm, mean {matrix.mean():.2f} dBm")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "dims": cmd_dims,
        "coverage": cmd_coverage,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DimensionMismatch, OverflowError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFinite, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BeamfocusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
