"""Command line entry point.

    lcmae pretrain --config preset.json --seed 0 --out runs/b
    lcmae sweep    --config sweep.json  --out runs/ratio
    lcmae analyze  --config runs/b/preset.json --checkpoint runs/b/checkpoints/final.ckpt --out runs/b/analysis
    lcmae report   --out runs/ratio

``--config`` may also name a registered preset (``--config ablation-c``).
A sweep config is a JSON object ``{"kind": ..., "profile": ..., "seeds": [...], "steps": ...}``.
Exit codes: 0 success, 2 configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .trainkit.data import DatasetError
from .trainkit.presets import ConfigError, ExperimentPreset, get_preset, preset_names
from .trainkit.train import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
log = logging.getLogger("lcmae")


def _preset(arg: str, profile: str) -> ExperimentPreset:
    if arg in preset_names() or (not arg.endswith(".json") and not Path(arg).exists()):
        return get_preset(arg, profile)
    return ExperimentPreset.load(arg)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} outside the unsigned 64-bit range")
    return v


def cmd_pretrain(args) -> int:
    from .trainkit.evaluate import analyze
    from .trainkit.report import emit_report
    from .trainkit.train import train

    preset = _preset(args.config, args.profile)
    out = Path(args.out)
    res = train(preset, args.seed, out_dir=out, steps=args.steps,
                progress=(lambda s, l: log.info("step %d loss %.5f", s, l)) if args.verbose else None)
    rows = analyze(res.model, preset, res.dataset, args.seed)
    emit_report(out / "report", logs={preset.name: res.log}, metrics=rows, svg=args.svg)
    print(f"{preset.name}: {res.steps_run} steps, checkpoint {res.checkpoint}"
          + (f", collapse at step {res.collapse_step}" if res.collapse_step else ""))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainkit.sweep import run_sweep

    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("sweep config must be a JSON object")
    unknown = set(cfg) - {"kind", "profile", "seeds", "steps", "reference"}
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    kind = args.kind or cfg.get("kind")
    if not kind:
        raise ConfigError("sweep needs a kind (--kind or config 'kind')")
    seeds = cfg.get("seeds")
    if args.seed is not None:
        seeds = [args.seed]
    rep = run_sweep(kind, profile=cfg.get("profile", args.profile), seeds=seeds,
                    steps=args.steps or cfg.get("steps"), out_dir=args.out,
                    reference=cfg.get("reference", "classifier"))
    print(json.dumps(rep.summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .trainkit.evaluate import analyze
    from .trainkit.reference import load_reference
    from .trainkit.report import emit_report
    from .trainkit.train import load_model, resolve_dataset

    preset = _preset(args.config, args.profile)
    if not args.checkpoint:
        raise ConfigError("analyze needs --checkpoint")
    model = load_model(args.checkpoint, preset.model)
    ds = resolve_dataset(preset)
    ref = load_reference(args.reference) if args.reference else None
    rows = analyze(model, preset, ds, args.seed, reference=ref, dump_dir=Path(args.out) / "attention")
    emit_report(args.out, metrics=rows, svg=args.svg)
    print(f"{len(rows)} metric rows written to {Path(args.out) / 'metrics.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .trainkit.report import emit_report, read_metrics_csv
    from .trainkit.train import MetricsLog

    root = Path(args.out)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    rows, logs = [], {}
    for p in sorted(root.rglob("metrics.csv")):
        if p.parent == root / "report":
            continue
        try:
            rows.extend(read_metrics_csv(p))
        except ValueError:
            logs[p.parent.name] = MetricsLog.read_csv(p)
    emit_report(root / "report", logs=logs, metrics=rows, svg=True)
    print(f"report: {len(rows)} metric rows, {len(logs)} training logs -> {root / 'report'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lcmae", description="Desk-scale MAE / LC-MAE experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="preset JSON file or registered preset name")
        p.add_argument("--seed", type=_u64, default=None if not config_required else 0)
        p.add_argument("--out", required=True, help="output directory; all written paths are relative to it")
        p.add_argument("--profile", default="tiny", choices=("tiny", "desk"))
        p.add_argument("--svg", action="store_true", help="also write line-plot SVGs")

    p = sub.add_parser("pretrain", help="train one preset")
    common(p)
    p.add_argument("--steps", type=int, default=None, help="stop early after this many steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sweep", help="train and analyze a preset family")
    common(p, config_required=False)
    p.add_argument("--kind", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="run the analysis instruments on a checkpoint")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--reference", default=None, help="reference feature dump (checkpoint container)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="collect metrics CSVs under --out into a report")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="unused; accepted for a uniform interface")
    p.add_argument("--seed", type=_u64, default=None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
