"""``ada-forge`` command line.

Exit codes: 0 success, 1 config error, 2 diverged trial, 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, nn
from .config import ConfigError, build_config, build_sweep, parse_overrides, parse_seeds, read_pairs
from .data import PRESETS, export_pair, make_pair
from .gradcheck import DEFAULT_MODELS, corrupted_relu, format_report, run_gradcheck
from .harness import curves_csv, run_conditions, run_sweep, verify_aggregate
from .trainer import build_for, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_ROOT = "runs"
ARTIFACT_VERSION = f"ada-forge v{__version__}"

log = logging.getLogger("ada_forge")


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("ADA_FORGE_OUT") or DEFAULT_ROOT)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out: Path, argv, config: dict, seeds, outputs: dict, **extra) -> Path:
    """Written before any trial runs; holds everything needed to re-run."""
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": list(argv), "config": config, "seeds": list(seeds),
           "version": ARTIFACT_VERSION, "outputs": outputs, **extra}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _config_from_args(args) -> tuple:
    pairs = read_pairs(args.config) if args.config else {}
    pairs.update(parse_overrides(args.set))
    return pairs


# ---------------------------------------------------------------- commands


def cmd_train(args, argv) -> int:
    pairs = _config_from_args(args)
    pairs.pop("axis", None), pairs.pop("values", None)
    seeds = pairs.pop("seeds", None)
    cfg, _ = build_config(pairs)
    if args.seeds or seeds:
        chosen = parse_seeds(args.seeds or seeds)
        if len(chosen) != 1:
            raise ConfigError("seeds: train takes exactly one seed")
        cfg = replace(cfg, seed=chosen[0])
    out = output_root(args.out) / f"train-{cfg.hash()}"
    outputs = {"trial": "trial.json", "checkpoint": "model.ckpt"}
    write_manifest(out, argv, cfg.to_dict(), [cfg.seed], outputs)

    model, pair = build_for(cfg)
    result = train(model, pair, cfg)
    (out / "trial.json").write_text(result.to_json())
    nn.save_checkpoint(model, out / "model.ckpt", config_hash=cfg.hash())
    log.info("trained in %.1fs", result.wall_time)
    print(f"P_T={result.final_p_t} P_S={result.final_p_s} diverged={result.diverged}")
    print(out)
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_sweep(args, argv) -> int:
    pairs = _config_from_args(args)
    spec = build_sweep(pairs, args.seeds)
    key = {"config": spec.base.to_dict(), "axis": spec.axis, "values": list(spec.values),
           "seeds": list(spec.seeds)}
    out = output_root(args.out) / f"sweep-{_digest(key)}"
    write_manifest(out, argv, spec.base.to_dict(), spec.seeds,
                   {"table": "sweep.csv", "trials": "trials/"}, axis=spec.axis, values=list(spec.values))
    table = run_sweep(spec, out, jobs=args.jobs)
    sys.stdout.write(table.to_csv())
    for row in table.rows:
        if row.all_diverged:
            log.warning("every trial diverged at %s=%s", spec.axis, row.axis_value)
        if row.low_confidence:
            log.warning("%s=%s rests on a single seed", spec.axis, row.axis_value)
    print(out)
    return EXIT_OK


def cmd_conditions(args, argv) -> int:
    pairs = _config_from_args(args)
    if args.family:
        pairs["family"] = args.family
    preset = args.preset or "mild"
    pairs["severity"] = str(PRESETS[preset])
    seeds_txt = args.seeds or pairs.pop("seeds", None)
    cfg, _ = build_config(pairs)
    seeds = parse_seeds(seeds_txt) if seeds_txt else (0, 1, 2, 3, 4)
    key = {"config": cfg.to_dict(), "preset": preset, "seeds": list(seeds), "patch": args.patch}
    out = output_root(args.out) / f"conditions-{_digest(key)}"
    write_manifest(out, argv, cfg.to_dict(), seeds, {"report": "conditions.json", "trials": "trials/"},
                   preset=preset, patch=args.patch)
    report = run_conditions(cfg.family, preset, seeds, base=cfg, include_patch=args.patch,
                            out_dir=out, jobs=args.jobs)
    for name, c in report.conditions.items():
        print(f"{name:15s} P_T {c.mean_pt:.4f} +- {c.std_pt:.4f} (median {c.median_pt:.4f})  "
              f"P_S {c.mean_ps:.4f} +- {c.std_ps:.4f}  diverged {c.diverged}")
    print(f"gap closure {report.gap_closure():.4f}")
    print(out)
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    if args.corrupt:
        with corrupted_relu():
            report = run_gradcheck(n_models=args.models, seed=args.seed)
    else:
        report = run_gradcheck(n_models=args.models, seed=args.seed)
    print(format_report(report))
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_curves(args, argv) -> int:
    out = output_root(args.out) / "curves"
    write_manifest(out, argv, {}, [], {"curves": "curves.csv"})
    path = out / "curves.csv"
    path.write_text(curves_csv())
    print(path)
    return EXIT_OK


def cmd_export_data(args, argv) -> int:
    pairs = _config_from_args(args)
    seeds = args.seeds or pairs.pop("seeds", None)
    cfg, _ = build_config(pairs)
    if seeds:
        chosen = parse_seeds(seeds)
        if len(chosen) != 1:
            raise ConfigError("seeds: export-data takes exactly one seed")
        cfg = replace(cfg, seed=chosen[0])
    spec = cfg.shift_spec()
    out = output_root(args.out) / f"data-{_digest(spec.__dict__)}"
    write_manifest(out, argv, cfg.to_dict(), [cfg.seed], {"manifest": "data.json"})
    export_pair(make_pair(spec), out)
    print(out)
    return EXIT_OK


def cmd_verify_aggregate(args, argv) -> int:
    target = Path(args.directory)
    if not (target / "sweep.csv").is_file():
        raise ConfigError(f"{target}: no sweep.csv found")
    problems = verify_aggregate(target)
    for p in problems:
        print(p)
    print("aggregate " + ("matches" if not problems else "MISMATCH"))
    return EXIT_VERIFY if problems else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ada-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=ARTIFACT_VERSION)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, jobs=False, seeds=True):
        if config:
            p.add_argument("--config", help="flat key=value file (or a run manifest.json)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        p.add_argument("--out", help="output root (default $ADA_FORGE_OUT or ./runs)")
        if seeds:
            p.add_argument("--seeds", help="comma-separated seeds")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel trials")
        return p

    common(sub.add_parser("train", help="one training run")).set_defaults(func=cmd_train)
    common(sub.add_parser("sweep", help="multi-seed sweep over one axis"), jobs=True).set_defaults(func=cmd_sweep)
    p = common(sub.add_parser("conditions", help="baseline / ADA / target-labeled comparison"), jobs=True)
    p.add_argument("--family")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--patch", action="store_true", help="also run patch-discriminator ADA")
    p.set_defaults(func=cmd_conditions)

    p = sub.add_parser("gradcheck", help="finite-difference check of routed gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", type=int, default=DEFAULT_MODELS)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    common(sub.add_parser("curves", help="analytic encoder loss/gradient curves"),
           config=False, seeds=False).set_defaults(func=cmd_curves)
    common(sub.add_parser("export-data", help="write a domain pair to disk")).set_defaults(func=cmd_export_data)
    p = sub.add_parser("verify-aggregate", help="recompute a sweep table from its trial files")
    p.add_argument("directory")
    p.set_defaults(func=cmd_verify_aggregate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except (ConfigError, nn.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
