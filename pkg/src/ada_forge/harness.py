"""Multi-seed sweeps, the three-condition comparison, and their file outputs."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import nn
from .data import IMAGE_SIZE, PRESETS, ROAD_SHAPE, make_pair
from .objectives import encoder_loss_curves
from .trainer import AdaConfig, TrialResult, baseline_config, build_for, network_spec, train

AXES = ("lambda", "split_index", "disc_capacity_delta", "loss_kind", "warmup_mode", "condition")
WARMUP_MODES = ("none", "checkpoint", "warmup", "both")
CONDITIONS = ("baseline", "ada", "target_labeled", "patch_ada")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_WARMUP = 15
PRETRAIN_SEED_OFFSET = 1000

# decade grids over lambda, per encoder loss
LAMBDA_GRIDS = {
    "minimax": tuple(10.0 ** -k for k in range(2, 9)),
    "confusion": tuple(10.0 ** k for k in range(1, -6, -1)),
}

SWEEP_COLUMNS = ("axis_value", "mean_pt", "std_pt", "mean_ps", "std_ps", "diverged")
CURVE_COLUMNS = ("d_output", "conf_loss", "conf_grad", "mm_loss", "mm_grad")


@dataclass(frozen=True)
class SweepSpec:
    base: AdaConfig
    axis: str
    values: tuple
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one axis value")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be a non-empty list of distinct integers")
        for v in self.values:
            trial_config(self, v, self.seeds[0], pretrain_dir=None, dry=True)


@dataclass
class SweepRow:
    axis_value: Any
    mean_pt: float
    std_pt: float
    mean_ps: float
    std_ps: float
    diverged: int
    n_trials: int
    low_confidence: bool = False
    all_diverged: bool = False


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow] = field(default_factory=list)

    def row(self, value) -> SweepRow:
        for r in self.rows:
            if r.axis_value == value:
                return r
        raise KeyError(value)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.axis_value), _fmt(r.mean_pt), _fmt(r.std_pt),
                        _fmt(r.mean_ps), _fmt(r.std_ps), r.diverged])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------ aggregation


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation of the finite entries.

    A single finite entry has std 0 by convention; none gives (nan, nan).
    """
    vals = np.array([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if vals.size == 0:
        return math.nan, math.nan
    if vals.size == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1))


def aggregate_row(axis_value, trials: Sequence[TrialResult]) -> SweepRow:
    # sort by seed so the float summation order never depends on completion order
    trials = sorted(trials, key=lambda t: t.seed)
    mpt, spt = aggregate([t.final_p_t for t in trials])
    mps, sps = aggregate([t.final_p_s for t in trials])
    n_div = sum(bool(t.diverged) for t in trials)
    finite = sum(t.final_p_t is not None and math.isfinite(t.final_p_t) for t in trials)
    return SweepRow(axis_value, mpt, spt, mps, sps, n_div, len(trials),
                    low_confidence=len(trials) < 2, all_diverged=n_div == len(trials) or finite == 0)


# ----------------------------------------------------------------- trials


def trial_config(spec: SweepSpec, value, seed: int, pretrain_dir: Path | None,
                 dry: bool = False) -> tuple[AdaConfig, str]:
    """Config and condition for one (axis value, seed) cell."""
    base = replace(spec.base, seed=seed)
    axis = spec.axis
    if axis == "lambda":
        return replace(base, lam=float(value)), "ada"
    if axis in ("split_index", "disc_capacity_delta"):
        cfg = replace(base, **{axis: int(value)})
        if dry:
            network_spec(cfg, input_shape_of(cfg.family))
        return cfg, "ada"
    if axis == "loss_kind":
        return replace(base, loss_kind=str(value)), "ada"
    if axis == "condition":
        if value not in CONDITIONS:
            raise ValueError(f"unknown condition {value!r}; expected one of {CONDITIONS}")
        if value == "patch_ada" and base.family != "roadway_seg":
            raise ValueError("patch_ada needs the roadway_seg family")
        return base, str(value)
    if axis == "warmup_mode":
        if value not in WARMUP_MODES:
            raise ValueError(f"unknown warmup mode {value!r}; expected one of {WARMUP_MODES}")
        warm = base.warmup_epochs or DEFAULT_WARMUP
        use_warm = value in ("warmup", "both")
        ckpt = None
        if value in ("checkpoint", "both") and not dry:
            ckpt = str(ensure_pretrained(base, pretrain_dir))
        return replace(base, warmup_epochs=warm if use_warm else 0, pretrain_checkpoint=ckpt), "ada"
    raise ValueError(f"unknown axis {axis!r}")


def input_shape_of(family: str) -> tuple[int, ...]:
    if family in ("gauss2d", "moons2d"):
        return (2,)
    return (3,) + ((IMAGE_SIZE, IMAGE_SIZE) if family == "texture_cls" else ROAD_SHAPE)


def ensure_pretrained(cfg: AdaConfig, pretrain_dir: Path | None) -> Path:
    """Source-only encoder from a different seed of the same family; cached on disk."""
    src_cfg = replace(baseline_config(cfg), seed=cfg.seed + PRETRAIN_SEED_OFFSET,
                      pretrain_checkpoint=None, warmup_epochs=cfg.total_epochs)
    root = Path(pretrain_dir) if pretrain_dir is not None else _default_out() / "pretrain"
    path = root / f"pretrain-{src_cfg.hash()}.ckpt"
    if not path.exists():
        model, pair = build_for(src_cfg)
        train(model, pair, src_cfg)
        tmp = path.with_suffix(".tmp")
        nn.save_checkpoint(model, tmp, config_hash=src_cfg.hash())
        os.replace(tmp, path)
    return path


def _default_out() -> Path:
    return Path(os.environ.get("ADA_FORGE_OUT", "runs"))


def run_condition_trial(cfg: AdaConfig, condition: str) -> TrialResult:
    """One training run under a named condition, sharing data across conditions."""
    pair = make_pair(cfg.shift_spec())
    if condition == "baseline":
        cfg = baseline_config(cfg)
    elif condition == "target_labeled":
        cfg = baseline_config(cfg)
        pair = replace(pair, source=pair.target_labeled)
    elif condition == "patch_ada":
        cfg = replace(cfg, patch_mode=True)
    elif condition != "ada":
        raise ValueError(f"unknown condition {condition!r}")
    model, pair = build_for(cfg, pair)
    result = train(model, pair, cfg)
    result.extra = dict(result.extra, condition=condition)
    return result


def _run_cell(args: tuple[AdaConfig, str]) -> TrialResult:
    return run_condition_trial(*args)


def _execute(cells: list[tuple[Any, int, AdaConfig, str]], jobs: int) -> dict[tuple, TrialResult]:
    work = [(cfg, cond) for _, _, cfg, cond in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]
    return {(v, s): r for (v, s, _, _), r in zip(cells, results)}


def trial_path(out_dir: Path, axis: str, value, seed: int) -> Path:
    return Path(out_dir) / "trials" / f"{axis}={_fmt(value)}" / f"seed={seed}.json"


def run_sweep(spec: SweepSpec, out_dir=None, jobs: int = 1) -> SweepTable:
    """One trial per (value, seed); rows in the order of ``spec.values``."""
    out = Path(out_dir) if out_dir is not None else None
    pretrain_dir = (out / "pretrain") if out is not None else None
    cells = []
    for v in spec.values:
        for s in spec.seeds:
            cfg, cond = trial_config(spec, v, s, pretrain_dir)
            cells.append((v, s, cfg, cond))
    results = _execute(cells, jobs)

    table = SweepTable(spec.axis)
    for v in spec.values:
        trials = [results[(v, s)] for s in spec.seeds]
        table.rows.append(aggregate_row(v, trials))
    if out is not None:
        for (v, s), r in sorted(results.items(), key=lambda kv: (_fmt(kv[0][0]), kv[0][1])):
            p = trial_path(out, spec.axis, v, s)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(r.to_json())
        (out / "sweep.csv").write_text(table.to_csv())
    return table


def verify_aggregate(out_dir) -> list[str]:
    """Recompute every sweep row from the trial JSON files; returns mismatches."""
    out = Path(out_dir)
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    problems = []
    trial_root = out / "trials"
    for row in rows:
        dirs = [d for d in trial_root.iterdir() if d.name.split("=", 1)[1] == row["axis_value"]]
        if len(dirs) != 1:
            problems.append(f"{row['axis_value']}: expected one trial directory, found {len(dirs)}")
            continue
        trials = [TrialResult.from_json(p.read_text()) for p in sorted(dirs[0].glob("seed=*.json"))]
        agg = aggregate_row(row["axis_value"], trials)
        for col, val in (("mean_pt", agg.mean_pt), ("std_pt", agg.std_pt),
                         ("mean_ps", agg.mean_ps), ("std_ps", agg.std_ps)):
            stored = float(row[col])
            if not (stored == val or (math.isnan(stored) and math.isnan(val))):
                problems.append(f"{row['axis_value']}: {col} is {stored} in CSV, {val} from trials")
        if int(row["diverged"]) != agg.diverged:
            problems.append(f"{row['axis_value']}: diverged count {row['diverged']} vs {agg.diverged}")
    return problems


# -------------------------------------------------------------- conditions


@dataclass
class ConditionSummary:
    condition: str
    p_t: list[float]
    p_s: list[float]
    diverged: int
    # summed trial wall time; not serialized, so reports stay byte-stable
    wall_time: float = 0.0

    @property
    def mean_pt(self) -> float:
        return aggregate(self.p_t)[0]

    @property
    def std_pt(self) -> float:
        return aggregate(self.p_t)[1]

    @property
    def median_pt(self) -> float:
        return _median(self.p_t)

    @property
    def mean_ps(self) -> float:
        return aggregate(self.p_s)[0]

    @property
    def std_ps(self) -> float:
        return aggregate(self.p_s)[1]

    @property
    def median_ps(self) -> float:
        return _median(self.p_s)


def _median(vals: Iterable[float | None]) -> float:
    v = [x for x in vals if x is not None and math.isfinite(x)]
    return float(np.median(v)) if v else math.nan


@dataclass
class ConditionReport:
    family: str
    preset: str
    seeds: tuple[int, ...]
    conditions: dict[str, ConditionSummary]

    def gap_closure(self) -> float:
        """(ADA - baseline) / (upper - baseline) on median target scores."""
        b = self.conditions["baseline"].median_pt
        a = self.conditions["ada"].median_pt
        u = self.conditions["target_labeled"].median_pt
        return (a - b) / (u - b) if u != b else math.nan

    def to_dict(self) -> dict:
        conds = {}
        for name, c in self.conditions.items():
            conds[name] = {
                "p_t": c.p_t, "p_s": c.p_s, "diverged": c.diverged,
                "mean_pt": c.mean_pt, "std_pt": c.std_pt, "median_pt": c.median_pt,
                "mean_ps": c.mean_ps, "std_ps": c.std_ps, "median_ps": c.median_ps,
            }
        return {"family": self.family, "preset": self.preset, "seeds": list(self.seeds),
                "gap_closure": self.gap_closure(), "conditions": conds}

    def to_json(self) -> str:
        from .trainer import _finite_or_none

        return json.dumps(_finite_or_none(self.to_dict()), sort_keys=True, indent=1) + "\n"


def condition_config(family: str, preset: str | float, base: AdaConfig | None = None) -> AdaConfig:
    severity = PRESETS[preset] if isinstance(preset, str) else float(preset)
    base = base if base is not None else AdaConfig()
    return replace(base, family=family, severity=severity)


def run_conditions(family: str, preset: str, seeds: Sequence[int] = DEFAULT_SEEDS,
                   base: AdaConfig | None = None, include_patch: bool = False,
                   out_dir=None, jobs: int = 1) -> ConditionReport:
    """Source-only baseline, ADA and target-labeled upper bound over seeds."""
    cfg = condition_config(family, preset, base)
    conds = ["baseline", "ada", "target_labeled"] + (["patch_ada"] if include_patch else [])
    spec = SweepSpec(cfg, "condition", tuple(conds), tuple(seeds))
    out = Path(out_dir) if out_dir is not None else None
    cells = [(c, s, replace(cfg, seed=s), c) for c in conds for s in spec.seeds]
    results = _execute(cells, jobs)
    summaries = {}
    for c in conds:
        trials = [results[(c, s)] for s in spec.seeds]
        summaries[c] = ConditionSummary(
            c, [t.final_p_t for t in trials], [t.final_p_s for t in trials],
            sum(bool(t.diverged) for t in trials), sum(t.wall_time for t in trials))
    report = ConditionReport(family, str(preset), spec.seeds, summaries)
    if out is not None:
        for (c, s), r in sorted(results.items()):
            p = trial_path(out, "condition", c, s)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(r.to_json())
        (out / "conditions.json").write_text(report.to_json())
    return report


# ------------------------------------------------------------------ curves


def curve_grid() -> np.ndarray:
    return np.arange(1, 100) / 100.0


def curves_csv() -> str:
    """Target-side encoder loss and gradient against discriminator output."""
    d = curve_grid()
    cols = encoder_loss_curves(d)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for i, x in enumerate(d):
        w.writerow([repr(float(x))] + [repr(float(cols[k][i])) for k in CURVE_COLUMNS[1:]])
    return buf.getvalue()
