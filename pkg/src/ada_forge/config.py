"""Flat ``key=value`` config files, ``--set`` overrides and sweep files."""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

from .data import PRESETS
from .harness import AXES, SweepSpec
from .trainer import AdaConfig


class ConfigError(ValueError):
    """Raised with a key-level message for any unparsable or unknown setting."""


_NONE = {"none", "null", ""}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _field_types() -> dict[str, tuple[type, bool]]:
    out = {}
    for f in fields(AdaConfig):
        ann = str(f.type)
        base = ann.split("|")[0].strip()
        out["lambda" if f.name == "lam" else f.name] = (
            {"int": int, "float": float, "bool": bool, "str": str}[base], "None" in ann)
    return out


FIELD_TYPES = _field_types()
AXIS_TYPES = {"lambda": float, "split_index": int, "disc_capacity_delta": int,
              "loss_kind": str, "warmup_mode": str, "condition": str}


def coerce(key: str, raw: str, typ: type, optional: bool = False):
    text = raw.strip()
    if optional and text.lower() in _NONE:
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None


def parse_pairs(lines, source: str) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def read_pairs(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {str(p)!r} does not exist")
    text = p.read_text()
    if p.suffix == ".json":
        # a RunManifest: re-run from its resolved config
        try:
            doc = json.loads(text)
            cfg = doc["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{p}: not a run manifest") from None
        pairs = {k: ("none" if v is None else str(v)) for k, v in cfg.items()}
        for k in ("axis", "values", "seeds"):
            if k in doc and doc[k] is not None:
                pairs[k] = ",".join(str(v) for v in doc[k]) if isinstance(doc[k], list) else str(doc[k])
        return pairs
    return parse_pairs(text.splitlines(), str(p))


def parse_overrides(items) -> dict[str, str]:
    return parse_pairs(list(items or []), "--set")


def build_config(pairs: dict[str, str], extra_keys=()) -> tuple[AdaConfig, dict[str, str]]:
    """AdaConfig from string pairs; returns leftovers whose keys are in ``extra_keys``."""
    kwargs, rest = {}, {}
    for key, raw in pairs.items():
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {raw!r}")
            kwargs["severity"] = PRESETS[raw]
        elif key in FIELD_TYPES:
            typ, optional = FIELD_TYPES[key]
            kwargs["lam" if key == "lambda" else key] = coerce(key, raw, typ, optional)
        elif key in extra_keys:
            rest[key] = raw
        else:
            raise ConfigError(f"{key}: unknown config key")
    try:
        return AdaConfig(**kwargs), rest
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: empty list")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: must be distinct")
    return seeds


def build_sweep(pairs: dict[str, str], seeds_override: str | None = None) -> SweepSpec:
    base, rest = build_config(pairs, extra_keys=("axis", "values", "seeds"))
    axis = rest.get("axis")
    if axis not in AXES:
        raise ConfigError(f"axis: expected one of {AXES}, got {axis!r}")
    if not rest.get("values"):
        raise ConfigError("values: missing or empty")
    typ = AXIS_TYPES[axis]
    values = tuple(coerce("values", v, typ) for v in rest["values"].split(","))
    seed_text = seeds_override or rest.get("seeds")
    seeds = parse_seeds(seed_text) if seed_text else (0, 1, 2, 3, 4)
    try:
        return SweepSpec(base, axis, values, seeds)
    except ValueError as exc:
        raise ConfigError(f"invalid sweep: {exc}") from None
