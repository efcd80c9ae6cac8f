"""Procedural source/target dataset pairs with a controllable domain shift."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from sklearn.datasets import make_moons

FAMILIES = ("gauss2d", "moons2d", "texture_cls", "roadway_seg")
PRESETS = {"mild": 0.35, "severe": 0.85}

DEFAULT_CLASSES = {"gauss2d": 3, "moons2d": 2, "texture_cls": 20, "roadway_seg": 2}
DEFAULT_SIZES = {  # (n_train, n_test) per domain
    "gauss2d": (600, 600),
    "moons2d": (600, 600),
    "texture_cls": (400, 300),
    "roadway_seg": (160, 80),
}
IMAGE_SIZE = 32
ROAD_SHAPE = (48, 64)

# target colour cast for image families, per channel, scaled by severity
HUE_OFFSET = np.array([0.35, 0.05, -0.25])
# textures are zero-mean, so the cast is amplified to make the shift bite
CAST_GAIN = {"texture_cls": 3.0, "roadway_seg": 2.5}
TRANSLATION_DIR = np.array([1.0, 1.0]) / np.sqrt(2.0)


@dataclass(frozen=True)
class ShiftSpec:
    family: str
    severity: float
    classes: int | None = None
    n_train: int | None = None
    n_test: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity {self.severity} outside [0, 1]")
        c = self.n_classes
        if self.family == "moons2d" and c != 2:
            raise ValueError("moons2d has exactly 2 classes")
        if self.family == "roadway_seg" and c != 2:
            raise ValueError("roadway_seg labels free space vs obstacle (2 classes)")
        if c < 2:
            raise ValueError("need at least 2 classes")

    @property
    def n_classes(self) -> int:
        return self.classes if self.classes is not None else DEFAULT_CLASSES[self.family]

    @property
    def sizes(self) -> tuple[int, int]:
        d_train, d_test = DEFAULT_SIZES[self.family]
        return (self.n_train or d_train, self.n_test or d_test)


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class UnlabeledSet:
    inputs: np.ndarray
    domain: str

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class DomainPair:
    """Everything a trial needs.

    ``target`` is what adaptation may see. ``target_labeled`` holds the same
    target training inputs with labels and is reserved for the upper-bound
    condition; evaluation uses ``source_eval`` and ``target_eval``.
    """

    source: LabeledSet
    target: UnlabeledSet
    target_eval: LabeledSet
    shift_report: float
    source_eval: LabeledSet
    target_labeled: LabeledSet
    spec: ShiftSpec

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.source.inputs.shape[1:])


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _rotation(angle: float) -> np.ndarray:
    return np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


# ------------------------------------------------------------------ families


def gauss_means(c: int) -> np.ndarray:
    """Class means on a ring of radius 2, overall mean zero."""
    ang = 2 * np.pi * np.arange(c) / c + np.pi / 2
    return 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


GAUSS_STD = (0.3, 0.8)  # radial, tangential


def _gauss(n: int, c: int, rng: np.random.Generator):
    """Clusters stretched along the ring, so rotation moves mass across boundaries."""
    y = _balanced_labels(n, c, rng)
    means = gauss_means(c)
    radial = means[y] / np.linalg.norm(means[y], axis=1, keepdims=True)
    tangent = radial @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    z = rng.standard_normal((n, 2)) * GAUSS_STD
    x = means[y] + z[:, :1] * radial + z[:, 1:] * tangent
    return x, y


MOONS_CENTER = np.array([0.5, 0.25])
MOONS_NOISE = 0.1


def _moons(n: int, c: int, rng: np.random.Generator):
    x, y = make_moons(n_samples=(n - n // 2, n // 2), noise=MOONS_NOISE,
                      random_state=int(rng.integers(2**31 - 1)))
    perm = rng.permutation(n)
    return x[perm] - MOONS_CENTER, y[perm]


def texture_params(c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(kind, frequency, orientation) per class; kind 0 stripes, 1 checker."""
    kinds = np.arange(c) % 2
    freqs = 2.0 + (np.arange(c) // 2) % 5
    orients = np.pi * ((np.arange(c) // 10) % 2) / 4 + np.pi / 2 * ((np.arange(c) // 2) % 2)
    return kinds, freqs, orients


def _texture(n: int, c: int, rng: np.random.Generator):
    y = _balanced_labels(n, c, rng)
    kinds, freqs, orients = texture_params(c)
    s = IMAGE_SIZE
    yy, xx = np.mgrid[0:s, 0:s] / s
    ang = orients[y][:, None, None] + rng.normal(0, 0.08, n)[:, None, None]
    f = freqs[y][:, None, None] * rng.uniform(0.92, 1.08, n)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, (n, 2))
    u = np.cos(ang) * xx + np.sin(ang) * yy
    v = -np.sin(ang) * xx + np.cos(ang) * yy
    stripes = np.sin(2 * np.pi * f * u + phase[:, :1, None])
    checker = stripes * np.sin(2 * np.pi * f * v + phase[:, 1:, None])
    pattern = np.where(kinds[y][:, None, None] == 1, checker, stripes)
    tint = rng.uniform(0.6, 1.0, (n, 3))
    img = 0.5 * pattern[:, None] * tint[:, :, None, None]
    img += 0.12 * rng.standard_normal(img.shape)
    return img, y


def _roadway(n: int, c: int, rng: np.random.Generator):
    h, w = ROAD_SHAPE
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    params = np.empty((n, 5))
    todo = np.arange(n)
    frac = np.zeros(n)
    while todo.size:
        m = todo.size
        horizon = rng.uniform(10, 22, m)
        centre_b = rng.uniform(0.3 * w, 0.7 * w, m)
        half_b = rng.uniform(0.25 * w, 0.5 * w, m)
        centre_t = centre_b + rng.uniform(-0.2 * w, 0.2 * w, m)
        half_t = rng.uniform(0.03 * w, 0.12 * w, m)
        p = np.stack([horizon, centre_b, half_b, centre_t, half_t], axis=1)
        masks = _trapezoid(p, yy, xx)
        f = masks.mean(axis=(1, 2))
        params[todo] = p
        frac[todo] = f
        todo = todo[(f < 0.2) | (f > 0.6)]
    masks = _trapezoid(params, yy, xx)

    road_col = np.array([0.42, 0.42, 0.46]) + rng.normal(0, 0.03, (n, 3))
    grass_col = np.array([0.30, 0.52, 0.26]) + rng.normal(0, 0.04, (n, 3))
    sky_col = np.array([0.62, 0.72, 0.85]) + rng.normal(0, 0.03, (n, 3))
    above = (yy[None] < params[:, 0, None, None])
    bg = np.where(above[:, None], sky_col[:, :, None, None], grass_col[:, :, None, None])
    bg = bg + 0.10 * rng.standard_normal((n, 1, h, w)) * (~above[:, None])
    img = np.where(masks[:, None], road_col[:, :, None, None], bg)
    img = img + 0.05 * rng.standard_normal((n, 3, h, w))
    return img, masks.astype(np.int64)


def _trapezoid(p: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h = yy.shape[0]
    horizon, cb, hb, ct, ht = (p[:, i, None, None] for i in range(5))
    t = np.clip((yy[None] - horizon) / (h - 1 - horizon), 0, 1)
    centre = ct + t * (cb - ct)
    half = ht + t * (hb - ht)
    return (yy[None] >= horizon) & (np.abs(xx[None] - centre) <= half)


_GENERATORS = {"gauss2d": _gauss, "moons2d": _moons, "texture_cls": _texture, "roadway_seg": _roadway}
_FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES)}


def apply_shift(family: str, x: np.ndarray, severity: float) -> np.ndarray:
    """Label-preserving source-to-target transform."""
    if family in ("gauss2d", "moons2d"):
        rot = _rotation(severity * np.pi / 2)
        return x @ rot.T + severity * TRANSLATION_DIR
    scale = 1.0 - 0.6 * severity
    return scale * x + CAST_GAIN[family] * severity * HUE_OFFSET[None, :, None, None]


def invert_shift(family: str, x: np.ndarray, severity: float) -> np.ndarray:
    if family in ("gauss2d", "moons2d"):
        rot = _rotation(severity * np.pi / 2)
        return (x - severity * TRANSLATION_DIR) @ rot
    scale = 1.0 - 0.6 * severity
    return (x - CAST_GAIN[family] * severity * HUE_OFFSET[None, :, None, None]) / scale


def shift_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between the raw-input means of two sets."""
    return float(np.linalg.norm(a.reshape(len(a), -1).mean(axis=0) - b.reshape(len(b), -1).mean(axis=0)))


def make_pair(spec: ShiftSpec) -> DomainPair:
    gen = _GENERATORS[spec.family]
    c = spec.n_classes
    n_train, n_test = spec.sizes
    code = _FAMILY_CODE[spec.family]

    def draw(stream: int, n: int):
        # target draws never depend on severity, so shift_report is comparable across severities
        return gen(n, c, np.random.default_rng([spec.seed, code, stream]))

    xs, ys = draw(0, n_train)
    xse, yse = draw(1, n_test)
    xt, yt = draw(2, n_train)
    xte, yte = draw(3, n_test)
    xt = apply_shift(spec.family, xt, spec.severity)
    xte = apply_shift(spec.family, xte, spec.severity)
    return DomainPair(
        source=LabeledSet(xs, ys, "source"),
        target=UnlabeledSet(xt, "target"),
        target_eval=LabeledSet(xte, yte, "target"),
        shift_report=shift_distance(xs, xt),
        source_eval=LabeledSet(xse, yse, "source"),
        target_labeled=LabeledSet(xt, yt, "target"),
        spec=spec,
    )


def iterate_batches(dataset: LabeledSet | UnlabeledSet, batch_size: int, seed: int,
                    epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    """One shuffled epoch; the short final batch is dropped."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size {batch_size} must be in [1, {n}]")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    labels = getattr(dataset, "labels", None)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], (labels[idx] if labels is not None else None)


def export_pair(pair: DomainPair, out_dir) -> Path:
    """Write every array as raw little-endian bytes plus ``data.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "source_inputs": pair.source.inputs,
        "source_labels": pair.source.labels,
        "source_eval_inputs": pair.source_eval.inputs,
        "source_eval_labels": pair.source_eval.labels,
        "target_inputs": pair.target.inputs,
        "target_eval_inputs": pair.target_eval.inputs,
        "target_eval_labels": pair.target_eval.labels,
    }
    entries = {}
    for name, arr in arrays.items():
        dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
        arr.astype(dtype).tofile(out / f"{name}.bin")
        entries[name] = {"file": f"{name}.bin", "shape": list(arr.shape), "dtype": dtype}
    manifest = {"spec": asdict(pair.spec), "shift_report": pair.shift_report, "arrays": entries}
    (out / "data.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_exported(out_dir) -> dict[str, np.ndarray]:
    out = Path(out_dir)
    manifest = json.loads((out / "data.json").read_text())
    return {
        name: np.fromfile(out / e["file"], dtype=e["dtype"]).reshape(e["shape"])
        for name, e in manifest["arrays"].items()
    }
