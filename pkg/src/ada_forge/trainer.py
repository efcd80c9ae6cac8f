"""Warmup + adversarial training loop, clipping, evaluation and trial records."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np
from sklearn.metrics import average_precision_score

from . import nn
from .data import DomainPair, LabeledSet, ShiftSpec, UnlabeledSet, iterate_batches, make_pair
from .nn import FLATTEN, POOL, RELU, UPSAMPLE, NetworkSpec, SplitModel, conv, dense
from .objectives import (ENCODER_LOSS_KINDS, LAMBDA_SCOPES, DomainBatch, routed_gradients,
                         supervised_gradients)

EVAL_CHUNK = 128
TARGET_STREAM = 7919


@dataclass(frozen=True)
class AdaConfig:
    """Every knob of one training run. ``lam`` is the adversarial weight
    (spelled ``lambda`` in config files and JSON)."""

    family: str = "gauss2d"
    severity: float = 0.35
    classes: int | None = None
    n_train: int | None = None
    n_test: int | None = None
    lam: float = 1.0
    loss_kind: str = "confusion"
    warmup_epochs: int = 15
    total_epochs: int = 60
    clip_norm: float | None = 5.0
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    split_index: int | None = None
    disc_capacity_delta: int = 0
    patch_mode: bool = False
    pretrain_checkpoint: str | None = None
    disc_steps_per_encoder_step: int = 1
    lambda_scope: str = "both"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.loss_kind not in ENCODER_LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {ENCODER_LOSS_KINDS}")
        if self.lambda_scope not in LAMBDA_SCOPES:
            raise ValueError(f"lambda_scope must be one of {LAMBDA_SCOPES}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0 or none")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.disc_steps_per_encoder_step < 1:
            raise ValueError("disc_steps_per_encoder_step must be >= 1")
        if self.patch_mode and self.family != "roadway_seg":
            raise ValueError("patch_mode needs a segmentation family")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(self.family, self.severity, self.classes, self.n_train, self.n_test, self.seed)


CONFIG_FIELDS = {f.name for f in fields(AdaConfig)}


# ---------------------------------------------------------- architectures


def reference_layers(family: str, classes: int) -> tuple[tuple[nn.LayerSpec, ...], str, int]:
    """(layers, head kind, default split) of the toy network for a family."""
    if family in ("gauss2d", "moons2d"):
        layers = (dense(32), RELU, dense(32), RELU, dense(32), RELU, dense(classes))
        return layers, "classifier", 2
    if family == "texture_cls":
        layers = (conv(8), RELU, POOL, conv(16), RELU, POOL, FLATTEN, dense(64), RELU, dense(classes))
        return layers, "classifier", 4
    if family == "roadway_seg":
        layers = (conv(8), RELU, POOL, conv(16), RELU, conv(16), RELU, UPSAMPLE, conv(2))
        return layers, "segmenter", 3
    raise ValueError(f"unknown family {family!r}")


def network_spec(cfg: AdaConfig, input_shape: tuple[int, ...]) -> NetworkSpec:
    layers, head, split = reference_layers(cfg.family, cfg.shift_spec().n_classes)
    return NetworkSpec(layers, cfg.split_index or split, head, input_shape,
                       cfg.disc_capacity_delta, cfg.patch_mode)


def build_for(cfg: AdaConfig, pair: DomainPair | None = None) -> tuple[SplitModel, DomainPair]:
    pair = pair if pair is not None else make_pair(cfg.shift_spec())
    model = nn.build_split_model(network_spec(cfg, pair.input_shape), cfg.seed)
    return model, pair


# ------------------------------------------------------------- optimizer


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale so the joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm or not math.isfinite(norm):
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(model: SplitModel, grads: dict[str, np.ndarray], lr: float, clip_norm: float | None) -> None:
    if clip_norm is not None:
        grads = clip_gradients(grads, clip_norm)
    for name, g in grads.items():
        p = model.parameter(name)
        p.data[...] -= lr * g


# ------------------------------------------------------------- evaluation


def _chunks(x: np.ndarray) -> Iterator[np.ndarray]:
    for i in range(0, len(x), EVAL_CHUNK):
        yield x[i:i + EVAL_CHUNK]


def _softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def forward_eval(model: SplitModel, inputs: np.ndarray, with_domain: bool = False):
    scores, probs = [], []
    for chunk in _chunks(inputs):
        f = model.encode(chunk)
        scores.append(model.scores(f).data)
        if with_domain:
            probs.append(model.domain_prob(f).data.reshape(len(chunk), -1).mean(axis=1))
    return np.concatenate(scores), (np.concatenate(probs) if with_domain else None)


def score_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Classification accuracy, or pixel accuracy and 2-class mAP for score maps."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = scores.argmax(axis=1)
    acc = float((pred == labels).mean())
    if scores.ndim == 2:
        return {"accuracy": acc}
    probs = _softmax(scores, axis=1)
    aps = []
    for k in range(scores.shape[1]):
        truth = (labels == k).reshape(-1)
        aps.append(average_precision_score(truth, probs[:, k].reshape(-1)) if truth.any() else 0.0)
    return {"pixel_accuracy": acc, "map": float(np.mean(aps))}


def headline(metrics: dict[str, float]) -> float:
    return metrics["map"] if "map" in metrics else metrics["accuracy"]


def evaluate(model: SplitModel, dataset: LabeledSet, metric: str | None = None) -> float:
    """Fraction correct for classifiers; mAP (default) or pixel accuracy for segmenters."""
    if not isinstance(dataset, LabeledSet):
        raise TypeError(f"{dataset.domain} set has no labels; evaluation needs a labeled split")
    scores, _ = forward_eval(model, dataset.inputs)
    m = score_metrics(scores, dataset.labels)
    return m[metric] if metric else headline(m)


# ----------------------------------------------------------------- trials


@dataclass
class TrialResult:
    config: dict
    config_hash: str
    seed: int
    p_s: list = field(default_factory=list)
    p_t: list = field(default_factory=list)
    l_s: list = field(default_factory=list)
    l_ad: list = field(default_factory=list)
    l_ae: list = field(default_factory=list)
    combined: list = field(default_factory=list)
    disc_acc: list = field(default_factory=list)
    final_p_s: float | None = None
    final_p_t: float | None = None
    final_disc_acc: float | None = None
    extra: dict = field(default_factory=dict)
    diverged: bool = False
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        """Canonical JSON; wall time is left out so identical runs give identical bytes."""
        return json.dumps(_finite_or_none(self.to_dict()), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrialResult":
        return cls(**json.loads(text))


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    return obj


class _TargetStream:
    """Cycles the unlabeled target set independently of the source order."""

    def __init__(self, dataset: UnlabeledSet | LabeledSet, batch_size: int, seed: int):
        self.dataset, self.batch_size, self.seed = dataset, batch_size, seed
        self.epoch = 0
        self._it = iterate_batches(dataset, batch_size, seed, 0)

    def next(self) -> np.ndarray:
        try:
            return next(self._it)[0]
        except StopIteration:
            self.epoch += 1
            self._it = iterate_batches(self.dataset, self.batch_size, self.seed, self.epoch)
            return next(self._it)[0]


def _chance(pair: DomainPair) -> float:
    return 1.0 / pair.spec.n_classes


def train(model: SplitModel, pair: DomainPair, cfg: AdaConfig) -> TrialResult:
    """Supervised warmup, then routed adversarial updates; one SGD step per
    parameter group per mini-batch."""
    started = time.perf_counter()
    if cfg.pretrain_checkpoint:
        nn.load_checkpoint(model, cfg.pretrain_checkpoint, encoder_only=True)
    result = TrialResult(cfg.to_dict(), cfg.hash(), cfg.seed)
    target = _TargetStream(pair.target, cfg.batch_size, cfg.seed + TARGET_STREAM)
    lr, clip = cfg.learning_rate, cfg.clip_norm
    groups = ("encoder", "task", "discriminator")

    for epoch in range(cfg.total_epochs):
        adversarial = epoch >= cfg.warmup_epochs
        sums = np.zeros(4)
        n_batches = 0
        for xs, ys in iterate_batches(pair.source, cfg.batch_size, cfg.seed, epoch):
            if adversarial:
                for _ in range(cfg.disc_steps_per_encoder_step - 1):
                    rg = routed_gradients(model, DomainBatch(xs, ys, target.next()), cfg)
                    sgd_step(model, rg.discriminator, lr, clip)
                rg = routed_gradients(model, DomainBatch(xs, ys, target.next()), cfg)
                for g in groups:
                    sgd_step(model, rg.group(g), lr, clip)
                r = rg.report
                sums += (r.l_s, r.l_ad, r.l_ae, r.combined)
            else:
                enc, task, l_s = supervised_gradients(model, xs, ys)
                sgd_step(model, enc, lr, clip)
                sgd_step(model, task, lr, clip)
                sums += (l_s, math.nan, math.nan, l_s)
            n_batches += 1
            if not math.isfinite(sums[0]) or (adversarial and not np.all(np.isfinite(sums))):
                result.diverged = True
                break
        means = sums / max(n_batches, 1)
        model.epoch = epoch + 1
        result.l_s.append(float(means[0]))
        result.l_ad.append(float(means[1]))
        result.l_ae.append(float(means[2]))
        result.combined.append(float(means[3]))
        if result.diverged:
            break
        ps, pt, dacc, extra = _epoch_metrics(model, pair)
        result.p_s.append(ps)
        result.p_t.append(pt)
        result.disc_acc.append(dacc)
        result.extra = extra

    # pad aborted traces so every trace spans total_epochs
    for trace in (result.p_s, result.p_t, result.l_s, result.l_ad, result.l_ae, result.combined, result.disc_acc):
        trace.extend([math.nan] * (cfg.total_epochs - len(trace)))
    if not result.diverged and cfg.total_epochs:
        result.final_p_s = result.p_s[-1]
        result.final_p_t = result.p_t[-1]
        result.final_disc_acc = result.disc_acc[-1]
        if result.final_p_t < _chance(pair) / 2:
            result.diverged = True
    result.wall_time = time.perf_counter() - started
    return result


def _epoch_metrics(model: SplitModel, pair: DomainPair):
    s_scores, s_dom = forward_eval(model, pair.source_eval.inputs, with_domain=True)
    t_scores, t_dom = forward_eval(model, pair.target_eval.inputs, with_domain=True)
    ms = score_metrics(s_scores, pair.source_eval.labels)
    mt = score_metrics(t_scores, pair.target_eval.labels)
    dacc = 0.5 * (float((s_dom > 0.5).mean()) + float((t_dom < 0.5).mean()))
    extra = {f"source_{k}": v for k, v in ms.items()} | {f"target_{k}": v for k, v in mt.items()}
    return headline(ms), headline(mt), dacc, extra


def run_trial(cfg: AdaConfig, pair: DomainPair | None = None, model: SplitModel | None = None):
    """Build data and model from ``cfg`` (unless given) and train."""
    if model is None:
        model, pair = build_for(cfg, pair)
    elif pair is None:
        pair = make_pair(cfg.shift_spec())
    return train(model, pair, cfg), model


def baseline_config(cfg: AdaConfig) -> AdaConfig:
    """Source-only condition: the adversarial phase never starts."""
    return replace(cfg, warmup_epochs=cfg.total_epochs)
