"""Supervised, discriminator and encoder-adversarial losses, and the routing
that sends each loss only to the parameters it is meant to train."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

ENCODER_LOSS_KINDS = ("confusion", "minimax")
LAMBDA_SCOPES = ("both", "encoder_only")


@dataclass(frozen=True)
class LossReport:
    l_s: float
    l_ad: float
    l_ae: float
    lam: float

    @property
    def combined(self) -> float:
        return self.l_s + self.lam * (self.l_ad + self.l_ae)


@dataclass
class DomainBatch:
    source_inputs: np.ndarray
    source_labels: np.ndarray
    target_inputs: np.ndarray

    def __post_init__(self):
        if self.source_inputs.shape[1:] != self.target_inputs.shape[1:]:
            raise ValueError(
                f"source {self.source_inputs.shape[1:]} and target {self.target_inputs.shape[1:]} "
                "sample shapes differ")


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def supervised_loss(scores: Value, labels: np.ndarray) -> Value:
    """Mean cross-entropy of softmax(scores) against integer labels.

    ``scores`` is ``(N, c)`` or per-pixel ``(N, c, H, W)`` with labels
    ``(N,)`` or ``(N, H, W)``; pixels and samples are averaged uniformly.
    """
    scores = _as_value(scores)
    labels = np.asarray(labels)
    if scores.data.ndim == 4:
        n, c, h, w = scores.shape
        if labels.shape != (n, h, w):
            raise ValueError(f"labels {labels.shape} do not match score map {scores.shape}")
        scores = ad.reshape(ad.transpose(scores, (0, 2, 3, 1)), (n * h * w, c))
        labels = labels.reshape(-1)
    elif scores.data.ndim == 2:
        if labels.shape != (scores.shape[0],):
            raise ValueError(f"labels {labels.shape} do not match scores {scores.shape}")
    else:
        raise ValueError(f"scores must be (N, c) or (N, c, H, W), got {scores.shape}")
    m, c = scores.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    picks = np.zeros((m, c))
    picks[np.arange(m), labels.astype(np.int64)] = -1.0 / m
    logp = ad.log(ad.softmax_rows(scores))
    return ad.sum(ad.mul(logp, Value(picks)))


def _neg_log_mean(p: Value) -> Value:
    return ad.neg(ad.mean(ad.log(p)))


def discriminator_loss(d_source, d_target) -> Value:
    """-E_src[log D] - E_tgt[log(1 - D)] over domain probabilities."""
    d_source, d_target = _as_value(d_source), _as_value(d_target)
    return ad.add(_neg_log_mean(d_source), _neg_log_mean(1.0 - d_target))


def encoder_adversarial_loss(kind: str, d_source, d_target) -> Value:
    """Encoder objective: ``confusion`` flips both domain targets,
    ``minimax`` is the exact negation of the discriminator loss."""
    d_source, d_target = _as_value(d_source), _as_value(d_target)
    if kind == "confusion":
        return ad.add(_neg_log_mean(1.0 - d_source), _neg_log_mean(d_target))
    if kind == "minimax":
        return ad.neg(discriminator_loss(d_source, d_target))
    raise ValueError(f"unknown encoder loss kind {kind!r}; expected one of {ENCODER_LOSS_KINDS}")


def _check_map(m: Value) -> None:
    if m.data.ndim != 4 or m.shape[1] != 1:
        raise ValueError(f"patch map must be (N, 1, h, w), got {m.shape}")
    if m.shape[2] == 0 or m.shape[3] == 0:
        raise ValueError("patch map has zero spatial extent")


def patch_discriminator_loss(d_source_map, d_target_map) -> Value:
    """Discriminator loss applied per patch, averaged over patches and batch."""
    d_source_map, d_target_map = _as_value(d_source_map), _as_value(d_target_map)
    _check_map(d_source_map)
    _check_map(d_target_map)
    return discriminator_loss(d_source_map, d_target_map)


def patch_encoder_loss(kind: str, d_source_map, d_target_map) -> Value:
    d_source_map, d_target_map = _as_value(d_source_map), _as_value(d_target_map)
    _check_map(d_source_map)
    _check_map(d_target_map)
    return encoder_adversarial_loss(kind, d_source_map, d_target_map)


def encoder_loss_curves(d: np.ndarray) -> dict[str, np.ndarray]:
    """Per-sample target-side encoder losses and their derivatives in D's output.

    A target sample contributes ``-log d`` under confusion and ``log(1 - d)``
    under minimax; a confident discriminator pushes ``d`` toward 0 there.
    """
    d = np.asarray(d, dtype=np.float64)
    return {
        "conf_loss": -np.log(d),
        "conf_grad": -1.0 / d,
        "mm_loss": np.log1p(-d),
        "mm_grad": -1.0 / (1.0 - d),
    }


# ------------------------------------------------------------------ routing


@dataclass
class RoutedGradients:
    encoder: dict[str, np.ndarray]
    task: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    report: LossReport
    disc_accuracy: float

    def group(self, name: str) -> dict[str, np.ndarray]:
        return getattr(self, name)


def adversarial_terms(model, xs: np.ndarray, xt: np.ndarray, kind: str, patch: bool):
    """Forward both domains through E and D.

    Returns ``(f_s, l_ad, l_ae, acc)``. ``l_ad`` sees detached features, so it
    reaches only D; ``l_ae`` sees D with frozen weights, so it reaches only E.
    Both evaluate to the same numbers as the plain losses.
    """
    f_s = model.encode(xs)
    f_t = model.encode(xt)
    d_s = model.domain_prob(ad.detach(f_s))
    d_t = model.domain_prob(ad.detach(f_t))
    e_s = model.domain_prob(f_s, frozen=True)
    e_t = model.domain_prob(f_t, frozen=True)
    if patch:
        l_ad = patch_discriminator_loss(d_s, d_t)
        l_ae = patch_encoder_loss(kind, e_s, e_t)
    else:
        l_ad = discriminator_loss(d_s, d_t)
        l_ae = encoder_adversarial_loss(kind, e_s, e_t)
    acc = 0.5 * (float((d_s.data > 0.5).mean()) + float((d_t.data < 0.5).mean()))
    return f_s, l_ad, l_ae, acc


def routed_gradients(model, batch: DomainBatch, cfg, adversarial_only: bool = False) -> RoutedGradients:
    """Gradients per parameter group.

    task <- dL_S; discriminator <- lambda * dL_AD; encoder <- dL_S + lambda * dL_AE.
    ``cfg`` supplies ``lam``, ``loss_kind``, ``lambda_scope`` and ``patch_mode``.
    With ``adversarial_only`` the supervised term is dropped, which is what a
    perfectly fitted source batch contributes.
    """
    if cfg.lambda_scope not in LAMBDA_SCOPES:
        raise ValueError(f"unknown lambda_scope {cfg.lambda_scope!r}")
    lam = float(cfg.lam)
    lam_d = lam if cfg.lambda_scope == "both" else 1.0
    params = model.parameters()
    ad.zero_grad(params)

    f_s, l_ad, l_ae, acc = adversarial_terms(
        model, batch.source_inputs, batch.target_inputs, cfg.loss_kind, cfg.patch_mode)
    root = ad.add(ad.mul(l_ae, Value(lam)), ad.mul(l_ad, Value(lam_d)))
    if adversarial_only:
        l_s = Value(0.0)
    else:
        l_s = supervised_loss(model.scores(f_s), batch.source_labels)
        root = ad.add(l_s, root)
    ad.backward(root)
    grads = {g: {p.name: p.grad.copy() for p in model.parameters(g)}
             for g in ("encoder", "task", "discriminator")}
    ad.zero_grad(params)

    report = LossReport(l_s.item(), l_ad.item(), l_ae.item(), lam)
    return RoutedGradients(grads["encoder"], grads["task"], grads["discriminator"], report, acc)


def supervised_gradients(model, inputs: np.ndarray, labels: np.ndarray) -> tuple[dict, dict, float]:
    """Encoder and task gradients of L_S alone (warmup / source-only)."""
    params = model.parameters("encoder") + model.parameters("task")
    ad.zero_grad(params)
    l_s = supervised_loss(model.scores(model.encode(inputs)), labels)
    ad.backward(l_s)
    enc = {p.name: p.grad.copy() for p in model.parameters("encoder")}
    task = {p.name: p.grad.copy() for p in model.parameters("task")}
    ad.zero_grad(params)
    return enc, task, l_s.item()
