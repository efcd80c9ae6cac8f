"""Central finite-difference check of the routed gradients on small random models."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import nn
from .nn import FLATTEN, POOL, RELU, UPSAMPLE, NetworkSpec, conv, dense
from .objectives import (
    DomainBatch,
    adversarial_terms,
    discriminator_loss,
    encoder_adversarial_loss,
    routed_gradients,
    supervised_loss,
)

STEP = 1e-4
TOLERANCE = 1e-4
# below this magnitude a gradient entry is compared absolutely
REL_FLOOR = 1e-7
DEFAULT_MODELS = 20
MAX_PARAMS = 5000
COORDS_PER_TENSOR = 6
BATCH = 3


@dataclass(frozen=True)
class RoutingCfg:
    lam: float
    loss_kind: str
    lambda_scope: str = "both"
    patch_mode: bool = False


@dataclass(frozen=True)
class CheckRecord:
    model: int
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), REL_FLOOR)


@dataclass
class GradcheckReport:
    records: list[CheckRecord] = field(default_factory=list)
    skipped_kinks: int = 0
    routing: dict[str, bool] = field(default_factory=dict)
    n_models: int = 0
    head_kinds: set[str] = field(default_factory=set)
    max_params: int = 0

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.records), default=0.0)

    def failures(self, tol: float = TOLERANCE) -> list[CheckRecord]:
        return [r for r in self.records if not r.rel_err < tol]

    def offending_params(self, tol: float = TOLERANCE) -> list[str]:
        return sorted({r.param for r in self.failures(tol)})

    @property
    def ok(self) -> bool:
        return not self.failures() and all(self.routing.values())


# ------------------------------------------------------------- random cases


def _width(rng, lo=3, hi=6) -> int:
    return int(rng.integers(lo, hi + 1))


def random_spec(rng: np.random.Generator, kind: str) -> NetworkSpec:
    """A small network of one of three shapes: dense or conv classifier, or segmenter."""
    patch = False
    if kind == "dense":
        layers = [dense(_width(rng)), RELU, dense(_width(rng)), RELU, dense(_width(rng)), RELU, dense(3)]
        head, shape = "classifier", (4,)
    elif kind == "conv":
        layers = [conv(_width(rng, 2, 4)), RELU, POOL, conv(_width(rng, 2, 4)), RELU, POOL,
                  FLATTEN, dense(_width(rng)), RELU, dense(3)]
        head, shape = "classifier", (2, 8, 8)
    else:
        layers = [conv(_width(rng, 2, 4)), RELU, POOL, conv(_width(rng, 2, 4)), RELU, UPSAMPLE, conv(2)]
        head, shape = "segmenter", (2, 8, 8)
        patch = bool(rng.integers(2))
    n_blocks = len(nn.blocks_of(layers))
    split = int(rng.integers(1, n_blocks))
    deltas = [0] if patch else list(nn.CAPACITY_DELTAS)
    rng.shuffle(deltas)
    for delta in deltas:
        try:
            spec = NetworkSpec(layers, split, head, shape, disc_capacity_delta=int(delta),
                               patch_discriminator=patch)
        except ValueError:
            continue
        if nn.build_split_model(spec, 0).n_params() <= MAX_PARAMS:
            return spec
    return NetworkSpec(layers, split, head, shape, patch_discriminator=patch)


def random_batch(rng: np.random.Generator, spec: NetworkSpec) -> DomainBatch:
    xs = rng.standard_normal((BATCH,) + spec.input_shape)
    xt = rng.standard_normal((BATCH,) + spec.input_shape) + 0.5
    if spec.head_kind == "segmenter":
        ys = rng.integers(0, 2, (BATCH,) + spec.input_shape[1:])
    else:
        ys = rng.integers(0, 3, BATCH)
    return DomainBatch(xs, ys, xt)


# ------------------------------------------------------------------- check


def _plain_losses(model, batch: DomainBatch, cfg: RoutingCfg) -> tuple[float, float, float, list[bytes]]:
    """L_S, L_AD, L_AE without any detaching, plus the branch signature."""
    with ad.record_branches() as log:
        f_s = model.encode(batch.source_inputs)
        f_t = model.encode(batch.target_inputs)
        l_s = supervised_loss(model.scores(f_s), batch.source_labels)
        d_s, d_t = model.domain_prob(f_s), model.domain_prob(f_t)
        l_ad = discriminator_loss(d_s, d_t)
        l_ae = encoder_adversarial_loss(cfg.loss_kind, d_s, d_t)
    return l_s.item(), l_ad.item(), l_ae.item(), list(log)


def _oracle(group: str, losses, cfg: RoutingCfg) -> float:
    l_s, l_ad, l_ae = losses[:3]
    lam_d = cfg.lam if cfg.lambda_scope == "both" else 1.0
    if group == "encoder":
        return l_s + cfg.lam * l_ae
    if group == "task":
        return l_s
    return lam_d * l_ad


def check_model(model, batch: DomainBatch, cfg: RoutingCfg, rng: np.random.Generator,
                model_index: int = 0, coords: int = COORDS_PER_TENSOR) -> tuple[list[CheckRecord], int]:
    routed = routed_gradients(model, batch, cfg)
    base_sig = _plain_losses(model, batch, cfg)[3]
    records, skipped = [], 0
    for p in model.parameters():
        analytic = routed.group(p.group)[p.name]
        data = p.value.data
        flat = rng.permutation(data.size)[:coords]
        for k in flat:
            idx = np.unravel_index(int(k), data.shape)
            orig = data[idx]
            data[idx] = orig + STEP
            plus = _plain_losses(model, batch, cfg)
            data[idx] = orig - STEP
            minus = _plain_losses(model, batch, cfg)
            data[idx] = orig
            if plus[3] != base_sig or minus[3] != base_sig:
                skipped += 1
                continue
            numeric = (_oracle(p.group, plus, cfg) - _oracle(p.group, minus, cfg)) / (2 * STEP)
            records.append(CheckRecord(model_index, p.name, tuple(int(i) for i in idx),
                                       float(analytic[idx]), float(numeric)))
    return records, skipped


def routing_checks(seed: int = 0) -> dict[str, bool]:
    """lambda = 0 leaves D untouched; minimax encoder grads negate dL_AD/dtheta_E."""
    rng = np.random.default_rng([seed, 1])
    spec = random_spec(rng, "dense")
    model = nn.build_split_model(spec, seed)
    batch = random_batch(rng, spec)

    zero = routed_gradients(model, batch, RoutingCfg(0.0, "confusion"))
    lam_zero = all(not g.any() for g in zero.discriminator.values())

    mm = routed_gradients(model, batch, RoutingCfg(1.0, "minimax"), adversarial_only=True)
    enc = model.parameters("encoder")
    ad.zero_grad(model.parameters())
    f_s, f_t = model.encode(batch.source_inputs), model.encode(batch.target_inputs)
    ad.backward(discriminator_loss(model.domain_prob(f_s), model.domain_prob(f_t)))
    negated = all(np.array_equal(mm.encoder[p.name], -p.grad) for p in enc)
    ad.zero_grad(model.parameters())

    # the detached/frozen forward reproduces the plain loss values
    _, l_ad, l_ae, _ = adversarial_terms(model, batch.source_inputs, batch.target_inputs, "confusion", False)
    plain = _plain_losses(model, batch, RoutingCfg(1.0, "confusion"))
    same_values = l_ad.item() == plain[1] and l_ae.item() == plain[2]
    return {"lambda_zero_disc_grads": lam_zero, "minimax_negation": negated, "routed_values": same_values}


KINDS = ("dense", "conv", "segmenter")


def run_gradcheck(n_models: int = DEFAULT_MODELS, seed: int = 0,
                  coords: int = COORDS_PER_TENSOR) -> GradcheckReport:
    report = GradcheckReport()
    for i in range(n_models):
        rng = np.random.default_rng([seed, 0, i])
        kind = KINDS[i % len(KINDS)]
        spec = random_spec(rng, kind)
        model = nn.build_split_model(spec, seed * 1000 + i)
        cfg = RoutingCfg(
            lam=float(rng.uniform(0.1, 2.0)),
            loss_kind=("confusion", "minimax")[int(rng.integers(2))],
            lambda_scope=("both", "encoder_only")[int(rng.integers(2))],
            patch_mode=spec.patch_discriminator,
        )
        recs, skipped = check_model(model, random_batch(rng, spec), cfg, rng, i, coords)
        report.records.extend(recs)
        report.skipped_kinks += skipped
        report.head_kinds.add(spec.head_kind)
        report.max_params = max(report.max_params, model.n_params())
    report.n_models = n_models
    report.routing = routing_checks(seed)
    return report


@contextlib.contextmanager
def corrupted_relu() -> Iterator[None]:
    """Test hook: relu whose backward forgets its mask."""
    original = ad.relu

    def bad_relu(a):
        out = original(a)
        return ad._node(out.data, "relu", (a,), lambda g: (g,))

    ad.relu = bad_relu
    try:
        yield
    finally:
        ad.relu = original


def format_report(report: GradcheckReport) -> str:
    lines = [
        f"models checked: {report.n_models} ({', '.join(sorted(report.head_kinds))}), "
        f"largest {report.max_params} parameters",
        f"coordinates checked: {len(report.records)}, skipped at kinks: {report.skipped_kinks}",
        f"max relative error: {report.max_rel_err:.3e} (tolerance {TOLERANCE:g})",
    ]
    for name, ok in report.routing.items():
        lines.append(f"routing {name}: {'ok' if ok else 'FAILED'}")
    bad = report.offending_params()
    if bad:
        lines.append("offending parameters: " + ", ".join(bad))
    lines.append("gradcheck " + ("passed" if report.ok else "FAILED"))
    return "\n".join(lines)
