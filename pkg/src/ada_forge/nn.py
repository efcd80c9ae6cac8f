"""Layers, split encoder/task/discriminator models and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Value

LAYER_KINDS = ("dense", "conv", "pool", "relu", "flatten", "upsample", "gap")
HEAD_KINDS = ("classifier", "segmenter")
CAPACITY_DELTAS = (-2, 0, 2)
CHECKPOINT_VERSION = 1
CONV_KERNEL = 3
DEFAULT_EXTRA_WIDTH = 64


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        needs_width = self.kind in ("dense", "conv")
        if needs_width and (self.width is None or self.width < 1):
            raise ValueError(f"{self.kind} layer needs a positive width")
        if not needs_width and self.width is not None:
            raise ValueError(f"{self.kind} layer takes no width")


def dense(width: int) -> LayerSpec:
    return LayerSpec("dense", width)


def conv(channels: int) -> LayerSpec:
    return LayerSpec("conv", channels)


RELU = LayerSpec("relu")
POOL = LayerSpec("pool")
FLATTEN = LayerSpec("flatten")
UPSAMPLE = LayerSpec("upsample")
GAP = LayerSpec("gap")  # global average pool over H, W


def blocks_of(layers: Sequence[LayerSpec]) -> list[tuple[LayerSpec, ...]]:
    """Group layers into split-addressable blocks.

    A block is one non-relu layer together with the relus that follow it, so
    ``conv, relu, pool`` is two blocks. Split indices count blocks.
    """
    out: list[list[LayerSpec]] = []
    for layer in layers:
        if layer.kind == "relu":
            if not out:
                raise ValueError("network cannot start with relu")
            out[-1].append(layer)
        else:
            out.append([layer])
    return [tuple(b) for b in out]


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus where to cut it.

    ``input_shape`` is per sample: ``(features,)`` for dense inputs or
    ``(channels, height, width)`` for images.
    """

    layers: tuple[LayerSpec, ...]
    split_index: int
    head_kind: str
    input_shape: tuple[int, ...]
    disc_capacity_delta: int = 0
    patch_discriminator: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        n = len(blocks_of(self.layers))
        if not 1 <= self.split_index <= n - 1:
            raise ValueError(f"split_index {self.split_index} must lie in [1, {n - 1}]")
        if self.disc_capacity_delta not in CAPACITY_DELTAS:
            raise ValueError(f"disc_capacity_delta must be one of {CAPACITY_DELTAS}")
        if self.patch_discriminator and self.head_kind != "segmenter":
            raise ValueError("patch discriminator needs a segmenter head")
        if self.patch_discriminator and self.disc_capacity_delta:
            raise ValueError("capacity delta changes dense layers; a patch discriminator has none")
        # fail early on shape incompatibility
        out = infer_shapes(self.input_shape, self.layers)[-1]
        if self.head_kind == "classifier" and len(out) != 1:
            raise ValueError(f"classifier must end in flat scores, got {out}")
        if self.head_kind == "segmenter" and (len(out) != 3 or out[1:] != self.input_shape[1:]):
            raise ValueError(f"segmenter output {out} must keep the input's spatial size")
        discriminator_layers(self)

    @property
    def blocks(self) -> list[tuple[LayerSpec, ...]]:
        return blocks_of(self.layers)

    def encoder_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for b in self.blocks[: self.split_index] for l in b)

    def head_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for b in self.blocks[self.split_index:] for l in b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [[l.kind, l.width] for l in self.layers]
        d["input_shape"] = list(self.input_shape)
        return d

    def hash(self) -> str:
        return _digest(self.to_dict())

    def encoder_hash(self) -> str:
        return _digest({
            "input_shape": list(self.input_shape),
            "layers": [[l.kind, l.width] for l in self.encoder_layers()],
        })


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def infer_shapes(input_shape: Sequence[int], layers: Sequence[LayerSpec]) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer; raises on incompatibility."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            if len(shape) != 1:
                raise ValueError(f"layer {i} dense expects flat input, got {shape}; add flatten")
            shape = (layer.width,)
        elif k == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i} conv expects (C, H, W) input, got {shape}")
            shape = (layer.width, shape[1], shape[2])
        elif k == "pool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValueError(f"layer {i} pool expects (C, H, W) with even H, W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif k == "upsample":
            if len(shape) != 3:
                raise ValueError(f"layer {i} upsample expects (C, H, W) input, got {shape}")
            shape = (shape[0], shape[1] * 2, shape[2] * 2)
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "gap":
            if len(shape) != 3:
                raise ValueError(f"layer {i} gap expects (C, H, W) input, got {shape}")
            shape = (shape[0],)
        shapes.append(shape)
    return shapes


def discriminator_layers(spec: NetworkSpec) -> tuple[LayerSpec, ...]:
    """Copy of the head structure ending in a single domain logit per input
    (or per spatial position when ``patch_discriminator`` is set)."""
    head = list(spec.head_layers())
    final = head[-1]
    body = head[:-1]
    if spec.head_kind == "segmenter" and not spec.patch_discriminator:
        # whole-image discriminator: drop the per-pixel output conv and the
        # upsampling, average the feature map, score it with one dense unit
        if final.kind != "conv":
            raise ValueError("segmenter head must end in a conv layer")
        body = [l for l in body if l.kind != "upsample"] + [GAP]
        final = dense(1)
    elif final.kind == "conv":
        final = conv(1)
    elif final.kind == "dense":
        final = dense(1)
    else:
        raise ValueError(f"head must end in dense or conv, got {final.kind}")

    if spec.disc_capacity_delta > 0:
        widths = [l.width for l in body if l.kind == "dense"]
        width = widths[-1] if widths else DEFAULT_EXTRA_WIDTH
        if _rank_before(spec, body) != 1:
            body = body + [FLATTEN]
        body = body + [dense(width), RELU] * spec.disc_capacity_delta
    elif spec.disc_capacity_delta < 0:
        blocks = blocks_of(body) if body else []
        dense_idx = [i for i, b in enumerate(blocks) if b[0].kind == "dense"]
        if len(dense_idx) < 2:
            raise ValueError("disc_capacity_delta -2 needs two hidden dense layers in the discriminator")
        drop = set(dense_idx[-2:])
        blocks = [b for i, b in enumerate(blocks) if i not in drop]
        if not any(b[0].kind in ("dense", "conv") for b in blocks):
            raise ValueError("disc_capacity_delta -2 would leave the discriminator without hidden layers")
        body = [l for b in blocks for l in b]
    return tuple(body) + (final,)


def _rank_before(spec: NetworkSpec, body: Sequence[LayerSpec]) -> int:
    shapes = infer_shapes(spec.input_shape, list(spec.encoder_layers()) + list(body))
    return len(shapes[-1])


# ------------------------------------------------------------------ modules


class Sequential:
    """Parametrized stack of layers built from specs."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int], group: str,
                 rng: np.random.Generator, first_index: int = 0):
        self.layers = tuple(layers)
        self.group = group
        self.params: list[Parameter] = []
        self._weights: list[tuple[Parameter, Parameter] | None] = []
        self.output_shapes = infer_shapes(input_shape, self.layers)
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            feeds_relu = i + 1 < len(self.layers) and self.layers[i + 1].kind == "relu"
            if layer.kind in ("dense", "conv"):
                w, b = _init_layer(layer, shape, feeds_relu, rng)
                prefix = f"{group}.{first_index + i}.{layer.kind}"
                pw = Parameter(Value(w, requires_grad=True), f"{prefix}.weight", group)
                pb = Parameter(Value(b, requires_grad=True), f"{prefix}.bias", group)
                self.params += [pw, pb]
                self._weights.append((pw, pb))
            else:
                self._weights.append(None)
            shape = self.output_shapes[i]

    def __call__(self, x: Value, frozen: bool = False) -> Value:
        """Forward pass; ``frozen`` treats the weights as constants."""
        for layer, wb in zip(self.layers, self._weights):
            k = layer.kind
            if wb is not None:
                w, b = (ad.detach(wb[0].value), ad.detach(wb[1].value)) if frozen else (wb[0].value, wb[1].value)
            if k == "dense":
                x = ad.add(ad.matmul(x, w), b)
            elif k == "conv":
                x = ad.conv2d(x, w, b)
            elif k == "relu":
                x = ad.relu(x)
            elif k == "pool":
                x = ad.maxpool2x2(x)
            elif k == "upsample":
                x = ad.upsample2x(x)
            elif k == "flatten":
                x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
            elif k == "gap":
                x = ad.spatial_mean(x)
        return x


def _init_layer(layer: LayerSpec, in_shape: tuple[int, ...], feeds_relu: bool,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if layer.kind == "dense":
        fan_in, fan_out = in_shape[0], layer.width
        wshape: tuple[int, ...] = (fan_in, layer.width)
    else:
        k = CONV_KERNEL
        fan_in, fan_out = in_shape[0] * k * k, layer.width * k * k
        wshape = (layer.width, in_shape[0], k, k)
    if feeds_relu:
        bound = np.sqrt(6.0 / fan_in)  # He uniform
    else:
        bound = np.sqrt(6.0 / (fan_in + fan_out))  # Xavier uniform
    return rng.uniform(-bound, bound, size=wshape), np.zeros(layer.width)


@dataclass
class SplitModel:
    """Encoder E, supervised head S and domain discriminator D."""

    spec: NetworkSpec
    encoder: Sequential
    task: Sequential
    discriminator: Sequential
    epoch: int = 0
    _by_name: dict[str, Parameter] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {}
        for p in self.parameters():
            if p.name in self._by_name:
                raise ValueError(f"duplicate parameter name {p.name}")
            self._by_name[p.name] = p

    def parameters(self, group: str | None = None) -> list[Parameter]:
        mods = {"encoder": self.encoder, "task": self.task, "discriminator": self.discriminator}
        if group is not None:
            return list(mods[group].params)
        return [p for m in mods.values() for p in m.params]

    def parameter(self, name: str) -> Parameter:
        return self._by_name[name]

    def n_params(self, group: str | None = None) -> int:
        return int(sum(p.data.size for p in self.parameters(group)))

    def encode(self, x) -> Value:
        x = x if isinstance(x, Value) else Value(x)
        expect = self.spec.input_shape
        if tuple(x.shape[1:]) != expect:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {expect}")
        return self.encoder(x)

    def scores(self, features: Value) -> Value:
        return self.task(features)

    def domain_prob(self, features: Value, frozen: bool = False) -> Value:
        """Probability that each input (or patch) came from the source domain."""
        return ad.sigmoid(self.discriminator(features, frozen=frozen))

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}


def build_split_model(spec: NetworkSpec, seed: int) -> SplitModel:
    rng = np.random.default_rng(seed)
    enc_layers = spec.encoder_layers()
    enc = Sequential(enc_layers, spec.input_shape, "encoder", rng)
    feat_shape = enc.output_shapes[-1]
    k = len(enc_layers)
    task = Sequential(spec.head_layers(), feat_shape, "task", rng, first_index=k)
    disc = Sequential(discriminator_layers(spec), feat_shape, "discriminator", rng, first_index=k)
    return SplitModel(spec, enc, task, disc)


def predict(model: SplitModel, batch: np.ndarray) -> np.ndarray:
    """Raw label scores: ``(N, c)`` or ``(N, 2, H, W)`` for segmenters."""
    return model.scores(model.encode(np.asarray(batch, dtype=np.float64))).data


# -------------------------------------------------------------- checkpoints
#
# Layout: a zip archive (stored, fixed timestamps) readable by ``numpy.load``.
#   meta.json       {"format_version", "spec_hash", "encoder_hash", "epoch", "config_hash"}
#   <name>.npy      one float64 array per parameter, in numpy .npy format


class CheckpointError(ValueError):
    pass


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(model: SplitModel, path, config_hash: str = "") -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "spec_hash": model.spec.hash(),
        "encoder_hash": model.spec.encoder_hash(),
        "epoch": model.epoch,
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for p in sorted(model.parameters(), key=lambda p: p.name):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(p.data), allow_pickle=False)
            _zip_write(zf, f"{p.name}.npy", buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    return meta, arrays


def load_checkpoint(model: SplitModel, path, encoder_only: bool = False) -> None:
    """Restore parameters in place.

    With ``encoder_only`` only the encoder group is loaded and only the
    encoder architecture has to match; task and discriminator are untouched.
    """
    meta, arrays = read_checkpoint(path)
    if encoder_only:
        if meta["encoder_hash"] != model.spec.encoder_hash():
            raise CheckpointError("encoder architecture does not match checkpoint")
        targets = model.parameters("encoder")
    else:
        if meta["spec_hash"] != model.spec.hash():
            raise CheckpointError(
                f"spec hash {model.spec.hash()} does not match checkpoint {meta['spec_hash']}")
        targets = model.parameters()
    for p in targets:
        arr = arrays.get(p.name)
        if arr is None or arr.shape != p.data.shape:
            raise CheckpointError(f"checkpoint lacks a matching array for {p.name}")
    for p in targets:
        p.data[...] = arrays[p.name]
    if not encoder_only:
        model.epoch = int(meta["epoch"])
