"""Model specifications, the backbone registry, the Deep Block and training.

A :class:`ModelSpec` is a small declarative description. :func:`build_model`
turns it into a :class:`ModelGraph`: an ordered list of layers plus a flat,
ordered dictionary of float32 parameter arrays. The graph's forward pass is a
pure function of (parameters, input), so clones can be evaluated or trained
independently.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .numerics import (
    DimensionError,
    OptimizerState,
    Tape,
    Var,
    add,
    avgpool2d,
    concat_forward,
    conv2d_forward,
    dense_forward,
    relu_forward,
    repeat_vector,
    reshape,
    softmax_ce_loss,
)

__all__ = [
    "UnknownBackboneError",
    "TrainingDivergedError",
    "DeepBlockSpec",
    "ModelSpec",
    "ModelGraph",
    "BACKBONES",
    "BLOCKS",
    "build_backbone",
    "build_with_deep_block",
    "build_model",
    "forward_batch",
    "TrainHistory",
    "train_epochs",
    "train_step",
    "predict",
    "epoch_permutation",
]


class UnknownBackboneError(KeyError):
    def __init__(self, key: str, known):
        self.key = key
        msg = f"unknown backbone {key!r}; registry has: {', '.join(sorted(known))}"
        super().__init__(msg)
        self.msg = msg

    def __str__(self):
        return self.msg


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DeepBlockSpec:
    width: int = 32
    loops: int = 2
    repeats: int = 3
    seq_width: int = 32

    def __post_init__(self):
        for name in ("width", "loops", "repeats", "seq_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"deep_block.{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class ModelSpec:
    backbone_id: str
    class_count: int
    input_shape: tuple[int, int, int] = (32, 32, 1)
    deep_block: DeepBlockSpec | None = None
    hidden: int = 32
    depth: int | None = None
    block: str = "deep"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.backbone_id not in BACKBONES:
            raise UnknownBackboneError(self.backbone_id, BACKBONES)
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (height, width, channels), got {self.input_shape}")
        h, w, c = self.input_shape
        if h < 8 or w < 8 or c < 1:
            raise ValueError(f"input_shape {self.input_shape}: height and width must be >= 8")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.depth is not None and self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block {self.block!r}; choose from {sorted(BLOCKS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if d.get("deep_block") is not None:
            d["deep_block"] = DeepBlockSpec(**d["deep_block"])
        d["input_shape"] = tuple(d.get("input_shape", (32, 32, 1)))
        return cls(**d)

    def without_deep_block(self) -> "ModelSpec":
        return replace(self, deep_block=None)


# ---------------------------------------------------------------------------
# layers


def _he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Layer:
    name: str = "layer"

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator,
              prefix: str) -> tuple[dict[str, np.ndarray], tuple[int, ...]]:
        raise NotImplementedError

    def __call__(self, h: Var, P: Mapping[str, Var], tape: Tape | None) -> Var:
        raise NotImplementedError


class Flatten(Layer):
    name = "flatten"

    def build(self, in_shape, rng, prefix):
        return {}, (int(np.prod(in_shape)),)

    def __call__(self, h, P, tape):
        return reshape(h, (h.shape[0], -1), tape)


class Dense(Layer):
    def __init__(self, units: int, relu: bool = True):
        self.units = units
        self.relu = relu
        self.name = "dense"

    def build(self, in_shape, rng, prefix):
        if len(in_shape) != 1:
            raise DimensionError(f"{prefix}: dense layer needs a flat input, got {in_shape}")
        self.W, self.b = f"{prefix}.W", f"{prefix}.b"
        params = {self.W: _he_uniform(rng, in_shape[0], (in_shape[0], self.units)),
                  self.b: np.zeros(self.units, np.float32)}
        return params, (self.units,)

    def __call__(self, h, P, tape):
        out = dense_forward(h, P[self.W], P[self.b], tape)
        return relu_forward(out, tape) if self.relu else out


class Conv3x3(Layer):
    """3x3 'same' convolution, ReLU, then 2x2 average pooling."""

    name = "conv"

    def __init__(self, filters: int):
        self.filters = filters

    def build(self, in_shape, rng, prefix):
        H, W, C = in_shape
        self.K, self.b = f"{prefix}.K", f"{prefix}.b"
        params = {self.K: _he_uniform(rng, 9 * C, (3, 3, C, self.filters)),
                  self.b: np.zeros(self.filters, np.float32)}
        return params, (H // 2, W // 2, self.filters)

    def __call__(self, h, P, tape):
        return avgpool2d(relu_forward(conv2d_forward(h, P[self.K], P[self.b], tape), tape), tape)


class DenselyConnected(Layer):
    """Hidden layers that each see the concatenation of every earlier activation."""

    name = "dense_connected"

    def __init__(self, growth: int, layers: int):
        self.growth = growth
        self.layers = layers

    def build(self, in_shape, rng, prefix):
        params = {}
        self.names = []
        d = in_shape[0]
        for i in range(self.layers):
            W, b = f"{prefix}.{i}.W", f"{prefix}.{i}.b"
            params[W] = _he_uniform(rng, d, (d, self.growth))
            params[b] = np.zeros(self.growth, np.float32)
            self.names.append((W, b))
            d += self.growth
        return params, (d,)

    def __call__(self, h, P, tape):
        for W, b in self.names:
            new = relu_forward(dense_forward(h, P[W], P[b], tape), tape)
            h = concat_forward(h, new, tape)
        return h


class DeepBlock(Layer):
    """Dense/ReLU/concat loop, repeat lifting, per-step dense, flatten.

    For ``L`` loops of width ``w`` on a ``d0``-vector the shapes run
    ``d0 -> d0+w -> ... -> d0+L*w -> (r, d0+L*w) -> (r, seq_width) -> r*seq_width``.
    """

    name = "deep_block"

    def __init__(self, spec: DeepBlockSpec):
        self.spec = spec

    def build(self, in_shape, rng, prefix):
        s = self.spec
        d = in_shape[0]
        params = {}
        self.loop_names = []
        self.chain: list = [d]
        for i in range(s.loops):
            W, b = f"{prefix}.loop{i}.W", f"{prefix}.loop{i}.b"
            params[W] = _he_uniform(rng, d, (d, s.width))
            params[b] = np.zeros(s.width, np.float32)
            self.loop_names.append((W, b))
            d += s.width
            self.chain.append(d)
        self.chain.append((s.repeats, d))
        self.step_W, self.step_b = f"{prefix}.step.W", f"{prefix}.step.b"
        params[self.step_W] = _he_uniform(rng, d, (d, s.seq_width))
        params[self.step_b] = np.zeros(s.seq_width, np.float32)
        self.chain.append((s.repeats, s.seq_width))
        self.chain.append(s.repeats * s.seq_width)
        self.feature_dim = d
        return params, (s.repeats * s.seq_width,)

    def __call__(self, h, P, tape):
        s = self.spec
        for W, b in self.loop_names:
            new = relu_forward(dense_forward(h, P[W], P[b], tape), tape)
            h = concat_forward(h, new, tape)
        n = h.shape[0]
        seq = repeat_vector(h, s.repeats, tape)
        # shared per-timestep dense: fold the time axis into the batch axis
        flat = reshape(seq, (n * s.repeats, self.feature_dim), tape)
        step = relu_forward(dense_forward(flat, P[self.step_W], P[self.step_b], tape), tape)
        return reshape(step, (n, s.repeats * s.seq_width), tape)


class ResidualBlock(Layer):
    """``v <- v + ReLU(Dense(v))`` repeated; an alternative block for ablations."""

    name = "residual_block"

    def __init__(self, spec: DeepBlockSpec):
        self.spec = spec

    def build(self, in_shape, rng, prefix):
        d = in_shape[0]
        params = {}
        self.loop_names = []
        for i in range(self.spec.loops):
            W, b = f"{prefix}.loop{i}.W", f"{prefix}.loop{i}.b"
            params[W] = _he_uniform(rng, d, (d, d)) * np.float32(0.1)
            params[b] = np.zeros(d, np.float32)
            self.loop_names.append((W, b))
        self.chain = [d] * (self.spec.loops + 1)
        return params, (d,)

    def __call__(self, h, P, tape):
        for W, b in self.loop_names:
            h = add(h, relu_forward(dense_forward(h, P[W], P[b], tape), tape), tape)
        return h


# ---------------------------------------------------------------------------
# registries


def _mlp(default_depth: int):
    def make(spec: ModelSpec) -> list[Layer]:
        depth = spec.depth or default_depth
        return [Flatten()] + [Dense(spec.hidden) for _ in range(depth)]
    return make


def _cnn(default_depth: int):
    filters = (8, 16, 16, 32)

    def make(spec: ModelSpec) -> list[Layer]:
        depth = spec.depth or default_depth
        h, w, _ = spec.input_shape
        if min(h, w) >> depth < 1:
            raise ValueError(f"input {spec.input_shape} too small for {depth} pooling stages")
        convs = [Conv3x3(filters[min(i, len(filters) - 1)]) for i in range(depth)]
        return convs + [Flatten(), Dense(spec.hidden)]
    return make


def _densely_connected(spec: ModelSpec) -> list[Layer]:
    depth = spec.depth or 2
    return [Flatten(), Dense(spec.hidden), DenselyConnected(max(1, spec.hidden // 2), depth)]


BACKBONES: dict[str, Callable[[ModelSpec], list[Layer]]] = {
    "mlp-s": _mlp(1),
    "mlp-m": _mlp(2),
    "cnn-s": _cnn(1),
    "cnn-m": _cnn(2),
    "dense-s": _densely_connected,
}

BLOCKS: dict[str, type[Layer]] = {
    "deep": DeepBlock,
    "residual": ResidualBlock,
}


# ---------------------------------------------------------------------------
# graph


@dataclass
class ModelGraph:
    spec: ModelSpec
    layers: list[tuple[str, Layer]]
    params: dict[str, np.ndarray]
    shapes: list[tuple[str, tuple[int, ...]]]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def feature_dim(self) -> int:
        """Width of the backbone's flattened feature vector."""
        for prefix, shape in self.shapes:
            if prefix.startswith("backbone"):
                last = shape
        return int(last[0])

    def block(self) -> Layer | None:
        for prefix, layer in self.layers:
            if prefix == "block":
                return layer
        return None

    def forward(self, x, tape: Tape | None = None,
                params: Mapping[str, Var] | None = None) -> Var:
        """Logits for batch ``x``. With a tape, parameters are watched on it
        unless ``params`` (already ``Var`` objects) are supplied."""
        if params is None:
            if tape is not None:
                params = {k: tape.watch(k, v) for k, v in self.params.items()}
            else:
                params = {k: Var(v, requires_grad=False) for k, v in self.params.items()}
        h = x if isinstance(x, Var) else Var(np.asarray(x), requires_grad=False)
        for _, layer in self.layers:
            h = layer(h, params, tape)
        return h

    def clone(self) -> "ModelGraph":
        return ModelGraph(self.spec, self.layers,
                          {k: v.copy() for k, v in self.params.items()}, list(self.shapes))

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        if list(params) != list(self.params):
            raise KeyError("parameter names do not match the graph")
        for k, v in params.items():
            if np.shape(v) != self.params[k].shape:
                raise DimensionError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
        self.params = {k: np.array(v, dtype=np.float32, copy=True) for k, v in params.items()}


def _assemble(spec: ModelSpec, with_block: bool) -> ModelGraph:
    rng = np.random.default_rng(spec.seed)
    layers: list[tuple[str, Layer]] = [
        (f"backbone.{i}", layer) for i, layer in enumerate(BACKBONES[spec.backbone_id](spec))]
    if with_block:
        if spec.deep_block is None:
            raise ValueError("spec has no deep_block")
        layers.append(("block", BLOCKS[spec.block](spec.deep_block)))
    layers.append(("head", Dense(spec.class_count, relu=False)))

    shape: tuple[int, ...] = spec.input_shape
    params: dict[str, np.ndarray] = {}
    shapes = []
    for prefix, layer in layers:
        new, shape = layer.build(shape, rng, prefix)
        clash = params.keys() & new.keys()
        if clash:
            raise ValueError(f"duplicate parameter names {sorted(clash)}")
        params.update(new)
        shapes.append((prefix, shape))
    return ModelGraph(spec, layers, params, shapes)


def build_backbone(spec: ModelSpec) -> ModelGraph:
    """The registry backbone followed directly by the softmax classifier."""
    return _assemble(spec, with_block=False)


def build_with_deep_block(spec: ModelSpec) -> ModelGraph:
    """Backbone, then the configured feature block, then the classifier."""
    return _assemble(spec, with_block=True)


def build_model(spec: ModelSpec) -> ModelGraph:
    return _assemble(spec, with_block=spec.deep_block is not None)


def forward_batch(model: ModelGraph, batch, chunk: int = 512) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != model.spec.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input (n, {', '.join(map(str, model.spec.input_shape))})")
    if len(batch) <= chunk:
        return model.forward(batch).value
    return np.concatenate([model.forward(batch[i:i + chunk]).value
                           for i in range(0, len(batch), chunk)])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def epoch_permutation(n: int, rng_seed: int, epoch: int) -> np.ndarray:
    """Shuffle order for a given absolute epoch index.

    Keying the permutation on the epoch index lets a run split into chunks
    (for example federated rounds) reproduce the shuffles of a single long run.
    """
    return np.random.default_rng([int(rng_seed), int(epoch)]).permutation(n)


def _arrays(dataset):
    if isinstance(dataset, tuple):
        x, y = dataset
    else:
        x, y = dataset.images, dataset.labels
    return np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.int64)


def train_step(model: ModelGraph, x: np.ndarray, y: np.ndarray,
               optimizer: OptimizerState) -> tuple[float, int]:
    """One minibatch update in place; returns (mean loss, correct count)."""
    tape = Tape()
    logits = model.forward(x, tape)
    onehot = np.eye(model.spec.class_count, dtype=np.float32)[y]
    loss = softmax_ce_loss(logits, onehot, tape)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    grads = tape.backward(loss)
    model.params = optimizer.apply(model.params, grads)
    correct = int((np.argmax(logits.value, axis=1) == y).sum())
    return value, correct


def train_epochs(model: ModelGraph, dataset, optimizer: OptimizerState, epochs: int,
                 batch_size: int = 32, rng_seed: int = 0,
                 start_epoch: int = 0) -> tuple[ModelGraph, TrainHistory]:
    """Minibatch training; updates ``model`` in place and returns it.

    Epoch ``e`` (counted from ``start_epoch``) visits samples in
    ``epoch_permutation(n, rng_seed, e)`` order.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x, y = _arrays(dataset)
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    history = TrainHistory()
    for epoch in range(start_epoch, start_epoch + epochs):
        order = epoch_permutation(n, rng_seed, epoch)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, hits = train_step(model, x[idx], y[idx], optimizer)
            total_loss += loss * len(idx)
            correct += hits
        history.loss.append(total_loss / n)
        history.accuracy.append(correct / n)
    return model, history


def predict(model: ModelGraph, images) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    return np.argmax(forward_batch(model, images), axis=1)
