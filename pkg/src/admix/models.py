"""Small CNN classifiers used as surrogate and target models.

A model is a :class:`ModelSpec` (architecture) plus a dict of named float32
weight tensors. Two reference architectures ship as built-ins, ``net-a`` and
``net-b``; they differ in depth and width so that adversaries crafted on one
can be tested for transfer to the other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import Tape, Tensor

MAGIC = b"ADMW"
VERSION = 1

Weights = dict  # name -> Tensor, e.g. "layer0.kernel", "layer0.bias"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``layers`` is a sequence of descriptors such as
    ``{"type": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1}``,
    ``{"type": "relu"}``, ``{"type": "avgpool", "k": 2}``,
    ``{"type": "flatten"}`` and ``{"type": "dense", "out": 10}``.
    """

    input_shape: tuple
    layers: tuple
    num_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(layer) for layer in self.layers))
        self.param_shapes()  # validates the chain

    def param_shapes(self) -> dict[str, tuple]:
        """Expected weight shapes keyed by tensor name, in layer order."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C,H,W) of positive ints, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        shape = self.input_shape
        params = {}
        for i, layer in enumerate(self.layers):
            kind = layer.get("type")
            where = f"layer {i} ({kind})"
            if kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"{where}: expects a [C,H,W] input, got {list(shape)}")
                c, h, w = shape
                out, k = int(layer["out"]), int(layer["k"])
                stride, pad = int(layer.get("stride", 1)), int(layer.get("pad", 0))
                if k > h + 2 * pad or k > w + 2 * pad or stride < 1 or out < 1:
                    raise ConfigError(f"{where}: kernel {k} does not fit input {list(shape)} with pad {pad}")
                params[f"layer{i}.kernel"] = (out, c, k, k)
                params[f"layer{i}.bias"] = (out,)
                shape = (out, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
            elif kind == "relu":
                pass
            elif kind == "avgpool":
                k = int(layer["k"])
                if len(shape) != 3 or shape[1] % k or shape[2] % k:
                    raise ConfigError(f"{where}: window {k} does not divide {list(shape)}")
                shape = (shape[0], shape[1] // k, shape[2] // k)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"{where}: expects a flat input, got {list(shape)}")
                out = int(layer["out"])
                params[f"layer{i}.kernel"] = (out, shape[0])
                params[f"layer{i}.bias"] = (out,)
                shape = (out,)
            else:
                raise ConfigError(f"{where}: unknown layer type")
        if shape != (self.num_classes,):
            raise ConfigError(f"final layer outputs {list(shape)}, expected [{self.num_classes}]")
        return params

    def to_json(self) -> str:
        doc = {
            "input_shape": list(self.input_shape),
            "layers": [dict(sorted(layer.items())) for layer in self.layers],
            "name": self.name,
            "num_classes": self.num_classes,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        return cls(tuple(doc["input_shape"]), tuple(doc["layers"]), int(doc["num_classes"]), doc.get("name", ""))


def builtin_spec(name: str, input_shape=(3, 32, 32), num_classes: int = 10) -> ModelSpec:
    """The reference architectures ``net-a`` and ``net-b``."""
    if name == "net-a":
        layers = [
            {"type": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1}, {"type": "relu"}, {"type": "avgpool", "k": 2},
            {"type": "conv", "out": 32, "k": 3, "stride": 1, "pad": 1}, {"type": "relu"}, {"type": "avgpool", "k": 2},
            {"type": "flatten"}, {"type": "dense", "out": num_classes},
        ]
    elif name == "net-b":
        layers = [
            {"type": "conv", "out": 12, "k": 5, "stride": 1, "pad": 2}, {"type": "relu"}, {"type": "avgpool", "k": 2},
            {"type": "conv", "out": 24, "k": 3, "stride": 1, "pad": 1}, {"type": "relu"}, {"type": "avgpool", "k": 2},
            {"type": "conv", "out": 48, "k": 3, "stride": 1, "pad": 1}, {"type": "relu"}, {"type": "avgpool", "k": 2},
            {"type": "flatten"}, {"type": "dense", "out": 64}, {"type": "relu"},
            {"type": "dense", "out": num_classes},
        ]
    else:
        raise ConfigError(f"unknown built-in architecture {name!r} (choose net-a or net-b)")
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes, name)


BUILTINS = ("net-a", "net-b")


class SplitMix64:
    """SplitMix64 generator; vectorised so a whole tensor is drawn at once."""

    GOLDEN = 0x9E3779B97F4A7C15
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(self.GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * self.GOLDEN) & self.MASK
        return z

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits of each draw."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def init_weights(spec: ModelSpec, seed: int) -> Weights:
    """Uniform init in [-s, s], s = sqrt(1/fan_in); biases start at zero."""
    rng = SplitMix64(seed)
    weights = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            weights[name] = T.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        s = np.sqrt(1.0 / fan_in)
        u = rng.uniform(int(np.prod(shape)))
        weights[name] = Tensor(((2.0 * u - 1.0) * s).reshape(shape))
    return weights


def check_weights(spec: ModelSpec, weights: Weights) -> None:
    expected = spec.param_shapes()
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ConfigError(f"weights do not match spec: missing={missing} unexpected={extra}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ShapeError("weights", f"tensor {name!r} has the wrong shape",
                             expected=list(shape), got=list(weights[name].shape))


class Model:
    """A ModelSpec bound to its weights. Immutable once built."""

    def __init__(self, spec: ModelSpec, weights: Weights, name: str | None = None):
        check_weights(spec, weights)
        self.spec = spec
        self.weights = dict(weights)
        self.name = name or spec.name or "model"

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def logits(self, x: Tensor, params: Weights | None = None) -> Tensor:
        """Build the forward graph for [C,H,W] or batched [B,C,H,W] input."""
        params = self.weights if params is None else params
        batched = x.ndim == 4
        h = x
        for i, layer in enumerate(self.spec.layers):
            kind = layer["type"]
            if kind == "conv":
                h = T.conv2d(h, params[f"layer{i}.kernel"], int(layer.get("stride", 1)),
                             int(layer.get("pad", 0)), bias=params[f"layer{i}.bias"])
            elif kind == "relu":
                h = T.relu(h)
            elif kind == "avgpool":
                h = T.avgpool2d(h, int(layer["k"]))
            elif kind == "flatten":
                h = T.flatten(h, batched)
            elif kind == "dense":
                h = T.dense(h, params[f"layer{i}.kernel"], params[f"layer{i}.bias"])
        return h

    def predict(self, images: np.ndarray, chunk: int = 250) -> np.ndarray:
        """Argmax labels for a [N,C,H,W] array."""
        out = []
        for start in range(0, len(images), chunk):
            z = self.logits(Tensor(images[start:start + chunk])).data
            out.append(np.argmax(z, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _check_input(model, x: Tensor, op: str) -> None:
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError(op, "input does not match the model's input shape",
                         expected=list(model.input_shape), got=list(x.shape))


def forward_logits(model, x: Tensor) -> Tensor:
    """Logits of a single [C,H,W] image."""
    x = T.as_tensor(x)
    _check_input(model, x, "forward_logits")
    return model.logits(x.detach())


def loss_input_grad(model, x: Tensor, y) -> tuple[float, Tensor]:
    """Softmax cross-entropy at label ``y`` and its gradient with respect to x."""
    x = T.as_tensor(x)
    _check_input(model, x, "loss_input_grad")
    tape = Tape()
    xv = tape.watch(x)
    loss = T.softmax_cross_entropy(model.logits(xv), y)
    return loss.item(), T.input_gradient(tape, loss, xv)


def train(model: Model, dataset, epochs: int, lr: float, batch: int, seed: int) -> Weights:
    """Plain minibatch SGD on mean cross-entropy; returns the new weights.

    The shuffling order of every epoch is drawn from ``seed`` so a run is
    bit-reproducible. ``dataset`` needs ``images`` [N,C,H,W] and ``labels`` [N].
    """
    images = np.asarray(dataset.images, dtype=np.float32)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ConfigError(f"labels must lie in [0, {model.num_classes})")
    if tuple(images.shape[1:]) != model.input_shape:
        raise ShapeError("train", "images do not match the model's input shape",
                         expected=list(model.input_shape), got=list(images.shape[1:]))
    if batch < 1 or epochs < 0:
        raise ConfigError("batch must be >= 1 and epochs >= 0")

    names = list(model.spec.param_shapes())
    params = {k: model.weights[k] for k in names}
    rng = np.random.default_rng(seed)
    lr64 = float(lr)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            tape = Tape()
            tracked = {k: tape.watch(v) for k, v in params.items()}
            loss = T.softmax_cross_entropy(model.logits(Tensor(images[idx]), tracked), labels[idx])
            grads = tape.gradient(loss, [tracked[k] for k in names])
            params = {
                k: Tensor._wrap(params[k].data.astype(np.float64) - lr64 * g.data.astype(np.float64))
                for k, g in zip(names, grads)
            }
    return params


def accuracy(model: Model, dataset) -> float:
    pred = model.predict(np.asarray(dataset.images, dtype=np.float32))
    return float(np.mean(pred == np.asarray(dataset.labels)))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(spec: ModelSpec, weights: Weights) -> bytes:
    check_weights(spec, weights)
    text = (spec.to_json() + "\n").encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name in spec.param_shapes():
        t = weights[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(t.data.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(spec: ModelSpec, weights: Weights, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, weights))


class _Reader:
    def __init__(self, buf: bytes, error=CheckpointError):
        self.buf = buf
        self.pos = 0
        self.error = error

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise self.error(f"truncated {what}: expected {n} bytes, got {len(self.buf) - self.pos}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> tuple[ModelSpec, Weights]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    at = r.pos
    text = r.take(r.u32("spec length"), "spec")
    try:
        spec = ModelSpec.from_json(text.decode("utf-8"))
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid model spec: {exc}", at) from None

    weights = {}
    for name, shape in spec.param_shapes().items():
        at = r.pos
        got = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8", "replace")
        if got != name:
            raise CheckpointError(f"expected tensor {name!r}, found {got!r}", at)
        at = r.pos
        rank = r.u32("tensor rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        if tuple(dims) != shape:
            raise CheckpointError(f"tensor {name!r} has dims {list(dims)}, spec requires {list(shape)}", at)
        payload = r.take(4 * int(np.prod(dims)), f"tensor payload for {name!r}")
        try:
            weights[name] = Tensor(np.frombuffer(payload, dtype="<f4").reshape(dims))
        except ArithmeticError:
            raise CheckpointError(f"tensor {name!r} contains non-finite values", r.pos - len(payload)) from None
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return spec, weights


def load_checkpoint(path) -> tuple[ModelSpec, Weights]:
    return parse_checkpoint(Path(path).read_bytes())


def load_model(path) -> Model:
    spec, weights = load_checkpoint(path)
    return Model(spec, weights, name=Path(path).stem)
