"""Width-heterogeneous MLP clients with explicit backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .numerics import Matrix, as_matrix

ACTIVATIONS = ("tanh", "relu", "linear")
MODEL_MAGIC = "FCCLSIM-MODEL"
MODEL_FORMAT_VERSION = 1


def _activate(kind: str, x: Matrix) -> Matrix:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x


def _activate_backward(kind: str, pre: Matrix, post: Matrix, grad: Matrix) -> Matrix:
    if kind == "tanh":
        return grad * (1.0 - post * post)
    if kind == "relu":
        return grad * (pre > 0)
    return grad


@dataclass
class Layer:
    weight: Matrix  # fan_in x fan_out
    bias: Matrix  # 1 x fan_out
    activation: str = "tanh"


class ClientModel:
    """Feature extractor (stack of dense layers) followed by a linear classifier.

    ``version`` increments on every parameter assignment so that forward
    caches taken before an update are detected as stale.
    """

    def __init__(self, layers: list[Layer], classifier_weight: Matrix, classifier_bias: Matrix):
        if not layers:
            raise ParameterError("a client model needs at least one extractor layer")
        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (1, layer.weight.shape[1]):
                raise ShapeError(f"layer {k} bias shape {layer.bias.shape} does not match weight {layer.weight.shape}")
            if k and layers[k - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ShapeError(f"layer {k} input width does not chain from layer {k - 1}")
        if classifier_weight.shape[0] != layers[-1].weight.shape[1]:
            raise ShapeError("classifier input width must equal the feature dimension")
        if classifier_bias.shape != (1, classifier_weight.shape[1]):
            raise ShapeError("classifier bias shape mismatch")
        self.layers = layers
        self.classifier_weight = classifier_weight
        self.classifier_bias = classifier_bias
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def class_count(self) -> int:
        return self.classifier_weight.shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    def params(self) -> dict[str, Matrix]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"extractor.{k}.weight"] = layer.weight
            out[f"extractor.{k}.bias"] = layer.bias
        out["classifier.weight"] = self.classifier_weight
        out["classifier.bias"] = self.classifier_bias
        return out

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self.params().items()}

    def set_params(self, params: Mapping[str, Matrix]) -> None:
        current = self.params()
        if set(params) != set(current):
            raise ShapeError("parameter names do not match the model")
        for name, value in params.items():
            if value.shape != current[name].shape:
                raise ShapeError(f"{name}: shape {value.shape} != {current[name].shape}")
        for k, layer in enumerate(self.layers):
            layer.weight = np.array(params[f"extractor.{k}.weight"], dtype=np.float64)
            layer.bias = np.array(params[f"extractor.{k}.bias"], dtype=np.float64)
        self.classifier_weight = np.array(params["classifier.weight"], dtype=np.float64)
        self.classifier_bias = np.array(params["classifier.bias"], dtype=np.float64)
        self.version += 1

    def copy(self) -> "ClientModel":
        return ClientModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.classifier_weight.copy(),
            self.classifier_bias.copy(),
        )


@dataclass(frozen=True)
class Snapshot:
    """Read-only parameter copy of a model, tagged with the epoch that produced it."""

    model: ClientModel = field(repr=False)
    epoch_tag: int

    @classmethod
    def of(cls, model: ClientModel, epoch_tag: int) -> "Snapshot":
        frozen = model.copy()
        for arr in frozen.params().values():
            arr.flags.writeable = False
        return cls(frozen, epoch_tag)

    def params(self) -> dict[str, Matrix]:
        return self.model.params()

    def restore(self) -> ClientModel:
        return self.model.copy()


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: list[Matrix]
    pre: list[Matrix]
    post: list[Matrix]


def _unwrap(model: ClientModel | Snapshot) -> ClientModel:
    return model.model if isinstance(model, Snapshot) else model


def forward(model: ClientModel | Snapshot, x: Matrix) -> tuple[Matrix, Matrix, ForwardCache]:
    """Return features ``h``, logits ``z`` and the cache needed by :func:`backward`."""
    net = _unwrap(model)
    x = as_matrix(x, "x")
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, model expects {net.input_dim}")
    inputs, pre, post = [], [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        u = a @ layer.weight + layer.bias
        a = _activate(layer.activation, u)
        pre.append(u)
        post.append(a)
    z = a @ net.classifier_weight + net.classifier_bias
    return a, z, ForwardCache(id(net), net.version, inputs, pre, post)


def backward(model: ClientModel, cache: ForwardCache, grad_z: Matrix | None, grad_h: Matrix | None = None) -> dict[str, Matrix]:
    """Parameter gradients given upstream gradients on logits and/or features."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StateError("forward cache does not belong to the current model parameters")
    h = cache.post[-1]
    batch = h.shape[0]
    if grad_z is None:
        grad_z = np.zeros((batch, model.class_count))
    if grad_z.shape != (batch, model.class_count):
        raise ShapeError(f"grad_z shape {grad_z.shape} != {(batch, model.class_count)}")
    grads = {
        "classifier.weight": h.T @ grad_z,
        "classifier.bias": grad_z.sum(axis=0, keepdims=True),
    }
    g = grad_z @ model.classifier_weight.T
    if grad_h is not None:
        if grad_h.shape != h.shape:
            raise ShapeError(f"grad_h shape {grad_h.shape} != {h.shape}")
        g = g + grad_h
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        gu = _activate_backward(layer.activation, cache.pre[k], cache.post[k], g)
        grads[f"extractor.{k}.weight"] = cache.inputs[k].T @ gu
        grads[f"extractor.{k}.bias"] = gu.sum(axis=0, keepdims=True)
        if k:
            g = gu @ layer.weight.T
    return grads


def predict(model: ClientModel | Snapshot, x: Matrix) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    _, z, _ = forward(model, x)
    return np.argmax(z, axis=1)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Matrix] = field(default_factory=dict)
    v: dict[str, Matrix] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Matrix], grads: Mapping[str, Matrix]) -> dict[str, Matrix]:
    """One bias-corrected Adam update. Returns new arrays; ``state`` advances in place."""
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for {name}")
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"{name}: moment shape {state.m[name].shape} != {p.shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out


def apply_gradients(model: ClientModel, state: AdamState, grads: Mapping[str, Matrix]) -> None:
    model.set_params(adam_step(state, model.params(), grads))


# ---------------------------------------------------------------------------
# Construction and persistence


def init_model(widths: Iterable[int], classes: int, rng: np.random.Generator, activation: str = "tanh") -> ClientModel:
    """He-style fan-in uniform weights, zero biases."""
    widths = list(widths)
    if len(widths) < 2:
        raise ParameterError("layer spec needs an input width and at least one layer width")
    if min(widths) < 1 or classes < 1:
        raise ParameterError("widths and class count must be >= 1")
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        layers.append(Layer(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros((1, fan_out)), activation))
    limit = np.sqrt(6.0 / widths[-1])
    return ClientModel(layers, rng.uniform(-limit, limit, (widths[-1], classes)), np.zeros((1, classes)))


def build_scenario_models(spec: list[list[int]], classes: int, seed: int, activation: str = "tanh") -> list[ClientModel]:
    """One model per client layer spec; client ``i`` draws from sub-seed ``(seed, i)``."""
    if not spec:
        raise ParameterError("empty client list")
    return [init_model(w, classes, np.random.default_rng([seed, i]), activation) for i, w in enumerate(spec)]


def save_model(model: ClientModel | Snapshot, path: str | Path) -> None:
    """Text container::

        FCCLSIM-MODEL 1
        activations tanh tanh
        param <name> <rows> <cols>
        <rows lines of space-separated floats, repr precision>
        ...
    """
    net = _unwrap(model)
    lines = [f"{MODEL_MAGIC} {MODEL_FORMAT_VERSION}", "activations " + " ".join(l.activation for l in net.layers)]
    for name, arr in net.params().items():
        lines.append(f"param {name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in arr)
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: str | Path) -> ClientModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != [MODEL_MAGIC, str(MODEL_FORMAT_VERSION)]:
        raise StateError(f"{path}: not a {MODEL_MAGIC} v{MODEL_FORMAT_VERSION} file")
    activations = lines[1].split()[1:]
    params = {}
    i = 2
    while i < len(lines):
        _, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        body = lines[i + 1 : i + 1 + rows]
        params[name] = np.array([[float(v) for v in row.split()] for row in body], dtype=np.float64).reshape(rows, cols)
        i += 1 + rows
    layers = [
        Layer(params[f"extractor.{k}.weight"], params[f"extractor.{k}.bias"], act) for k, act in enumerate(activations)
    ]
    return ClientModel(layers, params["classifier.weight"], params["classifier.bias"])
