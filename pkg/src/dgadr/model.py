"""MLP feature extractor + linear head with analytic backpropagation.

Weights are stored input-major (``W`` has shape ``(fan_in, fan_out)``) so a
layer computes ``X @ W + b`` on row-major batches. The feature vector ``z`` fed
to DomAlign is one of the hidden activations (by default the penultimate one).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from loguru import logger

from dgadr.data import Minibatch
from dgadr.exceptions import ModelError

ACTIVATIONS = ("tanh", "relu")
PARAMS_FORMAT = "dgadr-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class Model:
    """MLP parameters.

    ``activations[k]`` is applied after layer ``k`` for every hidden layer; the
    final layer is linear and produces logits. ``feature_layer_index`` selects
    the activation that serves as feature vector: 0 is the input, ``k`` the
    output of hidden layer ``k``.
    """

    layers: tuple[Layer, ...]
    activations: tuple[str, ...]
    feature_layer_index: int
    init_seed: int = 0

    def __post_init__(self):
        if not self.layers:
            msg = "a model needs at least one layer"
            raise ModelError(msg)
        if len(self.activations) != len(self.layers) - 1:
            msg = (
                f"{len(self.layers) - 1} hidden layers need as many activations, "
                f"got {len(self.activations)}"
            )
            raise ModelError(msg)
        for name in self.activations:
            if name not in ACTIVATIONS:
                msg = f"unknown activation '{name}', expected one of {ACTIVATIONS}"
                raise ModelError(msg)
        for index, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                msg = f"layer {index}: bias must match the weight's output dimension"
                raise ModelError(msg)
        for index, (left, right) in enumerate(zip(self.layers, self.layers[1:])):
            if left.weight.shape[1] != right.weight.shape[0]:
                msg = (
                    f"layer {index} outputs {left.weight.shape[1]} values but "
                    f"layer {index + 1} expects {right.weight.shape[0]}"
                )
                raise ModelError(msg)
        if not 0 <= self.feature_layer_index < len(self.layers):
            msg = (
                f"feature_layer_index must be in [0, {len(self.layers) - 1}], "
                f"got {self.feature_layer_index}"
            )
            raise ModelError(msg)

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [
            layer.weight.shape[1] for layer in self.layers
        ]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[self.feature_layer_index]

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        return [array for layer in self.layers for array in (layer.weight, layer.bias)]

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> Model:
        """Same architecture, new parameter arrays in ``parameters()`` order."""
        layers = tuple(
            Layer(weight=arrays[2 * k], bias=arrays[2 * k + 1])
            for k in range(len(self.layers))
        )
        return replace(self, layers=layers)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self.parameters())


@dataclass(frozen=True)
class ParamGrads:
    """Gradients congruent with ``Model.layers``."""

    layers: tuple[Layer, ...]

    def arrays(self) -> list[np.ndarray]:
        return [array for layer in self.layers for array in (layer.weight, layer.bias)]

    def flat(self) -> np.ndarray:
        return np.concatenate([array.ravel() for array in self.arrays()])

    def __add__(self, other: ParamGrads) -> ParamGrads:
        return ParamGrads(
            tuple(
                Layer(a.weight + b.weight, a.bias + b.bias)
                for a, b in zip(self.layers, other.layers)
            )
        )


@dataclass(frozen=True)
class ForwardTrace:
    """Everything backward needs for one batch.

    ``activations[k]`` is the input of layer ``k`` (``activations[0]`` is the
    batch itself) and ``pre_activations[k]`` is that layer's affine output.
    """

    pre_activations: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]
    feature_layer_index: int

    @property
    def features(self) -> np.ndarray:
        return self.activations[self.feature_layer_index]

    @property
    def logits(self) -> np.ndarray:
        return self.pre_activations[-1]

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]


def init_model(
    layer_dims: Sequence[int],
    activation: str | Sequence[str] = "tanh",
    seed: int = 0,
    *,
    feature_layer_index: int | None = None,
) -> Model:
    """Fan-in scaled uniform initialisation with zero biases.

    Weights are drawn from ``U(-a, a)`` with ``a = sqrt(3 * gain / fan_in)``
    (variance ``gain / fan_in``), gain 1 for tanh and 2 for relu.

    Args:
        layer_dims: ``[input_dim, hidden..., num_classes]``
        activation: One activation for all hidden layers, or one per layer
        seed: Seed of the initialisation RNG
        feature_layer_index: Activation used as ``z``; defaults to the
            penultimate one

    Raises:
        ModelError: For fewer than two dims or non-positive sizes
    """
    dims = list(layer_dims)
    if len(dims) < 2 or any(dim < 1 for dim in dims):
        msg = f"layer_dims needs at least two positive sizes, got {dims}"
        raise ModelError(msg)
    num_layers = len(dims) - 1
    if isinstance(activation, str):
        activations = (activation,) * (num_layers - 1)
    else:
        activations = tuple(activation)

    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        following = activations[k] if k < len(activations) else "tanh"
        gain = 2.0 if following == "relu" else 1.0
        limit = np.sqrt(3.0 * gain / fan_in)
        layers.append(
            Layer(
                weight=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
            )
        )
    return Model(
        layers=tuple(layers),
        activations=activations,
        feature_layer_index=(
            num_layers - 1 if feature_layer_index is None else feature_layer_index
        ),
        init_seed=seed,
    )


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post**2
    return (pre > 0).astype(float)


def forward(model: Model, batch: Minibatch | np.ndarray) -> ForwardTrace:
    """Run the batch through the network, keeping every intermediate.

    Raises:
        ModelError: On an input dimension mismatch or non-finite parameters
    """
    inputs = batch.features if isinstance(batch, Minibatch) else np.asarray(batch)
    if inputs.ndim != 2 or inputs.shape[1] != model.layer_dims[0]:
        msg = (
            f"batch has feature shape {inputs.shape}, model expects "
            f"{model.layer_dims[0]} inputs"
        )
        raise ModelError(msg)
    if not model.is_finite():
        msg = "model parameters contain NaN or Inf"
        raise ModelError(msg)

    activations = [inputs]
    pre_activations = []
    for k, layer in enumerate(model.layers):
        pre = activations[-1] @ layer.weight + layer.bias
        pre_activations.append(pre)
        if k < len(model.activations):
            activations.append(_activate(model.activations[k], pre))
    return ForwardTrace(
        pre_activations=tuple(pre_activations),
        activations=tuple(activations),
        feature_layer_index=model.feature_layer_index,
    )


def backward(
    model: Model,
    trace: ForwardTrace,
    d_logits: np.ndarray | None,
    d_features: np.ndarray | None,
) -> ParamGrads:
    """Backpropagate logit and feature gradients through the shared layers.

    Either upstream gradient may be ``None`` (treated as zero). The feature
    gradient is injected at ``trace.features`` and summed with whatever arrives
    there from the classifier path.

    Raises:
        ModelError: If an upstream gradient has the wrong shape
    """
    batch_size = trace.batch_size
    logits_shape = (batch_size, model.num_classes)
    features_shape = trace.features.shape
    if d_logits is None:
        d_logits = np.zeros(logits_shape)
    if d_logits.shape != logits_shape:
        msg = f"dLoss/dLogits has shape {d_logits.shape}, expected {logits_shape}"
        raise ModelError(msg)
    if d_features is not None and d_features.shape != features_shape:
        msg = f"dLoss/dFeatures has shape {d_features.shape}, expected {features_shape}"
        raise ModelError(msg)

    grads: list[Layer] = [None] * len(model.layers)  # type: ignore[list-item]
    delta = d_logits
    for k in range(len(model.layers) - 1, -1, -1):
        layer_input = trace.activations[k]
        grads[k] = Layer(weight=layer_input.T @ delta, bias=delta.sum(axis=0))
        if k == 0:
            break
        upstream = delta @ model.layers[k].weight.T
        if d_features is not None and k == model.feature_layer_index:
            upstream = upstream + d_features
        delta = upstream * _activation_grad(
            model.activations[k - 1],
            trace.pre_activations[k - 1],
            trace.activations[k],
        )
    return ParamGrads(tuple(grads))


def sgd_step(model: Model, grads: ParamGrads, lr: float) -> Model:
    """Plain SGD: ``theta <- theta - lr * g``.

    Raises:
        ModelError: For non-finite gradients, incongruent shapes or lr < 0
    """
    if lr < 0:
        msg = f"learning rate must be >= 0, got {lr}"
        raise ModelError(msg)
    params = model.parameters()
    updates = grads.arrays()
    if len(params) != len(updates) or any(
        p.shape != g.shape for p, g in zip(params, updates)
    ):
        msg = "gradients are not shape-congruent with the model"
        raise ModelError(msg)
    if not all(np.all(np.isfinite(g)) for g in updates):
        msg = "refusing SGD step with non-finite gradients"
        raise ModelError(msg)
    return model.with_parameters([p - lr * g for p, g in zip(params, updates)])


def finite_diff_grad(
    model: Model, loss_evaluator: Callable[[Model], float], epsilon: float = 1e-4
) -> ParamGrads:
    """Central-difference gradient of ``loss_evaluator`` w.r.t. every parameter."""
    base = [array.copy() for array in model.parameters()]
    numeric = [np.zeros_like(array) for array in base]
    for array, out in zip(base, numeric):
        flat = array.reshape(-1)
        out_flat = out.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = loss_evaluator(model.with_parameters(base))
            flat[i] = original - epsilon
            minus = loss_evaluator(model.with_parameters(base))
            flat[i] = original
            out_flat[i] = (plus - minus) / (2.0 * epsilon)
    return ParamGrads(
        tuple(
            Layer(weight=numeric[2 * k], bias=numeric[2 * k + 1])
            for k in range(len(model.layers))
        )
    )


def save_params(model: Model, path: Path | str) -> None:
    """Write the text parameter file described in docs/file-formats.md."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format,{PARAMS_FORMAT},{PARAMS_VERSION}",
        f"activations,{','.join(model.activations)}",
        f"feature_layer,{model.feature_layer_index}",
        f"init_seed,{model.init_seed}",
        f"layers,{len(model.layers)}",
    ]
    for k, layer in enumerate(model.layers):
        fan_in, fan_out = layer.weight.shape
        lines.append(f"layer,{k},{fan_in},{fan_out}")
        lines.extend(",".join(f"{v:.17g}" for v in row) for row in layer.weight)
        lines.append(",".join(f"{v:.17g}" for v in layer.bias))
    path.write_text("\n".join(lines) + "\n")
    logger.debug("Saved {} layers to {}", len(model.layers), path)


def _expect(lines: list[str], index: int, key: str, path: Path) -> list[str]:
    if index >= len(lines):
        msg = f"{path}: truncated parameter file, expected '{key}' at line {index + 1}"
        raise ModelError(msg)
    fields = lines[index].split(",")
    if fields[0] != key:
        msg = f"{path}:{index + 1}: expected '{key}', got '{fields[0]}'"
        raise ModelError(msg)
    return fields[1:]


def _floats(line: str, expected: int, path: Path, line_number: int) -> np.ndarray:
    try:
        values = np.array([float(v) for v in line.split(",")]) if line else np.array([])
    except ValueError as exc:
        msg = f"{path}:{line_number}: malformed number ({exc})"
        raise ModelError(msg) from exc
    if values.size != expected:
        msg = f"{path}:{line_number}: expected {expected} values, got {values.size}"
        raise ModelError(msg)
    if not np.all(np.isfinite(values)):
        msg = f"{path}:{line_number}: non-finite parameter value"
        raise ModelError(msg)
    return values


def _ints(fields: list[str], expected: int, path: Path, line_number: int) -> list[int]:
    if len(fields) != expected:
        msg = f"{path}:{line_number}: expected {expected} integers, got {len(fields)}"
        raise ModelError(msg)
    try:
        return [int(v) for v in fields]
    except ValueError as exc:
        msg = f"{path}:{line_number}: malformed integer ({exc})"
        raise ModelError(msg) from exc


def load_params(path: Path | str) -> Model:
    """Read a parameter file written by ``save_params``.

    Raises:
        ModelError: If the file is missing, malformed or inconsistent
    """
    path = Path(path)
    if not path.is_file():
        msg = f"parameter file not found: {path}"
        raise ModelError(msg)
    lines = path.read_text().splitlines()

    header = _expect(lines, 0, "format", path)
    if header != [PARAMS_FORMAT, str(PARAMS_VERSION)]:
        msg = f"{path}:1: unsupported parameter format {header}"
        raise ModelError(msg)
    activations = tuple(a for a in _expect(lines, 1, "activations", path) if a)
    (feature_layer,) = _ints(_expect(lines, 2, "feature_layer", path), 1, path, 3)
    (init_seed,) = _ints(_expect(lines, 3, "init_seed", path), 1, path, 4)
    (num_layers,) = _ints(_expect(lines, 4, "layers", path), 1, path, 5)

    cursor = 5
    layers = []
    for k in range(num_layers):
        index, fan_in, fan_out = _ints(
            _expect(lines, cursor, "layer", path), 3, path, cursor + 1
        )
        if index != k:
            msg = f"{path}:{cursor + 1}: expected layer {k}, got {index}"
            raise ModelError(msg)
        cursor += 1
        if cursor + fan_in + 1 > len(lines):
            msg = f"{path}: truncated weights for layer {k}"
            raise ModelError(msg)
        weight = np.vstack(
            [
                _floats(lines[cursor + r], fan_out, path, cursor + r + 1)
                for r in range(fan_in)
            ]
        )
        cursor += fan_in
        bias = _floats(lines[cursor], fan_out, path, cursor + 1)
        cursor += 1
        layers.append(Layer(weight=weight, bias=bias))

    return Model(
        layers=tuple(layers),
        activations=activations,
        feature_layer_index=feature_layer,
        init_seed=init_seed,
    )
