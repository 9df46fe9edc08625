"""A minimal conv/linear runtime for desk-scale merging experiments.

Supported layers: valid 2-D convolution (stride 1, no padding), affine
linear, ReLU and flatten. Inputs are ``[N, C, H, W]`` for convolutional
models or ``[N, F]`` for purely linear ones.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, MissingParameter, ShapeMismatch
from ..segment import ShapeTrace, TraceStep
from ..tensorio import TensorMap, from_bytes, read_checkpoint, to_bytes


class LayerKind(str, enum.Enum):
    CONV2D_VALID = "conv2d_valid"
    LINEAR = "linear"
    RELU = "relu"
    FLATTEN = "flatten"


class LossKind(str, enum.Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class Layer:
    kind: LayerKind
    weight: str | None = None
    bias: str | None = None
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0

    @property
    def param_names(self) -> list[str]:
        return [n for n in (self.weight, self.bias) if n]

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV2D_VALID:
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (self.out_size, self.in_size)


@dataclass
class ToyModelSpec:
    input_shape: list[int]
    layers: list[Layer] = field(default_factory=list)
    loss: LossKind = LossKind.MSE

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _next_shape(layer, shape, i)

    def output_shape(self) -> tuple[int, ...]:
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _next_shape(layer, shape, i)
        return shape

    @property
    def param_names(self) -> list[str]:
        return [n for layer in self.layers for n in layer.param_names]

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            entry = {"kind": layer.kind.value}
            if layer.kind in (LayerKind.CONV2D_VALID, LayerKind.LINEAR):
                entry.update(weight=layer.weight, bias=layer.bias, in_size=layer.in_size, out_size=layer.out_size)
                if layer.kind is LayerKind.CONV2D_VALID:
                    entry["kernel"] = layer.kernel
            layers.append(entry)
        return {"input_shape": list(self.input_shape), "layers": layers, "loss": self.loss.value}

    @classmethod
    def from_json(cls, obj: dict) -> ToyModelSpec:
        try:
            layers = [
                Layer(
                    LayerKind(e["kind"]),
                    e.get("weight"),
                    e.get("bias"),
                    int(e.get("in_size", 0)),
                    int(e.get("out_size", 0)),
                    int(e.get("kernel", 0)),
                )
                for e in obj["layers"]
            ]
            return cls([int(d) for d in obj["input_shape"]], layers, LossKind(obj.get("loss", "mse")))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed model spec: {e}") from e


def _next_shape(layer: Layer, shape: tuple[int, ...], i: int) -> tuple[int, ...]:
    kind = layer.kind
    if kind is LayerKind.CONV2D_VALID:
        if len(shape) != 3 or shape[0] != layer.in_size or layer.kernel > min(shape[1:]):
            raise ShapeMismatch(f"layer {i}: conv expects [{layer.in_size}, H, W], got {list(shape)}")
        return (layer.out_size, shape[1] - layer.kernel + 1, shape[2] - layer.kernel + 1)
    if kind is LayerKind.LINEAR:
        if len(shape) != 1 or shape[0] != layer.in_size:
            raise ShapeMismatch(f"layer {i}: linear expects [{layer.in_size}], got {list(shape)}")
        return (layer.out_size,)
    if kind is LayerKind.FLATTEN:
        return (int(np.prod(shape)),)
    return shape


def load_spec(path: str | os.PathLike) -> ToyModelSpec:
    with open(path) as fh:
        return ToyModelSpec.from_json(json.load(fh))


def _params(spec: ToyModelSpec, model: TensorMap) -> dict[str, np.ndarray]:
    out = {}
    for layer in spec.layers:
        if layer.kind not in (LayerKind.CONV2D_VALID, LayerKind.LINEAR):
            continue
        for name, shape in ((layer.weight, layer.weight_shape()), (layer.bias, (layer.out_size,))):
            if name not in model:
                raise MissingParameter(f"model lacks parameter {name!r}")
            if tuple(model[name].shape) != shape:
                raise ShapeMismatch(f"{name}: expected shape {list(shape)}, got {list(model[name].shape)}")
            out[name] = model[name].astype(np.float64)
    return out


def _conv2d_valid(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, _, _ = x.shape
    o, _, k, _ = w.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # [N, C, H', W', k, k]
    hh, ww = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hh * ww, c * k * k)
    out = cols @ w.reshape(o, c * k * k).T + b
    return out.reshape(n, hh, ww, o).transpose(0, 3, 1, 2)


def forward(spec: ToyModelSpec, model: TensorMap, inputs: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Run the network on a batch in float64; optionally record (layer, output shape) pairs."""
    params = _params(spec, model)
    x = np.asarray(inputs, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeMismatch(f"inputs have per-sample shape {list(x.shape[1:])}, spec wants {spec.input_shape}")
    for layer in spec.layers:
        if layer.kind is LayerKind.CONV2D_VALID:
            x = _conv2d_valid(x, params[layer.weight], params[layer.bias])
        elif layer.kind is LayerKind.LINEAR:
            x = x @ params[layer.weight].T + params[layer.bias]
        elif layer.kind is LayerKind.RELU:
            x = np.maximum(x, 0.0)
        else:
            x = x.reshape(x.shape[0], -1)
        if trace is not None:
            trace.append((layer, list(x.shape)))
    return x


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_value(kind: LossKind, outputs: np.ndarray, targets: np.ndarray) -> float:
    if kind is LossKind.MSE:
        t = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
        return float(np.mean((outputs - t) ** 2))
    labels = np.asarray(targets).reshape(-1).astype(np.int64)
    if labels.shape[0] != outputs.shape[0] or labels.min() < 0 or labels.max() >= outputs.shape[1]:
        raise ShapeMismatch("class targets out of range or wrong count")
    logp = _log_softmax(outputs)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise DataError("dataset needs N >= 1 samples with matching input/target counts")

    def to_tensormap(self) -> TensorMap:
        return TensorMap({
            "inputs": np.asarray(self.inputs, dtype=np.float32),
            "targets": np.asarray(self.targets, dtype=np.float32),
        })

    @classmethod
    def from_tensormap(cls, m: TensorMap) -> Dataset:
        if "inputs" not in m or "targets" not in m:
            raise DataError("dataset file must hold 'inputs' and 'targets'")
        return cls(m["inputs"].astype(np.float64), m["targets"].astype(np.float64))

    def to_bytes(self) -> bytes:
        return to_bytes(self.to_tensormap())

    @classmethod
    def from_bytes(cls, data: bytes) -> Dataset:
        return cls.from_tensormap(from_bytes(data))


def load_dataset(path: str | os.PathLike) -> Dataset:
    return Dataset.from_tensormap(read_checkpoint(path))


def forward_loss(spec: ToyModelSpec, model: TensorMap, data: Dataset) -> float:
    """Mean loss of ``model`` over ``data``."""
    return loss_value(spec.loss, forward(spec, model, data.inputs), data.targets)


def shape_trace(spec: ToyModelSpec, model: TensorMap, probe: np.ndarray) -> ShapeTrace:
    """Record output shapes of one probe inference as a segmentation trace."""
    record: list = []
    forward(spec, model, probe, trace=record)
    return ShapeTrace([
        TraceStep(f"{i}.{layer.kind.value}", layer.param_names, shape)
        for i, (layer, shape) in enumerate(record)
    ])
