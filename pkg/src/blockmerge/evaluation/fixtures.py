"""Synthetic task pairs: a base network, two fine-tuned variants and their validation sets.

Validation targets of each task are its own model's outputs plus noise, so
each source model is the better one on its own task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..segment import ShapeTrace
from ..tensorio import TensorMap
from .toymodel import Dataset, Layer, LayerKind, LossKind, ToyModelSpec, forward, forward_loss, shape_trace


def default_template() -> ToyModelSpec:
    """conv(2->8) relu conv(8->8) relu flatten fc(128->64) relu fc(64->4); 9,252 parameters."""
    L = LayerKind
    return ToyModelSpec(
        input_shape=[2, 8, 8],
        layers=[
            Layer(L.CONV2D_VALID, "conv1.weight", "conv1.bias", 2, 8, 3),
            Layer(L.RELU),
            Layer(L.CONV2D_VALID, "conv2.weight", "conv2.bias", 8, 8, 3),
            Layer(L.RELU),
            Layer(L.FLATTEN),
            Layer(L.LINEAR, "fc1.weight", "fc1.bias", 128, 64),
            Layer(L.RELU),
            Layer(L.LINEAR, "fc2.weight", "fc2.bias", 64, 4),
        ],
        loss=LossKind.MSE,
    )


@dataclass
class TaskPair:
    spec: ToyModelSpec
    base: TensorMap
    model_a: TensorMap
    model_b: TensorMap
    data_a: Dataset
    data_b: Dataset
    trace: ShapeTrace


@dataclass(frozen=True)
class FixtureKnobs:
    delta_scale: float = 1.0  # 0 gives identical models
    strong: float = 0.6
    weak: float = 0.1
    noise: float = 0.5
    samples: int = 256


def _conv_masks(spec: ToyModelSpec) -> dict[str, np.ndarray]:
    """Block-diagonal channel masks: the first half of each conv's outputs reads only the first half of its inputs."""
    masks = {}
    for layer in spec.layers:
        if layer.kind is not LayerKind.CONV2D_VALID:
            continue
        if layer.in_size % 2 or layer.out_size % 2:
            raise DataError(f"{layer.weight}: two-tower fixtures need even channel counts")
        m = np.zeros(layer.weight_shape())
        hi, ho = layer.in_size // 2, layer.out_size // 2
        m[:ho, :hi] = 1.0
        m[ho:, hi:] = 1.0
        masks[layer.weight] = m
    return masks


def _init_params(spec: ToyModelSpec, rng: np.random.Generator, masks: dict) -> dict[str, np.ndarray]:
    params = {}
    for layer in spec.layers:
        if layer.kind not in (LayerKind.CONV2D_VALID, LayerKind.LINEAR):
            continue
        shape = layer.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if layer.weight in masks:
            w *= masks[layer.weight] * np.sqrt(2.0)  # half the fan-in survives the mask
        params[layer.weight] = w
        params[layer.bias] = rng.normal(0.0, 0.05, size=(layer.out_size,))
    return params


def _delta(rng, ref: np.ndarray, scale: float, mask=1.0) -> np.ndarray:
    nz = ref[ref != 0]
    spread = float(np.std(nz)) if nz.size > 1 else 0.05
    return scale * spread * rng.normal(size=ref.shape) * mask


def _as_map(params: dict[str, np.ndarray]) -> TensorMap:
    # adding +0.0 turns masked -0.0 entries into +0.0
    return TensorMap({n: (p + 0.0).astype(np.float32) for n, p in params.items()})


def generate_task_pair(seed: int, spec: ToyModelSpec | None = None, knobs: FixtureKnobs = FixtureKnobs()) -> TaskPair:
    """Deterministic two-task fixture on a two-tower network.

    The template must start with convolutions (even channel counts) followed
    by a flatten and linear layers. Task A's inputs live on the first half of
    the input channels and task B's on the second half, so each task drives
    its own convolutional tower. Task A's fine-tune moves its tower's
    convolutions; task B's moves the head weights reading its tower. Both add
    a weak dense drift everywhere else.
    """
    spec = spec or default_template()
    if not spec.layers or spec.layers[0].kind is not LayerKind.CONV2D_VALID:
        raise DataError("fixture templates must start with a convolution")
    rng = np.random.default_rng(seed)
    masks = _conv_masks(spec)
    base = _init_params(spec, rng, masks)

    delta_a, delta_b = {}, {}
    head_seen = False
    for layer in spec.layers:
        if layer.kind is LayerKind.CONV2D_VALID:
            m = masks[layer.weight]
            own_a = m * (np.arange(layer.out_size) < layer.out_size // 2)[:, None, None, None]
            delta_a[layer.weight] = _delta(rng, base[layer.weight], knobs.strong, own_a)
            delta_b[layer.weight] = _delta(rng, base[layer.weight], knobs.weak, m)
            for d in (delta_a, delta_b):
                d[layer.bias] = _delta(rng, base[layer.bias], knobs.weak)
        elif layer.kind is LayerKind.LINEAR:
            delta_a[layer.weight] = _delta(rng, base[layer.weight], knobs.weak)
            if not head_seen:
                # flattened features of the second tower occupy the upper half of the columns
                cols_b = (np.arange(layer.in_size) >= layer.in_size // 2).astype(float)[None, :]
                delta_b[layer.weight] = _delta(rng, base[layer.weight], knobs.strong, cols_b)
            else:
                delta_b[layer.weight] = _delta(rng, base[layer.weight], knobs.strong / 2)
            delta_a[layer.bias] = _delta(rng, base[layer.bias], knobs.weak)
            delta_b[layer.bias] = _delta(rng, base[layer.bias], knobs.strong / 2)
            head_seen = True

    k = knobs.delta_scale
    base_map = _as_map(base)
    model_a = _as_map({n: base[n] + k * delta_a[n] for n in base})
    model_b = _as_map({n: base[n] + k * delta_b[n] for n in base})
    if k == 0:
        model_a, model_b = base_map, base_map

    channels = spec.input_shape[0]

    def make_data(model: TensorMap, other: TensorMap, first_half: bool) -> Dataset:
        x = rng.normal(size=(knobs.samples, *spec.input_shape))
        if first_half:
            x[:, channels // 2 :] = 0.0
        else:
            x[:, : channels // 2] = 0.0
        # stored as float32 on disk, so round-trip the values up front
        x = x.astype(np.float32).astype(np.float64)
        clean = forward(spec, model, x)
        # noise scales with the disagreement between the two task models
        gap = float(np.sqrt(np.mean((clean - forward(spec, other, x)) ** 2))) or float(np.std(clean)) or 1.0
        y = clean + knobs.noise * gap * rng.normal(size=clean.shape)
        return Dataset(x, y.astype(np.float32).astype(np.float64))

    data_a = make_data(model_a, model_b, True)
    data_b = make_data(model_b, model_a, False)
    trace = shape_trace(spec, base_map, data_a.inputs[:8])
    return TaskPair(spec, base_map, model_a, model_b, data_a, data_b, trace)


def check_pair(pair: TaskPair) -> bool:
    """Each source model must beat the other one on its own task."""
    la_a = forward_loss(pair.spec, pair.model_a, pair.data_a)
    lb_a = forward_loss(pair.spec, pair.model_b, pair.data_a)
    lb_b = forward_loss(pair.spec, pair.model_b, pair.data_b)
    la_b = forward_loss(pair.spec, pair.model_a, pair.data_b)
    return la_a < lb_a and lb_b < la_b
