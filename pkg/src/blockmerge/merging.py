"""The five merging techniques over aligned parameter sets.

Every technique takes two source maps ``a`` and ``b`` (and a ``base`` for the
task-vector family) with identical signatures. Arithmetic runs in float64 on
widened copies and the result is narrowed back to each tensor's storage dtype
with round-to-nearest-even, so endpoint and fixed-point identities hold
exactly in the stored precision.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import MissingBase, ShapeMismatch, UsageError
from .tensorio import TensorMap, require_same_signature


class Technique(str, enum.Enum):
    LINEAR = "linear"
    TASK_ARITHMETIC = "task-arithmetic"
    TIES = "ties"
    DARE_LINEAR = "dare-linear"
    DARE_TIES = "dare-ties"

    @property
    def uses_density(self) -> bool:
        return self not in (Technique.LINEAR, Technique.TASK_ARITHMETIC)

    @property
    def needs_base(self) -> bool:
        return self is not Technique.LINEAR

    @classmethod
    def parse(cls, name: str) -> Technique:
        key = name.strip().lower().replace("_", "-")
        aliases = {"ta": "task-arithmetic", "dare-linear": "dare-linear"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise UsageError(
                f"unknown technique {name!r}; choose from {', '.join(t.value for t in cls)}"
            ) from None


TECHNIQUES: tuple[Technique, ...] = tuple(Technique)


@dataclass(frozen=True)
class MergeParams:
    technique: Technique
    weight: float = 0.5
    density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "technique", Technique(self.technique))
        if not 0.0 <= self.weight <= 1.0:
            raise UsageError(f"weight must lie in [0, 1], got {self.weight}")
        if not 0.0 < self.density <= 1.0:
            raise UsageError(f"density must lie in (0, 1], got {self.density}")
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")


# A task vector is a plain name -> float64 delta mapping.
TaskVector = dict


def _narrow(values: dict[str, np.ndarray], like: TensorMap) -> TensorMap:
    return TensorMap({n: values[n].astype(like[n].dtype) for n in like})


def _wide(m: TensorMap, name: str) -> np.ndarray:
    return m[name].astype(np.float64)


def merge_linear(a: TensorMap, b: TensorMap, weight: float) -> TensorMap:
    """Weighted parameter average ``weight * a + (1 - weight) * b``."""
    require_same_signature(a, b)
    w = float(weight)
    return _narrow({n: w * _wide(a, n) + (1.0 - w) * _wide(b, n) for n in a}, a)


def compute_task_vector(theta: TensorMap, base: TensorMap) -> TaskVector:
    require_same_signature(theta, base)
    return {n: _wide(theta, n) - _wide(base, n) for n in theta}


def _check_vectors(*vectors: TaskVector) -> None:
    first = vectors[0]
    for tv in vectors[1:]:
        if list(tv) != list(first) or any(tv[n].shape != first[n].shape for n in first):
            raise ShapeMismatch("task vectors are not aligned")


def merge_task_arithmetic(a: TensorMap, b: TensorMap, base: TensorMap, weight: float) -> TensorMap:
    require_same_signature(a, b, base)
    ta, tb = compute_task_vector(a, base), compute_task_vector(b, base)
    w = float(weight)
    return _narrow({n: _wide(base, n) + w * ta[n] + (1.0 - w) * tb[n] for n in a}, a)


def keep_count(density: float, size: int) -> int:
    # round away float noise such as 0.65 * 20 == 13.000000000000002
    return min(size, math.ceil(round(density * size, 9)))


def _trim_array(t: np.ndarray, density: float) -> np.ndarray:
    flat = t.reshape(-1)
    k = keep_count(density, flat.size)
    if k >= flat.size:
        return t.copy()
    # stable sort on descending magnitude keeps the lower flat index on ties
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(t.shape)


def ties_trim(tv: TaskVector, density: float) -> TaskVector:
    """Keep the ceil(density * size) largest-magnitude entries of each tensor."""
    if not 0.0 < density <= 1.0:
        raise UsageError(f"density must lie in (0, 1], got {density}")
    return {n: _trim_array(t, density) for n, t in tv.items()}


def _elect_and_merge(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    sign = np.sign(x + y)
    agree_x = (np.sign(x) == sign) & (sign != 0)
    agree_y = (np.sign(y) == sign) & (sign != 0)
    count = agree_x.astype(np.int64) + agree_y
    total = np.where(agree_x, x, 0.0) + np.where(agree_y, y, 0.0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(
    ta: TaskVector, tb: TaskVector, base: TensorMap, weight: float, density: float
) -> TensorMap:
    """Trim, elect a sign per entry, average the agreeing deltas, scale by ``weight``."""
    _check_vectors(ta, tb)
    if list(ta) != list(base) or any(ta[n].shape != base[n].shape for n in base):
        raise ShapeMismatch("task vectors do not match the base model")
    ta, tb = ties_trim(ta, density), ties_trim(tb, density)
    w = float(weight)
    return _narrow({n: _wide(base, n) + w * _elect_and_merge(ta[n], tb[n]) for n in base}, base)


# --- counter-based RNG for DARE -------------------------------------------

_M64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def name_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int(_splitmix(np.array([(seed ^ int.from_bytes(digest, "little")) & _M64], np.uint64))[0])


def uniform_stream(seed: int, name: str, size: int) -> np.ndarray:
    """Uniforms in [0, 1) that depend only on (seed, name, flat index)."""
    key = np.uint64(name_key(seed, name))
    idx = np.arange(1, size + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _splitmix(key + idx * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


def dare_preprocess(tv: TaskVector, density: float, seed: int) -> TaskVector:
    """Drop each delta with probability ``1 - density`` and rescale survivors by ``1/density``."""
    if not 0.0 < density <= 1.0:
        raise UsageError(f"density must lie in (0, 1], got {density}")
    if density == 1.0:
        return {n: t.copy() for n, t in tv.items()}
    out = {}
    for name, t in tv.items():
        keep = uniform_stream(seed, name, t.size).reshape(t.shape) < density
        out[name] = np.where(keep, t / density, 0.0)
    return out


def merge_dare_linear(
    a: TensorMap, b: TensorMap, base: TensorMap, weight: float, density: float, seed: int
) -> TensorMap:
    require_same_signature(a, b, base)
    ta = dare_preprocess(compute_task_vector(a, base), density, seed ^ 1)
    tb = dare_preprocess(compute_task_vector(b, base), density, seed ^ 2)
    w = float(weight)
    return _narrow({n: _wide(base, n) + w * ta[n] + (1.0 - w) * tb[n] for n in a}, a)


def merge_dare_ties(
    a: TensorMap, b: TensorMap, base: TensorMap, weight: float, density: float, seed: int
) -> TensorMap:
    # DARE already sparsifies, so the TIES trim runs at density 1
    require_same_signature(a, b, base)
    ta = dare_preprocess(compute_task_vector(a, base), density, seed ^ 1)
    tb = dare_preprocess(compute_task_vector(b, base), density, seed ^ 2)
    return ties_merge(ta, tb, base, weight, 1.0)


def merge_block(a: TensorMap, b: TensorMap, base: TensorMap | None, params: MergeParams) -> TensorMap:
    t = params.technique
    if t is Technique.LINEAR:
        return merge_linear(a, b, params.weight)
    if base is None:
        raise MissingBase(f"technique {t.value} needs a base checkpoint")
    if t is Technique.TASK_ARITHMETIC:
        return merge_task_arithmetic(a, b, base, params.weight)
    if t is Technique.TIES:
        return ties_merge(
            compute_task_vector(a, base), compute_task_vector(b, base), base, params.weight, params.density
        )
    if t is Technique.DARE_LINEAR:
        return merge_dare_linear(a, b, base, params.weight, params.density, params.seed)
    return merge_dare_ties(a, b, base, params.weight, params.density, params.seed)
