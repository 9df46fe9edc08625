"""Block-wise search space and its real-vector encoding.

Each block contributes ``T + 2`` coordinates: a one-hot over the registered
techniques, then weight, then density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .merging import TECHNIQUES, MergeParams, Technique
from .errors import UsageError
from .segment import BlockPartition

MIN_UNIT_DENSITY = 0.05


@dataclass(frozen=True)
class MergeConfigSample:
    blocks: tuple[MergeParams, ...]
    seed: int = 0

    def block_params(self, k: int) -> MergeParams:
        """Per-block params with a DARE seed derived from the sample seed and block index."""
        p = self.blocks[k]
        return MergeParams(p.technique, p.weight, p.density, derive_seed(self.seed, k))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "blocks": [{"technique": p.technique.value, "weight": p.weight, "density": p.density} for p in self.blocks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> MergeConfigSample:
        blocks = tuple(
            MergeParams(Technique.parse(b["technique"]), float(b["weight"]), float(b["density"]))
            for b in obj["blocks"]
        )
        return cls(blocks, int(obj.get("seed", 0)))


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), index]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SearchSpace:
    num_blocks: int
    techniques: tuple[Technique, ...] = TECHNIQUES

    def __post_init__(self):
        if self.num_blocks < 1:
            raise UsageError("search space needs at least one block")
        if not self.techniques:
            raise UsageError("search space needs at least one technique")
        object.__setattr__(self, "techniques", tuple(Technique(t) for t in self.techniques))

    @classmethod
    def for_partition(cls, partition: BlockPartition, techniques=TECHNIQUES) -> SearchSpace:
        return cls(len(partition.blocks), tuple(techniques))

    @property
    def block_width(self) -> int:
        return len(self.techniques) + 2

    @property
    def dim(self) -> int:
        return self.num_blocks * self.block_width

    def encode(self, sample: MergeConfigSample) -> np.ndarray:
        x = np.zeros(self.dim)
        for k, p in enumerate(sample.blocks):
            off = k * self.block_width
            x[off + self.techniques.index(p.technique)] = 1.0
            x[off + len(self.techniques)] = p.weight
            x[off + len(self.techniques) + 1] = p.density
        return x

    def decode(self, x, seed: int = 0) -> MergeConfigSample:
        """Inverse of :meth:`encode`; the technique is the argmax of the indicator slots."""
        x = np.asarray(x, dtype=np.float64)
        t = len(self.techniques)
        blocks = []
        for k in range(self.num_blocks):
            chunk = x[k * self.block_width : (k + 1) * self.block_width]
            blocks.append(
                MergeParams(
                    self.techniques[int(np.argmax(chunk[:t]))],
                    float(np.clip(chunk[t], 0.0, 1.0)),
                    float(np.clip(chunk[t + 1], np.nextafter(0.0, 1.0), 1.0)),
                )
            )
        return MergeConfigSample(tuple(blocks), seed)

    def from_unit(self, u, seed: int = 0) -> MergeConfigSample:
        """Map a point of the unit cube (e.g. a Sobol point) into the space."""
        u = np.asarray(u, dtype=np.float64).copy()
        t = len(self.techniques)
        for k in range(self.num_blocks):
            off = k * self.block_width
            u[off + t + 1] = MIN_UNIT_DENSITY + (1.0 - MIN_UNIT_DENSITY) * u[off + t + 1]
        return self.decode(u, seed)

    def random_sample(self, rng: np.random.Generator) -> MergeConfigSample:
        blocks = []
        for _ in range(self.num_blocks):
            tech = self.techniques[int(rng.integers(len(self.techniques)))]
            weight = float(rng.random())
            density = 1.0 - float(rng.random())
            blocks.append(MergeParams(tech, weight, density))
        return MergeConfigSample(tuple(blocks), int(rng.integers(0, 2**63)))

    def uniform_sample(self, params: MergeParams, seed: int = 0) -> MergeConfigSample:
        """The same params on every block; whole-model configurations embed this way."""
        return MergeConfigSample(tuple(MergeParams(params.technique, params.weight, params.density)
                                       for _ in range(self.num_blocks)), seed)
