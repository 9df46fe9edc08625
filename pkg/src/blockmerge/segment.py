"""Split a model into heterogeneous blocks from activation shape transitions.

A shape trace records, for each executed module, the parameters it owns and
the shape of its output. Output rank decides the regime (4: spatial maps,
3: token sequences, 2: flat vectors) and every change of regime opens a new
block.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

from .errors import DataError, SignatureMismatch, UnknownParameter
from .tensorio import TensorMap, signature


class BlockLabel(str, enum.Enum):
    RANK4_SPATIAL = "Rank4Spatial"
    RANK3_SEQUENCE = "Rank3Sequence"
    RANK2_VECTOR = "Rank2Vector"
    OTHER = "Other"


_RANK_LABELS = {4: BlockLabel.RANK4_SPATIAL, 3: BlockLabel.RANK3_SEQUENCE, 2: BlockLabel.RANK2_VECTOR}


@dataclass
class TraceStep:
    module_id: str
    param_names: list[str]
    output_shape: list[int]


@dataclass
class ShapeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for step in self.steps:
            if not step.output_shape:
                raise DataError(f"trace step {step.module_id!r} has an empty output shape")
            for name in step.param_names:
                if name in seen:
                    raise DataError(f"parameter {name!r} appears in more than one trace step")
                seen.add(name)

    def to_json(self) -> dict:
        return {
            "steps": [
                {"module_id": s.module_id, "param_names": list(s.param_names), "output_shape": list(s.output_shape)}
                for s in self.steps
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> ShapeTrace:
        try:
            steps = [
                TraceStep(str(s["module_id"]), [str(p) for p in s["param_names"]], [int(d) for d in s["output_shape"]])
                for s in obj["steps"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed shape trace: {e}") from e
        return cls(steps)


def load_trace(path: str | os.PathLike) -> ShapeTrace:
    with open(path) as fh:
        try:
            return ShapeTrace.from_json(json.load(fh))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from e


@dataclass
class Block:
    label: BlockLabel
    param_names: list[str]


@dataclass
class BlockPartition:
    """Ordered blocks covering every parameter.

    Parameters never seen in the trace are listed in ``residual`` and also
    form the trailing ``Other`` block, so the blocks alone cover the model.
    """

    blocks: list[Block]
    residual: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def all_names(self) -> list[str]:
        return [n for b in self.blocks for n in b.param_names]

    def to_json(self) -> dict:
        return {
            "blocks": [{"label": b.label.value, "param_names": list(b.param_names)} for b in self.blocks],
            "residual": list(self.residual),
        }

    @classmethod
    def from_json(cls, obj: dict) -> BlockPartition:
        blocks = [Block(BlockLabel(b["label"]), list(b["param_names"])) for b in obj["blocks"]]
        return cls(blocks, list(obj.get("residual", [])))

    @classmethod
    def single(cls, model: TensorMap) -> BlockPartition:
        return cls([Block(BlockLabel.OTHER, list(model))])


def _label_for_rank(rank: int) -> BlockLabel:
    return _RANK_LABELS.get(rank, BlockLabel.OTHER)


def segment_from_trace(trace: ShapeTrace, model: TensorMap) -> BlockPartition:
    for step in trace.steps:
        for name in step.param_names:
            if name not in model:
                raise UnknownParameter(f"trace step {step.module_id!r} names unknown parameter {name!r}")

    # rank classification on the full output shape; batch is the leading extent
    runs: list[Block] = []
    prev = None
    for step in trace.steps:
        label = _label_for_rank(len(step.output_shape))
        if label != prev:
            runs.append(Block(label, []))
            prev = label
        runs[-1].param_names.extend(step.param_names)
    blocks = [b for b in runs if b.param_names]

    traced = {n for b in blocks for n in b.param_names}
    residual = [n for n in model if n not in traced]
    if residual or not blocks:
        blocks.append(Block(BlockLabel.OTHER, list(residual)))
    return BlockPartition(blocks, residual)


def heuristic_segment(model: TensorMap) -> BlockPartition:
    """Fallback without a trace: group consecutive parameters by their own rank."""
    blocks: list[Block] = []
    for name, arr in model.items():
        label = BlockLabel.RANK4_SPATIAL if arr.ndim == 4 else BlockLabel.RANK2_VECTOR
        if not blocks or blocks[-1].label != label:
            blocks.append(Block(label, []))
        blocks[-1].param_names.append(name)
    if not blocks:
        blocks.append(Block(BlockLabel.OTHER, []))
    return BlockPartition(blocks)


def align_blocks(partition: BlockPartition, model_a: TensorMap, model_b: TensorMap):
    """Slice both models by the shared partition into aligned (block, a, b) triples."""
    if signature(model_a) != signature(model_b):
        raise SignatureMismatch("source models do not share an architecture")
    return [(blk, model_a.subset(blk.param_names), model_b.subset(blk.param_names)) for blk in partition.blocks]
