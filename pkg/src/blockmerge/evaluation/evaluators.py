"""Loss evaluators: the built-in toy runtime or an external command.

External protocol: ``<command> <model_path> <dataset_path>`` must exit 0 and
print one JSON object ``{"loss": <finite number>}`` on stdout.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

from ..errors import EvaluatorFailure, NonFiniteLoss
from ..tensorio import TensorMap, read_checkpoint, write_checkpoint
from .toymodel import Dataset, ToyModelSpec, forward_loss, load_dataset, load_spec


@dataclass
class Builtin:
    spec: ToyModelSpec


@dataclass
class External:
    command: str
    timeout: float | None = None


Evaluator = Builtin | External


def _checked(loss) -> float:
    if isinstance(loss, bool) or not isinstance(loss, (int, float)):
        raise EvaluatorFailure(f"loss must be a number, got {loss!r}")
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"evaluator returned non-finite loss {loss!r}")
    return float(loss)


def run_external(command: str, model_path, dataset_path, timeout: float | None = None) -> float:
    argv = shlex.split(command) + [os.fspath(model_path), os.fspath(dataset_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as e:
        raise EvaluatorFailure(f"cannot run evaluator {command!r}: {e}") from e
    if proc.returncode != 0:
        raise EvaluatorFailure(
            f"evaluator exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
        )
    lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise EvaluatorFailure(f"evaluator must print exactly one JSON line, got {len(lines)}")
    try:
        obj = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise EvaluatorFailure(f"evaluator output is not JSON: {lines[0][:200]!r}") from e
    if not isinstance(obj, dict) or "loss" not in obj:
        raise EvaluatorFailure("evaluator output lacks a 'loss' field")
    return _checked(obj["loss"])


def evaluate_loss(e: Evaluator, model_path, dataset_path) -> float:
    if isinstance(e, Builtin):
        return _checked(forward_loss(e.spec, read_checkpoint(model_path), load_dataset(dataset_path)))
    return run_external(e.command, model_path, dataset_path, e.timeout)


class TaskEvaluator:
    """Loss of in-memory models on one task's validation set.

    The built-in path stays in memory; the external path writes the model
    to a temporary file per call.
    """

    def __init__(self, evaluator: Evaluator, dataset_path, dataset: Dataset | None = None):
        self.evaluator = evaluator
        self.dataset_path = os.fspath(dataset_path) if dataset_path is not None else None
        if isinstance(evaluator, Builtin) and dataset is None:
            dataset = load_dataset(self.dataset_path)
        self.dataset = dataset

    @classmethod
    def from_config(cls, cfg: dict, base_dir: str = ".") -> TaskEvaluator:
        def resolve(p):
            return os.path.join(base_dir, p)

        kind = cfg.get("kind", "builtin")
        if kind == "builtin":
            return cls(Builtin(load_spec(resolve(cfg["spec"]))), resolve(cfg["data"]))
        if kind == "external":
            return cls(External(cfg["command"], cfg.get("timeout")), resolve(cfg["data"]))
        raise EvaluatorFailure(f"unknown evaluator kind {kind!r}")

    def loss(self, model: TensorMap) -> float:
        if isinstance(self.evaluator, Builtin):
            return _checked(forward_loss(self.evaluator.spec, model, self.dataset))
        with tempfile.TemporaryDirectory(prefix="blockmerge-") as tmp:
            path = os.path.join(tmp, "model.bt")
            write_checkpoint(model, path)
            return run_external(self.evaluator.command, path, self.dataset_path, self.evaluator.timeout)
