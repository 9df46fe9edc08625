"""Losses, preservation metrics, evaluators and synthetic fixtures."""

from .evaluators import Builtin, External, TaskEvaluator, evaluate_loss, run_external
from .fixtures import FixtureKnobs, TaskPair, check_pair, default_template, generate_task_pair
from .metrics import (
    AP_CAP,
    LOSS_EPS,
    approximated_preservation,
    objective_f,
    preservation_discrepancy,
    preservation_rate,
)
from .toymodel import Dataset, Layer, LayerKind, LossKind, ToyModelSpec, forward, forward_loss, load_dataset, load_spec, shape_trace

__all__ = [
    "AP_CAP", "LOSS_EPS", "Builtin", "Dataset", "External", "FixtureKnobs", "Layer", "LayerKind", "LossKind",
    "TaskEvaluator", "TaskPair", "ToyModelSpec", "approximated_preservation", "check_pair", "default_template",
    "evaluate_loss", "forward", "forward_loss", "generate_task_pair", "load_dataset", "load_spec",
    "objective_f", "preservation_discrepancy", "preservation_rate", "run_external", "shape_trace",
]
