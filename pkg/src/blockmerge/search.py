"""Block-wise merge search, fixed-configuration merges and grid sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EvaluatorFailure, UsageError
from .evaluation.evaluators import TaskEvaluator
from .evaluation.metrics import approximated_preservation, objective_f, preservation_discrepancy
from .merging import TECHNIQUES, MergeParams, Technique, merge_block
from .optimizer import DEFAULT_POOL, ForestConfig, forest_fit, forest_predict, select_next, sobol_sequence
from .segment import BlockPartition, align_blocks
from .space import MergeConfigSample, SearchSpace, derive_seed
from .tensorio import TensorMap, require_same_signature, write_checkpoint

log = logging.getLogger(__name__)


def apply_config(sample: MergeConfigSample, a: TensorMap, b: TensorMap, base: TensorMap | None,
                 partition: BlockPartition) -> TensorMap:
    """Merge every block with its own params and reassemble in source order."""
    if len(sample.blocks) != len(partition.blocks):
        raise UsageError(f"sample has {len(sample.blocks)} blocks, partition has {len(partition.blocks)}")
    merged: dict[str, np.ndarray] = {}
    for k, (blk, block_a, block_b) in enumerate(align_blocks(partition, a, b)):
        block_base = base.subset(blk.param_names) if base is not None else None
        merged.update(merge_block(block_a, block_b, block_base, sample.block_params(k)).tensors)
    return TensorMap({n: merged[n] for n in a})


def model_digest(m: TensorMap) -> str:
    h = hashlib.sha256()
    for name, arr in m.items():
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Evaluation:
    loss_a: float
    loss_b: float
    ap_a: float
    ap_b: float
    f: float


class MergeProblem:
    """Two source models, an optional base and the two task evaluators.

    Losses are cached by a content hash of the merged model, so samples that
    differ only in ignored settings (e.g. density under Linear) reuse results.
    """

    def __init__(self, a: TensorMap, b: TensorMap, base: TensorMap | None,
                 eval_a: TaskEvaluator, eval_b: TaskEvaluator):
        require_same_signature(*(m for m in (a, b, base) if m is not None))
        self.a, self.b, self.base = a, b, base
        self.eval_a, self.eval_b = eval_a, eval_b
        self.source_loss_a = eval_a.loss(a)
        self.source_loss_b = eval_b.loss(b)
        self._cache: dict[str, tuple[float, float]] = {}
        self.evaluations = 0

    @property
    def techniques(self) -> tuple[Technique, ...]:
        return TECHNIQUES if self.base is not None else (Technique.LINEAR,)

    def losses(self, merged: TensorMap) -> tuple[float, float]:
        key = model_digest(merged)
        if key not in self._cache:
            self._cache[key] = (self.eval_a.loss(merged), self.eval_b.loss(merged))
            self.evaluations += 1
        return self._cache[key]

    def score(self, merged: TensorMap) -> Evaluation:
        la, lb = self.losses(merged)
        ap_a = approximated_preservation(self.source_loss_a, la)
        ap_b = approximated_preservation(self.source_loss_b, lb)
        return Evaluation(la, lb, ap_a, ap_b, objective_f(ap_a, ap_b))

    def evaluate(self, sample: MergeConfigSample, partition: BlockPartition) -> tuple[Evaluation, TensorMap]:
        merged = apply_config(sample, self.a, self.b, self.base, partition)
        return self.score(merged), merged


@dataclass
class TrialRecord:
    sample: MergeConfigSample
    ap_a: float
    ap_b: float
    f: float
    iteration: int
    wall_time_s: float = 0.0
    loss_a: float = float("nan")
    loss_b: float = float("nan")
    pred_mean: float | None = None
    pred_sigma: float | None = None

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "sample": self.sample.to_json(),
            "ap_a": self.ap_a,
            "ap_b": self.ap_b,
            "f": self.f,
            "loss_a": self.loss_a,
            "loss_b": self.loss_b,
            "pred_mean": self.pred_mean,
            "pred_sigma": self.pred_sigma,
            "wall_time_s": self.wall_time_s,
        }


@dataclass(frozen=True)
class Budget:
    init: int = 20
    iters: int = 200
    pool: int = DEFAULT_POOL


@dataclass
class SearchResult:
    best: TrialRecord
    history: list[TrialRecord]
    merged: TensorMap
    partition: BlockPartition
    source_loss_a: float
    source_loss_b: float
    merged_model_path: str | None = None

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate([r.f for r in self.history]))


def _best(history: list[TrialRecord]) -> TrialRecord:
    # first maximum wins, so results do not depend on later duplicates
    return max(history, key=lambda r: r.f) if history else None


def run_search(problem: MergeProblem, partition: BlockPartition, budget: Budget = Budget(), seed: int = 0,
               init_split: str = "19/1", forest: ForestConfig = ForestConfig(),
               techniques=None, on_trial: Callable[[TrialRecord], None] | None = None) -> SearchResult:
    """Sobol initialization, then surrogate-guided selection for ``budget.iters`` iterations.

    With ``init_split="19/1"`` the surrogate is first fit on all but the last
    initial sample, and the last one is the loop's starting sample. With
    ``"all"`` the fit uses every initial sample and the loop starts from the
    acquisition maximizer.
    """
    if budget.init < 2:
        raise UsageError("budget.init must be at least 2")
    if init_split not in ("19/1", "all"):
        raise UsageError(f"init_split must be '19/1' or 'all', got {init_split!r}")
    space = SearchSpace(len(partition.blocks), tuple(techniques or problem.techniques))
    history: list[TrialRecord] = []
    best_model: dict = {}

    def record(sample, iteration, pred=None):
        t0 = time.perf_counter()
        ev, merged = problem.evaluate(sample, partition)
        rec = TrialRecord(sample, ev.ap_a, ev.ap_b, ev.f, iteration, time.perf_counter() - t0, ev.loss_a, ev.loss_b,
                          pred.mean if pred else None, pred.sigma if pred else None)
        if not history or rec.f > _best(history).f:
            best_model["m"] = merged
        history.append(rec)
        if on_trial:
            on_trial(rec)
        return rec

    try:
        points = sobol_sequence(space.dim, budget.init)
        init = [space.from_unit(u, derive_seed(seed, i)) for i, u in enumerate(points)]
        for s in init:
            record(s, 0)

        def fit(records, t):
            x = np.stack([space.encode(r.sample) for r in records])
            y = np.array([r.f for r in records])
            cfg = ForestConfig(forest.trees, forest.min_leaf, forest.feature_frac,
                               derive_seed(seed, 20_000 + t), forest.threads)
            return forest_fit(x, y, cfg)

        def f_best():
            return _best(history).f

        if init_split == "19/1":
            train = list(history[:-1])
            surrogate = fit(train, 0)
            pending = history[-1]
            post = forest_predict(surrogate, space.encode(pending.sample))
            pending.pred_mean, pending.pred_sigma = post.mean, post.sigma
        else:
            train = list(history)
            surrogate = fit(train, 0)
            pending = None

        for t in range(1, budget.iters + 1):
            if pending is None:
                nxt = select_next(surrogate, space, f_best(), budget.pool, derive_seed(seed, 10_000 + t))
                pending = record(nxt, t, forest_predict(surrogate, space.encode(nxt)))
            train.append(pending)
            pending = None
            surrogate = fit(train, t)
            log.debug("iteration %d best F %.6f", t, f_best())
    except EvaluatorFailure as e:
        e.history = history
        raise

    best = _best(history)
    return SearchResult(best, history, best_model["m"], partition, problem.source_loss_a, problem.source_loss_b)


def run_ablation_whole_model(problem: MergeProblem, budget: Budget = Budget(), seed: int = 0, **kw) -> SearchResult:
    """The same search over a single block spanning the whole model."""
    return run_search(problem, BlockPartition.single(problem.a), budget, seed, **kw)


def run_fixed(problem: MergeProblem, params: MergeParams) -> tuple[TensorMap, dict]:
    """One whole-model merge with fixed hyperparameters and its preservation report."""
    merged = merge_block(problem.a, problem.b, problem.base, params)
    ev = problem.score(merged)
    report = {
        "technique": params.technique.value,
        "weight": params.weight,
        "density": params.density if params.technique.uses_density else None,
        "seed": params.seed,
        "source_loss_a": problem.source_loss_a,
        "source_loss_b": problem.source_loss_b,
        "loss_a": ev.loss_a,
        "loss_b": ev.loss_b,
        "ap_a": ev.ap_a,
        "ap_b": ev.ap_b,
        "f": ev.f,
        "pd": preservation_discrepancy(ev.ap_a, ev.ap_b),
    }
    return merged, report


def _steps(start: float, stop: float, step: float) -> list[float]:
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def default_grid(technique: Technique) -> tuple[list[float], list[float]]:
    """Weight 0..1 by 0.1 for Linear/TA; weight 0..1 by 0.2 x density 0.5..1 by 0.1 otherwise."""
    if not technique.uses_density:
        return _steps(0.0, 1.0, 0.1), [1.0]
    return _steps(0.0, 1.0, 0.2), _steps(0.5, 1.0, 0.1)


def run_grid(problem: MergeProblem, technique: Technique, weights=None, densities=None,
             seed: int = 0) -> list[TrialRecord]:
    """Exhaustive whole-model sweep over weight x density."""
    technique = Technique(technique)
    dw, dd = default_grid(technique)
    weights = dw if weights is None else list(weights)
    densities = dd if densities is None else list(densities)
    if not technique.uses_density:
        densities = [1.0]
    records = []
    for d in densities:
        for w in weights:
            t0 = time.perf_counter()
            params = MergeParams(technique, w, d, seed)
            ev = problem.score(merge_block(problem.a, problem.b, problem.base, params))
            sample = MergeConfigSample((MergeParams(technique, w, d),), seed)
            records.append(TrialRecord(sample, ev.ap_a, ev.ap_b, ev.f, len(records),
                                       time.perf_counter() - t0, ev.loss_a, ev.loss_b))
    return records


# --- persistence -----------------------------------------------------------

def history_csv(history: list[TrialRecord]) -> str:
    """Deterministic CSV of a search history (no timings)."""
    k = max((len(r.sample.blocks) for r in history), default=0)
    cols = ["trial", "iteration", "f", "ap_a", "ap_b", "loss_a", "loss_b", "best_f", "seed"]
    for i in range(k):
        cols += [f"b{i}_technique", f"b{i}_weight", f"b{i}_density"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    best = -np.inf
    for n, r in enumerate(history):
        best = max(best, r.f)
        row = [n, r.iteration, repr(r.f), repr(r.ap_a), repr(r.ap_b), repr(r.loss_a), repr(r.loss_b),
               repr(float(best)), r.sample.seed]
        for p in r.sample.blocks:
            row += [p.technique.value, repr(p.weight), repr(p.density)]
        w.writerow(row)
    return buf.getvalue()


def grid_csv(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["technique", "weight", "density", "ap_a", "ap_b", "f", "loss_a", "loss_b"])
    for r in records:
        p = r.sample.blocks[0]
        w.writerow([p.technique.value, repr(p.weight), repr(p.density), repr(r.ap_a), repr(r.ap_b), repr(r.f),
                    repr(r.loss_a), repr(r.loss_b)])
    return buf.getvalue()


def write_search_outputs(result: SearchResult, out_dir: str, config: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    merged_path = os.path.join(out_dir, "merged.bt")
    write_checkpoint(result.merged, merged_path)
    result.merged_model_path = merged_path
    with open(os.path.join(out_dir, "history.csv"), "w", newline="") as fh:
        fh.write(history_csv(result.history))
    recipe = {"partition": result.partition.to_json(), "sample": result.best.sample.to_json()}
    with open(os.path.join(out_dir, "recipe.json"), "w") as fh:
        json.dump(recipe, fh, indent=2)
    report = {
        "config": config,
        "source_loss_a": result.source_loss_a,
        "source_loss_b": result.source_loss_b,
        "best": result.best.to_json(),
        "best_pd": preservation_discrepancy(result.best.ap_a, result.best.ap_b),
        "num_blocks": len(result.partition.blocks),
        "history": [r.to_json() for r in result.history],
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
