import csv
import io
import json

import numpy as np
import pytest

from blockmerge.errors import EvaluatorFailure, UsageError
from blockmerge.evaluation import Builtin, External, FixtureKnobs, TaskEvaluator, generate_task_pair
from blockmerge.evaluation.metrics import objective_f
from blockmerge.merging import TECHNIQUES, MergeParams, Technique, merge_block, merge_linear
from blockmerge.search import (
    Budget,
    MergeProblem,
    apply_config,
    default_grid,
    grid_csv,
    history_csv,
    model_digest,
    run_ablation_whole_model,
    run_fixed,
    run_grid,
    run_search,
    write_search_outputs,
)
from blockmerge.segment import BlockPartition, heuristic_segment, segment_from_trace
from blockmerge.space import MergeConfigSample, SearchSpace
from blockmerge.tensorio import TensorMap, read_checkpoint

SMALL = FixtureKnobs(samples=64)


def problem_for(pair, base=True):
    ev_a = TaskEvaluator(Builtin(pair.spec), None, pair.data_a)
    ev_b = TaskEvaluator(Builtin(pair.spec), None, pair.data_b)
    return MergeProblem(pair.model_a, pair.model_b, pair.base if base else None, ev_a, ev_b)


@pytest.fixture(scope="module")
def pair():
    return generate_task_pair(7, knobs=SMALL)


@pytest.fixture(scope="module")
def partition(pair):
    return segment_from_trace(pair.trace, pair.base)


# --- apply_config ----------------------------------------------------------

def test_single_block_linear_matches_whole_model(pair):
    p = BlockPartition.single(pair.base)
    s = MergeConfigSample((MergeParams(Technique.LINEAR, 0.5),), 3)
    assert apply_config(s, pair.model_a, pair.model_b, pair.base, p) == merge_linear(pair.model_a, pair.model_b, 0.5)


def test_weight_one_everywhere_is_a(pair, partition):
    s = SearchSpace(len(partition.blocks)).uniform_sample(MergeParams(Technique.LINEAR, 1.0))
    assert apply_config(s, pair.model_a, pair.model_b, pair.base, partition) == pair.model_a


def test_block_decomposition_oracle(pair):
    # split the fixture into three blocks and merge each on its own
    names = list(pair.base)
    p = BlockPartition.from_json({"blocks": [
        {"label": "Rank4Spatial", "param_names": names[:3]},
        {"label": "Rank2Vector", "param_names": names[3:6]},
        {"label": "Other", "param_names": names[6:]},
    ]})
    s = MergeConfigSample((MergeParams(Technique.TIES, 0.3, 0.4), MergeParams(Technique.DARE_LINEAR, 0.8, 0.6),
                           MergeParams(Technique.DARE_TIES, 0.5, 0.3)), 42)
    got = apply_config(s, pair.model_a, pair.model_b, pair.base, p)
    expect = {}
    for k, blk in enumerate(p.blocks):
        sub = [m.subset(blk.param_names) for m in (pair.model_a, pair.model_b, pair.base)]
        expect.update(merge_block(*sub, s.block_params(k)).tensors)
    assert got == TensorMap({n: expect[n] for n in names})
    assert list(got) == names


def test_apply_config_block_count_mismatch(pair, partition):
    with pytest.raises(UsageError):
        apply_config(MergeConfigSample((MergeParams(Technique.LINEAR),)), pair.model_a, pair.model_b,
                     pair.base, partition)


def test_dare_blocks_use_distinct_seeds(pair, partition):
    s = SearchSpace(2).uniform_sample(MergeParams(Technique.DARE_LINEAR, 0.5, 0.5), seed=1)
    assert s.block_params(0).seed != s.block_params(1).seed


# --- problem ---------------------------------------------------------------

def test_cache_reuses_ignored_density(pair):
    prob = problem_for(pair)
    p = BlockPartition.single(pair.base)
    for d in (0.2, 0.9):
        prob.evaluate(MergeConfigSample((MergeParams(Technique.LINEAR, 0.4, d),)), p)
    assert prob.evaluations == 1


def test_source_scores_are_one(pair):
    prob = problem_for(pair)
    ev = prob.score(pair.model_a)
    assert ev.ap_a == 1.0
    assert ev.f == objective_f(ev.ap_a, ev.ap_b)


def test_no_base_restricts_to_linear(pair):
    assert problem_for(pair, base=False).techniques == (Technique.LINEAR,)
    assert problem_for(pair).techniques == TECHNIQUES


def test_model_digest_sensitivity(pair):
    assert model_digest(pair.model_a) == model_digest(pair.model_a.subset(list(pair.model_a)))
    assert model_digest(pair.model_a) != model_digest(pair.model_b)


# --- search loop -----------------------------------------------------------

def test_iters_zero_is_best_of_init(pair, partition):
    res = run_search(problem_for(pair), partition, Budget(init=8, iters=0), seed=1)
    assert len(res.history) == 8
    assert all(r.iteration == 0 for r in res.history)
    assert res.best.f == max(r.f for r in res.history)


def test_loop_counts_and_invariants(pair, partition):
    res = run_search(problem_for(pair), partition, Budget(init=6, iters=5, pool=32), seed=2)
    # the last initial sample doubles as the first loop sample
    assert len(res.history) == 6 + 4
    assert [r.iteration for r in res.history] == [0] * 6 + [2, 3, 4, 5]
    assert res.history[5].pred_mean is not None
    for r in res.history:
        assert r.f == objective_f(r.ap_a, r.ap_b)
    curve = res.best_so_far()
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    prob = problem_for(pair)
    assert prob.score(res.merged).f == res.best.f


def test_init_split_all(pair, partition):
    res = run_search(problem_for(pair), partition, Budget(init=6, iters=3, pool=32), seed=2, init_split="all")
    assert len(res.history) == 9
    assert [r.iteration for r in res.history[6:]] == [1, 2, 3]


def test_search_reproducible(pair, partition):
    runs = [run_search(problem_for(pair), partition, Budget(init=5, iters=4, pool=16), seed=9) for _ in range(2)]
    assert history_csv(runs[0].history) == history_csv(runs[1].history)
    assert runs[0].merged == runs[1].merged


def test_seed_changes_search(pair, partition):
    a = run_search(problem_for(pair), partition, Budget(init=5, iters=2, pool=16), seed=1)
    b = run_search(problem_for(pair), partition, Budget(init=5, iters=2, pool=16), seed=2)
    assert history_csv(a.history) != history_csv(b.history)


def test_zero_delta_fixture_is_flat():
    flat = generate_task_pair(3, knobs=FixtureKnobs(delta_scale=0.0, samples=32))
    part = segment_from_trace(flat.trace, flat.base)
    res = run_search(problem_for(flat), part, Budget(init=4, iters=3, pool=8), seed=0)
    assert all(r.ap_a == 1.0 and r.ap_b == 1.0 and r.f == 1.0 for r in res.history)
    assert res.best.f == 1.0


def test_whole_model_ablation_uses_one_block(pair):
    res = run_ablation_whole_model(problem_for(pair), Budget(init=4, iters=2, pool=8), seed=0)
    assert len(res.partition.blocks) == 1
    assert all(len(r.sample.blocks) == 1 for r in res.history)


def test_budget_validation(pair, partition):
    with pytest.raises(UsageError):
        run_search(problem_for(pair), partition, Budget(init=1, iters=0))
    with pytest.raises(UsageError):
        run_search(problem_for(pair), partition, Budget(init=4, iters=0), init_split="half")


def test_evaluator_failure_keeps_history(pair, partition, tmp_path):
    script = tmp_path / "flaky.py"
    counter = tmp_path / "n"
    counter.write_text("0")
    script.write_text(
        "import json, pathlib\n"
        f"p = pathlib.Path({str(counter)!r}); n = int(p.read_text()) + 1; p.write_text(str(n))\n"
        "print(json.dumps({'loss': 1.0 if n < 6 else float('inf')}))\n"
    )
    import sys

    ev = TaskEvaluator(External(f"{sys.executable} {script}"), tmp_path / "unused.bt")
    prob = MergeProblem(pair.model_a, pair.model_b, pair.base, ev, ev)
    with pytest.raises(EvaluatorFailure) as info:
        run_search(prob, partition, Budget(init=5, iters=2, pool=4), seed=0)
    assert len(info.value.history) >= 1


# --- fixed and grid --------------------------------------------------------

def test_run_fixed_report(pair):
    merged, report = run_fixed(problem_for(pair), MergeParams(Technique.DARE_TIES, 0.5, 0.65, 3))
    assert report["technique"] == "dare-ties"
    assert report["f"] == objective_f(report["ap_a"], report["ap_b"])
    assert report["pd"] == abs(report["ap_a"] - report["ap_b"])
    assert merged == merge_block(pair.model_a, pair.model_b, pair.base, MergeParams(Technique.DARE_TIES, 0.5, 0.65, 3))


def test_grid_sizes(pair):
    prob = problem_for(pair)
    assert len(run_grid(prob, Technique.LINEAR)) == 11
    assert len(run_grid(prob, Technique.TASK_ARITHMETIC)) == 11
    assert len(run_grid(prob, Technique.TIES)) == 36
    w, d = default_grid(Technique.DARE_TIES)
    assert w == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert d == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]


def test_grid_dominates_fixed_default(pair):
    prob = problem_for(pair)
    for tech in (Technique.LINEAR, Technique.TIES):
        grid_best = max(r.f for r in run_grid(prob, tech, densities=[0.65, 1.0]))
        _, fixed = run_fixed(prob, MergeParams(tech, 0.5, 0.65 if tech.uses_density else 1.0))
        assert grid_best >= fixed["f"]


def test_grid_csv_columns(pair):
    text = grid_csv(run_grid(problem_for(pair), Technique.LINEAR))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 11
    assert {"weight", "density", "ap_a", "ap_b", "f"} <= set(rows[0])


# --- persistence -----------------------------------------------------------

def test_write_outputs(pair, partition, tmp_path):
    res = run_search(problem_for(pair), partition, Budget(init=4, iters=2, pool=8), seed=0)
    write_search_outputs(res, tmp_path, {"seed": 0})
    assert read_checkpoint(tmp_path / "merged.bt") == res.merged
    recipe = json.loads((tmp_path / "recipe.json").read_text())
    again = apply_config(MergeConfigSample.from_json(recipe["sample"]), pair.model_a, pair.model_b, pair.base,
                         BlockPartition.from_json(recipe["partition"]))
    assert again == res.merged
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["history"]) == len(res.history)
    assert "wall_time_s" in report["history"][0]
    rows = list(csv.DictReader(open(tmp_path / "history.csv")))
    assert [float(r["f"]) for r in rows] == [r.f for r in res.history]


def test_heuristic_partition_search(pair):
    part = heuristic_segment(pair.base)
    res = run_search(problem_for(pair), part, Budget(init=3, iters=1, pool=4), seed=0)
    assert len(res.best.sample.blocks) == len(part.blocks)
