"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they happen; they are also repeated in the terminal summary.
"""

import json
import math
import struct
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from blockmerge.cli import main as cli_main
from blockmerge.evaluation import Builtin, TaskEvaluator, check_pair, generate_task_pair
from blockmerge.evaluation.metrics import preservation_discrepancy, preservation_rate
from blockmerge.merging import TECHNIQUES, MergeParams, Technique, dare_preprocess, merge_block, ties_merge, ties_trim
from blockmerge.optimizer import SIGMA_FLOOR, ForestConfig, Posterior, forest_fit, forest_predict
from blockmerge.optimizer import log_expected_improvement, sobol_sequence
from blockmerge.search import Budget, MergeProblem, _steps, run_ablation_whole_model, run_grid, run_search
from blockmerge.segment import BlockLabel, ShapeTrace, TraceStep, segment_from_trace
from blockmerge.tensorio import TensorMap, from_bytes, read_checkpoint, to_bytes, write_checkpoint

pytestmark = pytest.mark.acceptance


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def problem_for(pair):
    return MergeProblem(pair.model_a, pair.model_b, pair.base,
                        TaskEvaluator(Builtin(pair.spec), None, pair.data_a),
                        TaskEvaluator(Builtin(pair.spec), None, pair.data_b))


# 1 -------------------------------------------------------------------------

def test_criterion_1_metric_reproduction():
    organism = preservation_rate([38.02, 66.73], [51.48, 78.54])
    inanimate = preservation_rate([32.49, 56.88], [40.86, 66.53])
    pd = preservation_discrepancy(organism, inanimate)
    ok = abs(organism - 0.7941) <= 1e-4 and abs(inanimate - 0.8251) <= 1e-4 and abs(pd - 0.0310) <= 1e-4
    report(1, ok, f"PR organism {organism:.5f}, PR inanimate {inanimate:.5f}, PD {pd:.5f}")


# 2 -------------------------------------------------------------------------

def test_criterion_2_technique_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    cases = 1000
    for i in range(cases):
        # log-uniform sizes up to 4,096 elements, ranks 1 to 3
        size = int(np.exp(rng.uniform(0, np.log(4096))))
        rank = int(rng.integers(1, 4))
        shape = [size] + [1] * (rank - 1)
        rng.shuffle(shape)
        name = f"layer{i}.weight"
        base = rng.normal(size=shape).astype(np.float32)
        a = (base + rng.normal(scale=0.5, size=shape)).astype(np.float32)
        b = (base + rng.normal(scale=0.5, size=shape)).astype(np.float32)
        fa, fb, fbase = oracles.flat(a), oracles.flat(b), oracles.flat(base)
        w, d = float(rng.uniform()), float(rng.uniform(0.05, 1.0))
        seed = int(rng.integers(0, 2**63))
        for tech in TECHNIQUES:
            got = merge_block(TensorMap({name: a}), TensorMap({name: b}), TensorMap({name: base}),
                              MergeParams(tech, w, d, seed))[name]
            want = oracles.narrow(oracles.technique(tech.value, fa, fb, fbase, w, d, seed, name),
                                  np.dtype(np.float32), a.shape)
            mismatches += got.tobytes() != want.tobytes()
    elapsed = time.perf_counter() - t0
    report(2, mismatches == 0 and elapsed < 30,
           f"{cases} tensors x {len(TECHNIQUES)} techniques, {mismatches} bit mismatches, {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------

def test_criterion_3_dare_expectation():
    tau = np.random.default_rng(3).normal(size=100_000)
    t0 = time.perf_counter()
    parts, ok = [], True
    for d in (0.5, 0.65, 0.9):
        mean = np.mean([dare_preprocess({"t": tau}, d, s)["t"] for s in range(200)], axis=0)
        mare = float(np.mean(np.abs(mean - tau) / np.abs(tau)))
        ok &= mare < 0.01
        parts.append(f"d={d} MARE {mare:.4f}")
    elapsed = time.perf_counter() - t0
    report(3, ok and elapsed < 60, ", ".join(parts) + f" (bound 0.01), {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------

def test_criterion_4_ties_invariants():
    rng = np.random.default_rng(4)
    idempotent = 0
    for _ in range(500):
        n = int(rng.integers(1, 2000))
        t = rng.normal(size=n) * (rng.random(n) < 0.8)
        d = float(rng.uniform(0.01, 1.0))
        once = ties_trim({"t": t}, d)["t"]
        idempotent += np.array_equal(ties_trim({"t": once}, d)["t"], once)

    base = TensorMap({"t": rng.normal(size=300).astype(np.float32)})
    tv = rng.normal(size=300)
    conflict = all(ties_merge({"t": tv}, {"t": -tv}, base, w, d) == base
                   for w in (0.0, 0.5, 1.0) for d in (0.2, 0.65, 1.0))

    tv32 = rng.normal(size=300).astype(np.float32).astype(np.float64)
    zero = TensorMap({"t": np.zeros(300, np.float32)})
    same = ties_merge({"t": tv32}, {"t": tv32.copy()}, zero, 1.0, 1.0)
    reproduce = np.array_equal(same["t"].astype(np.float64), tv32)
    report(4, idempotent == 500 and conflict and reproduce,
           f"idempotent {idempotent}/500, total conflict gives base: {conflict}, agreement reproduces tau: {reproduce}")


# 5 -------------------------------------------------------------------------

def test_criterion_5_optimizer_units():
    prefix = sobol_sequence(1, 3).ravel().tolist()
    lei0 = log_expected_improvement(Posterior(0.0, 1.0), 0.0, 0.0)
    means = np.linspace(-3, 3, 1000)
    vals = [log_expected_improvement(Posterior(float(m), 0.5), 0.1) for m in means]
    monotone = all(b >= a for a, b in zip(vals, vals[1:]))
    rng = np.random.default_rng(5)
    forest = forest_fit(rng.random((25, 6)), np.full(25, 0.42), ForestConfig())
    posts = [forest_predict(forest, q) for q in rng.random((20, 6))]
    constant = all(p.mean == pytest.approx(0.42, abs=1e-12) and p.sigma == SIGMA_FLOOR for p in posts)
    ok = prefix == [0.5, 0.75, 0.25] and abs(lei0 - (-0.91894)) <= 1e-4 and monotone and constant
    report(5, ok, f"Sobol prefix {prefix}, LEI {lei0:.5f}, monotone {monotone}, constant forest {constant}")


# 6 -------------------------------------------------------------------------

def test_criterion_6_segmentation():
    pair = generate_task_pair(7)
    p = segment_from_trace(pair.trace, pair.base)
    two = [b.label for b in p.blocks] == [BlockLabel.RANK4_SPATIAL, BlockLabel.RANK2_VECTOR]

    m3 = TensorMap({f"l{i}": np.zeros((3, 3), np.float32) for i in range(5)})
    t3 = ShapeTrace([TraceStep(f"l{i}", [f"l{i}"], [4, 9, 3]) for i in range(5)])
    one = len(segment_from_trace(t3, m3).blocks) == 1

    rng = np.random.default_rng(6)
    complete = 0
    for _ in range(100):
        n = int(rng.integers(0, 15))
        model = TensorMap({f"p{i}": np.zeros((2,) * int(rng.integers(1, 5)), np.float32) for i in range(n)})
        names = [x for x in model if rng.random() < 0.7]
        steps, i = [], 0
        while i < len(names):
            k = int(rng.integers(0, 4))
            steps.append(TraceStep(f"s{len(steps)}", names[i : i + k], [2] * int(rng.integers(1, 6))))
            i += k
        part = segment_from_trace(ShapeTrace(steps), model)
        got = part.all_names
        complete += sorted(got) == sorted(model) and len(got) == len(set(got))
    report(6, two and one and complete == 100,
           f"fixture blocks {[b.label.value for b in p.blocks]}, all-rank-3 single block {one}, complete {complete}/100")


# 7 -------------------------------------------------------------------------

def grid_oracle(problem):
    best = None
    weights = _steps(0.0, 1.0, 0.1)
    densities = _steps(0.1, 1.0, 0.1)
    for tech in TECHNIQUES:
        for rec in run_grid(problem, tech, weights, densities if tech.uses_density else [1.0]):
            if best is None or rec.f > best.f:
                best = rec
    return best


@pytest.mark.slow
def test_criterion_7_search_vs_grid():
    pair = generate_task_pair(7)
    assert check_pair(pair)
    problem = problem_for(pair)
    t0 = time.perf_counter()
    oracle = grid_oracle(problem)
    partition = segment_from_trace(pair.trace, pair.base)
    res = run_search(problem, partition, Budget(init=20, iters=200), seed=7)
    elapsed = time.perf_counter() - t0
    p = oracle.sample.blocks[0]
    report(7, res.best.f >= 0.98 * oracle.f and elapsed < 600,
           f"search best F {res.best.f:.4f} vs grid optimum {oracle.f:.4f} "
           f"({p.technique.value} w={p.weight} d={p.density}), need >= {0.98 * oracle.f:.4f}, {elapsed:.0f}s")


# 8 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_blockwise_vs_whole_model():
    wins, parts = 0, []
    budget = Budget(init=20, iters=200)
    for seed in range(10):
        pair = generate_task_pair(seed)
        partition = segment_from_trace(pair.trace, pair.base)
        block = run_search(problem_for(pair), partition, budget, seed=seed).best.f
        whole = run_ablation_whole_model(problem_for(pair), budget, seed=seed).best.f
        wins += block >= whole - 0.02
        parts.append(f"{seed}:{block:.3f}/{whole:.3f}")
    report(8, wins >= 9, f"block-wise >= whole-model - 0.02 in {wins}/10 seeds (block/whole: {' '.join(parts)})")


# 9 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_reproducibility(tmp_path):
    fx = tmp_path / "fx"
    assert cli_main(["fixture", "--seed", "7", "--out-dir", str(fx)]) == 0
    cfg = json.loads((fx / "search.json").read_text())
    assert cfg["budget"] == {"init": 20, "iters": 200, "pool": 512}
    for run in ("r1", "r2"):
        assert cli_main(["search", "--config", str(fx / "search.json"), "--out-dir", str(tmp_path / run)]) == 0
    same = {f: (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
            for f in ("merged.bt", "history.csv")}
    report(9, all(same.values()), f"byte-identical outputs across two runs: {same}")


# 10 ------------------------------------------------------------------------

def test_criterion_10_format_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    survived = 0
    path = tmp_path / "m.bt"
    for i in range(1000):
        tensors = {}
        for j in range(int(rng.integers(0, 5))):
            shape = tuple(int(x) for x in rng.integers(0, 5, size=int(rng.integers(0, 4))))
            if rng.random() < 0.5:
                bits = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype("<u4")
                arr = bits.view("<f4")
            else:
                arr = rng.integers(0, 2**16, size=shape, dtype=np.uint64).astype("<u2").view("<f2")
            tensors[f"t{j}.{i}"] = arr
        meta = {"step": str(i)} if rng.random() < 0.3 else {}
        m = TensorMap(tensors, meta)
        write_checkpoint(m, path)
        survived += read_checkpoint(path) == m
    head = b'{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}'
    data = struct.pack("<Q", len(head)) + head + struct.pack("<2f", 1.0, 2.0)
    known = from_bytes(data)
    minimal = list(known) == ["a"] and known["a"].tolist() == [1.0, 2.0] and to_bytes(known) == data
    report(10, survived == 1000 and minimal, f"round-trip {survived}/1000, hand-written file parsed: {minimal}")
