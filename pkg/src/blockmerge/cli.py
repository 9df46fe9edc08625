"""``blockmerge`` command line.

Machine-readable output (JSON lines, CSV) goes to stdout, diagnostics to
stderr. Exit codes: 0 ok, 1 usage, 2 data, 3 evaluator.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import __version__
from .errors import BlockmergeError, DataError, MissingBase, UsageError
from .evaluation.evaluators import Builtin, TaskEvaluator, evaluate_loss
from .evaluation.fixtures import FixtureKnobs, generate_task_pair
from .evaluation.metrics import preservation_discrepancy
from .evaluation.toymodel import load_spec
from .merging import MergeParams, Technique, merge_block
from .optimizer import ForestConfig
from .search import (
    Budget,
    MergeProblem,
    apply_config,
    grid_csv,
    history_csv,
    run_grid,
    run_search,
    write_search_outputs,
    _steps,
)
from .segment import BlockPartition, heuristic_segment, load_trace, segment_from_trace
from .space import MergeConfigSample
from .tensorio import read_checkpoint, write_checkpoint

log = logging.getLogger("blockmerge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=False), flush=True)


def _threads() -> int:
    raw = os.environ.get("BLOCKMERGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"BLOCKMERGE_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def _technique(name: str) -> Technique:
    return Technique.parse(name)


# --- config handling ---------------------------------------------------------

def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
    for key in ("models", "evaluators"):
        if key not in cfg:
            raise UsageError(f"{path}: config lacks {key!r}")
    for key in ("a", "b"):
        if key not in cfg["models"] or key not in cfg["evaluators"]:
            raise UsageError(f"{path}: config needs models.{key} and evaluators.{key}")
    return cfg


def problem_from_config(cfg: dict) -> MergeProblem:
    models = cfg["models"]
    a, b = read_checkpoint(models["a"]), read_checkpoint(models["b"])
    base = read_checkpoint(models["base"]) if models.get("base") else None
    return MergeProblem(a, b, base, TaskEvaluator.from_config(cfg["evaluators"]["a"]),
                        TaskEvaluator.from_config(cfg["evaluators"]["b"]))


def partition_from_config(cfg: dict, model, mode: str | None = None) -> BlockPartition:
    mode = mode or cfg.get("segment", "trace" if cfg.get("trace") else "heuristic")
    if mode == "trace":
        if not cfg.get("trace"):
            raise UsageError("segment mode 'trace' needs a trace path in the config")
        return segment_from_trace(load_trace(cfg["trace"]), model)
    if mode == "heuristic":
        return heuristic_segment(model)
    if mode == "none":
        return BlockPartition.single(model)
    raise UsageError(f"unknown segment mode {mode!r}")


# --- subcommands -------------------------------------------------------------

def cmd_merge(args) -> int:
    technique = _technique(args.technique)
    if technique.needs_base and not args.base:
        raise MissingBase(f"--technique {technique.value} requires --base")
    params = MergeParams(technique, args.weight, args.density, args.seed)
    a, b = read_checkpoint(args.a), read_checkpoint(args.b)
    base = read_checkpoint(args.base) if args.base else None
    merged = merge_block(a, b, base, params)
    write_checkpoint(merged, args.out)
    summary = {
        "out": args.out,
        "technique": technique.value,
        "weight": params.weight,
        "density": params.density if technique.uses_density else None,
        "seed": params.seed,
        "tensors": len(merged),
        "elements": merged.num_elements,
    }
    if args.config:
        cfg = load_config(args.config)
        problem = MergeProblem(a, b, base, TaskEvaluator.from_config(cfg["evaluators"]["a"]),
                               TaskEvaluator.from_config(cfg["evaluators"]["b"]))
        ev = problem.score(merged)
        summary.update(loss_a=ev.loss_a, loss_b=ev.loss_b, ap_a=ev.ap_a, ap_b=ev.ap_b, f=ev.f,
                       pd=preservation_discrepancy(ev.ap_a, ev.ap_b))
    _emit(summary)
    return 0


def cmd_segment(args) -> int:
    model = read_checkpoint(args.model)
    if args.heuristic:
        partition = heuristic_segment(model)
    else:
        partition = segment_from_trace(load_trace(args.trace), model)
    text = json.dumps(partition.to_json(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        _emit({"out": args.out, "blocks": len(partition.blocks), "residual": len(partition.residual)})
    else:
        print(text)
    return 0


def _budget(cfg: dict, args) -> Budget:
    b = dict(cfg.get("budget") or {})
    for key in ("init", "iters", "pool"):
        if getattr(args, key, None) is not None:
            b[key] = getattr(args, key)
    return Budget(int(b.get("init", 20)), int(b.get("iters", 200)), int(b.get("pool", 512)))


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    problem = problem_from_config(cfg)
    partition = partition_from_config(cfg, problem.a, args.segment)
    budget = _budget(cfg, args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    os.makedirs(args.out_dir, exist_ok=True)

    on_trial = None
    if args.keep_trials:
        trial_dir = os.path.join(args.out_dir, "trials")
        os.makedirs(trial_dir, exist_ok=True)
        count = [0]

        def on_trial(rec):
            merged = apply_config(rec.sample, problem.a, problem.b, problem.base, partition)
            write_checkpoint(merged, os.path.join(trial_dir, f"trial{count[0]:04d}.bt"))
            count[0] += 1

    log.info("searching %d blocks, budget init=%d iters=%d", len(partition.blocks), budget.init, budget.iters)
    forest = ForestConfig(threads=_threads())
    try:
        result = run_search(problem, partition, budget, seed, args.init_split, forest, on_trial=on_trial)
    except BlockmergeError as e:
        history = getattr(e, "history", None)
        if history:
            with open(os.path.join(args.out_dir, "history.csv"), "w", newline="") as fh:
                fh.write(history_csv(history))
        raise
    write_search_outputs(result, args.out_dir, cfg)
    _emit({
        "out_dir": args.out_dir,
        "best_f": result.best.f,
        "ap_a": result.best.ap_a,
        "ap_b": result.best.ap_b,
        "trials": len(result.history),
        "blocks": len(partition.blocks),
    })
    return 0


def cmd_grid(args) -> int:
    technique = _technique(args.technique)
    cfg = load_config(args.config)
    if technique.needs_base and not cfg["models"].get("base"):
        raise MissingBase(f"technique {technique.value} requires models.base in the config")
    problem = problem_from_config(cfg)
    weights = _steps(0.0, 1.0, args.weight_step) if args.weight_step else None
    densities = None
    if args.density_step:
        densities = _steps(args.density_start, 1.0, args.density_step)
    records = run_grid(problem, technique, weights, densities, args.seed)
    text = grid_csv(records)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
        best = max(records, key=lambda r: r.f)
        _emit({"out": args.out, "trials": len(records), "best_f": best.f,
               "best_weight": best.sample.blocks[0].weight, "best_density": best.sample.blocks[0].density})
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    model = args.model or args.model_pos
    data = args.data or args.data_pos
    if not model or not data:
        raise UsageError("eval needs a model and a dataset (--model/--data or positionals)")
    loss = evaluate_loss(Builtin(load_spec(args.spec)), model, data)
    _emit({"loss": loss})
    return 0


def cmd_fixture(args) -> int:
    knobs = FixtureKnobs(delta_scale=args.delta_scale, samples=args.samples)
    pair = generate_task_pair(args.seed, knobs=knobs)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    p = lambda name: os.path.join(out, name)  # noqa: E731
    write_checkpoint(pair.base, p("base.bt"))
    write_checkpoint(pair.model_a, p("a.bt"))
    write_checkpoint(pair.model_b, p("b.bt"))
    write_checkpoint(pair.data_a.to_tensormap(), p("va.bt"))
    write_checkpoint(pair.data_b.to_tensormap(), p("vb.bt"))
    with open(p("trace.json"), "w") as fh:
        json.dump(pair.trace.to_json(), fh, indent=2)
    with open(p("toy.json"), "w") as fh:
        json.dump(pair.spec.to_json(), fh, indent=2)
    config = {
        "models": {"a": p("a.bt"), "b": p("b.bt"), "base": p("base.bt")},
        "trace": p("trace.json"),
        "evaluators": {
            "a": {"kind": "builtin", "spec": p("toy.json"), "data": p("va.bt")},
            "b": {"kind": "builtin", "spec": p("toy.json"), "data": p("vb.bt")},
        },
        "budget": {"init": 20, "iters": 200, "pool": 512},
        "seed": args.seed,
        "segment": "trace",
    }
    with open(p("search.json"), "w") as fh:
        json.dump(config, fh, indent=2)
    _emit({"out_dir": out, "seed": args.seed, "parameters": pair.base.num_elements,
           "samples": knobs.samples})
    return 0


def cmd_report(args) -> int:
    with open(args.history, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{args.history}: empty history")
    try:
        fs = [float(r["f"]) for r in rows]
        ap_a = [float(r["ap_a"]) for r in rows]
        ap_b = [float(r["ap_b"]) for r in rows]
        iters = [int(r["iteration"]) for r in rows]
    except (KeyError, ValueError) as e:
        raise DataError(f"{args.history}: not a search history ({e})") from e

    best_so_far, running = [], float("-inf")
    for f in fs:
        running = max(running, f)
        best_so_far.append(running)
    i = max(range(len(fs)), key=lambda k: (fs[k], -k))
    init = [f for f, it in zip(fs, iters) if it == 0]

    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["trial", "iteration", "f", "best_f", "ap_a", "ap_b", "pd"])
        for k in range(len(fs)):
            w.writerow([k, iters[k], repr(fs[k]), repr(best_so_far[k]), repr(ap_a[k]), repr(ap_b[k]),
                        repr(preservation_discrepancy(ap_a[k], ap_b[k]))])
        return 0
    _emit({
        "trials": len(fs),
        "best_trial": i,
        "best_iteration": iters[i],
        "best_f": fs[i],
        "best_ap_a": ap_a[i],
        "best_ap_b": ap_b[i],
        "best_pd": preservation_discrepancy(ap_a[i], ap_b[i]),
        "init_best_f": max(init) if init else None,
        "mean_f": sum(fs) / len(fs),
    })
    if args.format == "jsonl":
        for k in range(len(fs)):
            _emit({"trial": k, "iteration": iters[k], "f": fs[k], "best_f": best_so_far[k]})
    return 0


# --- wiring -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockmerge", description="Block-wise merging of task-specific checkpoints.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="merge two checkpoints with one technique")
    p.add_argument("--technique", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--density", type=float, default=0.65)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--base")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="search config whose evaluators score the merge")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("segment", help="emit the block partition of a model")
    p.add_argument("--model", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--trace")
    g.add_argument("--heuristic", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("search", help="run the block-wise Bayesian optimization search")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--segment", choices=["trace", "heuristic", "none"])
    p.add_argument("--init-split", choices=["19/1", "all"], default="19/1")
    p.add_argument("--keep-trials", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("grid", help="exhaustive whole-model weight x density sweep")
    p.add_argument("--technique", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--weight-step", type=float)
    p.add_argument("--density-start", type=float, default=0.5)
    p.add_argument("--density-step", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="loss of a model on a dataset; usable as an external evaluator")
    p.add_argument("--spec", required=True)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("model_pos", nargs="?", metavar="MODEL")
    p.add_argument("data_pos", nargs="?", metavar="DATA")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fixture", help="write a synthetic two-task fixture")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--delta-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("report", help="summarize a search history")
    p.add_argument("--history", required=True)
    p.add_argument("--format", choices=["json", "jsonl", "csv"], default="json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help, --version and usage errors
        return e.code if isinstance(e.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BlockmergeError as e:
        print(f"blockmerge: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"blockmerge: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
