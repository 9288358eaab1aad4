"""Command-line entry point: generate, run, ablate, score.

Set ``CLINORCH_VERBOSE=1`` for per-episode progress on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .agents import AgentError
from .core import dumps
from .env import generate_corpus, parse_difficulty, strip_reveals, write_case
from .evaluation import compare_runs, corpus_summary, delta_table, write_scores
from .memory import write_jsonl
from .orchestrator import ConfigError, EnvironmentFault
from .runner import (
    RunSettings,
    StoreMissingError,
    load_cases_dir,
    load_config,
    load_experience,
    merge_config,
    read_traces,
    run_and_write,
    score_corpus,
    settings_from_dict,
)

LATTICE: tuple[tuple[str, dict[str, bool]], ...] = (
    ("baseline", {"no_mcts": True, "no_experience_memory": True, "no_backtrack": True}),
    ("memory", {"no_mcts": True, "no_experience_memory": False, "no_backtrack": True}),
    ("orchestrator", {"no_mcts": False, "no_experience_memory": False, "no_backtrack": True}),
    ("all", {"no_mcts": False, "no_experience_memory": False, "no_backtrack": False}),
)


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    doc: dict[str, Any] = {"seed": args.seed, "workers": args.workers}
    for name in ("no_backtrack", "no_experience_memory", "no_mcts"):
        if getattr(args, name, False):
            doc[name] = True
    return doc


def _settings(args: argparse.Namespace) -> RunSettings:
    return settings_from_dict(merge_config(load_config(args.config), _flag_overrides(args)))


def cmd_generate(args: argparse.Namespace) -> dict[str, Any]:
    parse_difficulty(args.difficulty)
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    out = Path(args.out)
    case_dir = out / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    cases = generate_corpus(args.seed, args.count, args.difficulty)
    if args.unsolvable:
        cases = [strip_reveals(c) for c in cases]
    for c in cases:
        write_case(case_dir / f"{c.id}.json", c)
    write_jsonl(out / "cdc_store.jsonl", [c.truth for c in cases])
    return {"cases": len(cases), "case_dir": str(case_dir), "store": str(out / "cdc_store.jsonl")}


def _inputs(args: argparse.Namespace):
    cases = load_cases_dir(args.corpus)
    store = load_experience(args.store, args.guidelines)
    return cases, store


def cmd_run(args: argparse.Namespace) -> dict[str, Any]:
    settings = _settings(args)
    cases, store = _inputs(args)
    scores = run_and_write(cases, settings, store, args.out)
    summary = corpus_summary(scores)
    summary["flags"] = settings.flags()
    return summary


def cmd_ablate(args: argparse.Namespace) -> dict[str, Any]:
    base = merge_config(load_config(args.config), _flag_overrides(args))
    forced = {k: bool(base.get(k, False)) for k in ("no_backtrack", "no_experience_memory", "no_mcts")}
    cases, store = _inputs(args)
    out = Path(args.out)
    done: dict[tuple, dict] = {}
    runs: dict[str, dict] = {}
    for name, flags in LATTICE:
        eff = {k: v or forced[k] for k, v in flags.items()}
        key = tuple(sorted(eff.items()))
        if key not in done:
            done[key] = run_and_write(cases, settings_from_dict(merge_config(base, eff)), store, out / name)
        else:
            write_scores(out / name, done[key])
        runs[name] = done[key]
    baseline_name = LATTICE[0][0]
    tables = {}
    for name, _ in LATTICE[1:]:
        table = delta_table(compare_runs(runs[baseline_name], runs[name]), baseline_name, name)
        (out / f"deltas_{name}.md").write_text(table, encoding="utf-8")
        tables[name] = table
    means = {name: corpus_summary(runs[name])["means"]["average"] for name, _ in LATTICE}
    report = {"runs": len(done), "lattice": [n for n, _ in LATTICE], "average": means}
    (out / "ablation.json").write_text(dumps(report), encoding="utf-8")
    return report


def cmd_score(args: argparse.Namespace) -> dict[str, Any]:
    results = read_traces(args.traces)
    cases = load_cases_dir(args.corpus)
    scores = score_corpus(results, cases)
    write_scores(args.out, scores)
    return corpus_summary(scores)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clinorch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded synthetic corpus and its case store")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--difficulty", default="full_info", help="full_info or withheld_<k>")
    g.add_argument("--unsolvable", action="store_true", help="withheld items cannot be revealed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (
        ("run", cmd_run, "run every case and write traces and scores"),
        ("ablate", cmd_ablate, "run the ablation lattice and write delta tables"),
    ):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--corpus", required=True, help="directory of case files")
        r.add_argument("--store", required=True, help="case store (JSON lines)")
        r.add_argument("--guidelines", help="guideline store (JSON lines); built-in chunks by default")
        r.add_argument("--config", help="JSON run config")
        r.add_argument("--out", required=True)
        r.add_argument("--seed", type=int)
        r.add_argument("--workers", type=int)
        r.add_argument("--no-backtrack", dest="no_backtrack", action="store_true")
        r.add_argument("--no-experience-memory", dest="no_experience_memory", action="store_true")
        r.add_argument("--no-mcts", dest="no_mcts", action="store_true", help="greedy prior policy")
        r.set_defaults(func=func)

    s = sub.add_parser("score", help="re-score existing trace files")
    s.add_argument("--traces", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)
    return p


def _error(kind: str, exc: BaseException, path: str | None = None) -> dict[str, Any]:
    doc = {"error": kind, "message": str(exc)}
    if path is not None:
        doc["path"] = path
    return doc


def main(argv: Sequence[str] | None = None) -> int:
    verbose = os.environ.get("CLINORCH_VERBOSE", "") not in ("", "0")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except StoreMissingError as exc:
        doc, code = _error("store-missing", exc, str(exc)), 2
    except (ConfigError, ValueError) as exc:
        doc, code = _error("config-invalid", exc), 2
    except (AgentError, EnvironmentFault) as exc:
        doc, code = _error("environment-fault", exc), 3
    except OSError as exc:
        doc, code = _error("io-failure", exc, getattr(exc, "filename", None)), 4
    else:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
        return 0
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
