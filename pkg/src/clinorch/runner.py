"""Corpus runs: configuration precedence, per-case seeding and output files."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .core import dumps
from .env import SyntheticCase, derive_seed, guideline_chunks, load_corpus
from .evaluation import StageScores, score_episode, write_scores
from .memory import ExperienceMemory, RetrievalConfig, load_cases, load_guidelines
from .orchestrator import ConfigError, EpisodeResult, RewardParams, SearchConfig, run_episode
from .policy import policy_by_name

log = logging.getLogger("clinorch")


class StoreMissingError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunSettings:
    search: SearchConfig = field(default_factory=SearchConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    policy: str = "default"
    seed: int = 0
    no_backtrack: bool = False
    no_experience_memory: bool = False
    no_mcts: bool = False
    workers: int = 1

    def effective_search(self, case_id: str) -> SearchConfig:
        return replace(
            self.search,
            seed=derive_seed(self.seed, case_id),
            allow_backtrack=self.search.allow_backtrack and not self.no_backtrack,
            use_mcts=self.search.use_mcts and not self.no_mcts,
        )

    def flags(self) -> dict[str, bool]:
        return {
            "no_backtrack": self.no_backtrack,
            "no_experience_memory": self.no_experience_memory,
            "no_mcts": self.no_mcts,
        }


# config documents use "lambda"; the dataclass field is "lam"
_SEARCH_ALIASES = {"lambda": "lam"}


def _build(cls, section: Mapping[str, Any], where: str, aliases: Mapping[str, str] = {}):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in section.items():
        name = aliases.get(k, k)
        if name not in known:
            raise ConfigError(f"unknown key {where}.{k}")
        kwargs[name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def settings_from_dict(doc: Mapping[str, Any]) -> RunSettings:
    top = {f.name for f in fields(RunSettings)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    kw: dict[str, Any] = {k: v for k, v in doc.items() if k not in ("search", "reward", "retrieval")}
    kw["search"] = _build(SearchConfig, doc.get("search", {}), "search", _SEARCH_ALIASES)
    kw["reward"] = _build(RewardParams, doc.get("reward", {}), "reward")
    kw["retrieval"] = _build(RetrievalConfig, doc.get("retrieval", {}), "retrieval")
    settings = RunSettings(**kw)
    policy_by_name(settings.policy)
    if settings.workers < 1:
        raise ConfigError("workers must be >= 1")
    return settings


def merge_config(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Shallow merge with nested sections merged key by key; ``None`` values are skipped."""
    out: dict[str, Any] = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in base.items()}
    for k, v in override.items():
        if v is None:
            continue
        if isinstance(v, Mapping):
            out[k] = merge_config(out.get(k, {}), v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise StoreMissingError(str(p))
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return doc


def load_experience(cdc_path: str | Path, guidelines_path: str | Path | None = None) -> ExperienceMemory:
    cdc = Path(cdc_path)
    if not cdc.is_file():
        raise StoreMissingError(str(cdc))
    if guidelines_path is not None:
        g = Path(guidelines_path)
        if not g.is_file():
            raise StoreMissingError(str(g))
        guides = load_guidelines(g)
    else:
        guides = tuple(guideline_chunks())
    return ExperienceMemory(guides, load_cases(cdc))


def load_cases_dir(directory: str | Path) -> list[SyntheticCase]:
    d = Path(directory)
    if not d.is_dir():
        raise StoreMissingError(str(d))
    return load_corpus(d)


def _episode(args: tuple[SyntheticCase, RunSettings, ExperienceMemory | None]) -> EpisodeResult:
    case, settings, store = args
    experience = None
    if store is not None and not settings.no_experience_memory:
        # a case never retrieves its own chain
        experience = store.excluding(case.id)
    return run_episode(
        case,
        suite=policy_by_name(settings.policy),
        experience=experience,
        cfg=settings.effective_search(case.id),
        reward_params=settings.reward,
        retrieval=settings.retrieval,
    )


def run_corpus(
    cases: list[SyntheticCase], settings: RunSettings, store: ExperienceMemory | None
) -> dict[str, EpisodeResult]:
    jobs = [(c, settings, store) for c in sorted(cases, key=lambda c: c.id)]
    if settings.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=settings.workers) as ex:
            results = list(ex.map(_episode, jobs, chunksize=max(1, len(jobs) // (4 * settings.workers))))
    else:
        results = [_episode(j) for j in jobs]
    for r in results:
        log.info("%s: %s after %d steps", r.case_id, r.closure, len(r.trace))
    return {r.case_id: r for r in results}


def score_corpus(results: Mapping[str, EpisodeResult], cases: list[SyntheticCase]) -> dict[str, StageScores]:
    by_id = {c.id: c for c in cases}
    missing = sorted(set(results) - set(by_id))
    if missing:
        raise ConfigError(f"traces without a matching case: {missing}")
    return {cid: score_episode(results[cid], by_id[cid]) for cid in sorted(results)}


def write_traces(directory: str | Path, results: Mapping[str, EpisodeResult]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for cid in sorted(results):
        (d / f"{cid}.json").write_text(dumps(results[cid].to_dict()), encoding="utf-8")


def read_traces(directory: str | Path) -> dict[str, EpisodeResult]:
    d = Path(directory)
    if not d.is_dir():
        raise StoreMissingError(str(d))
    out = {}
    for p in sorted(d.glob("*.json")):
        r = EpisodeResult.from_dict(json.loads(p.read_text(encoding="utf-8")))
        out[r.case_id] = r
    return out


def run_and_write(
    cases: list[SyntheticCase], settings: RunSettings, store: ExperienceMemory | None, out_dir: str | Path
) -> dict[str, StageScores]:
    out = Path(out_dir)
    results = run_corpus(cases, settings, store)
    write_traces(out / "traces", results)
    scores = score_corpus(results, cases)
    write_scores(out, scores)
    return scores
