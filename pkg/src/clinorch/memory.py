"""Dual memory: working-memory updates and the static experience memory.

The experience memory holds two stores, guideline chunks and causal
diagnostic chains (historical cases as key evidence -> diagnosis -> plan),
both searched with a pluggable :class:`Retriever`. The default retriever is
a plain term-frequency cosine over lowercase alphanumeric tokens.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

from .core import (
    CoreError,
    Evidence,
    Hypothesis,
    Stage,
    WorkingMemory,
    canonical,
    contains_descriptor,
    tokens,
)


class WorkingMemoryError(CoreError):
    """Working-memory update rejected."""


class DuplicateEvidenceError(WorkingMemoryError):
    pass


class DanglingSupportError(WorkingMemoryError):
    pass


class InvalidTargetError(WorkingMemoryError):
    pass


# ---------------------------------------------------------------------------
# Working memory


def update_working_memory(
    mem: WorkingMemory,
    new_evidence: Iterable[Evidence] = (),
    new_hypotheses: Iterable[Hypothesis] = (),
) -> WorkingMemory:
    """Return ``mem`` with evidence and hypotheses unioned in and ``step + 1``.

    Hypotheses are kept as an insertion-ordered set: an identical record is
    not stored twice, but two records for the same disease with different
    confidence both survive.
    """
    new_evidence = tuple(new_evidence)
    new_hypotheses = tuple(new_hypotheses)
    known = set(mem.evidence_ids)
    for e in new_evidence:
        if e.id in known:
            raise DuplicateEvidenceError(f"evidence id {e.id!r} already in memory")
        known.add(e.id)
    for h in new_hypotheses:
        dangling = h.supporting - known
        if dangling:
            raise DanglingSupportError(
                f"hypothesis {h.disease!r} cites unknown evidence {sorted(dangling)}"
            )
    hyps = list(mem.hypotheses)
    seen = set(hyps)
    for h in new_hypotheses:
        if h not in seen:
            hyps.append(h)
            seen.add(h)
    return replace(
        mem,
        evidence=mem.evidence + new_evidence,
        hypotheses=tuple(hyps),
        step=mem.step + 1,
    )


def snapshot(mem: WorkingMemory) -> WorkingMemory:
    # WorkingMemory is frozen, so the value itself is a safe snapshot token.
    return mem


def restore_stage(mem: WorkingMemory, target: Stage) -> WorkingMemory:
    """Move the workflow pointer back to ``target`` keeping all evidence.

    Hypotheses are reopened for re-verification. The caller appends the
    Backtrack entry to the trajectory.
    """
    target = Stage(target)
    if not target < mem.current_stage:
        raise InvalidTargetError(
            f"backtrack target {target.value} does not precede {mem.current_stage.value}"
        )
    return replace(
        mem,
        current_stage=target,
        hypotheses=tuple(h.reopened() for h in mem.hypotheses),
    )


def is_satisfied(descriptor: str, evidence: Iterable[Evidence]) -> bool:
    """Whether any patient evidence (positive or negative) covers ``descriptor``."""
    return any(e.is_patient and contains_descriptor(descriptor, e.content) for e in evidence)


def is_supported(descriptor: str, evidence: Iterable[Evidence]) -> bool:
    """Whether a positive patient finding covers ``descriptor``."""
    return any(
        e.is_patient and e.present and contains_descriptor(descriptor, e.content)
        for e in evidence
    )


# ---------------------------------------------------------------------------
# Similarity and retrieval


def _tf_vector(text: str) -> tuple[Counter, float]:
    tf = Counter(tokens(text))
    # squared norm stays an exact integer; identical texts then score exactly 1
    return tf, float(sum(v * v for v in tf.values()))


def _cosine(a: tuple[Counter, float], b: tuple[Counter, float]) -> float:
    (ta, na), (tb, nb) = a, b
    if na == 0.0 or nb == 0.0:
        return 0.0
    if len(ta) > len(tb):
        ta, tb = tb, ta
    dot = sum(v * tb[k] for k, v in ta.items() if k in tb)
    return min(1.0, max(0.0, dot / math.sqrt(na * nb)))


def similarity(query: str, document: str) -> float:
    return _cosine(_tf_vector(query), _tf_vector(document))


class Retriever(Protocol):
    def similarity(self, query: str, document: str) -> float: ...


class LexicalRetriever:
    """TF cosine retriever with a cache of document vectors."""

    def __init__(self):
        self._vectors: dict[str, tuple[Counter, float]] = {}

    def _vec(self, text: str) -> tuple[Counter, float]:
        v = self._vectors.get(text)
        if v is None:
            v = self._vectors[text] = _tf_vector(text)
        return v

    def similarity(self, query: str, document: str) -> float:
        return _cosine(self._vec(query), self._vec(document))


@dataclass(frozen=True)
class GuidelineChunk:
    id: str
    text: str
    tags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "text": self.text, "tags": list(self.tags)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GuidelineChunk:
        return cls(d["id"], d["text"], tuple(d.get("tags", ())))


@dataclass(frozen=True)
class CausalDiagnosticChain:
    id: str
    key_evidence: frozenset[str]
    diagnosis: str
    plan: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "key_evidence", frozenset(canonical(e) for e in self.key_evidence))
        object.__setattr__(self, "diagnosis", canonical(self.diagnosis))
        object.__setattr__(self, "plan", frozenset(canonical(p) for p in self.plan))
        if not self.key_evidence:
            raise CoreError(f"chain {self.id}: key evidence must be non-empty")
        if not self.diagnosis:
            raise CoreError(f"chain {self.id}: diagnosis must be non-empty")

    @property
    def document(self) -> str:
        return " ".join(sorted(self.key_evidence) + [self.diagnosis])

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "key_evidence": sorted(self.key_evidence),
            "diagnosis": self.diagnosis,
            "plan": sorted(self.plan),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CausalDiagnosticChain:
        return cls(d["id"], frozenset(d["key_evidence"]), d["diagnosis"], frozenset(d.get("plan", ())))


@dataclass(frozen=True)
class RetrievalConfig:
    n_guide: int = 3
    n_cdc: int = 3
    delta: float = 0.3

    def __post_init__(self):
        if self.n_guide < 1 or self.n_cdc < 1:
            raise CoreError("n_guide and n_cdc must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise CoreError(f"delta {self.delta} outside [0, 1]")


@dataclass
class ExperienceMemory:
    guidelines: tuple[GuidelineChunk, ...] = ()
    cases: tuple[CausalDiagnosticChain, ...] = ()
    retriever: Retriever = field(default_factory=LexicalRetriever)

    def __post_init__(self):
        self.guidelines = tuple(self.guidelines)
        self.cases = tuple(self.cases)
        for name, items in (("guideline", self.guidelines), ("case", self.cases)):
            ids = [x.id for x in items]
            if len(ids) != len(set(ids)):
                raise CoreError(f"duplicate {name} id in experience memory")
        self._guide_cache: dict[tuple[str, int], tuple[GuidelineChunk, ...]] = {}
        self._cdc_cache: dict[tuple[str, int], tuple[tuple[CausalDiagnosticChain, float], ...]] = {}

    def __len__(self) -> int:
        return len(self.guidelines) + len(self.cases)

    def excluding(self, case_id: str) -> ExperienceMemory:
        """Copy without the chain whose id is ``case_id`` (leakage guard)."""
        return ExperienceMemory(
            self.guidelines,
            tuple(c for c in self.cases if c.id != case_id),
            self.retriever,
        )

    def rank_guidelines(self, query: str, n: int) -> tuple[GuidelineChunk, ...]:
        key = (query, n)
        hit = self._guide_cache.get(key)
        if hit is None:
            scored = [(self.retriever.similarity(query, g.text), g) for g in self.guidelines]
            scored.sort(key=lambda sg: (-sg[0], sg[1].id))
            hit = self._guide_cache[key] = tuple(g for _, g in scored[:n])
        return hit

    def rank_cases(self, query: str, n: int) -> tuple[tuple[CausalDiagnosticChain, float], ...]:
        key = (query, n)
        hit = self._cdc_cache.get(key)
        if hit is None:
            scored = [(c, self.retriever.similarity(query, c.document)) for c in self.cases]
            scored.sort(key=lambda cs: (-cs[1], cs[0].id))
            hit = self._cdc_cache[key] = tuple(scored[:n])
        return hit


def query_text(evidence: Iterable[Evidence], hypotheses: Iterable[Hypothesis]) -> str:
    """Form the retrieval query: positive patient findings, then disease labels."""
    parts = [e.content for e in evidence if e.is_patient and e.present]
    parts += [h.disease for h in hypotheses]
    return " ".join(parts)


def retrieve_guidelines(
    evidence: Iterable[Evidence],
    hypotheses: Iterable[Hypothesis],
    store: ExperienceMemory,
    cfg: RetrievalConfig,
) -> list[GuidelineChunk]:
    return list(store.rank_guidelines(query_text(evidence, hypotheses), cfg.n_guide))


def retrieve_cdc(
    evidence: Iterable[Evidence],
    hypotheses: Iterable[Hypothesis],
    store: ExperienceMemory,
    cfg: RetrievalConfig,
) -> list[tuple[CausalDiagnosticChain, float]]:
    return list(store.rank_cases(query_text(evidence, hypotheses), cfg.n_cdc))


def importance_score(
    e: str,
    current: Iterable[Evidence],
    retrieved: Sequence[tuple[CausalDiagnosticChain, float]],
    cfg: RetrievalConfig,
) -> float:
    """Similarity-weighted share of retrieved cases that list ``e`` as key evidence.

    The sum is divided by ``cfg.n_cdc`` even when fewer cases came back, and
    the score is zero once the current evidence already covers ``e``.
    """
    e = canonical(e)
    if is_satisfied(e, current):
        return 0.0
    total = sum(score for case, score in retrieved if e in case.key_evidence)
    return total / cfg.n_cdc


def missing_potential_evidence(
    evidence: Iterable[Evidence],
    hypotheses: Iterable[Hypothesis],
    store: ExperienceMemory,
    cfg: RetrievalConfig,
) -> tuple[str, ...]:
    """Descriptors from similar cases whose importance strictly exceeds delta."""
    evidence = tuple(evidence)
    retrieved = retrieve_cdc(evidence, hypotheses, store, cfg)
    pool = sorted({e for case, _ in retrieved for e in case.key_evidence})
    scored = [(importance_score(e, evidence, retrieved, cfg), e) for e in pool]
    return tuple(e for s, e in sorted(scored, key=lambda se: (-se[0], se[1])) if s > cfg.delta)


# ---------------------------------------------------------------------------
# JSON-lines stores


def load_guidelines(path: str | Path) -> tuple[GuidelineChunk, ...]:
    return tuple(GuidelineChunk.from_dict(d) for d in _read_jsonl(path))


def load_cases(path: str | Path) -> tuple[CausalDiagnosticChain, ...]:
    return tuple(CausalDiagnosticChain.from_dict(d) for d in _read_jsonl(path))


def write_jsonl(path: str | Path, items: Iterable[Any]) -> None:
    lines = [json.dumps(x.to_dict(), sort_keys=True, ensure_ascii=False) for x in items]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]
