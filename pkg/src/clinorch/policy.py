"""Judgment providers behind the orchestrator.

Each provider has a deterministic default so the search is testable without
a language model. ``PolicySuite`` bundles them; any field can be swapped for
a callable with the same signature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .core import (
    THETA_TERM,
    Action,
    AgentCall,
    Backtrack,
    Hypothesis,
    HypothesisStatus,
    RagQuery,
    Stage,
    Terminate,
    WorkingMemory,
    canonical,
)
from .memory import is_satisfied, is_supported
from .vocab import exam_of


class PolicyError(ValueError):
    pass


def detect_missing(mem: WorkingMemory, proposals: Sequence[str] = ()) -> tuple[str, ...]:
    """Open hypotheses' declared gaps plus proposals, minus what evidence covers."""
    wanted = {canonical(m) for h in mem.hypotheses if h.status is HypothesisStatus.OPEN for m in h.missing}
    wanted |= {canonical(p) for p in proposals}
    return tuple(sorted(d for d in wanted if d and not is_satisfied(d, mem.evidence)))


def score_confidence(h: Hypothesis, mem: WorkingMemory) -> float:
    """Stored confidence lifted toward 1 by the share of declared gaps now supported."""
    base = h.confidence
    if not h.missing:
        return base
    hit = sum(1 for m in h.missing if is_supported(m, mem.evidence))
    return min(1.0, max(0.0, base + (1.0 - base) * hit / len(h.missing)))


def top_confidence(mem: WorkingMemory, scorer: Callable[[Hypothesis, WorkingMemory], float] = score_confidence) -> float:
    scores = [scorer(h, mem) for h in mem.hypotheses if h.status is not HypothesisStatus.REFUTED]
    return max(scores, default=0.0)


def route_missing(mem: WorkingMemory, missing: Sequence[str]) -> Stage:
    """Earliest stage able to recover any of ``missing``.

    Exam results route to examination when that exam was already ordered and
    to test ordering otherwise; interview items route to specialty referral.
    """
    ordered = set(mem.outputs.get(Stage.TEST_ORDERING, ()))
    stages = []
    for d in missing:
        exam = exam_of(d)
        if exam is None:
            stages.append(Stage.SPECIALTY_REFERRAL)
        elif exam in ordered:
            stages.append(Stage.EXAMINATION)
        else:
            stages.append(Stage.TEST_ORDERING)
    if not stages:
        raise PolicyError("nothing missing to route")
    return min(stages)


def action_prior(
    mem: WorkingMemory,
    candidates: Sequence[Action],
    theta: float = THETA_TERM,
    confidence: float | None = None,
    routed: Stage | None = None,
) -> dict[str, float]:
    """Stage-progress heuristic, normalised to sum to one over ``candidates``.

    ``routed`` is the backtrack stage the router picked; it gets the full
    backtrack weight and other backtrack targets half of it.
    """
    if not candidates:
        raise PolicyError("empty candidate list")
    missing = mem.missing
    phi = bool(missing)
    conf = top_confidence(mem) if confidence is None else confidence
    if routed is None and phi and mem.current_stage > Stage.SPECIALTY_REFERRAL:
        routed = route_missing(mem, missing)
    raw: dict[str, float] = {}
    for a in candidates:
        if isinstance(a, AgentCall):
            raw[a.id] = 0.1 if mem.stage_done(a.stage) else 0.5
        elif isinstance(a, RagQuery):
            raw[a.id] = 0.2 if missing else 0.05
        elif isinstance(a, Backtrack):
            if not phi:
                raw[a.id] = 0.0
            else:
                raw[a.id] = 0.2 if a.target_stage == routed else 0.1
        elif isinstance(a, Terminate):
            raw[a.id] = 0.3 if conf >= theta else 0.05
        else:
            raise PolicyError(f"unknown action {a!r}")
    total = sum(raw.values())
    if total <= 0.0:
        return {k: 1.0 / len(raw) for k in raw}
    return {k: v / total for k, v in raw.items()}


def plan_update(mem: WorkingMemory, missing: Sequence[str]) -> WorkingMemory:
    """Record the current missing-evidence set as the memory's work order."""
    return replace(mem, missing=tuple(missing))


@dataclass(frozen=True)
class PolicySuite:
    missing_detector: Callable[[WorkingMemory, Sequence[str]], tuple[str, ...]] = detect_missing
    confidence_scorer: Callable[[Hypothesis, WorkingMemory], float] = score_confidence
    action_prior: Callable[..., dict[str, float]] = action_prior
    update_planner: Callable[[WorkingMemory, Sequence[str]], WorkingMemory] = plan_update
    backtrack_router: Callable[[WorkingMemory, Sequence[str]], Stage] = route_missing
    # remote providers that cannot take concurrent calls set this
    serialized: bool = False

    def top_confidence(self, mem: WorkingMemory) -> float:
        return top_confidence(mem, self.confidence_scorer)


PROVIDERS: dict[str, Callable[[], PolicySuite]] = {"default": PolicySuite}


def policy_by_name(name: str) -> PolicySuite:
    try:
        return PROVIDERS[name]()
    except KeyError:
        raise PolicyError(f"unknown policy provider {name!r}; known: {sorted(PROVIDERS)}") from None
