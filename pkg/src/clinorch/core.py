"""Domain vocabulary shared by every other module.

Everything here is an immutable value object. ``WorkingMemory`` changes only
through the update helpers in :mod:`clinorch.memory`, which return new
snapshots, so snapshots can be handed to concurrent rollouts without copying.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Union

_TOKEN_RE = re.compile(r"[a-z0-9]+")

THETA_TERM = 0.7


class Stage(str, Enum):
    SPECIALTY_REFERRAL = "specialty_referral"
    TEST_ORDERING = "test_ordering"
    EXAMINATION = "examination"
    DIAGNOSIS = "diagnosis"
    TREATMENT = "treatment"

    @property
    def order(self) -> int:
        return _STAGE_ORDER[self]

    def __lt__(self, other):  # type: ignore[override]
        if not isinstance(other, Stage):
            return NotImplemented
        return self.order < other.order

    def __le__(self, other):  # type: ignore[override]
        if not isinstance(other, Stage):
            return NotImplemented
        return self.order <= other.order

    def __gt__(self, other):  # type: ignore[override]
        if not isinstance(other, Stage):
            return NotImplemented
        return self.order > other.order

    def __ge__(self, other):  # type: ignore[override]
        if not isinstance(other, Stage):
            return NotImplemented
        return self.order >= other.order

    def successor(self) -> Stage | None:
        i = self.order + 1
        return STAGES[i] if i < len(STAGES) else None

    def earlier(self) -> list[Stage]:
        """All stages strictly before this one, in workflow order."""
        return list(STAGES[: self.order])


STAGES: tuple[Stage, ...] = tuple(Stage)
_STAGE_ORDER = {s: i for i, s in enumerate(STAGES)}


class EvidenceKind(str, Enum):
    SYMPTOM = "symptom"
    HISTORY = "history"
    PHYSICAL_EXAM = "physical-exam"
    LAB_RESULT = "lab-result"
    IMAGING_FINDING = "imaging-finding"
    GUIDELINE_KNOWLEDGE = "guideline-knowledge"


class HypothesisStatus(str, Enum):
    OPEN = "open"
    CONFIRMED = "confirmed"
    REFUTED = "refuted"


class CoreError(ValueError):
    """Raised when a value object would violate one of its invariants."""


def canonical(label: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return " ".join(label.lower().split())


def tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def contains_descriptor(descriptor: str, content: str) -> bool:
    """True when the descriptor's tokens occur contiguously inside ``content``."""
    needle = tokens(descriptor)
    hay = tokens(content)
    if not needle:
        return False
    n = len(needle)
    return any(hay[i : i + n] == needle for i in range(len(hay) - n + 1))


@dataclass(frozen=True)
class Evidence:
    id: str
    kind: EvidenceKind
    content: str
    source: str
    step: int = 0
    # False marks a negative answer ("asked, not found"); it closes an
    # information need without supporting any hypothesis.
    present: bool = True

    def __post_init__(self):
        if not self.id:
            raise CoreError("evidence id must be non-empty")
        if self.step < 0:
            raise CoreError(f"evidence {self.id}: negative step")
        object.__setattr__(self, "kind", EvidenceKind(self.kind))

    @property
    def is_patient(self) -> bool:
        return self.kind is not EvidenceKind.GUIDELINE_KNOWLEDGE

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "content": self.content,
            "source": self.source,
            "step": self.step,
            "present": self.present,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Evidence:
        return cls(
            id=d["id"],
            kind=EvidenceKind(d["kind"]),
            content=d["content"],
            source=d["source"],
            step=int(d["step"]),
            present=bool(d.get("present", True)),
        )


@dataclass(frozen=True)
class Hypothesis:
    disease: str
    confidence: float
    supporting: frozenset[str] = frozenset()
    missing: tuple[str, ...] = ()
    status: HypothesisStatus = HypothesisStatus.OPEN

    def __post_init__(self):
        object.__setattr__(self, "disease", canonical(self.disease))
        object.__setattr__(self, "supporting", frozenset(self.supporting))
        object.__setattr__(self, "missing", tuple(canonical(m) for m in self.missing))
        object.__setattr__(self, "status", HypothesisStatus(self.status))
        if not self.disease:
            raise CoreError("hypothesis disease must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise CoreError(f"confidence {self.confidence} outside [0, 1]")
        if self.status is HypothesisStatus.CONFIRMED and self.confidence < THETA_TERM:
            raise CoreError(
                f"confirmed hypothesis {self.disease!r} below threshold {THETA_TERM}"
            )

    def reopened(self) -> Hypothesis:
        return replace(self, status=HypothesisStatus.OPEN)

    def to_dict(self) -> dict[str, Any]:
        return {
            "disease": self.disease,
            "confidence": self.confidence,
            "supporting": sorted(self.supporting),
            "missing": list(self.missing),
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Hypothesis:
        return cls(
            disease=d["disease"],
            confidence=float(d["confidence"]),
            supporting=frozenset(d.get("supporting", ())),
            missing=tuple(d.get("missing", ())),
            status=HypothesisStatus(d.get("status", "open")),
        )


# ---------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class AgentCall:
    agent_id: str
    stage: Stage
    task_payload: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if not self.agent_id or ":" in self.agent_id:
            raise CoreError(f"invalid agent id {self.agent_id!r}")

    @property
    def id(self) -> str:
        base = f"agent:{self.stage.value}:{self.agent_id}"
        return f"{base}:{self.task_payload}" if self.task_payload else base


@dataclass(frozen=True)
class RagQuery:
    target: str = "guideline"

    def __post_init__(self):
        if self.target not in ("guideline", "cdc"):
            raise CoreError(f"unknown retrieval target {self.target!r}")

    @property
    def id(self) -> str:
        return f"rag:{self.target}"


@dataclass(frozen=True)
class Backtrack:
    target_stage: Stage

    def __post_init__(self):
        object.__setattr__(self, "target_stage", Stage(self.target_stage))

    @property
    def id(self) -> str:
        return f"back:{self.target_stage.value}"


@dataclass(frozen=True)
class Terminate:
    @property
    def id(self) -> str:
        return "term"


Action = Union[AgentCall, RagQuery, Backtrack, Terminate]


def action_id(action: Action) -> str:
    return action.id


def action_to_dict(action: Action) -> dict[str, Any]:
    if isinstance(action, AgentCall):
        return {
            "type": "agent_call",
            "agent_id": action.agent_id,
            "stage": action.stage.value,
            "task_payload": action.task_payload,
        }
    if isinstance(action, RagQuery):
        return {"type": "rag_query", "target": action.target}
    if isinstance(action, Backtrack):
        return {"type": "backtrack", "target_stage": action.target_stage.value}
    if isinstance(action, Terminate):
        return {"type": "terminate"}
    raise TypeError(f"not an action: {action!r}")


def action_from_dict(d: dict[str, Any]) -> Action:
    kind = d["type"]
    if kind == "agent_call":
        return AgentCall(d["agent_id"], Stage(d["stage"]), d.get("task_payload", ""))
    if kind == "rag_query":
        return RagQuery(d["target"])
    if kind == "backtrack":
        return Backtrack(Stage(d["target_stage"]))
    if kind == "terminate":
        return Terminate()
    raise CoreError(f"unknown action type {kind!r}")


@dataclass(frozen=True)
class TrajectoryEntry:
    step: int
    action: Action
    result_digest: str
    reward: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "action": action_to_dict(self.action),
            "result_digest": self.result_digest,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrajectoryEntry:
        return cls(int(d["step"]), action_from_dict(d["action"]), d["result_digest"], float(d["reward"]))


# ---------------------------------------------------------------------------
# Working memory

# Stage outputs are stored as plain JSON-compatible values:
#   specialty_referral -> {"level1": str, "level2": [str, ...]}
#   test_ordering      -> [exam, ...]
#   examination        -> {exam: finding text}
#   diagnosis          -> [label, ...]
#   treatment          -> [modality, ...]


@dataclass(frozen=True)
class WorkingMemory:
    evidence: tuple[Evidence, ...] = ()
    hypotheses: tuple[Hypothesis, ...] = ()
    trajectory: tuple[TrajectoryEntry, ...] = ()
    current_stage: Stage = Stage.SPECIALTY_REFERRAL
    step: int = 0
    outputs: dict[Stage, Any] = field(default_factory=dict)
    # Current missing-evidence annotation (the orchestrator's work order).
    missing: tuple[str, ...] = ()
    case_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "current_stage", Stage(self.current_stage))
        ids = [e.id for e in self.evidence]
        if len(ids) != len(set(ids)):
            raise CoreError("duplicate evidence id in working memory")
        known = set(ids)
        for h in self.hypotheses:
            dangling = h.supporting - known
            if dangling:
                raise CoreError(f"hypothesis {h.disease!r} cites unknown evidence {sorted(dangling)}")
        steps = [t.step for t in self.trajectory]
        if any(b <= a for a, b in zip(steps, steps[1:])) or (steps and steps[0] < 0):
            raise CoreError("trajectory steps must be strictly increasing from 0")

    @property
    def evidence_ids(self) -> frozenset[str]:
        return frozenset(e.id for e in self.evidence)

    def evidence_by_id(self, eid: str) -> Evidence:
        for e in self.evidence:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def patient_evidence(self) -> tuple[Evidence, ...]:
        return tuple(e for e in self.evidence if e.is_patient)

    def stage_done(self, stage: Stage) -> bool:
        return stage in self.outputs

    def confirmed_diagnoses(self) -> list[str]:
        return list(self.outputs.get(Stage.DIAGNOSIS, []))

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "evidence": [e.to_dict() for e in self.evidence],
            "hypotheses": [h.to_dict() for h in self.hypotheses],
            "trajectory": [t.to_dict() for t in self.trajectory],
            "current_stage": self.current_stage.value,
            "step": self.step,
            "outputs": {s.value: self.outputs[s] for s in STAGES if s in self.outputs},
            "missing": list(self.missing),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> WorkingMemory:
        return cls(
            evidence=tuple(Evidence.from_dict(e) for e in d.get("evidence", ())),
            hypotheses=tuple(Hypothesis.from_dict(h) for h in d.get("hypotheses", ())),
            trajectory=tuple(TrajectoryEntry.from_dict(t) for t in d.get("trajectory", ())),
            current_stage=Stage(d.get("current_stage", Stage.SPECIALTY_REFERRAL.value)),
            step=int(d.get("step", 0)),
            outputs={Stage(k): _freeze_output(v) for k, v in d.get("outputs", {}).items()},
            missing=tuple(d.get("missing", ())),
            case_id=d.get("case_id", ""),
        )


def _freeze_output(value: Any) -> Any:
    # JSON round-trips lists as lists and dicts as dicts; nothing to convert,
    # but keep a copy so callers cannot alias the source document.
    return json.loads(json.dumps(value))


def dumps(obj: Any) -> str:
    """Canonical JSON used for every file this package writes."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
