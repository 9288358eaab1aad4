"""Stage agents: a uniform contract, scripted defaults and a remote adapter.

Scripted agents read the case's ground truth through the environment, but
only reveal withheld evidence through :meth:`CaseEnvironment.answer_query`,
so what they can report depends on what the orchestrator asked for.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

from .core import (
    Evidence,
    EvidenceKind,
    Hypothesis,
    HypothesisStatus,
    Stage,
    WorkingMemory,
    canonical,
)
from .memory import DuplicateEvidenceError, GuidelineChunk, is_satisfied, is_supported
from .vocab import EXAMS, TREATMENTS, exam_kind, exam_of, negative_finding_text


class AgentError(RuntimeError):
    """Base for failures the orchestrator turns into a zero-yield action."""


class UnknownAgentError(AgentError):
    pass


class VocabularyError(AgentError):
    pass


class RemoteTransportError(AgentError):
    pass


@dataclass(frozen=True)
class AgentTask:
    stage: Stage
    memory_view: WorkingMemory
    retrieved_knowledge: tuple[GuidelineChunk, ...] = ()
    instructions: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage.value,
            "memory_view": self.memory_view.to_dict(),
            "retrieved_knowledge": [g.to_dict() for g in self.retrieved_knowledge],
            "instructions": self.instructions,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AgentTask:
        return cls(
            stage=Stage(d["stage"]),
            memory_view=WorkingMemory.from_dict(d["memory_view"]),
            retrieved_knowledge=tuple(GuidelineChunk.from_dict(g) for g in d.get("retrieved_knowledge", ())),
            instructions=d.get("instructions", ""),
        )


@dataclass(frozen=True)
class AgentResponse:
    new_evidence: tuple[Evidence, ...] = ()
    new_hypotheses: tuple[Hypothesis, ...] = ()
    stage_output: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "new_evidence": [e.to_dict() for e in self.new_evidence],
            "new_hypotheses": [h.to_dict() for h in self.new_hypotheses],
            "stage_output": self.stage_output,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AgentResponse:
        return cls(
            new_evidence=tuple(Evidence.from_dict(e) for e in d.get("new_evidence", ())),
            new_hypotheses=tuple(Hypothesis.from_dict(h) for h in d.get("new_hypotheses", ())),
            stage_output=d.get("stage_output"),
        )


def _labels(value: Any, what: str) -> list[str]:
    if not isinstance(value, (list, tuple, set, frozenset)):
        raise VocabularyError(f"{what}: expected a list of labels, got {type(value).__name__}")
    out = sorted({canonical(str(v)) for v in value})
    if "" in out:
        raise VocabularyError(f"{what}: empty label")
    return out


def _validate_output(stage: Stage, out: Any) -> Any:
    if out is None:
        return None
    if stage is Stage.SPECIALTY_REFERRAL:
        if not isinstance(out, dict) or "level1" not in out:
            raise VocabularyError("referral output needs level1 and level2")
        return {"level1": canonical(str(out["level1"])), "level2": _labels(out.get("level2", []), "level2")}
    if stage is Stage.TEST_ORDERING:
        exams = _labels(out, "test ordering")
        bad = [e for e in exams if e not in EXAMS]
        if bad:
            raise VocabularyError(f"exams outside the standard list: {bad}")
        return exams
    if stage is Stage.EXAMINATION:
        if not isinstance(out, dict):
            raise VocabularyError("examination output must map exam -> finding")
        findings = {canonical(k): str(v) for k, v in out.items()}
        bad = sorted(k for k in findings if k not in EXAMS)
        if bad:
            raise VocabularyError(f"exams outside the standard list: {bad}")
        return {k: findings[k] for k in sorted(findings)}
    if stage is Stage.DIAGNOSIS:
        return _labels(out, "diagnosis")
    if stage is Stage.TREATMENT:
        plan = _labels(out, "treatment")
        bad = [p for p in plan if p not in TREATMENTS]
        if bad:
            raise VocabularyError(f"treatments outside the 11 modalities: {bad}")
        return plan
    raise VocabularyError(f"unknown stage {stage!r}")


def validate_response(resp: AgentResponse, stage: Stage, memory: WorkingMemory | None = None) -> AgentResponse:
    """Canonicalise labels and enforce closed vocabularies and fresh evidence ids."""
    stage = Stage(stage)
    seen = set(memory.evidence_ids) if memory is not None else set()
    for e in resp.new_evidence:
        if e.id in seen:
            raise DuplicateEvidenceError(f"evidence id {e.id!r} is not fresh")
        seen.add(e.id)
    return replace(resp, stage_output=_validate_output(stage, resp.stage_output))


# ---------------------------------------------------------------------------
# Scripted agents


class Agent(Protocol):
    agent_id: str
    stage: Stage

    def respond(self, task: AgentTask, env: Any) -> AgentResponse: ...


class _Scripted:
    agent_id = ""
    stage = Stage.SPECIALTY_REFERRAL

    @property
    def action_id(self) -> str:
        return f"agent:{self.stage.value}:{self.agent_id}"

    def _eid(self, mem: WorkingMemory, k: int) -> str:
        return f"{mem.case_id}/{self.stage.value}@{mem.step}.{k}"

    def _stamp(self, ev: Evidence, mem: WorkingMemory) -> Evidence:
        return replace(ev, step=mem.step, source=self.action_id)


class ReferralAgent(_Scripted):
    """Routes the patient and retakes history for missing interview items."""

    agent_id = "referral"
    stage = Stage.SPECIALTY_REFERRAL

    def respond(self, task: AgentTask, env: Any) -> AgentResponse:
        mem = task.memory_view
        new: list[Evidence] = []
        for d in mem.missing:
            if exam_of(d) is not None or is_satisfied(d, mem.evidence + tuple(new)):
                continue
            ev = env.answer_query(Stage.SPECIALTY_REFERRAL, d)
            if ev is not None and ev.id not in mem.evidence_ids:
                new.append(self._stamp(ev, mem))
            elif ev is None:
                new.append(
                    Evidence(self._eid(mem, len(new)), EvidenceKind.HISTORY, f"{d}: not reported",
                             self.action_id, mem.step, present=False)
                )
        level1, level2 = env.case.truth_referral
        return AgentResponse(tuple(new), (), {"level1": level1, "level2": sorted(level2)})


class TestOrderingAgent(_Scripted):
    """Orders exams behind known findings plus any exam a missing item needs."""

    __test__ = False
    agent_id = "ordering"
    stage = Stage.TEST_ORDERING

    def respond(self, task: AgentTask, env: Any) -> AgentResponse:
        mem = task.memory_view
        exams = set(mem.outputs.get(Stage.TEST_ORDERING, ()))
        for e in mem.patient_evidence():
            exam = exam_of(e.content)
            if exam is not None and e.present:
                exams.add(exam)
        declared = [m for h in mem.hypotheses if h.status is HypothesisStatus.OPEN for m in h.missing]
        for d in (*mem.missing, *declared):
            exam = exam_of(d)
            if exam is not None and not is_satisfied(d, mem.evidence):
                exams.add(exam)
        return AgentResponse((), (), sorted(exams))


class ExaminationAgent(_Scripted):
    """Performs ordered exams and reports a finding per exam."""

    agent_id = "examination"
    stage = Stage.EXAMINATION

    def respond(self, task: AgentTask, env: Any) -> AgentResponse:
        mem = task.memory_view
        new: list[Evidence] = []
        findings: dict[str, str] = {}
        for exam in mem.outputs.get(Stage.TEST_ORDERING, ()):
            ev = env.answer_query(Stage.EXAMINATION, exam)
            if ev is not None and ev.id not in mem.evidence_ids:
                new.append(self._stamp(ev, mem))
            known = mem.evidence + tuple(new)
            positive = [e for e in known if e.is_patient and e.present and exam_of(e.content) == exam]
            findings[exam] = positive[0].content if positive else f"{exam}: no abnormality detected"
            for d in mem.missing:
                if exam_of(d) == exam and not is_satisfied(d, known):
                    neg = Evidence(self._eid(mem, len(new)), exam_kind(exam), negative_finding_text(d),
                                   self.action_id, mem.step, present=False)
                    new.append(neg)
                    known = known + (neg,)
        return AgentResponse(tuple(new), (), findings)


class DiagnosisAgent(_Scripted):
    """Confirms the true disease once every key finding is supported."""

    agent_id = "diagnosis"
    stage = Stage.DIAGNOSIS

    def respond(self, task: AgentTask, env: Any) -> AgentResponse:
        mem = task.memory_view
        truth = env.case.truth
        key = sorted(truth.key_evidence)
        supported = [k for k in key if is_supported(k, mem.evidence)]
        support_ids = frozenset(
            e.id
            for e in mem.patient_evidence()
            if e.present and any(is_supported(k, (e,)) for k in supported)
        )
        if len(supported) == len(key):
            h = Hypothesis(truth.diagnosis, 1.0, support_ids, (), HypothesisStatus.CONFIRMED)
            return AgentResponse((), (h,), [truth.diagnosis])
        # partial support stays in the suspected band, 0.3 <= c < 0.7
        conf = round(0.3 + 0.4 * len(supported) / len(key), 6)
        missing = tuple(k for k in key if k not in supported)
        h = Hypothesis(truth.diagnosis, conf, support_ids, missing, HypothesisStatus.OPEN)
        return AgentResponse((), (h,), [])


class TreatmentAgent(_Scripted):
    """Returns the reference plan for a correctly confirmed diagnosis."""

    agent_id = "treatment"
    stage = Stage.TREATMENT

    def respond(self, task: AgentTask, env: Any) -> AgentResponse:
        confirmed = task.memory_view.outputs.get(Stage.DIAGNOSIS, [])
        truth = env.case.truth
        plan = sorted(truth.plan) if truth.diagnosis in confirmed else []
        return AgentResponse((), (), plan)


def scripted_agents() -> list[Agent]:
    return [ReferralAgent(), TestOrderingAgent(), ExaminationAgent(), DiagnosisAgent(), TreatmentAgent()]


# ---------------------------------------------------------------------------
# Remote adapter


class RemoteAgent:
    """POSTs the task JSON to ``url`` and reads an AgentResponse JSON back."""

    def __init__(self, agent_id: str, stage: Stage, url: str, timeout: float = 30.0,
                 retries: int = 2, max_in_flight: int = 1, backoff: float = 0.2):
        self.agent_id = agent_id
        self.stage = Stage(stage)
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def respond(self, task: AgentTask, env: Any = None) -> AgentResponse:
        body = json.dumps({"agent_id": self.agent_id, **task.to_dict()}, sort_keys=True).encode()
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as r:
                    payload = json.loads(r.read().decode("utf-8"))
                return AgentResponse.from_dict(payload)
            except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError) as exc:
                last = exc
        raise RemoteTransportError(f"{self.url}: {last}")


# ---------------------------------------------------------------------------
# Pool


@dataclass
class AgentPool:
    agents: dict[Stage, dict[str, Agent]] = field(default_factory=dict)

    @classmethod
    def scripted(cls) -> AgentPool:
        pool = cls()
        for a in scripted_agents():
            pool.register(a)
        return pool

    def register(self, agent: Agent) -> None:
        self.agents.setdefault(agent.stage, {})[agent.agent_id] = agent

    def default_for(self, stage: Stage) -> str:
        registered = self.agents.get(Stage(stage))
        if not registered:
            raise UnknownAgentError(f"no agent registered for {Stage(stage).value}")
        return next(iter(registered))

    def invoke(self, agent_id: str, task: AgentTask, env: Any) -> AgentResponse:
        agent = self.agents.get(task.stage, {}).get(agent_id)
        if agent is None:
            raise UnknownAgentError(f"agent {agent_id!r} not registered for {task.stage.value}")
        return validate_response(agent.respond(task, env), task.stage, task.memory_view)
