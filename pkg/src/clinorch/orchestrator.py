"""Search engine: dense reward, top-K expansion, rollout Q estimates, PUCT.

One orchestration step is one decision. An agent call at stage ``s`` runs
``s`` and then carries the workflow forward stage by stage (re-detecting
missing evidence before every stage) until diagnosis, continuing into
treatment only once the diagnosis is confirmed and nothing is missing. A
backtrack rewinds the stage pointer and runs the same cycle from the target.
This keeps five sequential stages inside a four-step budget.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Any, Callable, Sequence

from .agents import AgentError, AgentPool, AgentTask
from .core import (
    THETA_TERM,
    Action,
    AgentCall,
    Backtrack,
    CoreError,
    Evidence,
    EvidenceKind,
    RagQuery,
    Stage,
    Terminate,
    TrajectoryEntry,
    WorkingMemory,
    action_from_dict,
    action_to_dict,
)
from .env import CaseEnvironment, derive_seed
from .memory import (
    ExperienceMemory,
    RetrievalConfig,
    missing_potential_evidence,
    restore_stage,
    retrieve_cdc,
    retrieve_guidelines,
    update_working_memory,
)
from .policy import PolicySuite

CLINICAL_CLOSURE = "clinical_closure"
STEP_LIMIT = "step_limit"


class ConfigError(ValueError):
    pass


class KeyMismatchError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class EnvironmentFault(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.5
    penalty: float = 0.2
    discount: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha {self.alpha} must lie in (0, 1)")
        if self.penalty < 0.0:
            raise ConfigError(f"penalty {self.penalty} must be >= 0")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError(f"discount {self.discount} must lie in [0, 1)")


@dataclass(frozen=True)
class SearchConfig:
    top_k: int = 4
    rollouts: int = 3
    lam: float = 1.0
    max_steps: int = 4
    rollout_depth: int = 3
    seed: int = 0
    term_confidence: float = THETA_TERM
    allow_backtrack: bool = True
    use_mcts: bool = True
    rollout_policy: str = "greedy"

    def __post_init__(self):
        if self.top_k < 1 or self.rollouts < 1 or self.max_steps < 1:
            raise ConfigError("top_k, rollouts and max_steps must be >= 1")
        if self.rollout_depth < 0:
            raise ConfigError("rollout_depth must be >= 0")
        if self.lam < 0.0:
            raise ConfigError(f"lambda {self.lam} must be >= 0")
        if not 0.0 <= self.term_confidence <= 1.0:
            raise ConfigError(f"term_confidence {self.term_confidence} outside [0, 1]")
        if self.rollout_policy not in ROLLOUT_POLICIES:
            raise ConfigError(f"unknown rollout policy {self.rollout_policy!r}")


# ---------------------------------------------------------------------------
# Formulas


def compute_reward(missing_reduction: int, confidence_gain: float, p: RewardParams) -> float:
    gain = p.alpha * max(0, missing_reduction) + (1.0 - p.alpha) * max(0.0, confidence_gain)
    if missing_reduction <= 0 and confidence_gain <= 0:
        gain -= p.penalty
    return gain


def decision_phi(missing: Sequence[str] | set[str] | frozenset[str]) -> bool:
    return len(missing) > 0


def select_action(q: dict[str, float], prior: dict[str, float], lam: float) -> str:
    """PUCT argmax of ``Q + lam * prior`` over action ids, ties to the smaller id."""
    if set(q) != set(prior):
        raise KeyMismatchError(f"q keys {sorted(q)} differ from prior keys {sorted(prior)}")
    if not q:
        raise KeyMismatchError("no candidates")
    best, best_val = None, None
    for aid in sorted(q):
        val = q[aid] + lam * prior[aid]
        if best_val is None or val > best_val:
            best, best_val = aid, val
    return best


def top_k_by_prior(candidates: Sequence[Action], prior: dict[str, float], k: int) -> list[Action]:
    return sorted(candidates, key=lambda a: (-prior[a.id], a.id))[:k]


def greedy_pick(candidates: Sequence[Action], prior: dict[str, float], rng: random.Random) -> Action:
    return top_k_by_prior(candidates, prior, 1)[0]


def sampled_pick(candidates: Sequence[Action], prior: dict[str, float], rng: random.Random) -> Action:
    ordered = sorted(candidates, key=lambda a: a.id)
    weights = [prior[a.id] for a in ordered]
    if sum(weights) <= 0.0:
        return ordered[0]
    return rng.choices(ordered, weights=weights, k=1)[0]


ROLLOUT_POLICIES: dict[str, Callable[[Sequence[Action], dict[str, float], random.Random], Action]] = {
    "greedy": greedy_pick,
    "sample": sampled_pick,
}


def backtrack_target(mem: WorkingMemory, missing: Sequence[str], suite: PolicySuite) -> Stage:
    if not decision_phi(missing):
        raise PreconditionError("backtracking needs a non-empty missing set")
    if mem.current_stage <= Stage.SPECIALTY_REFERRAL:
        raise PreconditionError("no stage precedes specialty referral")
    return suite.backtrack_router(mem, missing)


# ---------------------------------------------------------------------------
# Trace records


@dataclass(frozen=True)
class StepOutcome:
    step: int
    chosen: Action
    q_values: dict[str, float]
    priors: dict[str, float]
    reward: float
    delta_missing: int
    delta_confidence: float
    backtracked: bool
    stage_before: Stage
    stage_after: Stage
    evidence_count: int
    missing: tuple[str, ...]
    digest: str

    def __post_init__(self):
        if self.chosen.id not in self.q_values:
            raise CoreError(f"chosen action {self.chosen.id} not among candidates")

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "chosen": action_to_dict(self.chosen),
            "chosen_id": self.chosen.id,
            "q_values": {k: self.q_values[k] for k in sorted(self.q_values)},
            "priors": {k: self.priors[k] for k in sorted(self.priors)},
            "reward": self.reward,
            "delta_missing": self.delta_missing,
            "delta_confidence": self.delta_confidence,
            "backtracked": self.backtracked,
            "stage_before": self.stage_before.value,
            "stage_after": self.stage_after.value,
            "evidence_count": self.evidence_count,
            "missing": list(self.missing),
            "digest": self.digest,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> StepOutcome:
        return cls(
            step=int(d["step"]),
            chosen=action_from_dict(d["chosen"]),
            q_values=dict(d["q_values"]),
            priors=dict(d["priors"]),
            reward=float(d["reward"]),
            delta_missing=int(d["delta_missing"]),
            delta_confidence=float(d["delta_confidence"]),
            backtracked=bool(d["backtracked"]),
            stage_before=Stage(d["stage_before"]),
            stage_after=Stage(d["stage_after"]),
            evidence_count=int(d["evidence_count"]),
            missing=tuple(d["missing"]),
            digest=d["digest"],
        )


@dataclass(frozen=True)
class EpisodeResult:
    case_id: str
    final_memory: WorkingMemory
    trace: tuple[StepOutcome, ...]
    closure: str
    diagnosis: frozenset[str]
    treatment: frozenset[str]

    def __post_init__(self):
        ends_on_term = bool(self.trace) and isinstance(self.trace[-1].chosen, Terminate)
        if (self.closure == CLINICAL_CLOSURE) != ends_on_term:
            raise CoreError("closure must be clinical_closure exactly when the last action is Terminate")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "closure": self.closure,
            "diagnosis": sorted(self.diagnosis),
            "treatment": sorted(self.treatment),
            "steps": len(self.trace),
            "trace": [s.to_dict() for s in self.trace],
            "final_memory": self.final_memory.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EpisodeResult:
        return cls(
            case_id=d["case_id"],
            final_memory=WorkingMemory.from_dict(d["final_memory"]),
            trace=tuple(StepOutcome.from_dict(s) for s in d["trace"]),
            closure=d["closure"],
            diagnosis=frozenset(d["diagnosis"]),
            treatment=frozenset(d["treatment"]),
        )


# ---------------------------------------------------------------------------
# Engine


class Orchestrator:
    """Binds one episode's environment, agents, policies and stores."""

    def __init__(
        self,
        env: CaseEnvironment,
        suite: PolicySuite | None = None,
        experience: ExperienceMemory | None = None,
        cfg: SearchConfig | None = None,
        reward_params: RewardParams | None = None,
        retrieval: RetrievalConfig | None = None,
        pool: AgentPool | None = None,
    ):
        self.env = env
        self.suite = suite or PolicySuite()
        self.experience = experience
        self.cfg = cfg or SearchConfig()
        self.reward_params = reward_params or RewardParams()
        self.retrieval = retrieval or RetrievalConfig()
        self.pool = pool or AgentPool.scripted()
        # rollouts revisit the same (state, action) pairs; keep the source
        # memory in the entry so a recycled id() can never alias
        self._transitions: dict[tuple[int, str], tuple[WorkingMemory, WorkingMemory, str]] = {}

    # -- missing evidence and legality

    def detect(self, mem: WorkingMemory) -> tuple[str, ...]:
        proposals: tuple[str, ...] = ()
        if self.experience is not None and self.experience.cases:
            proposals = missing_potential_evidence(mem.evidence, mem.hypotheses, self.experience, self.retrieval)
        return tuple(self.suite.missing_detector(mem, proposals))

    def refresh(self, mem: WorkingMemory) -> WorkingMemory:
        return self.suite.update_planner(mem, self.detect(mem))

    def legal_actions(self, mem: WorkingMemory) -> list[Action]:
        stage = mem.current_stage
        acts: list[Action] = []
        acts.append(AgentCall(self.pool.default_for(stage), stage))
        nxt = stage.successor() if mem.stage_done(stage) else None
        if nxt is not None and (nxt is not Stage.TREATMENT or mem.confirmed_diagnoses()):
            acts.append(AgentCall(self.pool.default_for(nxt), nxt))
        if self.experience is not None:
            if self.experience.guidelines:
                acts.append(RagQuery("guideline"))
            if self.experience.cases:
                acts.append(RagQuery("cdc"))
        if self.cfg.allow_backtrack and decision_phi(mem.missing):
            acts.extend(Backtrack(s) for s in stage.earlier())
        if self.can_terminate(mem):
            acts.append(Terminate())
        return acts

    def can_terminate(self, mem: WorkingMemory) -> bool:
        return not decision_phi(mem.missing) and self.suite.top_confidence(mem) >= self.cfg.term_confidence

    def priors(self, mem: WorkingMemory, legal: Sequence[Action]) -> dict[str, float]:
        routed = None
        if decision_phi(mem.missing) and mem.current_stage > Stage.SPECIALTY_REFERRAL:
            routed = backtrack_target(mem, mem.missing, self.suite)
        return self.suite.action_prior(
            mem, legal, self.cfg.term_confidence, self.suite.top_confidence(mem), routed=routed
        )

    def expand(self, mem: WorkingMemory) -> tuple[list[Action], dict[str, float]]:
        legal = self.legal_actions(mem)
        prior = self.priors(mem, legal)
        return top_k_by_prior(legal, prior, self.cfg.top_k), prior

    # -- transitions

    def _invoke(self, mem: WorkingMemory, stage: Stage, agent_id: str) -> WorkingMemory:
        knowledge: tuple = ()
        if self.experience is not None and self.experience.guidelines:
            knowledge = tuple(retrieve_guidelines(mem.evidence, mem.hypotheses, self.experience, self.retrieval))
        task = AgentTask(stage, mem, knowledge)
        resp = self.pool.invoke(agent_id, task, self.env)
        mem = update_working_memory(mem, resp.new_evidence, resp.new_hypotheses)
        outputs = dict(mem.outputs)
        if resp.stage_output is not None:
            outputs[stage] = resp.stage_output
        return replace(mem, outputs=outputs, current_stage=stage)

    def _cycle(self, mem: WorkingMemory, start: Stage, agent_id: str) -> tuple[WorkingMemory, list[str]]:
        ran: list[str] = []
        stage: Stage | None = start
        while stage is not None:
            mem = self.refresh(mem)
            try:
                mem = self._invoke(mem, stage, agent_id if stage is start else self.pool.default_for(stage))
            except AgentError as exc:
                ran.append(f"{stage.value}!{type(exc).__name__}")
                break
            ran.append(stage.value)
            if stage is Stage.TREATMENT:
                break
            if stage is Stage.DIAGNOSIS:
                mem = self.refresh(mem)
                if not (mem.confirmed_diagnoses() and self.can_terminate(mem)):
                    break
            stage = stage.successor()
        return self.refresh(mem), ran

    def _retrieve(self, mem: WorkingMemory, target: str) -> WorkingMemory:
        new: list[Evidence] = []
        known = mem.evidence_ids
        src = f"rag:{target}"
        if self.experience is not None and target == "guideline":
            for g in retrieve_guidelines(mem.evidence, mem.hypotheses, self.experience, self.retrieval):
                eid = f"{mem.case_id}/k:{g.id}"
                if eid not in known:
                    new.append(Evidence(eid, EvidenceKind.GUIDELINE_KNOWLEDGE, g.text, src, mem.step))
        elif self.experience is not None:
            for c, _ in retrieve_cdc(mem.evidence, mem.hypotheses, self.experience, self.retrieval):
                eid = f"{mem.case_id}/c:{c.id}"
                if eid not in known:
                    text = f"similar case {c.diagnosis}: {', '.join(sorted(c.key_evidence))}"
                    new.append(Evidence(eid, EvidenceKind.GUIDELINE_KNOWLEDGE, text, src, mem.step))
        return self.refresh(update_working_memory(mem, new, ()))

    def transition(self, mem: WorkingMemory, action: Action) -> tuple[WorkingMemory, str]:
        """Apply ``action`` and return the new memory plus a short digest."""
        key = (id(mem), action.id)
        hit = self._transitions.get(key)
        if hit is not None and hit[0] is mem:
            return hit[1], hit[2]
        before = len(mem.evidence)
        if isinstance(action, Terminate):
            out, what = mem, "terminate"
        elif isinstance(action, AgentCall):
            out, ran = self._cycle(mem, action.stage, action.agent_id)
            what = ">".join(ran)
        elif isinstance(action, Backtrack):
            if not action.target_stage < mem.current_stage:
                raise EnvironmentFault(f"illegal backtrack to {action.target_stage.value} from {mem.current_stage.value}")
            rewound = restore_stage(mem, action.target_stage)
            out, ran = self._cycle(rewound, action.target_stage, self.pool.default_for(action.target_stage))
            what = f"back>{'>'.join(ran)}"
        elif isinstance(action, RagQuery):
            out, what = self._retrieve(mem, action.target), action.id
        else:
            raise EnvironmentFault(f"unknown action {action!r}")
        digest = f"{what}; +{len(out.evidence) - before} evidence; missing={len(out.missing)}"
        self._transitions[key] = (mem, out, digest)
        return out, digest

    def reward(self, before: WorkingMemory, after: WorkingMemory) -> tuple[float, int, float]:
        d_missing = len(before.missing) - len(after.missing)
        d_conf = self.suite.top_confidence(after) - self.suite.top_confidence(before)
        return compute_reward(d_missing, d_conf, self.reward_params), d_missing, d_conf

    # -- search

    def rollout(self, mem: WorkingMemory, first: Action, rng: random.Random, step: int = 0
                ) -> tuple[list[Action], list[float]]:
        pick = ROLLOUT_POLICIES[self.cfg.rollout_policy]
        actions: list[Action] = []
        rewards: list[float] = []
        a = first
        for depth in range(self.cfg.rollout_depth + 1):
            if depth and step + depth >= self.cfg.max_steps:
                break
            nxt, _ = self.transition(mem, a)
            actions.append(a)
            rewards.append(self.reward(mem, nxt)[0])
            mem = nxt
            if isinstance(a, Terminate) or depth == self.cfg.rollout_depth:
                break
            legal = self.legal_actions(mem)
            a = pick(legal, self.priors(mem, legal), rng)
        return actions, rewards

    def estimate_q(self, mem: WorkingMemory, a: Action, step: int = 0) -> float:
        total = 0.0
        for i in range(self.cfg.rollouts):
            rng = random.Random(derive_seed(self.cfg.seed, mem.case_id, step, a.id, i))
            actions, rewards = self.rollout(mem, a, rng, step)
            assert a in actions, "rollouts are rooted at the evaluated action"
            total += sum(self.reward_params.discount**n * r for n, r in enumerate(rewards))
        return total / self.cfg.rollouts

    def run(self) -> EpisodeResult:
        mem = self.refresh(self.env.initial_memory())
        trace: list[StepOutcome] = []
        closure = STEP_LIMIT
        for t in range(self.cfg.max_steps):
            cands, prior_all = self.expand(mem)
            prior = {a.id: prior_all[a.id] for a in cands}
            if self.cfg.use_mcts:
                q = {a.id: self.estimate_q(mem, a, t) for a in sorted(cands, key=lambda a: a.id)}
            else:
                q = {a.id: 0.0 for a in cands}
            chosen_id = select_action(q, prior, self.cfg.lam if self.cfg.use_mcts else 1.0)
            chosen = next(a for a in cands if a.id == chosen_id)
            new, digest = self.transition(mem, chosen)
            r, d_missing, d_conf = self.reward(mem, new)
            new = replace(new, trajectory=mem.trajectory + (TrajectoryEntry(t, chosen, digest, r),))
            trace.append(
                StepOutcome(
                    step=t,
                    chosen=chosen,
                    q_values=q,
                    priors=prior,
                    reward=r,
                    delta_missing=d_missing,
                    delta_confidence=d_conf,
                    backtracked=isinstance(chosen, Backtrack),
                    stage_before=mem.current_stage,
                    stage_after=new.current_stage,
                    evidence_count=len(new.evidence),
                    missing=new.missing,
                    digest=digest,
                )
            )
            mem = new
            if isinstance(chosen, Terminate):
                closure = CLINICAL_CLOSURE
                break
        return EpisodeResult(
            case_id=mem.case_id,
            final_memory=mem,
            trace=tuple(trace),
            closure=closure,
            diagnosis=frozenset(mem.confirmed_diagnoses()),
            treatment=frozenset(mem.outputs.get(Stage.TREATMENT, ())),
        )


# ---------------------------------------------------------------------------
# Functional entry points


def expand_candidates(mem: WorkingMemory, suite: PolicySuite, cfg: SearchConfig,
                      env: CaseEnvironment | None = None, experience: ExperienceMemory | None = None
                      ) -> list[Action]:
    return Orchestrator(env, suite, experience, cfg).expand(mem)[0]


def rollout(mem: WorkingMemory, first: Action, env: CaseEnvironment, suite: PolicySuite, cfg: SearchConfig,
            rng: random.Random, *, experience: ExperienceMemory | None = None,
            reward_params: RewardParams | None = None) -> tuple[list[Action], list[float]]:
    return Orchestrator(env, suite, experience, cfg, reward_params).rollout(mem, first, rng)


def estimate_q(mem: WorkingMemory, a: Action, env: CaseEnvironment, suite: PolicySuite, cfg: SearchConfig,
               *, experience: ExperienceMemory | None = None, reward_params: RewardParams | None = None,
               step: int = 0) -> float:
    return Orchestrator(env, suite, experience, cfg, reward_params).estimate_q(mem, a, step)


def run_episode(case, env: CaseEnvironment | None = None, suite: PolicySuite | None = None,
                experience: ExperienceMemory | None = None, cfg: SearchConfig | None = None,
                reward_params: RewardParams | None = None, *, retrieval: RetrievalConfig | None = None,
                pool: AgentPool | None = None) -> EpisodeResult:
    env = env or CaseEnvironment(case)
    if env.case.id != case.id:
        raise ConfigError(f"environment holds {env.case.id}, not {case.id}")
    return Orchestrator(env, suite, experience, cfg, reward_params, retrieval, pool).run()


def check_trace(result: EpisodeResult, cfg: SearchConfig) -> list[str]:
    """Invariant violations found in an episode (empty list when clean)."""
    problems = []
    if len(result.trace) > cfg.max_steps:
        problems.append(f"{len(result.trace)} steps exceed max_steps={cfg.max_steps}")
    steps = [s.step for s in result.trace]
    if steps != sorted(set(steps)):
        problems.append("step indices not strictly increasing")
    counts = [s.evidence_count for s in result.trace]
    if any(b < a for a, b in zip(counts, counts[1:])):
        problems.append("evidence set shrank")
    for s in result.trace:
        if s.chosen.id not in s.q_values:
            problems.append(f"step {s.step}: chosen action outside candidates")
        if isinstance(s.chosen, Backtrack) and not s.chosen.target_stage < s.stage_before:
            problems.append(f"step {s.step}: backtrack target not earlier")
    traj = [t.step for t in result.final_memory.trajectory]
    if traj != steps:
        problems.append("trajectory does not mirror the trace")
    return problems
