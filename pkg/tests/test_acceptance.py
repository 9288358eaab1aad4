"""Acceptance criteria A1-A8, each with its time budget.

Every test records a one-line summary; the terminal summary prints
``A<n> PASS|FAIL <detail>`` per criterion.
"""

from __future__ import annotations

import math
import random
import time
from collections import Counter
from dataclasses import replace

import pytest

from clinorch.core import Action, Evidence, EvidenceKind, Hypothesis, Terminate
from clinorch.env import CaseEnvironment, generate_case, generate_corpus, guideline_chunks, strip_reveals
from clinorch.evaluation import corpus_summary, iou
from clinorch.memory import (
    CausalDiagnosticChain,
    ExperienceMemory,
    RetrievalConfig,
    importance_score,
    missing_potential_evidence,
    retrieve_cdc,
)
from clinorch.orchestrator import (
    CLINICAL_CLOSURE,
    STEP_LIMIT,
    Orchestrator,
    RewardParams,
    SearchConfig,
    check_trace,
    compute_reward,
    select_action,
)
from clinorch.runner import RunSettings, run_and_write, run_corpus, score_corpus

CORPUS_SEED = 2024


@pytest.fixture
def crit(record_property):
    def note(name: str, detail: str) -> None:
        record_property("criterion", name)
        record_property("detail", detail)

    return note


def _store(cases):
    return ExperienceMemory(guideline_chunks(), tuple(c.truth for c in cases))


# ---------------------------------------------------------------------------
# A1


def test_a1_reward_formula(crit):
    rng = random.Random(1)
    t0 = time.perf_counter()
    n = 12_000
    for i in range(n):
        d_e = rng.randint(-4, 4)
        # a quarter of the samples sit exactly on the zero boundary
        d_c = 0.0 if i % 4 == 0 else rng.uniform(-1, 1)
        p = RewardParams(alpha=rng.uniform(1e-3, 1 - 1e-3), penalty=rng.choice([0.0, rng.uniform(0, 1)]))
        oracle = p.alpha * max(0, d_e) + (1 - p.alpha) * max(0.0, d_c) - p.penalty * (d_e <= 0 and d_c <= 0)
        got = compute_reward(d_e, d_c, p)
        assert got == oracle
        assert (got > 0) == (d_e > 0 or d_c > 0)
        assert (got < 0) == (d_e <= 0 and d_c <= 0 and p.penalty > 0)
    dt = time.perf_counter() - t0
    crit("A1", f"{n} samples in {dt:.2f}s")
    assert dt < 5


# ---------------------------------------------------------------------------
# A2


def _fixtures():
    """Mid-episode states across stages and difficulties."""
    out = []
    for seed in range(6):
        for diff in ("full_info", "withheld_1", "withheld_2"):
            case = generate_case(seed, diff)
            cases = generate_corpus(seed, 8, diff) + [case]
            env = CaseEnvironment(case)
            orch = Orchestrator(env, experience=_store(cases).excluding(case.id), cfg=SearchConfig(top_k=8))
            mem = orch.refresh(env.initial_memory())
            out.append((orch, mem))
            for _ in range(2):
                legal = orch.legal_actions(mem)
                a = next((x for x in legal if not isinstance(x, Terminate)), None)
                if a is None:
                    break
                mem, _ = orch.transition(mem, a)
                out.append((orch, mem))
    return out


def _oracle_argmax(q, prior, lam):
    vals = {k: q[k] + lam * prior[k] for k in q}
    best = max(vals.values())
    return min(k for k, v in vals.items() if v == best)


def _oracle_q(orch: Orchestrator, mem, a: Action, step: int) -> float:
    cfg, rp = orch.cfg, orch.reward_params
    total = 0.0
    for _ in range(cfg.rollouts):
        rewards, m, act = [], mem, a
        for depth in range(cfg.rollout_depth + 1):
            if depth and step + depth >= cfg.max_steps:
                break
            nxt, _ = orch.transition(m, act)
            de = len(m.missing) - len(nxt.missing)
            dc = orch.suite.top_confidence(nxt) - orch.suite.top_confidence(m)
            rewards.append(rp.alpha * max(0, de) + (1 - rp.alpha) * max(0.0, dc) - rp.penalty * (de <= 0 and dc <= 0))
            m = nxt
            if isinstance(act, Terminate):
                break
            legal = orch.legal_actions(m)
            pr = orch.priors(m, legal)
            act = sorted(legal, key=lambda x: (-pr[x.id], x.id))[0]
        ret = 0.0
        for n, r in enumerate(rewards):
            ret += rp.discount**n * r
        total += ret
    return total / cfg.rollouts


def test_a2_mcts_machinery(crit):
    t0 = time.perf_counter()
    fixtures = _fixtures()
    checked = 0
    for orch, mem in fixtures:
        legal = orch.legal_actions(mem)
        assert 1 <= len(legal) <= 8
        prior = orch.priors(mem, legal)
        full = sorted(legal, key=lambda a: (-prior[a.id], a.id))
        for k in range(1, 9):
            o = Orchestrator(orch.env, orch.suite, orch.experience, replace(orch.cfg, top_k=k))
            assert o.expand(mem)[0] == full[:k]
        for a in legal:
            assert orch.estimate_q(mem, a, 0) == pytest.approx(_oracle_q(orch, mem, a, 0), abs=1e-12)
        checked += 1
    rng = random.Random(2)
    for _ in range(2000):
        ids = rng.sample("abcdefgh", rng.randint(1, 8))
        q = {i: rng.choice([0.0, 0.5, rng.uniform(-1, 1)]) for i in ids}
        p = {i: rng.choice([0.25, rng.random()]) for i in ids}
        lam = rng.choice([0.0, 0.5, 1.0, 2.0])
        assert select_action(q, p, lam) == _oracle_argmax(q, p, lam)
        assert select_action(q, p, 0.0) == _oracle_argmax(q, {i: 0.0 for i in ids}, 0.0)
        flat = {i: 0.3 for i in ids}
        assert select_action(flat, p, lam or 1.0) == _oracle_argmax({i: 0.0 for i in ids}, p, 1.0)
    dt = time.perf_counter() - t0
    crit("A2", f"{checked} search fixtures, 2000 selection fixtures in {dt:.2f}s")
    assert dt < 5


# ---------------------------------------------------------------------------
# A3 / A4


def _corpus_means(cases, store, **flags):
    settings = RunSettings(seed=CORPUS_SEED, **flags)
    scores = score_corpus(run_corpus(cases, settings, store), cases)
    return corpus_summary(scores)["means"]


def test_a3_backtracking_efficacy(crit):
    t0 = time.perf_counter()
    cases = generate_corpus(CORPUS_SEED, 50, "withheld_1")
    store = _store(cases)
    full = _corpus_means(cases, store)["diagnosis_correct"]
    nobt = _corpus_means(cases, store, no_backtrack=True)["diagnosis_correct"]
    dt = time.perf_counter() - t0
    crit("A3", f"full={full:.3f} no_backtrack={nobt:.3f} delta={full - nobt:+.3f} in {dt:.1f}s")
    assert full - nobt >= 0.2
    assert dt < 60


LATTICE = (
    ("greedy-no-memory", dict(no_mcts=True, no_experience_memory=True, no_backtrack=True)),
    ("+experience-memory", dict(no_mcts=True, no_backtrack=True)),
    ("+mcts-orchestrator", dict(no_backtrack=True)),
    ("all", dict()),
)


def test_a4_ablation_monotonicity(crit):
    t0 = time.perf_counter()
    cases = generate_corpus(CORPUS_SEED, 50, "withheld_1")
    store = _store(cases)
    means = [_corpus_means(cases, store, **flags)["average"] for _, flags in LATTICE]
    dt = time.perf_counter() - t0
    crit("A4", " <= ".join(f"{n}={m:.3f}" for (n, _), m in zip(LATTICE, means)) + f" in {dt:.1f}s")
    assert all(b >= a for a, b in zip(means, means[1:]))
    assert means[-1] - means[0] >= 0.1
    assert dt < 180


# ---------------------------------------------------------------------------
# A5


def _oracle_sim(q: str, d: str) -> float:
    tq, td = Counter(q.split()), Counter(d.split())
    dot = sum(tq[w] * td[w] for w in tq)
    nq = sum(v * v for v in tq.values())
    nd = sum(v * v for v in td.values())
    return 0.0 if not nq or not nd else min(1.0, dot / math.sqrt(nq * nd))


def _oracle_proposals(evidence, hypotheses, cases, n_cdc, delta):
    query = " ".join([e.content for e in evidence if e.present] + [h.disease for h in hypotheses])
    ranked = sorted(cases, key=lambda c: (-_oracle_sim(query, " ".join(sorted(c.key_evidence) + [c.diagnosis])), c.id))
    top = ranked[:n_cdc]
    scores = {}
    for c in top:
        s = _oracle_sim(query, " ".join(sorted(c.key_evidence) + [c.diagnosis]))
        for e in c.key_evidence:
            # satisfied = descriptor words appear contiguously in some evidence text
            if not any(f" {e} " in f" {x.content} " for x in evidence):
                scores[e] = scores.get(e, 0.0) + s
    imps = {e: v / n_cdc for e, v in scores.items()}
    return imps, {e for e, v in imps.items() if v > delta}


VOCAB = ["fever", "cough", "rash", "chest pain", "night sweats", "weight loss", "ct mass", "x ray opacity", "joint pain"]
DISEASES = ["flu", "tb", "measles", "pneumonia", "arthritis"]


def _fixture(rng: random.Random):
    cases = tuple(
        CausalDiagnosticChain(f"k{i:02d}", frozenset(rng.sample(VOCAB, rng.randint(1, 4))), rng.choice(DISEASES))
        for i in range(rng.randint(1, 20))
    )
    evidence = tuple(
        Evidence(f"e{i}", EvidenceKind.SYMPTOM, c, "t") for i, c in enumerate(rng.sample(VOCAB, rng.randint(0, 4)))
    )
    hyps = tuple(Hypothesis(d, 0.4) for d in rng.sample(DISEASES, rng.randint(0, 2)))
    return cases, evidence, hyps


def test_a5_experience_formulas(crit):
    t0 = time.perf_counter()
    rng = random.Random(5)
    n_oracle = 0
    for _ in range(300):
        cases, evidence, hyps = _fixture(rng)
        n_cdc = rng.randint(1, 5)
        store = ExperienceMemory(cases=cases)
        for delta in (0.0, 0.3, 0.7, 1.0):
            cfg = RetrievalConfig(n_cdc=n_cdc, delta=delta)
            imps, expected = _oracle_proposals(evidence, hyps, cases, n_cdc, delta)
            retrieved = retrieve_cdc(evidence, hyps, store, cfg)
            for e in VOCAB:
                assert importance_score(e, evidence, retrieved, cfg) == pytest.approx(imps.get(e, 0.0), abs=1e-12)
            assert set(missing_potential_evidence(evidence, hyps, store, cfg)) == expected
            n_oracle += 1
    deltas = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0]
    for _ in range(1000):
        cases, evidence, hyps = _fixture(rng)
        store = ExperienceMemory(cases=cases)
        n_cdc = rng.randint(1, 5)
        prev = None
        for d in deltas:
            cur = set(missing_potential_evidence(evidence, hyps, store, RetrievalConfig(n_cdc=n_cdc, delta=d)))
            assert prev is None or cur <= prev
            prev = cur
        assert prev == set()
    dt = time.perf_counter() - t0
    crit("A5", f"{n_oracle} oracle fixtures, 1000 monotonicity fixtures in {dt:.2f}s")
    assert dt < 10


# ---------------------------------------------------------------------------
# A6


def test_a6_closure_guarantees(crit):
    t0 = time.perf_counter()
    cfg = SearchConfig()
    full = generate_corpus(CORPUS_SEED, 50, "full_info")
    results = run_corpus(full, RunSettings(seed=CORPUS_SEED), _store(full))
    closed = sum(
        r.closure == CLINICAL_CLOSURE and len(r.trace) <= cfg.max_steps and r.diagnosis == {c.truth.diagnosis}
        for c in full
        for r in [results[c.id]]
    )
    hard = [strip_reveals(c) for c in generate_corpus(CORPUS_SEED + 1, 50, "withheld_1")]
    results = run_corpus(hard, RunSettings(seed=CORPUS_SEED), _store(hard))
    limited = sum(r.closure == STEP_LIMIT and len(r.trace) == cfg.max_steps for r in results.values())
    violations = sum(len(check_trace(r, cfg)) for r in results.values())
    dt = time.perf_counter() - t0
    crit("A6", f"full_info closed {closed}/50, unsolvable step_limit {limited}/50, violations={violations} in {dt:.1f}s")
    assert closed == 50 and limited == 50 and violations == 0
    assert dt < 60


# ---------------------------------------------------------------------------
# A7


def test_a7_determinism(tmp_path, crit):
    cases = generate_corpus(CORPUS_SEED, 20, "withheld_2")
    store = _store(cases)
    runs = []
    for name, workers in (("serial1", 1), ("serial2", 1), ("parallel", 4)):
        out = tmp_path / name
        run_and_write(cases, RunSettings(seed=7, workers=workers), store, out)
        files = {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        runs.append(files)
    same = runs[0] == runs[1] == runs[2]
    crit("A7", f"{len(runs[0])} files byte-identical across 2 serial + 1 parallel run: {same}")
    assert same


# ---------------------------------------------------------------------------
# A8


def test_a8_iou_exhaustive(crit):
    t0 = time.perf_counter()
    universe = [f"l{i}" for i in range(10)]
    subsets = [frozenset(u for i, u in enumerate(universe) if m >> i & 1) for m in range(1024)]
    pairs = 0
    for ma, a in enumerate(subsets):
        for mb, b in enumerate(subsets):
            union = bin(ma | mb).count("1")
            expected = 1.0 if union == 0 else bin(ma & mb).count("1") / union
            assert iou(a, b) == expected
            pairs += 1
    dt = time.perf_counter() - t0
    crit("A8", f"{pairs} pairs in {dt:.2f}s")
    assert dt < 10
