"""Stage metrics, corpus aggregation and paired run comparison."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import Stage, canonical, tokens
from .env import SyntheticCase
from .orchestrator import EpisodeResult


class CaseMismatchError(ValueError):
    pass


def iou(a: Iterable[str], b: Iterable[str]) -> float:
    sa = {canonical(x) for x in a}
    sb = {canonical(x) for x in b}
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


def _finding_tokens(exam: str, text: str) -> list[str]:
    toks = tokens(text)
    head = tokens(exam)
    return toks[len(head):] if toks[: len(head)] == head else toks


def token_f1(pred: list[str], ref: list[str]) -> float:
    if not pred and not ref:
        return 1.0
    common = sum(min(pred.count(t), ref.count(t)) for t in set(pred))
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def exam_match(pred: Mapping[str, str], truth: Mapping[str, str]) -> float:
    """Mean finding-level token F1 over the union of reported and reference exams."""
    exams = sorted(set(pred) | set(truth))
    if not exams:
        return 1.0
    total = 0.0
    for exam in exams:
        if exam in pred and exam in truth:
            total += token_f1(_finding_tokens(exam, pred[exam]), _finding_tokens(exam, truth[exam]))
    return total / len(exams)


@dataclass(frozen=True)
class StageScores:
    referral_l1_acc: float
    referral_l2_iou: float
    test_iou: float
    exam_match: float
    diagnosis_correct: float
    treatment_iou: float
    average: float


METRICS: tuple[str, ...] = tuple(f.name for f in fields(StageScores))
SLOTS: tuple[str, ...] = METRICS[:-1]


def score_episode(result: EpisodeResult, case: SyntheticCase) -> StageScores:
    if result.case_id != case.id:
        raise CaseMismatchError(f"result for {result.case_id!r} scored against case {case.id!r}")
    out = result.final_memory.outputs
    level1, level2 = case.truth_referral
    referral = out.get(Stage.SPECIALTY_REFERRAL)
    if referral is None:
        l1, l2 = 0.0, 0.0
    else:
        l1 = float(canonical(referral["level1"]) == level1)
        l2 = iou(referral.get("level2", []), level2)
    tests = iou(out[Stage.TEST_ORDERING], case.truth_tests) if Stage.TEST_ORDERING in out else 0.0
    exams = exam_match(out[Stage.EXAMINATION], case.truth_findings) if Stage.EXAMINATION in out else 0.0
    diagnosis = float(set(result.diagnosis) == {case.truth.diagnosis})
    treatment = iou(result.treatment, case.truth.plan) if Stage.TREATMENT in out else 0.0
    slots = (l1, l2, tests, exams, diagnosis, treatment)
    return StageScores(*slots, average=sum(slots) / len(slots))


def corpus_summary(scores: Mapping[str, StageScores]) -> dict[str, Any]:
    n = len(scores)
    means = {m: (sum(getattr(s, m) for s in scores.values()) / n if n else 0.0) for m in METRICS}
    return {"cases": n, "means": means}


def scores_csv(scores: Mapping[str, StageScores]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("case_id",) + METRICS)
    for cid in sorted(scores):
        s = scores[cid]
        w.writerow([cid] + [repr(float(getattr(s, m))) for m in METRICS])
    return buf.getvalue()


def write_scores(directory: str | Path, scores: Mapping[str, StageScores], name: str = "scores") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.csv").write_text(scores_csv(scores), encoding="utf-8")
    (d / f"{name}_summary.json").write_text(
        json.dumps(corpus_summary(scores), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_scores(path: str | Path) -> dict[str, StageScores]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["case_id"]: StageScores(**{m: float(r[m]) for m in METRICS}) for r in rows}


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    baseline: float
    variant: float
    delta: float
    wins: int
    ties: int
    losses: int


def compare_runs(baseline: Mapping[str, StageScores], variant: Mapping[str, StageScores]) -> list[MetricDelta]:
    """Per-metric mean delta (variant minus baseline) and per-case win counts."""
    if set(baseline) != set(variant):
        raise CaseMismatchError("runs cover different case sets")
    ids = sorted(baseline)
    n = len(ids)
    rows = []
    for m in METRICS:
        b = [getattr(baseline[c], m) for c in ids]
        v = [getattr(variant[c], m) for c in ids]
        mb = sum(b) / n if n else 0.0
        mv = sum(v) / n if n else 0.0
        rows.append(
            MetricDelta(
                m, mb, mv, mv - mb,
                wins=sum(y > x for x, y in zip(b, v)),
                ties=sum(y == x for x, y in zip(b, v)),
                losses=sum(y < x for x, y in zip(b, v)),
            )
        )
    return rows


def delta_table(rows: list[MetricDelta], baseline_name: str = "baseline", variant_name: str = "variant") -> str:
    lines = [
        f"| metric | {baseline_name} | {variant_name} | delta | wins | ties | losses |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.metric} | {r.baseline:.4f} | {r.variant:.4f} | {r.delta:+.4f} | {r.wins} | {r.ties} | {r.losses} |"
        )
    return "\n".join(lines) + "\n"


def scores_to_dict(s: StageScores) -> dict[str, float]:
    return asdict(s)
