"""Closed vocabularies shipped in ``data/`` and the synthetic disease catalog."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .core import EvidenceKind, canonical, tokens


def _load(name: str) -> dict:
    return json.loads(resources.files("clinorch").joinpath("data").joinpath(name).read_text(encoding="utf-8"))


_VOCAB = _load("vocabulary.json")

VOCAB_VERSION: str = _VOCAB["version"]
PHYSICAL_EXAMS: tuple[str, ...] = tuple(canonical(x) for x in _VOCAB["physical_exams"])
IMAGING_EXAMS: tuple[str, ...] = tuple(canonical(x) for x in _VOCAB["imaging_exams"])
LAB_EXAMS: tuple[str, ...] = tuple(canonical(x) for x in _VOCAB["lab_exams"])
EXAMS: frozenset[str] = frozenset(PHYSICAL_EXAMS + IMAGING_EXAMS + LAB_EXAMS)
TREATMENTS: frozenset[str] = frozenset(canonical(x) for x in _VOCAB["treatments"])

assert len(TREATMENTS) == 11

# longest exams first so "nuclear medicine imaging" wins over any shorter prefix
_EXAM_TOKENS = sorted(((tuple(tokens(e)), e) for e in EXAMS), key=lambda te: -len(te[0]))


def exam_of(descriptor: str) -> str | None:
    """Exam label a descriptor starts with, or None for interview items."""
    toks = tuple(tokens(descriptor))
    for etoks, exam in _EXAM_TOKENS:
        if toks[: len(etoks)] == etoks:
            return exam
    return None


def exam_kind(exam: str) -> EvidenceKind:
    exam = canonical(exam)
    if exam in PHYSICAL_EXAMS:
        return EvidenceKind.PHYSICAL_EXAM
    if exam in IMAGING_EXAMS:
        return EvidenceKind.IMAGING_FINDING
    if exam in LAB_EXAMS:
        return EvidenceKind.LAB_RESULT
    raise KeyError(f"not an exam label: {exam!r}")


def finding_text(exam: str, finding: str) -> str:
    return f"{exam}: {finding} present"


def negative_finding_text(descriptor: str) -> str:
    exam = exam_of(descriptor)
    if exam is None:
        return f"{descriptor}: not reported"
    rest = " ".join(descriptor.split()[len(exam.split()) :])
    return f"{exam}: {rest} not found"


@dataclass(frozen=True)
class DiseaseProfile:
    disease: str
    level1: str
    level2: frozenset[str]
    # descriptor -> evidence kind, in catalog order
    key_evidence: tuple[tuple[str, EvidenceKind], ...]
    plan: frozenset[str]

    @property
    def tests(self) -> frozenset[str]:
        return frozenset(e for d, _ in self.key_evidence if (e := exam_of(d)) is not None)


@lru_cache(maxsize=None)
def disease_catalog() -> tuple[DiseaseProfile, ...]:
    profiles = []
    for d in _load("diseases.json")["diseases"]:
        items = [(canonical(s), EvidenceKind.SYMPTOM) for s in d["symptoms"]]
        items.append((canonical(d["history"]), EvidenceKind.HISTORY))
        for slot, kind in (
            ("physical", EvidenceKind.PHYSICAL_EXAM),
            ("lab", EvidenceKind.LAB_RESULT),
            ("imaging", EvidenceKind.IMAGING_FINDING),
        ):
            exam, finding = d[slot]
            items.append((canonical(f"{exam} {finding}"), kind))
        profile = DiseaseProfile(
            disease=canonical(d["disease"]),
            level1=canonical(d["level1"]),
            level2=frozenset(canonical(x) for x in d["level2"]),
            key_evidence=tuple(items),
            plan=frozenset(canonical(p) for p in d["plan"]),
        )
        for desc, kind in profile.key_evidence:
            is_exam = exam_of(desc) is not None
            if is_exam != (kind not in (EvidenceKind.SYMPTOM, EvidenceKind.HISTORY)):
                raise ValueError(f"{profile.disease}: descriptor {desc!r} misclassified")
        if not profile.plan <= TREATMENTS:
            raise ValueError(f"{profile.disease}: plan outside treatment vocabulary")
        profiles.append(profile)
    return tuple(profiles)
