"""Seeded synthetic clinical cases with withheld evidence.

A case is drawn from the disease catalog. Part of its key evidence is shown
at episode start; the rest is withheld and only comes back through a
targeted query at the right stage (history questions at referral, the
matching exam at examination). Withholding is what makes backtracking pay.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .core import Evidence, EvidenceKind, Stage, WorkingMemory, canonical
from .memory import CausalDiagnosticChain, GuidelineChunk, update_working_memory
from .vocab import DiseaseProfile, disease_catalog, exam_of, finding_text

_DIFFICULTY_RE = re.compile(r"^withheld_(\d+)$")


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    raw = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "big") >> 1


def parse_difficulty(difficulty: str) -> int:
    """Number of withheld items for ``full_info`` / ``withheld_k``."""
    if difficulty == "full_info":
        return 0
    m = _DIFFICULTY_RE.match(difficulty)
    if not m:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    return int(m.group(1))


@dataclass(frozen=True)
class RevealTag:
    stage: Stage
    query: str

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "query", canonical(self.query))


@dataclass(frozen=True)
class WithheldItem:
    descriptor: str
    kind: EvidenceKind
    reveal: RevealTag | None


def evidence_content(descriptor: str) -> str:
    exam = exam_of(descriptor)
    if exam is None:
        return descriptor
    finding = " ".join(descriptor.split()[len(exam.split()) :])
    return finding_text(exam, finding)


def reveal_tag_for(descriptor: str) -> RevealTag:
    exam = exam_of(descriptor)
    if exam is None:
        return RevealTag(Stage.SPECIALTY_REFERRAL, descriptor)
    return RevealTag(Stage.EXAMINATION, exam)


@dataclass(frozen=True)
class SyntheticCase:
    id: str
    truth: CausalDiagnosticChain
    kinds: dict[str, EvidenceKind]
    presented: tuple[str, ...]
    withheld: tuple[WithheldItem, ...]
    truth_referral: tuple[str, frozenset[str]]
    truth_tests: frozenset[str]
    truth_findings: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    difficulty: str = "full_info"

    def __post_init__(self):
        shown = set(self.presented)
        hidden = {w.descriptor for w in self.withheld}
        if shown & hidden:
            raise ValueError(f"{self.id}: presented and withheld overlap")
        if shown | hidden != set(self.truth.key_evidence):
            raise ValueError(f"{self.id}: presented and withheld must partition key evidence")

    def to_dict(self) -> dict[str, Any]:
        level1, level2 = self.truth_referral
        return {
            "id": self.id,
            "seed": self.seed,
            "difficulty": self.difficulty,
            "truth": self.truth.to_dict(),
            "kinds": {d: self.kinds[d].value for d in sorted(self.kinds)},
            "presented": list(self.presented),
            "withheld": [
                {
                    "descriptor": w.descriptor,
                    "kind": w.kind.value,
                    "reveal": None
                    if w.reveal is None
                    else {"stage": w.reveal.stage.value, "query": w.reveal.query},
                }
                for w in self.withheld
            ],
            "truth_referral": {"level1": level1, "level2": sorted(level2)},
            "truth_tests": sorted(self.truth_tests),
            "truth_findings": {k: self.truth_findings[k] for k in sorted(self.truth_findings)},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SyntheticCase:
        return cls(
            id=d["id"],
            truth=CausalDiagnosticChain.from_dict(d["truth"]),
            kinds={k: EvidenceKind(v) for k, v in d["kinds"].items()},
            presented=tuple(d["presented"]),
            withheld=tuple(
                WithheldItem(
                    w["descriptor"],
                    EvidenceKind(w["kind"]),
                    None if w["reveal"] is None else RevealTag(Stage(w["reveal"]["stage"]), w["reveal"]["query"]),
                )
                for w in d["withheld"]
            ),
            truth_referral=(d["truth_referral"]["level1"], frozenset(d["truth_referral"]["level2"])),
            truth_tests=frozenset(d["truth_tests"]),
            truth_findings=dict(d["truth_findings"]),
            seed=int(d.get("seed", 0)),
            difficulty=d.get("difficulty", "full_info"),
        )


def _case_from_profile(
    case_id: str, profile: DiseaseProfile, withheld: set[str], seed: int, difficulty: str
) -> SyntheticCase:
    descriptors = [d for d, _ in profile.key_evidence]
    kinds = dict(profile.key_evidence)
    findings = {}
    for d in descriptors:
        exam = exam_of(d)
        if exam is not None:
            findings[exam] = evidence_content(d)
    return SyntheticCase(
        id=case_id,
        truth=CausalDiagnosticChain(case_id, frozenset(descriptors), profile.disease, profile.plan),
        kinds=kinds,
        presented=tuple(d for d in descriptors if d not in withheld),
        withheld=tuple(WithheldItem(d, kinds[d], reveal_tag_for(d)) for d in descriptors if d in withheld),
        truth_referral=(profile.level1, profile.level2),
        truth_tests=profile.tests,
        truth_findings=findings,
        seed=seed,
        difficulty=difficulty,
    )


def generate_case(seed: int, difficulty: str = "full_info") -> SyntheticCase:
    k = parse_difficulty(difficulty)
    rng = random.Random(derive_seed("case", seed))
    catalog = disease_catalog()
    profile = catalog[rng.randrange(len(catalog))]
    descriptors = [d for d, _ in profile.key_evidence]
    if k > len(descriptors):
        raise ValueError(f"cannot withhold {k} of {len(descriptors)} key evidence items")
    withheld = set(rng.sample(descriptors, k))
    case = _case_from_profile(f"case-{seed}", profile, withheld, seed, difficulty)
    tags = [w.reveal for w in case.withheld]
    assert len(tags) == len(set(tags)), "reveal tags must be unique within a case"
    return case


def strip_reveals(case: SyntheticCase) -> SyntheticCase:
    """Unsolvable variant: withheld items can no longer be revealed by any query."""
    return replace(
        case,
        withheld=tuple(replace(w, reveal=None) for w in case.withheld),
        difficulty=f"{case.difficulty}+unsolvable",
    )


def answer_query(case: SyntheticCase, stage: Stage, query: str) -> Evidence | None:
    stage = Stage(stage)
    query = canonical(query)
    for i, w in enumerate(case.withheld):
        if w.reveal is not None and w.reveal.stage is stage and w.reveal.query == query:
            return Evidence(
                id=f"{case.id}/w{i}",
                kind=w.kind,
                content=evidence_content(w.descriptor),
                source=f"query:{stage.value}:{query}",
            )
    return None


def initial_memory(case: SyntheticCase) -> WorkingMemory:
    presented = [
        Evidence(
            id=f"{case.id}/p{i}",
            kind=case.kinds[d],
            content=evidence_content(d),
            source="perceive",
            step=0,
        )
        for i, d in enumerate(case.presented)
    ]
    return update_working_memory(WorkingMemory(case_id=case.id), presented, ())


class CaseEnvironment:
    """Query/reveal surface plus the ground-truth channel read by scripted agents."""

    def __init__(self, case: SyntheticCase):
        self.case = case

    def initial_memory(self) -> WorkingMemory:
        return initial_memory(self.case)

    def answer_query(self, stage: Stage, query: str) -> Evidence | None:
        return answer_query(self.case, stage, query)


# ---------------------------------------------------------------------------
# Corpus files


def generate_corpus(seed: int, count: int, difficulty: str = "full_info") -> list[SyntheticCase]:
    cases = [generate_case(derive_seed("corpus", seed, i), difficulty) for i in range(count)]
    ids = [c.id for c in cases]
    if len(ids) != len(set(ids)):
        raise RuntimeError("case id collision in generated corpus")
    return cases


def guideline_chunks() -> list[GuidelineChunk]:
    """One guideline chunk per catalog disease."""
    chunks = []
    for i, p in enumerate(disease_catalog()):
        interview = [d for d, _ in p.key_evidence if exam_of(d) is None]
        findings = [evidence_content(d) for d, _ in p.key_evidence if exam_of(d) is not None]
        text = (
            f"{p.disease}. typical presentation: {', '.join(interview)}. "
            f"confirm with {', '.join(sorted(p.tests))}; expected findings: {'; '.join(findings)}. "
            f"first line management: {', '.join(sorted(p.plan))}."
        )
        chunks.append(GuidelineChunk(f"guide-{i:03d}", text, (p.disease, p.level1)))
    return chunks


def write_case(path: str | Path, case: SyntheticCase) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_case(path: str | Path) -> SyntheticCase:
    return SyntheticCase.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_corpus(directory: str | Path) -> list[SyntheticCase]:
    return [read_case(p) for p in sorted(Path(directory).glob("*.json"))]
