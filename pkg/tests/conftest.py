from __future__ import annotations

from clinorch.core import Evidence, EvidenceKind, Hypothesis, HypothesisStatus, WorkingMemory
from clinorch.memory import update_working_memory


def ev(eid: str, content: str, kind: EvidenceKind = EvidenceKind.SYMPTOM, present: bool = True) -> Evidence:
    return Evidence(eid, kind, content, "test", 0, present)


def memory(*contents: str, hypotheses: tuple[Hypothesis, ...] = (), case_id: str = "c") -> WorkingMemory:
    evidence = [ev(f"e{i}", c) for i, c in enumerate(contents)]
    return update_working_memory(WorkingMemory(case_id=case_id), evidence, hypotheses)


def hyp(disease: str, confidence: float = 0.4, missing: tuple[str, ...] = (),
        status: HypothesisStatus = HypothesisStatus.OPEN, supporting: frozenset[str] = frozenset()) -> Hypothesis:
    return Hypothesis(disease, confidence, supporting, missing, status)


# acceptance criteria report one line each in the terminal summary
_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit:
        _CRITERIA[crit] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        status, detail = _CRITERIA[crit]
        terminalreporter.write_line(f"{crit} {status} {detail}".rstrip())
