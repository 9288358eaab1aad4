import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from clinorch.agents import (
    AgentPool,
    AgentResponse,
    AgentTask,
    DiagnosisAgent,
    RemoteAgent,
    RemoteTransportError,
    TestOrderingAgent,
    UnknownAgentError,
    VocabularyError,
    validate_response,
)
from clinorch.core import Evidence, EvidenceKind, HypothesisStatus, Stage
from clinorch.env import CaseEnvironment, generate_case, initial_memory
from clinorch.evaluation import iou
from clinorch.memory import DuplicateEvidenceError

from conftest import ev, hyp, memory


def test_diagnosis_confirms_with_all_key_evidence():
    case = generate_case(5, "full_info")
    env = CaseEnvironment(case)
    resp = DiagnosisAgent().respond(AgentTask(Stage.DIAGNOSIS, initial_memory(case)), env)
    [h] = resp.new_hypotheses
    assert h.confidence == 1.0 and h.status is HypothesisStatus.CONFIRMED
    assert resp.stage_output == [case.truth.diagnosis]


def test_diagnosis_stays_open_when_evidence_withheld():
    case = generate_case(5, "withheld_1")
    resp = DiagnosisAgent().respond(AgentTask(Stage.DIAGNOSIS, initial_memory(case)), CaseEnvironment(case))
    [h] = resp.new_hypotheses
    assert h.status is HypothesisStatus.OPEN and h.confidence < 0.7
    assert h.missing == (case.withheld[0].descriptor,)
    assert resp.stage_output == []


def test_ordering_follows_declared_need():
    m = memory("fever", hypotheses=(hyp("x", missing=("ultrasound result",)),))
    resp = TestOrderingAgent().respond(AgentTask(Stage.TEST_ORDERING, m), None)
    assert "ultrasound" in resp.stage_output


def test_off_plan_treatment_accepted_but_scores_zero():
    resp = validate_response(AgentResponse(stage_output=["Gene therapy"]), Stage.TREATMENT)
    assert resp.stage_output == ["gene therapy"]
    assert iou(resp.stage_output, {"drug therapy"}) == 0.0


def test_validate_examples():
    assert validate_response(AgentResponse(), Stage.TREATMENT) == AgentResponse()
    with pytest.raises(VocabularyError):
        validate_response(AgentResponse(stage_output=["aromatherapy"]), Stage.TREATMENT)
    assert validate_response(AgentResponse(stage_output=["Drug Therapy"]), Stage.TREATMENT).stage_output == ["drug therapy"]
    with pytest.raises(VocabularyError):
        validate_response(AgentResponse(stage_output=["tarot"]), Stage.TEST_ORDERING)


def test_validate_requires_fresh_evidence_ids():
    m = memory("fever")
    with pytest.raises(DuplicateEvidenceError):
        validate_response(AgentResponse(new_evidence=(ev("e0", "again"),)), Stage.EXAMINATION, m)


def test_scripted_agents_deterministic():
    case = generate_case(11, "withheld_2")
    env = CaseEnvironment(case)
    pool = AgentPool.scripted()
    m = initial_memory(case)
    for stage in Stage:
        task = AgentTask(stage, m)
        aid = pool.default_for(stage)
        assert pool.invoke(aid, task, env) == pool.invoke(aid, task, env)


def test_unknown_agent():
    with pytest.raises(UnknownAgentError):
        AgentPool.scripted().invoke("ghost", AgentTask(Stage.DIAGNOSIS, memory()), None)


def test_wire_round_trip():
    case = generate_case(2, "full_info")
    task = AgentTask(Stage.EXAMINATION, initial_memory(case))
    assert AgentTask.from_dict(json.loads(json.dumps(task.to_dict()))) == task
    resp = AgentResponse(
        (Evidence("n", EvidenceKind.LAB_RESULT, "x", "s", 1, False),),
        (hyp("flu", 0.9, status=HypothesisStatus.CONFIRMED),),
        ["flu"],
    )
    assert AgentResponse.from_dict(json.loads(json.dumps(resp.to_dict()))) == resp


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.seen.append(body)
        out = json.dumps({"new_evidence": [], "new_hypotheses": [], "stage_output": ["Drug Therapy"]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    srv.seen = []
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_remote_agent_round_trip(server):
    url = f"http://127.0.0.1:{server.server_address[1]}/"
    pool = AgentPool()
    pool.register(RemoteAgent("remote-tx", Stage.TREATMENT, url, timeout=5))
    task = AgentTask(Stage.TREATMENT, memory("fever"))
    resp = pool.invoke("remote-tx", task, None)
    assert resp.stage_output == ["drug therapy"]
    [sent] = server.seen
    assert sent["agent_id"] == "remote-tx"
    assert AgentTask.from_dict(sent) == task


def test_remote_agent_transport_failure():
    agent = RemoteAgent("r", Stage.TREATMENT, "http://127.0.0.1:9/", timeout=0.5, retries=1, backoff=0.0)
    with pytest.raises(RemoteTransportError):
        agent.respond(AgentTask(Stage.TREATMENT, memory()))
