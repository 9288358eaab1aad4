import json


from clinorch.cli import main


def _gen(tmp_path, *extra):
    out = tmp_path / "gen"
    assert main(["generate", "--seed", "4", "--out", str(out), *extra]) == 0
    return out


def test_generate_counts_and_idempotent(tmp_path, capsys):
    out = _gen(tmp_path, "--count", "10")
    files = sorted(p.name for p in (out / "cases").iterdir())
    assert len(files) == 10 and (out / "cdc_store.jsonl").is_file()
    before = {p.name: p.read_bytes() for p in (out / "cases").iterdir()}
    store = (out / "cdc_store.jsonl").read_bytes()
    _gen(tmp_path, "--count", "10")
    assert before == {p.name: p.read_bytes() for p in (out / "cases").iterdir()}
    assert store == (out / "cdc_store.jsonl").read_bytes()


def test_generate_empty(tmp_path):
    out = _gen(tmp_path, "--count", "0")
    assert list((out / "cases").iterdir()) == []
    assert (out / "cdc_store.jsonl").read_text() == ""


def _run(tmp_path, gen, name, *extra):
    out = tmp_path / name
    code = main(["run", "--corpus", str(gen / "cases"), "--store", str(gen / "cdc_store.jsonl"),
                 "--out", str(out), *extra])
    return code, out


def test_single_case_run_scores_one(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "1")
    code, out = _run(tmp_path, gen, "run")
    assert code == 0
    summary = json.loads((out / "scores_summary.json").read_text())
    assert summary["means"]["average"] == 1.0
    assert len(list((out / "traces").iterdir())) == 1


def test_no_backtrack_scores_lower(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "12", "--difficulty", "withheld_1")
    _, full = _run(tmp_path, gen, "full")
    _, nobt = _run(tmp_path, gen, "nobt", "--no-backtrack")
    avg = lambda d: json.loads((d / "scores_summary.json").read_text())["means"]["average"]
    assert avg(nobt) < avg(full)


def test_missing_store_reports_path(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "1")
    code = main(["run", "--corpus", str(gen / "cases"), "--store", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "o")])
    assert code != 0
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["error"] == "store-missing" and doc["path"].endswith("nope.jsonl")


def test_bad_config_rejected(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "1")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"search": {"top_k": 0}}))
    code, _ = _run(tmp_path, gen, "o", "--config", str(cfg))
    assert code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config-invalid"


def test_flags_override_config(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "2", "--difficulty", "withheld_1")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "no_backtrack": False, "search": {"lambda": 0.5}}))
    code, out = _run(tmp_path, gen, "o", "--config", str(cfg), "--no-backtrack")
    assert code == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["flags"]["no_backtrack"] is True


def test_ablate_lattice_and_dedup(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "6", "--difficulty", "withheld_1")
    args = ["ablate", "--corpus", str(gen / "cases"), "--store", str(gen / "cdc_store.jsonl")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    a = tmp_path / "a"
    assert sorted(p.name for p in a.glob("*/scores.csv")) == ["scores.csv"] * 4
    assert sorted(p.name for p in a.glob("deltas_*.md")) == ["deltas_all.md", "deltas_memory.md", "deltas_orchestrator.md"]
    assert json.loads((a / "ablation.json").read_text())["runs"] == 4
    assert main(args + ["--out", str(tmp_path / "b"), "--no-backtrack"]) == 0
    assert json.loads((tmp_path / "b" / "ablation.json").read_text())["runs"] == 3
    assert main(args + ["--out", str(tmp_path / "c")]) == 0
    for name in ("deltas_all.md", "deltas_memory.md", "deltas_orchestrator.md"):
        assert (a / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_score_reproduces_run(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "3", "--difficulty", "withheld_1")
    _, out = _run(tmp_path, gen, "run")
    assert main(["score", "--traces", str(out / "traces"), "--corpus", str(gen / "cases"),
                 "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "scores.csv").read_bytes() == (out / "scores.csv").read_bytes()


def test_run_does_not_touch_inputs(tmp_path, capsys):
    gen = _gen(tmp_path, "--count", "3")
    snap = {p: p.read_bytes() for p in gen.rglob("*") if p.is_file()}
    _run(tmp_path, gen, "run")
    assert snap == {p: p.read_bytes() for p in gen.rglob("*") if p.is_file()}
