import json
import os

import pytest

from apifuzz.bookshop import bookshop_spec_document
from apifuzz.bookshop.server import serve
from apifuzz.cli import main

from conftest import minimal_spec_doc


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "bookshop.json"
    path.write_bytes(bookshop_spec_document())
    return str(path)


@pytest.fixture
def clean_server():
    server = serve(port=0)
    yield server
    server.stop()


def run_cli(*argv):
    return main(list(argv))


# --- model -------------------------------------------------------------------------

def test_model_writes_golden_edges(spec_file, tmp_path, capsys):
    out = str(tmp_path / "model.json")
    assert run_cli("model", spec_file, "--out", out) == 0
    doc = json.loads(open(out).read())
    edges = {(e["dependent"], e["prerequisite"]) for e in doc["edges"]}
    assert edges == {("book", "author"), ("order", "customer"),
                     ("order", "book")}
    assert "model written" in capsys.readouterr().out


def test_model_strict_fails_on_error_grade_lint(tmp_path):
    spec = tmp_path / "orphan.json"
    spec.write_bytes(minimal_spec_doc({
        "/orders/{orderId}": {
            "parameters": [{"name": "orderId", "in": "path", "required": True,
                            "schema": {"type": "string"}}],
            "get": {"responses": {
                "200": {"description": "ok", "content": {"application/json": {
                    "schema": {"type": "object", "properties": {
                        "status": {"type": "string"}}}}}},
                "404": {"description": "gone"}}},
        },
    }))
    out = str(tmp_path / "model.json")
    assert run_cli("model", str(spec), "--out", out) == 0
    assert run_cli("model", str(spec), "--out", out, "--strict") == 1


def test_model_overrides_add_user_edge(spec_file, tmp_path):
    overrides = tmp_path / "overrides.json"
    overrides.write_text(json.dumps({"edges": [
        {"dependent": "book", "prerequisite": "customer",
         "via_parameter": "customerId"}]}))
    out = str(tmp_path / "model.json")
    assert run_cli("model", spec_file, "--out", out,
                   "--overrides", str(overrides)) == 0
    doc = json.loads(open(out).read())
    added = [e for e in doc["edges"] if e["prerequisite"] == "customer"
             and e["dependent"] == "book"]
    assert added and added[0]["provenance"] == "user-edited"


def test_model_json_output(spec_file, tmp_path, capsys):
    out = str(tmp_path / "model.json")
    assert run_cli("model", spec_file, "--out", out, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["edges"] == 3 and payload["findings"] == []


def test_model_rejects_unparseable_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run_cli("model", str(bad), "--out", str(tmp_path / "m.json")) == 1


# --- fuzz --------------------------------------------------------------------------

def test_fuzz_clean_run_exits_zero(spec_file, clean_server, tmp_path, capsys):
    trace = str(tmp_path / "trace.jsonl")
    report = str(tmp_path / "report.json")
    code = run_cli("fuzz", spec_file, "--endpoint", clean_server.base_url,
                   "--max-requests", "150", "--seed", "3",
                   "--trace", trace, "--report", report)
    assert code == 0
    assert os.path.exists(trace) and os.path.exists(report)
    payload = json.loads(open(report).read())
    assert payload["run"]["verdict"] == "passed"
    assert payload["run"]["counters"]["requests_sent"] == 150
    assert "verdict: passed" in capsys.readouterr().out


def test_fuzz_with_seeded_bug_exits_one_and_names_kind(spec_file, tmp_path):
    server = serve(port=0, toggles=["get-missing-customer-500"])
    try:
        report = str(tmp_path / "report.json")
        code = run_cli("fuzz", spec_file, "--endpoint", server.base_url,
                       "--duration", "60", "--seed", "1", "--stop-on-error",
                       "--trace", str(tmp_path / "t.jsonl"),
                       "--report", report)
        assert code == 1
        payload = json.loads(open(report).read())
        kinds = {f["kind"] for f in payload["run"]["findings"]}
        assert "server-error-5xx" in kinds
    finally:
        server.stop()


def test_fuzz_unreachable_endpoint_exits_two(spec_file, tmp_path):
    code = run_cli("fuzz", spec_file, "--endpoint", "http://127.0.0.1:9",
                   "--max-requests", "5",
                   "--trace", str(tmp_path / "t.jsonl"),
                   "--report", str(tmp_path / "r.json"))
    assert code == 2


def test_fuzz_concurrent_exercises_concurrency(spec_file, clean_server,
                                               tmp_path):
    report = str(tmp_path / "report.json")
    code = run_cli("fuzz", spec_file, "--endpoint", clean_server.base_url,
                   "--mode", "concurrent", "--max-in-flight", "8",
                   "--max-requests", "400", "--seed", "2",
                   "--trace", str(tmp_path / "t.jsonl"), "--report", report)
    assert code == 0
    payload = json.loads(open(report).read())
    assert payload["run"]["counters"]["peak_in_flight"] > 1


def test_fuzz_config_file_with_flag_overrides(spec_file, clean_server,
                                              tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "endpoint": "http://example.invalid",  # overridden by the flag
        "master_seed": 9,
        "max_requests": 60,
        "weights": {"per_method": {"PUT": 3.0}},
        "mixture": {"invalid_typed": 0.0},
    }))
    report = str(tmp_path / "report.json")
    code = run_cli("fuzz", spec_file, "--config", str(config),
                   "--endpoint", clean_server.base_url,
                   "--trace", str(tmp_path / "t.jsonl"), "--report", report)
    assert code == 0
    payload = json.loads(open(report).read())
    assert payload["run"]["counters"]["requests_sent"] == 60


# --- minimize + replay ---------------------------------------------------------------

@pytest.fixture
def failing_trace(spec_file, tmp_path):
    server = serve(port=0, toggles=["delete-customer-500"])
    trace = str(tmp_path / "fail.jsonl")
    try:
        code = run_cli("fuzz", spec_file, "--endpoint", server.base_url,
                       "--duration", "60", "--seed", "1", "--stop-on-error",
                       "--trace", trace,
                       "--report", str(tmp_path / "r.json"))
        assert code == 1
        yield server, trace
    finally:
        server.stop()


def test_minimize_and_replay_round_trip(failing_trace, tmp_path, capsys):
    server, trace = failing_trace
    script_path = str(tmp_path / "recreate.json")
    code = run_cli("minimize", "--trace", trace,
                   "--endpoint", server.base_url, "--out", script_path)
    assert code == 0
    out = capsys.readouterr().out
    assert "minimized" in out and "oracle calls" in out
    script = json.loads(open(script_path).read())
    assert script["script_version"] == 1
    assert len(script["steps"]) <= 3

    # replay against a fresh fixture with randomized ids: reproduced
    buggy = serve(port=0, toggles=["delete-customer-500"], randomize_ids=True)
    try:
        assert run_cli("replay", "--script", script_path,
                       "--endpoint", buggy.base_url) == 0
    finally:
        buggy.stop()

    # with the bug fixed: not reproduced
    fixed = serve(port=0, randomize_ids=True)
    try:
        assert run_cli("replay", "--script", script_path,
                       "--endpoint", fixed.base_url) == 1
    finally:
        fixed.stop()


def test_minimize_not_reproducible_exits_three(failing_trace, tmp_path):
    _, trace = failing_trace
    clean = serve(port=0)  # bug absent: the oracle can never reproduce
    try:
        code = run_cli("minimize", "--trace", trace,
                       "--endpoint", clean.base_url,
                       "--out", str(tmp_path / "s.json"))
        assert code == 3
    finally:
        clean.stop()


def test_replay_malformed_script_exits_two(tmp_path, clean_server):
    bad = tmp_path / "bad.json"
    bad.write_text("{definitely not a script")
    assert run_cli("replay", "--script", str(bad),
                   "--endpoint", clean_server.base_url) == 2


# --- report ------------------------------------------------------------------------

def test_report_and_minimize_reject_unreadable_trace(tmp_path, capsys):
    assert run_cli("report", "--trace", str(tmp_path / "missing.jsonl")) == 2
    assert run_cli("minimize", "--trace", str(tmp_path / "missing.jsonl"),
                   "--endpoint", "http://127.0.0.1:9") == 2
    capsys.readouterr()


def test_report_summarizes_trace(spec_file, clean_server, tmp_path, capsys):
    trace = str(tmp_path / "trace.jsonl")
    run_cli("fuzz", spec_file, "--endpoint", clean_server.base_url,
            "--max-requests", "80", "--seed", "4", "--trace", trace,
            "--report", str(tmp_path / "r.json"))
    capsys.readouterr()
    assert run_cli("report", "--trace", trace) == 0
    out = capsys.readouterr().out
    assert "80 events" in out and "status distribution" in out

    assert run_cli("report", "--trace", trace, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["events"] == 80
    assert payload["findings"] == {}
