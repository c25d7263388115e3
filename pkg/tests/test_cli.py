import filecmp
import json
import socket

import httpx
import pytest

from recprompt import cli

SMALL = ["--n-validation", "20", "--n-test", "40", "--l", "3"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_ingest(tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--run-dir", str(tmp_path))
    assert code == 0
    summary = json.loads((tmp_path / "ingest.json").read_text())
    assert summary["articles"] == 40 and summary["excluded_impressions"] == 5
    assert "impressions" in out


def test_sample_writes_manifest(tmp_path, capsys):
    code, _, _ = run(capsys, "sample", "--run-dir", str(tmp_path), "--seed", "3")
    manifest = json.loads((tmp_path / "split.json").read_text())
    assert code == 0 and manifest["seed"] == 3
    assert len(manifest["validation"]) == 100 and len(manifest["test"]) == 400


def test_sample_too_many_users(tmp_path, capsys):
    code, _, err = run(capsys, "sample", "--run-dir", str(tmp_path), "--n-test", "5000")
    assert code == 2
    assert len(err.strip().splitlines()) == 1 and "available" in err


def test_tune_evaluate_baseline(tmp_path, capsys):
    rd = str(tmp_path)
    code, out, _ = run(capsys, "tune", "--run-dir", rd, *SMALL)
    assert code == 0 and "best template" in out
    assert len((tmp_path / "iterations.jsonl").read_text().splitlines()) == 4

    code, out, _ = run(capsys, "evaluate", "--run-dir", rd, "--template", "best", "--repeats", "3")
    assert code == 0 and "±0.00" in out
    test_report = json.loads((tmp_path / "test_report.json").read_text())
    runs = test_report["runs"]
    assert len(runs) == 3 and runs[0] == runs[1] == runs[2]
    assert "test" in json.loads((tmp_path / "report.json").read_text())

    code, out, _ = run(capsys, "baseline", "--run-dir", rd, "--which", "topicpop")
    assert code == 0 and "TopicPop" in out
    data = json.loads((tmp_path / "baselines" / "topicpop.json").read_text())
    assert len(data["rankings"]) == 40
    assert all(sorted(r["ranking"]) == list(range(1, 11)) for r in data["rankings"])
    assert (tmp_path / "baselines" / "popularity.json").exists()


def test_evaluate_initial_template(tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--run-dir", str(tmp_path), "--template", "initial-cot",
                       "--repeats", "1", "--n-test", "30")
    assert code == 0 and "initial-CoT" in out


def test_evaluate_best_without_run(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--run-dir", str(tmp_path))
    assert code == 1 and "tune" in err


def test_replay_without_cache(tmp_path, capsys):
    code, _, err = run(capsys, "tune", "--run-dir", str(tmp_path), "--backend", "replay")
    assert code == 2 and len(err.strip().splitlines()) == 1


def test_live_without_key(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("RECPROMPT_API_KEY", raising=False)
    code, _, err = run(capsys, "tune", "--run-dir", str(tmp_path), "--backend", "live")
    assert code == 2 and "RECPROMPT_API_KEY" in err


def test_bad_config_value(tmp_path, capsys):
    code, _, err = run(capsys, "tune", "--run-dir", str(tmp_path), "--l", "-2")
    assert code == 2 and err.startswith("recprompt: configuration error")


def test_replay_miss_is_reported(tmp_path, capsys):
    run(capsys, "tune", "--run-dir", str(tmp_path / "a"), *SMALL)
    code, _, err = run(capsys, "tune", "--run-dir", str(tmp_path / "b"), "--backend", "replay",
                       "--cache", str(tmp_path / "a" / "cache.jsonl"), "--n-validation", "25", "--l", "3")
    assert code == 1 and "cache miss" in err


def test_cache_stats_and_export(tmp_path, capsys):
    run(capsys, "tune", "--run-dir", str(tmp_path), *SMALL)
    code, out, _ = run(capsys, "cache", "stats", "--run-dir", str(tmp_path))
    assert code == 0 and "entries" in out
    export = tmp_path / "export.jsonl"
    code, _, _ = run(capsys, "cache", "export", "--run-dir", str(tmp_path), "--out", str(export))
    keys = [json.loads(line)["key"] for line in export.read_text().splitlines()]
    assert code == 0 and keys == sorted(keys)


def test_topicscore_pipeline(tmp_path, capsys, monkeypatch):
    rd = str(tmp_path)
    run(capsys, "tune", "--run-dir", rd, "--strategy", "CoT", *SMALL)
    code, out, _ = run(capsys, "topicscore", "judge", "--run-dir", rd)
    assert code == 0 and "judgments" in out
    answers = iter(["1", "", "q"])
    monkeypatch.setattr("builtins.input", lambda prompt="": next(answers))
    code, _, _ = run(capsys, "topicscore", "annotate", "--run-dir", rd, "--annotator", "a1")
    assert code == 0
    code, out, _ = run(capsys, "topicscore", "report", "--run-dir", rd)
    assert code == 0 and "human-average" in out
    report = json.loads((tmp_path / "topicscore" / "report.json").read_text())
    entry = report["llm-gpt-4-1106-preview"]
    assert 0 <= entry["correctness"] <= 1 and 0 <= entry["completeness"] <= 1
    assert json.loads((tmp_path / "topicscore" / "plot_data.json").read_text())["judges"]


def test_topicscore_io_run_has_nothing_to_judge(tmp_path, capsys):
    rd = str(tmp_path)
    run(capsys, "tune", "--run-dir", rd, "--n-validation", "10", "--n-test", "10", "--l", "0")
    code, _, err = run(capsys, "topicscore", "judge", "--run-dir", rd)
    assert code == 1 and "no topic explanations" in err


def _artifacts(root):
    skip = {"cache.jsonl", "templates.jsonl", "run_config.json"}
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name not in skip)


def test_every_subcommand_replays_byte_identically(tmp_path, capsys):
    rec, rep = tmp_path / "rec", tmp_path / "rep"
    cache = str(rec / "cache.jsonl")
    steps = [
        ["ingest"], ["sample"], ["tune", "--strategy", "CoT", *SMALL], ["evaluate", "--repeats", "2"],
        ["baseline"], ["topicscore", "judge"], ["topicscore", "report"],
    ]
    for step in steps:
        assert run(capsys, *step, "--run-dir", str(rec), *SMALL[:4])[0] == 0
    for step in steps:
        code, _, err = run(capsys, *step, "--run-dir", str(rep), "--backend", "replay", "--cache", cache, *SMALL[:4])
        assert code == 0, err
    files = _artifacts(rec)
    assert files == _artifacts(rep) and len(files) > 10
    for rel in files:
        assert filecmp.cmp(rec / rel, rep / rel, shallow=False), rel


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any socket connection or real HTTP request."""
    attempts = []

    def refuse(self, *args, **kwargs):
        attempts.append(args)
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(httpx.HTTPTransport, "handle_request", refuse)
    return attempts


def test_offline_subcommands_never_touch_network(tmp_path, capsys, monkeypatch, no_network):
    rd = str(tmp_path)
    # record a CoT run offline first so every later subcommand has inputs
    run(capsys, "tune", "--run-dir", rd, "--strategy", "CoT", *SMALL)
    run(capsys, "topicscore", "judge", "--run-dir", rd)
    monkeypatch.setenv("RECPROMPT_API_KEY", "dummy")
    monkeypatch.setattr("builtins.input", lambda prompt="": "q")
    live = ["--backend", "live", "--base-url", "http://198.51.100.1/v1"]
    for argv in (
        ["ingest"], ["sample"], ["baseline"], ["topicscore", "annotate", "--annotator", "z"],
        ["topicscore", "report"], ["cache", "stats"], ["cache", "export", "--out", str(tmp_path / "e.jsonl")],
    ):
        code, _, err = run(capsys, *argv, "--run-dir", rd, *live, *SMALL[:4])
        assert code == 0, (argv, err)
    assert no_network == []


def test_live_tune_goes_through_transport(tmp_path, capsys, monkeypatch):
    sent = []

    def fake_send(self, request):
        sent.append(request)
        raise cli.GatewayError("endpoint unavailable")

    monkeypatch.setenv("RECPROMPT_API_KEY", "dummy")
    monkeypatch.setattr("recprompt.gateway.OpenAICompatibleTransport.send", fake_send)
    code, _, err = run(capsys, "tune", "--run-dir", str(tmp_path), "--backend", "live", "--rate-limit", "0", *SMALL)
    assert code == 1 and "endpoint unavailable" in err
    assert sent and sent[0].role_tag == "recommender"
