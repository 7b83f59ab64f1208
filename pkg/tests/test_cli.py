import json

import httpx
import pytest
from fastapi.testclient import TestClient

from ephemera.cli import EXIT_ERROR, EXIT_FRAUD, EXIT_OK, main
from ephemera.service import create_app
from ephemera.sim import MetricsReport


def test_run_text(capsys):
    assert main(["run", "fig1_reward"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "scenario fig1_reward" in out and "reconciled" in out


def test_run_jsonl_out_and_archive_verify(tmp_path, capsys):
    out, arch = tmp_path / "m.jsonl", tmp_path / "a.jsonl"
    assert main(["run", "fig1_reward", "--format", "jsonl", "--out", str(out), "--archive", str(arch)]) == EXIT_OK
    report = MetricsReport.from_jsonl(out.read_text())
    assert report.scenario == "fig1_reward"
    capsys.readouterr()
    assert main(["verify", str(arch)]) == EXIT_OK
    assert "commits verified" in capsys.readouterr().out


def test_fraud_exit_codes(tmp_path, capsys):
    arch = tmp_path / "a.jsonl"
    assert main(["run", "fraud", "--archive", str(arch)]) == EXIT_FRAUD
    capsys.readouterr()
    assert main(["verify", str(arch)]) == EXIT_FRAUD
    assert "FRAUD" in capsys.readouterr().out


def test_bad_inputs(tmp_path, capsys):
    assert main(["run", "no-such-scenario"]) == EXIT_ERROR
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nduration_ms: nope\n")
    assert main(["run", str(bad)]) == EXIT_ERROR
    assert "line 2" in capsys.readouterr().err
    junk = tmp_path / "junk.jsonl"
    junk.write_text("{not json\n")
    assert main(["verify", str(junk)]) == EXIT_ERROR


def test_routes(capsys):
    assert main(["routes", "--table", "--policy", "reject"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 259 and any("Reject(mixed-writable)" in line for line in lines)
    assert main(["routes", "fig1_reward"]) == EXIT_OK
    assert "ER(er-1)" in capsys.readouterr().out


def test_inspect(tmp_path, capsys):
    dump = tmp_path / "state.json"
    main(["run", "fig1_reward", "--dump", str(dump)])
    capsys.readouterr()
    assert main(["inspect", str(dump)]) == EXIT_OK
    assert "Chest" in capsys.readouterr().out
    (tmp_path / "broken.json").write_text("[]")
    assert main(["inspect", str(tmp_path / "broken.json")]) == EXIT_ERROR


def test_client_against_app(monkeypatch, capsys):
    tc = TestClient(create_app())
    base = "http://svc"
    monkeypatch.setattr(httpx, "get", lambda url, **kw: tc.get(url[len(base):], **kw))
    monkeypatch.setattr(httpx, "post", lambda url, **kw: tc.post(url[len(base):], **kw))
    assert main(["client", "--url", base, "advance", "800"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"now_ms": 800}
    assert main(["client", "--url", base, "status"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["base"]["slot"] == 2
    assert main(["client", "--url", base, "account", "ff" * 32]) == EXIT_ERROR
    capsys.readouterr()
    assert main(["client", "--url", base, "poll"]) == EXIT_ERROR


@pytest.mark.parametrize("argv", [["run"], ["client", "bogus"]])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
