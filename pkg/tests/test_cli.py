import json
import subprocess
import sys

import yaml

from dpepo.cli import main
from dpepo.runner import CHECKPOINT, STATS, TRAJECTORIES


def _out(small_run):
    return small_run.parent / "run"


def test_train_writes_artifacts(small_run, capsys):
    assert main(["train", str(small_run)]) == 0
    out = _out(small_run)
    for name in (CHECKPOINT, TRAJECTORIES, STATS, "config.yaml"):
        assert (out / name).exists()
    assert capsys.readouterr().out.count("iter") == 3
    assert json.loads((out / CHECKPOINT).read_text())["iteration"] == 3


def test_resume_matches_uninterrupted_run(small_run, tmp_path):
    assert main(["train", str(small_run), "--quiet", "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["train", str(small_run), "--quiet", "--output-dir", str(tmp_path / "b"), "--stop-after", "1"]) == 0
    # a partial iteration left in the log after the checkpoint is discarded on resume
    with open(tmp_path / "b" / TRAJECTORIES, "a") as fh:
        fh.write(json.dumps({"iteration": 1, "partial": True}) + "\n")
    assert main(["train", str(small_run), "--quiet", "--output-dir", str(tmp_path / "b"), "--resume"]) == 0
    for name in (CHECKPOINT, TRAJECTORIES, STATS):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_refuses_changed_config(small_run, tmp_path, capsys):
    assert main(["train", str(small_run), "--quiet", "--stop-after", "1"]) == 0
    data = yaml.safe_load(small_run.read_text())
    data["rollout"]["seed"] = 99
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump(data))
    assert main(["train", str(other), "--quiet", "--resume"]) == 1
    assert "different configuration" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rollout:\n  k_parallel: 0\n")
    assert main(["train", str(bad)]) == 2
    assert "rollout.k_parallel" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing.yaml")]) == 2


def test_eval_sweep(small_run, tmp_path, capsys):
    main(["train", str(small_run), "--quiet"])
    capsys.readouterr()
    out = tmp_path / "ev"
    assert main(["eval", str(small_run), "--k", "1", "2", "--episodes", "3", "--sampled", "--out", str(out)]) == 0
    for k in (1, 2):
        rep = json.loads((out / f"eval_k{k}.json").read_text())
        assert rep["k_parallel"] == k and rep["episodes"] == 6 and rep["mode"] == "sampled"
        assert (out / f"eval_k{k}.csv").read_text().count("\n") == 7
    assert main(["eval", str(small_run), "--episodes", "0"]) == 2
    assert main(["eval", str(small_run), "--checkpoint", str(tmp_path / "nope.json")]) == 1


def test_eval_env_limit(small_run, capsys):
    assert main(["eval", str(small_run), "--k", "2", "--env-limit", "1", "--episodes", "2", "--no-tokens"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["env_limit"] == 1 and rep["token_proxy_total"] == 0


def test_rollout_transcript_and_replay(small_run, tmp_path, capsys):
    path = tmp_path / "t.json"
    assert main(["rollout", str(small_run), "--task-index", "1", "--seed", "4", "--transcript", str(path)]) == 0
    doc = json.loads(path.read_text())
    assert doc["task_index"] == 1 and doc["seed"] == 4 and doc["steps"]
    first = doc["steps"][0]
    assert first["messages"][0]["role"] == "system" and "<parallel>" in first["raw_output"]
    capsys.readouterr()
    assert main(["rollout", str(small_run), "--replay", str(path)]) == 0
    assert "identical" in capsys.readouterr().out
    doc["steps"][0]["messages"][1]["content"] += " tampered"
    path.write_text(json.dumps(doc))
    assert main(["rollout", str(small_run), "--replay", str(path)]) == 1


def test_rollout_bad_task_index(small_run):
    assert main(["rollout", str(small_run), "--task-index", "9"]) == 2


def test_rollout_unreachable_llm_aborts(small_run, tmp_path):
    data = yaml.safe_load(small_run.read_text())
    data["policy"] = {"kind": "external-llm", "endpoint": {"base_url": "http://127.0.0.1:9/v1", "retries": 0}}
    cfg = tmp_path / "llm.yaml"
    cfg.write_text(yaml.safe_dump(data))
    path = tmp_path / "t.json"
    assert main(["rollout", str(cfg), "--transcript", str(path)]) == 1
    assert json.loads(path.read_text())["failure_reason"] == "aborted"


def test_analyze_exit_codes(small_run, tmp_path, capsys):
    main(["train", str(small_run), "--quiet"])
    log = _out(small_run) / TRAJECTORIES
    assert main(["analyze", str(log), "--csv", str(tmp_path / "s.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True
    lines = log.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["steps"][0]["r_step"] = 0.123
    lines[0] = json.dumps(rec)
    lines[1] = "{broken"
    log.write_text("\n".join(lines) + "\n")
    assert main(["analyze", str(log)]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["analyze", str(log), "--continue-on-error"]) == 1
    report = json.loads(capsys.readouterr().out)
    assert len(report["corrupted"]) == 1 and any("r_step" in d for d in report["discrepancies"])
    assert main(["analyze", str(tmp_path / "absent.jsonl")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dpepo", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train" in res.stdout
