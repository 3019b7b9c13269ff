import csv
import json
from pathlib import Path

import numpy as np
import pytest

from diffilter.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, read_state
from diffilter.config import ConfigError, load_config
from diffilter.metrics import eer
from diffilter.training import cosine_scores

TINY = str(Path(__file__).parent / "data" / "tiny.json")


def run(tmp_path, *args, out="ws"):
    return main(["--config", TINY, "--out-dir", str(tmp_path / out), *args])


def test_simulate_is_byte_identical_across_runs(tmp_path):
    for out in ("a", "b"):
        assert run(tmp_path, "--seed", "7", "simulate", "--kind", "ssl", "--count", "3", out=out) == EXIT_OK
    a = (tmp_path / "a/corpora/ssl/manifest.jsonl").read_bytes()
    assert a == (tmp_path / "b/corpora/ssl/manifest.jsonl").read_bytes()
    assert len(a.splitlines()) == 3


def test_simulate_rejects_zero_count(tmp_path, capsys):
    assert run(tmp_path, "simulate", "--count", "0") == EXIT_CONFIG
    assert "positive" in capsys.readouterr().err


def test_missing_noise_bank_is_a_data_error(tmp_path, capsys):
    code = run(tmp_path, "simulate", "--noise-dir", str(tmp_path / "nowhere"))
    assert code == EXIT_DATA
    err = capsys.readouterr().err
    assert "noise bank" in err and "--noise-dir" in err


def test_paper_preset_needs_explicit_flag(tmp_path, capsys):
    assert main(["--preset", "paper", "--out-dir", str(tmp_path), "simulate"]) == EXIT_CONFIG
    assert "--i-know-this-is-huge" in capsys.readouterr().err


def test_bad_config_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"data": {"speakers": 3}}')
    assert main(["--config", str(bad), "--out-dir", str(tmp_path / "w"), "simulate"]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["--config", str(bad), "--out-dir", str(tmp_path / "w"), "simulate"]) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        load_config("desk", overrides={"ssl": {"batch_size": 3}})
    with pytest.raises(ConfigError):
        load_config("nope")


def test_training_without_data_is_a_data_error(tmp_path):
    assert run(tmp_path, "train-enhancer", "--stage", "1") == EXIT_DATA
    assert run(tmp_path, "train-enhancer", "--stage", "2") == EXIT_DATA
    assert run(tmp_path, "evaluate") == EXIT_DATA


def test_identical_target_embeddings_give_zero_eer():
    emb = {"a1": np.array([1.0, 0.0]), "a2": np.array([1.0, 0.0]), "b1": np.array([0.0, 1.0]),
           "b2": np.array([0.0, 1.0])}
    trials = [(1, "a1", "a2"), (1, "b1", "b2"), (0, "a1", "b1"), (0, "a2", "b2")]
    scores = cosine_scores(emb, trials)
    assert eer(scores, [t[0] for t in trials]) == 0.0


@pytest.fixture(scope="module")
def pipeline_ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    code = main(["--config", TINY, "--out-dir", str(root / "ws"), "pipeline", "--stop-after", "mwf-targets"])
    assert code == EXIT_OK
    return root


def test_pipeline_resumes_after_interrupt(pipeline_ws):
    ws = pipeline_ws / "ws"
    assert read_state(ws_obj(ws))["completed"] == ["simulate", "mwf-targets"]
    manifest = ws / "corpora/ssl/manifest.jsonl"
    stamp = manifest.stat().st_mtime_ns
    assert main(["--config", TINY, "--out-dir", str(ws), "pipeline"]) == EXIT_OK
    state = read_state(ws_obj(ws))
    assert state["completed"][-1] == "evaluate" and "current" not in state
    assert manifest.stat().st_mtime_ns == stamp


def test_pipeline_report_outputs(pipeline_ws):
    report_dir = pipeline_ws / "ws" / "report"
    if not (report_dir / "report.json").exists():
        main(["--config", TINY, "--out-dir", str(pipeline_ws / "ws"), "pipeline"])
    report = json.loads((report_dir / "report.json").read_text())
    with open(report_dir / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["system"] for r in rows] == [r["system"] for r in report["rows"]]
    by = {r["system"]: r for r in report["rows"]}
    assert by["Oracle Rank-1 MWF"]["mean_sir_db"] > by["Unprocessed"]["mean_sir_db"]
    for png in ("det.png", "eer.png", "sir.png", "sdr.png"):
        assert (report_dir / png).stat().st_size > 0
    assert all(float(r["eer_percent"]) == round(float(r["eer_percent"]), 2) for r in rows)


def test_pipeline_refuses_changed_config(pipeline_ws):
    code = main(["--config", TINY, "--seed", "99", "--out-dir", str(pipeline_ws / "ws"), "pipeline"])
    assert code == EXIT_CONFIG


def test_score_and_enhance_commands(pipeline_ws, tmp_path):
    ws = pipeline_ws / "ws"
    if not (ws / "models/sv/config.json").exists():
        main(["--config", TINY, "--out-dir", str(ws), "pipeline"])
    out = tmp_path / "scores.txt"
    code = main(["--config", TINY, "--out-dir", str(ws), "score", "--corpus", str(ws / "corpora/eval"),
                 "--embedder", str(ws / "models/sv"), "--trials", str(ws / "report/trials.txt"),
                 "--output", str(out)])
    assert code == EXIT_OK
    assert out.read_text() == (ws / "report/scores/unprocessed.txt").read_text()
    code = main(["--config", TINY, "--out-dir", str(ws), "enhance", "--corpus", str(ws / "corpora/eval"),
                 "--checkpoint", str(ws / "models/enhancer/stage2"), "--n-steps", "2",
                 "--output", str(tmp_path / "enh")])
    assert code == EXIT_OK
    timing = json.loads((tmp_path / "enh/timing.json").read_text())
    assert timing["entries"] == len(list((tmp_path / "enh").glob("*.wav")))


def test_bad_trials_file(pipeline_ws, tmp_path):
    ws = pipeline_ws / "ws"
    bad = tmp_path / "t.txt"
    bad.write_text("1 nope other\n")
    code = main(["--config", TINY, "--out-dir", str(ws), "score", "--corpus", str(ws / "corpora/eval"),
                 "--embedder", str(ws / "models/sv"), "--trials", str(bad), "--output", str(tmp_path / "s")])
    assert code == EXIT_DATA


def ws_obj(root):
    from diffilter.cli import Workspace
    return Workspace(root, {}, 0)
