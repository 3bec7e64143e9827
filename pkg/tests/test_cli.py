import hashlib
import json
import subprocess
import sys

import pytest

from imumatch import io
from imumatch.cli import main
from imumatch.undefined import UNDEFINED

CONFIG = """\
seed: 4
scenario:
  duration_s: 120
  n_participants: 3
  n_nonparticipants: 1
training:
  estimator: logistic
  W: 100
  lr: 0.01
  batch_size: 256
  epochs: 3
  patience: 2
  stride_train: 20
  stride_val: 20
scoring:
  stride: 5
"""


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.iterdir()):
        if p.name.endswith(".manifest.json"):
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.yaml"
    cfg.write_text(CONFIG)
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "model")]) == 0
    return root, cfg


def test_simulate_is_deterministic(tmp_path, work):
    root, cfg = work
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert digest(tmp_path) == digest(root / "data")
    assert {p.name for p in tmp_path.iterdir()} == {"tracks.csv", "sensors.csv", "truth.csv",
                                                   "simulate.manifest.json"}


def test_rerun_into_same_directory_is_byte_identical(tmp_path, work):
    _, cfg = work
    snapshots = []
    for _ in range(2):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        snapshots.append({p.name: p.read_bytes() for p in tmp_path.iterdir()})
    assert snapshots[0] == snapshots[1]


def test_seed_flag_changes_the_scene(tmp_path, work):
    root, cfg = work
    assert main(["simulate", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "tracks.csv").read_bytes() != (root / "data" / "tracks.csv").read_bytes()
    assert json.loads((tmp_path / "simulate.manifest.json").read_text())["seed"] == 5


def test_train_writes_checkpoint_history_and_manifest(work):
    root, _ = work
    history = io.read_loss_history(root / "model" / "model_loss.csv")
    assert [h[0] for h in history] == list(range(1, len(history) + 1))
    manifest = json.loads((root / "model" / "train.manifest.json").read_text())
    assert manifest["stage"] == "train" and manifest["outputs"]["checkpoint"].endswith("model.ckpt")


def test_resume_continues_epochs(tmp_path, work):
    root, cfg = work
    args = ["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
            "--resume", str(root / "model" / "model.ckpt")]
    assert main(args) == 0
    before = io.read_loss_history(root / "model" / "model_loss.csv")
    after = io.read_loss_history(tmp_path / "model_loss.csv")
    assert after[: len(before)] == before
    assert len(after) >= len(before)


def test_score_and_match_eval(tmp_path, work):
    root, cfg = work
    data = str(root / "data")
    assert main(["score", "--config", str(cfg), "--data", data, "--estimator", "oracle",
                 "--out", str(tmp_path / "s")]) == 0
    scores = io.read_scores(tmp_path / "s" / "scores.csv")
    assert len(scores) > 0 and set(scores["p"]) <= {0.0, 1.0}
    assert main(["match-eval", "--config", str(cfg), "--scores", str(tmp_path / "s" / "scores.csv"),
                 "--data", data, "--out", str(tmp_path / "m")]) == 0
    metrics = io.read_metrics(tmp_path / "m" / "metrics.csv")
    assert metrics[("PP", 0)] == 1.0
    assert (tmp_path / "m" / "decisions.csv").exists()


def test_score_with_checkpoint_is_idempotent(tmp_path, work):
    root, cfg = work
    ckpt = str(root / "model" / "model.ckpt")
    for d in ("a", "b"):
        assert main(["score", "--config", str(cfg), "--data", str(root / "data"), "--estimator", "logistic",
                     "--checkpoint", ckpt, "--out", str(tmp_path / d)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_window_mismatch_is_a_data_error(tmp_path, work):
    root, cfg = work
    code = main(["score", "--config", str(cfg), "--data", str(root / "data"), "--estimator", "logistic",
                 "--checkpoint", str(root / "model" / "model.ckpt"), "--W", "300", "--out", str(tmp_path)])
    assert code == 3


def test_estimator_mismatch_is_a_data_error(tmp_path, work):
    root, cfg = work
    code = main(["score", "--config", str(cfg), "--data", str(root / "data"), "--estimator", "nn",
                 "--checkpoint", str(root / "model" / "model.ckpt"), "--out", str(tmp_path)])
    assert code == 3


def test_empty_scores_leave_every_track_undefined(tmp_path, work):
    root, cfg = work
    empty = tmp_path / "scores.csv"
    empty.write_text("step,track_id,sensor_id,p,r\n")
    assert main(["match-eval", "--config", str(cfg), "--scores", str(empty), "--data", str(root / "data"),
                 "--W", "100", "--out", str(tmp_path / "m")]) == 0
    metrics = io.read_metrics(tmp_path / "m" / "metrics.csv")
    assert metrics[("PR", 0)] == 0.0 and metrics[("PP", 0)] is UNDEFINED
    assert metrics[("n_undefined", None)] == metrics[("n_tracks", None)]


def test_unknown_track_is_a_data_error(tmp_path, work):
    root, cfg = work
    scores = tmp_path / "scores.csv"
    scores.write_text("step,track_id,sensor_id,p,r\n0,ghost,P01,0.9,0.9\n")
    assert main(["match-eval", "--scores", str(scores), "--data", str(root / "data"), "--W", "100",
                 "--out", str(tmp_path / "m")]) == 3


def test_config_errors_exit_2_and_name_the_key(tmp_path, capsys, work):
    root, _ = work
    bad = tmp_path / "bad.yaml"
    bad.write_text("matching:\n  P_acpt: 2\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "matching.P_acpt" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["score", "--data", str(tmp_path / "nope"), "--estimator", "oracle", "--W", "100",
                 "--out", str(tmp_path)]) == 3
    assert main(["match-eval", "--scores", str(tmp_path / "nope.csv"), "--data", str(tmp_path),
                 "--out", str(tmp_path)]) == 3


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["score"])
    assert info.value.code == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "imumatch.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "train", "score", "match-eval"):
        assert cmd in out.stdout
