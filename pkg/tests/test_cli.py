import json

import pytest

from evslam import formats
from evslam.cli import main

FAST = ["--tracking-iters", "2", "--mapping-iters", "2"]


@pytest.fixture(scope="module")
def one_frame(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-dataset", "--out", str(data), "--frames", "1", "--width", "60", "--height", "34"]) == 0
    return root, data


def test_one_frame_track_and_eval(one_frame, capsys):
    root, data = one_frame
    run = root / "run"
    capsys.readouterr()
    assert main(["track", "--dataset", str(data), "--out", str(run)] + FAST) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["success"] and out["frames_completed"] == 1
    assert len(formats.read_trajectory(run / "trajectory.txt")) == 1
    assert main(["eval", "--run", str(run), "--dataset", str(data), "--surface-points", "200"]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["ate_rmse_cm"] == 0.0 and metrics["success"]
    plots = root / "plots"
    assert main(["plot", str(run), "--out", str(plots)]) == 0
    assert (plots / "run_trajectory.svg").exists()


def test_bad_arguments_exit_nonzero(one_frame, tmp_path, capsys):
    _, data = one_frame
    assert main(["track", "--dataset", str(data), "--events", "maybe"]) != 0
    assert main(["track", "--dataset", str(data), "--tau", "0", "--out", str(tmp_path / "r")]) != 0
    assert main(["nonsense"]) != 0
    capsys.readouterr()
    assert main(["track", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "r2")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "error" in err and "message" in err


def test_small_ablation(tmp_path, capsys):
    out = tmp_path / "abl"
    capsys.readouterr()
    code = main(["ablate", "--out", str(out), "--taus", "1,5", "--event-settings", "on,off", "--seeds", "0,1,2",
                 "--frames", "3", "--scale", "0.15", "--surface-points", "200", "--on-failure", "continue"] + FAST)
    assert code == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 4 and sum(r["runs"] for r in rows) == 12
    summary = json.loads((out / "ablation.json").read_text())
    assert {(r["tau"], r["events"]) for r in summary["rows"]} == {(1, True), (1, False), (5, True), (5, False)}
    assert len(list((out / "runs").iterdir())) == 12
