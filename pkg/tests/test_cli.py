import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mdg.cli import main
from mdg.inference import read_trace

GOLDEN = Path(__file__).parent / "golden"
TINY = ["--set", "model.d_model=8", "--set", "model.enc_layers=1", "--set", "model.n_freq=2",
        "--set", "model.n_modes=2", "--set", "model.max_map=4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--count", "3", "--agents", "4", "--seed", "5", "--out", str(d / "data.bin")]) == 0
    assert main(["train", "--data", str(d / "data.bin"), "--epochs", "1", "--batch-size", "2",
                 "--out", str(d / "run"), *TINY]) == 0
    return d


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["gen-data", "--count", "2", "--agents", "3", "--seed", "1", "--out", str(a)]) == 0
    assert main(["gen-data", "--count", "2", "--agents", "3", "--seed", "1", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.bin.run.txt").exists()


def test_gen_data_count_zero(tmp_path, capsys):
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "e.bin")]) == 0
    assert "warning" in capsys.readouterr().err


def test_gen_data_bad_kind(tmp_path, capsys):
    assert main(["gen-data", "--kinds", "straight,roundabout", "--out", str(tmp_path / "x.bin")]) == 2
    err = capsys.readouterr().err
    assert "roundabout" in err and "intersection" in err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["generate"])
    assert e.value.code == 2


def test_missing_data_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.bin"), "--out", str(tmp_path / "r")]) == 3


def test_bad_override_exit_code(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data.bin"), "--set", "bogus=1", "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--data", str(workdir / "data.bin"), "--set", "train.lr=-1",
                 "--out", str(tmp_path / "r")]) == 2


def test_corrupt_checkpoint_exit_code(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    # the container has no checksum field, so corrupt its structure
    bad.write_bytes((workdir / "run" / "model.ckpt").read_bytes()[:-100])
    assert main(["generate", "--ckpt", str(bad), "--data", str(workdir / "data.bin"),
                 "--trace", str(tmp_path / "t.csv")]) == 3


def test_train_outputs(workdir):
    run = workdir / "run"
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,lr,L_d,L_p,total,grad_norm" and len(log) == 3
    cfg = (run / "run_config.txt").read_text()
    assert "model.d_model=8" in cfg and "# input data sha256=" in cfg


@pytest.mark.parametrize("mode,steps", [("one_step", 1), ("temporal", 5), ("temporal", 20), ("agent", 2)])
def test_schedule_command_matches_golden(capsys, mode, steps):
    if mode == "agent":
        steps = 2
    assert main(["schedule", "--mode", mode, "--steps", str(steps), "--dims", "10,20", "--K", "5"]) == 0
    assert capsys.readouterr().out == (GOLDEN / f"schedule_{mode}_L{steps}.txt").read_text()


def test_generate_trace_and_schedule_dump(workdir, tmp_path):
    trace = tmp_path / "g.csv"
    sched = tmp_path / "s.txt"
    assert main(["generate", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                 "--mode", "temporal", "--steps", "4", "--samples", "2", "--trace", str(trace),
                 "--schedule-out", str(sched)]) == 0
    meta, rec = read_trace(trace)
    assert meta["mode"] == "temporal" and meta["steps"] == "4"
    assert set(rec["sample"]) == {0, 1} and rec["t"].max() == 39
    assert sched.read_text().count("step ") == 5


def test_generate_guided(workdir, tmp_path):
    from mdg.synthworld import load_dataset
    sc = load_dataset(workdir / "data.bin")[0]
    gx, gy = (float(v) for v in sc.future[0, -1, :2] + 3.0)
    goals = tmp_path / "goals.csv"
    goals.write_text(f"scene,agent,x,y\n0,0,{gx!r},{gy!r}\n")
    trace = tmp_path / "gg.csv"
    assert main(["generate", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                 "--mode", "agent", "--steps", "2", "--guide", str(goals), "--trace", str(trace)]) == 0
    meta, rec = read_trace(trace)
    end = rec[(rec["episode"] == sc.scenario_id) & (rec["agent"] == 0) & (rec["t"] == 39)]
    assert meta["guided"] == "1" and np.hypot(end["x"][0] - gx, end["y"][0] - gy) < 0.2
    goals.write_text(f"scene,agent,x,y\n0,0,{gx + 1e4!r},{gy!r}\n")
    assert main(["generate", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                 "--guide", str(goals), "--trace", str(trace)]) == 2
    goals.write_text("scene,agent,x,y\n7,0,0.0,0.0\n")
    assert main(["generate", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                 "--guide", str(goals), "--trace", str(trace)]) == 3


def test_rollout_and_eval(workdir, tmp_path):
    trace = tmp_path / "r.csv"
    assert main(["rollout", "--ckpt", str(workdir / "run" / "model.ckpt"), "--data", str(workdir / "data.bin"),
                 "--reuse", "--duration", "3", "--trace", str(trace)]) == 0
    summary = (tmp_path / "r.csv.summary.csv").read_text().splitlines()
    assert summary[0] == "episode,plan_consistency,denoiser_calls" and summary[-1].startswith("mean,")
    out = tmp_path / "m.csv"
    assert main(["eval", "--trace", str(trace), "--data", str(workdir / "data.bin"), "--out", str(out)]) == 0
    assert out.read_text().startswith("metric,value,count\nCR,")


def _gt_trace(path, scenarios, data_hash):
    from mdg.inference import trace_header, trace_rows
    text = trace_header({"mode": "one_step", "data_sha256": data_hash})
    for sc in scenarios:
        text += trace_rows(sc.scenario_id, 0, 0, sc.future)
    path.write_text(text)


def test_eval_ground_truth_trace(workdir, tmp_path):
    from mdg.cli import file_hash
    from mdg.synthworld import load_dataset
    data = workdir / "data.bin"
    trace = tmp_path / "gt.csv"
    _gt_trace(trace, load_dataset(data), file_hash(data))
    out = tmp_path / "m.csv"
    assert main(["eval", "--trace", str(trace), "--data", str(data), "--metrics", "CR,SADE,minSADE",
                 "--out", str(out)]) == 0
    rows = dict(ln.split(",", 1) for ln in out.read_text().splitlines()[1:])
    assert rows["SADE"].startswith("0.0,") and rows["minSADE"].startswith("0.0,") and rows["CR"].startswith("0.0,")


def test_eval_rejects_other_dataset(workdir, tmp_path):
    from mdg.synthworld import load_dataset
    trace = tmp_path / "gt.csv"
    _gt_trace(trace, load_dataset(workdir / "data.bin"), "0" * 64)
    assert main(["eval", "--trace", str(trace), "--data", str(workdir / "data.bin")]) == 3


def test_plot(workdir, tmp_path):
    from mdg.cli import file_hash
    from mdg.synthworld import load_dataset
    trace = tmp_path / "gt.csv"
    _gt_trace(trace, load_dataset(workdir / "data.bin"), file_hash(workdir / "data.bin"))
    svg = tmp_path / "p.svg"
    assert main(["plot", "--trace", str(trace), "--data", str(workdir / "data.bin"), "--out", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mdg.cli", "schedule", "--mode", "one_step", "--dims", "2,4"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.splitlines()[1] == "step 1"
    assert np.array_equal([ln for ln in r.stdout.splitlines()[2:4]], ["5555", "5555"])
