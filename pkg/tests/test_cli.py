import json
import subprocess
import sys

import numpy as np
import pytest

from egoflow.cli import main
from egoflow.dataio import Trajectory, load_trajectory, save_trajectory
from egoflow.evaluation import integrate_trajectory
from egoflow.geometry import camera_motion
from egoflow.synth import SceneConfig, SequenceConfig, make_scene, make_sequence, read_twists, render_pair, \
    write_sequence
from egoflow.dataio import save_depth, save_image, save_intrinsics, write_flo


@pytest.fixture(scope="module")
def rigid_seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("rigid")
    seq = make_sequence(SequenceConfig(n_frames=8, width=64, height=48), 5)
    return write_sequence(seq, root / "seq"), seq


@pytest.fixture(scope="module")
def two_body_seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("twobody")
    seq = make_sequence(SequenceConfig(n_frames=5, width=96, height=72, two_body=True), 2)
    return write_sequence(seq, root / "seq"), seq


def read_report(out):
    return json.loads((out / "report.json").read_text())


def test_estimate_with_ground_truth_flow(rigid_seq, tmp_path, capsys):
    ds, seq = rigid_seq
    out = tmp_path / "out"
    assert main(["estimate", str(ds), "-o", str(out), "--flow", "flow"]) == 0
    assert "relative pose error over 7 pairs" in capsys.readouterr().out
    rep = read_report(out)
    _, twists = read_twists(ds / "twists.txt")
    for rec, T in zip(rep["pairs"], twists):
        got = np.array(rec["fit"]["twist"])
        assert np.linalg.norm(got - T.vector) / np.linalg.norm(T.vector) < 1e-5
        assert rec["status"] == "ok"
    assert rep["skipped_frames"] == 0 and rep["failed_pairs"] == 0
    assert len(load_trajectory(out / "trajectory.txt")) == 8
    rows = [json.loads(line) for line in (out / "pairs.jsonl").read_text().splitlines()]
    assert len(rows) == 7
    assert set(rows[0]) == {"timestamp", "trans_error", "rot_error", "residual_rms", "support", "converged", "status"}
    assert max(r["trans_error"] for r in rows) < 1e-5


def test_estimate_reports_reproducible(rigid_seq, tmp_path):
    ds, _ = rigid_seq
    outs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        out = tmp_path / name
        assert main(["estimate", str(ds), "-o", str(out), "--flow", "flow", "--workers", workers]) == 0
        outs.append(out)
    key = lambda o: {k: v for k, v in read_report(o).items() if k != "config"}
    assert key(outs[0]) == key(outs[1]) == key(outs[2])
    assert (outs[0] / "report.json").read_bytes().replace(b"/a", b"/b") == (outs[1] / "report.json").read_bytes()
    assert (outs[0] / "trajectory.txt").read_bytes() == (outs[2] / "trajectory.txt").read_bytes()


def test_estimate_computed_flow(rigid_seq, tmp_path):
    ds, _ = rigid_seq
    out = tmp_path / "out"
    assert main(["estimate", str(ds), "-o", str(out), "--limit", "3"]) == 0
    rep = read_report(out)
    assert len(rep["pairs"]) == 3
    assert rep["summary"]["translation"]["median"] < 0.01
    for rec in rep["pairs"]:
        L = rec["losses"]
        assert L["l_final"] == L["lambda_of"] * L["l_of"] + L["lambda_mf"] * L["l_mf"] + L["lambda_op"] * L["l_op"]


def test_estimate_two_layer(two_body_seq, tmp_path):
    ds, seq = two_body_seq
    out = tmp_path / "out"
    assert main(["estimate", str(ds), "-o", str(out), "--flow", "flow", "--layers", "two-layer"]) == 0
    masks = sorted((out / "masks").glob("*.png"))
    assert len(masks) == 4
    rep = read_report(out)
    for rec, T in zip(rep["pairs"], seq.twists):
        assert not rec["layers"]["single_layer"]
        got = np.array(rec["fit"]["twist"])
        assert np.linalg.norm(got - T.vector) / np.linalg.norm(T.vector) < 1e-3


def test_config_file_overrides_flags(rigid_seq, tmp_path):
    ds, _ = rigid_seq
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# overrides\nlimit = 2\nrobust.kernel = tukey\nlambdas = 1 0 0\n")
    out = tmp_path / "out"
    assert main(["estimate", str(ds), "-o", str(out), "--flow", "flow", "--limit", "5", "--kernel", "huber",
                 "--config", str(cfg)]) == 0
    rep = read_report(out)
    assert len(rep["pairs"]) == 2
    assert rep["config"]["robust"]["kernel"] == "tukey"
    assert rep["config"]["lambdas"] == [1.0, 0.0, 0.0]
    cfg.write_text("nonsense = 1\n")
    assert main(["estimate", str(ds), "-o", str(out), "--config", str(cfg)]) == 1


def test_estimate_degenerate_majority(rigid_seq, tmp_path, capsys):
    ds, _ = rigid_seq
    cfg = tmp_path / "run.cfg"
    cfg.write_text("robust.max_condition = 1.0\n")
    out = tmp_path / "out"
    assert main(["estimate", str(ds), "-o", str(out), "--flow", "flow", "--config", str(cfg)]) == 3
    assert "degenerate" in capsys.readouterr().err
    rep = read_report(out)
    assert rep["failed_pairs"] == 7
    assert all(r["interpolated"] for r in rep["pairs"])


def test_estimate_missing_files(tmp_path, rigid_seq, capsys):
    assert main(["estimate", str(tmp_path / "nowhere"), "-o", str(tmp_path / "o")]) == 2
    ds, _ = rigid_seq
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "rgb.txt").write_bytes((ds / "rgb.txt").read_bytes())
    capsys.readouterr()
    assert main(["estimate", str(broken), "-o", str(tmp_path / "o")]) == 2
    assert "depth.txt" in capsys.readouterr().err


def test_dataset_root_env(rigid_seq, tmp_path, monkeypatch):
    ds, _ = rigid_seq
    monkeypatch.setenv("EGOFLOW_DATASET_ROOT", str(ds.parent))
    monkeypatch.chdir(tmp_path)
    assert main(["estimate", ds.name, "-o", "out", "--flow", "flow", "--limit", "1"]) == 0


def test_evaluate(rigid_seq, tmp_path, capsys):
    ds, seq = rigid_seq
    gt = ds / "groundtruth.txt"
    assert main(["evaluate", str(gt), str(gt), "--out", str(tmp_path / "e.json")]) == 0
    rep = json.loads((tmp_path / "e.json").read_text())
    assert rep["rpe_per_frame"]["translation"]["rmse"] == 0
    assert rep["ate_snippets"]["translation"]["mean"] < 1e-12
    # integrated planted camera twists reproduce the ground truth up to file rounding
    dt = seq.config.frame_interval
    pred = integrate_trajectory([(t, camera_motion(T).scaled(1 / dt), dt) for t, T in zip(seq.timestamps, seq.twists)])
    save_trajectory(tmp_path / "pred.txt", pred)
    assert main(["evaluate", str(tmp_path / "pred.txt"), str(gt), "--out", str(tmp_path / "p.json")]) == 0
    base = json.loads((tmp_path / "p.json").read_text())["rpe_per_frame"]["translation"]["rmse"]
    assert base < 1e-5
    # a one-frame shift is visible
    shifted = Trajectory(seq.timestamps, pred.poses[1:] + [pred.poses[-1]])
    save_trajectory(tmp_path / "s.txt", shifted)
    assert main(["evaluate", str(tmp_path / "s.txt"), str(gt), "--out", str(tmp_path / "s.json")]) == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["rpe_per_frame"]["translation"]["median"] > 100 * base


def test_evaluate_errors(tmp_path, rigid_seq, capsys):
    ds, seq = rigid_seq
    far = Trajectory(seq.timestamps + 100.0, seq.camera_poses)
    save_trajectory(tmp_path / "far.txt", far)
    assert main(["evaluate", str(tmp_path / "far.txt"), str(ds / "groundtruth.txt")]) == 2
    assert "no associated" in capsys.readouterr().err
    (tmp_path / "bad.txt").write_text("0 0 0\n")
    assert main(["evaluate", str(tmp_path / "bad.txt"), str(ds / "groundtruth.txt")]) == 2


def test_synth_command(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["synth", str(out), "--frames", "3", "--width", "48", "--height", "40", "--seed", "4"]) == 0
    assert (out / "rgb.txt").is_file() and len(list((out / "flow").glob("*.flo"))) == 2
    assert main(["synth", str(out), "--width", "20"]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", str(blocker / "sub"), "--frames", "2", "--width", "32", "--height", "32"]) == 2


def write_pair(root, sc, with_flow=True):
    pair, flow = render_pair(sc)
    root.mkdir(parents=True, exist_ok=True)
    save_image(root / "a.png", pair.i_t)
    save_image(root / "b.png", pair.i_next)
    save_depth(root / "d.png", 1 / sc.depth.rho)
    save_intrinsics(root / "k.txt", sc.intrinsics)
    if with_flow:
        write_flo(root / "f.flo", flow)
    return root


def test_project(tmp_path, capsys):
    sc = make_scene(SceneConfig(width=64, height=48), 9)
    d = write_pair(tmp_path / "p", sc)
    out = tmp_path / "o"
    assert main(["project", str(d / "a.png"), str(d / "b.png"), str(d / "d.png"), "--intrinsics", str(d / "k.txt"),
                 "--flow", str(d / "f.flo"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if l.startswith("scene twist"))
    got = np.array([float(v) for v in line.split(":")[1].split()])
    # depth is quantized to 1/5000 m on disk
    assert np.linalg.norm(got - sc.twist.vector) / np.linalg.norm(sc.twist.vector) < 1e-3
    for name in ("flow.png", "motion_field.png", "diff_before.png", "diff_flow.png", "diff_motion_field.png",
                 "report.json"):
        assert (out / name).is_file()
    rep = json.loads((out / "report.json").read_text())
    L = rep["losses"]
    assert L["l_final"] == L["lambda_of"] * L["l_of"] + L["lambda_mf"] * L["l_mf"] + L["lambda_op"] * L["l_op"]


def test_project_zero_motion(tmp_path, capsys):
    sc = make_scene(SceneConfig(width=64, height=48, twist=(0, 0, 0, 0, 0, 0)), 1)
    d = write_pair(tmp_path / "p", sc, with_flow=False)
    assert main(["project", str(d / "a.png"), str(d / "b.png"), str(d / "d.png"),
                 "--intrinsics", str(d / "k.txt")]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("scene twist"))
    assert np.abs([float(v) for v in line.split(":")[1].split()]).max() < 1e-4


def test_project_two_layer_mask(tmp_path):
    sc = make_scene(SceneConfig(two_body=True), 0)
    d = write_pair(tmp_path / "p", sc)
    out = tmp_path / "o"
    assert main(["project", str(d / "a.png"), str(d / "b.png"), str(d / "d.png"), "--intrinsics", str(d / "k.txt"),
                 "--flow", str(d / "f.flo"), "--layers", "two-layer", "--out", str(out)]) == 0
    assert (out / "mask.png").is_file()
    rep = json.loads((out / "report.json").read_text())
    assert rep["layers"]["n_dynamic"] > 0


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "egoflow", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "estimate" in r.stdout
