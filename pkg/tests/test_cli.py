import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from kp3d import cli, gradcheck
from kp3d.evaluation import Trajectory
from kp3d.io import read_features, read_poses, write_features, write_poses
from kp3d.matching import KeypointFrame

SMALL = ["--set", "synth.n_frames=12", "--set", "synth.descriptor_dim=32", "--set", "synth.n_points=80"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_kv(text):
    return dict(tok.split("=", 1) for line in text.splitlines() for tok in line.split() if "=" in tok)


@pytest.fixture(scope="module")
def small_seq(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq")
    assert cli.main(["synth", "--output", str(d), "--seed", "3", *SMALL]) == 0
    return d


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert run(capsys)[0] == cli.EXIT_USAGE
        assert run(capsys, "nonsense")[0] == cli.EXIT_USAGE
        assert run(capsys, "synth")[0] == cli.EXIT_USAGE  # --output missing
        assert run(capsys, "gradcheck", "--only", "nope")[0] == cli.EXIT_USAGE
        assert run(capsys, "synth", "--output", "x", "--intrinsics", "1,2")[0] == cli.EXIT_USAGE

    def test_unknown_config_key_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--output", tmp_path, "--set", "bogus=1")
        assert code == cli.EXIT_DATA and "bogus" in err

    def test_single_frame_directory(self, capsys, tmp_path, small_seq):
        (tmp_path / "features").mkdir()
        shutil.copy(small_seq / "features" / "000000.dakf", tmp_path / "features")
        code, _, err = run(capsys, "vo", tmp_path, "--intrinsics", "500,500,320,240")
        assert code == cli.EXIT_DATA and "at least two" in err

    def test_missing_intrinsics(self, capsys, tmp_path, small_seq):
        shutil.copytree(small_seq / "features", tmp_path / "features")
        assert run(capsys, "vo", tmp_path)[0] == cli.EXIT_DATA

    def test_corrupt_feature_file(self, capsys, tmp_path, small_seq):
        shutil.copytree(small_seq / "features", tmp_path / "features")
        victim = tmp_path / "features" / "000001.dakf"
        victim.write_bytes(victim.read_bytes()[:100])
        code, _, err = run(capsys, "vo", tmp_path, "--intrinsics", "500,500,320,240")
        assert code == cli.EXIT_DATA and "offset 100" in err

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "eval-traj", tmp_path / "a.txt", tmp_path / "b.txt")[0] == cli.EXIT_DATA

    def test_gradcheck_failure_exit(self, capsys, monkeypatch):
        monkeypatch.setattr(gradcheck, "TOLERANCE", 0.0)
        code, out, _ = run(capsys, "gradcheck", "--instances", "1", "--only", "geometric_loss")
        assert code == cli.EXIT_ESTIMATION and "FAIL" in out


class TestVo:
    def test_noiseless_matches_ground_truth(self, capsys, tmp_path):
        code, _, _ = run(capsys, "synth", "--output", tmp_path, "--seed", "5", "--set", "synth.n_frames=30",
                         "--set", "synth.descriptor_dim=32")
        assert code == 0
        code, out, _ = run(capsys, "vo", tmp_path)
        assert code == 0
        est = read_poses(tmp_path / "poses_est.txt")
        gt = read_poses(tmp_path / "poses_gt.txt")
        path = Trajectory(gt).path_lengths()[-1]
        worst = max(np.linalg.norm(a.translation - b.translation) for a, b in zip(est, gt))
        assert worst / path < 1e-6
        assert "status=fallback" not in out

    def test_rows_and_output_flag(self, capsys, tmp_path, small_seq):
        out_file = tmp_path / "est.txt"
        code, out, _ = run(capsys, "vo", small_seq, "--output", out_file)
        assert code == 0
        assert len(read_poses(out_file)) == 12
        rows = [line for line in out.splitlines() if line.startswith("frame=")]
        assert len(rows) == 11
        first = parse_kv(rows[0])
        assert int(first["inliers"]) <= int(first["matches"])

    def test_degenerate_frame_falls_back(self, capsys, tmp_path, small_seq):
        shutil.copytree(small_seq, tmp_path / "s")
        # replace frame 5 with keypoints that share nothing with their neighbours
        rng = np.random.default_rng(0)
        empty = KeypointFrame(rng.uniform(0, 100, (2, 3)), rng.normal(size=(32, 3)), np.full(3, 0.5),
                              np.ones(3), (640, 480))
        write_features(tmp_path / "s" / "features" / "000005.dakf", empty)
        code, out, _ = run(capsys, "vo", tmp_path / "s")
        assert code == 0
        assert out.count("status=fallback") == 2
        assert parse_kv(out)["fallbacks"] == "2"
        assert len(read_poses(tmp_path / "s" / "poses_est.txt")) == 12

    def test_depth_maps_fill_missing_depths(self, capsys, tmp_path):
        d = tmp_path / "planar"
        assert run(capsys, "synth", "--output", d, "--set", "synth.planar=true", "--set", "synth.n_frames=3",
                   "--set", "synth.step=0.2", "--set", "synth.descriptor_dim=32", "--set", "synth.motion=random")[0] == 0
        assert (d / "depth" / "000000.pfm").exists() and (d / "images" / "000002.pfm").exists()
        for p in (d / "features").iterdir():
            f = read_features(p)
            write_features(p, KeypointFrame(f.positions, f.descriptors, f.scores, None, f.image_size))
        assert run(capsys, "vo", d)[0] == 0
        est, gt = read_poses(d / "poses_est.txt"), read_poses(d / "poses_gt.txt")
        # keypoint depths now come from float32 PFM maps
        assert max(np.linalg.norm(a.translation - b.translation) for a, b in zip(est, gt)) < 1e-4


class TestEval:
    def test_eval_traj_identical(self, capsys, small_seq, tmp_path):
        gt = read_poses(small_seq / "poses_gt.txt")
        code, out, _ = run(capsys, "eval-traj", small_seq / "poses_gt.txt", small_seq / "poses_gt.txt",
                           "--lengths", "5", "10")
        assert code == 0
        kv = parse_kv(out)
        assert float(kv["t_rel"]) < 1e-9 and float(kv["r_rel"]) < 1e-9
        assert abs(float(kv["sim3_scale"]) - 1) < 1e-12
        assert len(gt) == 12

    def test_eval_traj_json_and_output(self, capsys, small_seq, tmp_path):
        report = tmp_path / "r.json"
        code, out, _ = run(capsys, "eval-traj", small_seq / "poses_gt.txt", small_seq / "poses_gt.txt",
                           "--lengths", "5", "--format", "json", "--output", report)
        assert code == 0
        doc = json.loads(out)
        assert set(doc) >= {"t_rel", "r_rel", "n_segments", "t_rel_unaligned", "r_rel_unaligned"}
        assert report.read_text() == out

    def test_eval_traj_too_short(self, capsys, small_seq):
        code, _, err = run(capsys, "eval-traj", small_seq / "poses_gt.txt", small_seq / "poses_gt.txt")
        assert code == cli.EXIT_DATA and "shorter" in err

    def test_eval_traj_length_mismatch(self, capsys, small_seq, tmp_path):
        write_poses(tmp_path / "short.txt", read_poses(small_seq / "poses_gt.txt")[:5])
        assert run(capsys, "eval-traj", tmp_path / "short.txt", small_seq / "poses_gt.txt")[0] == cli.EXIT_DATA

    def test_eval_kp_identity(self, capsys, small_seq, tmp_path):
        (tmp_path / "H.txt").write_text("1 0 0\n0 1 0\n0 0 1\n")
        f = small_seq / "features" / "000000.dakf"
        code, out, _ = run(capsys, "eval-kp", f, f, tmp_path / "H.txt", "--format", "json")
        assert code == 0
        doc = json.loads(out)
        assert doc["repeatability"] == 1.0 and doc["localization_error"] == 0.0 and doc["matching_score"] == 1.0
        assert doc["homography_accuracy_eps1"] == 1

    def test_eval_kp_bad_homography(self, capsys, small_seq, tmp_path):
        (tmp_path / "H.txt").write_text("1 0 0\n")
        f = small_seq / "features" / "000000.dakf"
        assert run(capsys, "eval-kp", f, f, tmp_path / "H.txt")[0] == cli.EXIT_DATA


class TestSynthAndConfig:
    def test_written_config_reloads(self, capsys, small_seq, tmp_path):
        text = (small_seq / "config.txt").read_text()
        assert "fx = 500.0" in text and "seed = 3" in text
        code, _, _ = run(capsys, "synth", "--output", tmp_path, "--config", small_seq / "config.txt")
        assert code == 0
        for name in ("poses_gt.txt", "features/000007.dakf", "config.txt"):
            assert (tmp_path / name).read_bytes() == (small_seq / name).read_bytes()

    def test_flags_override_config(self, capsys, small_seq, tmp_path):
        code, _, _ = run(capsys, "synth", "--output", tmp_path, "--config", small_seq / "config.txt",
                         "--seed", "4", "--ransac-iters", "77", "--ransac-thresh", "2.5")
        assert code == 0
        text = (tmp_path / "config.txt").read_text()
        assert "seed = 4" in text and "ransac.max_iterations = 77" in text
        assert "ransac.inlier_threshold_px = 2.5" in text
        assert (tmp_path / "poses_gt.txt").read_bytes() != (small_seq / "poses_gt.txt").read_bytes()

    def test_bad_synth_settings(self, capsys, tmp_path):
        assert run(capsys, "synth", "--output", tmp_path, "--set", "synth.motion=teleport")[0] == cli.EXIT_DATA

    def test_gradcheck_table(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--instances", "2", "--only", "geometric_loss", "smoothness_loss")
        assert code == 0
        assert out.count("result=PASS") == 2


class TestDeterminism:
    def test_every_command_byte_identical(self, capsys, tmp_path, small_seq):
        (tmp_path / "H.txt").write_text("1.01 0.02 3\n-0.01 0.99 -2\n0 0 1\n")
        fa, fb = small_seq / "features" / "000000.dakf", small_seq / "features" / "000001.dakf"
        commands = [
            ["synth", "--output", tmp_path / "s", "--seed", "9", *SMALL],
            ["vo", small_seq, "--output", tmp_path / "est.txt"],
            ["eval-traj", small_seq / "poses_est.txt", small_seq / "poses_gt.txt", "--lengths", "5"],
            ["eval-kp", fa, fb, tmp_path / "H.txt"],
            ["gradcheck", "--instances", "1"],
        ]
        run(capsys, "vo", small_seq)
        for argv in commands:
            first = run(capsys, *argv)
            files = {p: p.read_bytes() for p in sorted(tmp_path.rglob("*")) if p.is_file()}
            second = run(capsys, *argv)
            assert first == second, argv
            assert files == {p: p.read_bytes() for p in sorted(tmp_path.rglob("*")) if p.is_file()}, argv


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "kp3d", "synth", "--output", str(tmp_path), *SMALL],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "frames=12" in res.stdout
