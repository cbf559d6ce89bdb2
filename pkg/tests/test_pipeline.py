import json

import numpy as np
import pytest

from thermoslam import evalsim
from thermoslam.cli import main as cli_main
from thermoslam.config import PipelineConfig
from thermoslam.errors import ConfigError, IngestionError
from thermoslam.pipeline import load_dataset, run_slam


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    """Short noiseless loop with ground-truth feature files."""
    root = tmp_path_factory.mktemp("smallds") / "circle"
    world = evalsim.circle_world(
        radius=50.0, n_frames=400, n_landmarks=1200, n_clusters=0, seed=11
    )
    # keep the gentle per-frame motion of the long loop but only render the
    # first short arc
    world.trajectory = evalsim.Trajectory(
        world.trajectory.timestamps[:30], world.trajectory.poses[:30]
    )
    evalsim.generate_dataset(world, root, seed=11)
    return root


def file_provider_config(sync=True):
    cfg = PipelineConfig()
    cfg.features.provider = "file"
    cfg.run.sync = sync
    return cfg


class TestLoadDataset:
    def test_full_layout(self, small_dataset):
        ds = load_dataset(small_dataset)
        assert len(ds.frames) == 30
        assert ds.gt is not None
        ts = [f.timestamp for f in ds.frames]
        assert ts == sorted(ts)
        assert all(f.features is not None for f in ds.frames)
        assert all(f.right_features is not None for f in ds.frames)
        assert ds.rig.intrinsics.fx == 400.0

    def test_missing_calibration(self, tmp_path):
        (tmp_path / "left").mkdir()
        (tmp_path / "right").mkdir()
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)

    def test_missing_frame_directory(self, tmp_path, small_dataset):
        (tmp_path / "calib.txt").write_bytes((small_dataset / "calib.txt").read_bytes())
        (tmp_path / "left").mkdir()
        with pytest.raises(IngestionError):
            load_dataset(tmp_path)

    def test_unpaired_frame_named_in_error(self, tmp_path, small_dataset):
        (tmp_path / "calib.txt").write_bytes((small_dataset / "calib.txt").read_bytes())
        (tmp_path / "left").mkdir()
        (tmp_path / "right").mkdir()
        (tmp_path / "left" / "1.000000.png").write_bytes(b"")
        with pytest.raises(IngestionError, match="1.000000"):
            load_dataset(tmp_path)

    def test_empty_dataset(self, tmp_path, small_dataset):
        (tmp_path / "calib.txt").write_bytes((small_dataset / "calib.txt").read_bytes())
        (tmp_path / "left").mkdir()
        (tmp_path / "right").mkdir()
        with pytest.raises(IngestionError):
            load_dataset(tmp_path)


class TestRunSlam:
    def test_short_sequence_tracks(self, small_dataset, tmp_path):
        result = run_slam(file_provider_config(), small_dataset, tmp_path / "out")
        assert result.status == 0
        assert len(result.trajectory) == 30
        assert result.trajectory.tracked.all()
        gt = evalsim.load_tum(small_dataset / "gt.txt")
        rep = evalsim.compute_metrics(result.trajectory, gt)
        assert rep.cr == 1.0
        assert rep.ate_rmse < 0.2
        assert (tmp_path / "out" / "trajectory.txt").is_file()
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["frames"] == 30
        assert manifest["stage_timing"] is None  # omitted for reproducibility

    def test_sync_runs_are_byte_identical(self, small_dataset, tmp_path):
        for sub in ("r1", "r2"):
            run_slam(file_provider_config(), small_dataset, tmp_path / sub)
        t1 = (tmp_path / "r1" / "trajectory.txt").read_bytes()
        t2 = (tmp_path / "r2" / "trajectory.txt").read_bytes()
        assert t1 == t2
        m1 = (tmp_path / "r1" / "manifest.json").read_bytes()
        m2 = (tmp_path / "r2" / "manifest.json").read_bytes()
        assert m1 == m2

    def test_async_mode_records_timing(self, small_dataset, tmp_path):
        result = run_slam(file_provider_config(sync=False), small_dataset, tmp_path / "out")
        assert result.status == 0
        assert result.manifest.stage_timing
        assert all(v >= 0 for v in result.manifest.stage_timing.values())


class TestCli:
    def test_sim_writes_dataset(self, tmp_path, capsys):
        ds = tmp_path / "ds"
        assert cli_main([
            "sim", "--out", str(ds), "--frames", "12", "--radius", "50",
            "--landmarks", "400", "--seed", "5",
        ]) == 0
        assert len(list((ds / "left").glob("*.png"))) == 12
        assert (ds / "gt.txt").is_file()

    def test_slam_and_eval(self, small_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli_main([
            "slam", str(small_dataset), "--provider", "file", "--sync",
            "--out", str(out),
        ]) == 0
        assert (out / "trajectory.txt").is_file()
        assert cli_main([
            "eval", str(out / "trajectory.txt"), str(small_dataset / "gt.txt"),
            "--out", str(tmp_path / "eval"),
        ]) == 0
        printed = capsys.readouterr().out
        assert "ate" in printed.lower()

    def test_features_inspect(self, small_dataset, capsys):
        feat_file = sorted((small_dataset / "features").glob("*.feat"))[0]
        assert cli_main(["features", "--inspect", str(feat_file)]) == 0
        assert "keypoints" in capsys.readouterr().out
