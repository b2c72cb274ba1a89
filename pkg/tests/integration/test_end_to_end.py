"""End-to-end integration tests."""

import json

import pytest

from main import main
from src.services.run_manifest import MANIFEST_NAME, RunManifest

SCENE = """
name = e2e
frames = 3
width = 24
height = 24
focal = 30.0
twist_rate = 0.05
rotation_deg_per_frame = 2.0
gt_mesh_resolution = 16
"""

CONFIG = """
iterations = 2
rays_per_batch = 16
depth_points_per_batch = 16
precision = float64
n_uniform = 16
n_importance = 4
importance_rounds = 1
checkpoint_every = 0
log_every = 1

model.n_blocks = 2
model.block_hidden_layers = 1
model.block_hidden_width = 8
model.block_bands = 2
model.deform_code_width = 4
model.appearance_code_width = 4
model.topology_dims = 1
model.topology_hidden_layers = 1
model.topology_hidden_width = 8
model.topology_bands = 2
model.sdf_hidden_layers = 2
model.sdf_hidden_width = 32
model.sdf_bands = 2
model.feature_width = 4
model.color_hidden_layers = 1
model.color_hidden_width = 8
model.color_bands = 1
"""


def assert_manifest(run_dir, command):
    manifest = RunManifest.read(run_dir / MANIFEST_NAME)
    assert manifest.command == command
    assert manifest.artifacts
    assert manifest.missing_artifacts() == []
    return manifest


@pytest.mark.integration
class TestEndToEnd:
    """End-to-end integration tests through the command line."""

    @pytest.fixture
    def files(self, tmp_path):
        """Write a tiny scene description and training config."""
        (tmp_path / "scene.spec").write_text(SCENE)
        (tmp_path / "tiny.cfg").write_text(CONFIG)
        return tmp_path

    def test_complete_workflow(self, files, capsys):
        """Test synth, train, render, extract and eval on one tiny scene."""
        data = files / "data"
        run = files / "run"
        main(["synth", "--config", str(files / "scene.spec"), "--out", str(data), "--quiet"])
        assert (data / "poses.txt").is_file()
        assert (data / "gt" / "mesh_000002.obj").is_file()
        assert_manifest(data, "synth")

        main(["train", "--config", str(files / "tiny.cfg"), "--dataset", str(data), "--out", str(run), "--quiet"])
        checkpoint = run / "checkpoints" / "final.ndr"
        assert checkpoint.is_file()
        assert len((run / "train_log.jsonl").read_text().splitlines()) == 2
        train_manifest = assert_manifest(run, "train")
        assert train_manifest.config["iterations"] == 2
        assert train_manifest.dataset_hash

        render_dir = files / "render"
        main(["render", str(checkpoint), "--frames", "0:2", "--dataset", str(data), "--out", str(render_dir)])
        assert (render_dir / "color" / "000001.png").is_file()
        assert not (render_dir / "color" / "000002.png").exists()
        assert (render_dir / "render_metrics.json").is_file()
        assert_manifest(render_dir, "render")

        mesh_dir = files / "mesh"
        main(["extract", str(checkpoint), "--frame", "1", "--res", "16", "--out", str(mesh_dir), "--quiet"])
        assert (mesh_dir / "mesh_000001.obj").is_file()
        assert_manifest(mesh_dir, "extract")

        eval_dir = files / "eval"
        main(
            [
                "eval", str(checkpoint), "--dataset", str(data), "--out", str(eval_dir),
                "--triples", "2", "--res", "16", "--quiet",
            ]
        )
        reports = json.loads((eval_dir / "metrics.json").read_text())
        assert set(reports) == {"geometry_error", "cycle_consistency", "chamfer"}
        assert len(reports["cycle_consistency"]["values"]) == 2
        assert_manifest(eval_dir, "eval")

        output = capsys.readouterr().out
        assert "Rendered 2 frames" in output

    def test_no_command(self):
        """Test that a bare invocation prints help and exits with usage status."""
        with pytest.raises(SystemExit) as exc_info:
            main([])
        assert exc_info.value.code == 2

    def test_unknown_metric(self, tmp_path):
        """Test that an unknown metric name is a usage error."""
        with pytest.raises(SystemExit) as exc_info:
            main(["eval", "x.ndr", "--dataset", "d", "--out", str(tmp_path), "--metrics", "psnr"])
        assert exc_info.value.code == 2

    def test_missing_dataset(self, files, capsys):
        """Test that a missing dataset fails with a readable error."""
        with pytest.raises(SystemExit) as exc_info:
            main(
                [
                    "train", "--config", str(files / "tiny.cfg"),
                    "--dataset", str(files / "nowhere"), "--out", str(files / "run"),
                ]
            )
        assert exc_info.value.code == 1
        assert "❌ Error" in capsys.readouterr().out

    def test_missing_checkpoint(self, tmp_path, capsys):
        """Test that an unreadable checkpoint fails with a readable error."""
        with pytest.raises(SystemExit) as exc_info:
            main(["extract", str(tmp_path / "none.ndr"), "--canonical", "--out", str(tmp_path)])
        assert exc_info.value.code == 1
        assert "❌ Error" in capsys.readouterr().out

    def test_synth_is_reproducible(self, files):
        """Test that the same seed writes byte-identical noisy depth images."""
        spec = files / "scene.spec"
        spec.write_text(SCENE + "depth_noise_std = 0.002\ndropout_rate = 0.1\n")
        first, second = files / "a", files / "b"
        for out in (first, second):
            main(["synth", "--config", str(spec), "--out", str(out), "--seed", "11", "--quiet"])

        names = sorted(p.name for p in (first / "depth").glob("*.png"))
        assert names == ["000000.png", "000001.png", "000002.png"]
        for name in names:
            assert (first / "depth" / name).read_bytes() == (second / "depth" / name).read_bytes()
