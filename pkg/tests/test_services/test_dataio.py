"""Tests for dataset reading and writing."""

import json

import numpy as np
import pytest

from src.models.camera import Camera, Intrinsics
from src.models.exceptions import DatasetError
from src.models.frames import Dataset, SceneNormalization
from src.services.dataio import (
    NORMALIZED_RADIUS,
    DatasetLoader,
    load_dataset,
    parse_intrinsics,
    parse_poses,
)
from src.services.synthetic import synth_generate


class TestParsing:
    """Test the text file parsers."""

    def test_intrinsics_single_camera(self, tmp_path):
        """Test the seven-value first line."""
        path = tmp_path / "intrinsics.txt"
        path.write_text("# fx fy cx cy w h scale\n500 510 320 240 640 480 1000\n")
        rgb, depth_scale, depth = parse_intrinsics(path)
        assert (rgb.fx, rgb.fy, rgb.cx, rgb.cy) == (500.0, 510.0, 320.0, 240.0)
        assert (rgb.width, rgb.height) == (640, 480)
        assert depth_scale == 1000.0
        assert depth is None

    def test_intrinsics_depth_camera(self, tmp_path):
        """Test an optional second line for a distinct depth camera."""
        path = tmp_path / "intrinsics.txt"
        path.write_text("500 500 320 240 640 480 1000\n300 300 160 120 320 240\n")
        _, _, depth = parse_intrinsics(path)
        assert depth is not None
        assert (depth.width, depth.height) == (320, 240)

    def test_intrinsics_malformed(self, tmp_path):
        """Test a first line with the wrong count."""
        path = tmp_path / "intrinsics.txt"
        path.write_text("500 500 320 240 640\n")
        with pytest.raises(DatasetError):
            parse_intrinsics(path)

    def test_intrinsics_bad_depth_scale(self, tmp_path):
        """Test that the depth scale must be positive."""
        path = tmp_path / "intrinsics.txt"
        path.write_text("500 500 320 240 640 480 0\n")
        with pytest.raises(DatasetError):
            parse_intrinsics(path)

    def test_poses_any_layout(self, tmp_path):
        """Test that 16 numbers per pose may span lines."""
        path = tmp_path / "poses.txt"
        flat = " ".join(str(v) for v in np.eye(4).ravel())
        path.write_text(f"{flat}\n" + "\n".join(" ".join(str(v) for v in row) for row in np.eye(4)) + "\n")
        poses = parse_poses(path)
        assert poses.shape == (2, 4, 4)
        np.testing.assert_array_equal(poses[1], np.eye(4))

    def test_poses_incomplete(self, tmp_path):
        """Test a number count that is not a multiple of 16."""
        path = tmp_path / "poses.txt"
        path.write_text("1 0 0 0 0 1 0 0\n")
        with pytest.raises(DatasetError):
            parse_poses(path)


class TestDatasetLoader:
    """Test DatasetLoader class."""

    def test_round_trip(self, tmp_path, synthetic_spec):
        """Test that loading returns what was written."""
        written_dataset, written = synth_generate(synthetic_spec, tmp_path / "scene")
        assert all(path.exists() for path in written)

        loaded = DatasetLoader(workers=2).load(tmp_path / "scene")
        assert len(loaded) == len(written_dataset)
        assert loaded.normalization.depth_scale == synthetic_spec.depth_scale
        for before, after in zip(written_dataset.frames, loaded.frames):
            np.testing.assert_array_equal(after.color, before.color)
            np.testing.assert_array_equal(after.depth, before.depth)
            np.testing.assert_array_equal(after.mask, before.mask)
            np.testing.assert_array_equal(after.base_pose, before.base_pose)
        assert loaded.rgb_intrinsics == written_dataset.rgb_intrinsics

    def test_masked_points_inside_normalized_radius(self, synthetic_dataset):
        """Test that every masked depth point lands within the normalization radius."""
        for index, frame in enumerate(synthetic_dataset.frames):
            pixels = frame.surface_pixels()
            depth = synthetic_dataset.scene_depth(index)[pixels[:, 1], pixels[:, 0]]
            camera = Camera(synthetic_dataset.rgb_intrinsics, synthetic_dataset.normalized_pose(index))
            points, _ = camera.back_project(pixels, depth)
            assert np.max(np.linalg.norm(points.data, axis=-1)) <= NORMALIZED_RADIUS + 1e-6

    def test_missing_layout(self, tmp_path):
        """Test that every missing piece is listed."""
        (tmp_path / "color").mkdir()
        with pytest.raises(DatasetError) as exc_info:
            load_dataset(tmp_path)
        problems = exc_info.value.problems
        assert "missing directory depth/" in problems
        assert "missing directory mask/" in problems
        assert "missing file intrinsics.txt" in problems
        assert "missing file poses.txt" in problems

    def test_missing_frame_file(self, synthetic_root):
        """Test a missing depth image."""
        (synthetic_root / "depth" / "000001.png").unlink()
        with pytest.raises(DatasetError) as exc_info:
            load_dataset(synthetic_root)
        assert "missing depth/000001.png" in exc_info.value.problems

    def test_pose_count_mismatch(self, synthetic_root):
        """Test fewer poses than frames."""
        lines = (synthetic_root / "poses.txt").read_text().splitlines()
        (synthetic_root / "poses.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetError) as exc_info:
            load_dataset(synthetic_root)
        assert any("poses.txt has 2 poses" in p for p in exc_info.value.problems)

    def test_missing_directory(self, tmp_path):
        """Test a dataset root that does not exist."""
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nowhere")

    def test_normalization_override(self, synthetic_root):
        """Test that normalization.json replaces the computed normalization."""
        override = SceneNormalization(centroid=np.array([0.1, 0.2, 0.3]), scale=2.0, depth_scale=10000.0)
        (synthetic_root / "normalization.json").write_text(json.dumps(override.to_dict()))
        dataset = load_dataset(synthetic_root)
        np.testing.assert_allclose(dataset.normalization.centroid, [0.1, 0.2, 0.3])
        assert dataset.normalization.scale == 2.0

    def test_distinct_depth_camera(self, tmp_path, synthetic_dataset):
        """Test that a second intrinsics line gives a separate depth camera."""
        depth_camera = Intrinsics(28.0, 28.0, 12.0, 12.0, width=24, height=24)
        dataset = Dataset(
            frames=synthetic_dataset.frames,
            rgb_intrinsics=synthetic_dataset.rgb_intrinsics,
            normalization=synthetic_dataset.normalization,
            depth_intrinsics=depth_camera,
        )
        DatasetLoader().save(dataset, tmp_path / "copy")
        loaded = load_dataset(tmp_path / "copy")
        assert loaded.has_distinct_depth_camera
        assert loaded.depth_camera == depth_camera
