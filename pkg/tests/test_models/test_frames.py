"""Tests for frames, normalization and datasets."""

import numpy as np
import pytest

from src.models.camera import Intrinsics
from src.models.exceptions import DatasetError, ValidationError
from src.models.frames import Dataset, FrameRecord, SceneNormalization


def make_frame(index: int = 0, pose: np.ndarray = None) -> FrameRecord:
    depth = np.zeros((3, 4), dtype=np.uint16)
    depth[1, 2] = 1500
    depth[2, 3] = 800
    mask = np.zeros((3, 4), dtype=bool)
    mask[1, 2] = True
    mask[0, 0] = True
    return FrameRecord(
        index=index,
        color=np.zeros((3, 4, 3), dtype=np.uint8),
        depth=depth,
        mask=mask,
        base_pose=np.eye(4) if pose is None else pose,
    )


class TestFrameRecord:
    """Test FrameRecord class."""

    def test_surface_pixels_need_mask_and_depth(self):
        """Test that only masked pixels with valid depth are surface pixels."""
        frame = make_frame()
        np.testing.assert_array_equal(frame.surface_pixels(), [[2, 1]])
        assert (frame.height, frame.width) == (3, 4)

    def test_mask_is_boolean(self):
        """Test that 0/1 masks are stored as booleans."""
        frame = make_frame()
        assert frame.mask.dtype == bool

    def test_invalid_pose(self):
        """Test that a non-rigid pose is rejected."""
        with pytest.raises(ValidationError):
            make_frame(pose=np.diag([1.0, 2.0, 1.0, 1.0]))


class TestSceneNormalization:
    """Test SceneNormalization class."""

    def setup_method(self):
        """Setup a normalization."""
        self.norm = SceneNormalization(centroid=np.array([1.0, 2.0, 3.0]), scale=0.5, depth_scale=1000.0)

    def test_point_round_trip(self):
        """Test that denormalization inverts normalization."""
        points = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
        normalized = self.norm.normalize_points(points)
        np.testing.assert_allclose(normalized[0], 0.0)
        np.testing.assert_allclose(self.norm.denormalize_points(normalized), points)

    def test_pose_keeps_rotation(self):
        """Test that pose normalization only moves the translation."""
        pose = np.eye(4)
        pose[:3, 3] = [3.0, 2.0, 3.0]
        out = self.norm.normalize_pose(pose)
        np.testing.assert_allclose(out[:3, 3], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(out[:3, :3], np.eye(3))

    def test_depth_to_scene(self):
        """Test raw depth conversion; invalid pixels stay zero."""
        out = self.norm.depth_to_scene(np.array([0, 2000], dtype=np.uint16))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_dict_round_trip(self):
        """Test serialization to a dictionary."""
        restored = SceneNormalization.from_dict(self.norm.to_dict())
        np.testing.assert_allclose(restored.centroid, self.norm.centroid)
        assert restored.scale == self.norm.scale


class TestDataset:
    """Test Dataset class."""

    def setup_method(self):
        """Setup a two-frame dataset."""
        self.intrinsics = Intrinsics(2.0, 2.0, 2.0, 1.5, width=4, height=3)
        self.dataset = Dataset(
            frames=[make_frame(0), make_frame(1)],
            rgb_intrinsics=self.intrinsics,
            normalization=SceneNormalization.identity(1000.0),
        )

    def test_empty_dataset(self):
        """Test that a dataset needs frames."""
        with pytest.raises(DatasetError):
            Dataset(frames=[], rgb_intrinsics=self.intrinsics, normalization=SceneNormalization.identity())

    def test_depth_camera_defaults_to_rgb(self):
        """Test the shared-camera case."""
        assert not self.dataset.has_distinct_depth_camera
        assert self.dataset.depth_camera is self.intrinsics

    def test_scene_depth(self):
        """Test per-frame normalized depth."""
        assert self.dataset.scene_depth(0)[1, 2] == pytest.approx(1.5)

    def test_with_poses_replaces_and_changes_hash(self):
        """Test pose replacement and its effect on the content hash."""
        pose = np.eye(4)
        pose[:3, 3] = [0.1, 0.0, 0.0]
        moved = self.dataset.with_poses(np.stack([pose, pose]))
        np.testing.assert_allclose(moved.frames[1].base_pose, pose)
        np.testing.assert_allclose(self.dataset.frames[1].base_pose, np.eye(4))
        assert moved.content_hash() != self.dataset.content_hash()

    def test_content_hash_is_deterministic(self):
        """Test that equal content hashes equally."""
        twin = Dataset(
            frames=[make_frame(0), make_frame(1)],
            rgb_intrinsics=self.intrinsics,
            normalization=SceneNormalization.identity(1000.0),
        )
        assert twin.content_hash() == self.dataset.content_hash()
