"""Tests for pinhole cameras."""

import numpy as np
import pytest

from src.diffmath import tensor as T
from src.diffmath.gradcheck import grad_check
from src.diffmath.tensor import Tensor, no_grad
from src.models.camera import Camera, Intrinsics
from src.models.exceptions import ValidationError
from src.utils.se3 import look_at


class TestIntrinsics:
    """Test Intrinsics class."""

    def test_invalid_focal(self):
        """Test that focal lengths must be positive."""
        with pytest.raises(ValidationError):
            Intrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0, width=2, height=2)

    def test_pixel_grid_order(self):
        """Test the row-major (px, py) pixel order."""
        grid = Intrinsics(1.0, 1.0, 0.0, 0.0, width=3, height=2).pixel_grid()
        np.testing.assert_array_equal(grid[:4], [[0, 0], [1, 0], [2, 0], [0, 1]])
        assert len(grid) == 6

    def test_ray_scale_on_axis(self, intrinsics):
        """Test that the principal point has unit ray scale."""
        scale = intrinsics.ray_scale(np.array([[12, 12], [0, 12]]))
        assert scale[0] == pytest.approx(1.0)
        assert scale[1] == pytest.approx(np.sqrt(1.0 + (12.0 / 30.0) ** 2))


class TestCamera:
    """Test Camera class."""

    def test_center_ray_looks_forward(self, intrinsics, front_pose):
        """Test that the principal ray of a look-at camera hits the target."""
        camera = Camera(intrinsics, front_pose)
        origins, directions, scale = camera.generate_rays(np.array([[12, 12]]))
        np.testing.assert_allclose(origins.data[0], [0.0, 0.0, -2.0])
        np.testing.assert_allclose(directions.data[0], [0.0, 0.0, 1.0], atol=1e-12)
        assert scale.data[0] == pytest.approx(1.0)

    def test_image_down_is_world_down(self, intrinsics, front_pose):
        """Test that pixels below the center look towards -y."""
        camera = Camera(intrinsics, front_pose)
        _, directions, _ = camera.generate_rays(np.array([[12, 23]]))
        assert directions.data[0, 1] < 0

    def test_pixel_outside_image(self, intrinsics, front_pose):
        """Test that out-of-image pixels are rejected."""
        camera = Camera(intrinsics, front_pose)
        with pytest.raises(ValidationError):
            camera.generate_rays(np.array([[24, 0]]))

    def test_back_project_then_project(self, intrinsics):
        """Test that projection inverts back-projection."""
        pose = look_at(np.array([0.4, 0.3, -1.8]), np.zeros(3), np.array([0.0, 1.0, 0.0]))
        camera = Camera(intrinsics, pose)
        pixels = np.array([[3, 4], [12, 12], [20, 7]])
        depth = np.array([1.5, 2.0, 0.7])
        points, keep = camera.back_project(pixels, depth)
        projected, z = camera.project(points.data)
        np.testing.assert_array_equal(keep, [0, 1, 2])
        np.testing.assert_allclose(projected, pixels, atol=1e-9)
        np.testing.assert_allclose(z, depth, atol=1e-12)

    def test_back_project_skips_invalid_depth(self, intrinsics, front_pose):
        """Test that zero and non-finite depths are dropped."""
        camera = Camera(intrinsics, front_pose)
        points, keep = camera.back_project(np.array([[1, 1], [2, 2], [3, 3]]), np.array([0.0, np.nan, 1.0]))
        np.testing.assert_array_equal(keep, [2])
        assert points.shape == (1, 3)

    def test_along_ray_distance_from_z_depth(self, intrinsics, front_pose):
        """Test that z-depth times ray scale is the distance from the camera center."""
        camera = Camera(intrinsics, front_pose)
        pixel = np.array([[2, 21]])
        points, _ = camera.back_project(pixel, np.array([1.7]))
        origins, _, scale = camera.generate_rays(pixel)
        distance = np.linalg.norm(points.data[0] - origins.data[0])
        assert distance == pytest.approx(1.7 * scale.data[0])

    def test_unknown_role(self, intrinsics, front_pose):
        """Test validation of the camera role."""
        with pytest.raises(ValidationError):
            Camera(intrinsics, front_pose, role="thermal")

    def test_rays_differentiable_in_intrinsics_and_pose(self, intrinsics, front_pose):
        """Test gradients of ray directions with respect to camera parameters."""
        pixels = np.array([[2, 3], [15, 20]])

        def fn(params: Tensor) -> Tensor:
            camera = Camera(intrinsics, front_pose, intrinsics_param=params[:4], pose_delta=params[4:])
            origins, directions, _ = camera.generate_rays(pixels)
            return T.tsum(directions * np.array([0.3, -0.5, 0.2])) + T.tsum(origins * origins)

        point = np.concatenate([intrinsics.as_array(), [0.01, -0.02, 0.03, 0.1, 0.0, 0.05]])
        report = grad_check(fn, point, tol=1e-4, step=1e-6)
        assert report.passed, report.to_text()

    def test_learnable_pose_delta_moves_center(self, intrinsics, front_pose):
        """Test that a translation delta shifts the ray origins."""
        delta = Tensor(np.array([0.0, 0.0, 0.0, 0.1, 0.0, 0.0]))
        camera = Camera(intrinsics, front_pose, pose_delta=delta)
        with no_grad():
            origins, _, _ = camera.generate_rays(np.array([[0, 0]]))
        np.testing.assert_allclose(origins.data[0], [0.1, 0.0, -2.0], atol=1e-12)
