"""Tests for validation utilities."""

import numpy as np
import pytest

from src.models.exceptions import ValidationError
from src.utils.validators import (
    parse_frame_range,
    validate_frame_range,
    validate_image_shapes,
    validate_pixels,
    validate_pose,
)


class TestValidatePixels:
    """Test validate_pixels function."""

    def test_valid_pixels(self):
        """Test pixels inside the image pass as floats."""
        out = validate_pixels(np.array([[0, 0], [3, 2]]), width=4, height=3)
        assert out.dtype == np.float64

    def test_outside_pixel_reports_index(self):
        """Test that the first offending pixel is named."""
        with pytest.raises(ValidationError) as exc_info:
            validate_pixels(np.array([[0, 0], [4, 1]]), width=4, height=3)
        assert exc_info.value.index == 1
        assert "outside image of size 4x3" in str(exc_info.value)

    def test_wrong_shape(self):
        """Test that pixels must be (N, 2)."""
        with pytest.raises(ValidationError):
            validate_pixels(np.zeros((3, 3)), width=4, height=4)


class TestValidateImages:
    """Test validate_image_shapes function."""

    def test_matching_shapes(self):
        """Test consistent images return (height, width)."""
        shape = validate_image_shapes(
            np.zeros((2, 5, 3), np.uint8), np.zeros((2, 5), np.uint16), np.zeros((2, 5))
        )
        assert shape == (2, 5)

    def test_depth_mismatch(self):
        """Test a depth image of the wrong size."""
        with pytest.raises(ValidationError) as exc_info:
            validate_image_shapes(np.zeros((2, 5, 3)), np.zeros((5, 2)), np.zeros((2, 5)))
        assert "Depth image" in str(exc_info.value)

    def test_non_binary_mask(self):
        """Test mask values other than 0 and 1."""
        with pytest.raises(ValidationError):
            validate_image_shapes(np.zeros((2, 2, 3)), np.zeros((2, 2)), np.full((2, 2), 2))


class TestValidatePose:
    """Test validate_pose function."""

    def test_identity(self):
        """Test the identity pose."""
        np.testing.assert_array_equal(validate_pose(np.eye(4)), np.eye(4))

    def test_reflection_rejected(self):
        """Test that a reflection is not a rigid motion."""
        pose = np.diag([1.0, 1.0, -1.0, 1.0])
        with pytest.raises(ValidationError) as exc_info:
            validate_pose(pose)
        assert "negative determinant" in str(exc_info.value)

    def test_scaled_rotation_rejected(self):
        """Test that a scaled rotation is not orthonormal."""
        with pytest.raises(ValidationError):
            validate_pose(np.diag([2.0, 2.0, 2.0, 1.0]))

    def test_bad_shape(self):
        """Test that poses must be 4x4."""
        with pytest.raises(ValidationError):
            validate_pose(np.eye(3))


class TestFrameRanges:
    """Test frame range parsing and validation."""

    def test_parse_range(self):
        """Test a:b and single-index forms."""
        assert parse_frame_range("0:5") == (0, 5)
        assert parse_frame_range("3") == (3, 4)

    def test_parse_invalid(self):
        """Test malformed ranges."""
        with pytest.raises(ValidationError):
            parse_frame_range("a:b")
        with pytest.raises(ValidationError):
            parse_frame_range("5:2")

    def test_out_of_range_names_valid_range(self):
        """Test that the message lists the valid frame range."""
        with pytest.raises(ValidationError) as exc_info:
            validate_frame_range([0, 7], frame_count=5)
        assert "valid frames are 0..4" in str(exc_info.value)
