"""Input validation utilities."""

from typing import Sequence, Tuple

import numpy as np

from src.models.exceptions import ValidationError


def validate_pixels(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """
    Validate integer pixel coordinates against an image size.

    Args:
        pixels: Array of shape (N, 2) holding (px, py)
        width: Image width in pixels
        height: Image height in pixels

    Returns:
        The pixels as a float array

    Raises:
        ValidationError: If the array is misshapen or a pixel lies outside the image
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValidationError(f"Pixels must have shape (N, 2), got {pixels.shape}")

    outside = (
        (pixels[:, 0] < 0)
        | (pixels[:, 0] > width - 1)
        | (pixels[:, 1] < 0)
        | (pixels[:, 1] > height - 1)
        | ~np.all(np.isfinite(pixels), axis=1)
    )
    if np.any(outside):
        index = int(np.argmax(outside))
        px, py = pixels[index]
        raise ValidationError(
            f"Pixel ({px}, {py}) outside image of size {width}x{height}", index=index
        )
    return pixels.astype(np.float64)


def validate_image_shapes(
    color: np.ndarray, depth: np.ndarray, mask: np.ndarray
) -> Tuple[int, int]:
    """
    Validate that one frame's color, depth and mask images agree.

    Returns:
        (height, width) of the frame

    Raises:
        ValidationError: If shapes, channel counts or mask values are wrong
    """
    if color.ndim != 3 or color.shape[2] != 3:
        raise ValidationError(f"Color image must be HxWx3, got {color.shape}")
    height, width = color.shape[:2]
    if depth.shape != (height, width):
        raise ValidationError(f"Depth image {depth.shape} does not match color {(height, width)}")
    if mask.shape != (height, width):
        raise ValidationError(f"Mask image {mask.shape} does not match color {(height, width)}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("Mask values must be 0 or 1")
    return height, width


def validate_pose(pose: np.ndarray, tolerance: float = 1e-4) -> np.ndarray:
    """
    Validate a 4x4 rigid transform.

    Raises:
        ValidationError: If the matrix is not a proper rigid motion
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValidationError(f"Pose must be 4x4, got {pose.shape}")
    rotation = pose[:3, :3]
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=tolerance):
        raise ValidationError("Pose rotation is not orthonormal")
    if np.linalg.det(rotation) < 0:
        raise ValidationError("Pose rotation has negative determinant")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValidationError(f"Pose bottom row must be (0, 0, 0, 1), got {pose[3]}")
    return pose


def validate_frame_range(frames: Sequence[int], frame_count: int) -> None:
    """
    Validate frame indices against a dataset size.

    Raises:
        ValidationError: Naming the valid range when an index is out of range
    """
    for position, frame in enumerate(frames):
        if frame < 0 or frame >= frame_count:
            raise ValidationError(
                f"Frame {frame} out of range; valid frames are 0..{frame_count - 1}",
                index=position,
            )


def parse_frame_range(text: str) -> Tuple[int, int]:
    """
    Parse ``a:b`` (half-open) or a single index ``a``.

    Raises:
        ValidationError: If the text is not a range
    """
    try:
        if ":" in text:
            start, stop = (int(part) for part in text.split(":", 1))
        else:
            start = int(text)
            stop = start + 1
    except ValueError:
        raise ValidationError(f"Invalid frame range: '{text}' (expected a:b or a)")
    if stop < start:
        raise ValidationError(f"Invalid frame range: '{text}' ends before it starts")
    return start, stop
