"""Pinhole cameras and ray batches."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.diffmath import tensor as T
from src.diffmath.tensor import Tensor
from src.models.exceptions import ValidationError
from src.utils.se3 import compose_delta
from src.utils.validators import validate_pixels

CAMERA_ROLES = ("rgb", "depth")


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels; pixel (cx, cy) lies on the optical axis."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"Focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"Image size must be positive: {self.width}x{self.height}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ray_scale(self, pixels: np.ndarray) -> np.ndarray:
        """Norm of K^-1 (px, py, 1): the ratio of along-ray distance to z-depth."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[:, 0] - self.cx) / self.fx
        y = (pixels[:, 1] - self.cy) / self.fy
        return np.sqrt(x * x + y * y + 1.0)

    def pixel_grid(self) -> np.ndarray:
        """All pixels in row-major order as (px, py)."""
        py, px = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([px.ravel(), py.ravel()], axis=-1)


@dataclass
class Camera:
    """One camera of one frame with optionally learnable intrinsics and pose delta.

    The pose is world-from-camera: Exp(pose_delta) * base_pose.
    """

    intrinsics: Intrinsics
    base_pose: np.ndarray
    role: str = "rgb"
    intrinsics_param: Optional[Tensor] = None
    pose_delta: Optional[Tensor] = None

    def __post_init__(self) -> None:
        if self.role not in CAMERA_ROLES:
            raise ValidationError(f"Unknown camera role '{self.role}'. Valid roles: {CAMERA_ROLES}")

    def intrinsic_values(self, dtype: np.dtype = np.float64) -> Tensor:
        if self.intrinsics_param is not None:
            return self.intrinsics_param
        return Tensor(self.intrinsics.as_array().astype(dtype))

    def pose(self, dtype: np.dtype = np.float64) -> Tuple[Tensor, Tensor]:
        """(rotation, translation) of the refined world-from-camera transform."""
        if self.pose_delta is None:
            return (
                Tensor(self.base_pose[:3, :3].astype(dtype)),
                Tensor(self.base_pose[:3, 3].astype(dtype)),
            )
        return compose_delta(self.pose_delta, self.base_pose)

    def _dtype(self) -> np.dtype:
        for param in (self.intrinsics_param, self.pose_delta):
            if param is not None:
                return param.dtype
        return np.dtype(np.float64)

    def camera_directions(self, pixels: np.ndarray) -> Tensor:
        """Unnormalized K^-1 (px, py, 1) for validated pixels, shape (N, 3)."""
        pixels = validate_pixels(pixels, self.intrinsics.width, self.intrinsics.height)
        k = self.intrinsic_values(self._dtype())
        x = (pixels[:, 0] - k[2]) / k[0]
        y = (pixels[:, 1] - k[3]) / k[1]
        return T.stack([x, y, Tensor(np.ones(len(pixels), dtype=k.dtype))], axis=-1)

    def generate_rays(self, pixels: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Back-project pixels to world rays.

        Args:
            pixels: (N, 2) pixel coordinates inside the image

        Returns:
            (origins (N, 3), unit directions (N, 3), ray scale (N,)) where the
            ray scale converts z-depth to along-ray distance

        Raises:
            ValidationError: If a pixel is outside the image
        """
        local = self.camera_directions(pixels)
        rotation, translation = self.pose(local.dtype)
        scale = T.norm(local, axis=-1)
        directions = (local @ rotation.T) / T.unsqueeze(scale, -1)
        origins = T.broadcast_to(translation, (len(pixels), 3))
        return origins, directions, scale

    def back_project(self, pixels: np.ndarray, depth: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """
        Lift pixels with z-depth to world points.

        Pixels with zero or non-finite depth are skipped.

        Returns:
            (points (M, 3), indices of the kept pixels)
        """
        depth = np.asarray(depth, dtype=np.float64)
        keep = np.flatnonzero(np.isfinite(depth) & (depth > 0))
        local = self.camera_directions(np.asarray(pixels)[keep]) * depth[keep, None]
        rotation, translation = self.pose(local.dtype)
        return local @ rotation.T + translation, keep

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Numpy projection of world points to (pixels, z-depth) at current parameter values."""
        rotation, translation = self.pose()
        k = self.intrinsic_values().data.astype(np.float64)
        local = (np.asarray(points, dtype=np.float64) - translation.data) @ rotation.data
        z = local[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = k[0] * local[:, 0] / z + k[2]
            py = k[1] * local[:, 1] / z + k[3]
        return np.stack([px, py], axis=-1), z


@dataclass
class Ray:
    """A single ray of a batch, for inspection."""

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: np.ndarray
    frame: int
    color: Optional[np.ndarray]
    depth: Optional[float]
    mask: float


@dataclass
class RayBatch:
    """Rays of one frame with their observations.

    ``depth`` holds the observed along-ray distance in normalized units (0 means
    invalid); ``hit`` marks rays that intersect the unit sphere.
    """

    frame: int
    pixels: np.ndarray
    origins: Tensor
    directions: Tensor
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    mask: np.ndarray
    color: Optional[np.ndarray] = None
    depth: Optional[Tensor] = None

    def __len__(self) -> int:
        return len(self.pixels)

    def ray(self, index: int) -> Ray:
        return Ray(
            origin=self.origins.data[index],
            direction=self.directions.data[index],
            near=float(self.near[index]),
            far=float(self.far[index]),
            pixel=self.pixels[index],
            frame=self.frame,
            color=None if self.color is None else self.color[index],
            depth=None if self.depth is None else float(self.depth.data[index]),
            mask=float(self.mask[index]),
        )
