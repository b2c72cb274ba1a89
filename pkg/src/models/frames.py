"""Frames, scene normalization and datasets."""

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from src.models.camera import Intrinsics
from src.models.exceptions import DatasetError
from src.utils.validators import validate_image_shapes, validate_pose


@dataclass
class FrameRecord:
    """One time stamp of an RGB-D sequence.

    ``depth`` is the raw 16-bit sensor value; 0 marks an invalid pixel.
    """

    index: int
    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    base_pose: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask).astype(bool)
        validate_image_shapes(self.color, self.depth, self.mask.astype(np.uint8))
        self.base_pose = validate_pose(self.base_pose)

    @property
    def height(self) -> int:
        return int(self.color.shape[0])

    @property
    def width(self) -> int:
        return int(self.color.shape[1])

    def valid_depth(self) -> np.ndarray:
        return self.depth > 0

    def surface_pixels(self) -> np.ndarray:
        """(px, py) of masked pixels with valid depth."""
        py, px = np.nonzero(self.mask & self.valid_depth())
        return np.stack([px, py], axis=-1)


@dataclass(frozen=True)
class SceneNormalization:
    """Maps raw world units into the unit ball: p' = (p - centroid) * scale.

    ``depth_scale`` converts raw 16-bit depth values into raw world units.
    """

    centroid: np.ndarray
    scale: float
    depth_scale: float

    def normalize_points(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.centroid) * self.scale

    def denormalize_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.centroid

    def normalize_pose(self, pose: np.ndarray) -> np.ndarray:
        out = np.array(pose, dtype=np.float64)
        out[:3, 3] = (out[:3, 3] - self.centroid) * self.scale
        return out

    def depth_to_scene(self, raw_depth: np.ndarray) -> np.ndarray:
        """Raw sensor depth to normalized z-depth; invalid pixels stay 0."""
        return np.asarray(raw_depth, dtype=np.float64) / self.depth_scale * self.scale

    def to_dict(self) -> dict:
        return {
            "centroid": [float(c) for c in self.centroid],
            "scale": float(self.scale),
            "depth_scale": float(self.depth_scale),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneNormalization":
        return cls(
            centroid=np.asarray(data["centroid"], dtype=np.float64),
            scale=float(data["scale"]),
            depth_scale=float(data["depth_scale"]),
        )

    @classmethod
    def identity(cls, depth_scale: float = 1000.0) -> "SceneNormalization":
        return cls(centroid=np.zeros(3), scale=1.0, depth_scale=depth_scale)


@dataclass
class Dataset:
    """A loaded sequence with calibration and normalization.

    Frame base poses are kept in raw world units; ``normalized_pose`` gives
    the pose in the unit-ball frame used for training.
    """

    frames: List[FrameRecord]
    rgb_intrinsics: Intrinsics
    normalization: SceneNormalization
    depth_intrinsics: Optional[Intrinsics] = None
    root: Optional[Path] = None
    name: str = "dataset"
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.frames:
            raise DatasetError("Dataset has no frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def depth_camera(self) -> Intrinsics:
        return self.depth_intrinsics or self.rgb_intrinsics

    @property
    def has_distinct_depth_camera(self) -> bool:
        return self.depth_intrinsics is not None

    def normalized_pose(self, index: int) -> np.ndarray:
        return self.normalization.normalize_pose(self.frames[index].base_pose)

    def normalized_poses(self) -> np.ndarray:
        return np.stack([self.normalized_pose(i) for i in range(len(self.frames))])

    def scene_depth(self, index: int) -> np.ndarray:
        return self.normalization.depth_to_scene(self.frames[index].depth)

    def with_poses(self, poses: np.ndarray) -> "Dataset":
        """Copy with replaced raw base poses."""
        frames = [replace(f, base_pose=np.asarray(p)) for f, p in zip(self.frames, poses)]
        return replace(self, frames=frames)

    def content_hash(self) -> str:
        """SHA-256 over images, poses and calibration."""
        digest = hashlib.sha256()
        for frame in self.frames:
            for array in (frame.color, frame.depth, frame.mask, frame.base_pose):
                digest.update(np.ascontiguousarray(array).tobytes())
        for intrinsics in (self.rgb_intrinsics, self.depth_intrinsics):
            if intrinsics is not None:
                digest.update(intrinsics.as_array().tobytes())
        digest.update(np.float64(self.normalization.depth_scale).tobytes())
        return digest.hexdigest()
