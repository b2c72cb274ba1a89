"""RGB-D sequence loading, saving and normalization.

Layout of a dataset directory::

    color/000000.png   8-bit RGB
    depth/000000.png   16-bit depth, raw units of ``depth_scale`` per world unit
    mask/000000.png    binary object mask (0 or 255)
    intrinsics.txt     fx fy cx cy width height depth_scale
                       [second line: fx fy cx cy width height  for a distinct depth camera]
    poses.txt          one 4x4 world-from-camera matrix per frame, row-major
    normalization.json optional; overrides the computed normalization
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from src.models.camera import Camera, Intrinsics
from src.models.exceptions import DatasetError, NdrError
from src.models.frames import Dataset, FrameRecord, SceneNormalization
from src.utils.validators import validate_pose

FRAME_NAME = "{:06d}.png"
NORMALIZED_RADIUS = 0.8
MAX_NORMALIZATION_POINTS = 50000

logger = logging.getLogger(__name__)


def _numbers(line: str) -> List[float]:
    return [float(tok) for tok in line.replace(",", " ").split()]


def _content_lines(path: Path) -> List[str]:
    lines = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def parse_intrinsics(path: Path) -> Tuple[Intrinsics, float, Optional[Intrinsics]]:
    """
    Parse ``intrinsics.txt``.

    Returns:
        (rgb intrinsics, depth scale, depth intrinsics or None)

    Raises:
        DatasetError: If a line is malformed
    """
    lines = _content_lines(path)
    if not lines:
        raise DatasetError(f"{path} is empty")
    try:
        first = _numbers(lines[0])
        if len(first) != 7:
            raise DatasetError(
                f"{path}: expected 'fx fy cx cy width height depth_scale', got {len(first)} values"
            )
        fx, fy, cx, cy, width, height, depth_scale = first
        rgb = Intrinsics(fx, fy, cx, cy, int(width), int(height))
        depth = None
        if len(lines) > 1:
            second = _numbers(lines[1])
            if len(second) not in (6, 7):
                raise DatasetError(f"{path}: depth camera line needs 6 values, got {len(second)}")
            dfx, dfy, dcx, dcy, dwidth, dheight = second[:6]
            depth = Intrinsics(dfx, dfy, dcx, dcy, int(dwidth), int(dheight))
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e
    except NdrError as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"{path}: {e}") from e
    if depth_scale <= 0:
        raise DatasetError(f"{path}: depth_scale must be positive, got {depth_scale}")
    return rgb, depth_scale, depth


def parse_poses(path: Path) -> np.ndarray:
    """Read 4x4 matrices, 16 numbers each, in any line arrangement."""
    try:
        values = [v for line in _content_lines(path) for v in _numbers(line)]
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from e
    if len(values) % 16:
        raise DatasetError(f"{path}: {len(values)} numbers is not a whole number of 4x4 poses")
    return np.asarray(values, dtype=np.float64).reshape(-1, 4, 4)


def read_color(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8)


def read_depth(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image).astype(np.uint16)


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        return (np.asarray(image.convert("L")) > 127).astype(np.uint8)


def write_color(path: Path, color: np.ndarray) -> None:
    Image.fromarray(np.asarray(color, dtype=np.uint8)).save(path)


def write_depth(path: Path, depth: np.ndarray) -> None:
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def compute_normalization(
    frames: List[FrameRecord], intrinsics: Intrinsics, depth_scale: float
) -> SceneNormalization:
    """
    Centroid and scale that put every masked depth point within radius 0.8.

    Points are back-projected with the raw poses; the mask is read at the
    depth pixel, which assumes aligned color and depth images.
    """
    clouds = []
    for frame in frames:
        pixels = frame.surface_pixels()
        if len(pixels) == 0:
            continue
        raw = frame.depth[pixels[:, 1], pixels[:, 0]].astype(np.float64) / depth_scale
        points, _ = Camera(intrinsics, frame.base_pose).back_project(pixels, raw)
        clouds.append(points.data)
    if not clouds:
        raise DatasetError("No masked pixel with valid depth in any frame; cannot normalize")
    cloud = np.concatenate(clouds)
    if len(cloud) > MAX_NORMALIZATION_POINTS:
        cloud = cloud[:: len(cloud) // MAX_NORMALIZATION_POINTS + 1]
    centroid = cloud.mean(axis=0)
    radius = float(np.max(np.linalg.norm(cloud - centroid, axis=-1)))
    scale = NORMALIZED_RADIUS / radius if radius > 0 else 1.0
    return SceneNormalization(centroid=centroid, scale=scale, depth_scale=depth_scale)


class DatasetLoader:
    """Service for loading and saving RGB-D sequences."""

    def __init__(self, workers: int = 1) -> None:
        self.workers = max(1, workers)
        self.logger = logging.getLogger(__name__)

    def load(self, root: Path) -> Dataset:
        """
        Load a sequence and compute its normalization.

        Args:
            root: Dataset directory

        Returns:
            Dataset with raw poses and a normalization into the unit ball

        Raises:
            DatasetError: Listing every missing or malformed file
        """
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"Dataset directory not found: {root}")

        problems: List[str] = []
        for sub in ("color", "depth", "mask"):
            if not (root / sub).is_dir():
                problems.append(f"missing directory {sub}/")
        for name in ("intrinsics.txt", "poses.txt"):
            if not (root / name).is_file():
                problems.append(f"missing file {name}")
        if problems:
            raise DatasetError(f"Cannot load dataset {root}", problems)

        rgb, depth_scale, depth_intrinsics = parse_intrinsics(root / "intrinsics.txt")
        poses = parse_poses(root / "poses.txt")
        color_files = sorted((root / "color").glob("*.png"))
        if not color_files:
            raise DatasetError(f"Cannot load dataset {root}", ["color/ has no PNG frames"])
        if len(poses) != len(color_files):
            problems.append(f"poses.txt has {len(poses)} poses for {len(color_files)} frames")
        for i, path in enumerate(color_files):
            if path.name != FRAME_NAME.format(i):
                problems.append(f"color frames are not numbered 0..N-1 (found {path.name})")
                break
            for sub in ("depth", "mask"):
                if not (root / sub / path.name).is_file():
                    problems.append(f"missing {sub}/{path.name}")
        if problems:
            raise DatasetError(f"Cannot load dataset {root}", problems)

        def load_frame(index: int) -> FrameRecord:
            name = FRAME_NAME.format(index)
            return FrameRecord(
                index=index,
                color=read_color(root / "color" / name),
                depth=read_depth(root / "depth" / name),
                mask=read_mask(root / "mask" / name),
                base_pose=validate_pose(poses[index]),
            )

        frames: List[FrameRecord] = []
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = [pool.submit(load_frame, i) for i in range(len(color_files))]
            for i, future in enumerate(futures):
                try:
                    frames.append(future.result())
                except (OSError, NdrError) as e:
                    problems.append(f"frame {i}: {e}")
        if problems:
            raise DatasetError(f"Cannot load dataset {root}", problems)

        for frame in frames:
            if (frame.width, frame.height) != (rgb.width, rgb.height):
                problems.append(
                    f"frame {frame.index}: image {frame.width}x{frame.height} does not match "
                    f"intrinsics {rgb.width}x{rgb.height}"
                )
        if problems:
            raise DatasetError(f"Cannot load dataset {root}", problems)

        override = root / "normalization.json"
        if override.is_file():
            normalization = SceneNormalization.from_dict(json.loads(override.read_text()))
        else:
            normalization = compute_normalization(frames, depth_intrinsics or rgb, depth_scale)

        self.logger.info(
            f"Loaded {len(frames)} frames from {root} ({rgb.width}x{rgb.height}, "
            f"scale {normalization.scale:.4f})"
        )
        return Dataset(
            frames=frames,
            rgb_intrinsics=rgb,
            normalization=normalization,
            depth_intrinsics=depth_intrinsics,
            root=root,
            name=root.name,
        )

    def save(self, dataset: Dataset, root: Path) -> List[Path]:
        """
        Write a dataset in the directory layout above.

        Returns:
            Every written file
        """
        root = Path(root)
        written: List[Path] = []
        try:
            for sub in ("color", "depth", "mask"):
                (root / sub).mkdir(parents=True, exist_ok=True)
            for frame in dataset.frames:
                name = FRAME_NAME.format(frame.index)
                write_color(root / "color" / name, frame.color)
                write_depth(root / "depth" / name, frame.depth)
                write_mask(root / "mask" / name, frame.mask)
                written.extend(root / sub / name for sub in ("color", "depth", "mask"))

            k = dataset.rgb_intrinsics
            lines = [
                " ".join(repr(float(v)) for v in k.as_array())
                + f" {k.width} {k.height} {float(dataset.normalization.depth_scale)!r}"
            ]
            if dataset.depth_intrinsics is not None:
                d = dataset.depth_intrinsics
                lines.append(" ".join(repr(float(v)) for v in d.as_array()) + f" {d.width} {d.height}")
            (root / "intrinsics.txt").write_text("\n".join(lines) + "\n")

            pose_lines = [" ".join(repr(float(v)) for v in f.base_pose.ravel()) for f in dataset.frames]
            (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
            written.extend([root / "intrinsics.txt", root / "poses.txt"])
        except OSError as e:
            raise DatasetError(f"Failed to write dataset to {root}: {e}") from e

        self.logger.info(f"Wrote {len(dataset)} frames to {root}")
        return written


def load_dataset(root: Path, workers: int = 1) -> Dataset:
    return DatasetLoader(workers).load(root)
