"""Synthetic deforming scenes with exact depth, masks, meshes and scene flow.

A scene is an analytic canonical SDF carried through a closed-form invertible
deformation program. Frames are sphere traced through the deformed field and
shaded with a Lambertian headlight over a checker texture fixed in canonical
coordinates, so the texture moves with the surface.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.config.experiment import build_model, read_key_values
from src.models.camera import Camera, Intrinsics
from src.models.frames import Dataset, FrameRecord, SceneNormalization
from src.models.geometry import TriangleMesh
from src.models.scene_spec import SyntheticSceneSpec
from src.services.dataio import DatasetLoader
from src.services.meshio import evaluate_grid, marching_cubes_grid, write_mesh
from src.utils.se3 import look_at

TRACE_STEPS = 1000
TRACE_STEP_SCALE = 0.5
TRACE_TOLERANCE = 1e-7
NORMAL_STEP = 1e-5
SURFACE_TOLERANCE = 1e-3
ALBEDO_A = np.array([0.9, 0.55, 0.2])
ALBEDO_B = np.array([0.2, 0.6, 0.9])
WORLD_UP = np.array([0.0, 1.0, 0.0])

logger = logging.getLogger(__name__)


def load_scene_spec(path: Optional[Path], overrides: Optional[dict] = None) -> SyntheticSceneSpec:
    """Read a scene description in the key=value config format; no path gives the defaults."""
    values = dict(read_key_values(Path(path))) if path is not None else {}
    values.update(overrides or {})
    return build_model(SyntheticSceneSpec, values)


class SyntheticScene:
    """Closed-form geometry, motion and cameras of one synthetic sequence."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        self.translation = np.asarray(spec.translation_per_frame, dtype=np.float64)
        self.axis = np.eye(3)["xyz".index(spec.rotation_axis)]
        self.logger = logging.getLogger(__name__)

    @property
    def intrinsics(self) -> Intrinsics:
        s = self.spec
        return Intrinsics(s.focal, s.focal, s.width / 2.0, s.height / 2.0, s.width, s.height)

    def canonical_sdf(self, points: np.ndarray) -> np.ndarray:
        s = self.spec
        p = np.asarray(points, dtype=np.float64)
        if s.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - s.radius
        if s.shape == "torus":
            ring = np.linalg.norm(p[:, :2], axis=-1) - s.radius
            return np.hypot(ring, p[:, 2]) - s.torus_minor
        offset = np.array([s.lobe_offset, 0.0, 0.0])
        left = np.linalg.norm(p - offset, axis=-1) - s.lobe_radius
        right = np.linalg.norm(p + offset, axis=-1) - s.lobe_radius
        return np.minimum(left, right)

    def _bump_amplitude(self, frame: int) -> float:
        if self.spec.frames < 2:
            return 0.0
        return self.spec.bump_amplitude * frame / (self.spec.frames - 1)

    def _bump(self, xy: np.ndarray, frame: int) -> np.ndarray:
        radius_sq = np.sum(xy * xy, axis=-1)
        return self._bump_amplitude(frame) * np.exp(-radius_sq / (2.0 * self.spec.bump_sigma**2))

    def _rigid(self, frame: int) -> Rotation:
        return Rotation.from_rotvec(self.axis * np.radians(self.spec.rotation_deg_per_frame * frame))

    def _twist(self, points: np.ndarray, frame: int, sign: float) -> np.ndarray:
        angle = sign * self.spec.twist_rate * frame * points[:, 2]
        c, s = np.cos(angle), np.sin(angle)
        out = points.copy()
        out[:, 0] = c * points[:, 0] - s * points[:, 1]
        out[:, 1] = s * points[:, 0] + c * points[:, 1]
        return out

    def deform(self, canonical: np.ndarray, frame: int) -> np.ndarray:
        """Canonical points to frame ``frame``'s observation space."""
        p = self._twist(np.asarray(canonical, dtype=np.float64).reshape(-1, 3), frame, 1.0)
        p[:, 2] += self._bump(p[:, :2], frame)
        return self._rigid(frame).apply(p) + self.translation * frame

    def undeform(self, observed: np.ndarray, frame: int) -> np.ndarray:
        """Exact inverse of ``deform``."""
        p = np.asarray(observed, dtype=np.float64).reshape(-1, 3) - self.translation * frame
        p = self._rigid(frame).inv().apply(p)
        p[:, 2] -= self._bump(p[:, :2], frame)
        return self._twist(p, frame, -1.0)

    def observed_sdf(self, points: np.ndarray, frame: int) -> np.ndarray:
        return self.canonical_sdf(self.undeform(points, frame))

    def observed_normals(self, points: np.ndarray, frame: int) -> np.ndarray:
        gradient = np.zeros_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = NORMAL_STEP
            gradient[:, axis] = (
                self.observed_sdf(points + step, frame) - self.observed_sdf(points - step, frame)
            ) / (2.0 * NORMAL_STEP)
        return gradient / np.maximum(np.linalg.norm(gradient, axis=-1, keepdims=True), 1e-12)

    def camera_pose(self, frame: int) -> np.ndarray:
        """World-from-camera pose on a circular orbit about the y axis."""
        angle = np.radians(self.spec.orbit_deg_per_frame * frame)
        position = Rotation.from_rotvec(WORLD_UP * angle).apply([0.0, 0.0, -self.spec.camera_distance])
        return look_at(position, np.zeros(3), WORLD_UP)

    def sphere_trace(
        self, origins: np.ndarray, directions: np.ndarray, frame: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        March every ray by a fraction of the field value until it converges.

        Returns:
            (distance along each ray, converged flag); rays that escape or do
            not converge are not hits
        """
        n = len(origins)
        t = np.zeros(n)
        active = np.ones(n, dtype=bool)
        hit = np.zeros(n, dtype=bool)
        far = np.linalg.norm(origins, axis=-1) + 2.0
        for _ in range(TRACE_STEPS):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            d = self.observed_sdf(origins[idx] + directions[idx] * t[idx, None], frame)
            converged = np.abs(d) < TRACE_TOLERANCE
            hit[idx[converged]] = True
            active[idx[converged]] = False
            moving = idx[~converged]
            t[moving] += TRACE_STEP_SCALE * d[~converged]
            active[moving[t[moving] > far[moving]]] = False
        unconverged = int(np.count_nonzero(active))
        if unconverged:
            self.logger.debug(f"Frame {frame}: {unconverged} rays did not converge, marked invalid")
        return t, hit

    def render(self, frame: int, rng: np.random.Generator) -> FrameRecord:
        """Color, 16-bit depth and mask of one frame."""
        spec = self.spec
        intrinsics = self.intrinsics
        pose = self.camera_pose(frame)
        pixels = intrinsics.pixel_grid()
        origins, directions, scale = Camera(intrinsics, pose).generate_rays(pixels)
        origins, directions, scale = origins.data, directions.data, scale.data
        t, hit = self.sphere_trace(origins, directions, frame)

        color = np.zeros((len(pixels), 3))
        depth = np.zeros(len(pixels))
        points = origins[hit] + directions[hit] * t[hit, None]
        if len(points):
            normals = self.observed_normals(points, frame)
            shade = spec.ambient + (1.0 - spec.ambient) * np.clip(
                -np.sum(normals * directions[hit], axis=-1), 0.0, 1.0
            )
            canonical = self.undeform(points, frame)
            checker = np.sum(np.floor(spec.checker_frequency * canonical), axis=-1) % 2
            albedo = np.where(checker[:, None] > 0.5, ALBEDO_B, ALBEDO_A)
            color[hit] = albedo * shade[:, None]
            depth[hit] = t[hit] / scale[hit]

        if spec.depth_noise_std > 0:
            depth[hit] += rng.normal(0.0, spec.depth_noise_std, size=int(np.count_nonzero(hit)))
        raw = np.clip(np.round(depth * spec.depth_scale), 0, np.iinfo(np.uint16).max)
        raw[~hit] = 0
        if spec.dropout_rate > 0:
            raw[rng.random(len(raw)) < spec.dropout_rate] = 0

        h, w = spec.height, spec.width
        return FrameRecord(
            index=frame,
            color=np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8).reshape(h, w, 3),
            depth=raw.astype(np.uint16).reshape(h, w),
            mask=hit.reshape(h, w),
            base_pose=pose,
        )

    def canonical_mesh(self) -> TriangleMesh:
        res = self.spec.gt_mesh_resolution
        return marching_cubes_grid(evaluate_grid(self.canonical_sdf, res))

    def frame_mesh(self, frame: int, canonical: Optional[TriangleMesh] = None) -> TriangleMesh:
        """Ground-truth surface of one frame: the canonical mesh carried through the program."""
        base = canonical if canonical is not None else self.canonical_mesh()
        return base.transformed(lambda v: self.deform(v, frame))


def ground_truth_flow(
    spec: SyntheticSceneSpec, frame_i: int, frame_j: int, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact scene flow of frame-i surface points to frame j.

    Returns:
        (flow vectors (N, 3), off-surface flag per point)
    """
    scene = SyntheticScene(spec)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    off_surface = np.abs(scene.observed_sdf(points, frame_i)) > SURFACE_TOLERANCE
    if np.any(off_surface):
        logger.warning(f"{int(np.count_nonzero(off_surface))} points are off the frame {frame_i} surface")
    if frame_i == frame_j:
        return np.zeros_like(points), off_surface
    target = scene.deform(scene.undeform(points, frame_i), frame_j)
    return target - points, off_surface


def frame_points(
    record: FrameRecord, intrinsics: Intrinsics, depth_scale: float
) -> Tuple[np.ndarray, np.ndarray]:
    """World points of every valid depth pixel and their flat pixel indices."""
    pixels = intrinsics.pixel_grid()
    depth = record.depth.ravel().astype(np.float64) / depth_scale
    points, keep = Camera(intrinsics, record.base_pose).back_project(pixels, depth)
    return points.data, keep


def synth_generate(spec: SyntheticSceneSpec, out_dir: Path, workers: int = 1) -> Tuple[Dataset, List[Path]]:
    """
    Render a synthetic sequence with its ground-truth bundle.

    Writes the dataset layout, ``gt/mesh_%06d.obj`` per frame,
    ``gt/flow_%06d_%06d.bin`` for consecutive frames (float32 triples per
    pixel of the first frame in row-major order, NaN where depth is invalid)
    and ``gt/scene.json``.

    Returns:
        (dataset, written files)
    """
    out_dir = Path(out_dir)
    scene = SyntheticScene(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.frames)

    def render(index: int) -> FrameRecord:
        return scene.render(index, np.random.default_rng(seeds[index]))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        frames = list(pool.map(render, range(spec.frames)))

    dataset = Dataset(
        frames=frames,
        rgb_intrinsics=scene.intrinsics,
        normalization=SceneNormalization.identity(spec.depth_scale),
        root=out_dir,
        name=spec.name,
    )
    written = DatasetLoader(workers).save(dataset, out_dir)

    gt_dir = out_dir / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    canonical = scene.canonical_mesh()
    for index in range(spec.frames):
        written.append(write_mesh(scene.frame_mesh(index, canonical), gt_dir / f"mesh_{index:06d}.obj"))

    n_pixels = spec.width * spec.height
    for index in range(spec.frames - 1):
        points, keep = frame_points(frames[index], scene.intrinsics, spec.depth_scale)
        flow = np.full((n_pixels, 3), np.nan)
        flow[keep] = ground_truth_flow(spec, index, index + 1, points)[0]
        path = gt_dir / f"flow_{index:06d}_{index + 1:06d}.bin"
        path.write_bytes(flow.astype("<f4").tobytes())
        written.append(path)

    scene_file = gt_dir / "scene.json"
    scene_file.write_text(json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True))
    written.append(scene_file)
    logger.info(f"Generated synthetic scene '{spec.name}' with {spec.frames} frames in {out_dir}")
    return dataset, written


def read_flow(path: Path, width: int, height: int) -> np.ndarray:
    """Flow file as (height, width, 3)."""
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(height, width, 3)


def load_ground_truth_spec(dataset_root: Path) -> Optional[SyntheticSceneSpec]:
    """The scene description of a synthetic dataset, or None for real data."""
    scene_file = Path(dataset_root) / "gt" / "scene.json"
    if not scene_file.is_file():
        return None
    return SyntheticSceneSpec.model_validate(json.loads(scene_file.read_text()))
