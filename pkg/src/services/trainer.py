"""Joint optimization of fields, codes, s_scale and cameras."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, TextIO

import numpy as np
from pydantic import BaseModel
from scipy.spatial.transform import Rotation

from src.config.experiment import TrainConfig
from src.diffmath import tensor as T
from src.diffmath.optim import adam_step
from src.diffmath.tensor import Tensor, no_grad
from src.models.camera import Camera, RayBatch
from src.models.exceptions import DatasetError, InitializationError
from src.models.frames import Dataset
from src.services.checkpoint import save_checkpoint
from src.services.fields import DynamicField
from src.services.losses import (
    loss_color,
    loss_depth,
    loss_eikonal,
    loss_mask,
    loss_sdf,
    loss_total,
    loss_visible,
)
from src.services.model import ReconstructionModel
from src.services.rendering import generate_rays

SPHERE_PROBE_POINTS = 1000
SPHERE_PROBE_TOLERANCE = 0.05
SPHERE_FIT_STEPS = 500
SPHERE_FIT_BATCH = 1024
SPHERE_FIT_LR = 1e-3

CHECKPOINT_PATTERN = "ckpt_{:06d}.ndr"
FINAL_CHECKPOINT = "final.ndr"
LOG_FILE = "train_log.jsonl"

logger = logging.getLogger(__name__)


def sample_unit_ball(n: int, rng: np.random.Generator) -> np.ndarray:
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    return directions * rng.random((n, 1)) ** (1.0 / 3.0)


def _hyper_points(field: DynamicField, points: np.ndarray) -> Tensor:
    hyper = np.zeros((len(points), field.sdf_network.in_dims), dtype=field.store.dtype)
    hyper[:, :3] = points
    return Tensor(hyper)


def sphere_probe_error(field: DynamicField, radius: float, rng: np.random.Generator) -> float:
    """Mean |d - (|p| - radius)| over random points of the unit ball at q = 0."""
    points = sample_unit_ball(SPHERE_PROBE_POINTS, rng)
    with no_grad():
        d, _, _ = field.sdf_network.evaluate(_hyper_points(field, points))
    target = np.linalg.norm(points, axis=-1) - radius
    return float(np.mean(np.abs(d.data - target)))


def init_sphere_sdf(field: DynamicField, radius: float, rng: np.random.Generator) -> float:
    """
    Initialize F_d so that d(x) approximates |p| - radius.

    Geometric initialization is tried first; if the probe still fails, the
    SDF network is fitted to the sphere for a few hundred Adam steps.

    Returns:
        Final probe error

    Raises:
        InitializationError: If the probe error stays above tolerance
    """
    field.sdf_network.geometric_init(radius, rng)
    error = sphere_probe_error(field, radius, rng)
    if error < SPHERE_PROBE_TOLERANCE:
        logger.info(f"Sphere initialization probe error {error:.4f}")
        return error

    logger.info(f"Geometric initialization probe error {error:.4f}, fitting sphere")
    fit_store = field.store.subset("sdf.")
    for _ in range(SPHERE_FIT_STEPS):
        points = sample_unit_ball(SPHERE_FIT_BATCH, rng)
        d, _, _ = field.sdf_network.evaluate(_hyper_points(field, points))
        residual = d - (np.linalg.norm(points, axis=-1) - radius)
        loss = T.mean(residual * residual)
        fit_store.zero_grad()
        loss.backward()
        adam_step(fit_store, lr=SPHERE_FIT_LR)
    fit_store.zero_grad()

    error = sphere_probe_error(field, radius, rng)
    if error >= SPHERE_PROBE_TOLERANCE:
        raise InitializationError(
            f"Sphere initialization failed: probe error {error:.4f} >= {SPHERE_PROBE_TOLERANCE}"
        )
    logger.info(f"Sphere fit probe error {error:.4f}")
    return error


def perturb_poses(dataset: Dataset, sigma_deg: float, rng: np.random.Generator) -> Dataset:
    """
    Add Gaussian noise of ``sigma_deg`` degrees to every frame's xyz Euler angles.

    Translations are untouched; sigma 0 returns the dataset itself.
    """
    if sigma_deg < 0:
        raise ValueError(f"Pose noise must be non-negative, got {sigma_deg}")
    if sigma_deg == 0:
        return dataset
    poses = []
    for frame in dataset.frames:
        euler = Rotation.from_matrix(frame.base_pose[:3, :3]).as_euler("xyz", degrees=True)
        noisy = euler + rng.normal(0.0, sigma_deg, size=3)
        pose = frame.base_pose.copy()
        pose[:3, :3] = Rotation.from_euler("xyz", noisy, degrees=True).as_matrix()
        poses.append(pose)
    logger.info(f"Perturbed {len(poses)} poses with {sigma_deg} deg Euler noise")
    return dataset.with_poses(np.stack(poses))


@dataclass
class TrainingBatch:
    """Rays for the free-space terms and depth points for the surface terms."""

    frame: int
    rays: RayBatch
    surface_points: Tensor
    surface_views: Tensor
    depth_rays: Optional[RayBatch] = None


class BatchAssembler:
    """Draws one frame per batch and samples rays and surface points from it."""

    def __init__(self, dataset: Dataset, model: ReconstructionModel, config: TrainConfig):
        self.dataset = dataset
        self.model = model
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.scene_depths = [dataset.scene_depth(i) for i in range(len(dataset))]
        self.depth_foreground = [self._depth_foreground(i) for i in range(len(dataset))]
        self.eligible = np.array([fg.any() for fg in self.depth_foreground])
        if not self.eligible.any():
            raise DatasetError("No frame has valid depth inside its mask")
        skipped = int(np.count_nonzero(~self.eligible))
        if skipped:
            self.logger.warning(f"{skipped} frames have no valid masked depth and are never sampled")

    def _depth_foreground(self, index: int) -> np.ndarray:
        """Depth pixels with valid depth whose point lies inside the object mask."""
        frame = self.dataset.frames[index]
        valid = frame.valid_depth()
        if not self.dataset.has_distinct_depth_camera:
            return valid & frame.mask

        pose = self.dataset.normalized_pose(index)
        depth_camera = Camera(self.dataset.depth_camera, pose, role="depth")
        rgb_camera = Camera(self.dataset.rgb_intrinsics, pose)
        pixels = self.dataset.depth_camera.pixel_grid()
        with no_grad():
            points, keep = depth_camera.back_project(pixels, self.scene_depths[index].ravel())
        projected, z = rgb_camera.project(points.data)
        ix = np.round(projected[:, 0]).astype(np.int64)
        iy = np.round(projected[:, 1]).astype(np.int64)
        inside = (z > 0) & (ix >= 0) & (ix < frame.width) & (iy >= 0) & (iy < frame.height)
        foreground = np.zeros(len(pixels), dtype=bool)
        foreground[keep[inside]] = frame.mask[iy[inside], ix[inside]]
        return foreground.reshape(valid.shape) & valid

    def draw_frame(self, rng: np.random.Generator) -> int:
        while True:
            frame = int(rng.integers(len(self.dataset)))
            if self.eligible[frame]:
                return frame
            self.logger.debug(f"Frame {frame} has no valid masked depth, resampling")

    def sample_pixels(self, foreground: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        """``mask_ray_ratio`` of the pixels from the foreground, the rest uniform."""
        height, width = foreground.shape
        candidates = np.flatnonzero(foreground.ravel())
        n_foreground = int(round(self.config.mask_ray_ratio * count)) if len(candidates) else 0
        flat = np.concatenate(
            [
                rng.choice(candidates, size=n_foreground) if n_foreground else np.zeros(0, np.int64),
                rng.integers(0, height * width, size=count - n_foreground),
            ]
        )
        return np.stack([flat % width, flat // width], axis=-1)

    def _along_ray_depth(self, camera: Camera, pixels: np.ndarray, z: np.ndarray) -> Tensor:
        scale = T.norm(camera.camera_directions(pixels), axis=-1)
        return scale * z.astype(scale.dtype)

    def assemble(self, rng: np.random.Generator) -> TrainingBatch:
        """
        Sample one training batch.

        Returns:
            Rays with observations, plus back-projected surface points
        """
        index = self.draw_frame(rng)
        frame = self.dataset.frames[index]
        depth = self.scene_depths[index]
        miss_band = self.config.miss_band
        rgb_camera = self.model.camera(index, "rgb")
        depth_camera = self.model.camera(index, "depth")

        pixels = self.sample_pixels(frame.mask, self.config.rays_per_batch, rng)
        px, py = pixels[:, 0], pixels[:, 1]
        rays = generate_rays(rgb_camera, pixels, index, miss_band)
        rays.mask = frame.mask[py, px].astype(np.float64)
        rays.color = frame.color[py, px].astype(np.float64) / 255.0

        depth_rays = None
        if self.dataset.has_distinct_depth_camera:
            foreground = self.depth_foreground[index]
            depth_pixels = self.sample_pixels(foreground, self.config.rays_per_batch, rng)
            dx, dy = depth_pixels[:, 0], depth_pixels[:, 1]
            depth_rays = generate_rays(depth_camera, depth_pixels, index, miss_band)
            depth_rays.mask = foreground[dy, dx].astype(np.float64)
            depth_rays.depth = self._along_ray_depth(depth_camera, depth_pixels, depth[dy, dx])
        else:
            rays.depth = self._along_ray_depth(rgb_camera, pixels, depth[py, px])

        surface = np.flatnonzero(self.depth_foreground[index].ravel())
        chosen = rng.choice(surface, size=self.config.depth_points_per_batch)
        width = depth.shape[1]
        surface_pixels = np.stack([chosen % width, chosen // width], axis=-1)
        points, _ = depth_camera.back_project(surface_pixels, depth.ravel()[chosen])
        _, origin = depth_camera.pose(points.dtype)
        views = T.normalize(points - origin)
        return TrainingBatch(index, rays, points, views, depth_rays)


class LossRecord(BaseModel):
    """One line of the training log."""

    iteration: int
    frame: int
    losses: Dict[str, float]
    weights: Dict[str, float]
    total: float
    free_space: float
    surface: float
    alpha: float
    s_scale: float
    skipped_normals: int = 0


@dataclass
class TrainingSummary:
    iterations: int
    final: Optional[LossRecord]
    checkpoint: Optional[Path]
    elapsed_seconds: float


class TrainingObserver(Protocol):
    """Protocol for training observers."""

    def on_start(self, config: TrainConfig, n_frames: int, start_iteration: int = 0) -> None:
        """Called before the first iteration; resumed runs pass the iteration they continue from."""
        pass

    def on_iteration(self, record: LossRecord) -> None:
        """Called after each optimizer step."""
        pass

    def on_checkpoint(self, path: Path, iteration: int) -> None:
        """Called after a checkpoint is written."""
        pass

    def on_complete(self, summary: TrainingSummary) -> None:
        """Called when training finishes."""
        pass


class ConsoleTrainingObserver:
    """Logs a progress line every ``log_every`` iterations."""

    def __init__(self, log_every: int = 100) -> None:
        self.log_every = log_every
        self.logger = logging.getLogger(__name__)

    def on_start(self, config: TrainConfig, n_frames: int, start_iteration: int = 0) -> None:
        self.logger.info(
            f"🚀 Training iterations {start_iteration}..{config.iterations} on {n_frames} frames "
            f"({config.rays_per_batch} rays, {config.depth_points_per_batch} depth points per batch)"
        )

    def on_iteration(self, record: LossRecord) -> None:
        if (record.iteration + 1) % self.log_every == 0:
            terms = " ".join(f"{k}={v:.4f}" for k, v in record.losses.items())
            self.logger.info(
                f"   [{record.iteration + 1:6d}] total={record.total:.5f} {terms} s={record.s_scale:.1f}"
            )

    def on_checkpoint(self, path: Path, iteration: int) -> None:
        self.logger.info(f"   💾 Checkpoint at iteration {iteration}: {path}")

    def on_complete(self, summary: TrainingSummary) -> None:
        self.logger.info(
            f"🎉 Training complete: {summary.iterations} iterations in {summary.elapsed_seconds:.1f}s"
        )


class JsonlLossObserver:
    """Writes one LossRecord per iteration as a JSON line."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._handle: Optional[TextIO] = None

    def on_start(self, config: TrainConfig, n_frames: int, start_iteration: int = 0) -> None:
        """Start a fresh log, or keep the records before ``start_iteration`` when resuming."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: List[str] = []
        if start_iteration > 0 and self.path.is_file():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip() and LossRecord.model_validate_json(line).iteration < start_iteration:
                    kept.append(line)
        self._handle = open(self.path, "w", encoding="utf-8")
        for line in kept:
            self._handle.write(line + "\n")

    def on_iteration(self, record: LossRecord) -> None:
        if self._handle is not None:
            self._handle.write(record.model_dump_json() + "\n")
            self._handle.flush()

    def on_checkpoint(self, path: Path, iteration: int) -> None:
        pass

    def on_complete(self, summary: TrainingSummary) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


class Trainer:
    """Runs the optimization loop over a dataset."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: Dataset,
        model: Optional[ReconstructionModel] = None,
        batch_rng_state: Optional[Dict[str, Any]] = None,
    ):
        """
        Initialize the trainer.

        Args:
            config: Training configuration
            dataset: Normalized RGB-D sequence
            model: Existing model to continue from; a fresh one is built otherwise
            batch_rng_state: Saved batch sampler state, so a resumed run continues its sequence
        """
        init_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.init_rng = np.random.default_rng(init_seed)
        self.batch_rng = np.random.default_rng(batch_seed)
        if batch_rng_state is not None:
            self.batch_rng.bit_generator.state = batch_rng_state
        self.config = config
        self.dataset = dataset
        self.fresh = model is None
        if model is None:
            model = ReconstructionModel.from_dataset(config, dataset, self.init_rng)
        self.model = model
        self.weights = config.effective_weights()
        self.assembler = BatchAssembler(dataset, self.model, config)
        self.observers: List[TrainingObserver] = []
        self.logger = logging.getLogger(__name__)

    def add_observer(self, observer: TrainingObserver) -> None:
        """Add a training observer."""
        self.observers.append(observer)

    def remove_observer(self, observer: TrainingObserver) -> None:
        """Remove a training observer."""
        if observer in self.observers:
            self.observers.remove(observer)

    def initialize(self) -> float:
        """Sphere-initialize the SDF network."""
        return init_sphere_sdf(self.model.field, self.config.model.init_radius, self.init_rng)

    def step(self, iteration: int) -> LossRecord:
        """
        One optimizer step: batch, render, losses, backward, Adam.

        Raises:
            NonFiniteLossError: If a loss term is not finite
            GradientError: If a gradient is not finite
        """
        model = self.model
        batch = self.assembler.assemble(self.batch_rng)
        rays = batch.rays
        result = model.renderer.render(rays, self.batch_rng)
        hit = rays.hit.astype(np.float64)

        normals = [result.samples.field.normal]
        terms = {
            "mask": loss_mask(result.opacity, rays.mask),
            "color": loss_color(result.color, rays.color, rays.mask, valid=rays.hit),
        }
        if batch.depth_rays is None:
            terms["depth"] = loss_depth(result.depth, rays.depth, rays.mask * hit)
        else:
            depth_rays = batch.depth_rays
            depth_result = model.renderer.render(depth_rays, self.batch_rng)
            normals.append(depth_result.samples.field.normal)
            terms["depth"] = loss_depth(
                depth_result.depth, depth_rays.depth, depth_rays.mask * depth_rays.hit
            )
        terms["eikonal"] = loss_eikonal(T.concat(normals, axis=0) if len(normals) > 1 else normals[0])

        surface = model.field.query(batch.surface_points, batch.frame, batch.surface_views, with_color=False)
        terms["sdf"] = loss_sdf(surface.sdf)
        assert surface.view is not None
        terms["visible"], skipped = loss_visible(surface.normal, surface.view)

        breakdown = loss_total(terms, self.weights, iteration)
        model.store.zero_grad()
        breakdown.total.backward()
        adam_step(model.store, lr=self.config.learning_rate)

        return LossRecord(
            iteration=iteration,
            frame=batch.frame,
            losses=breakdown.values(),
            weights=breakdown.weights,
            total=float(breakdown.total.data),
            free_space=breakdown.free_space,
            surface=breakdown.surface,
            alpha=float(model.field.sdf_network.schedule.alpha or 0.0),
            s_scale=model.s_scale,
            skipped_normals=skipped,
        )

    def train(self, out_dir: Optional[Path] = None, start_iteration: int = 0) -> TrainingSummary:
        """
        Run the remaining iterations, writing checkpoints under ``out_dir``.

        Returns:
            Summary with the last loss record and the final checkpoint path
        """
        config = self.config
        started = time.perf_counter()
        if self.fresh and start_iteration == 0:
            self.initialize()
        checkpoint_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None

        for observer in self.observers:
            observer.on_start(config, len(self.dataset), start_iteration)

        record: Optional[LossRecord] = None
        for iteration in range(start_iteration, config.iterations):
            self.model.field.advance_encoding(iteration, config.iterations, config.alpha_ramp_fraction)
            record = self.step(iteration)
            for observer in self.observers:
                observer.on_iteration(record)

            done = iteration + 1
            if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                path = self._save(checkpoint_dir / CHECKPOINT_PATTERN.format(done), done)
                for observer in self.observers:
                    observer.on_checkpoint(path, done)

        final_path = None
        if checkpoint_dir is not None:
            last = max(config.iterations, start_iteration)
            final_path = self._save(checkpoint_dir / FINAL_CHECKPOINT, last)
            for observer in self.observers:
                observer.on_checkpoint(final_path, config.iterations)

        summary = TrainingSummary(
            iterations=max(config.iterations - start_iteration, 0),
            final=record,
            checkpoint=final_path,
            elapsed_seconds=time.perf_counter() - started,
        )
        for observer in self.observers:
            observer.on_complete(summary)
        return summary

    def _save(self, path: Path, iteration: int) -> Path:
        return save_checkpoint(
            path, self.model, iteration, self.dataset.content_hash(), self.batch_rng.bit_generator.state
        )


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir: Optional[Path] = None,
    observers: Optional[List[TrainingObserver]] = None,
) -> TrainingSummary:
    """Train a fresh model; the log goes to ``out_dir/train_log.jsonl`` when ``out_dir`` is set."""
    trainer = Trainer(config, dataset)
    for observer in observers or []:
        trainer.add_observer(observer)
    if out_dir is not None:
        trainer.add_observer(JsonlLossObserver(Path(out_dir) / LOG_FILE))
    return trainer.train(out_dir)
