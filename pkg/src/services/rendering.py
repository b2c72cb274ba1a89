"""Ray generation, sampling and volume rendering of the dynamic field."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.config.experiment import TrainConfig
from src.diffmath import tensor as T
from src.diffmath.nn import ParameterStore
from src.diffmath.tensor import Tensor, no_grad
from src.models.camera import Camera, Intrinsics, RayBatch
from src.services.fields import DynamicField, FieldQuery

SdfFn = Callable[[np.ndarray], np.ndarray]

TRANSMITTANCE_FLOOR = 1e-7

logger = logging.getLogger(__name__)


class CameraRig:
    """Learnable intrinsics and per-frame pose deltas for all frames.

    Parameters: ``camera.rgb.intrinsics`` (fx, fy, cx, cy), optionally
    ``camera.depth.intrinsics``, and ``camera.pose_delta`` with one
    (axis-angle, translation) row per frame. A distinct depth camera shares
    the frame pose.
    """

    def __init__(
        self,
        store: ParameterStore,
        base_poses: np.ndarray,
        rgb_intrinsics: Intrinsics,
        depth_intrinsics: Optional[Intrinsics] = None,
    ):
        self.store = store
        self.base_poses = np.asarray(base_poses, dtype=np.float64)
        self.rgb_intrinsics = rgb_intrinsics
        self.depth_intrinsics = depth_intrinsics
        store.create("camera.rgb.intrinsics", rgb_intrinsics.as_array())
        if depth_intrinsics is not None:
            store.create("camera.depth.intrinsics", depth_intrinsics.as_array())
        store.create("camera.pose_delta", np.zeros((len(self.base_poses), 6)))

    def __len__(self) -> int:
        return len(self.base_poses)

    def set_refinement(self, poses: bool, intrinsics: bool) -> None:
        self.store.set_trainable("camera.pose_delta", poses)
        self.store.set_trainable("camera.rgb.intrinsics", intrinsics)
        self.store.set_trainable("camera.depth.intrinsics", intrinsics)

    def camera(self, frame: int, role: str = "rgb") -> Camera:
        if role == "depth" and self.depth_intrinsics is not None:
            intrinsics, name = self.depth_intrinsics, "camera.depth.intrinsics"
        else:
            intrinsics, name = self.rgb_intrinsics, "camera.rgb.intrinsics"
        return Camera(
            intrinsics=intrinsics,
            base_pose=self.base_poses[frame],
            role=role,
            intrinsics_param=self.store[name],
            pose_delta=self.store["camera.pose_delta"][frame],
        )

    def refined_pose(self, frame: int) -> np.ndarray:
        with no_grad():
            rotation, translation = self.camera(frame).pose()
        pose = np.eye(4)
        pose[:3, :3], pose[:3, 3] = rotation.data, translation.data
        return pose

    def refined_poses(self) -> np.ndarray:
        return np.stack([self.refined_pose(i) for i in range(len(self))])


def near_far_from_sphere(
    origins: np.ndarray, directions: np.ndarray, radius: float = 1.0, miss_band: float = 0.05
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Bounds of each ray inside the sphere of ``radius`` about the origin.

    Rays that miss get a band of +-``miss_band`` around their closest approach.

    Returns:
        (near, far, hit)
    """
    b = np.sum(origins * directions, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    far_hit = -b + root
    hit = (disc > 0) & (far_hit > 0)

    closest = np.maximum(-b, 0.0)
    near = np.where(hit, np.maximum(-b - root, 1e-4), np.maximum(closest - miss_band, 1e-4))
    far = np.where(hit, far_hit, closest + miss_band)
    far = np.maximum(far, near + 1e-3)
    return near, far, hit


def generate_rays(
    camera: Camera, pixels: np.ndarray, frame: int, miss_band: float = 0.05
) -> RayBatch:
    """
    Rays through ``pixels`` of one frame's camera with unit-sphere bounds.

    Raises:
        ValidationError: If a pixel lies outside the image
    """
    pixels = np.asarray(pixels)
    origins, directions, _ = camera.generate_rays(pixels)
    near, far, hit = near_far_from_sphere(origins.data, directions.data, miss_band=miss_band)
    return RayBatch(
        frame=frame,
        pixels=pixels,
        origins=origins,
        directions=directions,
        near=near,
        far=far,
        hit=hit,
        mask=np.zeros(len(pixels)),
    )


def back_project(camera: Camera, pixels: np.ndarray, depth: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Observed points from z-depth; zero or invalid depths are skipped."""
    return camera.back_project(pixels, depth)


def sdf_to_alpha(d_k: Tensor, d_next: Tensor, s_scale: Tensor) -> Tensor:
    """
    Opacity of the interval between two samples.

    alpha = max((Phi(s d_k) - Phi(s d_{k+1})) / Phi(s d_k), 0) with Phi the
    logistic sigmoid; an underflowed Phi(s d_k) gives alpha = 0.
    """
    prev_cdf = T.sigmoid(T.as_tensor(d_k) * s_scale)
    next_cdf = T.sigmoid(T.as_tensor(d_next) * s_scale)
    underflow = prev_cdf.data <= 0.0
    safe = T.where(underflow, np.ones((), dtype=prev_cdf.dtype), prev_cdf)
    alpha = T.relu((prev_cdf - next_cdf) / safe)
    return T.where(underflow, np.zeros((), dtype=alpha.dtype), alpha)


@dataclass
class RenderOutput:
    """Accumulated color, depth and opacity with per-interval weights."""

    color: Tensor
    depth: Tensor
    opacity: Tensor
    weights: Tensor
    transmittance: Tensor


def integrate_ray(alpha: Tensor, colors: Tensor, depths: object) -> RenderOutput:
    """
    Front-to-back compositing along the last axis.

    Args:
        alpha: Interval opacities (..., K)
        colors: Interval colors (..., K, 3)
        depths: Interval depths (..., K)

    Returns:
        C = sum T_k a_k c_k, D = sum T_k a_k s_k, M = sum T_k a_k with
        T_k = prod_{j<k} (1 - a_j)
    """
    alpha = T.as_tensor(alpha)
    log_keep = T.log(1.0 - T.clamp(alpha, 0.0, 1.0 - TRANSMITTANCE_FLOOR))
    transmittance = T.exp(T.cumsum(log_keep, axis=-1) - log_keep)
    weights = transmittance * alpha
    return RenderOutput(
        color=T.tsum(T.unsqueeze(weights, -1) * colors, axis=-2),
        depth=T.tsum(weights * depths, axis=-1),
        opacity=T.tsum(weights, axis=-1),
        weights=weights,
        transmittance=transmittance,
    )


def sample_pdf(
    bins: np.ndarray, weights: np.ndarray, n_samples: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Inverse-CDF samples per row; deterministic midpoints unless ``rng`` is given."""
    weights = weights + 1e-5
    pdf = weights / np.sum(weights, axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=-1)], axis=-1)
    if rng is None:
        u = np.broadcast_to(
            np.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples), (len(cdf), n_samples)
        )
    else:
        u = rng.random((len(cdf), n_samples))

    inds = np.sum(cdf[:, None, :] <= u[:, :, None], axis=-1)
    below = np.clip(inds - 1, 0, cdf.shape[-1] - 1)
    above = np.clip(inds, 0, cdf.shape[-1] - 1)
    cdf_below = np.take_along_axis(cdf, below, axis=-1)
    cdf_above = np.take_along_axis(cdf, above, axis=-1)
    bins_below = np.take_along_axis(bins, below, axis=-1)
    bins_above = np.take_along_axis(bins, above, axis=-1)

    denom = cdf_above - cdf_below
    denom = np.where(denom < 1e-5, 1.0, denom)
    t = (u - cdf_below) / denom
    return bins_below + t * (bins_above - bins_below)


def up_sample(
    origins: np.ndarray,
    directions: np.ndarray,
    depths: np.ndarray,
    sdf: np.ndarray,
    n_importance: int,
    inv_s: float,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """New sample depths where a fixed-sharpness opacity estimate is high."""
    points = origins[:, None, :] + directions[:, None, :] * depths[..., None]
    radius = np.linalg.norm(points, axis=-1)
    inside = (radius[:, :-1] < 1.0) | (radius[:, 1:] < 1.0)
    prev_sdf, next_sdf = sdf[:, :-1], sdf[:, 1:]
    prev_z, next_z = depths[:, :-1], depths[:, 1:]
    mid_sdf = (prev_sdf + next_sdf) * 0.5
    cos_val = (next_sdf - prev_sdf) / (next_z - prev_z + 1e-5)

    # the smaller of the current and previous slope keeps sampling robust near double crossings
    prev_cos = np.concatenate([np.zeros_like(cos_val[:, :1]), cos_val[:, :-1]], axis=-1)
    cos_val = np.minimum(prev_cos, cos_val)
    cos_val = np.clip(cos_val, -1e3, 0.0) * inside

    dist = next_z - prev_z
    prev_esti = mid_sdf - cos_val * dist * 0.5
    next_esti = mid_sdf + cos_val * dist * 0.5
    prev_cdf = 1.0 / (1.0 + np.exp(-np.clip(prev_esti * inv_s, -60.0, 60.0)))
    next_cdf = 1.0 / (1.0 + np.exp(-np.clip(next_esti * inv_s, -60.0, 60.0)))
    alpha = (prev_cdf - next_cdf + 1e-5) / (prev_cdf + 1e-5)
    keep = np.cumprod(
        np.concatenate([np.ones_like(alpha[:, :1]), 1.0 - alpha + 1e-7], axis=-1), axis=-1
    )[:, :-1]
    return sample_pdf(depths, alpha * keep, n_importance, rng)


def separate_ties(depths: np.ndarray, dtype: np.dtype) -> np.ndarray:
    """
    Push sorted depths apart so they stay strictly increasing once cast to ``dtype``.

    Consecutive samples end at least four ulps of ``dtype`` apart.
    """
    out = np.array(depths, dtype=np.float64)
    gap = 4.0 * np.finfo(dtype).eps * np.maximum(np.abs(out), 1.0)
    for k in range(1, out.shape[-1]):
        out[:, k] = np.maximum(out[:, k], out[:, k - 1] + gap[:, k - 1])
    return out


def sample_ray(
    origins: np.ndarray,
    directions: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    sdf_fn: SdfFn,
    n_uniform: int = 64,
    n_importance: int = 16,
    rounds: int = 4,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Stratified samples refined by rounds of importance sampling.

    Each round doubles the sharpness used for the opacity estimate, starting
    at 64. Depths are returned sorted and strictly increasing per ray.

    Args:
        sdf_fn: Maps points (N, M, 3) to signed distances (N, M)
        rng: Jitters the stratified samples and draws importance samples
            randomly; None gives deterministic midpoints

    Returns:
        Sample depths (N, n_uniform + rounds * n_importance)
    """
    n_rays = len(origins)
    offsets = np.broadcast_to(0.5, (n_rays, n_uniform)) if rng is None else rng.random((n_rays, n_uniform))
    steps = (np.arange(n_uniform)[None, :] + offsets) / n_uniform
    depths = near[:, None] + (far - near)[:, None] * steps

    if n_importance > 0 and rounds > 0:
        points = origins[:, None, :] + directions[:, None, :] * depths[..., None]
        sdf = sdf_fn(points)
        for i in range(rounds):
            new_depths = up_sample(origins, directions, depths, sdf, n_importance, 64.0 * 2**i, rng)
            depths = np.concatenate([depths, new_depths], axis=-1)
            order = np.argsort(depths, axis=-1, kind="stable")
            depths = np.take_along_axis(depths, order, axis=-1)
            if i < rounds - 1:
                new_points = origins[:, None, :] + directions[:, None, :] * new_depths[..., None]
                sdf = np.take_along_axis(
                    np.concatenate([sdf, sdf_fn(new_points)], axis=-1), order, axis=-1
                )

    return separate_ties(np.sort(depths, axis=-1), origins.dtype)


@dataclass
class RaySampleSet:
    """Samples of a ray batch and the field values the renderer computed there."""

    depths: np.ndarray
    points: Tensor
    field: FieldQuery
    alpha: Tensor
    transmittance: Tensor


@dataclass
class RenderResult:
    color: Tensor
    depth: Tensor
    opacity: Tensor
    samples: RaySampleSet


class VolumeRenderer:
    """Renders ray batches through the dynamic field."""

    def __init__(self, field: DynamicField, config: TrainConfig, log_s: Callable[[], Tensor]):
        self.field = field
        self.config = config
        self._log_s = log_s
        self.logger = logging.getLogger(__name__)

    @property
    def s_scale(self) -> Tensor:
        return T.exp(self._log_s())

    def sample(self, batch: RayBatch, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        def sdf_fn(points: np.ndarray) -> np.ndarray:
            flat = self.field.observed_sdf(points.reshape(-1, 3), batch.frame)
            return flat.reshape(points.shape[:-1])

        with no_grad():
            return sample_ray(
                batch.origins.data,
                batch.directions.data,
                batch.near,
                batch.far,
                sdf_fn,
                self.config.n_uniform,
                self.config.n_importance,
                self.config.importance_rounds,
                rng,
            )

    def render(
        self,
        batch: RayBatch,
        rng: Optional[np.random.Generator] = None,
        depths: Optional[np.ndarray] = None,
    ) -> RenderResult:
        """
        Render color, along-ray depth and opacity for a ray batch.

        Args:
            batch: Rays of one frame
            rng: Training-time sampling randomness; None is deterministic
            depths: Fixed sample depths (N, K) instead of sampling

        Returns:
            Rendered values plus the sample set used
        """
        if depths is None:
            depths = self.sample(batch, rng)
        depths = depths.astype(batch.origins.dtype)
        n_rays, n_samples = depths.shape

        points = T.unsqueeze(batch.origins, 1) + T.unsqueeze(batch.directions, 1) * depths[..., None]
        views = T.broadcast_to(T.unsqueeze(batch.directions, 1), (n_rays, n_samples, 3))
        query = self.field.query(
            points.reshape(n_rays * n_samples, 3), batch.frame, views.reshape(n_rays * n_samples, 3)
        )
        assert query.color is not None

        sdf = query.sdf.reshape(n_rays, n_samples)
        colors = query.color.reshape(n_rays, n_samples, 3)
        alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], self.s_scale)
        interval_colors = (colors[:, :-1] + colors[:, 1:]) * 0.5
        interval_depths = (depths[:, :-1] + depths[:, 1:]) * 0.5
        output = integrate_ray(alpha, interval_colors, interval_depths)

        samples = RaySampleSet(depths, points, query, alpha, output.transmittance)
        return RenderResult(output.color, output.depth, output.opacity, samples)


@dataclass
class FrameImages:
    """Rendered images of one frame; depth is normalized z-depth."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


def render_frame(
    renderer: VolumeRenderer,
    camera: Camera,
    frame: int,
    chunk: int = 1024,
    workers: int = 1,
    miss_band: float = 0.05,
) -> FrameImages:
    """
    Render every pixel of one frame without recording gradients.

    Chunks fan out over ``workers`` threads and are reassembled in pixel
    order, so the result does not depend on the worker count.
    """
    intrinsics = camera.intrinsics
    pixels = intrinsics.pixel_grid()
    chunks = [pixels[i : i + chunk] for i in range(0, len(pixels), chunk)]

    def render_chunk(chunk_pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        with no_grad():
            batch = generate_rays(camera, chunk_pixels, frame, miss_band)
            result = renderer.render(batch)
        scale = intrinsics.ray_scale(chunk_pixels)
        return result.color.data, result.depth.data / scale, result.opacity.data

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = list(pool.map(render_chunk, chunks))
    else:
        parts = [render_chunk(c) for c in chunks]

    h, w = intrinsics.height, intrinsics.width
    color = np.concatenate([p[0] for p in parts]).reshape(h, w, 3)
    depth = np.concatenate([p[1] for p in parts]).reshape(h, w)
    opacity = np.concatenate([p[2] for p in parts]).reshape(h, w)
    logger.debug(f"Rendered frame {frame} ({h}x{w}) in {len(chunks)} chunks")
    return FrameImages(color, depth, opacity)
