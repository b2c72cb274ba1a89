"""Evaluation metrics: geometry error, cycle consistency, Chamfer distance and pose error."""

import logging
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import trimesh
from scipy.spatial import cKDTree

from src.diffmath import tensor as T
from src.diffmath.nn import ParameterStore
from src.diffmath.optim import adam_step
from src.diffmath.tensor import no_grad
from src.models.exceptions import MetricError
from src.models.frames import Dataset
from src.models.geometry import MetricReport, TriangleMesh
from src.services.model import ReconstructionModel
from src.services.rendering import render_frame
from src.utils.se3 import rotation_error_deg

MILLIMETERS_PER_UNIT = 1000.0
DEFAULT_TRIPLES = 1000
DEFAULT_CHAMFER_SAMPLES = 20000
REFINE_STEPS = 50
REFINE_LR = 1e-3
CYCLE_MODES = ("bijective", "topology")

logger = logging.getLogger(__name__)


def depth_error_mm(
    rendered: np.ndarray, observed: np.ndarray, mask: np.ndarray, scale: float
) -> Optional[float]:
    """
    Mean absolute depth difference inside the mask, in millimeters.

    Both depths are normalized z-depth; 0 in ``observed`` marks an invalid
    pixel. Returns None when no masked pixel has valid depth.
    """
    valid = np.asarray(mask, dtype=bool) & (observed > 0)
    if not np.any(valid):
        return None
    diff = np.abs(rendered[valid] - observed[valid]) / scale
    return float(np.mean(diff) * MILLIMETERS_PER_UNIT)


def masked_depth_l1(rendered: np.ndarray, observed: np.ndarray, mask: np.ndarray) -> Optional[float]:
    """Mean absolute depth difference inside the mask in scene units."""
    valid = np.asarray(mask, dtype=bool) & (observed > 0)
    if not np.any(valid):
        return None
    return float(np.mean(np.abs(rendered[valid] - observed[valid])))


def render_depths(
    model: ReconstructionModel, dataset: Dataset, frames: Iterable[int], workers: int = 1
) -> List[Tuple[int, np.ndarray]]:
    """Rendered z-depth of each frame as seen by the camera that observed its depth."""
    role = "depth" if dataset.has_distinct_depth_camera else "rgb"
    out = []
    for index in frames:
        images = render_frame(
            model.renderer,
            model.camera(index, role),
            index,
            workers=workers,
            miss_band=model.config.miss_band,
        )
        out.append((index, images.depth))
    return out


def geometry_error(
    model: ReconstructionModel,
    dataset: Dataset,
    frames: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> MetricReport:
    """
    Per-frame depth error of the model against the observed masked depth.

    Frames without masked valid depth are skipped and noted in the report.
    """
    report = MetricReport(name="geometry_error", unit="mm")
    skipped = []
    indices = range(len(dataset)) if frames is None else frames
    for index, rendered in render_depths(model, dataset, indices, workers):
        frame = dataset.frames[index]
        value = depth_error_mm(
            rendered, dataset.scene_depth(index), frame.mask, dataset.normalization.scale
        )
        if value is None:
            skipped.append(index)
            continue
        report.add(index, value)
    if skipped:
        report.notes = f"skipped frames without masked depth: {skipped}"
        logger.warning(f"Geometry error skipped {len(skipped)} frames without masked depth")
    return report


def surface_points(
    model: ReconstructionModel, dataset: Dataset, frame: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Normalized observed points of one frame drawn from its masked depth."""
    record = dataset.frames[frame]
    pixels = record.surface_pixels()
    if len(pixels) == 0:
        return np.zeros((0, 3))
    pick = pixels[rng.choice(len(pixels), size=min(count, len(pixels)), replace=False)]
    role = "depth" if dataset.has_distinct_depth_camera else "rgb"
    depth = dataset.scene_depth(frame)[pick[:, 1], pick[:, 0]]
    with no_grad():
        points, _ = model.camera(frame, role).back_project(pick, depth)
    return points.data.astype(np.float64)


def _refine_topology(
    model: ReconstructionModel, source: np.ndarray, start: np.ndarray, frame_i: int, frame_j: int
) -> np.ndarray:
    """Move ``start`` so that its frame-j hyper-coordinates match those of ``source`` in frame i."""
    field = model.field
    with no_grad():
        target = field.deform_to_hyper(source, frame_i).data
    points = ParameterStore(model.store.dtype)
    p = points.create("p", start)
    for _ in range(REFINE_STEPS):
        residual = field.deform_to_hyper(p, frame_j) - target
        loss = T.tsum(residual * residual)
        points.zero_grad()
        loss.backward()
        adam_step(points, lr=REFINE_LR)
    model.store.zero_grad()
    return p.data.astype(np.float64)


def _correspond(
    model: ReconstructionModel, points: np.ndarray, frame_i: int, frame_j: int, mode: str
) -> np.ndarray:
    with no_grad():
        mapped = model.field.correspondence(points, frame_i, frame_j).data.astype(np.float64)
    if mode == "topology" and frame_i != frame_j:
        mapped = _refine_topology(model, points, mapped, frame_i, frame_j)
    return mapped


def cycle_error(
    model: ReconstructionModel, points: np.ndarray, triple: Tuple[int, int, int], mode: str = "bijective"
) -> float:
    """Mean |f_ij + f_jk - f_ik| of points observed in frame i."""
    i, j, k = triple
    p_j = _correspond(model, points, i, j, mode)
    p_k = _correspond(model, p_j, j, k, mode)
    direct = _correspond(model, points, i, k, mode)
    f_ij = p_j - points
    f_jk = p_k - p_j
    f_ik = direct - points
    return float(np.mean(np.linalg.norm(f_ij + f_jk - f_ik, axis=-1)))


def eval_cycle_consistency(
    model: ReconstructionModel,
    dataset: Dataset,
    n_triples: int = DEFAULT_TRIPLES,
    points_per_triple: int = 64,
    rng: Optional[np.random.Generator] = None,
    mode: str = "bijective",
) -> MetricReport:
    """
    Path-invariance error over random frame triples.

    Args:
        model: Trained model
        dataset: Source of the surface points
        n_triples: Number of random (i, j, k) groups
        points_per_triple: Surface points drawn from frame i per triple
        rng: Random source; defaults to the model seed
        mode: "bijective" maps through the invertible network only; "topology"
            also refines each target point so its topology coordinates agree

    Returns:
        Report keyed by triple number, in normalized units
    """
    if mode not in CYCLE_MODES:
        raise MetricError(f"Unknown cycle mode '{mode}'. Valid modes: {CYCLE_MODES}")
    rng = rng if rng is not None else np.random.default_rng(model.config.seed)
    n_frames = model.n_frames
    report = MetricReport(name="cycle_consistency", unit="normalized")
    for t in range(n_triples):
        triple = tuple(int(f) for f in rng.choice(n_frames, size=3, replace=n_frames < 3))
        points = surface_points(model, dataset, triple[0], points_per_triple, rng)
        if len(points) == 0:
            continue
        report.add(f"{t}:{triple[0]}-{triple[1]}-{triple[2]}", cycle_error(model, points, triple, mode))
    if not report.values:
        raise MetricError("No frame has masked depth to draw surface points from")
    logger.info(f"Cycle consistency ({mode}) over {len(report.values)} triples: mean {report.mean:.3e}")
    return report


def chamfer(
    mesh_a: TriangleMesh, mesh_b: TriangleMesh, n_samples: int = DEFAULT_CHAMFER_SAMPLES, seed: int = 0
) -> Tuple[float, bool]:
    """
    Symmetric mean closest-point distance between surface samples.

    Returns:
        (distance, flagged); an empty mesh gives (inf, True)
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        logger.warning("Chamfer distance requested for an empty mesh")
        return float("inf"), True
    samples_a, _ = trimesh.sample.sample_surface(mesh_a.to_trimesh(), n_samples, seed=seed)
    samples_b, _ = trimesh.sample.sample_surface(mesh_b.to_trimesh(), n_samples, seed=seed + 1)
    a_to_b, _ = cKDTree(samples_b).query(samples_a)
    b_to_a, _ = cKDTree(samples_a).query(samples_b)
    return float(0.5 * (np.mean(a_to_b) + np.mean(b_to_a))), False


def chamfer_report(
    pairs: Iterable[Tuple[int, TriangleMesh, TriangleMesh]], n_samples: int = DEFAULT_CHAMFER_SAMPLES
) -> MetricReport:
    report = MetricReport(name="chamfer", unit="normalized")
    for index, reconstructed, reference in pairs:
        distance, flagged = chamfer(reconstructed, reference, n_samples, seed=index)
        report.add(index, distance)
        report.flagged = report.flagged or flagged
    return report


def pose_error(refined: np.ndarray, reference: np.ndarray) -> Tuple[MetricReport, MetricReport]:
    """
    Per-frame rotation (degrees) and translation errors of world-from-camera poses.

    Raises:
        MetricError: If the pose stacks differ in length
    """
    refined = np.asarray(refined, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if refined.shape != reference.shape:
        raise MetricError(f"Pose stacks differ: {refined.shape} vs {reference.shape}")
    rotation = MetricReport(name="pose_rotation_error", unit="deg")
    translation = MetricReport(name="pose_translation_error", unit="normalized")
    for index, (est, ref) in enumerate(zip(refined, reference)):
        rotation.add(index, rotation_error_deg(est, ref))
        translation.add(index, float(np.linalg.norm(est[:3, 3] - ref[:3, 3])))
    return rotation, translation
