"""Iso-surface extraction of canonical and per-frame surfaces, and mesh files."""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import trimesh
from skimage import measure

from src.diffmath import tensor as T
from src.diffmath.tensor import Tensor, no_grad
from src.models.exceptions import MeshError
from src.models.geometry import TriangleMesh
from src.services.model import ReconstructionModel

DEFAULT_RESOLUTION = 128
MAX_RESOLUTION = 192
GRID_BOUND = 1.0
MESH_SUFFIXES = (".obj", ".ply")

SdfFn = Callable[[np.ndarray], np.ndarray]

logger = logging.getLogger(__name__)


def evaluate_grid(fn: SdfFn, resolution: int, bound: float = GRID_BOUND, workers: int = 1) -> np.ndarray:
    """
    Sample ``fn`` on a resolution^3 grid over [-bound, bound]^3.

    Slabs of constant x are evaluated independently and may run on threads.

    Returns:
        Volume indexed [ix, iy, iz]
    """
    if resolution < 2:
        raise MeshError(f"Grid resolution must be >= 2, got {resolution}")
    axis = np.linspace(-bound, bound, resolution)
    volume = np.empty((resolution, resolution, resolution), dtype=np.float64)
    yy, zz = np.meshgrid(axis, axis, indexing="ij")

    def slab(ix: int) -> None:
        points = np.stack([np.full(yy.size, axis[ix]), yy.ravel(), zz.ravel()], axis=-1)
        volume[ix] = np.asarray(fn(points), dtype=np.float64).reshape(resolution, resolution)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(slab, range(resolution)))
    else:
        for ix in range(resolution):
            slab(ix)
    return volume


def marching_cubes_grid(volume: np.ndarray, bound: float = GRID_BOUND, level: float = 0.0) -> TriangleMesh:
    """Zero level set of a grid volume; an empty zero set gives an empty mesh."""
    if not np.all(np.isfinite(volume)):
        raise MeshError("Grid volume has non-finite values")
    if volume.min() > level or volume.max() < level:
        logger.warning("No zero crossing in the grid, returning an empty mesh")
        return TriangleMesh.empty()
    spacing = 2.0 * bound / (volume.shape[0] - 1)
    vertices, faces, _, _ = measure.marching_cubes(
        volume, level=level, spacing=(spacing, spacing, spacing), gradient_direction="ascent"
    )
    return TriangleMesh(vertices - bound, faces)


def extract_mesh(fn: SdfFn, resolution: int = DEFAULT_RESOLUTION, workers: int = 1) -> TriangleMesh:
    if resolution > MAX_RESOLUTION:
        logger.warning(f"Resolution {resolution} exceeds {MAX_RESOLUTION}; extraction will be slow")
    mesh = marching_cubes_grid(evaluate_grid(fn, resolution, workers=workers))
    logger.info(f"Extracted mesh with {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return mesh


def reference_topology(
    model: ReconstructionModel, frame: int = 0, reference_point: Optional[np.ndarray] = None
) -> np.ndarray:
    """q at a reference point of one frame; the origin is the normalized sequence centroid."""
    point = np.zeros((1, 3)) if reference_point is None else np.asarray(reference_point).reshape(1, 3)
    with no_grad():
        hyper = model.field.deform_to_hyper(point, frame)
    return hyper.data[0, 3:]


def extract_canonical_mesh(
    model: ReconstructionModel,
    resolution: int = DEFAULT_RESOLUTION,
    reference_frame: int = 0,
    reference_point: Optional[np.ndarray] = None,
    workers: int = 1,
) -> TriangleMesh:
    """
    Marching cubes on d([p, q_ref]) over the canonical unit cube.

    Args:
        model: Trained model
        resolution: Grid samples per axis
        reference_frame: Frame whose topology coordinates fix the slice
        reference_point: Observed point where q is evaluated
        workers: Threads for grid evaluation
    """
    q_ref = reference_topology(model, reference_frame, reference_point)
    dtype = model.store.dtype

    def canonical_sdf(points: np.ndarray) -> np.ndarray:
        hyper = np.concatenate([points, np.broadcast_to(q_ref, (len(points), len(q_ref)))], axis=-1)
        with no_grad():
            d, _ = model.field.sdf_eval(Tensor(hyper.astype(dtype)))
        return d.data

    return extract_mesh(canonical_sdf, resolution, workers)


def extract_frame_mesh(
    model: ReconstructionModel, frame: int, resolution: int = DEFAULT_RESOLUTION, workers: int = 1
) -> TriangleMesh:
    """Marching cubes in observation space on the SDF composed with frame ``frame``'s deformation."""
    return extract_mesh(lambda points: model.field.observed_sdf(points, frame), resolution, workers)


def colorize_mesh(model: ReconstructionModel, mesh: TriangleMesh, frame: int) -> TriangleMesh:
    """Vertex colors seen head-on, i.e. along the inverted vertex normal."""
    if mesh.is_empty:
        return mesh
    normals = np.asarray(mesh.to_trimesh().vertex_normals, dtype=np.float64)
    dtype = model.store.dtype
    vertices = mesh.vertices.astype(dtype)
    with no_grad():
        hyper = model.field.deform_to_hyper(vertices, frame)
        color = model.field.color_eval(hyper, vertices, T.normalize(Tensor(-normals.astype(dtype))), frame)
    return TriangleMesh(mesh.vertices, mesh.faces, np.clip(color.data, 0.0, 1.0))


def write_mesh(mesh: TriangleMesh, path: Path) -> Path:
    """
    Write OBJ or PLY chosen by suffix; vertex colors are kept.

    Raises:
        MeshError: On an unknown suffix or write failure
    """
    path = Path(path)
    if path.suffix.lower() not in MESH_SUFFIXES:
        raise MeshError(f"Unsupported mesh format '{path.suffix}'. Valid formats: {MESH_SUFFIXES}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        mesh.to_trimesh().export(str(path))
    except OSError as e:
        raise MeshError(f"Failed to write mesh {path}: {e}") from e
    return path


def read_mesh(path: Path) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"Mesh file not found: {path}")
    try:
        loaded = trimesh.load(str(path), process=False, force="mesh")
    except Exception as e:
        raise MeshError(f"Failed to read mesh {path}: {e}") from e
    return TriangleMesh.from_trimesh(loaded)
