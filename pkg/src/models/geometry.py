"""Triangle meshes and metric reports."""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
import trimesh

from src.models.exceptions import MeshError, MetricError


@dataclass
class TriangleMesh:
    """Vertices, triangles and optional per-vertex colors in [0, 1]."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("Mesh has non-finite vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError(f"Face indices out of range for {len(self.vertices)} vertices")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise MeshError("Vertex color count does not match vertex count")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        vertex_colors = None
        if self.colors is not None:
            vertex_colors = np.clip(np.round(self.colors * 255), 0, 255).astype(np.uint8)
        return trimesh.Trimesh(
            vertices=self.vertices, faces=self.faces, vertex_colors=vertex_colors, process=False
        )

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "TriangleMesh":
        colors = None
        visual = getattr(mesh, "visual", None)
        if visual is not None and getattr(visual, "kind", None) == "vertex":
            colors = np.asarray(visual.vertex_colors)[:, :3] / 255.0
        return cls(np.asarray(mesh.vertices), np.asarray(mesh.faces), colors)

    def transformed(self, fn: Callable[[np.ndarray], np.ndarray]) -> "TriangleMesh":
        """Copy with every vertex mapped through ``fn``."""
        return TriangleMesh(fn(self.vertices), self.faces.copy(), self.colors)


@dataclass
class MetricReport:
    """Per-item values of one metric with their mean and median."""

    name: str
    values: Dict[str, float] = field(default_factory=dict)
    unit: str = ""
    flagged: bool = False
    notes: str = ""

    def add(self, key: object, value: float) -> None:
        self.values[str(key)] = float(value)

    @property
    def mean(self) -> float:
        if not self.values:
            raise MetricError(f"Metric '{self.name}' has no values")
        return float(np.mean(list(self.values.values())))

    @property
    def median(self) -> float:
        if not self.values:
            raise MetricError(f"Metric '{self.name}' has no values")
        return float(np.median(list(self.values.values())))

    def to_dict(self) -> dict:
        summary: dict = {"name": self.name, "unit": self.unit, "values": dict(self.values)}
        if self.values:
            summary["mean"] = self.mean
            summary["median"] = self.median
        summary["flagged"] = self.flagged
        if self.notes:
            summary["notes"] = self.notes
        return summary
