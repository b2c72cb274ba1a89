"""Tests for triangle meshes and metric reports."""

import numpy as np
import pytest

from src.models.exceptions import MeshError, MetricError
from src.models.geometry import MetricReport, TriangleMesh

QUAD_VERTICES = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
QUAD_FACES = np.array([[0, 1, 2], [0, 2, 3]])


class TestTriangleMesh:
    """Test TriangleMesh class."""

    def test_face_index_out_of_range(self):
        """Test that faces must reference existing vertices."""
        with pytest.raises(MeshError):
            TriangleMesh(QUAD_VERTICES, np.array([[0, 1, 4]]))

    def test_non_finite_vertices(self):
        """Test that NaN vertices are rejected."""
        vertices = QUAD_VERTICES.copy()
        vertices[0, 0] = np.nan
        with pytest.raises(MeshError):
            TriangleMesh(vertices, QUAD_FACES)

    def test_color_count(self):
        """Test that vertex colors must match the vertex count."""
        with pytest.raises(MeshError):
            TriangleMesh(QUAD_VERTICES, QUAD_FACES, np.zeros((3, 3)))

    def test_empty(self):
        """Test the empty mesh."""
        assert TriangleMesh.empty().is_empty

    def test_transformed(self):
        """Test mapping every vertex."""
        moved = TriangleMesh(QUAD_VERTICES, QUAD_FACES).transformed(lambda v: v + 1.0)
        np.testing.assert_allclose(moved.vertices, QUAD_VERTICES + 1.0)
        np.testing.assert_array_equal(moved.faces, QUAD_FACES)

    def test_trimesh_round_trip_keeps_colors(self):
        """Test conversion through trimesh with vertex colors."""
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])
        mesh = TriangleMesh.from_trimesh(TriangleMesh(QUAD_VERTICES, QUAD_FACES, colors).to_trimesh())
        np.testing.assert_allclose(mesh.vertices, QUAD_VERTICES)
        np.testing.assert_allclose(mesh.colors, colors)


class TestMetricReport:
    """Test MetricReport class."""

    def test_mean_and_median(self):
        """Test summary statistics."""
        report = MetricReport(name="geometry_error", unit="mm")
        for key, value in enumerate([1.0, 2.0, 6.0]):
            report.add(key, value)
        assert report.mean == pytest.approx(3.0)
        assert report.median == pytest.approx(2.0)
        summary = report.to_dict()
        assert summary["values"] == {"0": 1.0, "1": 2.0, "2": 6.0}
        assert summary["unit"] == "mm"

    def test_empty_report(self):
        """Test that an empty report has no mean."""
        report = MetricReport(name="chamfer")
        with pytest.raises(MetricError):
            report.mean
        assert "mean" not in report.to_dict()
