"""Tests for ray bounds, sampling and volume rendering."""

import numpy as np
import pytest

from src.diffmath.tensor import Tensor, no_grad
from src.services.fields import AnalyticSphereField
from src.services.model import ReconstructionModel
from src.services.rendering import (
    generate_rays,
    integrate_ray,
    near_far_from_sphere,
    render_frame,
    sample_pdf,
    sample_ray,
    sdf_to_alpha,
    separate_ties,
)


def sphere_sdf(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points, axis=-1) - 0.5


class TestSdfToAlpha:
    """Test sdf_to_alpha function."""

    def test_crossing_interval(self):
        """Test the opacity of an interval crossing the surface."""
        alpha = sdf_to_alpha(Tensor(np.array([0.1])), Tensor(np.array([-0.1])), np.array(10.0))
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
        assert alpha.data[0] == pytest.approx((sig(1.0) - sig(-1.0)) / sig(1.0))

    def test_leaving_surface_is_transparent(self):
        """Test that increasing SDF gives zero opacity."""
        alpha = sdf_to_alpha(Tensor(np.array([-0.1, 0.2])), Tensor(np.array([0.1, 0.3])), np.array(10.0))
        np.testing.assert_array_equal(alpha.data, [0.0, 0.0])

    def test_underflow_gives_zero(self):
        """Test that Phi(s d_k) underflowing to zero gives alpha 0 and not NaN."""
        alpha = sdf_to_alpha(Tensor(np.array([-10.0])), Tensor(np.array([-10.5])), np.array(1e4))
        assert alpha.data[0] == 0.0
        assert np.all(np.isfinite(alpha.data))


class TestIntegrateRay:
    """Test integrate_ray function."""

    def test_two_half_opaque_intervals(self):
        """Test weights, opacity and depth for alpha = [0.5, 0.5]."""
        colors = Tensor(np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]))
        out = integrate_ray(Tensor(np.array([[0.5, 0.5]])), colors, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out.weights.data, [[0.5, 0.25]])
        np.testing.assert_allclose(out.transmittance.data, [[1.0, 0.5]])
        assert out.opacity.data[0] == pytest.approx(0.75)
        assert out.depth.data[0] == pytest.approx(1.0)
        np.testing.assert_allclose(out.color.data[0], [0.5, 0.25, 0.0])

    def test_transmittance_never_increases(self, rng):
        """Test that transmittance is non-increasing and starts at one."""
        alpha = Tensor(rng.random((5, 20)) * 0.3)
        out = integrate_ray(alpha, Tensor(np.zeros((5, 20, 3))), np.tile(np.arange(20.0), (5, 1)))
        assert np.all(np.diff(out.transmittance.data, axis=-1) <= 1e-15)
        np.testing.assert_allclose(out.transmittance.data[:, 0], 1.0)
        assert np.all(out.opacity.data <= 1.0 + 1e-12)

    def test_opaque_interval_blocks_the_rest(self):
        """Test that a fully opaque interval hides everything behind it."""
        out = integrate_ray(Tensor(np.array([[1.0, 0.5]])), Tensor(np.zeros((1, 2, 3))), np.array([[1.0, 2.0]]))
        assert out.weights.data[0, 1] < 1e-6


class TestRayBounds:
    """Test near_far_from_sphere function."""

    def test_ray_through_center(self):
        """Test bounds of a ray through the unit sphere center."""
        near, far, hit = near_far_from_sphere(np.array([[0.0, 0.0, -2.0]]), np.array([[0.0, 0.0, 1.0]]))
        assert hit[0]
        assert near[0] == pytest.approx(1.0)
        assert far[0] == pytest.approx(3.0)

    def test_miss_gets_band_around_closest_approach(self):
        """Test that a missing ray is bounded around its closest approach."""
        near, far, hit = near_far_from_sphere(np.array([[0.0, 2.0, -2.0]]), np.array([[0.0, 0.0, 1.0]]))
        assert not hit[0]
        assert near[0] == pytest.approx(1.95)
        assert far[0] == pytest.approx(2.05)

    def test_ray_pointing_away(self):
        """Test that a sphere behind the camera is not a hit."""
        _, _, hit = near_far_from_sphere(np.array([[0.0, 0.0, -2.0]]), np.array([[0.0, 0.0, -1.0]]))
        assert not hit[0]


class TestSampling:
    """Test stratified and importance sampling."""

    def test_sample_count_and_order(self):
        """Test that samples are strictly increasing with the expected count."""
        origins = np.array([[0.0, 0.0, -2.0], [0.3, 0.1, -2.0]])
        directions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        near, far, _ = near_far_from_sphere(origins, directions)
        depths = sample_ray(origins, directions, near, far, sphere_sdf, n_uniform=16, n_importance=8, rounds=2)
        assert depths.shape == (2, 32)
        assert np.all(np.diff(depths, axis=-1) > 0)

    def test_importance_samples_cluster_at_surface(self):
        """Test that refinement puts samples near the first crossing."""
        origins = np.array([[0.0, 0.0, -2.0]])
        directions = np.array([[0.0, 0.0, 1.0]])
        near, far, _ = near_far_from_sphere(origins, directions)
        depths = sample_ray(origins, directions, near, far, sphere_sdf, n_uniform=16, n_importance=16, rounds=2)
        close = np.count_nonzero(np.abs(depths[0] - 1.5) < 0.0625)
        assert close >= 16

    def test_random_sampling_stays_in_bounds(self, rng):
        """Test jittered sampling."""
        origins = np.array([[0.0, 0.0, -2.0]])
        directions = np.array([[0.0, 0.0, 1.0]])
        depths = sample_ray(
            origins, directions, np.array([1.0]), np.array([3.0]), sphere_sdf, 8, 4, 1, rng=rng
        )
        assert np.all(depths >= 1.0)
        assert np.all(depths <= 3.0 + 1e-6)
        assert np.all(np.diff(depths, axis=-1) > 0)

    def test_ties_survive_single_precision(self):
        """Test that coincident depths near 2 stay strictly increasing after a float32 cast."""
        depths = np.array([[1.5, 2.0, 2.0, 2.0, 2.0 + 1e-9, 2.5]])
        separated = separate_ties(depths, np.dtype(np.float32)).astype(np.float32)
        assert np.all(np.diff(separated, axis=-1) > 0)
        np.testing.assert_allclose(separated, depths, atol=1e-5)

    def test_single_precision_samples_strictly_increasing(self, rng):
        """Test float32 rays end up with strictly increasing float32 depths."""
        origins = np.tile(np.array([[0.0, 0.0, -2.0]], dtype=np.float32), (4, 1))
        directions = np.tile(np.array([[0.0, 0.0, 1.0]], dtype=np.float32), (4, 1))
        near, far, _ = near_far_from_sphere(origins, directions)
        depths = sample_ray(origins, directions, near, far, sphere_sdf, 32, 16, 3, rng=rng)
        assert np.all(np.diff(depths.astype(np.float32), axis=-1) > 0)

    def test_sample_pdf_follows_weights(self):
        """Test that inverse-CDF samples land in the heavy bin."""
        bins = np.array([[0.0, 1.0, 2.0, 3.0]])
        weights = np.array([[0.0, 1.0, 0.0]])
        samples = sample_pdf(bins, weights, 10)
        assert np.all((samples >= 1.0 - 1e-3) & (samples <= 2.0 + 1e-3))


class TestSphereOracle:
    """Render an exact sphere of radius 0.5 and compare with ray casting."""

    def setup_method(self):
        """Setup sampling settings."""
        self.n_uniform = 64

    def _model(self, tiny_train_config, intrinsics, front_pose):
        config = tiny_train_config.model_copy(
            update={"n_uniform": self.n_uniform, "n_importance": 16, "importance_rounds": 2}
        )
        model = ReconstructionModel(
            config, np.stack([front_pose]), intrinsics, rng=np.random.default_rng(0),
            canonical=AnalyticSphereField(0.5),
        )
        model.set_s_scale(400.0)
        return model

    def _rays(self, model, intrinsics):
        pixels = intrinsics.pixel_grid()
        batch = generate_rays(model.camera(0), pixels, 0)
        o, d = batch.origins.data, batch.directions.data
        b = np.sum(o * d, axis=-1)
        closest = np.sqrt(np.sum(o * o, axis=-1) - b * b)
        return pixels, batch, b, closest

    def test_hit_depths_match_ray_casting(self, tiny_train_config, intrinsics, front_pose):
        """Test rendered depth within two sample intervals and opacity above 0.99."""
        model = self._model(tiny_train_config, intrinsics, front_pose)
        pixels, batch, b, closest = self._rays(model, intrinsics)
        hits = np.flatnonzero(closest <= 0.4)
        assert len(hits) >= 100
        hits = hits[:100]

        with no_grad():
            result = model.renderer.render(generate_rays(model.camera(0), pixels[hits], 0))
        c = np.sum(batch.origins.data[hits] ** 2, axis=-1) - 0.25
        expected = -b[hits] - np.sqrt(b[hits] ** 2 - c)
        tolerance = 2.0 * (batch.far[hits] - batch.near[hits]) / self.n_uniform

        assert np.all(np.abs(result.depth.data - expected) <= tolerance)
        assert np.all(result.opacity.data > 0.99)

    def test_misses_are_transparent(self, tiny_train_config, intrinsics, front_pose):
        """Test opacity below 0.01 for rays passing at least 0.1 outside the sphere."""
        model = self._model(tiny_train_config, intrinsics, front_pose)
        pixels, _, _, closest = self._rays(model, intrinsics)
        misses = np.flatnonzero(closest >= 0.6)
        assert len(misses) > 0

        with no_grad():
            result = model.renderer.render(generate_rays(model.camera(0), pixels[misses], 0))
        assert np.all(result.opacity.data < 0.01)


class TestRenderFrame:
    """Test render_frame function."""

    def test_worker_count_does_not_change_result(self, sphere_model):
        """Test that threaded chunks reassemble to the same images."""
        camera = sphere_model.camera(0)
        serial = render_frame(sphere_model.renderer, camera, 0, chunk=100, workers=1)
        threaded = render_frame(sphere_model.renderer, camera, 0, chunk=100, workers=3)
        np.testing.assert_array_equal(serial.color, threaded.color)
        np.testing.assert_array_equal(serial.depth, threaded.depth)
        np.testing.assert_array_equal(serial.opacity, threaded.opacity)

    def test_center_z_depth(self, sphere_model, intrinsics):
        """Test image shapes and the z-depth at the principal point."""
        images = render_frame(sphere_model.renderer, sphere_model.camera(0), 0, chunk=256)
        assert images.color.shape == (intrinsics.height, intrinsics.width, 3)
        assert images.depth.shape == (intrinsics.height, intrinsics.width)
        assert images.depth[12, 12] == pytest.approx(1.5, abs=0.1)
        assert images.opacity[12, 12] > 0.99
        assert images.opacity[0, 0] < 0.01
