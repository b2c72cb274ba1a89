"""Tests for the supervision terms and their gradients."""

import math

import numpy as np
import pytest

from src.config.experiment import LossWeights
from src.diffmath import tensor as T
from src.diffmath.gradcheck import grad_check_parameters
from src.diffmath.tensor import Tensor, no_grad
from src.models.exceptions import NonFiniteLossError
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


class TestTerms:
    """Test the individual loss terms."""

    def test_mask_at_half_opacity(self):
        """Test that BCE at opacity 0.5 is log 2 for either label."""
        value = loss_mask(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert value.item() == pytest.approx(math.log(2.0))

    def test_mask_is_clamped(self):
        """Test that opacities of exactly 0 and 1 stay finite."""
        value = loss_mask(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
        assert np.isfinite(value.item())
        assert value.item() == pytest.approx(-math.log(1e-5), rel=1e-4)

    def test_color_masked_mean(self):
        """Test that unmasked rays contribute nothing but still count."""
        rendered = Tensor(np.array([[0.5, 0.5, 0.5], [1.0, 1.0, 1.0]]))
        observed = np.array([[0.0, 0.5, 1.0], [0.0, 0.0, 0.0]])
        value = loss_color(rendered, observed, np.array([1.0, 0.0]))
        assert value.item() == pytest.approx(1.0 / 6.0)

    def test_color_without_valid_rays(self):
        """Test that no valid rays gives zero."""
        rendered = Tensor(np.ones((2, 3)))
        value = loss_color(rendered, np.zeros((2, 3)), np.ones(2), valid=np.zeros(2, dtype=bool))
        assert value.item() == 0.0

    def test_depth_excludes_missing_depth(self):
        """Test that rays with zero observed depth are left out of the mean."""
        value = loss_depth(Tensor(np.array([1.0, 2.0, 5.0])), np.array([1.5, 0.0, 4.0]), np.ones(3))
        assert value.item() == pytest.approx((0.5 + 1.0) / 2.0)

    def test_eikonal_of_unit_gradients(self, rng):
        """Test that unit-length gradients give zero."""
        normals = rng.normal(size=(20, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        assert loss_eikonal(Tensor(normals)).item() == pytest.approx(0.0, abs=1e-12)

    def test_eikonal_of_doubled_sphere(self, rng):
        """Test d = 2(|p| - 0.5), whose gradient has norm 2, gives exactly 1."""
        p = rng.normal(size=(50, 3))
        normals = 2.0 * p / np.linalg.norm(p, axis=-1, keepdims=True)
        assert loss_eikonal(Tensor(normals)).item() == pytest.approx(1.0)

    def test_sdf_mean_absolute(self):
        """Test the surface SDF term."""
        assert loss_sdf(Tensor(np.array([0.1, -0.3]))).item() == pytest.approx(0.2)

    def test_visible_penalizes_facing_away(self):
        """Test that only normals along the view direction are penalized."""
        normals = Tensor(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
        views = Tensor(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]))
        value, skipped = loss_visible(normals, views)
        assert value.item() == pytest.approx(0.5)
        assert skipped == 0

    def test_visible_skips_degenerate_normals(self):
        """Test that zero normals are skipped instead of producing NaN."""
        normals = Tensor(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]))
        views = Tensor(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]))
        value, skipped = loss_visible(normals, views)
        assert skipped == 1
        assert value.item() == pytest.approx(1.0)


class TestLossTotal:
    """Test loss_total function."""

    def test_weighted_sum(self):
        """Test the weighted total and the free-space / surface split."""
        terms = {name: Tensor(np.array(1.0)) for name in ("mask", "color", "depth", "eikonal", "sdf", "visible")}
        breakdown = loss_total(terms, LossWeights())
        assert breakdown.total.item() == pytest.approx(0.1 + 1.0 + 0.5 + 0.1 + 0.5 + 0.1)
        assert breakdown.free_space == pytest.approx(1.7)
        assert breakdown.surface == pytest.approx(0.6)

    def test_missing_terms_count_as_zero(self):
        """Test that absent terms do not contribute."""
        breakdown = loss_total({"color": Tensor(np.array(2.0))}, LossWeights())
        assert breakdown.total.item() == pytest.approx(2.0)

    def test_non_finite_term_names_term(self):
        """Test that a NaN term aborts with its name and iteration."""
        terms = {"color": Tensor(np.array(1.0)), "depth": Tensor(np.array(np.nan))}
        with pytest.raises(NonFiniteLossError) as exc_info:
            loss_total(terms, LossWeights(), iteration=7)
        assert exc_info.value.term == "depth"
        assert exc_info.value.iteration == 7
        assert "depth" in str(exc_info.value)


class TestLossGradients:
    """Compare analytic gradients of every term with central differences."""

    @pytest.fixture
    def setup(self, tiny_train_config, synthetic_dataset):
        """Build a perturbed model and a fixed micro-batch on frame 0."""
        config = tiny_train_config.model_copy(
            update={
                "model": tiny_train_config.model.model_copy(update={"softplus_beta": 10.0}),
                "refine_poses": True,
                "refine_intrinsics": True,
            }
        )
        model = ReconstructionModel.from_dataset(config, synthetic_dataset, rng=np.random.default_rng(3))
        rng = np.random.default_rng(5)
        for name, param in model.store.items():
            if name.startswith(("hmap.", "topology.", "codes.")):
                param.data = param.data + rng.normal(0.0, 0.1, size=param.shape)
        model.store["camera.pose_delta"].data = rng.normal(0.0, 0.01, size=(model.n_frames, 6))

        frame = synthetic_dataset.frames[0]
        depth = synthetic_dataset.scene_depth(0)
        surface = frame.surface_pixels()
        background = np.argwhere(~frame.mask)[:, ::-1]
        pixels = np.concatenate([surface[:2], background[:2]])
        points = surface[rng.choice(len(surface), size=16, replace=False)]

        with no_grad():
            depths = model.renderer.sample(generate_rays(model.camera(0), pixels, 0))

        def terms():
            camera = model.camera(0)
            rays = generate_rays(camera, pixels, 0)
            mask = frame.mask[pixels[:, 1], pixels[:, 0]].astype(np.float64)
            color = frame.color[pixels[:, 1], pixels[:, 0]] / 255.0
            result = model.renderer.render(rays, depths=depths)
            along_ray = T.norm(camera.camera_directions(pixels), axis=-1) * depth[pixels[:, 1], pixels[:, 0]]

            surface_points, _ = camera.back_project(points, depth[points[:, 1], points[:, 0]])
            _, origin = camera.pose(surface_points.dtype)
            views = T.normalize(surface_points - origin)
            query = model.field.query(surface_points, 0, views, with_color=False)
            return {
                "mask": loss_mask(result.opacity, mask),
                "color": loss_color(result.color, color, mask, valid=rays.hit),
                "depth": loss_depth(result.depth, along_ray, mask * rays.hit),
                "eikonal": loss_eikonal(result.samples.field.normal),
                "sdf": loss_sdf(query.sdf),
                "visible": loss_visible(query.normal, query.view)[0],
            }

        return model, terms

    @pytest.mark.parametrize("term", ["mask", "color", "depth", "eikonal", "sdf", "visible"])
    def test_term_gradient(self, setup, term):
        """Test relative gradient error below 1e-3 over every parameter group."""
        model, terms = setup
        names = [
            "sdf.l0.weight",
            "sdf.l2.bias",
            "hmap.block0.a.l0.weight",
            "hmap.block1.b.l1.weight",
            "topology.l0.weight",
            "codes.deform",
            "codes.appearance",
            "color.l0.weight",
            "render.log_s",
            "camera.rgb.intrinsics",
            "camera.pose_delta",
        ]
        errors = grad_check_parameters(lambda: terms()[term], model.store, names, step=1e-6)
        failed = {name: err for name, err in errors.items() if err >= 1e-3}
        assert not failed, f"{term}: {failed}"
