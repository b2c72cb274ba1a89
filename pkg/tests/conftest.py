"""Test configuration and fixtures."""

import numpy as np
import pytest

from src.config.experiment import ModelConfig, TrainConfig
from src.models.camera import Intrinsics
from src.models.scene_spec import SyntheticSceneSpec
from src.services.dataio import load_dataset
from src.services.fields import AnalyticSphereField
from src.services.model import ReconstructionModel
from src.services.synthetic import synth_generate
from src.utils.se3 import look_at

WORLD_UP = np.array([0.0, 1.0, 0.0])


@pytest.fixture
def rng():
    """Provide a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Provide network sizes small enough for fast tests."""
    return ModelConfig(
        n_blocks=2,
        block_hidden_layers=1,
        block_hidden_width=8,
        block_bands=2,
        deform_code_width=4,
        appearance_code_width=4,
        topology_dims=1,
        topology_hidden_layers=1,
        topology_hidden_width=8,
        topology_bands=2,
        sdf_hidden_layers=2,
        sdf_hidden_width=32,
        sdf_bands=2,
        feature_width=4,
        color_hidden_layers=1,
        color_hidden_width=8,
        color_bands=1,
    )


@pytest.fixture
def tiny_train_config(tiny_model_config):
    """Provide a float64 training configuration with small batches."""
    return TrainConfig(
        iterations=3,
        rays_per_batch=16,
        depth_points_per_batch=16,
        precision="float64",
        n_uniform=16,
        n_importance=4,
        importance_rounds=1,
        checkpoint_every=0,
        log_every=1,
        model=tiny_model_config,
    )


@pytest.fixture
def intrinsics():
    """Provide a 24x24 pinhole camera."""
    return Intrinsics(fx=30.0, fy=30.0, cx=12.0, cy=12.0, width=24, height=24)


@pytest.fixture
def front_pose():
    """Provide a camera at (0, 0, -2) looking at the origin."""
    return look_at(np.array([0.0, 0.0, -2.0]), np.zeros(3), WORLD_UP)


@pytest.fixture
def identity_model(tiny_train_config, intrinsics, front_pose):
    """Provide a freshly initialized model over three frames."""
    poses = np.stack([front_pose] * 3)
    return ReconstructionModel(tiny_train_config, poses, intrinsics, rng=np.random.default_rng(0))


@pytest.fixture
def sphere_model(tiny_train_config, intrinsics, front_pose):
    """Provide a model whose canonical SDF is an exact sphere of radius 0.5."""
    model = ReconstructionModel(
        tiny_train_config,
        np.stack([front_pose]),
        intrinsics,
        rng=np.random.default_rng(0),
        canonical=AnalyticSphereField(0.5),
    )
    model.set_s_scale(400.0)
    return model


@pytest.fixture
def synthetic_spec():
    """Provide a small twisting, rotating sphere scene."""
    return SyntheticSceneSpec(
        name="tiny",
        frames=3,
        width=24,
        height=24,
        focal=30.0,
        camera_distance=2.0,
        twist_rate=0.05,
        rotation_deg_per_frame=2.0,
        gt_mesh_resolution=16,
        seed=0,
    )


@pytest.fixture
def synthetic_root(tmp_path, synthetic_spec):
    """Provide a generated synthetic dataset directory."""
    root = tmp_path / "scene"
    synth_generate(synthetic_spec, root)
    return root


@pytest.fixture
def synthetic_dataset(synthetic_root):
    """Provide the synthetic dataset as loaded from disk."""
    return load_dataset(synthetic_root)
