"""The learnable reconstruction: field, cameras and renderer over one parameter store."""

import logging
import math
from typing import Optional

import numpy as np

from src.config.experiment import TrainConfig
from src.diffmath.nn import ParameterStore
from src.diffmath.tensor import Tensor
from src.models.camera import Camera, Intrinsics
from src.models.frames import Dataset, SceneNormalization
from src.services.fields import CanonicalField, DynamicField
from src.services.rendering import CameraRig, VolumeRenderer

S_SCALE_PARAM = "render.log_s"


def precision_dtype(precision: str) -> np.dtype:
    return np.dtype(np.float64 if precision == "float64" else np.float32)


class ReconstructionModel:
    """Everything optimized jointly: networks, per-frame codes, s_scale and cameras.

    Parameter creation order is fixed (field, cameras, s_scale), so a seed
    determines the initialization.
    """

    def __init__(
        self,
        config: TrainConfig,
        base_poses: np.ndarray,
        rgb_intrinsics: Intrinsics,
        depth_intrinsics: Optional[Intrinsics] = None,
        normalization: Optional[SceneNormalization] = None,
        rng: Optional[np.random.Generator] = None,
        canonical: Optional[CanonicalField] = None,
    ):
        self.config = config
        self.normalization = normalization or SceneNormalization.identity()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.store = ParameterStore(precision_dtype(config.precision))
        self.field = DynamicField(config.model, len(base_poses), self.store, rng, canonical)
        self.rig = CameraRig(self.store, base_poses, rgb_intrinsics, depth_intrinsics)
        self.store.create(S_SCALE_PARAM, np.array(math.log(config.model.s_scale_init)))
        self.renderer = VolumeRenderer(self.field, config, lambda: self.store[S_SCALE_PARAM])
        self.rig.set_refinement(config.refine_poses, config.refine_intrinsics)
        self.logger = logging.getLogger(__name__)
        self.logger.debug(
            f"Model with {len(self.store)} parameter arrays ({self.store.count()} values), "
            f"{self.n_frames} frames"
        )

    @classmethod
    def from_dataset(
        cls,
        config: TrainConfig,
        dataset: Dataset,
        rng: Optional[np.random.Generator] = None,
        canonical: Optional[CanonicalField] = None,
    ) -> "ReconstructionModel":
        return cls(
            config,
            dataset.normalized_poses(),
            dataset.rgb_intrinsics,
            dataset.depth_intrinsics if dataset.has_distinct_depth_camera else None,
            dataset.normalization,
            rng,
            canonical,
        )

    @property
    def n_frames(self) -> int:
        return len(self.rig)

    @property
    def log_s(self) -> Tensor:
        return self.store[S_SCALE_PARAM]

    @property
    def s_scale(self) -> float:
        return float(np.exp(self.log_s.data))

    def set_s_scale(self, value: float) -> None:
        self.log_s.data = np.array(math.log(value), dtype=self.store.dtype)

    def camera(self, frame: int, role: str = "rgb") -> Camera:
        return self.rig.camera(frame, role)
