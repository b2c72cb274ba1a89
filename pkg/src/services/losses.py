"""Supervision terms and the weighted objective.

Terms are means over rays or points so the weights stay independent of the
batch size. Free-space terms (mask, color, depth, eikonal) act on ray samples;
surface terms (sdf, visible) act on back-projected depth points.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.config.experiment import FREE_SPACE_TERMS, LOSS_TERMS, SURFACE_TERMS, LossWeights
from src.diffmath import tensor as T
from src.diffmath.tensor import Tensor
from src.models.exceptions import NonFiniteLossError

MASK_EPS = 1e-5

logger = logging.getLogger(__name__)


def _zero(like: Tensor) -> Tensor:
    return T.tsum(like) * 0.0


def loss_color(
    rendered: Tensor, observed: np.ndarray, mask: np.ndarray, valid: Optional[np.ndarray] = None
) -> Tensor:
    """
    Masked L1 color error, averaged over rays and channels.

    Args:
        rendered: Rendered colors (N, 3)
        observed: Observed colors in [0, 1] (N, 3)
        mask: Object mask per ray (N,)
        valid: Rays that take part (e.g. those hitting the bounding sphere)
    """
    mask = np.asarray(mask, dtype=rendered.dtype)
    if valid is not None:
        mask = mask * np.asarray(valid, dtype=rendered.dtype)
    count = int(np.count_nonzero(valid)) if valid is not None else len(mask)
    if count == 0:
        return _zero(rendered)
    residual = T.absolute((rendered - observed) * mask[:, None])
    return T.tsum(residual) / (3.0 * count)


def loss_depth(rendered: Tensor, observed: object, mask: np.ndarray) -> Tensor:
    """
    Masked L1 depth error over rays with a valid observed depth.

    Rays whose observed depth is zero are excluded from the mean.
    """
    observed = T.as_tensor(observed)
    valid = (observed.data > 0) & np.isfinite(observed.data)
    count = int(np.count_nonzero(valid))
    if count == 0:
        return _zero(rendered)
    gate = np.asarray(mask, dtype=rendered.dtype) * valid
    safe_observed = T.where(valid, observed, np.zeros((), dtype=observed.dtype))
    return T.tsum(T.absolute((rendered - safe_observed) * gate)) / count


def loss_mask(opacity: Tensor, mask: np.ndarray) -> Tensor:
    """Binary cross entropy of accumulated opacity against the mask."""
    clamped = T.clamp(opacity, MASK_EPS, 1.0 - MASK_EPS)
    target = np.asarray(mask, dtype=opacity.dtype)
    bce = -(T.log(clamped) * target + T.log(1.0 - clamped) * (1.0 - target))
    return T.mean(bce)


def loss_eikonal(normals: Tensor) -> Tensor:
    """Mean of (|grad_p d| - 1)^2 over hyper-space samples."""
    if len(normals) == 0:
        return _zero(normals)
    return T.mean((T.norm(normals, axis=-1, eps=1e-12) - 1.0) ** 2)


def loss_sdf(sdf: Tensor) -> Tensor:
    """Mean |d| at surface points."""
    if len(sdf) == 0:
        return _zero(sdf)
    return T.mean(T.absolute(sdf))


def loss_visible(normals: Tensor, views: Tensor) -> Tuple[Tensor, int]:
    """
    Mean of max(<n/|n|, v/|v|>, 0) at surface points.

    Points with a zero-norm normal or view are skipped.

    Returns:
        (value, number of skipped points)
    """
    usable = (np.linalg.norm(normals.data, axis=-1) > 1e-12) & (np.linalg.norm(views.data, axis=-1) > 1e-12)
    skipped = int(len(usable) - np.count_nonzero(usable))
    if skipped:
        logger.debug(f"Visibility term skipped {skipped} points with degenerate normals")
    if not np.any(usable):
        return _zero(normals), skipped
    keep = np.flatnonzero(usable)
    cosine = T.dot(T.normalize(normals[keep]), T.normalize(views[keep]))
    return T.mean(T.relu(cosine)), skipped


@dataclass
class LossBreakdown:
    """Per-term values, their weights and the weighted total."""

    terms: Dict[str, Tensor]
    weights: Dict[str, float]
    total: Tensor
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        return {name: float(term.data) for name, term in self.terms.items()}

    def _subtotal(self, names: Tuple[str, ...]) -> float:
        return sum(self.weights[n] * float(self.terms[n].data) for n in names if n in self.terms)

    @property
    def free_space(self) -> float:
        return self._subtotal(FREE_SPACE_TERMS)

    @property
    def surface(self) -> float:
        return self._subtotal(SURFACE_TERMS)


def loss_total(
    terms: Mapping[str, Tensor], weights: LossWeights, iteration: Optional[int] = None
) -> LossBreakdown:
    """
    Weighted sum of the supervision terms.

    Terms missing from ``terms`` count as zero; every present term must be
    finite.

    Raises:
        NonFiniteLossError: If any term is NaN or infinite
    """
    weight_map = weights.as_dict()
    for name in LOSS_TERMS:
        term = terms.get(name)
        if term is not None and not np.all(np.isfinite(term.data)):
            raise NonFiniteLossError(name, iteration)

    total: Optional[Tensor] = None
    for name in LOSS_TERMS:
        term = terms.get(name)
        if term is None:
            continue
        weighted = term * weight_map[name]
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.zeros(()))
    return LossBreakdown(dict(terms), weight_map, total)
