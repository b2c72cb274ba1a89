"""Finite-difference verification of reverse-mode gradients."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from src.diffmath.nn import ParameterStore
from src.diffmath.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference derivatives."""

    max_rel_error: float
    tolerance: float
    n_probes: int
    flagged_discontinuous: int = 0
    errors: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck status={status} max_rel_error={self.max_rel_error:.3e} "
            f"tolerance={self.tolerance:.1e} probes={self.n_probes} "
            f"flagged_discontinuous={self.flagged_discontinuous}"
        )


def _relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _is_discontinuous(f_plus: float, f_minus: float, f_half_plus: float, f_half_minus: float) -> bool:
    """A derivative estimate that does not settle when the step halves."""
    wide = (f_plus - f_minus) / 2.0
    narrow = f_half_plus - f_half_minus
    return abs(wide - narrow) > 1e-2 * max(abs(wide), abs(narrow), 1e-6)


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: np.ndarray,
    tol: float = 1e-3,
    step: float = 1e-4,
    probes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """
    Compare the reverse-mode gradient of a scalar function to central differences.

    Args:
        fn: Maps a tensor shaped like ``point`` to a scalar tensor
        point: Evaluation point
        tol: Relative error below which the check passes
        step: Finite-difference step
        probes: Number of random unit directions; None checks every component
        rng: Generator for probe directions

    Returns:
        Report with the maximum relative error. Probes whose difference quotient
        does not converge when the step halves are flagged, not scored.
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    fn(x).backward()
    gradient = x.grad if x.grad is not None else np.zeros_like(point)

    def evaluate(at: np.ndarray) -> float:
        with no_grad():
            return fn(Tensor(at)).item()

    if probes is None:
        directions = [np.eye(point.size)[i].reshape(point.shape) for i in range(point.size)]
    else:
        rng = rng or np.random.default_rng(0)
        directions = []
        for _ in range(probes):
            d = rng.normal(size=point.shape)
            directions.append(d / np.linalg.norm(d))

    errors: List[float] = []
    flagged = 0
    for direction in directions:
        f_plus = evaluate(point + step * direction)
        f_minus = evaluate(point - step * direction)
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = float(np.sum(gradient * direction))
        error = _relative_error(analytic, numeric)
        if error >= tol:
            f_half_plus = evaluate(point + 0.5 * step * direction)
            f_half_minus = evaluate(point - 0.5 * step * direction)
            if _is_discontinuous(f_plus, f_minus, f_half_plus, f_half_minus):
                flagged += 1
                continue
        errors.append(error)

    report = GradCheckReport(
        max_rel_error=max(errors) if errors else 0.0,
        tolerance=tol,
        n_probes=len(directions),
        flagged_discontinuous=flagged,
        errors=errors,
    )
    logger.debug(report.to_text())
    return report


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    names: List[str],
    tol: float = 1e-3,
    step: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """
    Directional check of d(loss)/d(parameter group) for each named parameter.

    A single random unit direction over the whole parameter array is probed.
    The store is restored afterwards.

    Returns:
        Relative error per parameter name
    """
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    loss_fn().backward()
    grads = store.gradients()

    results: Dict[str, float] = {}
    for name in names:
        param = store[name]
        original = param.data.copy()
        direction = rng.normal(size=original.shape)
        direction /= np.linalg.norm(direction)
        try:
            with no_grad():
                param.data = original + step * direction
                f_plus = loss_fn().item()
                param.data = original - step * direction
                f_minus = loss_fn().item()
        finally:
            param.data = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = float(np.sum(grads[name] * direction))
        results[name] = _relative_error(analytic, numeric)
        logger.debug(f"gradcheck {name}: analytic={analytic:.6e} numeric={numeric:.6e}")
    store.zero_grad()
    return results
