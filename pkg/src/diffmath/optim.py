"""Adam optimizer over a ParameterStore."""

import logging
from typing import Dict, Optional

import numpy as np

from src.diffmath.nn import AdamState, ParameterStore
from src.models.exceptions import GradientError

DEFAULT_LEARNING_RATE = 5e-4

logger = logging.getLogger(__name__)


def adam_step(
    store: ParameterStore,
    grads: Optional[Dict[str, np.ndarray]] = None,
    lr: float = DEFAULT_LEARNING_RATE,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """
    Apply one bias-corrected Adam update to every trainable parameter.

    Args:
        store: Parameters and their optimizer state
        grads: Gradient per parameter name; defaults to the store's accumulated grads
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor

    Raises:
        GradientError: If any gradient is non-finite; no parameter is modified
    """
    if grads is None:
        grads = store.gradients()

    names = [name for name in store.names() if store.is_trainable(name)]
    for name in names:
        grad = grads.get(name)
        if grad is not None and not np.all(np.isfinite(grad)):
            raise GradientError("Non-finite gradient, optimizer step aborted", parameter=name)

    for name in names:
        param = store[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        state = store.state.get(name)
        if state is None:
            state = AdamState(m=np.zeros_like(param.data), v=np.zeros_like(param.data))
            store.state[name] = state

        state.step += 1
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = (param.data - update).astype(store.dtype)

    logger.debug(f"Adam step applied to {len(names)} parameters (lr={lr})")
