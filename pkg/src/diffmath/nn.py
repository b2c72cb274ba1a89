"""Parameter storage, multilayer perceptrons and windowed positional encoding."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.diffmath import tensor as T
from src.diffmath.tensor import Tensor
from src.models.exceptions import ConfigurationError

ACTIVATIONS = ("softplus", "tanh", "relu")


@dataclass
class AdamState:
    """First/second moment accumulators of one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Owns every learnable array under a unique dotted name."""

    def __init__(self, dtype: np.dtype = np.float64):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}
        self.state: Dict[str, AdamState] = {}
        self._frozen: set = set()
        self.logger = logging.getLogger(__name__)

    def create(self, name: str, value: np.ndarray) -> Tensor:
        """Register a new parameter; names are never reused."""
        if name in self._params:
            raise ConfigurationError(f"Parameter '{name}' already exists")
        param = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"Unknown parameter '{name}'")

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def slice(self, prefix: str) -> Dict[str, Tensor]:
        """All parameters whose name starts with ``prefix``."""
        return {name: p for name, p in self._params.items() if name.startswith(prefix)}

    def subset(self, prefix: str) -> "ParameterStore":
        """A store sharing the tensors under ``prefix`` but with fresh optimizer state."""
        view = ParameterStore(self.dtype)
        view._params = self.slice(prefix)
        return view

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name in self.slice(prefix):
            if trainable:
                self._frozen.discard(name)
            else:
                self._frozen.add(name)

    def is_trainable(self, name: str) -> bool:
        return name not in self._frozen

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; parameters the loss never reached get zeros."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self._params.items()
        }

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            param = self[name]
            if param.shape != value.shape:
                raise ConfigurationError(
                    f"Shape mismatch for '{name}': stored {value.shape}, expected {param.shape}"
                )
            param.data = np.array(value, dtype=self.dtype)

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


@dataclass(frozen=True)
class MlpSpec:
    """Shape and activation of one fully connected network."""

    in_width: int
    out_width: int
    hidden_layers: int
    hidden_width: int
    activation: str = "tanh"
    final_scale: float = 1.0
    softplus_beta: float = 100.0

    def __post_init__(self) -> None:
        if self.in_width < 1 or self.out_width < 1 or self.hidden_width < 1:
            raise ConfigurationError(f"MLP widths must be >= 1: {self}")
        if self.hidden_layers < 0:
            raise ConfigurationError(f"MLP hidden layer count must be >= 0: {self}")
        if self.final_scale < 0:
            raise ConfigurationError(f"MLP final-layer scale must be >= 0: {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"Unknown activation '{self.activation}'. Valid activations: {ACTIVATIONS}"
            )

    @property
    def widths(self) -> List[int]:
        return [self.in_width] + [self.hidden_width] * self.hidden_layers + [self.out_width]


class Mlp:
    """Fully connected network whose weights live in a ParameterStore.

    An optional conditioning vector (a per-frame code) is appended to the input
    of the first layer. It is added as a separate affine term so a single code
    broadcasts over every point of a batch.
    """

    def __init__(
        self,
        spec: MlpSpec,
        store: ParameterStore,
        prefix: str,
        rng: np.random.Generator,
        cond_width: int = 0,
    ):
        if cond_width < 0 or cond_width >= spec.in_width:
            raise ConfigurationError(
                f"Conditioning width {cond_width} incompatible with input width {spec.in_width}"
            )
        self.spec = spec
        self.store = store
        self.prefix = prefix
        self.cond_width = cond_width
        self.weight_names: List[str] = []
        self.bias_names: List[str] = []

        widths = spec.widths
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            if spec.activation != "tanh":
                scale = math.sqrt(2.0 / fan_in)
            weight = rng.normal(0.0, scale, size=(fan_in, fan_out))
            if i == n_layers - 1:
                weight = weight * spec.final_scale
            w_name, b_name = f"{prefix}.l{i}.weight", f"{prefix}.l{i}.bias"
            store.create(w_name, weight)
            store.create(b_name, np.zeros(fan_out))
            self.weight_names.append(w_name)
            self.bias_names.append(b_name)

    @property
    def input_width(self) -> int:
        """Width of the point features, excluding the conditioning code."""
        return self.spec.in_width - self.cond_width

    def _check(self, x: Tensor, cond: Optional[Tensor]) -> None:
        if x.shape[-1] != self.input_width:
            raise ConfigurationError(
                f"{self.prefix}: input width {x.shape[-1]} does not match {self.input_width}"
            )
        cond_width = 0 if cond is None else cond.shape[-1]
        if cond_width != self.cond_width:
            raise ConfigurationError(
                f"{self.prefix}: code width {cond_width} does not match {self.cond_width}"
            )

    def _activate(self, z: Tensor, derivative: bool) -> Tuple[Tensor, Optional[Tensor]]:
        """Activation value and, on request, its elementwise derivative."""
        kind = self.spec.activation
        if kind == "softplus":
            beta = self.spec.softplus_beta
            return T.softplus(z, beta), (T.sigmoid(z * beta) if derivative else None)
        if kind == "tanh":
            a = T.tanh(z)
            return a, (1.0 - a * a if derivative else None)
        return T.relu(z), (Tensor((z.data > 0).astype(z.dtype)) if derivative else None)

    def _first_layer(self, x: Tensor, cond: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
        weight = self.store[self.weight_names[0]]
        bias = self.store[self.bias_names[0]]
        if cond is None:
            return x @ weight + bias, None
        w_x = weight[: self.input_width]
        w_c = weight[self.input_width :]
        return x @ w_x + (cond @ w_c + bias), w_x

    def forward(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        y, _ = self._run(T.as_tensor(x), None, cond)
        return y

    __call__ = forward

    def jvp(self, x: Tensor, tx: Tensor, cond: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """Output and its directional derivatives.

        ``tx`` has shape ``(N, K, in)``: K tangent directions per point. The
        code is treated as constant along every tangent.
        """
        y, ty = self._run(T.as_tensor(x), T.as_tensor(tx), cond)
        assert ty is not None
        return y, ty

    def _run(
        self, x: Tensor, tx: Optional[Tensor], cond: Optional[Tensor]
    ) -> Tuple[Tensor, Optional[Tensor]]:
        self._check(x, cond)
        z, w_x = self._first_layer(x, cond)
        tz = None
        if tx is not None:
            tz = tx @ (w_x if w_x is not None else self.store[self.weight_names[0]])

        for i in range(1, len(self.weight_names)):
            a, da = self._activate(z, tz is not None)
            if tz is not None and da is not None:
                tz = T.unsqueeze(da, -2) * tz
            weight = self.store[self.weight_names[i]]
            z = a @ weight + self.store[self.bias_names[i]]
            if tz is not None:
                tz = tz @ weight
        return z, tz


@dataclass
class EncodingSchedule:
    """Frequency count and coarse-to-fine window of one positional encoding."""

    n_bands: int
    alpha: Optional[float] = None
    ramp_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.n_bands < 0:
            raise ConfigurationError(f"Band count must be >= 0, got {self.n_bands}")
        if self.alpha is None:
            self.alpha = float(self.n_bands)

    def advance(self, iteration: int, total_iterations: int) -> float:
        """Linear growth of alpha from 0 to L over the ramp part of training."""
        ramp = self.ramp_fraction * max(total_iterations, 1)
        progress = 1.0 if ramp <= 0 else min(1.0, iteration / ramp)
        self.alpha = progress * self.n_bands
        return self.alpha

    def weights(self) -> np.ndarray:
        return window_weights(float(self.alpha or 0.0), self.n_bands)

    def encoded_width(self, in_width: int) -> int:
        return in_width * (1 + 2 * self.n_bands)


def window_weights(alpha: float, n_bands: int) -> np.ndarray:
    """w_k(alpha) = (1 - cos(pi * clamp(alpha - k, 0, 1))) / 2 per band k."""
    k = np.arange(n_bands, dtype=np.float64)
    return (1.0 - np.cos(np.pi * np.clip(alpha - k, 0.0, 1.0))) / 2.0


def positional_encode(x: Tensor, schedule: EncodingSchedule) -> Tensor:
    """[x, w_k sin(2^k pi x), w_k cos(2^k pi x) for each band k]."""
    encoded, _ = _encode(T.as_tensor(x), None, schedule)
    return encoded


def positional_encode_jvp(
    x: Tensor, tx: Tensor, schedule: EncodingSchedule
) -> Tuple[Tensor, Tensor]:
    """Encoding and its tangent for tangents of shape ``(N, K, D)``."""
    encoded, tangent = _encode(T.as_tensor(x), T.as_tensor(tx), schedule)
    assert tangent is not None
    return encoded, tangent


def _encode(
    x: Tensor, tx: Optional[Tensor], schedule: EncodingSchedule
) -> Tuple[Tensor, Optional[Tensor]]:
    parts = [x]
    tangent_parts = [tx] if tx is not None else []
    for k, w in enumerate(schedule.weights()):
        freq = (2.0**k) * np.pi
        phase = x * freq
        s, c = T.sin(phase), T.cos(phase)
        parts.extend([s * w, c * w])
        if tx is not None:
            scale = freq * w
            tangent_parts.append(T.unsqueeze(c * scale, -2) * tx)
            tangent_parts.append(T.unsqueeze(s * (-scale), -2) * tx)
    encoded = T.concat(parts, axis=-1) if len(parts) > 1 else x
    if tx is None:
        return encoded, None
    tangent = T.concat(tangent_parts, axis=-1) if len(tangent_parts) > 1 else tx
    return encoded, tangent

