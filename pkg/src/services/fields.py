"""Deformation, topology and canonical networks.

Observed points p_i of frame i map to the canonical hyper-space through
x = [H(p_i, phi_i), F_q(p_i, phi_i)]. H is a composition of axis-split blocks
with an exact algebraic inverse; F_q is a plain MLP. The canonical SDF and
color networks live in that hyper-space.

Derivatives that enter the losses (normals, the Jacobian applied to view
directions) are computed as forward tangents built from recorded operations,
so reverse mode through them yields the required second-order gradients.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

import numpy as np

from src.config.experiment import ModelConfig
from src.diffmath import tensor as T
from src.diffmath.nn import (
    EncodingSchedule,
    Mlp,
    MlpSpec,
    ParameterStore,
    positional_encode,
    positional_encode_jvp,
)
from src.diffmath.tensor import Tensor, no_grad

# (u, v) axes for the block acting along axis w
AXIS_SPLITS = {2: (0, 1), 1: (2, 0), 0: (1, 2)}
BLOCK_AXES = (2, 1, 0)

logger = logging.getLogger(__name__)


def _encode(
    x: Tensor, tx: Optional[Tensor], schedule: EncodingSchedule
) -> Tuple[Tensor, Optional[Tensor]]:
    if tx is None:
        return positional_encode(x, schedule), None
    return positional_encode_jvp(x, tx, schedule)


def _run(
    net: Mlp, x: Tensor, tx: Optional[Tensor], cond: Optional[Tensor] = None
) -> Tuple[Tensor, Optional[Tensor]]:
    if tx is None:
        return net(x, cond), None
    return net.jvp(x, tx, cond)


def _col(x: Tensor) -> Tensor:
    return T.unsqueeze(x, -1)


class BijectiveBlock:
    """One invertible stage acting on the axis split (u, v | w) of a point.

    Forward: w' = w + A(u, v, phi); (u', v') = R(theta) (u, v) + (du, dv) with
    (theta, du, dv) = B(w', phi) and theta = pi * tanh(.). Both sub-networks
    start with zero final layers, so a fresh block is the identity.
    """

    def __init__(
        self,
        axis: int,
        config: ModelConfig,
        store: ParameterStore,
        prefix: str,
        rng: np.random.Generator,
    ):
        self.axis = axis
        self.u_axis, self.v_axis = AXIS_SPLITS[axis]
        self.prefix = prefix
        self.schedule = EncodingSchedule(config.block_bands)
        code = config.deform_code_width
        hidden = (config.block_hidden_layers, config.block_hidden_width)
        self.net_a = Mlp(
            MlpSpec(self.schedule.encoded_width(2) + code, 1, *hidden, "tanh", final_scale=0.0),
            store,
            f"{prefix}.a",
            rng,
            cond_width=code,
        )
        self.net_b = Mlp(
            MlpSpec(self.schedule.encoded_width(1) + code, 3, *hidden, "tanh", final_scale=0.0),
            store,
            f"{prefix}.b",
            rng,
            cond_width=code,
        )

    def _split(self, p: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        return p[..., self.u_axis], p[..., self.v_axis], p[..., self.axis]

    def _join(self, u: Tensor, v: Tensor, w: Tensor) -> Tensor:
        columns: List[Optional[Tensor]] = [None, None, None]
        columns[self.u_axis], columns[self.v_axis], columns[self.axis] = u, v, w
        return T.stack(columns, axis=-1)

    def displacement(
        self, u: Tensor, v: Tensor, code: Tensor, tu: Optional[Tensor] = None, tv: Optional[Tensor] = None
    ) -> Tuple[Tensor, Optional[Tensor]]:
        uv = T.stack([u, v], axis=-1)
        tuv = None if tu is None or tv is None else T.stack([tu, tv], axis=-1)
        encoded, tencoded = _encode(uv, tuv, self.schedule)
        out, tout = _run(self.net_a, encoded, tencoded, code)
        return out[:, 0], (None if tout is None else tout[:, :, 0])

    def in_plane(
        self, w: Tensor, code: Tensor, tw: Optional[Tensor] = None
    ) -> Tuple[Tuple[Tensor, Tensor, Tensor], Optional[Tuple[Tensor, Tensor, Tensor]]]:
        """(theta, du, dv) predicted from w, with their tangents when ``tw`` is given."""
        encoded, tencoded = _encode(_col(w), None if tw is None else _col(tw), self.schedule)
        out, tout = _run(self.net_b, encoded, tencoded, code)
        squashed = T.tanh(out[:, 0])
        theta = squashed * math.pi
        values = (theta, out[:, 1], out[:, 2])
        if tout is None:
            return values, None
        t_theta = _col((1.0 - squashed * squashed) * math.pi) * tout[:, :, 0]
        return values, (t_theta, tout[:, :, 1], tout[:, :, 2])

    def forward(
        self, p: Tensor, code: Tensor, tangent: Optional[Tensor] = None
    ) -> Tuple[Tensor, Optional[Tensor]]:
        """
        Apply the block to points (N, 3), carrying tangents (N, K, 3) when given.

        Returns:
            (mapped points, mapped tangents or None)
        """
        u, v, w = self._split(p)
        tu = tv = tw = None
        if tangent is not None:
            tu, tv, tw = tangent[:, :, self.u_axis], tangent[:, :, self.v_axis], tangent[:, :, self.axis]

        dw, tdw = self.displacement(u, v, code, tu, tv)
        w_new = w + dw
        tw_new = None if tw is None or tdw is None else tw + tdw

        (theta, du, dv), tangents = self.in_plane(w_new, code, tw_new)
        c, s = T.cos(theta), T.sin(theta)
        u_new = c * u - s * v + du
        v_new = s * u + c * v + dv
        out = self._join(u_new, v_new, w_new)
        if tangent is None or tangents is None:
            return out, None

        t_theta, t_du, t_dv = tangents
        tu_new = _col(c) * tu - _col(s) * tv + _col(-s * u - c * v) * t_theta + t_du
        tv_new = _col(s) * tu + _col(c) * tv + _col(c * u - s * v) * t_theta + t_dv
        return out, self._join(tu_new, tv_new, tw_new)

    def inverse(self, p: Tensor, code: Tensor) -> Tensor:
        """Exact inverse of ``forward``: undo the rigid in-plane motion, then the displacement."""
        u_new, v_new, w_new = self._split(p)
        (theta, du, dv), _ = self.in_plane(w_new, code)
        c, s = T.cos(theta), T.sin(theta)
        a, b = u_new - du, v_new - dv
        u = c * a + s * b
        v = c * b - s * a
        dw, _ = self.displacement(u, v, code)
        return self._join(u, v, w_new - dw)

    def rotation_matrices(self, p: Tensor, code: Tensor) -> np.ndarray:
        """In-plane rotations (N, 2, 2) that ``forward`` applies to ``p``."""
        with no_grad():
            u, v, w = self._split(T.as_tensor(p))
            dw, _ = self.displacement(u, v, code)
            (theta, _, _), _ = self.in_plane(w + dw, code)
        c, s = np.cos(theta.data), np.sin(theta.data)
        return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


class BijectiveMap:
    """Composition of blocks cycling through the w, v and u axes."""

    def __init__(
        self, config: ModelConfig, store: ParameterStore, rng: np.random.Generator, prefix: str = "hmap"
    ):
        self.blocks = [
            BijectiveBlock(BLOCK_AXES[i % 3], config, store, f"{prefix}.block{i}", rng)
            for i in range(config.n_blocks)
        ]

    @property
    def schedules(self) -> List[EncodingSchedule]:
        return [block.schedule for block in self.blocks]

    def forward(
        self, p: Tensor, code: Tensor, tangent: Optional[Tensor] = None
    ) -> Tuple[Tensor, Optional[Tensor]]:
        for block in self.blocks:
            p, tangent = block.forward(p, code, tangent)
        return p, tangent

    def inverse(self, p: Tensor, code: Tensor) -> Tensor:
        for block in reversed(self.blocks):
            p = block.inverse(p, code)
        return p


class TopologyNetwork:
    """F_q: observed point and deformation code to m topology coordinates."""

    def __init__(self, config: ModelConfig, store: ParameterStore, rng: np.random.Generator):
        self.dims = config.topology_dims
        self.schedule = EncodingSchedule(config.topology_bands)
        self.net: Optional[Mlp] = None
        if self.dims > 0:
            code = config.deform_code_width
            self.net = Mlp(
                MlpSpec(
                    self.schedule.encoded_width(3) + code,
                    self.dims,
                    config.topology_hidden_layers,
                    config.topology_hidden_width,
                    "tanh",
                    final_scale=0.0,
                ),
                store,
                "topology",
                rng,
                cond_width=code,
            )

    def __call__(self, p: Tensor, code: Tensor) -> Tensor:
        if self.net is None:
            return Tensor(np.zeros((len(p), 0), dtype=p.dtype))
        return self.net(positional_encode(p, self.schedule), code)


class CanonicalField(Protocol):
    """Signed distance and geometry feature over the hyper-space."""

    feature_width: int

    def evaluate(
        self, x: Tensor, tangent: Optional[Tensor] = None
    ) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        """(d (N,), z (N, F), directional derivatives of d (N, K) or None)."""
        ...


class SdfNetwork:
    """F_d: softplus MLP on the encoded hyper-point returning (d, z)."""

    def __init__(self, config: ModelConfig, store: ParameterStore, rng: np.random.Generator):
        self.in_dims = 3 + config.topology_dims
        self.feature_width = config.feature_width
        self.schedule = EncodingSchedule(config.sdf_bands)
        self.net = Mlp(
            MlpSpec(
                self.schedule.encoded_width(self.in_dims),
                1 + config.feature_width,
                config.sdf_hidden_layers,
                config.sdf_hidden_width,
                "softplus",
                softplus_beta=config.softplus_beta,
            ),
            store,
            "sdf",
            rng,
        )
        self.store = store

    def evaluate(
        self, x: Tensor, tangent: Optional[Tensor] = None
    ) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        encoded, tencoded = _encode(x, tangent, self.schedule)
        out, tout = _run(self.net, encoded, tencoded)
        return out[:, 0], out[:, 1:], (None if tout is None else tout[:, :, 0])

    def geometric_init(self, radius: float, rng: np.random.Generator) -> None:
        """Weights under which d(x) approximates |p| - radius.

        Only the raw position channels of the first layer are non-zero; the
        last layer has mean sqrt(pi)/sqrt(width) and bias -radius.
        """
        names = self.net.weight_names
        for i, (w_name, b_name) in enumerate(zip(names, self.net.bias_names)):
            weight = self.store[w_name]
            fan_in, fan_out = weight.shape
            if i == len(names) - 1:
                values = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, size=(fan_in, fan_out))
                bias = np.full(fan_out, -radius)
            else:
                values = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(fan_out), size=(fan_in, fan_out))
                if i == 0:
                    values[3:] = 0.0
                bias = np.zeros(fan_out)
            weight.data = values.astype(self.store.dtype)
            self.store[b_name].data = bias.astype(self.store.dtype)


class AnalyticSphereField:
    """d = scale * (|p| - radius), ignoring topology coordinates."""

    def __init__(self, radius: float, scale: float = 1.0, feature_width: int = 0):
        self.radius = radius
        self.scale = scale
        self.feature_width = feature_width

    def evaluate(
        self, x: Tensor, tangent: Optional[Tensor] = None
    ) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        p = x[:, :3]
        length = T.norm(p, axis=-1, eps=1e-24)
        d = (length - self.radius) * self.scale
        feature = Tensor(np.zeros((len(x), self.feature_width), dtype=x.dtype))
        if tangent is None:
            return d, feature, None
        gradient = p / _col(length) * self.scale
        td = T.tsum(tangent[:, :, :3] * T.unsqueeze(gradient, 1), axis=-1)
        return d, feature, td


class ColorNetwork:
    """F_c: (PE(p), normal, canonical view direction, feature, psi) to rgb in [0, 1]."""

    def __init__(self, config: ModelConfig, store: ParameterStore, rng: np.random.Generator):
        self.schedule = EncodingSchedule(config.color_bands)
        code = config.appearance_code_width
        self.net = Mlp(
            MlpSpec(
                self.schedule.encoded_width(3) + 6 + config.feature_width + code,
                3,
                config.color_hidden_layers,
                config.color_hidden_width,
                "tanh",
            ),
            store,
            "color",
            rng,
            cond_width=code,
        )

    def __call__(
        self, p: Tensor, normal: Tensor, view: Tensor, feature: Tensor, code: Tensor
    ) -> Tensor:
        inputs = T.concat([positional_encode(p, self.schedule), normal, view, feature], axis=-1)
        return T.sigmoid(self.net(inputs, code))


@dataclass
class FieldQuery:
    """Everything the renderer and the losses need at a set of observed points."""

    hyper: Tensor
    sdf: Tensor
    feature: Tensor
    normal: Tensor
    view: Optional[Tensor] = None
    color: Optional[Tensor] = None


class DynamicField:
    """Per-frame codes plus the deformation and canonical networks."""

    def __init__(
        self,
        config: ModelConfig,
        n_frames: int,
        store: ParameterStore,
        rng: np.random.Generator,
        canonical: Optional[CanonicalField] = None,
    ):
        self.config = config
        self.n_frames = n_frames
        self.store = store
        store.create("codes.deform", np.zeros((n_frames, config.deform_code_width)))
        store.create("codes.appearance", np.zeros((n_frames, config.appearance_code_width)))
        self.hmap = BijectiveMap(config, store, rng)
        self.topology = TopologyNetwork(config, store, rng)
        self.sdf_network = SdfNetwork(config, store, rng)
        self.canonical: CanonicalField = canonical if canonical is not None else self.sdf_network
        self.color = ColorNetwork(config, store, rng)
        self.logger = logging.getLogger(__name__)

    @property
    def schedules(self) -> List[EncodingSchedule]:
        return self.hmap.schedules + [
            self.topology.schedule,
            self.sdf_network.schedule,
            self.color.schedule,
        ]

    def advance_encoding(self, iteration: int, total_iterations: int, ramp_fraction: float) -> float:
        alpha = 0.0
        for schedule in self.schedules:
            schedule.ramp_fraction = ramp_fraction
            alpha = schedule.advance(iteration, total_iterations)
        return alpha

    def set_encoding_alpha(self, fraction: float) -> None:
        """Open every window to ``fraction`` of its band count."""
        for schedule in self.schedules:
            schedule.alpha = fraction * schedule.n_bands

    def deform_code(self, frame: int) -> Tensor:
        return self.store["codes.deform"][frame]

    def appearance_code(self, frame: int) -> Tensor:
        return self.store["codes.appearance"][frame]

    def _points(self, p: object) -> Tensor:
        return T.as_tensor(np.asarray(p, dtype=self.store.dtype) if not isinstance(p, Tensor) else p)

    def hmap_forward(self, p: object, frame: int) -> Tensor:
        out, _ = self.hmap.forward(self._points(p), self.deform_code(frame))
        return out

    def hmap_inverse(self, p: object, frame: int) -> Tensor:
        return self.hmap.inverse(self._points(p), self.deform_code(frame))

    def correspondence(self, p: object, frame_i: int, frame_j: int) -> Tensor:
        """G_ij(p) = H_j^-1(H_i(p)); exactly the identity when i == j up to roundoff."""
        return self.hmap_inverse(self.hmap_forward(p, frame_i), frame_j)

    def deform_to_hyper(self, p: object, frame: int) -> Tensor:
        points = self._points(p)
        code = self.deform_code(frame)
        canonical, _ = self.hmap.forward(points, code)
        return T.concat([canonical, self.topology(points, code)], axis=-1)

    def jacobian_canonical(self, p: object, frame: int) -> np.ndarray:
        """dH/dp_i as (N, 3, 3) from three forward tangents."""
        points = self._points(p)
        seeds = np.broadcast_to(np.eye(3, dtype=points.dtype), (len(points), 3, 3)).copy()
        with no_grad():
            _, tangent = self.hmap.forward(points, self.deform_code(frame), Tensor(seeds))
        assert tangent is not None
        return np.swapaxes(tangent.data, 1, 2)

    def _normal_seeds(self, n: int) -> Tensor:
        width = self.sdf_network.in_dims
        seeds = np.zeros((n, 3, width), dtype=self.store.dtype)
        seeds[:, [0, 1, 2], [0, 1, 2]] = 1.0
        return Tensor(seeds)

    def sdf_eval(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        d, z, _ = self.canonical.evaluate(T.as_tensor(x))
        return d, z

    def sdf_with_normal(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """(d, z, grad_p d) with the topology coordinates held fixed."""
        d, z, td = self.canonical.evaluate(T.as_tensor(x), self._normal_seeds(len(x)))
        assert td is not None
        return d, z, td

    def normal_canonical(self, x: Tensor) -> Tensor:
        _, _, normal = self.sdf_with_normal(x)
        degenerate = int(np.count_nonzero(np.linalg.norm(normal.data, axis=-1) < 1e-12))
        if degenerate:
            self.logger.debug(f"{degenerate} degenerate normals (zero gradient)")
        return normal

    def canonical_view(self, p: object, view: Tensor, frame: int) -> Tuple[Tensor, Tensor]:
        """(canonical points, renormalized J_p v) for unit view directions (N, 3)."""
        points = self._points(p)
        canonical, tangent = self.hmap.forward(points, self.deform_code(frame), T.unsqueeze(view, 1))
        assert tangent is not None
        return canonical, T.normalize(tangent[:, 0, :])

    def color_eval(
        self,
        x: Tensor,
        p: object,
        view: Tensor,
        frame: int,
        normal: Optional[Tensor] = None,
        feature: Optional[Tensor] = None,
    ) -> Tensor:
        """
        Color at hyper-points x of observed points p seen along view.

        The normal and SDF feature are recomputed when not given.
        """
        if normal is None or feature is None:
            _, feature, normal = self.sdf_with_normal(x)
        _, view_canonical = self.canonical_view(p, view, frame)
        return self.color(x[:, :3], normal, view_canonical, feature, self.appearance_code(frame))

    def query(
        self, points: Tensor, frame: int, view: Optional[Tensor] = None, with_color: bool = True
    ) -> FieldQuery:
        """
        Evaluate the full field at observed points of one frame.

        Args:
            points: Observed points (N, 3)
            frame: Frame index selecting the codes
            view: Unit viewing directions (N, 3), required for color
            with_color: Whether to evaluate the color network

        Returns:
            Hyper-points, SDF, feature, canonical normal and optionally the
            canonical view direction and color
        """
        points = self._points(points)
        code = self.deform_code(frame)
        tangent = None if view is None else T.unsqueeze(T.as_tensor(view), 1)
        canonical, t_canonical = self.hmap.forward(points, code, tangent)
        hyper = T.concat([canonical, self.topology(points, code)], axis=-1)
        d, z, normal = self.sdf_with_normal(hyper)

        view_canonical = None if t_canonical is None else T.normalize(t_canonical[:, 0, :])
        color = None
        if with_color and view_canonical is not None:
            color = self.color(canonical, normal, view_canonical, z, self.appearance_code(frame))
        return FieldQuery(hyper, d, z, normal, view_canonical, color)

    def observed_sdf(self, points: np.ndarray, frame: int) -> np.ndarray:
        """Numpy SDF of the composed field at observed points, without recording."""
        with no_grad():
            d, _ = self.sdf_eval(self.deform_to_hyper(points, frame))
        return d.data
