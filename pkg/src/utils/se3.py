"""Rigid-motion helpers for learnable pose deltas and pose comparisons."""

from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.diffmath import tensor as T
from src.diffmath.tensor import Tensor

# Generators of so(3): skew(w) = w0 * G0 + w1 * G1 + w2 * G2
_GENERATORS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)

_SMALL_ANGLE_SQ = 1e-8


def skew(omega: Tensor) -> Tensor:
    return omega[0] * _GENERATORS[0] + omega[1] * _GENERATORS[1] + omega[2] * _GENERATORS[2]


def axis_angle_to_matrix(omega: Tensor) -> Tensor:
    """Rodrigues' formula; series coefficients near zero keep the gradient finite."""
    omega = T.as_tensor(omega)
    theta_sq = T.dot(omega, omega)
    if float(theta_sq.data) < _SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0
        b = 0.5 - theta_sq / 24.0
    else:
        theta = T.sqrt(theta_sq)
        a = T.sin(theta) / theta
        b = (1.0 - T.cos(theta)) / theta_sq
    k = skew(omega)
    return np.eye(3, dtype=omega.dtype) + k * a + (k @ k) * b


def compose_delta(delta: Tensor, base_pose: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Left-compose a 6-vector delta (axis-angle, translation) with a base pose.

    Args:
        delta: Learnable (6,) tensor
        base_pose: Fixed 4x4 world-from-camera transform

    Returns:
        (rotation (3, 3), translation (3,)) of Exp(delta) * base_pose
    """
    delta = T.as_tensor(delta)
    r_delta = axis_angle_to_matrix(delta[:3])
    rotation = r_delta @ base_pose[:3, :3]
    translation = (base_pose[None, :3, 3] @ r_delta.T).reshape(3) + delta[3:]
    return rotation, translation


def delta_to_matrix(delta: np.ndarray, base_pose: np.ndarray) -> np.ndarray:
    """Numpy form of ``compose_delta`` returning a 4x4 matrix."""
    rotation = Rotation.from_rotvec(np.asarray(delta[:3], dtype=np.float64)).as_matrix()
    pose = np.eye(4)
    pose[:3, :3] = rotation @ base_pose[:3, :3]
    pose[:3, 3] = rotation @ base_pose[:3, 3] + np.asarray(delta[3:], dtype=np.float64)
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    inverse = np.eye(4)
    inverse[:3, :3] = pose[:3, :3].T
    inverse[:3, 3] = -pose[:3, :3].T @ pose[:3, 3]
    return inverse


def rotation_error_deg(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Geodesic angle between two rotation (or pose) matrices in degrees."""
    relative = estimate[:3, :3] @ reference[:3, :3].T
    return float(np.degrees(Rotation.from_matrix(relative).magnitude()))


def look_at(position: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """World-from-camera pose with +z looking at ``target`` and +y pointing down."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2] = right, down, forward
    pose[:3, 3] = position
    return pose
