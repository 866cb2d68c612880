"""Rigid-body transform primitives and the six-parameter virtual-joint transform.

Conventions, used package-wide:

* translations in millimetres, angles in radians
* rotations stored as 3x3 matrices
* virtual-joint rotation order is intrinsic X-then-Y-then-Z,
  ``R = Rx(zeta) @ Ry(xi) @ Rz(chi)``

The private ``*_batch``-style helpers accept arrays with arbitrary leading
dimensions and are shared by the forward-kinematics and Jacobian code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-9

# Rotation generators d/da R_axis(a) |_{a=0}.
GEN_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
GEN_Y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
GEN_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
GENERATORS = (GEN_X, GEN_Y, GEN_Z)


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if not np.all(np.isfinite(rot)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    det = np.linalg.det(rot)
    if err > ROTATION_TOL or abs(det - 1.0) > ROTATION_TOL:
        raise ValueError(
            f"rotation is not orthonormal with det +1 (|R'R-I|={err:.2e}, det={det:.12f})"
        )


@dataclass(frozen=True)
class Transform:
    """Rigid transform, p_out = rotation @ p_in + translation [mm]."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        tra = np.asarray(self.translation, dtype=float).reshape(3)
        _check_rotation(rot)
        if not np.all(np.isfinite(tra)):
            raise ValueError("translation contains non-finite entries")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation


@dataclass(frozen=True)
class VirtualJointParams:
    """Six-parameter pose: Euler angles (zeta, xi, chi) [rad] and translation (x, y, z) [mm]."""

    zeta: float = 0.0
    xi: float = 0.0
    chi: float = 0.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.zeta, self.xi, self.chi, self.x, self.y, self.z])

    @staticmethod
    def from_array(p) -> "VirtualJointParams":
        p = np.asarray(p, dtype=float).reshape(6)
        return VirtualJointParams(*p)


def compose(a: Transform, b: Transform) -> Transform:
    """Transform of applying b first, then a (matrix product a @ b)."""
    return Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: Transform) -> Transform:
    return Transform(t.rotation.T, -t.rotation.T @ t.translation)


def rot_x(angle):
    """Rotation about the x axis; broadcasts over leading dims of `angle`."""
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = c
    out[..., 1, 2] = -s
    out[..., 2, 1] = s
    out[..., 2, 2] = c
    return out


def rot_y(angle):
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 1, 1] = 1.0
    out[..., 0, 0] = c
    out[..., 0, 2] = s
    out[..., 2, 0] = -s
    out[..., 2, 2] = c
    return out


def rot_z(angle):
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 2, 2] = 1.0
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def euler_xyz(angles) -> np.ndarray:
    """Rx(a0) @ Ry(a1) @ Rz(a2) for angles of shape (..., 3)."""
    a = np.asarray(angles, dtype=float)
    return rot_x(a[..., 0]) @ rot_y(a[..., 1]) @ rot_z(a[..., 2])


def d_euler_xyz(angles, k: int) -> np.ndarray:
    """Derivative of euler_xyz with respect to angle component k (0..2)."""
    a = np.asarray(angles, dtype=float)
    rx, ry, rz = rot_x(a[..., 0]), rot_y(a[..., 1]), rot_z(a[..., 2])
    if k == 0:
        return GEN_X @ rx @ ry @ rz
    if k == 1:
        return rx @ (GEN_Y @ ry) @ rz
    if k == 2:
        return rx @ ry @ (GEN_Z @ rz)
    raise ValueError(f"angle component index out of range: {k}")


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x for v of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_rotation(axis, angle) -> np.ndarray:
    """Rodrigues rotation about a unit axis; broadcasts over `angle`."""
    a = np.asarray(angle, dtype=float)
    k = skew(axis)
    k2 = k @ k
    c = np.cos(a)[..., None, None]
    s = np.sin(a)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * k2


def d_axis_rotation(axis, angle) -> np.ndarray:
    """Derivative of axis_rotation with respect to the angle: [axis]x @ R."""
    return skew(axis) @ axis_rotation(axis, angle)


def rot_about_axis(axis, angle: float) -> Transform:
    """Rotation about a unit axis through the origin, zero translation."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(axis)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"axis must be unit length, got norm {norm:.12f}")
    return Transform(axis_rotation(axis, float(angle)), np.zeros(3))


def from_params(p) -> Transform:
    """Transform for a six-parameter pose (VirtualJointParams or length-6 array)."""
    if isinstance(p, VirtualJointParams):
        p = p.as_array()
    p = np.asarray(p, dtype=float).reshape(6)
    return Transform(euler_xyz(p[:3]), p[3:])


def d_from_params(p, component_index: int) -> np.ndarray:
    """Analytic 4x4 derivative of from_params(p).matrix() w.r.t. one component.

    Components 0..2 are the Euler angles, 3..5 the translation entries.
    """
    if isinstance(p, VirtualJointParams):
        p = p.as_array()
    p = np.asarray(p, dtype=float).reshape(6)
    out = np.zeros((4, 4))
    if component_index in (0, 1, 2):
        out[:3, :3] = d_euler_xyz(p[:3], component_index)
    elif component_index in (3, 4, 5):
        out[component_index - 3, 3] = 1.0
    else:
        raise ValueError(f"component_index out of range: {component_index}")
    return out
