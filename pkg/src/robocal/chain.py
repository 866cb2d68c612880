"""Augmented kinematic chain: evaluation and cached partial products.

The full chain multiplies, left to right:

    base, geo_0,
    then per joint i: joint_i(q_i), jcorr_i, compliance_i, geo_i, thermal_i, link_i,
    tcp_local

All evaluation is batched over samples; ``ChainCache`` additionally stores
prefix rotations and suffix translations so that the derivative of the TCP
position with respect to any single transform is one small matrix product.
"""

from __future__ import annotations

import warnings

import numpy as np

from .robot import N_JOINTS, RobotDescription
from .submodels import ParameterVector, compliance_quantities_batch, geo_param_vector
from .transforms import Transform, axis_rotation, euler_xyz

SLOT_BASE = 0
SLOT_GEO0 = 1
SLOT_TCP = 2 + 6 * N_JOINTS
K_SLOTS = SLOT_TCP + 1


def slot_joint(i: int) -> int:
    return 2 + 6 * i


def slot_jcorr(i: int) -> int:
    return 3 + 6 * i


def slot_compliance(i: int) -> int:
    return 4 + 6 * i


def slot_geo(i: int) -> int:
    """Geometric transform following joint i (0-based)."""
    return 5 + 6 * i


def slot_thermal(i: int) -> int:
    return 6 + 6 * i


def slot_link(i: int) -> int:
    return 7 + 6 * i


class OutOfSupportWarning(UserWarning):
    """A joint angle fell outside the identified correction range and was clamped."""


def _matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", m, v)


class ChainCache:
    """All transforms of the augmented chain for a sample batch, plus
    prefix/suffix products.

    Attributes (K = number of slots, n = batch size):
      rot, tra      (K, n, 3, 3) and (K, n, 3): per-slot transforms
      pre_rot/pre_tra (K+1, ...): products of slots [0, k)
      suf_tra       (K+1, n, 3): translation of the product of slots [k, K)
      aux           per-sample submodel quantities used by the Jacobian
    """

    def __init__(self, desc: RobotDescription, theta: ParameterVector,
                 q: np.ndarray, kappa: np.ndarray):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (q.shape[0],))
        n = q.shape[0]
        self.desc = desc
        self.theta = theta
        self.q = q
        self.kappa = kappa
        self.n = n

        rot = np.zeros((K_SLOTS, n, 3, 3))
        tra = np.zeros((K_SLOTS, n, 3))
        eye = np.eye(3)

        rot[SLOT_BASE] = desc.base.rotation
        tra[SLOT_BASE] = desc.base.translation
        rot[SLOT_TCP] = desc.tcp_local.rotation
        tra[SLOT_TCP] = desc.tcp_local.translation

        geo_p = [geo_param_vector(theta, j) for j in range(N_JOINTS + 1)]
        self.geo_p = geo_p
        rot[SLOT_GEO0] = euler_xyz(geo_p[0][:3])
        tra[SLOT_GEO0] = geo_p[0][3:]

        quant = compliance_quantities_batch(desc, q, theta.masses, theta.r_ratio)
        self.tau_star = quant["tau_star"]
        self.dtau_star_dm = quant["dtau_star_dm"]
        self.deflections = theta.compliances * self.tau_star

        dkappa = kappa - theta.kappa0
        self.dkappa = dkappa

        if theta.curves is not None:
            seg = np.empty((n, N_JOINTS), dtype=int)
            frac = np.empty((n, N_JOINTS))
            in_range = np.empty((n, N_JOINTS), dtype=bool)
            jvals = np.empty((n, N_JOINTS))
            for i, curve in enumerate(theta.curves):
                seg[:, i], frac[:, i], in_range[:, i] = curve.locate(q[:, i])
                jvals[:, i] = (
                    curve.values[seg[:, i]] * (1.0 - frac[:, i])
                    + curve.values[seg[:, i] + 1] * frac[:, i]
                )
            self.jcorr_seg = seg
            self.jcorr_frac = frac
            self.jcorr_values = jvals
            self.clamped = ~in_range.all(axis=1)
        else:
            self.jcorr_seg = None
            self.jcorr_frac = None
            self.jcorr_values = np.zeros((n, N_JOINTS))
            self.clamped = np.zeros(n, dtype=bool)

        for i in range(N_JOINTS):
            axis = desc.joint_axes[i]
            rot[slot_joint(i)] = axis_rotation(axis, q[:, i])
            rot[slot_jcorr(i)] = axis_rotation(axis, self.jcorr_values[:, i])
            rot[slot_compliance(i)] = axis_rotation(axis, self.deflections[:, i])
            rot[slot_geo(i)] = euler_xyz(geo_p[i + 1][:3])
            tra[slot_geo(i)] = geo_p[i + 1][3:]
            rot[slot_thermal(i)] = eye
            tra[slot_thermal(i)] = theta.alphas[i] * dkappa[:, None] * desc.links[i]
            rot[slot_link(i)] = eye
            tra[slot_link(i)] = desc.links[i]

        self.rot = rot
        self.tra = tra

        pre_rot = np.empty((K_SLOTS + 1, n, 3, 3))
        pre_tra = np.empty((K_SLOTS + 1, n, 3))
        pre_rot[0] = eye
        pre_tra[0] = 0.0
        for k in range(K_SLOTS):
            pre_rot[k + 1] = pre_rot[k] @ rot[k]
            pre_tra[k + 1] = _matvec(pre_rot[k], tra[k]) + pre_tra[k]
        suf_tra = np.empty((K_SLOTS + 1, n, 3))
        suf_tra[K_SLOTS] = 0.0
        for k in range(K_SLOTS - 1, -1, -1):
            suf_tra[k] = tra[k] + _matvec(rot[k], suf_tra[k + 1])
        self.pre_rot = pre_rot
        self.pre_tra = pre_tra
        self.suf_tra = suf_tra

    @property
    def positions(self) -> np.ndarray:
        return self.pre_tra[K_SLOTS]

    @property
    def rotations(self) -> np.ndarray:
        return self.pre_rot[K_SLOTS]

    def position_column(self, k: int, d_rot=None, d_tra=None) -> np.ndarray:
        """d position / d p for a parameter p entering only slot k.

        `d_rot` (3,3 or n,3,3) and `d_tra` (3, or n,3) are the derivatives of
        that slot's rotation and translation with respect to p.
        """
        v = np.zeros((self.n, 3))
        if d_rot is not None:
            d_rot = np.asarray(d_rot, dtype=float)
            if d_rot.ndim == 2:
                v = np.einsum("ij,nj->ni", d_rot, self.suf_tra[k + 1])
            else:
                v = _matvec(d_rot, self.suf_tra[k + 1])
        if d_tra is not None:
            v = v + d_tra
        return _matvec(self.pre_rot[k], v)


def predict_positions(desc: RobotDescription, theta: ParameterVector,
                      q: np.ndarray, kappa) -> tuple[np.ndarray, np.ndarray]:
    """Batched TCP positions (n, 3) of the augmented model, plus a per-sample
    flag marking joint angles clamped to the correction support range."""
    cache = ChainCache(desc, theta, q, kappa)
    return cache.positions, cache.clamped


def fk_augmented(desc: RobotDescription, q, env_kappa: float,
                 theta: ParameterVector) -> Transform:
    """Tool pose of the augmented model at joint state q and temperature kappa.

    Angles outside the joint-correction support range are evaluated with the
    clamped correction value and reported through an OutOfSupportWarning.
    """
    cache = ChainCache(desc, theta, np.atleast_2d(q), float(env_kappa))
    if cache.clamped.any():
        warnings.warn(
            "joint angle outside the identified correction range; correction clamped",
            OutOfSupportWarning,
            stacklevel=2,
        )
    return Transform(cache.rotations[0], cache.positions[0])
