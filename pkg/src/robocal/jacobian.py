"""Analytic Jacobian of the predicted TCP position with respect to the
calibration parameters, assembled by gradient propagation through the chain.

Every parameter except the link masses touches exactly one transform, so its
column is prefix * (d transform) * suffix via the cached partial products.
Mass columns accumulate the same expression over every compliance transform
at or below that mass's joint. Cost is O(n_slots + n_params) per sample.
"""

from __future__ import annotations

import numpy as np

from .chain import (
    ChainCache,
    SLOT_GEO0,
    slot_compliance,
    slot_geo,
    slot_jcorr,
    slot_thermal,
)
from .robot import N_JOINTS, RobotDescription, nominal_frames_batch
from .submodels import (
    FULL_VARIANT,
    ModelVariant,
    ParameterLayout,
    ParameterVector,
    geo_free_translation_components,
)
from .transforms import d_euler_xyz, skew


def linearize_batch(desc: RobotDescription, theta: ParameterVector, variant: ModelVariant,
                    q: np.ndarray, kappa) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted positions (n,3), position Jacobian (n,3,n_free) and clamp flags."""
    cache = ChainCache(desc, theta, q, kappa)
    layout = ParameterLayout.for_theta(variant, theta)
    n = cache.n
    jac = np.zeros((n, 3, layout.n_free))

    # geometry: base block (all six), then five per joint
    col = layout.geo.start
    for j in range(N_JOINTS + 1):
        slot = SLOT_GEO0 if j == 0 else slot_geo(j - 1)
        p = cache.geo_p[j]
        for c in range(3):
            jac[:, :, col] = cache.position_column(slot, d_rot=d_euler_xyz(p[:3], c))
            col += 1
        if j == 0:
            trans_components = (0, 1, 2)
        else:
            trans_components = geo_free_translation_components(theta.axial_slots[j - 1])
        for c in trans_components:
            # pure translation: the column is just the prefix rotation's column c
            jac[:, :, col] = cache.pre_rot[slot][:, :, c]
            col += 1

    # compliance: one propagated generator column per spring, reused for all
    # mass and stiffness parameters
    if variant.compliance or variant.joint_corr:
        spring_cols = np.zeros((N_JOINTS, n, 3))
        if variant.compliance:
            for i in range(1, N_JOINTS):
                k = slot_compliance(i)
                d_rot = skew(desc.joint_axes[i]) @ cache.rot[k]
                spring_cols[i] = cache.position_column(k, d_rot=d_rot)

    if variant.compliance:
        for jm, col in zip(range(1, 5), range(layout.masses.start, layout.masses.stop)):
            acc = np.zeros((n, 3))
            for i in range(1, jm + 1):
                w = theta.compliances[i] * cache.dtau_star_dm[:, i, jm]
                acc += w[:, None] * spring_cols[i]
            jac[:, :, col] = acc
        for i, col in zip(range(1, N_JOINTS), range(layout.stiffness.start, layout.stiffness.stop)):
            jac[:, :, col] = cache.tau_star[:, i, None] * spring_cols[i]

    if variant.thermal:
        for i in range(N_JOINTS):
            d_tra = cache.dkappa[:, None] * desc.links[i]
            jac[:, :, layout.thermal.start + i] = cache.position_column(
                slot_thermal(i), d_tra=d_tra
            )

    if variant.joint_corr:
        if theta.curves is None:
            raise ValueError("variant includes joint correction but theta has no curves")
        rows = np.arange(n)
        for i in range(N_JOINTS):
            k = slot_jcorr(i)
            d_rot = skew(desc.joint_axes[i]) @ cache.rot[k]
            base_col = cache.position_column(k, d_rot=d_rot)
            seg = cache.jcorr_seg[:, i]
            frac = cache.jcorr_frac[:, i]
            block = jac[:, :, layout.joint_slices[i]]
            # exactly two nonzero interpolation weights per sample; adjacent
            # support indices never collide within one sample
            block[rows, :, seg] = (1.0 - frac)[:, None] * base_col
            block[rows, :, seg + 1] = frac[:, None] * base_col

    return cache.positions, jac, cache.clamped


def position_jacobian(desc: RobotDescription, q, kappa: float, theta: ParameterVector,
                      variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """Jacobian (3, n_free) of the predicted position for a single sample."""
    _, jac, _ = linearize_batch(desc, theta, variant, np.atleast_2d(q), float(kappa))
    return jac[0]


def nominal_sensitivities_batch(desc: RobotDescription, q: np.ndarray) -> np.ndarray:
    """d TCP / d q_i of the nominal chain for all joints, shape (n, 6, 3).

    For a revolute joint this is axis x (tcp - origin), both taken from the
    nominal chain in the global frame.
    """
    frames = nominal_frames_batch(desc, q)
    lever = frames["tcp"][:, None, :] - frames["origins"]
    return np.cross(frames["axes"], lever)


def nominal_joint_sensitivity(desc: RobotDescription, q, joint_index: int) -> np.ndarray:
    """d TCP position / d q_i of the nominal chain, one joint, shape (3,)."""
    return nominal_sensitivities_batch(desc, np.atleast_2d(q))[0, joint_index]
