"""Parameter layout and evaluation of the four per-joint error submodels.

The calibration parameter vector stacks, in order:

  geometry          base pose (6) plus five values per joint (the translation
                    along the joint axis is structurally zero)
  compliance        free link masses m2..m5 [kg] and joint compliances
                    k2..k6 [rad/(N*mm)]; m6 is stored but frozen, m1/k1 do
                    not exist (a joint whose axis stays parallel to gravity
                    sees no axial load)
  thermal           per-link expansion coefficients alpha_1..alpha_6 [1/K]
  joint correction  piecewise-linear commanded-to-effective angle offset per
                    joint, parameterized by its support-point values [rad]

Torques are always computed on the *nominal* chain, so the compliance load
model is independent of the calibration state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .robot import N_JOINTS, RobotDescription, nominal_frames_batch
from .transforms import VirtualJointParams

KAPPA0_DEFAULT_C = 25.0
M6_FIXED_KG = 1.0
R_RATIO_DEFAULT = 0.5
D_SUPP_DEFAULT = 80.0  # support points per rad

_GRID_TOL = 1e-6


# ---------------------------------------------------------------------------
# joint-correction curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointCorrectionCurve:
    """Piecewise-linear angle correction on an even support grid.

    Support points sit at integer multiples of 1/d_supp (the same grid the
    support-density filter uses), spanning [q_min, q_max].
    """

    q_min: float
    q_max: float
    d_supp: float
    values: np.ndarray  # (n_supp,) rad

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        if self.d_supp <= 0:
            raise ValueError("d_supp must be positive")
        step = 1.0 / self.d_supp
        for name, val in (("q_min", self.q_min), ("q_max", self.q_max)):
            if abs(val / step - round(val / step)) > _GRID_TOL:
                raise ValueError(f"{name}={val} is not aligned to the support grid (step {step})")
        n_supp = int(np.floor((self.q_max - self.q_min) * self.d_supp + _GRID_TOL)) + 1
        if n_supp < 2:
            raise ValueError("curve needs at least two support points")
        if len(values) != n_supp:
            raise ValueError(f"expected {n_supp} support values, got {len(values)}")

    @property
    def q_step(self) -> float:
        return 1.0 / self.d_supp

    @property
    def n_supp(self) -> int:
        return len(self.values)

    def positions(self) -> np.ndarray:
        return self.q_min + np.arange(self.n_supp) * self.q_step

    @staticmethod
    def over_range(q_lo: float, q_hi: float, d_supp: float, values=None) -> "JointCorrectionCurve":
        """Curve covering [q_lo, q_hi], range snapped outward to the grid."""
        step = 1.0 / d_supp
        q_min = np.floor(q_lo / step + _GRID_TOL) * step
        q_max = np.ceil(q_hi / step - _GRID_TOL) * step
        n_supp = int(round((q_max - q_min) * d_supp)) + 1
        if values is None:
            values = np.zeros(n_supp)
        return JointCorrectionCurve(q_min, q_max, d_supp, values)

    def with_values(self, values) -> "JointCorrectionCurve":
        return JointCorrectionCurve(self.q_min, self.q_max, self.d_supp, values)

    def locate(self, q):
        """Segment index, in-segment fraction and in-range flag for angles q.

        Out-of-range angles are clamped to the nearest support point (the
        fraction saturates at 0 or 1) and flagged.
        """
        q = np.asarray(q, dtype=float)
        u = (q - self.q_min) * self.d_supp
        seg = np.clip(np.floor(u).astype(int), 0, self.n_supp - 2)
        frac = np.clip(u - seg, 0.0, 1.0)
        in_range = (q >= self.q_min - _GRID_TOL * self.q_step) & (
            q <= self.q_max + _GRID_TOL * self.q_step
        )
        return seg, frac, in_range

    def evaluate(self, q):
        seg, frac, _ = self.locate(q)
        return self.values[seg] * (1.0 - frac) + self.values[seg + 1] * frac


def joint_correction(curve: JointCorrectionCurve, q_i: float):
    """Correction angle, its sparse gradient and an in-support flag.

    Returns ``(value, ((j_lo, w_lo), (j_hi, w_hi)), in_support)`` where the
    two (index, weight) pairs are the only nonzero entries of the gradient
    with respect to the curve's support values; the weights sum to one.
    """
    seg, frac, in_range = curve.locate(float(q_i))
    seg, frac = int(seg), float(frac)
    value = curve.values[seg] * (1.0 - frac) + curve.values[seg + 1] * frac
    return value, ((seg, 1.0 - frac), (seg + 1, frac)), bool(in_range)


# ---------------------------------------------------------------------------
# model variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelVariant:
    """Which submodels participate in a calibration; geometry is mandatory."""

    compliance: bool = True
    thermal: bool = True
    joint_corr: bool = True

    @staticmethod
    def from_flags(flags: str) -> "ModelVariant":
        s = set(flags.strip().upper())
        unknown = s - set("GCTJ")
        if unknown:
            raise ValueError(f"unknown model flags: {''.join(sorted(unknown))}")
        if "G" not in s:
            raise ValueError("the geometry submodel (G) is mandatory")
        return ModelVariant("C" in s, "T" in s, "J" in s)

    def flags(self) -> str:
        return "G" + ("C" if self.compliance else "") + ("T" if self.thermal else "") + (
            "J" if self.joint_corr else ""
        )

    def __str__(self) -> str:
        return self.flags()


FULL_VARIANT = ModelVariant(True, True, True)


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------

def axial_slot_for_axis(axis) -> int:
    """Translation component suppressed in a joint's geometric transform."""
    return int(np.argmax(np.abs(np.asarray(axis, dtype=float))))


@dataclass(frozen=True)
class ParameterVector:
    """All calibration parameters, in structured (non-flat) form.

    Submodels that are absent from a calibration keep their neutral values
    here (zeros, unit masses), which makes every associated virtual joint an
    exact identity.
    """

    geo_base: np.ndarray  # (6,)
    geo_joints: np.ndarray  # (6, 5)
    masses: np.ndarray  # (6,) kg; [0] fixed at 0, [5] frozen
    compliances: np.ndarray  # (6,) rad/(N*mm); [0] fixed at 0
    alphas: np.ndarray  # (6,) 1/K
    curves: tuple | None  # 6 JointCorrectionCurve, or None
    axial_slots: np.ndarray  # (6,) int
    kappa0: float = KAPPA0_DEFAULT_C
    r_ratio: np.ndarray = field(default_factory=lambda: np.full(N_JOINTS, R_RATIO_DEFAULT))
    desc_checksum: str | None = None

    def __post_init__(self):
        conv = {
            "geo_base": np.asarray(self.geo_base, dtype=float).reshape(6),
            "geo_joints": np.asarray(self.geo_joints, dtype=float).reshape(N_JOINTS, 5),
            "masses": np.asarray(self.masses, dtype=float).reshape(N_JOINTS),
            "compliances": np.asarray(self.compliances, dtype=float).reshape(N_JOINTS),
            "alphas": np.asarray(self.alphas, dtype=float).reshape(N_JOINTS),
            "axial_slots": np.asarray(self.axial_slots, dtype=int).reshape(N_JOINTS),
            "r_ratio": np.asarray(self.r_ratio, dtype=float).reshape(N_JOINTS),
        }
        for name, arr in conv.items():
            object.__setattr__(self, name, arr)
        if self.masses[0] != 0.0:
            raise ValueError("m_1 is not part of the model and must stay 0")
        if self.compliances[0] != 0.0:
            raise ValueError("k_1 is not part of the model and must stay 0")
        if self.curves is not None:
            if len(self.curves) != N_JOINTS:
                raise ValueError("curves must hold one entry per joint")
            object.__setattr__(self, "curves", tuple(self.curves))

    @property
    def m6(self) -> float:
        return float(self.masses[5])


def initial_guess(desc: RobotDescription, curves=None, m6: float = M6_FIXED_KG) -> ParameterVector:
    """Uninformed starting point: unit masses, everything else zero."""
    masses = np.ones(N_JOINTS)
    masses[0] = 0.0
    masses[5] = m6
    return ParameterVector(
        geo_base=np.zeros(6),
        geo_joints=np.zeros((N_JOINTS, 5)),
        masses=masses,
        compliances=np.zeros(N_JOINTS),
        alphas=np.zeros(N_JOINTS),
        curves=curves,
        axial_slots=np.array([axial_slot_for_axis(a) for a in desc.joint_axes]),
        desc_checksum=desc.checksum,
    )


def curves_for_ranges(ranges, d_supp: float = D_SUPP_DEFAULT, values=None) -> tuple:
    """Zero-valued correction curves over per-joint (q_min, q_max) ranges."""
    ranges = np.asarray(ranges, dtype=float).reshape(N_JOINTS, 2)
    out = []
    for i in range(N_JOINTS):
        vals = None if values is None else values[i]
        out.append(JointCorrectionCurve.over_range(ranges[i, 0], ranges[i, 1], d_supp, vals))
    return tuple(out)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def geo_free_translation_components(slot: int):
    """Translation components kept free when `slot` is suppressed."""
    return tuple(c for c in range(3) if c != slot)


def geo_param_vector(theta: ParameterVector, joint_index: int) -> np.ndarray:
    """Six-parameter pose vector of a geometric transform (0 = base)."""
    if joint_index == 0:
        return theta.geo_base.copy()
    block = theta.geo_joints[joint_index - 1]
    slot = theta.axial_slots[joint_index - 1]
    p = np.zeros(6)
    p[:3] = block[:3]
    free = geo_free_translation_components(slot)
    p[3 + free[0]] = block[3]
    p[3 + free[1]] = block[4]
    return p


def geo_params(theta: ParameterVector, joint_index: int) -> VirtualJointParams:
    return VirtualJointParams.from_array(geo_param_vector(theta, joint_index))


# ---------------------------------------------------------------------------
# compliance
# ---------------------------------------------------------------------------

def compliance_quantities_batch(desc: RobotDescription, q: np.ndarray, masses, r_ratio) -> dict:
    """Axial torques and their mass derivatives on the nominal chain.

    Returns:
      tau          (n, 6, 3) global-frame torque per joint [N*mm]
      tau_star     (n, 6)    torque component along each joint axis [N*mm]
      dtau_star_dm (n, 6, 6) d tau_star_i / d m_j (zero for j < i)

    Units: masses in kg, lever arms in mm and gravity in m/s^2 combine to
    torques in N*mm.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    masses = np.asarray(masses, dtype=float).reshape(N_JOINTS)
    r_ratio = np.asarray(r_ratio, dtype=float).reshape(N_JOINTS)
    frames = nominal_frames_batch(desc, q)
    origins = frames["origins"]
    link_vecs = frames["link_vecs"]
    axes = frames["axes"]
    com = origins + r_ratio[None, :, None] * link_vecs  # (n, 6, 3)
    lever = com[:, None, :, :] - origins[:, :, None, :]  # (n, i, j, 3)
    cross = np.cross(lever, desc.gravity)
    cross *= np.triu(np.ones((N_JOINTS, N_JOINTS)))[None, :, :, None]  # only j >= i load joint i
    dtau_star_dm = np.einsum("nik,nijk->nij", axes, cross)
    tau = np.einsum("j,nijk->nik", masses, cross)
    tau_star = dtau_star_dm @ masses
    return {"tau": tau, "tau_star": tau_star, "dtau_star_dm": dtau_star_dm}


def link_torques(desc: RobotDescription, q, masses, r_ratio=None) -> np.ndarray:
    """Global-frame gravity torque on each joint [N*mm], nominal chain."""
    if r_ratio is None:
        r_ratio = np.full(N_JOINTS, R_RATIO_DEFAULT)
    quant = compliance_quantities_batch(desc, np.atleast_2d(q), masses, r_ratio)
    return quant["tau"][0]


def compliance_deflections(desc: RobotDescription, q, theta: ParameterVector) -> np.ndarray:
    """Spring deflection angle per joint [rad]; joint 1 is always zero."""
    quant = compliance_quantities_batch(desc, np.atleast_2d(q), theta.masses, theta.r_ratio)
    return theta.compliances * quant["tau_star"][0]


def compliance_partials(desc: RobotDescription, q, theta: ParameterVector):
    """(d deflection_i / d m_j, d deflection_i / d k_j), both (6, 6)."""
    quant = compliance_quantities_batch(desc, np.atleast_2d(q), theta.masses, theta.r_ratio)
    d_dm = theta.compliances[:, None] * quant["dtau_star_dm"][0]
    d_dk = np.diag(quant["tau_star"][0])
    return d_dm, d_dk


# ---------------------------------------------------------------------------
# thermal
# ---------------------------------------------------------------------------

def thermal_params(desc: RobotDescription, theta: ParameterVector, kappa: float,
                   link_index: int) -> VirtualJointParams:
    """Pure translation alpha_i * (kappa - kappa0) * t_i along the link."""
    shift = theta.alphas[link_index] * (kappa - theta.kappa0) * desc.links[link_index]
    return VirtualJointParams(0.0, 0.0, 0.0, *shift)


def thermal_partial(desc: RobotDescription, theta: ParameterVector, kappa: float,
                    link_index: int) -> np.ndarray:
    """Derivative of the thermal translation with respect to alpha_i."""
    return (kappa - theta.kappa0) * desc.links[link_index]


# ---------------------------------------------------------------------------
# flat packing
# ---------------------------------------------------------------------------

class ParameterLayout:
    """Index map between a ParameterVector and the flat optimization array.

    Block order is geometry, compliance, thermal, joint correction; absent
    submodels contribute no entries. Frozen values (m1, k1, m6) are never
    part of the flat array.
    """

    N_GEO = 6 + 5 * N_JOINTS
    N_COMPLIANCE = 9  # m2..m5, k2..k6
    N_THERMAL = N_JOINTS

    def __init__(self, variant: ModelVariant, curves=None):
        self.variant = variant
        pos = self.N_GEO
        self.geo = slice(0, pos)
        self.compliance = None
        self.masses = None
        self.stiffness = None
        self.thermal = None
        self.joint = None
        self.joint_slices = None
        if variant.compliance:
            self.compliance = slice(pos, pos + self.N_COMPLIANCE)
            self.masses = slice(pos, pos + 4)
            self.stiffness = slice(pos + 4, pos + 9)
            pos += self.N_COMPLIANCE
        if variant.thermal:
            self.thermal = slice(pos, pos + self.N_THERMAL)
            pos += self.N_THERMAL
        if variant.joint_corr:
            if curves is None:
                raise ValueError("variant includes joint correction but no curves given")
            self.joint_slices = []
            start = pos
            for curve in curves:
                self.joint_slices.append(slice(pos, pos + curve.n_supp))
                pos += curve.n_supp
            self.joint = slice(start, pos)
        self.n_free = pos

    @classmethod
    def for_theta(cls, variant: ModelVariant, theta: ParameterVector) -> "ParameterLayout":
        return cls(variant, theta.curves if variant.joint_corr else None)

    def _per_block(self, geo_angle, geo_trans, mass, stiff, alpha, joint) -> np.ndarray:
        out = np.empty(self.n_free)
        g = np.empty(self.N_GEO)
        g[:6] = [geo_angle] * 3 + [geo_trans] * 3
        block = [geo_angle] * 3 + [geo_trans] * 2
        g[6:] = np.tile(block, N_JOINTS)
        out[self.geo] = g
        if self.masses is not None:
            out[self.masses] = mass
            out[self.stiffness] = stiff
        if self.thermal is not None:
            out[self.thermal] = alpha
        if self.joint is not None:
            out[self.joint] = joint
        return out

    def fd_steps(self, rel: float = 1e-6) -> np.ndarray:
        """Finite-difference steps, `rel` scaled by each parameter's magnitude."""
        return rel * self._per_block(
            geo_angle=1e-2, geo_trans=1.0, mass=50.0, stiff=1e-8, alpha=1e-4, joint=1e-2
        )

    def si_scales(self) -> np.ndarray:
        """Column scaling that re-expresses gradients in SI base units.

        Translations switch from mm to m and compliances from rad/(N*mm) to
        rad/(N*m); angle-, mass- and expansion-parameters are unchanged.
        """
        return self._per_block(
            geo_angle=1.0, geo_trans=1e3, mass=1.0, stiff=1e-3, alpha=1.0, joint=1.0
        )


def pack(theta: ParameterVector, variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """Free parameters of `theta` under `variant`, as a flat array."""
    parts = [theta.geo_base, theta.geo_joints.ravel()]
    if variant.compliance:
        parts.append(theta.masses[1:5])
        parts.append(theta.compliances[1:6])
    if variant.thermal:
        parts.append(theta.alphas)
    if variant.joint_corr:
        if theta.curves is None:
            raise ValueError("variant includes joint correction but theta has no curves")
        parts.extend(curve.values for curve in theta.curves)
    return np.concatenate(parts)


def unpack(flat: np.ndarray, template: ParameterVector,
           variant: ModelVariant = FULL_VARIANT) -> ParameterVector:
    """Rebuild a ParameterVector from a flat array; frozen entries come from `template`."""
    flat = np.asarray(flat, dtype=float).reshape(-1)
    layout = ParameterLayout.for_theta(variant, template)
    if len(flat) != layout.n_free:
        raise ValueError(f"flat array has length {len(flat)}, layout expects {layout.n_free}")
    geo = flat[layout.geo]
    masses = template.masses.copy()
    compliances = template.compliances.copy()
    alphas = template.alphas.copy()
    curves = template.curves
    if variant.compliance:
        masses[1:5] = flat[layout.masses]
        compliances[1:6] = flat[layout.stiffness]
    if variant.thermal:
        alphas = flat[layout.thermal].copy()
    if variant.joint_corr:
        curves = tuple(
            curve.with_values(flat[sl]) for curve, sl in zip(template.curves, layout.joint_slices)
        )
    return ParameterVector(
        geo_base=geo[:6],
        geo_joints=geo[6:].reshape(N_JOINTS, 5),
        masses=masses,
        compliances=compliances,
        alphas=alphas,
        curves=curves,
        axial_slots=template.axial_slots,
        kappa0=template.kappa0,
        r_ratio=template.r_ratio,
        desc_checksum=template.desc_checksum,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def theta_to_doc(theta: ParameterVector) -> dict:
    doc = {
        "format": "robocal-theta-v1",
        "description_checksum": theta.desc_checksum,
        "kappa0_c": float(theta.kappa0),
        "r_ratio": theta.r_ratio.tolist(),
        "m6_kg": theta.m6,
        "axial_slots": theta.axial_slots.tolist(),
        "geometry": {
            "base": theta.geo_base.tolist(),
            "joints": theta.geo_joints.tolist(),
        },
        "compliance": {
            "masses_kg": theta.masses[1:5].tolist(),
            "compliances_rad_per_nmm": theta.compliances[1:6].tolist(),
        },
        "thermal": {"alphas_per_k": theta.alphas.tolist()},
    }
    if theta.curves is None:
        doc["joint_correction"] = None
    else:
        doc["joint_correction"] = {
            "curves": [
                {
                    "q_min_rad": float(c.q_min),
                    "q_max_rad": float(c.q_max),
                    "d_supp_per_rad": float(c.d_supp),
                    "values_rad": c.values.tolist(),
                }
                for c in theta.curves
            ]
        }
    return doc


def theta_from_doc(doc: dict) -> ParameterVector:
    masses = np.zeros(N_JOINTS)
    masses[1:5] = doc["compliance"]["masses_kg"]
    masses[5] = doc["m6_kg"]
    compliances = np.zeros(N_JOINTS)
    compliances[1:6] = doc["compliance"]["compliances_rad_per_nmm"]
    jc = doc.get("joint_correction")
    curves = None
    if jc is not None:
        curves = tuple(
            JointCorrectionCurve(
                c["q_min_rad"], c["q_max_rad"], c["d_supp_per_rad"], np.asarray(c["values_rad"])
            )
            for c in jc["curves"]
        )
    return ParameterVector(
        geo_base=np.asarray(doc["geometry"]["base"]),
        geo_joints=np.asarray(doc["geometry"]["joints"]),
        masses=masses,
        compliances=compliances,
        alphas=np.asarray(doc["thermal"]["alphas_per_k"]),
        curves=curves,
        axial_slots=np.asarray(doc["axial_slots"]),
        kappa0=float(doc["kappa0_c"]),
        r_ratio=np.asarray(doc["r_ratio"]),
        desc_checksum=doc.get("description_checksum"),
    )


def save_theta(path, theta: ParameterVector) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(theta_to_doc(theta), fh, sort_keys=False)


def load_theta(path, desc: RobotDescription | None = None) -> ParameterVector:
    """Load a parameter file; when `desc` is given, reject checksum mismatches."""
    doc = yaml.safe_load(Path(path).read_text())
    if doc.get("format") != "robocal-theta-v1":
        raise ValueError(f"{path}: not a robocal theta file")
    theta = theta_from_doc(doc)
    if desc is not None and desc.checksum and theta.desc_checksum:
        if desc.checksum != theta.desc_checksum:
            raise ValueError(
                f"{path}: parameter file was identified for a different robot description"
            )
    return theta
