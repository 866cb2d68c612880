"""Robot description and nominal forward kinematics of the 6-joint chain.

Joint states are plain length-6 arrays (rad) and the ambient temperature is a
float (degrees C); there are no wrapper types for them. The nominal chain is

    base * joint_1(q1) * link_1 * ... * joint_6(q6) * link_6 * tcp_local

where each joint is a rotation about its (unit) axis and each link a fixed
translation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .transforms import Transform, axis_rotation, compose, rot_about_axis

N_JOINTS = 6

GRAVITY_DEFAULT = np.array([0.0, 0.0, 9.81])  # m/s^2, taken verbatim from config


class DescriptionError(ValueError):
    """Robot description file is malformed or incomplete."""


@dataclass(frozen=True)
class RobotDescription:
    """Nominal chain: base/TCP transforms, joint axes and limits, link translations."""

    name: str
    base: Transform
    tcp_local: Transform
    joint_axes: np.ndarray  # (6, 3) unit vectors
    joint_limits: np.ndarray  # (6, 2) rad, hardware limits
    links: np.ndarray  # (6, 3) mm
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY_DEFAULT.copy())  # m/s^2
    checksum: str | None = None  # sha256 of the source file, when loaded from disk

    def __post_init__(self):
        axes = np.asarray(self.joint_axes, dtype=float).reshape(N_JOINTS, 3)
        limits = np.asarray(self.joint_limits, dtype=float).reshape(N_JOINTS, 2)
        links = np.asarray(self.links, dtype=float).reshape(N_JOINTS, 3)
        gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        norms = np.linalg.norm(axes, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise DescriptionError(f"joint axes must be unit vectors, norms {norms}")
        if not np.all(limits[:, 0] < limits[:, 1]):
            raise DescriptionError("joint limits must satisfy q_min < q_max")
        for arr in (axes, limits, links, gravity):
            if not np.all(np.isfinite(arr)):
                raise DescriptionError("description contains non-finite values")
        object.__setattr__(self, "joint_axes", axes)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "gravity", gravity)


def _as_q(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (N_JOINTS,):
        raise ValueError(f"joint state must have shape (6,), got {q.shape}")
    return q


def fk_nominal(desc: RobotDescription, q) -> Transform:
    """Tool pose of the nominal (uncalibrated) chain at joint state q."""
    q = _as_q(q)
    t = desc.base
    for i in range(N_JOINTS):
        t = compose(t, rot_about_axis(desc.joint_axes[i], q[i]))
        t = compose(t, Transform(np.eye(3), desc.links[i]))
    return compose(t, desc.tcp_local)


def fk_nominal_batch(desc: RobotDescription, q: np.ndarray) -> np.ndarray:
    """TCP positions (n, 3) of the nominal chain for joint states q (n, 6)."""
    frames = nominal_frames_batch(desc, q)
    return frames["tcp"]


def nominal_frames_batch(desc: RobotDescription, q: np.ndarray) -> dict:
    """Per-joint frames of the nominal chain for a batch of joint states.

    Returns arrays keyed by:
      origins   (n, 6, 3)    joint origins in the global frame
      rotations (n, 6, 3, 3) frame rotation after each joint's rotation
      axes      (n, 6, 3)    joint axes in the global frame
      link_vecs (n, 6, 3)    link translations in the global frame
      tcp       (n, 3)       TCP position
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    n = q.shape[0]
    origins = np.empty((n, N_JOINTS, 3))
    rotations = np.empty((n, N_JOINTS, 3, 3))
    axes = np.empty((n, N_JOINTS, 3))
    link_vecs = np.empty((n, N_JOINTS, 3))
    rot = np.broadcast_to(desc.base.rotation, (n, 3, 3))
    pos = np.broadcast_to(desc.base.translation, (n, 3)).copy()
    for i in range(N_JOINTS):
        origins[:, i] = pos
        axes[:, i] = rot @ desc.joint_axes[i]
        rot = rot @ axis_rotation(desc.joint_axes[i], q[:, i])
        rotations[:, i] = rot
        link_vecs[:, i] = rot @ desc.links[i]
        pos = pos + link_vecs[:, i]
    tcp = pos + rot @ desc.tcp_local.translation
    return {
        "origins": origins,
        "rotations": rotations,
        "axes": axes,
        "link_vecs": link_vecs,
        "tcp": tcp,
    }


# ---------------------------------------------------------------------------
# description file I/O
# ---------------------------------------------------------------------------

def _get(node, path: str):
    """Fetch a nested key, reporting the full key path when missing."""
    cur = node
    for part in path.split("."):
        if part.isdigit():
            idx = int(part)
            if not isinstance(cur, list) or idx >= len(cur):
                raise DescriptionError(f"missing field: {path}")
            cur = cur[idx]
        else:
            if not isinstance(cur, dict) or part not in cur:
                raise DescriptionError(f"missing field: {path}")
            cur = cur[part]
    return cur


def _load_transform(node, path: str) -> Transform:
    rotation = np.asarray(_get(node, f"{path}.rotation"), dtype=float)
    translation = np.asarray(_get(node, f"{path}.translation_mm"), dtype=float)
    try:
        return Transform(rotation, translation)
    except ValueError as exc:
        raise DescriptionError(f"invalid transform at {path}: {exc}") from exc


def load_robot(path) -> RobotDescription:
    """Parse a robot description file; missing fields name the offending key path."""
    path = Path(path)
    raw = path.read_bytes()
    checksum = hashlib.sha256(raw).hexdigest()
    doc = yaml.safe_load(raw)
    if not isinstance(doc, dict):
        raise DescriptionError(f"{path}: top level must be a mapping")
    name = str(_get(doc, "name"))
    base = _load_transform(doc, "base")
    tcp_local = _load_transform(doc, "tcp_local")
    joints = _get(doc, "joints")
    links = _get(doc, "links")
    if not isinstance(joints, list) or len(joints) != N_JOINTS:
        raise DescriptionError(f"joints: expected a list of {N_JOINTS} entries")
    if not isinstance(links, list) or len(links) != N_JOINTS:
        raise DescriptionError(f"links: expected a list of {N_JOINTS} entries")
    axes = [np.asarray(_get(doc, f"joints.{i}.axis"), dtype=float) for i in range(N_JOINTS)]
    limits = [np.asarray(_get(doc, f"joints.{i}.limits_rad"), dtype=float) for i in range(N_JOINTS)]
    link_arr = [np.asarray(_get(doc, f"links.{i}"), dtype=float) for i in range(N_JOINTS)]
    gravity = np.asarray(doc.get("gravity_mps2", GRAVITY_DEFAULT), dtype=float)
    try:
        return RobotDescription(
            name=name,
            base=base,
            tcp_local=tcp_local,
            joint_axes=np.stack(axes),
            joint_limits=np.stack(limits),
            links=np.stack(link_arr),
            gravity=gravity,
            checksum=checksum,
        )
    except DescriptionError as exc:
        raise DescriptionError(f"{path}: {exc}") from exc


def save_robot(path, desc: RobotDescription) -> None:
    doc = {
        "name": desc.name,
        "base": {
            "rotation": desc.base.rotation.tolist(),
            "translation_mm": desc.base.translation.tolist(),
        },
        "tcp_local": {
            "rotation": desc.tcp_local.rotation.tolist(),
            "translation_mm": desc.tcp_local.translation.tolist(),
        },
        "gravity_mps2": desc.gravity.tolist(),
        "joints": [
            {"axis": desc.joint_axes[i].tolist(), "limits_rad": desc.joint_limits[i].tolist()}
            for i in range(N_JOINTS)
        ],
        "links": [desc.links[i].tolist() for i in range(N_JOINTS)],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def bundled_description(name: str = "kr30_like") -> RobotDescription:
    """Load one of the robot descriptions shipped with the package."""
    ref = resources.files("robocal").joinpath(f"descriptions/{name}.yaml")
    with resources.as_file(ref) as path:
        return load_robot(path)
