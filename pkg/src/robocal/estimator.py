"""Identification: loss, regularization, damped Gauss-Newton and evaluation.

The loss is the mean squared position residual over the dataset (factor 1/2)
plus a mild quadratic penalty on the joint-correction values, scaled per
joint by the averaged nominal end-effector sensitivity l_i. The update is

    theta <- theta - (B + lambda_gn * I)^-1 grad

where B is the Gauss-Newton (first-order) Hessian approximation. The normal
equations are solved by a Cholesky factorization after symmetric diagonal
equilibration; with lambda_gn > 0 the system is positive definite by
construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import yaml

from .data import Dataset
from .jacobian import linearize_batch, nominal_sensitivities_batch
from .robot import N_JOINTS, RobotDescription
from .submodels import (
    FULL_VARIANT,
    ModelVariant,
    ParameterLayout,
    ParameterVector,
    pack,
    theta_from_doc,
    theta_to_doc,
    unpack,
)

LAMBDA_GN_DEFAULT = 1e-7
LAMBDA_J_DEFAULT = 1e-5


class EstimatorError(RuntimeError):
    pass


class SolverDivergenceError(EstimatorError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SolverNumericalError(EstimatorError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    lambda_gn: float = LAMBDA_GN_DEFAULT
    lambda_j: float = LAMBDA_J_DEFAULT
    max_iters: int = 200
    rel_tol: float = 1e-12
    variant: ModelVariant = FULL_VARIANT

    def __post_init__(self):
        if self.lambda_gn < 0 or self.lambda_j < 0:
            raise ValueError("damping and regularization weights must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolverTrace:
    """Per-iteration record; entry 0 describes the initial point."""

    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    wall_times_s: list = field(default_factory=list)


@dataclass(frozen=True)
class ErrorSummary:
    """Per-pose Euclidean position errors, aggregated. All values in um."""

    mean_um: float
    p95_um: float
    max_um: float
    n: int
    n_clamped: int = 0


@dataclass
class CalibrationResult:
    theta: ParameterVector
    variant: ModelVariant
    trace: SolverTrace
    scaling: np.ndarray  # l_1..l_6, mm/rad
    stats: ErrorSummary  # on the training set
    converged: bool
    n_iters: int


def joint_scaling(desc: RobotDescription, dataset: Dataset) -> np.ndarray:
    """l_i: averaged nominal end-effector sensitivity per joint [mm/rad]."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    sens = nominal_sensitivities_batch(desc, dataset.q)
    return np.linalg.norm(sens, axis=2).mean(axis=0)


def _reg_weights(layout: ParameterLayout, config: SolverConfig, scaling) -> np.ndarray | None:
    """Quadratic-penalty coefficients w_p (loss term sum_p w_p theta_p^2)."""
    if layout.joint is None or config.lambda_j == 0.0:
        return None
    w = np.zeros(layout.n_free)
    for i, sl in enumerate(layout.joint_slices):
        w[sl] = config.lambda_j / scaling[i] ** 2
    return w


def residuals(desc: RobotDescription, dataset: Dataset, theta: ParameterVector):
    """Prediction-minus-measurement residuals (n, 3) [mm] and clamp flags."""
    from .chain import predict_positions

    pos, clamped = predict_positions(desc, theta, dataset.q, dataset.kappa)
    return pos - dataset.t_meas, clamped


def loss(desc: RobotDescription, dataset: Dataset, theta: ParameterVector,
         config: SolverConfig, scaling=None) -> float:
    """Data term plus joint-model regularization."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if scaling is None:
        scaling = joint_scaling(desc, dataset)
    res, _ = residuals(desc, dataset, theta)
    value = 0.5 * np.sum(res * res) / len(dataset)
    layout = ParameterLayout.for_theta(config.variant, theta)
    w = _reg_weights(layout, config, scaling)
    if w is not None:
        flat = pack(theta, config.variant)
        value += np.sum(w * flat * flat)
    return float(value)


def gradient_and_gauss_newton_matrix(desc: RobotDescription, dataset: Dataset,
                                     theta: ParameterVector, config: SolverConfig,
                                     scaling=None):
    """Loss gradient (n_free,) and Gauss-Newton matrix B (n_free, n_free)."""
    if scaling is None:
        scaling = joint_scaling(desc, dataset)
    res, jac, _, grad, gn = _linearized_system(desc, dataset, theta, config, scaling)
    return grad, gn


def _linearized_system(desc, dataset, theta, config, scaling):
    m_hat = len(dataset)
    pos, jac, clamped = linearize_batch(desc, theta, config.variant, dataset.q, dataset.kappa)
    res = pos - dataset.t_meas
    grad = np.einsum("ni,nip->p", res, jac) / m_hat
    jr = jac.reshape(3 * m_hat, -1)
    gn = jr.T @ jr / m_hat
    layout = ParameterLayout.for_theta(config.variant, theta)
    w = _reg_weights(layout, config, scaling)
    loss_val = 0.5 * np.sum(res * res) / m_hat
    if w is not None:
        flat = pack(theta, config.variant)
        grad = grad + 2.0 * w * flat
        gn = gn + np.diag(2.0 * w)
        loss_val += np.sum(w * flat * flat)
    return res, jac, float(loss_val), grad, gn


def _solve_normal_equations(gn: np.ndarray, grad: np.ndarray, lambda_gn: float) -> np.ndarray:
    a = gn + lambda_gn * np.eye(len(grad))
    # symmetric diagonal equilibration: parameter units span many decades
    d = np.sqrt(np.maximum(np.diag(a), np.finfo(float).tiny))
    a_eq = a / d[:, None] / d[None, :]
    try:
        cho = scipy.linalg.cho_factor(a_eq, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SolverNumericalError(f"normal equations not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve(cho, grad / d) / d


def solve(desc: RobotDescription, dataset: Dataset, theta0: ParameterVector,
          config: SolverConfig | None = None) -> CalibrationResult:
    """Damped Gauss-Newton iteration from theta0; returns the best-seen iterate.

    Stops when the relative loss change falls below config.rel_tol or after
    config.max_iters updates. A non-finite loss aborts with the trace attached.
    """
    if config is None:
        config = SolverConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    scaling = joint_scaling(desc, dataset)
    trace = SolverTrace()
    theta = theta0
    t0 = time.perf_counter()

    res, jac, loss_val, grad, gn = _linearized_system(desc, dataset, theta, config, scaling)
    trace.losses.append(loss_val)
    trace.grad_norms.append(float(np.linalg.norm(grad)))
    trace.step_norms.append(0.0)
    trace.wall_times_s.append(time.perf_counter() - t0)

    best_theta, best_loss = theta, loss_val
    converged = False
    n_iters = 0
    for _ in range(config.max_iters):
        if not np.isfinite(loss_val):
            raise SolverDivergenceError("loss became non-finite", trace=trace)
        try:
            step = _solve_normal_equations(gn, grad, config.lambda_gn)
        except SolverNumericalError as exc:
            exc.trace = trace
            raise
        flat = pack(theta, config.variant) - step
        theta = unpack(flat, theta, config.variant)
        n_iters += 1

        prev_loss = loss_val
        res, jac, loss_val, grad, gn = _linearized_system(desc, dataset, theta, config, scaling)
        trace.losses.append(loss_val)
        trace.grad_norms.append(float(np.linalg.norm(grad)))
        trace.step_norms.append(float(np.linalg.norm(step)))
        trace.wall_times_s.append(time.perf_counter() - t0)
        if not np.isfinite(loss_val):
            raise SolverDivergenceError("loss became non-finite", trace=trace)
        if loss_val < best_loss:
            best_theta, best_loss = theta, loss_val
        if abs(loss_val - prev_loss) <= config.rel_tol * max(prev_loss, np.finfo(float).tiny):
            converged = True
            break

    stats = evaluate(desc, dataset, best_theta)
    return CalibrationResult(
        theta=best_theta,
        variant=config.variant,
        trace=trace,
        scaling=scaling,
        stats=stats,
        converged=converged,
        n_iters=n_iters,
    )


def evaluate(desc: RobotDescription, dataset: Dataset, theta: ParameterVector) -> ErrorSummary:
    """Mean, nearest-rank 95th percentile and maximum position error [um]."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    res, clamped = residuals(desc, dataset, theta)
    errors_um = 1e3 * np.linalg.norm(res, axis=1)
    ordered = np.sort(errors_um)
    rank = max(int(np.ceil(0.95 * len(ordered))), 1) - 1
    return ErrorSummary(
        mean_um=float(errors_um.mean()),
        p95_um=float(ordered[rank]),
        max_um=float(errors_um.max()),
        n=len(ordered),
        n_clamped=int(clamped.sum()),
    )


# ---------------------------------------------------------------------------
# result serialization
# ---------------------------------------------------------------------------

def summary_to_doc(stats: ErrorSummary) -> dict:
    return {
        "mean_um": stats.mean_um,
        "p95_um": stats.p95_um,
        "max_um": stats.max_um,
        "n": stats.n,
        "n_clamped": stats.n_clamped,
    }


def result_to_doc(result: CalibrationResult, config: SolverConfig) -> dict:
    return {
        "format": "robocal-result-v1",
        "variant": result.variant.flags(),
        "config": {
            "lambda_gn": config.lambda_gn,
            "lambda_j": config.lambda_j,
            "max_iters": config.max_iters,
            "rel_tol": config.rel_tol,
        },
        "converged": result.converged,
        "n_iters": result.n_iters,
        "scaling_mm_per_rad": result.scaling.tolist(),
        "train_stats": summary_to_doc(result.stats),
        "trace": {
            "losses": [float(x) for x in result.trace.losses],
            "grad_norms": result.trace.grad_norms,
            "step_norms": result.trace.step_norms,
            "wall_times_s": result.trace.wall_times_s,
        },
        "theta": theta_to_doc(result.theta),
    }


def save_result(path, result: CalibrationResult, config: SolverConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(result_to_doc(result, config), fh, sort_keys=False)


def load_result_theta(path) -> ParameterVector:
    """Read the parameter vector out of either a result file or a theta file."""
    doc = yaml.safe_load(Path(path).read_text())
    fmt = doc.get("format")
    if fmt == "robocal-result-v1":
        return theta_from_doc(doc["theta"])
    if fmt == "robocal-theta-v1":
        return theta_from_doc(doc)
    raise ValueError(f"{path}: unrecognized parameter file format {fmt!r}")
