"""Error terms and analytic Jacobians for the batch estimator.

Four factor families:

- constant-strain prior between consecutive nodes of a rod (binary, 12-dim)
- pose measurement of a node or rigid body (unary, <=6-dim)
- four-core fiber strain measurement at a node (unary, 4-dim)
- coupling-joint loop closure between two poses (binary, <=6-dim)

All Jacobians are with respect to the perturbation scheme used by the
solver: left-multiplicative ``exp(dt^) T`` for poses, additive for strains.
Node state blocks are 12-dim ``[dt(6); deps(6)]``, rigid bodies 6-dim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroup import (
    adjoint,
    curly6,
    exp_se3,
    left_jacobian_inv,
    log_se3,
    pose_inverse,
)

_EYE6 = np.eye(6)


# ---------------------------------------------------------------------------
# Prior kernel
# ---------------------------------------------------------------------------

def transition(s, s_prev):
    """State transition over an arclength interval: [[I, (s-s')I], [0, I]]."""
    if s < s_prev:
        raise ValueError("transition requires s >= s_prev")
    out = np.eye(12)
    out[:6, 6:] = (s - s_prev) * _EYE6
    return out


def process_noise(ds, qc):
    """Covariance accumulated over an interval of length ``ds``."""
    if ds <= 0.0:
        raise ValueError("process_noise requires ds > 0")
    qc = np.asarray(qc, dtype=float)
    out = np.empty((12, 12))
    out[:6, :6] = (ds ** 3 / 3.0) * qc
    out[:6, 6:] = (ds ** 2 / 2.0) * qc
    out[6:, :6] = out[:6, 6:]
    out[6:, 6:] = ds * qc
    return out


def process_noise_inv(ds, qc_inv):
    """Closed-form inverse of ``process_noise`` (block formula)."""
    if ds <= 0.0:
        raise ValueError("process_noise_inv requires ds > 0")
    qc_inv = np.asarray(qc_inv, dtype=float)
    out = np.empty((12, 12))
    out[:6, :6] = (12.0 / ds ** 3) * qc_inv
    out[:6, 6:] = (-6.0 / ds ** 2) * qc_inv
    out[6:, :6] = out[:6, 6:]
    out[6:, 6:] = (4.0 / ds) * qc_inv
    return out


@dataclass
class PriorKernel:
    """Per-robot prior: power-spectral density plus cached interval inverses."""

    qc: np.ndarray
    qc_inv: np.ndarray = field(init=False)
    _cache: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.qc = np.asarray(self.qc, dtype=float)
        # SPD gate: fails loudly on a bad hyperparameter
        np.linalg.cholesky(self.qc)
        self.qc_inv = np.linalg.inv(self.qc)

    def interval_covariance(self, ds):
        return process_noise(ds, self.qc)

    def interval_information(self, ds):
        key = float(ds)
        out = self._cache.get(key)
        if out is None:
            out = process_noise_inv(ds, self.qc_inv)
            self._cache[key] = out
        return out


def prior_error(t_k, eps_k, t_km1, eps_km1, ds):
    """Constant-strain prior error between two consecutive node states.

    Zero iff the pair lies on a constant-strain segment: the top half is the
    inter-node twist minus ``ds`` times the earlier strain, the bottom half
    compares the local strain derivative against the earlier strain.
    """
    xi = log_se3(t_k @ pose_inverse(t_km1))
    out = np.empty(12)
    out[:6] = xi - ds * eps_km1
    out[6:] = left_jacobian_inv(xi) @ eps_k - eps_km1
    return out


def prior_jacobian(t_k, eps_k, t_km1, eps_km1, ds):
    """Analytic prior Jacobian blocks wrt nodes k-1 and k (12x12 each).

    The strain-vs-pose blocks use the first-order device
    ``0.5 * curly(eps_k) @ Jinv``; see tests for its validity regime.
    """
    rel = t_k @ pose_inverse(t_km1)
    xi = log_se3(rel)
    j_inv = left_jacobian_inv(xi)
    t_cal = adjoint(rel)
    j_bar = 0.5 * curly6(eps_k) @ j_inv

    e_km1 = np.zeros((12, 12))
    e_k = np.zeros((12, 12))
    e_km1[:6, :6] = -j_inv @ t_cal
    e_km1[:6, 6:] = -ds * _EYE6
    e_km1[6:, :6] = -j_bar @ t_cal
    e_km1[6:, 6:] = -_EYE6
    e_k[:6, :6] = j_inv
    e_k[6:, :6] = j_bar
    e_k[6:, 6:] = j_inv
    return e_km1, e_k


# ---------------------------------------------------------------------------
# Pose measurements
# ---------------------------------------------------------------------------

def pose_meas_error(t_op, t_meas, mask=None):
    """Pose measurement error ``log(T_op T_meas^-1)`` on the active rows."""
    e = log_se3(t_op @ pose_inverse(t_meas))
    if mask is None:
        return e
    return e[np.asarray(mask, dtype=bool)]


def pose_meas_jacobian(t_op, t_meas, mask=None):
    """Jacobian of the pose error wrt the pose perturbation (rows masked)."""
    j = left_jacobian_inv(log_se3(t_op @ pose_inverse(t_meas)))
    if mask is None:
        return j
    return j[np.asarray(mask, dtype=bool), :]


# ---------------------------------------------------------------------------
# Fiber strain measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FbgGeometry:
    """Four-core fiber layout: one central core, three at ``core_radius``."""

    core_radius: float
    core_angles: tuple  # radians, outer cores (3,)

    def __post_init__(self):
        if self.core_radius <= 0.0:
            raise ValueError("core_radius must be positive")
        if len(self.core_angles) != 3:
            raise ValueError("expected 3 outer core angles")


def fbg_model(eps, geometry):
    """Longitudinal strain of the four cores for a given strain state.

    Core 1 (central) sees elongation only; the outer cores mix elongation,
    bending and twist. Twist enters squared, so the model cannot tell the
    twist sign.
    """
    nu1 = eps[0]
    w1, w2, w3 = eps[3], eps[4], eps[5]
    r = geometry.core_radius
    out = np.empty(4)
    out[0] = nu1 - 1.0
    tw = r * w1
    for i, theta in enumerate(geometry.core_angles):
        bend = nu1 - r * (w3 * np.cos(theta) - w2 * np.sin(theta))
        out[1 + i] = np.sqrt(bend * bend + tw * tw) - 1.0
    return out


def fbg_error(y_meas, eps_op, geometry, mask=None):
    """Measured minus modelled core strains on the active rows."""
    e = np.asarray(y_meas, dtype=float) - fbg_model(eps_op, geometry)
    if mask is None:
        return e
    return e[np.asarray(mask, dtype=bool)]


def fbg_strain_gradient(eps, geometry):
    """d(model)/d(strain), 4x6. Rows 2-4 lose the twist column at w1 = 0."""
    nu1 = eps[0]
    w1, w2, w3 = eps[3], eps[4], eps[5]
    r = geometry.core_radius
    lam = fbg_model(eps, geometry)
    grad = np.zeros((4, 6))
    grad[0, 0] = 1.0
    for i, theta in enumerate(geometry.core_angles):
        denom = lam[1 + i] + 1.0
        if abs(denom) < 1e-12:
            raise ValueError("degenerate fiber measurement: core strain at -1")
        ct = np.cos(theta)
        st = np.sin(theta)
        g1 = nu1 - r * (w3 * ct - w2 * st)
        grad[1 + i, 0] = g1 / denom
        grad[1 + i, 3] = w1 * r * r / denom
        grad[1 + i, 4] = r * st * g1 / denom
        grad[1 + i, 5] = -r * ct * g1 / denom
    return grad


def fbg_jacobian(eps_op, geometry, mask=None):
    """Error Jacobian wrt the 12-dim node block: ``[0(pose) | -dg/deps]``."""
    out = np.zeros((4, 12))
    out[:, 6:] = -fbg_strain_gradient(eps_op, geometry)
    if mask is None:
        return out
    return out[np.asarray(mask, dtype=bool), :]


# ---------------------------------------------------------------------------
# Coupling constraints
# ---------------------------------------------------------------------------

def coupling_error(t_a, t_b, offset_a, offset_b, mask=None):
    """Loop-closure error of a coupling joint, expressed in the joint frame."""
    e = log_se3(pose_inverse(offset_a) @ t_a @ pose_inverse(t_b) @ offset_b)
    if mask is None:
        return e
    return e[np.asarray(mask, dtype=bool)]


def coupling_jacobian(t_a, t_b, offset_a, offset_b, mask=None):
    """Jacobian blocks wrt the two coupled pose perturbations (rows masked)."""
    inv_oa = pose_inverse(offset_a)
    part = inv_oa @ t_a @ pose_inverse(t_b)
    j_inv = left_jacobian_inv(log_se3(part @ offset_b))
    e_a = j_inv @ adjoint(inv_oa)
    e_b = -j_inv @ adjoint(part)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        e_a = e_a[m, :]
        e_b = e_b[m, :]
    return e_a, e_b


# ---------------------------------------------------------------------------
# Factor objects consumed by the solver
# ---------------------------------------------------------------------------

@dataclass
class FactorEvaluation:
    """One linearized factor: error, per-block Jacobians, information."""

    error: np.ndarray
    jacobians: dict  # block index -> dense (r x block_dim) array
    weight: np.ndarray  # SPD information matrix on the active rows


class PriorFactor:
    """Binary constant-strain factor between nodes ``block_a`` -> ``block_b``."""

    def __init__(self, block_a, block_b, ds, information):
        self.block_a = block_a
        self.block_b = block_b
        self.ds = ds
        self.weight = information

    def error(self, state):
        return prior_error(
            state.poses[self.block_b], state.strains[self.block_b],
            state.poses[self.block_a], state.strains[self.block_a], self.ds)

    def linearize(self, state):
        t_b = state.poses[self.block_b]
        t_a = state.poses[self.block_a]
        eps_b = state.strains[self.block_b]
        eps_a = state.strains[self.block_a]
        e = prior_error(t_b, eps_b, t_a, eps_a, self.ds)
        e_a, e_b = prior_jacobian(t_b, eps_b, t_a, eps_a, self.ds)
        return FactorEvaluation(e, {self.block_a: e_a, self.block_b: e_b}, self.weight)


class PoseMeasurementFactor:
    """Unary pose factor on a node (12-dim block) or rigid body (6-dim)."""

    def __init__(self, block, t_meas, mask, information, block_dim):
        self.block = block
        self.t_meas = t_meas
        self.mask = np.asarray(mask, dtype=bool)
        self.weight = information
        self.block_dim = block_dim

    def error(self, state):
        return pose_meas_error(state.poses[self.block], self.t_meas, self.mask)

    def linearize(self, state):
        e = pose_meas_error(state.poses[self.block], self.t_meas, self.mask)
        j_pose = pose_meas_jacobian(state.poses[self.block], self.t_meas, self.mask)
        jac = np.zeros((j_pose.shape[0], self.block_dim))
        jac[:, :6] = j_pose
        return FactorEvaluation(e, {self.block: jac}, self.weight)


class FbgFactor:
    """Unary four-core strain factor on a robot node."""

    def __init__(self, block, y_meas, geometry, mask, information):
        self.block = block
        self.y_meas = np.asarray(y_meas, dtype=float)
        self.geometry = geometry
        self.mask = np.asarray(mask, dtype=bool)
        self.weight = information

    def error(self, state):
        return fbg_error(self.y_meas, state.strains[self.block], self.geometry, self.mask)

    def linearize(self, state):
        eps = state.strains[self.block]
        e = fbg_error(self.y_meas, eps, self.geometry, self.mask)
        jac = fbg_jacobian(eps, self.geometry, self.mask)
        return FactorEvaluation(e, {self.block: jac}, self.weight)


class CouplingFactor:
    """Binary loop-closure factor between two pose-bearing blocks."""

    def __init__(self, block_a, block_b, offset_a, offset_b, mask, information,
                 dim_a, dim_b):
        self.block_a = block_a
        self.block_b = block_b
        self.offset_a = offset_a
        self.offset_b = offset_b
        self.mask = np.asarray(mask, dtype=bool)
        self.weight = information
        self.dim_a = dim_a
        self.dim_b = dim_b

    def error(self, state):
        return coupling_error(state.poses[self.block_a], state.poses[self.block_b],
                              self.offset_a, self.offset_b, self.mask)

    def linearize(self, state):
        t_a = state.poses[self.block_a]
        t_b = state.poses[self.block_b]
        e = coupling_error(t_a, t_b, self.offset_a, self.offset_b, self.mask)
        e_a, e_b = coupling_jacobian(t_a, t_b, self.offset_a, self.offset_b, self.mask)
        jac_a = np.zeros((e_a.shape[0], self.dim_a))
        jac_a[:, :6] = e_a
        jac_b = np.zeros((e_b.shape[0], self.dim_b))
        jac_b[:, :6] = e_b
        if self.block_a == self.block_b:
            # Degenerate self-coupling: merge the two pose blocks.
            return FactorEvaluation(e, {self.block_a: jac_a + jac_b}, self.weight)
        return FactorEvaluation(e, {self.block_a: jac_a, self.block_b: jac_b}, self.weight)
