"""Sparse Gauss-Newton solver: assembly, solve, posterior and interpolation.

The solver owns its problem exclusively for the duration of a solve; factor
evaluation is pure given a state snapshot. Masked (boundary-condition) DOFs
are removed from the active index set, so their state entries are
bit-identical before and after solving.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .factors import (
    CouplingFactor,
    FbgFactor,
    PoseMeasurementFactor,
    PriorFactor,
    PriorKernel,
    process_noise,
)
from .liegroup import (
    adjoint,
    curly6,
    exp_se3,
    left_jacobian,
    left_jacobian_inv,
    log_se3,
    pose_inverse,
    renormalize_pose,
)
from .sparse import BlockCholesky, BlockSparseSystem, UnderConstrainedError, order_blocks

__all__ = [
    "BlockState", "PosteriorEstimate", "SolveDiagnostics", "IterationRecord",
    "StalledError", "NumericalFailureError", "UnderConstrainedError",
    "assemble", "build_factors", "build_initial_state", "gauss_newton",
    "extract_covariance", "interpolate", "order_blocks", "sparse_cholesky_solve",
]

# Diagonal damping floor used for the single retry when a pivot fails
# mid-iteration (e.g. at the fiber twist singularity).
DAMPING_FLOOR = 1e-10


class StalledError(RuntimeError):
    """Line search exhausted without a cost decrease."""

    def __init__(self, iteration, cost):
        self.iteration = iteration
        self.cost = cost
        super().__init__(
            f"line search stalled at iteration {iteration} (cost {cost:.6g})")


class NumericalFailureError(RuntimeError):
    """Cost became non-finite; the iteration diverged."""


class BlockState:
    """Flat per-block state: every block has a pose, nodes also a strain."""

    __slots__ = ("poses", "strains")

    def __init__(self, poses, strains):
        self.poses = poses
        self.strains = strains

    def copy(self):
        return BlockState([p.copy() for p in self.poses],
                          [s.copy() if s is not None else None for s in self.strains])


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    step_norm: float
    step_scale: float


@dataclass
class SolveDiagnostics:
    iterations: list = field(default_factory=list)
    converged: bool = False
    termination: str = ""
    final_cost: float = np.nan
    final_step_norm: float = np.nan
    timings_ms: dict = field(default_factory=dict)

    @property
    def iteration_count(self):
        return len(self.iterations)


class ProblemStructure:
    """Stacking-aligned solver bookkeeping: factors, masks, system layout."""

    def __init__(self, problem):
        self.problem = problem
        self.stacking = problem.stacking
        masks = problem.fixed_masks()
        self.active_idx = []
        for i, block in enumerate(self.stacking.blocks):
            locked = masks.get(i)
            if locked is None:
                self.active_idx.append(np.arange(block.dim))
            else:
                self.active_idx.append(np.flatnonzero(~locked))
        self.active_dims = [len(a) for a in self.active_idx]
        self.factors = build_factors(problem)

    def new_system(self):
        return BlockSparseSystem(self.active_dims, self.stacking.labels())

    def assemble_into(self, system, state):
        """Accumulate all factors at ``state``; returns the cost at ``state``."""
        system.reset()
        cost = 0.0
        active = self.active_idx
        for factor in self.factors:
            ev = factor.linearize(state)
            w = ev.weight
            we = w @ ev.error
            cost += 0.5 * float(ev.error @ we)
            items = [(b, jac[:, active[b]]) for b, jac in ev.jacobians.items()
                     if len(active[b])]
            for idx, (b, jac) in enumerate(items):
                wj = w @ jac
                system.add_diag(b, jac.T @ wj)
                system.add_rhs(b, -(jac.T @ we))
                for b2, jac2 in items[idx + 1:]:
                    if b2 != b:
                        system.add_off_diag(b2, b, jac2.T @ wj)
        return cost

    def cost(self, state):
        out = 0.0
        for factor in self.factors:
            e = factor.error(state)
            out += 0.5 * float(e @ (factor.weight @ e))
        return out


def build_factors(problem):
    """Instantiate every factor of the problem in stacking order."""
    topo = problem.topology
    hyper = problem.hyperparameters
    stacking = problem.stacking
    factors = []
    for robot in topo.robots:
        kernel = PriorKernel(hyper.qc * robot.qc_scale)
        s = robot.node_arclengths
        for k in range(1, robot.node_count):
            ds = float(s[k] - s[k - 1])
            factors.append(PriorFactor(
                stacking.block_of_node(robot.id, k - 1),
                stacking.block_of_node(robot.id, k),
                ds, kernel.interval_information(ds)))
    for m in problem.measurements.pose_measurements:
        block = stacking.block_of(m.target)
        dim = stacking.blocks[block].dim
        cov = m.covariance
        if cov is None:
            cov = hyper.robot_pose_cov if m.target.kind == "robot" else hyper.body_pose_cov
        mask = np.asarray(m.dof_mask, dtype=bool)
        sub = cov[np.ix_(mask, mask)]
        factors.append(PoseMeasurementFactor(block, m.matrix, mask,
                                             np.linalg.inv(sub), dim))
    for m in problem.measurements.fbg_measurements:
        robot = topo.robot(m.robot)
        if robot.fbg is None:
            raise mdl.SchemaError(f"robot {m.robot} has no fiber geometry")
        cov = m.covariance if m.covariance is not None else hyper.fbg_cov
        mask = np.asarray(m.dof_mask, dtype=bool)
        sub = cov[np.ix_(mask, mask)]
        factors.append(FbgFactor(stacking.block_of_node(m.robot, m.node),
                                 m.values, robot.fbg, mask, np.linalg.inv(sub)))
    for c in topo.couplings:
        block_a = stacking.block_of(c.side_a)
        block_b = stacking.block_of(c.side_b)
        cov = c.covariance if c.covariance is not None else hyper.coupling_cov
        mask = np.asarray(c.dof_mask, dtype=bool)
        sub = cov[np.ix_(mask, mask)]
        factors.append(CouplingFactor(
            block_a, block_b, c.offset_a, c.offset_b, mask, np.linalg.inv(sub),
            stacking.blocks[block_a].dim, stacking.blocks[block_b].dim))
    return factors


# ---------------------------------------------------------------------------
# State initialization and conversion
# ---------------------------------------------------------------------------

def build_initial_state(problem):
    """Straight rods from their base poses; bodies placed by loop closure."""
    topo = problem.topology
    stacking = problem.stacking
    poses = [None] * len(stacking)
    strains = [None] * len(stacking)
    for robot in topo.robots:
        node_poses = mdl.straight_rod_poses(robot)
        for k in range(robot.node_count):
            b = stacking.block_of_node(robot.id, k)
            poses[b] = node_poses[k]
            strains[b] = mdl.NOMINAL_STRAIN.copy()
    # Rigid bodies: average the loop-closure predictions from couplings whose
    # other side is already placed; iterate for body-to-body chains.
    unresolved = {b.id for b in topo.rigid_bodies}
    for body in topo.rigid_bodies:
        if body.initial_pose is not None:
            poses[stacking.block_of_body(body.id)] = body.initial_pose.copy()
            unresolved.discard(body.id)
    while unresolved:
        progressed = False
        for body_id in sorted(unresolved):
            block = stacking.block_of_body(body_id)
            predictions = []
            for c in topo.couplings:
                for here, there in ((c.side_b, c.side_a), (c.side_a, c.side_b)):
                    if here.kind != "body" or here.id != body_id:
                        continue
                    other = stacking.block_of(there)
                    if poses[other] is None:
                        continue
                    if here is c.side_b:
                        predictions.append(c.offset_b @ pose_inverse(c.offset_a) @ poses[other])
                    else:
                        predictions.append(c.offset_a @ pose_inverse(c.offset_b) @ poses[other])
            if predictions:
                anchor = predictions[0]
                if len(predictions) == 1:
                    poses[block] = renormalize_pose(anchor)
                else:
                    mean = np.zeros(6)
                    for p in predictions[1:]:
                        mean += log_se3(p @ pose_inverse(anchor))
                    poses[block] = renormalize_pose(exp_se3(mean / len(predictions)) @ anchor)
                unresolved.discard(body_id)
                progressed = True
        if not progressed:
            for body_id in sorted(unresolved):
                poses[stacking.block_of_body(body_id)] = np.eye(4)
            break
    return BlockState(poses, strains)


def state_from_system(problem, system_state):
    stacking = problem.stacking
    poses = [None] * len(stacking)
    strains = [None] * len(stacking)
    for robot in problem.topology.robots:
        rp = system_state.robot_poses[robot.id]
        rs = system_state.robot_strains[robot.id]
        for k in range(robot.node_count):
            b = stacking.block_of_node(robot.id, k)
            poses[b] = np.array(rp[k], dtype=float)
            strains[b] = np.array(rs[k], dtype=float)
    for body in problem.topology.rigid_bodies:
        poses[stacking.block_of_body(body.id)] = np.array(
            system_state.body_poses[body.id], dtype=float)
    return BlockState(poses, strains)


def state_to_system(problem, state):
    robot_poses = {}
    robot_strains = {}
    body_poses = {}
    stacking = problem.stacking
    for robot in problem.topology.robots:
        k_count = robot.node_count
        rp = np.empty((k_count, 4, 4))
        rs = np.empty((k_count, 6))
        for k in range(k_count):
            b = stacking.block_of_node(robot.id, k)
            rp[k] = state.poses[b]
            rs[k] = state.strains[b]
        robot_poses[robot.id] = rp
        robot_strains[robot.id] = rs
    for body in problem.topology.rigid_bodies:
        body_poses[body.id] = state.poses[stacking.block_of_body(body.id)].copy()
    return mdl.SystemState(robot_poses, robot_strains, body_poses)


# ---------------------------------------------------------------------------
# Assembly and linear solve (module-level entry points)
# ---------------------------------------------------------------------------

def assemble(state, problem, structure=None):
    """Assemble the normal equations at ``state`` into a fresh system."""
    if structure is None:
        structure = ProblemStructure(problem)
    system = structure.new_system()
    cost = structure.assemble_into(system, state)
    return system, structure, cost


def sparse_cholesky_solve(system, order=None):
    """One-shot solve of an assembled system; returns per-block increments."""
    if order is None:
        order = order_blocks(system, "natural")
    chol = BlockCholesky(system, order).factorize()
    return chol.solve()


# ---------------------------------------------------------------------------
# Gauss-Newton
# ---------------------------------------------------------------------------

def _apply_step(state, delta_active, structure, alpha):
    out = state.copy()
    for b, idx in enumerate(structure.active_idx):
        if not len(idx):
            continue
        full = np.zeros(structure.stacking.blocks[b].dim)
        full[idx] = alpha * delta_active[b]
        pose_part = full[:6]
        if np.any(idx < 6):
            out.poses[b] = renormalize_pose(exp_se3(pose_part) @ out.poses[b])
        if out.strains[b] is not None:
            strain_idx = idx[idx >= 6]
            if len(strain_idx):
                out.strains[b][strain_idx - 6] += full[strain_idx]
    return out


def gauss_newton(problem, initial_state=None, order_heuristic="natural"):
    """Iterate assemble/solve/line-search until the step norm converges.

    Returns a :class:`PosteriorEstimate`; covariance extraction happens
    lazily on first access so timing the solve excludes it.
    """
    t_start = time.perf_counter()
    settings = problem.hyperparameters.gauss_newton
    ls = settings.line_search
    structure = ProblemStructure(problem)
    if initial_state is None:
        state = build_initial_state(problem)
    elif isinstance(initial_state, BlockState):
        state = initial_state.copy()
    else:
        state = state_from_system(problem, initial_state)

    system = structure.new_system()
    chol = None
    diagnostics = SolveDiagnostics()
    t_assembly = 0.0
    t_factor = 0.0
    cost = np.nan

    for it in range(1, settings.max_iterations + 1):
        t0 = time.perf_counter()
        cost = structure.assemble_into(system, state)
        t_assembly += time.perf_counter() - t0
        if not np.isfinite(cost):
            raise NumericalFailureError(
                f"cost is not finite at iteration {it}")
        t0 = time.perf_counter()
        if chol is None:
            order = order_blocks(system, order_heuristic)
            chol = BlockCholesky(system, order)
        try:
            chol.factorize()
        except UnderConstrainedError:
            # One damped retry: rescues benign singular loci (e.g. the fiber
            # twist column at w1 = 0) without hiding real gauge freedom.
            scale = max((float(np.max(np.abs(d))) if d.size else 0.0
                         for d in system.diag), default=0.0)
            chol.factorize(damping=max(DAMPING_FLOOR, DAMPING_FLOOR * scale))
        delta = chol.solve()
        t_factor += time.perf_counter() - t0
        step_norm = max((float(np.max(np.abs(d))) if d.size else 0.0)
                        for d in delta)
        if step_norm < settings.convergence_norm:
            state = _apply_step(state, delta, structure, 1.0)
            diagnostics.iterations.append(IterationRecord(it, cost, step_norm, 1.0))
            diagnostics.converged = True
            diagnostics.termination = "converged"
            break
        slope = -sum(float(system.rhs[b] @ delta[b]) for b in range(len(delta)))
        # Secondary stop: the predicted decrease is below evaluation noise,
        # so no further meaningful progress is possible (flat directions can
        # keep the raw step norm above the threshold indefinitely).
        if -slope <= settings.min_relative_decrease * (1.0 + cost):
            diagnostics.iterations.append(IterationRecord(it, cost, step_norm, 0.0))
            diagnostics.converged = True
            diagnostics.termination = "converged_cost"
            break
        # Backtracking line search with an Armijo acceptance test; the
        # roundoff allowance keeps sums of thousands of residual terms from
        # vetoing genuinely flat steps.
        allowance = 1e-12 * (1.0 + abs(cost))
        alpha = ls.initial_step
        accepted = False
        while alpha >= ls.min_step:
            candidate = _apply_step(state, delta, structure, alpha)
            new_cost = structure.cost(candidate)
            if np.isfinite(new_cost) and \
                    new_cost <= cost + ls.armijo * alpha * slope + allowance:
                accepted = True
                break
            alpha *= ls.shrink
        if not accepted:
            # The analytic prior Jacobian is a first-order device, so near a
            # noisy optimum the computed direction can stop descending once
            # the remaining predicted decrease is within its accuracy. Treat
            # that as convergence; anything larger is a genuine stall.
            if -slope <= settings.stall_relative_decrease * (1.0 + cost):
                diagnostics.iterations.append(IterationRecord(it, cost, step_norm, 0.0))
                diagnostics.converged = True
                diagnostics.termination = "stagnated"
                break
            diagnostics.termination = "stalled"
            diagnostics.final_cost = cost
            raise StalledError(it, cost)
        state = candidate
        diagnostics.iterations.append(IterationRecord(it, new_cost, step_norm, alpha))
    else:
        diagnostics.termination = "max_iterations"

    # Final linearization at the converged operating point: the posterior
    # information used for covariance extraction.
    t0 = time.perf_counter()
    final_cost = structure.assemble_into(system, state)
    t_assembly += time.perf_counter() - t0
    t0 = time.perf_counter()
    if chol is None:
        chol = BlockCholesky(system, order_blocks(system, order_heuristic))
    try:
        chol.factorize()
    except UnderConstrainedError:
        scale = max((float(np.max(np.abs(d))) if d.size else 0.0
                     for d in system.diag), default=0.0)
        chol.factorize(damping=max(DAMPING_FLOOR, DAMPING_FLOOR * scale))
    t_factor += time.perf_counter() - t0

    diagnostics.final_cost = final_cost
    diagnostics.final_step_norm = (diagnostics.iterations[-1].step_norm
                                   if diagnostics.iterations else 0.0)
    diagnostics.timings_ms = {
        "assembly": 1e3 * t_assembly,
        "factorization": 1e3 * t_factor,
        "total": 1e3 * (time.perf_counter() - t_start),
    }
    return PosteriorEstimate(problem, structure, state, chol, diagnostics)


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------

def _embed_cov(block_dim, idx_r, idx_c, active_cov):
    out = np.zeros((block_dim[0], block_dim[1]))
    if len(idx_r) and len(idx_c):
        out[np.ix_(idx_r, idx_c)] = active_cov
    return out


class PosteriorEstimate:
    """Converged mean state with lazily extracted covariance blocks."""

    def __init__(self, problem, structure, state, chol, diagnostics):
        self.problem = problem
        self._structure = structure
        self._state = state
        self._chol = chol
        self.diagnostics = diagnostics
        self.mean = state_to_system(problem, state)
        self._diag_cov = None

    def _block_cov(self, i, j=None):
        if j is None:
            j = i
        dims = (self._structure.stacking.blocks[i].dim,
                self._structure.stacking.blocks[j].dim)
        active = self._chol.inverse_block(i, j)
        return _embed_cov(dims, self._structure.active_idx[i],
                          self._structure.active_idx[j], active)

    def node_covariance(self, robot_id, node):
        b = self._structure.stacking.block_of_node(robot_id, node)
        return self._block_cov(b)

    def body_covariance(self, body_id):
        b = self._structure.stacking.block_of_body(body_id)
        return self._block_cov(b)

    def pair_covariance(self, robot_id, node):
        """Joint 24x24 covariance of nodes (node, node+1) of one robot."""
        stacking = self._structure.stacking
        b0 = stacking.block_of_node(robot_id, node)
        b1 = stacking.block_of_node(robot_id, node + 1)
        out = np.zeros((24, 24))
        out[:12, :12] = self._block_cov(b0)
        out[12:, 12:] = self._block_cov(b1)
        cross = self._block_cov(b1, b0)  # (12, 12), rows b1 cols b0
        out[12:, :12] = cross
        out[:12, 12:] = cross.T
        return out

    @property
    def node_covariances(self):
        if self._diag_cov is None:
            covs = {}
            for robot in self.problem.topology.robots:
                for k in range(robot.node_count):
                    covs[(robot.id, k)] = self.node_covariance(robot.id, k)
            for body in self.problem.topology.rigid_bodies:
                covs[(body.id, None)] = self.body_covariance(body.id)
            self._diag_cov = covs
        return self._diag_cov

    def dense_covariance(self):
        """Full dense posterior covariance (tests and small problems only)."""
        h, _ = self._chol.system.to_dense()
        return np.linalg.inv(h)


def extract_covariance(posterior, requests=None, dense=False):
    """Covariance blocks of the converged system.

    ``requests`` is a list of block keys: ``(robot_id, node)`` for nodes,
    ``(body_id, None)`` for bodies, or a pair of keys for a cross block.
    ``None`` requests every diagonal block. With ``dense=True`` the full
    matrix is inverted instead (oracle path for tests).
    """
    if dense:
        full = posterior.dense_covariance()
        offsets = np.concatenate(
            [[0], np.cumsum(posterior._structure.active_dims)]).astype(int)
        return full, offsets
    if requests is None:
        return dict(posterior.node_covariances)
    stacking = posterior._structure.stacking
    out = {}
    for req in requests:
        if len(req) == 2 and isinstance(req[0], tuple):
            (ka, kb) = req
            ba = stacking.index[ka]
            bb = stacking.index[kb]
            out[req] = posterior._block_cov(ba, bb)
        else:
            out[req] = posterior._block_cov(stacking.index[req])
    return out


# ---------------------------------------------------------------------------
# Continuous interpolation
# ---------------------------------------------------------------------------

def _interp_weights(tau, d):
    """Scalar 2x2 interpolation weights (power-spectral density cancels)."""
    r = tau / d
    psi11 = r * r * (3.0 - 2.0 * r)
    psi12 = tau * r * (r - 1.0)
    psi21 = 6.0 * r * (1.0 - r) / d
    psi22 = r * (3.0 * r - 2.0)
    lam11 = 1.0 - psi11
    lam12 = tau - d * psi11 - psi12
    lam21 = -psi21
    lam22 = 1.0 - d * psi21 - psi22
    return (lam11, lam12, lam21, lam22), (psi11, psi12, psi21, psi22)


def interpolate(posterior, robot_id, s, with_covariance=True):
    """Query the continuous posterior of one rod at arclength ``s``.

    Returns ``(pose, strain, covariance)`` where the covariance is in the
    same perturbation coordinates as the node covariances. At node
    arclengths the node estimate is returned exactly.
    """
    robot = posterior.problem.topology.robot(robot_id)
    arcs = robot.node_arclengths
    if s < arcs[0] - 1e-12 or s > arcs[-1] + 1e-12:
        raise ValueError(f"arclength {s} outside [0, {arcs[-1]}]")
    poses = posterior.mean.robot_poses[robot_id]
    strains = posterior.mean.robot_strains[robot_id]
    hit = np.flatnonzero(np.abs(arcs - s) <= 1e-12)
    if len(hit):
        k = int(hit[0])
        cov = posterior.node_covariance(robot_id, k) if with_covariance else None
        return poses[k].copy(), strains[k].copy(), cov
    k = int(np.searchsorted(arcs, s) - 1)
    d = float(arcs[k + 1] - arcs[k])
    tau = float(s - arcs[k])

    t_k = poses[k]
    eps_k = strains[k]
    eps_k1 = strains[k + 1]
    xi = log_se3(poses[k + 1] @ pose_inverse(t_k))
    j_inv_k1 = left_jacobian_inv(xi)
    psi_k1 = j_inv_k1 @ eps_k1

    (lam11, lam12, lam21, lam22), (psi11, psi12, psi21, psi22) = _interp_weights(tau, d)
    xi_s = lam12 * eps_k + psi11 * xi + psi12 * psi_k1
    psi_s = lam22 * eps_k + psi21 * xi + psi22 * psi_k1

    j_s = left_jacobian(xi_s)
    pose_s = renormalize_pose(exp_se3(xi_s) @ t_k)
    strain_s = j_s @ psi_s
    if not with_covariance:
        return pose_s, strain_s, None

    eye = np.eye(6)
    # Local-variable Jacobians of the segment endpoints wrt the node pair.
    g_k = np.zeros((12, 24))
    g_k[6:, 6:12] = eye
    g_k1 = np.zeros((12, 24))
    t_cal = adjoint(exp_se3(xi))
    j_bar = 0.5 * curly6(eps_k1) @ j_inv_k1
    g_k1[:6, :6] = -j_inv_k1 @ t_cal
    g_k1[:6, 12:18] = j_inv_k1
    g_k1[6:, :6] = -j_bar @ t_cal
    g_k1[6:, 12:18] = j_bar
    g_k1[6:, 18:] = j_inv_k1

    b = np.zeros((12, 24))
    b[:6] = lam11 * g_k[:6] + lam12 * g_k[6:] + psi11 * g_k1[:6] + psi12 * g_k1[6:]
    b[6:] = lam21 * g_k[:6] + lam22 * g_k[6:] + psi21 * g_k1[:6] + psi22 * g_k1[6:]

    # Map local (xi, psi) perturbations back to (pose, strain) at s.
    c = np.zeros((12, 12))
    c[:6, :6] = j_s
    c[6:, :6] = -0.5 * j_s @ curly6(strain_s)
    c[6:, 6:] = j_s
    d_map = np.zeros((12, 24))
    d_map[:6, :6] = adjoint(exp_se3(xi_s))

    qc = posterior.problem.hyperparameters.qc * robot.qc_scale
    q_tau = process_noise(tau, qc)
    phi_right = np.eye(12)
    phi_right[:6, 6:] = (d - tau) * eye
    q_d_inv_pattern = np.linalg.inv(process_noise(d, qc))
    psi_full = q_tau @ phi_right.T @ q_d_inv_pattern
    q_cond = q_tau - psi_full @ phi_right @ q_tau
    q_cond = 0.5 * (q_cond + q_cond.T)

    p_pair = posterior.pair_covariance(robot_id, k)
    m_map = c @ b + d_map
    cov = m_map @ p_pair @ m_map.T + c @ q_cond @ c.T
    return pose_s, strain_s, 0.5 * (cov + cov.T)
