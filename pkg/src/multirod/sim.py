"""Synthetic ground truth and sensor data for the built-in topology zoo.

Ground-truth shapes come from piecewise-constant or smooth polynomial strain
profiles integrated exactly (exponential composition) or with a 4th-order
Magnus scheme. Coupling offsets of each scenario are derived from the truth
configuration, so every generated dataset closes its loops exactly.

Sensor simulation applies the estimator's own measurement models and then
adds noise: strain noise additively, pose noise through the Lie algebra
(``exp(n^) T``). Datasets are bit-reproducible for a fixed seed (NumPy PCG64
via ``default_rng``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .factors import FbgGeometry, coupling_error, fbg_model
from .liegroup import exp_se3, hat6, log_se3, pose_inverse, renormalize_pose, vee6
from .model import (
    NOMINAL_STRAIN,
    BoundaryCondition,
    CouplingJoint,
    EndpointRef,
    EstimationProblem,
    FbgMeasurement,
    Hyperparameters,
    MeasurementSet,
    PoseMeasurement,
    RigidBodySpec,
    RobotSpec,
    SystemState,
    SystemTopology,
)

DEFAULT_FBG = FbgGeometry(35e-6, (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0))

_GAUSS_OFFSETS = (0.5 - np.sqrt(3.0) / 6.0, 0.5 + np.sqrt(3.0) / 6.0)


class InconsistentScenarioError(ValueError):
    """Couplings of a scenario cannot close on its ground truth."""


@dataclass(frozen=True)
class NoiseScales:
    sigma_pos: float = 0.002      # m
    sigma_rot: float = 0.05       # rad
    sigma_strain: float = 10e-6   # unitless strain

    def validate(self):
        if min(self.sigma_pos, self.sigma_rot, self.sigma_strain) < 0.0:
            raise ValueError("noise scales must be non-negative")


class StrainProfile:
    """Strain field over one rod: constant spans or polynomial in s/L."""

    def __init__(self, length, spans=None, coeffs=None):
        self.length = float(length)
        if (spans is None) == (coeffs is None):
            raise ValueError("provide exactly one of spans or coeffs")
        if spans is not None:
            ends = np.array([e for e, _ in spans], dtype=float)
            if abs(ends[-1] - length) > 1e-12 or np.any(np.diff(ends) <= 0):
                raise ValueError("spans must partition [0, length]")
            self.span_ends = ends
            self.span_strains = np.array([s for _, s in spans], dtype=float)
            self.coeffs = None
        else:
            self.coeffs = np.asarray(coeffs, dtype=float).reshape(-1, 6)
            self.span_ends = None

    @property
    def piecewise_constant(self):
        return self.coeffs is None

    def value(self, s):
        if self.piecewise_constant:
            idx = int(np.searchsorted(self.span_ends, s, side="right"))
            idx = min(idx, len(self.span_ends) - 1)
            return self.span_strains[idx].copy()
        u = s / self.length
        out = np.zeros(6)
        for i, c in enumerate(self.coeffs):
            out += c * u ** i
        return out


def constant_profile(length, strain):
    return StrainProfile(length, spans=[(length, np.asarray(strain, dtype=float))])


def ramp_profile(length, peak):
    """Smooth profile rising from nominal at the base: eps + peak * (s/L)^2."""
    peak = np.asarray(peak, dtype=float)
    coeffs = np.zeros((3, 6))
    coeffs[0] = NOMINAL_STRAIN
    coeffs[2] = peak
    return StrainProfile(length, coeffs=coeffs)


def bump_profile(length, peak):
    """Smooth profile nominal at both ends: eps + peak * 16 u^2 (1-u)^2."""
    peak = np.asarray(peak, dtype=float)
    coeffs = np.zeros((5, 6))
    coeffs[0] = NOMINAL_STRAIN
    coeffs[2] = 16.0 * peak
    coeffs[3] = -32.0 * peak
    coeffs[4] = 16.0 * peak
    return StrainProfile(length, coeffs=coeffs)



def _shaped(length, peak, smooth, shape="ramp"):
    """Mode-dependent profile: smooth polynomial or its constant analogue.

    The constant analogue keeps prior-only problems exactly consistent: a
    constant-strain truth zeroes every prior error, so the measurement-free
    optimum closes all couplings exactly.
    """
    peak = np.asarray(peak, dtype=float)
    if smooth:
        return ramp_profile(length, peak) if shape == "ramp" else bump_profile(length, peak)
    return constant_profile(length, NOMINAL_STRAIN + 0.45 * peak)

@dataclass
class GroundTruthScenario:
    name: str
    description: str
    topology: SystemTopology
    profiles: dict                      # robot id -> StrainProfile
    noise: NoiseScales = field(default_factory=NoiseScales)
    pose_targets: list = field(default_factory=list)   # EndpointRefs measured by default
    fixed_base_robots: list = field(default_factory=list)
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)

    def validate(self):
        self.noise.validate()
        for r in self.topology.robots:
            p = self.profiles.get(r.id)
            if p is None or abs(p.length - r.length) > 1e-12:
                raise ValueError(f"scenario {self.name}: profile missing or "
                                 f"mismatched for robot {r.id}")


# ---------------------------------------------------------------------------
# Ground-truth propagation
# ---------------------------------------------------------------------------

def _magnus_step(profile, s0, h, t):
    """One 4th-order Magnus step for dT/ds = hat(eps(s)) T."""
    c1 = s0 + h * _GAUSS_OFFSETS[0]
    c2 = s0 + h * _GAUSS_OFFSETS[1]
    a1 = hat6(profile.value(c1))
    a2 = hat6(profile.value(c2))
    omega = 0.5 * h * (a1 + a2) + (np.sqrt(3.0) / 12.0) * h * h * (a2 @ a1 - a1 @ a2)
    return exp_se3(vee6(omega)) @ t


def _integrate_interval(profile, s0, s1, t, max_step):
    if profile.piecewise_constant:
        edges = [e for e in profile.span_ends if s0 < e < s1]
        for e in edges + [s1]:
            seg = e - s0
            if seg > 0.0:
                t = exp_se3(seg * profile.value(0.5 * (s0 + e))) @ t
            s0 = e
        return t
    steps = max(1, int(np.ceil((s1 - s0) / max_step)))
    h = (s1 - s0) / steps
    for i in range(steps):
        t = _magnus_step(profile, s0 + i * h, h, t)
    return renormalize_pose(t)


def propagate_ground_truth(scenario, max_step=0.001):
    """Node poses/strains of every robot plus loop-closed body poses."""
    scenario.validate()
    topo = scenario.topology
    robot_poses = {}
    robot_strains = {}
    for robot in topo.robots:
        profile = scenario.profiles[robot.id]
        arcs = robot.node_arclengths
        poses = np.empty((robot.node_count, 4, 4))
        strains = np.empty((robot.node_count, 6))
        poses[0] = robot.base_pose
        strains[0] = profile.value(arcs[0])
        for k in range(1, robot.node_count):
            poses[k] = _integrate_interval(profile, arcs[k - 1], arcs[k],
                                           poses[k - 1], max_step)
            strains[k] = profile.value(arcs[k])
        robot_poses[robot.id] = poses
        robot_strains[robot.id] = strains

    body_poses = {}
    state = SystemState(robot_poses, robot_strains, body_poses)

    def pose_of(ref):
        if ref.kind == "robot":
            return robot_poses[ref.id][ref.node]
        return body_poses.get(ref.id)

    unresolved = set(topo.body_ids())
    while unresolved:
        progressed = False
        for body_id in sorted(unresolved):
            predictions = []
            for c in topo.couplings:
                for here, there, off_h, off_t in (
                        (c.side_b, c.side_a, c.offset_b, c.offset_a),
                        (c.side_a, c.side_b, c.offset_a, c.offset_b)):
                    if here.kind != "body" or here.id != body_id:
                        continue
                    other = pose_of(there)
                    if other is None:
                        continue
                    predictions.append(off_h @ pose_inverse(off_t) @ other)
            if predictions:
                anchor = predictions[0]
                for p in predictions[1:]:
                    gap = np.max(np.abs(log_se3(p @ pose_inverse(anchor))))
                    if gap > 1e-6:
                        raise InconsistentScenarioError(
                            f"body {body_id}: loop-closure predictions disagree by {gap:.3e}")
                body_poses[body_id] = renormalize_pose(anchor)
                unresolved.discard(body_id)
                progressed = True
        if not progressed:
            raise InconsistentScenarioError(
                f"bodies {sorted(unresolved)} are not reachable through couplings")

    for c in topo.couplings:
        e = coupling_error(pose_of(c.side_a), pose_of(c.side_b),
                           c.offset_a, c.offset_b)
        if np.max(np.abs(e)) > 1e-6:
            raise InconsistentScenarioError(
                f"coupling {c.id} does not close on the ground truth "
                f"(residual {np.max(np.abs(e)):.3e})")
    return state


# ---------------------------------------------------------------------------
# Measurement simulation
# ---------------------------------------------------------------------------

def simulate_measurements(truth, scenario, seed=0, pose_targets=None,
                          fbg_nodes="all"):
    """Noisy measurements from the ground truth; deterministic per seed.

    ``pose_targets``: None uses the scenario's default targets, "all" measures
    every node and body. ``fbg_nodes``: "all" measures each fiber-equipped
    robot at every node, "none" disables strain measurements.
    """
    rng = np.random.default_rng(seed)
    noise = scenario.noise
    out = MeasurementSet()
    topo = scenario.topology

    if pose_targets == "all":
        targets = []
        for r in topo.robots:
            targets.extend(EndpointRef("robot", r.id, k) for k in range(r.node_count))
        targets.extend(EndpointRef("body", b.id) for b in topo.rigid_bodies)
    elif pose_targets is None:
        targets = list(scenario.pose_targets)
    else:
        targets = list(pose_targets)

    sigma6 = np.array([noise.sigma_pos] * 3 + [noise.sigma_rot] * 3)
    for ref in targets:
        if ref.kind == "robot":
            t_true = truth.robot_poses[ref.id][ref.node]
        else:
            t_true = truth.body_poses[ref.id]
        n = rng.normal(0.0, 1.0, 6) * sigma6
        t_meas = renormalize_pose(exp_se3(n) @ t_true)
        out.pose_measurements.append(PoseMeasurement(ref, t_meas))

    if fbg_nodes != "none":
        for r in topo.robots:
            if r.fbg is None:
                continue
            strains = truth.robot_strains[r.id]
            for k in range(r.node_count):
                y = fbg_model(strains[k], r.fbg)
                y = y + rng.normal(0.0, 1.0, 4) * noise.sigma_strain
                out.fbg_measurements.append(FbgMeasurement(r.id, k, y))
    return out


# ---------------------------------------------------------------------------
# Scenario construction helpers
# ---------------------------------------------------------------------------

def _trans(x, y, z):
    t = np.eye(4)
    t[:3, 3] = (x, y, z)
    return t


def _derive_coupling(cid, side_a, side_b, pose_a, pose_b, dof_mask=None,
                     covariance=None):
    """Joint with frame at side a; side-b offset derived from the truth."""
    offset_a = np.eye(4)
    offset_b = renormalize_pose(pose_b @ pose_inverse(pose_a))
    mask = np.ones(6, dtype=bool) if dof_mask is None else np.asarray(dof_mask, dtype=bool)
    return CouplingJoint(cid, side_a, side_b, offset_a, offset_b, mask, covariance)


def _mean_pose(poses):
    anchor = poses[0]
    if len(poses) == 1:
        return anchor.copy()
    acc = np.zeros(6)
    for p in poses[1:]:
        acc += log_se3(p @ pose_inverse(anchor))
    return renormalize_pose(exp_se3(acc / len(poses)) @ anchor)


def _uniform_nodes(length, count):
    return np.linspace(0.0, length, count)


def _robot(rid, length, count, base_pose, fbg=DEFAULT_FBG, kirchhoff=True,
           qc_scale=1.0):
    return RobotSpec(rid, length, _uniform_nodes(length, count), base_pose,
                     fbg=fbg, kirchhoff_lock=kirchhoff, qc_scale=qc_scale)


def _end_poses(robots, profiles, max_step=0.001):
    """Truth pose of every robot node, keyed by (robot id, node)."""
    out = {}
    for r in robots:
        t = r.base_pose
        out[(r.id, 0)] = t
        arcs = r.node_arclengths
        for k in range(1, r.node_count):
            t = _integrate_interval(profiles[r.id], arcs[k - 1], arcs[k], t, max_step)
            out[(r.id, k)] = t
    return out


def _apply_boundary(scenario, boundary):
    """Materialize boundary conditions for a solve profile.

    Both profiles fix the base pose of every world-attached robot; the
    rod strains stay free (the translational components are already locked
    by the Kirchhoff flag). ``prior_only`` is paired with constant-strain
    truths by :func:`build_scenario`, which keeps measurement-free problems
    fully constrained through their couplings.
    """
    if boundary not in ("anchored", "prior_only"):
        raise ValueError(f"unknown boundary profile {boundary!r}")
    topo = scenario.topology
    topo.boundary_conditions = [BoundaryCondition(rid, "proximal", "pose")
                                for rid in scenario.fixed_base_robots]
    return scenario


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

def _two_robot_ee(nodes, bend, smooth, spherical=False):
    length, ee_half = 0.24, 0.05
    k = nodes or 25
    r1 = _robot("robot1", length, k, _trans(0.0, -ee_half, 0.0))
    r2 = _robot("robot2", length, k, _trans(0.0, ee_half, 0.0))
    profiles = {
        "robot1": _shaped(length, bend * np.array([0, 0, 0, 0.45, -0.8, 1.7]), smooth),
        "robot2": _shaped(length, bend * np.array([0, 0, 0, -0.35, 1.1, 1.2]), smooth),
    }
    robots = [r1, r2]
    ends = _end_poses(robots, profiles)
    tip1 = ends[("robot1", k - 1)]
    tip2 = ends[("robot2", k - 1)]
    ee_pose = _mean_pose([tip1, tip2])
    mask = np.array([1, 1, 1, 0, 0, 0], dtype=bool) if spherical else None
    couplings = [
        _derive_coupling("c1", EndpointRef("robot", "robot1", k - 1),
                         EndpointRef("body", "ee"), tip1, ee_pose, mask),
        _derive_coupling("c2", EndpointRef("robot", "robot2", k - 1),
                         EndpointRef("body", "ee"), tip2, ee_pose, mask),
    ]
    topo = SystemTopology(robots, [RigidBodySpec("ee")], couplings)
    kind = "spherical" if spherical else "rigid"
    return GroundTruthScenario(
        name="two_robot_ee" + ("_spherical" if spherical else ""),
        description=(f"Two rods ({kind} joints) sharing an end-effector bar; "
                     "bent-configuration analogue of the tendon-driven study "
                     "(not a reproduction of its kinetostatic ground truth)."),
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("body", "ee")],
        fixed_base_robots=["robot1", "robot2"])


def _two_robot_tip_body(nodes, bend, smooth):
    length = 0.24
    k = nodes or 13
    r1 = _robot("robot1", length, k, _trans(0.0, -0.08, 0.0))
    r2 = _robot("robot2", length, k, _trans(0.0, 0.08, 0.0))
    profiles = {
        "robot1": _shaped(length, bend * np.array([0, 0, 0, 0.5, -1.0, 2.0]), smooth),
        "robot2": _shaped(length, bend * np.array([0, 0, 0, 0.0, 1.2, -1.8]), smooth),
    }
    robots = [r1, r2]
    ends = _end_poses(robots, profiles)
    mid = (k - 1) // 2
    couplings = [_derive_coupling(
        "c1", EndpointRef("robot", "robot2", k - 1),
        EndpointRef("robot", "robot1", mid),
        ends[("robot2", k - 1)], ends[("robot1", mid)])]
    topo = SystemTopology(robots, [], couplings)
    return GroundTruthScenario(
        name="two_robot_tip_body",
        description="Tip of the second rod coupled to the body of the first.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("robot", "robot1", k - 1)],
        fixed_base_robots=["robot1", "robot2"])


def _two_robot_coupled(nodes, bend, smooth, coupling_arclength=0.12):
    length = 0.24
    k = nodes or 13
    r1 = _robot("robot1", length, k, _trans(0.0, -0.03, 0.0))
    r2 = _robot("robot2", length, k, _trans(0.0, 0.03, 0.0))
    profiles = {
        "robot1": _shaped(length, bend * np.array([0, 0, 0, 0.4, -0.8, 1.6]), smooth),
        "robot2": _shaped(length, bend * np.array([0, 0, 0, -0.4, 0.9, 1.4]), smooth),
    }
    robots = [r1, r2]
    ends = _end_poses(robots, profiles)
    arcs = r1.node_arclengths
    node = int(np.argmin(np.abs(arcs - coupling_arclength)))
    node = max(1, node)
    couplings = [_derive_coupling(
        "c1", EndpointRef("robot", "robot1", node),
        EndpointRef("robot", "robot2", node),
        ends[("robot1", node)], ends[("robot2", node)])]
    topo = SystemTopology(robots, [], couplings)
    return GroundTruthScenario(
        name="two_robot_coupled",
        description="Two parallel rods rigidly coupled at one arclength.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("robot", "robot1", k - 1)],
        fixed_base_robots=["robot1", "robot2"])


def _reconfigurable_parallel(nodes, bend, smooth):
    length = 0.2
    k = nodes or 7
    radius = 0.06
    robots = []
    profiles = {}
    for i in range(3):
        ang = 2.0 * np.pi * i / 3.0
        rid = f"robot{i + 1}"
        robots.append(_robot(rid, length, k, _trans(0.0, radius * np.cos(ang),
                                                    radius * np.sin(ang))))
        peak = bend * np.array([0, 0, 0, 0.3, -1.6 * np.cos(ang), -1.6 * np.sin(ang)])
        profiles[rid] = _shaped(length, peak, smooth)
    ends = _end_poses(robots, profiles)
    tips = [ends[(f"robot{i + 1}", k - 1)] for i in range(3)]
    couplings = [
        _derive_coupling("c1", EndpointRef("robot", "robot1", k - 1),
                         EndpointRef("robot", "robot2", k - 1), tips[0], tips[1]),
        _derive_coupling("c2", EndpointRef("robot", "robot2", k - 1),
                         EndpointRef("robot", "robot3", k - 1), tips[1], tips[2]),
    ]
    topo = SystemTopology(robots, [], couplings)
    return GroundTruthScenario(
        name="reconfigurable_parallel",
        description="Three rods joined tip-to-tip in a parallel assembly.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("robot", "robot1", k - 1)],
        fixed_base_robots=["robot1", "robot2", "robot3"])


def _stewart_gough(nodes, bend, smooth):
    length = 0.25
    k = nodes or 8
    radius = 0.08
    robots = []
    profiles = {}
    torsional = np.array([1, 1, 1, 0, 1, 1], dtype=bool)
    for i in range(6):
        ang = 2.0 * np.pi * i / 6.0 + (np.pi / 12.0 if i % 2 else -np.pi / 12.0)
        rid = f"robot{i + 1}"
        robots.append(_robot(rid, length, k, _trans(0.0, radius * np.cos(ang),
                                                    radius * np.sin(ang))))
        peak = bend * np.array([0, 0, 0, 0.1, -1.0 * np.cos(ang), -1.0 * np.sin(ang)])
        profiles[rid] = _shaped(length, peak, smooth)
    ends = _end_poses(robots, profiles)
    tips = [ends[(f"robot{i + 1}", k - 1)] for i in range(6)]
    platform = _mean_pose(tips)
    couplings = [
        _derive_coupling(f"c{i + 1}", EndpointRef("robot", f"robot{i + 1}", k - 1),
                         EndpointRef("body", "platform"), tips[i], platform,
                         torsional)
        for i in range(6)
    ]
    topo = SystemTopology(robots, [RigidBodySpec("platform")], couplings)
    return GroundTruthScenario(
        name="stewart_gough",
        description="Six rods coupled to a platform with torsional joints.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("body", "platform")],
        fixed_base_robots=[f"robot{i + 1}" for i in range(6)])


def _delta(nodes, bend, smooth):
    lower_len, upper_len, link_len = 0.14, 0.14, 0.05
    k = nodes or 6
    robots = []
    profiles = {}
    bodies = [RigidBodySpec("platform")]
    couplings = []
    radius = 0.07
    upper_tips = []
    for i in range(3):
        ang = 2.0 * np.pi * i / 3.0
        low_id, up_id, link_id = f"lower{i + 1}", f"upper{i + 1}", f"link{i + 1}"
        lower = _robot(low_id, lower_len, k, _trans(0.0, radius * np.cos(ang),
                                                    radius * np.sin(ang)))
        profiles[low_id] = _shaped(
            lower_len, bend * np.array([0, 0, 0, 0.2, -1.2 * np.cos(ang), -1.2 * np.sin(ang)]),
            smooth)
        robots.append(lower)
        low_tip = _end_poses([lower], profiles)[(low_id, k - 1)]
        link_pose = renormalize_pose(exp_se3(link_len * NOMINAL_STRAIN) @ low_tip)
        bodies.append(RigidBodySpec(link_id))
        couplings.append(_derive_coupling(
            f"c_low{i + 1}", EndpointRef("robot", low_id, k - 1),
            EndpointRef("body", link_id), low_tip, link_pose))
        upper = _robot(up_id, upper_len, k, link_pose)
        profiles[up_id] = _shaped(
            upper_len, bend * np.array([0, 0, 0, 0.0, 0.9 * np.cos(ang), 0.9 * np.sin(ang)]),
            smooth, shape="bump")
        robots.append(upper)
        couplings.append(_derive_coupling(
            f"c_link{i + 1}", EndpointRef("body", link_id),
            EndpointRef("robot", up_id, 0), link_pose, link_pose))
        up_tip = _end_poses([upper], profiles)[(up_id, k - 1)]
        upper_tips.append((up_id, up_tip))
    platform = _mean_pose([t for _, t in upper_tips])
    for i, (up_id, tip) in enumerate(upper_tips):
        couplings.append(_derive_coupling(
            f"c_up{i + 1}", EndpointRef("robot", up_id, k - 1),
            EndpointRef("body", "platform"), tip, platform))
    topo = SystemTopology(robots, bodies, couplings)
    return GroundTruthScenario(
        name="delta",
        description="Three chains of two rods joined by rigid links, coupled "
                    "to a platform.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("body", "platform")],
        fixed_base_robots=[f"lower{i + 1}" for i in range(3)])


def _extended(nodes, bend, smooth):
    l1, l2, l3 = 0.24, 0.20, 0.22
    if nodes:
        k1 = k2 = k3 = nodes
    else:
        k1, k2, k3 = 25, 21, 23
    r1 = _robot("robot1", l1, k1, _trans(0.0, -0.06, 0.0))
    r2 = _robot("robot2", l2, k2, _trans(0.0, 0.06, 0.02))
    profiles = {
        "robot1": _shaped(l1, bend * np.array([0, 0, 0, 0.3, -0.7, 1.4]), smooth),
        "robot2": _shaped(l2, bend * np.array([0, 0, 0, -0.25, 0.9, 1.0]), smooth),
    }
    ends = _end_poses([r1, r2], profiles)
    tip1 = ends[("robot1", k1 - 1)]
    tip2 = ends[("robot2", k2 - 1)]
    ee_pose = _mean_pose([tip1, tip2])
    couplings = [
        _derive_coupling("c1", EndpointRef("robot", "robot1", k1 - 1),
                         EndpointRef("body", "ee"), tip1, ee_pose),
        _derive_coupling("c2", EndpointRef("robot", "robot2", k2 - 1),
                         EndpointRef("body", "ee"), tip2, ee_pose),
    ]
    # Third rod spans between mid-bodies of the first two; free-floating.
    a1 = int((k1 - 1) * 0.5)
    a2 = int((k2 - 1) * 0.5)
    start = ends[("robot1", a1)]
    r3 = _robot("robot3", l3, k3, start, qc_scale=20.0)
    profiles["robot3"] = _shaped(l3, bend * np.array([0, 0, 0, 0.0, 0.6, -0.8]),
                                 smooth, shape="bump")
    end3 = _end_poses([r3], profiles)[("robot3", k3 - 1)]
    twist_relaxed = np.diag([2e-6, 2e-6, 2e-6, 2e-1, 2e-6, 2e-6])
    couplings.append(_derive_coupling(
        "c3", EndpointRef("robot", "robot3", 0),
        EndpointRef("robot", "robot1", a1), start, ends[("robot1", a1)]))
    couplings.append(_derive_coupling(
        "c4", EndpointRef("robot", "robot3", k3 - 1),
        EndpointRef("robot", "robot2", a2), end3, ends[("robot2", a2)],
        covariance=twist_relaxed))
    topo = SystemTopology([r1, r2, r3], [RigidBodySpec("ee")], couplings)
    return GroundTruthScenario(
        name="extended",
        description="Two rods with a shared end-effector plus a third rod "
                    "coupled to both at its proximal and distal ends.",
        topology=topo, profiles=profiles,
        pose_targets=[EndpointRef("body", "ee")],
        fixed_base_robots=["robot1", "robot2"])


_BUILDERS = {
    "two_robot_ee": lambda nodes, bend, smooth: _two_robot_ee(nodes, bend, smooth),
    "two_robot_ee_spherical": lambda nodes, bend, smooth: _two_robot_ee(
        nodes, bend, smooth, spherical=True),
    "two_robot_tip_body": _two_robot_tip_body,
    "two_robot_coupled": _two_robot_coupled,
    "reconfigurable_parallel": _reconfigurable_parallel,
    "stewart_gough": _stewart_gough,
    "delta": _delta,
    "extended": _extended,
}


def builtin_topologies():
    """Names and descriptions of the shipped scenario library."""
    out = {}
    for name in sorted(_BUILDERS):
        out[name] = build_scenario(name).description
    return out


def build_scenario(name, nodes=None, bend=1.0, boundary="anchored",
                   noise=None, smooth=None, coupling_arclength=None):
    """Construct a named scenario with optional overrides.

    ``smooth`` defaults per boundary profile: anchored runs get smoothly
    varying strain truths, ``prior_only`` runs get constant-strain truths so
    that the measurement-free problem has an exactly consistent optimum.
    """
    if name not in _BUILDERS:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(_BUILDERS)}")
    if smooth is None:
        smooth = boundary != "prior_only"
    if name == "two_robot_coupled" and coupling_arclength is not None:
        scenario = _BUILDERS[name](nodes, bend, smooth, coupling_arclength)
    else:
        scenario = _BUILDERS[name](nodes, bend, smooth)
    if noise is not None:
        scenario.noise = noise
    scenario = _apply_boundary(scenario, boundary)
    scenario.validate()
    return scenario


def scenario_problem(scenario, measurements):
    """Estimation problem over the scenario's topology and hyperparameters."""
    return EstimationProblem(scenario.topology, scenario.hyperparameters,
                             measurements)
