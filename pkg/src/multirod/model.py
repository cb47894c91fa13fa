"""Topology, hyperparameter and measurement data model plus file ingestion.

Owns the fixed stacking order of the global state: robots in declaration
order with nodes by ascending arclength, rigid bodies last. All quantities
are SI (meters, radians, unitless strain); covariances follow suit.

File formats
------------
Config: YAML with sections ``robots[]``, ``rigid_bodies[]``, ``couplings[]``,
``hyperparameters``, ``boundary_conditions``. Poses are accepted as a 16-entry
row-major matrix or as ``{translation: [...], quaternion_wxyz: [...]}`` and
always emitted as a matrix.

Measurements: delimited text, one record per line::

    pose,<target>,<16 pose entries>,<6 mask bits>[,<6 cov diag>]
    fbg,<robot>:<node>,<4 strains>,<4 mask bits>[,<4 cov diag>]
    truth,<target>,<16 pose entries>[,<6 strain entries>]

Targets are ``<robot_id>:<node|proximal|distal>`` or a rigid-body id.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import yaml

from .factors import FbgGeometry
from .liegroup import exp_se3, is_valid_pose, renormalize_pose

NOMINAL_STRAIN = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])

# Default hyperparameters for quantitative runs (sim-noise strain variant).
DEFAULT_QC_DIAG = (0.02, 0.02, 0.02, 2000.0, 2000.0, 2000.0)
DEFAULT_POSE_COV_DIAG = (8e-06, 8e-06, 8e-06, 0.005, 0.005, 0.005)
DEFAULT_FBG_COV_DIAG = (4e-09, 4e-09, 4e-09, 4e-09)
DEFAULT_COUPLING_COV_DIAG = (2e-06, 2e-06, 2e-06, 2e-06, 2e-06, 2e-06)


class SchemaError(ValueError):
    """Config or measurement file violates the schema; names the location."""


# ---------------------------------------------------------------------------
# Topology types
# ---------------------------------------------------------------------------

@dataclass
class RobotSpec:
    id: str
    length: float
    node_arclengths: np.ndarray
    base_pose: np.ndarray
    fbg: FbgGeometry | None = None
    kirchhoff_lock: bool = False
    strain_boundary_nominal_ends: frozenset = frozenset()
    qc_scale: float = 1.0

    @property
    def node_count(self):
        return len(self.node_arclengths)

    def node_index(self, spec):
        """Resolve a node reference: integer, 'proximal' or 'distal'."""
        if spec == "proximal":
            return 0
        if spec == "distal":
            return self.node_count - 1
        idx = int(spec)
        if not 0 <= idx < self.node_count:
            raise SchemaError(f"robot {self.id}: node index {idx} out of range")
        return idx

    def validate(self):
        s = self.node_arclengths
        if len(s) < 2:
            raise SchemaError(f"robot {self.id}: needs at least 2 nodes")
        if np.any(np.diff(s) <= 0.0):
            raise SchemaError(f"robot {self.id}: arclengths must be strictly increasing")
        if abs(s[0]) > 1e-12 or abs(s[-1] - self.length) > 1e-9:
            raise SchemaError(f"robot {self.id}: arclengths must span [0, length]")
        if not is_valid_pose(self.base_pose, tol=1e-8):
            raise SchemaError(f"robot {self.id}: base_pose is not a valid pose")
        bad = self.strain_boundary_nominal_ends - {"proximal", "distal"}
        if bad:
            raise SchemaError(f"robot {self.id}: unknown strain boundary end {sorted(bad)}")


@dataclass
class RigidBodySpec:
    id: str
    initial_pose: np.ndarray | None = None


@dataclass(frozen=True)
class EndpointRef:
    """A pose-carrying endpoint: a robot node or a rigid body."""

    kind: str  # "robot" | "body"
    id: str
    node: int | None = None

    def label(self):
        if self.kind == "robot":
            return f"{self.id}:{self.node}"
        return self.id


@dataclass
class CouplingJoint:
    id: str
    side_a: EndpointRef
    side_b: EndpointRef
    offset_a: np.ndarray
    offset_b: np.ndarray
    dof_mask: np.ndarray = field(default_factory=lambda: np.ones(6, dtype=bool))
    covariance: np.ndarray | None = None  # None -> hyperparameter default


@dataclass
class LineSearchSettings:
    initial_step: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    min_step: float = 1e-6


@dataclass
class GaussNewtonSettings:
    max_iterations: int = 100
    convergence_norm: float = 1e-6
    # Declare convergence when the predicted relative cost decrease drops
    # below this floor; flat (weakly determined) directions can otherwise hold
    # the raw step norm above `convergence_norm` without real progress.
    min_relative_decrease: float = 1e-9
    # When the line search fails outright, accept the state as converged if
    # the unrealized predicted decrease is below this (relative) level.
    stall_relative_decrease: float = 1e-5
    line_search: LineSearchSettings = field(default_factory=LineSearchSettings)


@dataclass
class Hyperparameters:
    qc: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_QC_DIAG))
    robot_pose_cov: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_POSE_COV_DIAG))
    body_pose_cov: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_POSE_COV_DIAG))
    fbg_cov: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_FBG_COV_DIAG))
    coupling_cov: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_COUPLING_COV_DIAG))
    gauss_newton: GaussNewtonSettings = field(default_factory=GaussNewtonSettings)

    def validate(self):
        for name, mat, dim in (("qc", self.qc, 6),
                               ("robot_pose_covariance", self.robot_pose_cov, 6),
                               ("body_pose_covariance", self.body_pose_cov, 6),
                               ("fbg_covariance", self.fbg_cov, 4),
                               ("coupling_covariance", self.coupling_cov, 6)):
            if mat.shape != (dim, dim):
                raise SchemaError(f"hyperparameters.{name}: expected {dim}x{dim}")
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise SchemaError(f"hyperparameters.{name}: matrix is not SPD") from None


@dataclass
class BoundaryCondition:
    robot: str
    node: str  # index, "proximal" or "distal" (resolved against the robot)
    fix: str   # "pose" | "strain" | "translational_strain"


@dataclass
class SystemTopology:
    robots: list
    rigid_bodies: list = field(default_factory=list)
    couplings: list = field(default_factory=list)
    boundary_conditions: list = field(default_factory=list)

    def robot(self, robot_id):
        for r in self.robots:
            if r.id == robot_id:
                return r
        raise KeyError(f"unknown robot id {robot_id!r}")

    def body(self, body_id):
        for b in self.rigid_bodies:
            if b.id == body_id:
                return b
        raise KeyError(f"unknown rigid body id {body_id!r}")

    def robot_ids(self):
        return [r.id for r in self.robots]

    def body_ids(self):
        return [b.id for b in self.rigid_bodies]


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

@dataclass
class PoseMeasurement:
    target: EndpointRef
    matrix: np.ndarray
    dof_mask: np.ndarray = field(default_factory=lambda: np.ones(6, dtype=bool))
    covariance: np.ndarray | None = None


@dataclass
class FbgMeasurement:
    robot: str
    node: int
    values: np.ndarray  # 4 longitudinal core strains
    dof_mask: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=bool))
    covariance: np.ndarray | None = None


@dataclass
class MeasurementSet:
    pose_measurements: list = field(default_factory=list)
    fbg_measurements: list = field(default_factory=list)

    def filtered(self, sensors):
        """Subset by sensor selection: 'both', 'pose', 'fbg' or 'none'."""
        if sensors == "both":
            return self
        if sensors == "pose":
            return MeasurementSet(list(self.pose_measurements), [])
        if sensors == "fbg":
            return MeasurementSet([], list(self.fbg_measurements))
        if sensors == "none":
            return MeasurementSet([], [])
        raise ValueError(f"unknown sensor selection {sensors!r}")


@dataclass
class TruthRecord:
    target: EndpointRef
    matrix: np.ndarray
    strain: np.ndarray | None = None


# ---------------------------------------------------------------------------
# System state
# ---------------------------------------------------------------------------

@dataclass
class SystemState:
    """Node poses/strains per robot (in topology order) plus body poses."""

    robot_poses: dict   # robot id -> (K, 4, 4)
    robot_strains: dict  # robot id -> (K, 6)
    body_poses: dict    # body id -> (4, 4)


# ---------------------------------------------------------------------------
# Stacking order
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockInfo:
    kind: str          # "node" | "body"
    owner: str         # robot or body id
    node: int | None
    dim: int

    def label(self):
        if self.kind == "node":
            return f"{self.owner} node {self.node}"
        return f"body {self.owner}"


class StackingOrder:
    """Bijection between state blocks and contiguous block indices."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        self.index = {}
        for i, b in enumerate(self.blocks):
            key = (b.owner, b.node) if b.kind == "node" else (b.owner, None)
            self.index[key] = i

    def __len__(self):
        return len(self.blocks)

    def block_of_node(self, robot_id, node):
        return self.index[(robot_id, node)]

    def block_of_body(self, body_id):
        return self.index[(body_id, None)]

    def block_of(self, ref):
        if ref.kind == "robot":
            return self.block_of_node(ref.id, ref.node)
        return self.block_of_body(ref.id)

    def dims(self):
        return [b.dim for b in self.blocks]

    def labels(self):
        return [b.label() for b in self.blocks]

    def reordered(self, permutation):
        """New stacking with ``blocks[permutation[t]]`` at position ``t``."""
        if sorted(permutation) != list(range(len(self.blocks))):
            raise ValueError("permutation must be a bijection on block indices")
        return StackingOrder([self.blocks[p] for p in permutation])


def stacking_order(topology):
    """Deterministic state order: robots by declaration, nodes ascending,
    rigid bodies last."""
    blocks = []
    for r in topology.robots:
        for k in range(r.node_count):
            blocks.append(BlockInfo("node", r.id, k, 12))
    for b in topology.rigid_bodies:
        blocks.append(BlockInfo("body", b.id, None, 6))
    return StackingOrder(blocks)


# ---------------------------------------------------------------------------
# Estimation problem
# ---------------------------------------------------------------------------

@dataclass
class EstimationProblem:
    topology: SystemTopology
    hyperparameters: Hyperparameters
    measurements: MeasurementSet
    stacking: StackingOrder = None

    def __post_init__(self):
        if self.stacking is None:
            self.stacking = stacking_order(self.topology)

    def fixed_masks(self):
        """Per-block boolean masks (True = locked) from boundary conditions."""
        masks = {}

        def mask_for(block):
            m = masks.get(block)
            if m is None:
                m = np.zeros(self.stacking.blocks[block].dim, dtype=bool)
                masks[block] = m
            return m

        for r in self.topology.robots:
            if r.kirchhoff_lock:
                for k in range(r.node_count):
                    mask_for(self.stacking.block_of_node(r.id, k))[6:9] = True
            for end in sorted(r.strain_boundary_nominal_ends):
                k = 0 if end == "proximal" else r.node_count - 1
                mask_for(self.stacking.block_of_node(r.id, k))[6:12] = True
        for bc in self.topology.boundary_conditions:
            robot = self.topology.robot(bc.robot)
            k = robot.node_index(bc.node)
            m = mask_for(self.stacking.block_of_node(bc.robot, k))
            if bc.fix == "pose":
                m[0:6] = True
            elif bc.fix == "strain":
                m[6:12] = True
            elif bc.fix == "translational_strain":
                m[6:9] = True
            else:
                raise SchemaError(f"boundary condition: unknown fix kind {bc.fix!r}")
        return masks


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str


def _resolve_ref(topology, ref):
    if ref.kind == "robot":
        robot = topology.robot(ref.id)
        if not 0 <= ref.node < robot.node_count:
            raise SchemaError(f"reference {ref.label()}: node index out of range")
    else:
        topology.body(ref.id)


def validate_topology(topology, hyper, measurements):
    """Structural checks plus a gauge/rank pre-check.

    The pre-check flags connected components (robots linked by couplings,
    directly or transitively) with no pose anchor: no fixed-pose boundary
    condition and no pose measurement anywhere in the component. Strain
    measurements do not anchor a pose gauge. The numeric factorization is
    the final authority and reports the first failing block at solve time.
    """
    diags = []
    seen_ids = set()
    for r in topology.robots:
        if r.id in seen_ids:
            diags.append(Diagnostic("error", f"duplicate id {r.id!r}"))
        seen_ids.add(r.id)
        try:
            r.validate()
        except SchemaError as e:
            diags.append(Diagnostic("error", str(e)))
    for b in topology.rigid_bodies:
        if b.id in seen_ids:
            diags.append(Diagnostic("error", f"duplicate id {b.id!r}"))
        seen_ids.add(b.id)
    try:
        hyper.validate()
    except SchemaError as e:
        diags.append(Diagnostic("error", str(e)))

    for c in topology.couplings:
        for side, ref in (("a", c.side_a), ("b", c.side_b)):
            try:
                _resolve_ref(topology, ref)
            except (KeyError, SchemaError) as e:
                diags.append(Diagnostic("error", f"coupling {c.id} side {side}: {e}"))
        if c.covariance is not None:
            active = np.asarray(c.dof_mask, dtype=bool)
            sub = c.covariance[np.ix_(active, active)]
            try:
                np.linalg.cholesky(sub)
            except np.linalg.LinAlgError:
                diags.append(Diagnostic(
                    "error", f"coupling {c.id}: active covariance sub-block is not SPD"))

    for bc in topology.boundary_conditions:
        try:
            robot = topology.robot(bc.robot)
            robot.node_index(bc.node)
        except (KeyError, SchemaError) as e:
            diags.append(Diagnostic("error", f"boundary condition: {e}"))

    seen_channels = set()
    for m in measurements.pose_measurements:
        try:
            _resolve_ref(topology, m.target)
        except (KeyError, SchemaError) as e:
            diags.append(Diagnostic("error", f"pose measurement: {e}"))
            continue
        key = ("pose", m.target.kind, m.target.id, m.target.node)
        if key in seen_channels:
            diags.append(Diagnostic(
                "error", f"duplicate pose measurement on {m.target.label()}"))
        seen_channels.add(key)
        if not is_valid_pose(m.matrix, tol=1e-6):
            diags.append(Diagnostic(
                "error", f"pose measurement on {m.target.label()}: invalid pose"))
    for m in measurements.fbg_measurements:
        try:
            robot = topology.robot(m.robot)
            if not 0 <= m.node < robot.node_count:
                raise SchemaError("node index out of range")
            if robot.fbg is None:
                diags.append(Diagnostic(
                    "error", f"fbg measurement on {m.robot}:{m.node}: robot has no fiber geometry"))
        except (KeyError, SchemaError) as e:
            diags.append(Diagnostic("error", f"fbg measurement: {e}"))
            continue
        key = ("fbg", m.robot, m.node)
        if key in seen_channels:
            diags.append(Diagnostic(
                "error", f"duplicate fbg measurement on {m.robot}:{m.node}"))
        seen_channels.add(key)

    # Gauge pre-check on the coupling graph.
    comp = {rid: rid for rid in topology.robot_ids()}
    comp.update({bid: bid for bid in topology.body_ids()})

    def find(x):
        while comp[x] != x:
            comp[x] = comp[comp[x]]
            x = comp[x]
        return x

    def union(a, b):
        comp[find(a)] = find(b)

    for c in topology.couplings:
        try:
            union(c.side_a.id, c.side_b.id)
        except KeyError:
            continue
    anchored = set()
    for bc in topology.boundary_conditions:
        if bc.fix == "pose" and bc.robot in comp:
            anchored.add(find(bc.robot))
    for m in measurements.pose_measurements:
        if m.target.id in comp and np.any(m.dof_mask):
            anchored.add(find(m.target.id))
    for member in sorted(comp):
        root = find(member)
        if root not in anchored:
            diags.append(Diagnostic(
                "error",
                f"under-constrained: component containing {member!r} has no pose "
                f"anchor (fixed base, pose measurement, or coupling to an "
                f"anchored part)"))
            anchored.add(root)  # report once per component
    return diags


# ---------------------------------------------------------------------------
# Pose (de)serialization helpers
# ---------------------------------------------------------------------------

def _quat_wxyz_to_matrix(q):
    w, x, y, z = q
    n = w * w + x * x + y * y + z * z
    if abs(n - 1.0) > 1e-6:
        raise SchemaError("quaternion_wxyz must be unit length")
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def parse_pose(value, where):
    """Pose from 16 row-major floats or translation + unit quaternion."""
    if isinstance(value, dict):
        if "matrix" in value:
            flat = value["matrix"]
        elif "translation" in value and "quaternion_wxyz" in value:
            t = np.asarray(value["translation"], dtype=float)
            if t.shape != (3,):
                raise SchemaError(f"{where}: translation must have 3 entries")
            q = np.asarray(value["quaternion_wxyz"], dtype=float)
            if q.shape != (4,):
                raise SchemaError(f"{where}: quaternion_wxyz must have 4 entries")
            out = np.eye(4)
            out[:3, :3] = _quat_wxyz_to_matrix(q)
            out[:3, 3] = t
            return renormalize_pose(out)
        else:
            raise SchemaError(f"{where}: pose needs 'matrix' or translation+quaternion")
    else:
        flat = value
    arr = np.asarray(flat, dtype=float)
    if arr.size != 16:
        raise SchemaError(f"{where}: pose matrix must have 16 entries")
    mat = arr.reshape(4, 4)
    if not is_valid_pose(mat, tol=1e-6):
        raise SchemaError(f"{where}: not a valid SE(3) pose")
    return mat


def pose_to_list(mat):
    return [float(v) for v in np.asarray(mat).reshape(-1)]


# ---------------------------------------------------------------------------
# Config file IO
# ---------------------------------------------------------------------------

def _node_arclengths(entry, length, where):
    if "arclengths" in entry:
        s = np.asarray(entry["arclengths"], dtype=float)
    elif "nodes" in entry:
        count = int(entry["nodes"])
        if count < 2:
            raise SchemaError(f"{where}.nodes: need at least 2")
        s = np.linspace(0.0, length, count)
    elif "spacing" in entry:
        ds = float(entry["spacing"])
        if ds <= 0:
            raise SchemaError(f"{where}.spacing: must be positive")
        count = int(round(length / ds)) + 1
        s = np.linspace(0.0, length, count)
    else:
        raise SchemaError(f"{where}: one of 'nodes', 'spacing' or 'arclengths' is required")
    return s


def _diag_or_matrix(entry, key_base, dim, where):
    diag_key = key_base + "_diagonal"
    if diag_key in entry:
        d = np.asarray(entry[diag_key], dtype=float)
        if d.shape != (dim,):
            raise SchemaError(f"{where}.{diag_key}: expected {dim} entries")
        return np.diag(d)
    if key_base in entry:
        m = np.asarray(entry[key_base], dtype=float)
        if m.size != dim * dim:
            raise SchemaError(f"{where}.{key_base}: expected {dim}x{dim} entries")
        return m.reshape(dim, dim)
    return None


def _parse_endpoint(text, where):
    text = str(text)
    if ":" in text:
        rid, node = text.split(":", 1)
        return ("robot", rid, node)
    return ("body", text, None)


def load_config(text):
    """Parse a config document into ``(SystemTopology, Hyperparameters)``."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SchemaError(f"config: invalid YAML: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config: top level must be a mapping")

    robots = []
    for idx, entry in enumerate(doc.get("robots", []) or []):
        where = f"robots[{idx}]"
        if "id" not in entry:
            raise SchemaError(f"{where}.id: required field is missing")
        if "length" not in entry:
            raise SchemaError(f"{where}.length: required field is missing")
        length = float(entry["length"])
        if length <= 0:
            raise SchemaError(f"{where}.length: must be positive")
        fbg = None
        if "fbg" in entry and entry["fbg"] is not None:
            f = entry["fbg"]
            if "core_radius" not in f:
                raise SchemaError(f"{where}.fbg.core_radius: required field is missing")
            radius = float(f["core_radius"])
            if radius <= 0:
                raise SchemaError(f"{where}.fbg.core_radius: must be positive")
            angles = tuple(float(a) for a in f.get("core_angles",
                                                   (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)))
            if len(angles) != 3:
                raise SchemaError(f"{where}.fbg.core_angles: expected 3 angles")
            fbg = FbgGeometry(radius, angles)
        base = parse_pose(entry.get("base_pose", pose_to_list(np.eye(4))), f"{where}.base_pose")
        robot = RobotSpec(
            id=str(entry["id"]),
            length=length,
            node_arclengths=_node_arclengths(entry, length, where),
            base_pose=base,
            fbg=fbg,
            kirchhoff_lock=bool(entry.get("kirchhoff", False)),
            strain_boundary_nominal_ends=frozenset(entry.get("nominal_strain_ends", []) or []),
            qc_scale=float(entry.get("qc_scale", 1.0)),
        )
        robot.validate()
        robots.append(robot)
    if not robots:
        raise SchemaError("config: at least one robot is required")

    bodies = []
    for idx, entry in enumerate(doc.get("rigid_bodies", []) or []):
        where = f"rigid_bodies[{idx}]"
        if "id" not in entry:
            raise SchemaError(f"{where}.id: required field is missing")
        pose = None
        if "initial_pose" in entry and entry["initial_pose"] is not None:
            pose = parse_pose(entry["initial_pose"], f"{where}.initial_pose")
        bodies.append(RigidBodySpec(str(entry["id"]), pose))

    couplings = []
    for idx, entry in enumerate(doc.get("couplings", []) or []):
        where = f"couplings[{idx}]"
        for req in ("side_a", "side_b", "offset_a", "offset_b"):
            if req not in entry:
                raise SchemaError(f"{where}.{req}: required field is missing")
        sides = []
        for side_key in ("side_a", "side_b"):
            kind, owner, node = _parse_endpoint(entry[side_key], f"{where}.{side_key}")
            if kind == "robot":
                robot = next((r for r in robots if r.id == owner), None)
                if robot is None:
                    raise SchemaError(f"{where}.{side_key}: unknown robot {owner!r}")
                sides.append(EndpointRef("robot", owner, robot.node_index(node)))
            else:
                if not any(b.id == owner for b in bodies):
                    raise SchemaError(f"{where}.{side_key}: unknown endpoint {owner!r}")
                sides.append(EndpointRef("body", owner))
        mask = np.asarray(entry.get("dof_mask", [1] * 6), dtype=bool)
        if mask.shape != (6,):
            raise SchemaError(f"{where}.dof_mask: expected 6 entries")
        cov = _diag_or_matrix(entry, "covariance", 6, where)
        couplings.append(CouplingJoint(
            id=str(entry.get("id", f"coupling{idx}")),
            side_a=sides[0], side_b=sides[1],
            offset_a=parse_pose(entry["offset_a"], f"{where}.offset_a"),
            offset_b=parse_pose(entry["offset_b"], f"{where}.offset_b"),
            dof_mask=mask, covariance=cov))

    hyper = Hyperparameters()
    hentry = doc.get("hyperparameters", {}) or {}
    qc = _diag_or_matrix(hentry, "qc", 6, "hyperparameters")
    if qc is not None:
        hyper.qc = qc
    for key, attr, dim in (("robot_pose_covariance", "robot_pose_cov", 6),
                           ("body_pose_covariance", "body_pose_cov", 6),
                           ("fbg_covariance", "fbg_cov", 4),
                           ("coupling_covariance", "coupling_cov", 6)):
        mat = _diag_or_matrix(hentry, key, dim, "hyperparameters")
        if mat is not None:
            setattr(hyper, attr, mat)
    gn = hentry.get("gauss_newton", {}) or {}
    ls = gn.get("line_search", {}) or {}
    hyper.gauss_newton = GaussNewtonSettings(
        max_iterations=int(gn.get("max_iterations", 100)),
        convergence_norm=float(gn.get("convergence_norm", 1e-6)),
        min_relative_decrease=float(gn.get("min_relative_decrease", 1e-9)),
        stall_relative_decrease=float(gn.get("stall_relative_decrease", 1e-5)),
        line_search=LineSearchSettings(
            initial_step=float(ls.get("initial_step", 1.0)),
            shrink=float(ls.get("shrink", 0.5)),
            armijo=float(ls.get("armijo", 1e-4)),
            min_step=float(ls.get("min_step", 1e-6)),
        ))
    hyper.validate()

    bcs = []
    for idx, entry in enumerate(doc.get("boundary_conditions", []) or []):
        where = f"boundary_conditions[{idx}]"
        for req in ("robot", "node", "fix"):
            if req not in entry:
                raise SchemaError(f"{where}.{req}: required field is missing")
        bcs.append(BoundaryCondition(str(entry["robot"]), str(entry["node"]), str(entry["fix"])))

    return SystemTopology(robots, bodies, couplings, bcs), hyper


def dump_config(topology, hyper):
    """Serialize topology + hyperparameters back to YAML (poses as matrices)."""
    doc = {"robots": [], "rigid_bodies": [], "couplings": [],
           "hyperparameters": {}, "boundary_conditions": []}
    for r in topology.robots:
        entry = {
            "id": r.id,
            "length": float(r.length),
            "arclengths": [float(s) for s in r.node_arclengths],
            "base_pose": {"matrix": pose_to_list(r.base_pose)},
        }
        if r.fbg is not None:
            entry["fbg"] = {"core_radius": float(r.fbg.core_radius),
                            "core_angles": [float(a) for a in r.fbg.core_angles]}
        if r.kirchhoff_lock:
            entry["kirchhoff"] = True
        if r.strain_boundary_nominal_ends:
            entry["nominal_strain_ends"] = sorted(r.strain_boundary_nominal_ends)
        if r.qc_scale != 1.0:
            entry["qc_scale"] = float(r.qc_scale)
        doc["robots"].append(entry)
    for b in topology.rigid_bodies:
        entry = {"id": b.id}
        if b.initial_pose is not None:
            entry["initial_pose"] = {"matrix": pose_to_list(b.initial_pose)}
        doc["rigid_bodies"].append(entry)
    for c in topology.couplings:
        entry = {
            "id": c.id,
            "side_a": c.side_a.label(),
            "side_b": c.side_b.label(),
            "offset_a": {"matrix": pose_to_list(c.offset_a)},
            "offset_b": {"matrix": pose_to_list(c.offset_b)},
            "dof_mask": [int(v) for v in c.dof_mask],
        }
        if c.covariance is not None:
            entry["covariance"] = [float(v) for v in c.covariance.reshape(-1)]
        doc["couplings"].append(entry)
    h = doc["hyperparameters"]
    h["qc"] = [float(v) for v in hyper.qc.reshape(-1)]
    h["robot_pose_covariance"] = [float(v) for v in hyper.robot_pose_cov.reshape(-1)]
    h["body_pose_covariance"] = [float(v) for v in hyper.body_pose_cov.reshape(-1)]
    h["fbg_covariance"] = [float(v) for v in hyper.fbg_cov.reshape(-1)]
    h["coupling_covariance"] = [float(v) for v in hyper.coupling_cov.reshape(-1)]
    gn = hyper.gauss_newton
    h["gauss_newton"] = {
        "max_iterations": gn.max_iterations,
        "convergence_norm": gn.convergence_norm,
        "min_relative_decrease": gn.min_relative_decrease,
        "stall_relative_decrease": gn.stall_relative_decrease,
        "line_search": {
            "initial_step": gn.line_search.initial_step,
            "shrink": gn.line_search.shrink,
            "armijo": gn.line_search.armijo,
            "min_step": gn.line_search.min_step,
        },
    }
    for bc in topology.boundary_conditions:
        doc["boundary_conditions"].append({"robot": bc.robot, "node": bc.node, "fix": bc.fix})
    return yaml.safe_dump(doc, sort_keys=False)


# ---------------------------------------------------------------------------
# Measurement file IO
# ---------------------------------------------------------------------------

def _fmt(values):
    return ",".join("%.17g" % float(v) for v in values)


def _endpoint_from_text(text, topology, where):
    kind, owner, node = _parse_endpoint(text, where)
    if kind == "robot":
        robot = topology.robot(owner)
        return EndpointRef("robot", owner, robot.node_index(node))
    topology.body(owner)
    return EndpointRef("body", owner)


def load_measurements(text, topology):
    """Parse a measurement document against a topology."""
    out = MeasurementSet()
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        kind = parts[0]
        where = f"measurements line {lineno}"
        try:
            if kind == "pose":
                target = _endpoint_from_text(parts[1], topology, where)
                vals = [float(v) for v in parts[2:]]
                if len(vals) not in (16 + 6, 16 + 6 + 6):
                    raise SchemaError(f"{where}: pose rows need 16 pose + 6 mask"
                                      f" [+ 6 covariance] values")
                mat = parse_pose(vals[:16], where)
                mask = np.asarray(vals[16:22], dtype=bool)
                cov = np.diag(vals[22:28]) if len(vals) == 28 else None
                out.pose_measurements.append(PoseMeasurement(target, mat, mask, cov))
            elif kind == "fbg":
                target = _endpoint_from_text(parts[1], topology, where)
                if target.kind != "robot":
                    raise SchemaError(f"{where}: fbg target must be a robot node")
                vals = [float(v) for v in parts[2:]]
                if len(vals) not in (4 + 4, 4 + 4 + 4):
                    raise SchemaError(f"{where}: fbg rows need 4 strains + 4 mask"
                                      f" [+ 4 covariance] values")
                mask = np.asarray(vals[4:8], dtype=bool)
                cov = np.diag(vals[8:12]) if len(vals) == 12 else None
                out.fbg_measurements.append(FbgMeasurement(
                    target.id, target.node, np.asarray(vals[:4]), mask, cov))
            else:
                raise SchemaError(f"{where}: unknown record kind {kind!r}")
        except (KeyError, ValueError) as e:
            if isinstance(e, SchemaError):
                raise
            raise SchemaError(f"{where}: {e}") from None
    return out


def dump_measurements(measurements):
    lines = ["# multirod measurements: kind,target,payload...,mask...[,cov diag...]"]
    for m in measurements.pose_measurements:
        row = f"pose,{m.target.label()},{_fmt(m.matrix.reshape(-1))}," \
              f"{','.join(str(int(v)) for v in m.dof_mask)}"
        if m.covariance is not None:
            row += "," + _fmt(np.diag(m.covariance))
        lines.append(row)
    for m in measurements.fbg_measurements:
        row = f"fbg,{m.robot}:{m.node},{_fmt(m.values)}," \
              f"{','.join(str(int(v)) for v in m.dof_mask)}"
        if m.covariance is not None:
            row += "," + _fmt(np.diag(m.covariance))
        lines.append(row)
    return "\n".join(lines) + "\n"


def load_truth(text, topology):
    """Parse a truth document (rows tagged ``truth``) into records."""
    out = []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        where = f"truth line {lineno}"
        if parts[0] != "truth":
            raise SchemaError(f"{where}: expected kind 'truth', got {parts[0]!r}")
        target = _endpoint_from_text(parts[1], topology, where)
        vals = [float(v) for v in parts[2:]]
        if len(vals) == 16:
            out.append(TruthRecord(target, parse_pose(vals, where)))
        elif len(vals) == 22:
            out.append(TruthRecord(target, parse_pose(vals[:16], where),
                                   np.asarray(vals[16:22])))
        else:
            raise SchemaError(f"{where}: truth rows need 16 pose [+ 6 strain] values")
    return out


def dump_truth(state, topology):
    """Serialize a ground-truth :class:`SystemState` as truth rows."""
    lines = ["# multirod truth: truth,target,pose(16)[,strain(6)]"]
    for r in topology.robots:
        poses = state.robot_poses[r.id]
        strains = state.robot_strains[r.id]
        for k in range(r.node_count):
            lines.append(f"truth,{r.id}:{k},{_fmt(poses[k].reshape(-1))},{_fmt(strains[k])}")
    for b in topology.rigid_bodies:
        lines.append(f"truth,{b.id},{_fmt(state.body_poses[b.id].reshape(-1))}")
    return "\n".join(lines) + "\n"


def truth_to_state(records, topology):
    """Assemble truth records into a :class:`SystemState` (must be complete)."""
    poses = {r.id: np.tile(np.eye(4), (r.node_count, 1, 1)) for r in topology.robots}
    strains = {r.id: np.tile(NOMINAL_STRAIN, (r.node_count, 1)) for r in topology.robots}
    bodies = {}
    seen = set()
    for rec in records:
        if rec.target.kind == "robot":
            poses[rec.target.id][rec.target.node] = rec.matrix
            if rec.strain is not None:
                strains[rec.target.id][rec.target.node] = rec.strain
            seen.add((rec.target.id, rec.target.node))
        else:
            bodies[rec.target.id] = rec.matrix
            seen.add(rec.target.id)
    for r in topology.robots:
        for k in range(r.node_count):
            if (r.id, k) not in seen:
                raise SchemaError(f"truth: missing record for {r.id}:{k}")
    for b in topology.rigid_bodies:
        if b.id not in seen:
            raise SchemaError(f"truth: missing record for body {b.id}")
    return SystemState(poses, strains, bodies)


def load_problem(config_text, measurement_text):
    """Build a validated :class:`EstimationProblem` from file contents."""
    topology, hyper = load_config(config_text)
    measurements = load_measurements(measurement_text, topology)
    diags = validate_topology(topology, hyper, measurements)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise SchemaError("; ".join(d.message for d in errors))
    return EstimationProblem(topology, hyper, measurements)


def straight_rod_poses(robot):
    """Initial node poses: straight rod at nominal strain from the base."""
    out = np.empty((robot.node_count, 4, 4))
    for k, s in enumerate(robot.node_arclengths):
        out[k] = exp_se3(s * NOMINAL_STRAIN) @ robot.base_pose
    return out
