"""Run reports: delimited result tables, metadata sidecar and figures.

Every estimate run writes plot-ready CSV tables (one row per node, per body,
per iteration) plus a YAML metadata sidecar. The report path also renders
matplotlib figures next to the tables unless figures are disabled; timing
columns are tagged as measured quantities and excluded from byte-for-byte
reproducibility guarantees.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__
from .liegroup import log_se3, pose_inverse
from .solver import interpolate

_F = "%.17g"


def _fmt_row(values):
    return ",".join(_F % float(v) for v in values)


def _position_sigma(pose, cov):
    """Per-axis position std from a perturbation covariance block.

    The left perturbation acts as dp = dnu + domega x p, so the position
    covariance is A P A^T with A = [I, -skew(p)].
    """
    p = pose[:3, 3]
    a = np.zeros((3, 6))
    a[:, :3] = np.eye(3)
    a[0, 4], a[0, 5] = p[2], -p[1]
    a[1, 3], a[1, 5] = -p[2], p[0]
    a[2, 3], a[2, 4] = p[1], -p[0]
    pos_cov = a @ cov[:6, :6] @ a.T
    return np.sqrt(np.maximum(np.diag(pos_cov), 0.0)), pos_cov


def pose_errors(estimate, truth):
    """Position (m) and orientation (rad) error between two poses."""
    delta = log_se3(estimate @ pose_inverse(truth))
    return float(np.linalg.norm(estimate[:3, 3] - truth[:3, 3])), \
        float(np.linalg.norm(delta[3:]))


@dataclass
class RunReport:
    """All tables of one estimation run, ready to serialize."""

    node_rows: list = field(default_factory=list)
    body_rows: list = field(default_factory=list)
    interp_rows: list = field(default_factory=list)
    error_rows: list = field(default_factory=list)
    iteration_rows: list = field(default_factory=list)
    timings_ms: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


NODE_HEADER = (
    "robot,node,s,"
    + ",".join(f"t{i}{j}" for i in range(4) for j in range(4)) + ","
    + ",".join(f"strain{i}" for i in range(6)) + ","
    + "pos3s_x,pos3s_y,pos3s_z,"
    + ",".join(f"rot3s_{a}" for a in "xyz") + ","
    + ",".join(f"strain3s_{i}" for i in range(6))
)
BODY_HEADER = (
    "body,"
    + ",".join(f"t{i}{j}" for i in range(4) for j in range(4)) + ","
    + "pos3s_x,pos3s_y,pos3s_z," + ",".join(f"rot3s_{a}" for a in "xyz")
)
ERROR_HEADER = "target,s,pos_error,rot_error,strain_error"
ITER_HEADER = "iteration,cost,step_norm,step_scale"


def _node_row(robot_id, k, s, pose, strain, cov):
    sig_pos, _ = _position_sigma(pose, cov)
    sig_rot = np.sqrt(np.maximum(np.diag(cov[3:6, 3:6]), 0.0))
    sig_strain = np.sqrt(np.maximum(np.diag(cov[6:12, 6:12]), 0.0))
    return (f"{robot_id},{k}," + _fmt_row([s]) + "," + _fmt_row(pose.reshape(-1))
            + "," + _fmt_row(strain) + "," + _fmt_row(3.0 * sig_pos)
            + "," + _fmt_row(3.0 * sig_rot) + "," + _fmt_row(3.0 * sig_strain))


def build_report(posterior, truth=None, interp_step=None, metadata=None):
    """Assemble a :class:`RunReport` from a converged posterior."""
    problem = posterior.problem
    report = RunReport()
    report.metadata = dict(metadata or {})
    report.metadata.setdefault("version", __version__)
    report.timings_ms = dict(posterior.diagnostics.timings_ms)

    for robot in problem.topology.robots:
        poses = posterior.mean.robot_poses[robot.id]
        strains = posterior.mean.robot_strains[robot.id]
        for k, s in enumerate(robot.node_arclengths):
            cov = posterior.node_covariance(robot.id, k)
            report.node_rows.append(_node_row(robot.id, k, s, poses[k],
                                              strains[k], cov))
    for body in problem.topology.rigid_bodies:
        pose = posterior.mean.body_poses[body.id]
        cov = posterior.body_covariance(body.id)
        sig_pos, _ = _position_sigma(pose, cov)
        sig_rot = np.sqrt(np.maximum(np.diag(cov[3:6, 3:6]), 0.0))
        report.body_rows.append(
            f"{body.id}," + _fmt_row(pose.reshape(-1)) + ","
            + _fmt_row(3.0 * sig_pos) + "," + _fmt_row(3.0 * sig_rot))

    if interp_step:
        for robot in problem.topology.robots:
            arcs = np.arange(0.0, robot.length + 0.5 * interp_step, interp_step)
            arcs = np.minimum(arcs, robot.length)
            for s in arcs:
                pose, strain, cov = interpolate(posterior, robot.id, float(s))
                report.interp_rows.append(
                    _node_row(robot.id, -1, float(s), pose, strain, cov))

    if truth is not None:
        for robot in problem.topology.robots:
            poses = posterior.mean.robot_poses[robot.id]
            strains = posterior.mean.robot_strains[robot.id]
            t_poses = truth.robot_poses[robot.id]
            t_strains = truth.robot_strains[robot.id]
            for k, s in enumerate(robot.node_arclengths):
                pe, re = pose_errors(poses[k], t_poses[k])
                se = float(np.linalg.norm(strains[k] - t_strains[k]))
                report.error_rows.append(
                    f"{robot.id}:{k}," + _fmt_row([s, pe, re, se]))
        for body in problem.topology.rigid_bodies:
            pe, re = pose_errors(posterior.mean.body_poses[body.id],
                                 truth.body_poses[body.id])
            report.error_rows.append(f"{body.id}," + _fmt_row([0.0, pe, re, 0.0]))

    for rec in posterior.diagnostics.iterations:
        report.iteration_rows.append(
            f"{rec.iteration}," + _fmt_row([rec.cost, rec.step_norm, rec.step_scale]))
    report.metadata["converged"] = bool(posterior.diagnostics.converged)
    report.metadata["termination"] = posterior.diagnostics.termination
    report.metadata["iterations"] = posterior.diagnostics.iteration_count
    return report


def write_report(report, out_dir, figures=True):
    """Write all tables (plus figures when enabled); returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name, header, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write("# " + header + "\n")
            for row in rows:
                fh.write(row + "\n")
        written.append(path)

    emit("estimate_nodes.csv", NODE_HEADER, report.node_rows)
    if report.body_rows:
        emit("estimate_bodies.csv", BODY_HEADER, report.body_rows)
    if report.interp_rows:
        emit("estimate_interpolated.csv", NODE_HEADER, report.interp_rows)
    if report.error_rows:
        emit("errors_vs_truth.csv", ERROR_HEADER, report.error_rows)
    emit("iterations.csv", ITER_HEADER, report.iteration_rows)

    meta = dict(report.metadata)
    meta["timings_ms"] = {k: float(v) for k, v in report.timings_ms.items()}
    meta["timings_note"] = "measured quantities; excluded from reproducibility"
    path = os.path.join(out_dir, "run_metadata.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    written.append(path)

    if figures:
        written.extend(render_figures(report, out_dir))
    return written


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _parse_rows(rows):
    out = {}
    for row in rows:
        parts = row.split(",")
        rid = parts[0]
        vals = np.array([float(v) for v in parts[2:]])
        out.setdefault(rid, []).append((int(parts[1]), vals))
    parsed = {}
    for rid, entries in out.items():
        entries.sort(key=lambda e: e[1][0])
        parsed[rid] = np.array([v for _, v in entries])
    return parsed


def render_figures(report, out_dir, dpi=130):
    """Shape and strain figures next to the tables; returns written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report.interp_rows if report.interp_rows else report.node_rows
    by_robot = _parse_rows(rows)
    written = []

    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    for rid, vals in sorted(by_robot.items()):
        x, y, z = vals[:, 1 + 3], vals[:, 1 + 7], vals[:, 1 + 11]
        axes[0].plot(x, y, label=rid)
        axes[1].plot(x, z, label=rid)
    for ax, ylab in zip(axes, ("y [m]", "z [m]")):
        ax.set_xlabel("x [m]")
        ax.set_ylabel(ylab)
        ax.grid(True, alpha=0.3)
        ax.set_aspect("equal", adjustable="datalim")
    axes[0].legend(fontsize=8)
    fig.suptitle("Estimated shapes")
    fig.tight_layout()
    path = os.path.join(out_dir, "shape.png")
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    colors = ("tab:red", "tab:green", "tab:blue")
    for rid, vals in sorted(by_robot.items()):
        s = vals[:, 0]
        for i, (axis_name, color) in enumerate(zip("xyz", colors)):
            pos = vals[:, 1 + 3 + 4 * i]
            sig = vals[:, 1 + 16 + 6 + i]
            axes[0].plot(s, pos, color=color, lw=1.0)
            axes[0].fill_between(s, pos - sig, pos + sig, color=color, alpha=0.15)
            rot = vals[:, 1 + 16 + 3 + i]
            sig_r = vals[:, 1 + 16 + 6 + 6 + 3 + i]
            axes[1].plot(s, rot, color=color, lw=1.0)
            axes[1].fill_between(s, rot - sig_r, rot + sig_r, color=color, alpha=0.15)
    axes[0].set_ylabel("position [m]")
    axes[1].set_ylabel("rotational strain [rad/m]")
    axes[1].set_xlabel("arclength [m]")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.suptitle("Estimates with 3-sigma envelopes (x/y/z in red/green/blue)")
    fig.tight_layout()
    path = os.path.join(out_dir, "profiles.png")
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    written.append(path)
    return written
