"""SE(3)/se(3) primitives shared by the prior kernel and every factor.

Conventions used throughout the package:

- Poses are 4x4 homogeneous matrices with an orthonormal rotation block and
  an exact [0 0 0 1] bottom row.
- Twists and strains are 6-vectors ordered [translation-part; rotation-part],
  i.e. ``x = [nu(3); omega(3)]``.
- ``exp_se3``/``log_se3`` use the closed-form Rodrigues expressions with a
  series fallback below ``SMALL_ANGLE`` so that both branches agree to 1e-10
  at the switchover.
"""

from __future__ import annotations

import numpy as np

# Small-angle thresholds: chosen so series and closed form agree within 1e-10.
SMALL_ANGLE = 1e-8       # exp/log switchover on |omega|
SMALL_TWIST = 1e-6       # left-Jacobian switchover on |x|

_EYE3 = np.eye(3)
_EYE6 = np.eye(6)


def skew3(v):
    """3-vector to skew-symmetric 3x3 matrix."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def unskew3(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def hat6(x):
    """se(3) hat operator: [nu; omega] -> 4x4 matrix."""
    out = np.zeros((4, 4))
    out[:3, :3] = skew3(x[3:6])
    out[:3, 3] = x[:3]
    return out


def vee6(m):
    """Inverse of ``hat6``. Rejects matrices outside the image of hat6."""
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ValueError("vee6 expects a 4x4 matrix")
    s = m[:3, :3]
    if np.max(np.abs(s + s.T)) > 1e-9:
        raise ValueError("vee6: 3x3 block is not skew-symmetric")
    if np.max(np.abs(m[3, :])) > 1e-9:
        raise ValueError("vee6: last row is not zero")
    return np.array([m[0, 3], m[1, 3], m[2, 3], m[2, 1], m[0, 2], m[1, 0]])


def curly6(x):
    """se(3) adjoint operator: [[skew(w), skew(v)], [0, skew(w)]]."""
    out = np.zeros((6, 6))
    w = skew3(x[3:6])
    out[:3, :3] = w
    out[:3, 3:] = skew3(x[:3])
    out[3:, 3:] = w
    return out


def so3_exp(w):
    """Rodrigues formula with quadratic series fallback for small angles."""
    angle = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    s = skew3(w)
    s2 = s @ s
    if angle < SMALL_ANGLE:
        return _EYE3 + s + 0.5 * s2
    a2 = angle * angle
    return _EYE3 + (np.sin(angle) / angle) * s + ((1.0 - np.cos(angle)) / a2) * s2


def so3_log(r):
    """Rotation matrix to rotation vector, |w| <= pi.

    The angle-pi neighbourhood uses the stable axis-extraction branch based
    on the dominant diagonal entry.
    """
    trace = r[0, 0] + r[1, 1] + r[2, 2]
    cos_angle = min(1.0, max(-1.0, 0.5 * (trace - 1.0)))
    angle = np.arccos(cos_angle)
    if angle < SMALL_ANGLE:
        # log(R) ~ (R - R^T)/2 for vanishing angle
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - angle < 1e-6:
        return _so3_log_near_pi(r, angle)
    scale = 0.5 * angle / np.sin(angle)
    return scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def _so3_log_near_pi(r, angle):
    # Near pi the sin-based formula is ill-conditioned; recover the axis from
    # R + I, whose dominant column is parallel to it.
    diag = np.array([r[0, 0], r[1, 1], r[2, 2]])
    k = int(np.argmax(diag))
    axis = np.empty(3)
    axis[k] = np.sqrt(max(0.0, 0.5 * (diag[k] + 1.0)))
    denom = 2.0 * axis[k]
    if k == 0:
        axis[1] = (r[0, 1] + r[1, 0]) * 0.5 / denom
        axis[2] = (r[0, 2] + r[2, 0]) * 0.5 / denom
    elif k == 1:
        axis[0] = (r[0, 1] + r[1, 0]) * 0.5 / denom
        axis[2] = (r[1, 2] + r[2, 1]) * 0.5 / denom
    else:
        axis[0] = (r[0, 2] + r[2, 0]) * 0.5 / denom
        axis[1] = (r[1, 2] + r[2, 1]) * 0.5 / denom
    axis /= np.linalg.norm(axis)
    # Fix the sign with the skew part, which vanishes only exactly at pi
    # (where both signs are valid logs).
    sin_part = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if axis @ sin_part < 0.0:
        axis = -axis
    # The trace-based angle loses half the digits near pi; the skew part gives
    # sin(pi - angle) directly and is well-conditioned there.
    angle = np.pi - np.arcsin(min(1.0, 0.5 * np.linalg.norm(sin_part)))
    return angle * axis


def so3_left_jacobian(w):
    angle = np.linalg.norm(w)
    s = skew3(w)
    s2 = s @ s
    if angle < SMALL_TWIST:
        return _EYE3 + 0.5 * s + s2 / 6.0 + (s2 @ s) / 24.0
    a2 = angle * angle
    return (_EYE3 + ((1.0 - np.cos(angle)) / a2) * s
            + ((angle - np.sin(angle)) / (a2 * angle)) * s2)


def so3_left_jacobian_inv(w):
    angle = np.linalg.norm(w)
    s = skew3(w)
    s2 = s @ s
    if angle < SMALL_TWIST:
        return _EYE3 - 0.5 * s + s2 / 12.0
    a2 = angle * angle
    coeff = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return _EYE3 - 0.5 * s + coeff * s2


def exp_se3(x):
    """se(3) twist to pose: Rodrigues rotation plus left-Jacobian translation."""
    out = np.eye(4)
    w = x[3:6]
    out[:3, :3] = so3_exp(w)
    out[:3, 3] = so3_left_jacobian(w) @ x[:3]
    return out


def log_se3(t):
    """Pose to twist with |omega| <= pi.

    Raises if the rotation block is not orthonormal (1e-6 gate; upstream code
    re-orthonormalizes after every multiplicative update).
    """
    r = t[:3, :3]
    if abs(r[0, :] @ r[0, :] - 1.0) > 1e-6 or abs(r[0, :] @ r[1, :]) > 1e-6:
        raise ValueError("log_se3: rotation block is not orthonormal")
    w = so3_log(r)
    out = np.empty(6)
    out[:3] = so3_left_jacobian_inv(w) @ t[:3, 3]
    out[3:] = w
    return out


def adjoint(t):
    """6x6 adjoint of a pose: Ad(T) x = vee6(T hat6(x) T^-1)."""
    out = np.zeros((6, 6))
    r = t[:3, :3]
    out[:3, :3] = r
    out[:3, 3:] = skew3(t[:3, 3]) @ r
    out[3:, 3:] = r
    return out


def _q_matrix(rho, w):
    """Upper-right block of the SE(3) left Jacobian (closed form)."""
    rx = skew3(rho)
    wx = skew3(w)
    angle = np.linalg.norm(w)
    a2 = angle * angle
    wr = wx @ rx
    rw = rx @ wx
    wrw = wr @ wx
    if angle < SMALL_TWIST:
        c1 = 1.0 / 6.0
        c2 = 1.0 / 24.0
        c3 = 1.0 / 120.0
    else:
        a3 = a2 * angle
        sa = np.sin(angle)
        ca = np.cos(angle)
        c1 = (angle - sa) / a3
        c2 = (a2 + 2.0 * ca - 2.0) / (2.0 * a2 * a2)
        c3 = (2.0 * angle - 3.0 * sa + angle * ca) / (2.0 * a2 * a3)
    return (0.5 * rx + c1 * (wr + rw + wx @ rw)
            + c2 * (wx @ wr + rw @ wx - 3.0 * wrw)
            + c3 * (wrw @ wx + wx @ wrw))


def left_jacobian(x):
    """SE(3) left Jacobian; truncated series below ``SMALL_TWIST``."""
    norm = np.linalg.norm(x)
    if norm < SMALL_TWIST:
        c = curly6(x)
        c2 = c @ c
        return _EYE6 + 0.5 * c + c2 / 6.0 + (c2 @ c) / 24.0 + (c2 @ c2) / 120.0
    jw = so3_left_jacobian(x[3:6])
    out = np.zeros((6, 6))
    out[:3, :3] = jw
    out[:3, 3:] = _q_matrix(x[:3], x[3:6])
    out[3:, 3:] = jw
    return out


def left_jacobian_inv(x):
    """Inverse SE(3) left Jacobian; Bernoulli series below ``SMALL_TWIST``."""
    norm = np.linalg.norm(x)
    if norm < SMALL_TWIST:
        c = curly6(x)
        c2 = c @ c
        return _EYE6 - 0.5 * c + c2 / 12.0 - (c2 @ c2) / 720.0
    jw_inv = so3_left_jacobian_inv(x[3:6])
    out = np.zeros((6, 6))
    out[:3, :3] = jw_inv
    out[:3, 3:] = -jw_inv @ _q_matrix(x[:3], x[3:6]) @ jw_inv
    out[3:, 3:] = jw_inv
    return out


def pose_inverse(t):
    out = np.eye(4)
    rt = t[:3, :3].T
    out[:3, :3] = rt
    out[:3, 3] = -rt @ t[:3, 3]
    return out


def project_rotation(r):
    """Nearest rotation matrix (SVD projection, det +1)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


def renormalize_pose(t):
    """Re-orthonormalize the rotation block and pin the bottom row exactly."""
    out = np.empty((4, 4))
    out[:3, :3] = project_rotation(t[:3, :3])
    out[:3, 3] = t[:3, 3]
    out[3, :] = (0.0, 0.0, 0.0, 1.0)
    return out


def is_valid_pose(t, tol=1e-9):
    t = np.asarray(t)
    if t.shape != (4, 4):
        return False
    r = t[:3, :3]
    if np.max(np.abs(r.T @ r - _EYE3)) > tol:
        return False
    if abs(np.linalg.det(r) - 1.0) > tol:
        return False
    return bool(np.all(t[3, :] == (0.0, 0.0, 0.0, 1.0)))


def require_pose(t, name="pose", tol=1e-9):
    if not is_valid_pose(t, tol=tol):
        raise ValueError(f"{name} is not a valid SE(3) pose")
    return t
