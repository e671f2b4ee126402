"""Rotations, rigid transforms, Gaussian kernels, space contraction and pose interpolation.

All functions are pure and operate on numpy arrays; batched variants accept a
leading N dimension. Quaternions are stored (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_backward(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient of quat_normalize: d(q/|q|)/dq applied to grad_unit."""
    q_raw = np.asarray(q_raw)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / n
    # J = (I - u u^T) / n
    dot = np.sum(grad_unit * u, axis=-1, keepdims=True)
    return (grad_unit - u * dot) / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) to rotation matrix/matrices (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(np.asarray(q).shape[:-1] + (3, 3))


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat w.r.t. the (unit) quaternion, shape (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    g = grad_R.reshape(grad_R.shape[:-2] + (9,))
    g00, g01, g02, g10, g11, g12, g20, g21, g22 = np.moveaxis(g, -1, 0)
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=-1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix to unit quaternion (w >= 0 hemisphere)."""
    R = np.asarray(R)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s])
    elif m00 > m11 and m00 > m22:
        s = np.sqrt(1.0 + m00 - m11 - m22) * 2
        q = np.array([(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s])
    elif m11 > m22:
        s = np.sqrt(1.0 + m11 - m00 - m22) * 2
        q = np.array([(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s])
    else:
        s = np.sqrt(1.0 + m22 - m00 - m11) * 2
        q = np.array([(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical-linear interpolation along the shortest geodesic."""
    q0 = quat_normalize(np.asarray(q0, dtype=np.float64))
    q1 = quat_normalize(np.asarray(q1, dtype=np.float64))
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q0 + u * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return quat_normalize((np.sin((1.0 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def antivee(X: np.ndarray) -> np.ndarray:
    """<X, skew(v)> = antivee(X) . v for any v."""
    return np.array([X[2, 1] - X[1, 2], X[0, 2] - X[2, 0], X[1, 0] - X[0, 1]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    S = skew(w)
    if angle < 1e-8:
        return np.eye(3) + S + 0.5 * (S @ S)
    a, b = np.sin(angle) / angle, (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * S + b * (S @ S)


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    """Left Jacobian of so(3) exp; maps tangent increments to rotation increments."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    S = skew(w)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * S + c2 * (S @ S)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class RigidTransform:
    """Child-to-parent rigid map: p_parent = R p_child + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = UNIT_TOL) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol) and np.linalg.det(R) > 0.0
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )


def compose_backward(A: RigidTransform, B: RigidTransform, grad_R: np.ndarray, grad_t: np.ndarray):
    """Backward of F = A o B given matrix gradients (dL/dR_F, dL/dt_F).

    Returns ((dL/dR_A, dL/dt_A), (dL/dR_B, dL/dt_B)).
    """
    gR_A = grad_R @ B.rotation.T + np.outer(grad_t, B.translation)
    gt_A = grad_t
    gR_B = A.rotation.T @ grad_R
    gt_B = A.rotation.T @ grad_t
    return (gR_A, gt_A), (gR_B, gt_B)


SE3 = "se3"
SE2_UPRIGHT = "se2-upright"


@dataclass
class TangentResidual:
    """Small pose correction: se3 is (tx, ty, tz, wx, wy, wz), se2-upright is (tx, ty, yaw)."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = 6 if self.kind == SE3 else 3
        if self.kind not in (SE3, SE2_UPRIGHT):
            raise ValueError(f"unknown residual kind {self.kind!r}")
        if self.values.shape != (expected,):
            raise ValueError(f"{self.kind} residual expects {expected} values")

    @staticmethod
    def zero(kind: str) -> "TangentResidual":
        return TangentResidual(kind, np.zeros(6 if kind == SE3 else 3))


def residual_exp(kind: str, values: np.ndarray) -> RigidTransform:
    """Residual as a transform in the parent frame (rotation exp, plain translation)."""
    values = np.asarray(values, dtype=np.float64)
    if kind == SE3:
        return RigidTransform(so3_exp(values[3:]), values[:3].copy())
    if kind == SE2_UPRIGHT:
        return RigidTransform(rotation_z(values[2]), np.array([values[0], values[1], 0.0]))
    raise ValueError(f"unknown residual kind {kind!r}")


def apply_residual(base: RigidTransform, residual: TangentResidual) -> RigidTransform:
    """Left-composed correction in the base pose's parent frame: Exp(r) o base."""
    if not np.any(residual.values):
        return base
    return residual_exp(residual.kind, residual.values) @ base


def residual_backward(
    residual: TangentResidual,
    base: RigidTransform,
    grad_R: np.ndarray,
    grad_t: np.ndarray,
) -> np.ndarray:
    """Gradient of a loss w.r.t. residual values, given matrix gradients of Exp(r) o base."""
    E = residual_exp(residual.kind, residual.values)
    (gR_E, gt_E), _ = compose_backward(E, base, grad_R, grad_t)
    if residual.kind == SE3:
        theta = residual.values[3:]
        # dExp(theta)/dtheta_i = skew(J_l e_i) Exp(theta)
        g_theta = so3_left_jacobian(theta).T @ antivee(gR_E @ E.rotation.T)
        return np.concatenate([gt_E, g_theta])
    yaw = residual.values[2]
    c, s = np.cos(yaw), np.sin(yaw)
    dRz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    return np.array([gt_E[0], gt_E[1], float(np.sum(gR_E * dRz))])


def build_covariance(q: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Sigma = R(q) diag(a)^2 R(q)^T for unit quaternion(s) and positive scale(s)."""
    R = quat_to_rotmat(q)
    a = np.asarray(a)
    M = R * a[..., None, :]  # R @ diag(a)
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(q_unit: np.ndarray, a: np.ndarray, grad_cov: np.ndarray):
    """Backward of build_covariance: gradients w.r.t. the unit quaternion(s) and scale(s)."""
    R = quat_to_rotmat(q_unit)
    Gs = grad_cov + np.swapaxes(grad_cov, -1, -2)
    g_R = (Gs @ R) * (a * a)[..., None, :]
    g_a = 2.0 * a * np.einsum("...ki,...kl,...li->...i", R, grad_cov, R)
    return quat_to_rotmat_backward(q_unit, g_R), g_a


def quat_left_matrix(a: np.ndarray) -> np.ndarray:
    """Matrix L with quat_multiply(a, b) = L @ b."""
    w, x, y, z = a
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def normalize_rows_backward(v: np.ndarray, grad_d: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    d = v / n
    return (grad_d - d * np.sum(grad_d * d, axis=-1, keepdims=True)) / n


def eval_gaussian3d(mean: np.ndarray, cov: np.ndarray, x: np.ndarray) -> float:
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


def contract_space(x: np.ndarray, norm: str = "infinity") -> np.ndarray:
    """Bounded reparameterization: identity inside the unit ball, (2 - 1/|x|) x/|x| outside.

    norm is "infinity" or "frobenius"; output norm is < 2.
    """
    x = np.asarray(x)
    if norm == "infinity":
        r = np.max(np.abs(x), axis=-1, keepdims=True)
    elif norm == "frobenius":
        r = np.linalg.norm(x, axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    safe = np.maximum(r, 1e-30)
    scale = np.where(r <= 1.0, 1.0, (2.0 - 1.0 / safe) / safe)
    return x * scale


def contract_space_backward(x: np.ndarray, norm: str, grad_y: np.ndarray) -> np.ndarray:
    """Jacobian-transpose product of contract_space at x."""
    x = np.asarray(x)
    if norm == "infinity":
        r = np.max(np.abs(x), axis=-1, keepdims=True)
        # dr/dx: one-hot at the argmax component, signed
        amax = np.argmax(np.abs(x), axis=-1)
        dr = np.zeros_like(x)
        np.put_along_axis(dr, amax[..., None], np.take_along_axis(np.sign(x), amax[..., None], -1), -1)
    elif norm == "frobenius":
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        dr = x / np.maximum(r, 1e-30)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    safe = np.maximum(r, 1e-30)
    g = (2.0 - 1.0 / safe) / safe  # y = g(r) x
    dg = -2.0 / safe**2 + 2.0 / safe**3
    inside = r <= 1.0
    # grad_x = g * grad_y + (dg * (grad_y . x)) dr
    dot = np.sum(grad_y * x, axis=-1, keepdims=True)
    out = g * grad_y + dg * dot * dr
    return np.where(inside, grad_y, out)


def track_bracket(times: np.ndarray, t: float):
    """Clamped bracketing interval (i0, i1, u) for interpolation along a keyframe track."""
    times = np.asarray(times)
    n = len(times)
    if n == 0:
        raise ValueError("empty object track")
    if t <= times[0]:
        return 0, 0, 0.0
    if t >= times[-1]:
        return n - 1, n - 1, 0.0
    i1 = int(np.searchsorted(times, t, side="right"))
    i0 = i1 - 1
    if times[i0] == t:
        return i0, i0, 0.0
    u = float((t - times[i0]) / (times[i1] - times[i0]))
    return i0, i1, u


def interpolate_pose_track(
    times: np.ndarray, quats: np.ndarray, translations: np.ndarray, t: float
) -> RigidTransform:
    """Lerp translations and slerp rotations between bracketing keyframes; clamps outside."""
    i0, i1, u = track_bracket(times, t)
    if i0 == i1:
        return RigidTransform(quat_to_rotmat(quat_normalize(quats[i0])), translations[i0])
    q = quat_slerp(quats[i0], quats[i1], u)
    tr = (1.0 - u) * translations[i0] + u * translations[i1]
    return RigidTransform(quat_to_rotmat(q), tr)
