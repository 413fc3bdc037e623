"""Rotations, rigid transforms, and the Lie-group helpers used by the solvers.

Conventions used across the package:

* quaternions are stored ``[w, x, y, z]`` and kept normalized,
* rotation vectors / tangents use radians,
* SE(3) tangents are 6-vectors ordered ``[rotation, translation]``,
* perturbations compose on the left: ``T <- Exp(xi) @ T``.

Most helpers broadcast over leading axes so callers can evaluate batches of
factors without Python loops.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, broadcasting over leading axes: skew(v) @ u = v x u."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def unskew(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


# ---------------------------------------------------------------------------
# quaternion primitives (batched)
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of ``[w, x, y, z]`` quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < _EPS
    # sin(x)/x with a series fallback so the gradient stays exact at zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    xyz = rotvec * k
    return np.concatenate([w, xyz], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    # keep w >= 0 for the shortest arc
    q = np.where(q[..., :1] < 0.0, -q, q)
    n = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    w = q[..., :1]
    small = n < _EPS
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(
            small,
            2.0 / np.where(w == 0.0, 1.0, w) * (1.0 - n**2 / (3.0 * w**2)),
            2.0 * np.arctan2(n, w) / np.where(small, 1.0, n),
        )
    return q[..., 1:] * scale


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion via the largest-pivot construction."""
    m = np.asarray(m, dtype=float)
    batch = m.shape[:-2]
    mm = m.reshape((-1, 3, 3))
    n = mm.shape[0]
    qs = np.empty((n, 4, 4), dtype=float)
    t = np.trace(mm, axis1=-2, axis2=-1)
    # candidate 0: pivot on w
    qs[:, 0, 0] = 1.0 + t
    qs[:, 0, 1] = mm[:, 2, 1] - mm[:, 1, 2]
    qs[:, 0, 2] = mm[:, 0, 2] - mm[:, 2, 0]
    qs[:, 0, 3] = mm[:, 1, 0] - mm[:, 0, 1]
    # candidate 1: pivot on x
    qs[:, 1, 0] = mm[:, 2, 1] - mm[:, 1, 2]
    qs[:, 1, 1] = 1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]
    qs[:, 1, 2] = mm[:, 0, 1] + mm[:, 1, 0]
    qs[:, 1, 3] = mm[:, 0, 2] + mm[:, 2, 0]
    # candidate 2: pivot on y
    qs[:, 2, 0] = mm[:, 0, 2] - mm[:, 2, 0]
    qs[:, 2, 1] = mm[:, 0, 1] + mm[:, 1, 0]
    qs[:, 2, 2] = 1.0 - mm[:, 0, 0] + mm[:, 1, 1] - mm[:, 2, 2]
    qs[:, 2, 3] = mm[:, 1, 2] + mm[:, 2, 1]
    # candidate 3: pivot on z
    qs[:, 3, 0] = mm[:, 1, 0] - mm[:, 0, 1]
    qs[:, 3, 1] = mm[:, 0, 2] + mm[:, 2, 0]
    qs[:, 3, 2] = mm[:, 1, 2] + mm[:, 2, 1]
    qs[:, 3, 3] = 1.0 - mm[:, 0, 0] - mm[:, 1, 1] + mm[:, 2, 2]
    pivots = np.stack(
        [1.0 + t, 1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2],
         1.0 - mm[:, 0, 0] + mm[:, 1, 1] - mm[:, 2, 2],
         1.0 - mm[:, 0, 0] - mm[:, 1, 1] + mm[:, 2, 2]],
        axis=-1,
    )
    best = np.argmax(pivots, axis=-1)
    q = qs[np.arange(n), best]
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    return q.reshape(batch + (4,))


def _cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross spends most of its time reshuffling axes, which dominates on
    # the (3,)-vector calls the pose algebra makes; spell the product out.
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors by quaternions (broadcasting)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    cross = _cross3(u, v)
    return v + 2.0 * (w * cross + _cross3(u, cross))


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rotation vector to rotation matrix (batched)."""
    return quat_to_matrix(quat_from_rotvec(rotvec))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to rotation vector (batched, shortest arc)."""
    return quat_to_rotvec(matrix_to_quat(R))


def _jac_coeffs(angle: np.ndarray):
    """Coefficients a = (1-cos)/t^2, b = (t-sin)/t^3 with series fallbacks."""
    t2 = angle * angle
    small = angle < 1e-4
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / np.where(small, 1.0, t2))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / np.where(small, 1.0, t2 * safe))
    return a, b


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1)
    a, b = _jac_coeffs(angle)
    S = skew(phi)
    eye = np.broadcast_to(np.eye(3), S.shape)
    return eye + a[..., None, None] * S + b[..., None, None] * (S @ S)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1)
    t2 = angle * angle
    small = angle < 1e-4
    safe = np.where(small, 1.0, angle)
    half = 0.5 * safe
    # (1/t^2)(1 - t sin / (2(1-cos)))  ==  (1 - (t/2) cot(t/2)) / t^2
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(
            small,
            1.0 / 12.0 + t2 / 720.0,
            (1.0 - half * np.cos(half) / np.sin(half)) / np.where(small, 1.0, t2),
        )
    S = skew(phi)
    eye = np.broadcast_to(np.eye(3), S.shape)
    return eye - 0.5 * S + c[..., None, None] * (S @ S)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


# ---------------------------------------------------------------------------
# Rotation / Pose value types
# ---------------------------------------------------------------------------


class Rotation:
    """A unit-quaternion rotation. Composition renormalizes."""

    __slots__ = ("q",)

    def __init__(self, q: np.ndarray):
        self.q = quat_normalize(np.asarray(q, dtype=float).reshape(4))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, rotvec) -> "Rotation":
        return cls(quat_from_rotvec(np.asarray(rotvec, dtype=float).reshape(3)))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        return cls(matrix_to_quat(np.asarray(m, dtype=float).reshape(3, 3)))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def as_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.q)

    def inverse(self) -> "Rotation":
        return Rotation(quat_conj(self.q))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(v, dtype=float))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_mul(self.q, other.q))

    def __repr__(self) -> str:
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


class Pose:
    """Rigid transform ``x -> R x + t``."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation.as_matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point or an (N, 3) array of points."""
        return self.rotation.apply(points) + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self.translation, precision=6)})"


# ---------------------------------------------------------------------------
# SE(3)
# ---------------------------------------------------------------------------


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a ``[rot, trans]`` tangent 6-vector."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    R = Rotation.from_rotvec(phi)
    t = so3_left_jacobian(phi) @ rho
    return Pose(R, t)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map; inverse of :func:`se3_exp`.

    Raises ValueError within numerical precision of a pi rotation where the
    axis (and hence the tangent) is not uniquely defined.
    """
    phi = pose.rotation.as_rotvec()
    if np.pi - np.linalg.norm(phi) < 1e-6:
        raise ValueError("se3_log: rotation angle within 1e-6 of pi, tangent is ambiguous")
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([phi, rho])


def se3_adjoint(pose: Pose) -> np.ndarray:
    """Adjoint matrix mapping tangents: Ad(T) xi = Log(T Exp(xi) T^-1)."""
    R = pose.rotation.as_matrix()
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[3:, :3] = skew(pose.translation) @ R
    return out


def _se3_Q(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    t = float(np.linalg.norm(phi))
    P = skew(phi)
    Rho = skew(rho)
    if t < 1e-4:
        c1 = 1.0 / 6.0 - t * t / 120.0
        c2 = -1.0 / 24.0 + t * t / 720.0
        d = -1.0 / 120.0 + t * t / 5040.0
    else:
        c1 = (t - np.sin(t)) / t**3
        c2 = (1.0 - t * t / 2.0 - np.cos(t)) / t**4
        d = (t - np.sin(t) - t**3 / 6.0) / t**5
    c3 = 0.5 * (c2 - 3.0 * d)
    PR = P @ Rho
    RP = Rho @ P
    return (
        0.5 * Rho
        + c1 * (PR + RP + P @ RP)
        - c2 * (P @ PR + RP @ P - 3.0 * PR @ P)
        - c3 * (PR @ P @ P + P @ PR @ P)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_Q(phi, rho)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    phi, rho = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_Q(phi, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares similarity/rigid alignment ``dst ~ s R src + t``.

    Args:
        src: (N, 3) source points, N >= 3.
        dst: (N, 3) target points, same shape.
        with_scale: estimate a uniform scale; otherwise s = 1.

    Returns:
        (pose, scale): a :class:`Pose` with the rotation/translation, and the
        scale factor.

    Raises:
        ValueError: on mismatched shapes, fewer than 3 points, or a degenerate
            (rank-deficient) configuration with no unique rotation.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("umeyama_align: src/dst must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise ValueError("umeyama_align: need at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise ValueError("umeyama_align: degenerate point configuration")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    if with_scale:
        var_s = (xs**2).sum() / n
        scale = float(np.trace(np.diag(S) @ D) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * (R @ mu_s)
    return Pose(Rotation.from_matrix(R), t), scale
