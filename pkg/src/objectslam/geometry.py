"""SE(3) pose algebra shared by the whole toolkit.

Conventions, fixed repo-wide:
  * unit quaternions stored as (w, x, y, z)
  * tangent vectors are (rx, ry, rz, tx, ty, tz) -- rotation first
  * right perturbations: retract(p, d) = p * exp(d)

Points and tangents are plain float ndarrays of shape (3,) and (6,).
Most helpers broadcast over leading axes so the optimizer can run them on
stacked arrays without a Python loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


# ---------------------------------------------------------------------------
# quaternion helpers (broadcast over leading axes, layout (w, x, y, z))
# ---------------------------------------------------------------------------

def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross carries heavy axis-normalization overhead on small arrays
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + _cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * _cross(qv, v)
    return v + w * t + _cross(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_from_rotation_matrix(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion of a single 3x3 rotation matrix (Shepperd's method)."""
    rot = np.asarray(rot, dtype=float)
    trace = np.trace(rot)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (rot[2, 1] - rot[1, 2]) / s,
                      (rot[0, 2] - rot[2, 0]) / s,
                      (rot[1, 0] - rot[0, 1]) / s])
        return quat_normalize(q)
    i = int(np.argmax(np.diag(rot)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(rot[i, i] - rot[j, j] - rot[k, k] + 1.0) * 2.0
    q = np.zeros(4)
    q[0] = (rot[k, j] - rot[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (rot[j, i] + rot[i, j]) / s
    q[1 + k] = (rot[k, i] + rot[i, k]) / s
    return quat_normalize(q)


def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential, returned as a unit quaternion."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(theta/2)/theta with series fallback near zero
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), s * omega], axis=-1)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion (angle in [0, pi])."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)  # canonical hemisphere
    w = q[..., :1]
    v = q[..., 1:]
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(nv, w)
    small = nv < _SMALL_ANGLE
    safe = np.where(small, 1.0, nv)
    scale = np.where(small, 2.0 / np.maximum(w, _SMALL_ANGLE), angle / safe)
    return scale * v


def _v_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe ** 3))
    return a, b


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b = _v_coeffs(theta)
    s = skew(omega)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + a[..., None, None] * s + b[..., None, None] * s2


def _v_inv_matrix(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    # (1 - (theta/2) cot(theta/2)) / theta^2, stable for theta in [0, pi]
    half = 0.5 * safe
    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (safe * safe),
    )
    s = skew(omega)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye - 0.5 * s + c[..., None, None] * s2


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map: tangent (..., 6) -> (quaternion, translation)."""
    xi = np.asarray(xi, dtype=float)
    omega = xi[..., :3]
    rho = xi[..., 3:]
    q = so3_exp_quat(omega)
    t = np.einsum("...ij,...j->...i", _v_matrix(omega), rho)
    return q, t


def se3_log(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Logarithm map: (quaternion, translation) -> tangent (..., 6)."""
    omega = so3_log_quat(q)
    rho = np.einsum("...ij,...j->...i", _v_inv_matrix(omega), np.asarray(t, dtype=float))
    return np.concatenate([omega, rho], axis=-1)


def se3_adjoint(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Adjoint of the transform, mapping right-tangents: Exp(Ad x) = T Exp(x) T^-1."""
    rot = quat_to_matrix(q)
    out = np.zeros(rot.shape[:-2] + (6, 6))
    out[..., :3, :3] = rot
    out[..., 3:, 3:] = rot
    out[..., 3:, :3] = skew(t) @ rot
    return out


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """Adjoint representation of a tangent vector (Lie bracket matrix)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    w = skew(xi[..., :3])
    out[..., :3, :3] = w
    out[..., 3:, 3:] = w
    out[..., 3:, :3] = skew(xi[..., 3:])
    return out


def _jrinv_coeffs(terms: int = 20) -> tuple[float, ...]:
    """Bernoulli B_2k / (2k)! coefficients of the inverse-Jacobian series."""
    import math

    from scipy.special import bernoulli

    bern = bernoulli(2 * terms)
    return tuple(float(bern[2 * k] / math.factorial(2 * k)) for k in range(1, terms + 1))


# 20 even-order terms keep the series at machine precision up to ||rotation|| ~ pi
_JRINV_COEFFS = _jrinv_coeffs()


def se3_jr_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: Log(Exp(xi) Exp(d)) ~= xi + jr_inv(xi) d."""
    ad = se3_ad(xi)
    out = np.broadcast_to(np.eye(6), ad.shape).copy()
    out += 0.5 * ad
    ad2 = ad @ ad
    power = ad2
    for coeff in _JRINV_COEFFS:
        out += coeff * power
        power = power @ ad2
    return out


# ---------------------------------------------------------------------------
# Pose3
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose3:
    """Rigid transform: rotation as unit quaternion (w,x,y,z), translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4))
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose components")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_tangent(xi: np.ndarray) -> "Pose3":
        q, t = se3_exp(np.asarray(xi, dtype=float).reshape(6))
        return Pose3(q, t)

    @staticmethod
    def _trusted(q: np.ndarray, t: np.ndarray) -> "Pose3":
        """Skip validation/normalization; q must already be unit (hot paths only)."""
        pose = object.__new__(Pose3)
        object.__setattr__(pose, "rotation", q)
        object.__setattr__(pose, "translation", t)
        return pose

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        """Transform point(s) from the local frame into the parent frame."""
        return quat_rotate(self.rotation, point) + self.translation

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix()
        out[:3, 3] = self.translation
        return out


def compose(a: Pose3, b: Pose3) -> Pose3:
    return Pose3(quat_mul(a.rotation, b.rotation), a.apply(b.translation))


def inverse(p: Pose3) -> Pose3:
    qinv = quat_conj(p.rotation)
    return Pose3(qinv, -quat_rotate(qinv, p.translation))


def measurement_model_h(pose: Pose3, landmark: np.ndarray) -> np.ndarray:
    """Predicted landmark position in the sensor frame: inverse(pose) applied to it."""
    lm = np.asarray(landmark, dtype=float)
    return quat_rotate(quat_conj(pose.rotation), lm - pose.translation)


def measurement_jacobians(pose: Pose3, landmark: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of measurement_model_h w.r.t. a right pose perturbation and the point.

    Returns (H_pose 3x6 in (r, t) tangent order, H_landmark 3x3).
    """
    h0 = measurement_model_h(pose, landmark)
    h_pose = np.hstack([skew(h0), -np.eye(3)])
    h_lm = pose.rotation_matrix().T
    return h_pose, h_lm


def retract(pose: Pose3, delta: np.ndarray) -> Pose3:
    return compose(pose, Pose3.from_tangent(delta))


def local(a: Pose3, b: Pose3) -> np.ndarray:
    """Tangent taking a to b: local(a, retract(a, d)) = d."""
    rel = compose(inverse(a), b)
    return se3_log(rel.rotation, rel.translation)


# ---------------------------------------------------------------------------
# trajectory text format: one line per pose, `t x y z qx qy qz qw`
# ---------------------------------------------------------------------------

def save_trajectory(path, trajectory: list[tuple[float, Pose3]]) -> None:
    with open(path, "w") as f:
        for t, pose in trajectory:
            w, x, y, z = pose.rotation
            tx, ty, tz = pose.translation
            f.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def load_trajectory(path) -> list[tuple[float, Pose3]]:
    from .errors import DataFormatError

    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            t, tx, ty, tz, x, y, z, w = map(float, fields)
            out.append((t, Pose3(np.array([w, x, y, z]), np.array([tx, ty, tz]))))
    return out
