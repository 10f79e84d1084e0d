"""Pinhole camera model and SE(3) / Sim(3) primitives.

Conventions: points are stored column-wise as 3xN arrays, pixels as 2xN.
A twist is ordered (omega, v), rotation first.  All arithmetic is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, GeometryError, InvalidDepthError

# Below this rotation angle exp/log use Taylor expansions of their coefficients.
SMALL_ANGLE = 1e-6
# Validation tolerance for rotation matrices (Frobenius norm of R^T R - I).
ORTHO_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise GeometryError("principal point must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_string(cls, text: str) -> "CameraIntrinsics":
        """Parse ``"fx,fy,cx,cy"``."""
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 4:
            raise GeometryError(f"expected 4 comma-separated intrinsics, got {text!r}")
        return cls(*parts)


def rotation_defect(R: np.ndarray) -> tuple[float, float]:
    """Return (||R^T R - I||_F, |det R - 1|)."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.linalg.norm(R.T @ R - np.eye(3))), float(abs(np.linalg.det(R) - 1.0))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError(f"bad pose shapes {R.shape}, {t.shape}")
        ortho, det = rotation_defect(R)
        if ortho > ORTHO_TOL or det > ORTHO_TOL:
            raise GeometryError(f"rotation is not in SO(3): |RtR-I|={ortho:.3g}, |det-1|={det:.3g}")
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray, orthonormalize: bool = False) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        if orthonormalize:
            R = nearest_rotation(R)
        return cls(R, T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def transform(self, P: np.ndarray) -> np.ndarray:
        return transform(self, P)

    def orthonormalized(self) -> "Pose":
        return Pose(nearest_rotation(self.rotation), self.translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        w = se3_log(self)
        return f"Pose(angle={np.linalg.norm(w.omega):.6g} rad, t={np.array2string(self.translation, precision=6)})"


@dataclass(frozen=True, eq=False)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        w = _frozen(self.omega).reshape(-1)
        v = _frozen(self.v).reshape(-1)
        if w.shape != (3,) or v.shape != (3,):
            raise GeometryError("twist components must be 3-vectors")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise GeometryError("twist must be finite")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, x) -> "Twist":
        x = np.asarray(x, dtype=np.float64).reshape(6)
        return cls(x[:3], x[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity x -> s R x + t."""

    scale: float
    pose: Pose

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise GeometryError(f"Sim3 scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, Pose())

    def apply(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        return self.scale * (self.pose.rotation @ P) + self.pose.translation[:, None]

    def apply_to_pose(self, T: Pose) -> Pose:
        """Map a camera-to-world pose into the aligned world frame (rotation unscaled)."""
        R = self.pose.rotation
        return Pose(R @ T.rotation, self.scale * (R @ T.translation) + self.pose.translation)


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def as_points(P, rows: int = 3) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 1:
        P = P.reshape(rows, 1)
    if P.ndim != 2 or P.shape[0] != rows:
        raise GeometryError(f"expected a {rows}xN array, got shape {P.shape}")
    return P


def project(P, K: CameraIntrinsics, return_mask: bool = False):
    """Pinhole projection of 3xN camera-frame points to 2xN pixels.

    Points with Z <= 0 raise BehindCameraError.  With ``return_mask=True``
    they are reported in a boolean validity mask instead and their pixel
    entries are NaN.
    """
    P = as_points(P)
    Z = P[2]
    valid = Z > 0
    if not return_mask and not np.all(valid):
        bad = np.flatnonzero(~valid)
        raise BehindCameraError(f"{bad.size} point(s) behind the camera, first index {bad[0]}")
    safe_Z = np.where(valid, Z, 1.0)
    uv = np.empty((2, P.shape[1]))
    uv[0] = K.fx * P[0] / safe_Z + K.cx
    uv[1] = K.fy * P[1] / safe_Z + K.cy
    if return_mask:
        uv[:, ~valid] = np.nan
        return uv, valid
    return uv


def unproject(p, d, K: CameraIntrinsics) -> np.ndarray:
    """Lift 2xN pixels with depths d (N,) to 3xN camera-frame points."""
    p = as_points(p, 2)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.shape[0] != p.shape[1]:
        raise GeometryError(f"{p.shape[1]} pixels but {d.shape[0]} depths")
    if not np.all(d > 0):
        raise InvalidDepthError(f"{int(np.sum(~(d > 0)))} non-positive or NaN depth(s)")
    return np.stack([(p[0] - K.cx) * d / K.fx, (p[1] - K.cy) * d / K.fy, d])


def _exp_coefficients(theta: float) -> tuple[float, float, float]:
    """A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    half = math.sin(0.5 * theta) / (0.5 * theta)
    # Cancellation-free forms: 1 - cos t = 2 sin^2(t/2); t - sin t by series when small.
    B = 0.5 * half * half
    if theta < 0.05:
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
    else:
        C = (theta - math.sin(theta)) / (t2 * theta)
    return math.sin(theta) / theta, B, C


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    A, B, _ = _exp_coefficients(theta)
    W = hat(omega)
    return np.eye(3) + A * W + B * (W @ W)


def se3_exp(x) -> Pose:
    """Exponential map se(3) -> SE(3) (Rodrigues closed form)."""
    if not isinstance(x, Twist):
        x = Twist.from_vector(x)
    theta = float(np.linalg.norm(x.omega))
    A, B, C = _exp_coefficients(theta)
    W = hat(x.omega)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return Pose(R, V @ x.v)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    axis_sin = 0.5 * vee(R - R.T)  # = sin(theta) * axis
    s = float(np.linalg.norm(axis_sin))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta < SMALL_ANGLE:
        return (1.0 + theta * theta / 6.0) * axis_sin
    if s > 1e-4 or c > 0:
        return theta / s * axis_sin
    # Near pi the antisymmetric part vanishes; recover the axis from the
    # symmetric part R + R^T = 2c I + 2(1 - c) a a^T.
    S = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    a = S[:, k] / math.sqrt(max(S[k, k], 1e-300))
    a /= np.linalg.norm(a)
    if np.dot(a, axis_sin) < 0:
        a = -a
    return theta * a


def se3_log(X: Pose) -> Twist:
    omega = so3_log(X.rotation)
    theta = float(np.linalg.norm(omega))
    W = hat(omega)
    if theta < SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        A, B, _ = _exp_coefficients(theta)
        coef = (1.0 - A / (2.0 * B)) / (theta * theta)
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(omega, V_inv @ X.translation)


def compose(A: Pose, B: Pose) -> Pose:
    """A * B: apply B first, then A."""
    return Pose(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(A: Pose) -> Pose:
    Rt = A.rotation.T
    return Pose(Rt, -(Rt @ A.translation))


def transform(X: Pose, P) -> np.ndarray:
    P = as_points(P)
    return X.rotation @ P + X.translation[:, None]


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    return float(np.linalg.norm(so3_log(R)))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(rotation angle in rad, translation norm) of estimate relative to truth."""
    return (
        rotation_angle(truth.rotation.T @ estimate.rotation),
        float(np.linalg.norm(estimate.translation - truth.translation)),
    )


def apply_homography(p, H: np.ndarray, return_mask: bool = False, eps: float = 1e-12):
    """Map 2xN pixels through a 3x3 homography.

    Points whose projective coordinate w is (near) zero map to infinity; they
    raise unless ``return_mask`` is set, in which case they come back as NaN
    with a False mask entry.
    """
    p = np.asarray(p, dtype=np.float64).reshape(2, -1)
    H = np.asarray(H, dtype=np.float64)
    q = H @ np.vstack([p, np.ones(p.shape[1])])
    valid = np.abs(q[2]) > eps * np.abs(H).max()
    if not return_mask and not np.all(valid):
        raise GeometryError("homography maps a point to infinity")
    w = np.where(valid, q[2], 1.0)
    out = q[:2] / w
    out[:, ~valid] = np.nan
    return (out, valid) if return_mask else out
