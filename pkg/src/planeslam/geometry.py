"""Rigid transforms, pinhole projection and plane/line primitives.

Conventions used throughout the package:

* ``T_cw`` maps world points into the camera frame, ``p_c = R p_w + t``.
* A plane ``(n, d)`` holds the points with ``n . p + d = 0``; ``n`` is unit
  length and the sign is canonical (``d >= 0``, ties at ``d == 0`` broken by
  keeping the lexicographically larger normal).
* Camera frame: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import BehindCamera, DegeneratePlane

NORMAL_EPS = 1e-12
ZERO_OFFSET_EPS = 1e-12
MIN_DEPTH = 1e-6


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def as_points(points) -> np.ndarray:
    """Return ``points`` as an ``(N, 3)`` float array (N may be 0)."""
    a = np.asarray(points, dtype=float)
    if a.size == 0:
        return np.zeros((0, 3))
    a = a.reshape(-1, 3) if a.ndim == 1 else a
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {a.shape}")
    return a


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def so3_exp(omega) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=float)).as_matrix()


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return (np.eye(3) + (1.0 - math.cos(theta)) / t2 * W
            + (theta - math.sin(theta)) / (t2 * theta) * W @ W)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation acting as ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = as_vec3(self.translation).copy()
        if (np.abs(R.T @ R - np.eye(3)).max() > 1e-6
                or abs(np.linalg.det(R) - 1.0) > 1e-6):
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q_xyzw, translation) -> "RigidTransform":
        q = np.asarray(q_xyzw, dtype=float)
        q = q / np.linalg.norm(q)
        return cls(Rotation.from_quat(q).as_matrix(), translation)

    @classmethod
    def exp(cls, xi) -> "RigidTransform":
        """SE(3) exponential of ``xi = (omega, v)``."""
        xi = np.asarray(xi, dtype=float)
        omega, v = xi[:3], xi[3:]
        return cls(so3_exp(omega), _left_jacobian(omega) @ v)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self * other``: apply ``other`` first."""
        return RigidTransform(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def retract(self, xi) -> "RigidTransform":
        """Left-perturb: ``exp(xi) * self``, re-orthonormalized."""
        return RigidTransform.exp(xi).compose(self)

    def center(self) -> np.ndarray:
        """Position of the frame origin expressed in the source frame."""
        return -self.rotation.T @ self.translation

    def allclose(self, other: "RigidTransform", atol=1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))


def rotation_angle_between(A: RigidTransform, B: RigidTransform) -> float:
    """Geodesic angle (radians) between the rotations of two transforms."""
    dR = A.rotation.T @ B.rotation
    c = np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``."""
    eye = as_vec3(eye)
    z = as_vec3(target) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, as_vec3(up))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return RigidTransform(R, -R @ eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PixelBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self}")

    @classmethod
    def from_pixels(cls, uv) -> "PixelBox":
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        lo, hi = uv.min(axis=0), uv.max(axis=0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        return ((uv[:, 0] >= self.x_min) & (uv[:, 0] <= self.x_max)
                & (uv[:, 1] >= self.y_min) & (uv[:, 1] <= self.y_max))

    def clip(self, K: CameraIntrinsics) -> "PixelBox":
        return PixelBox(min(max(self.x_min, 0.0), K.width),
                        min(max(self.y_min, 0.0), K.height),
                        min(max(self.x_max, 0.0), K.width),
                        min(max(self.y_max, 0.0), K.height))

    def pad(self, px: float) -> "PixelBox":
        return PixelBox(self.x_min - px, self.y_min - px,
                        self.x_max + px, self.y_max + px)


def _canonical(n: np.ndarray, d: float):
    if abs(d) <= ZERO_OFFSET_EPS:
        d = 0.0
        if tuple(-n) > tuple(n):
            n = -n
    elif d < 0:
        n, d = -n, -d
    return n + 0.0, float(d) + 0.0


@dataclass(frozen=True, eq=False)
class Plane:
    """Hessian-form plane; normalized and sign-canonicalized on construction."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = as_vec3(self.n)
        norm = float(np.linalg.norm(n))
        if norm <= NORMAL_EPS:
            raise DegeneratePlane(f"normal norm {norm:.3g} is too small")
        n, d = _canonical(n / norm, float(self.d) / norm)
        n.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", d)

    @classmethod
    def from_canonical(cls, n, d) -> "Plane":
        """Rebuild a stored plane without renormalizing (keeps exact bits)."""
        n = as_vec3(n).copy()
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            return cls(n, d)
        plane = object.__new__(cls)
        n.setflags(write=False)
        object.__setattr__(plane, "n", n)
        object.__setattr__(plane, "d", float(d))
        return plane

    def as_array(self) -> np.ndarray:
        return np.append(self.n, self.d)

    def distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.n + self.d

    def allclose(self, other: "Plane", atol=1e-9) -> bool:
        return (np.allclose(self.n, other.n, atol=atol)
                and abs(self.d - other.d) <= atol)

    def basis(self):
        """Two in-plane unit axes ``(e1, e2)`` with ``e1 x e2 = n``."""
        return plane_basis(self.n)


def plane_basis(n):
    n = as_vec3(n)
    helper = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def make_plane(raw) -> Plane:
    raw = np.asarray(raw, dtype=float).reshape(4)
    return Plane(raw[:3], raw[3])


@dataclass(frozen=True, eq=False)
class Line3D:
    """Line through ``P`` with unit direction ``V``."""

    P: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        P = as_vec3(self.P).copy()
        V = as_vec3(self.V)
        norm = np.linalg.norm(V)
        if norm <= 1e-12:
            raise ValueError("line direction must be non-zero")
        V = V / norm
        P.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "V", V)

    def distance(self, points) -> np.ndarray:
        diff = np.asarray(points, dtype=float) - self.P
        return np.linalg.norm(np.cross(diff, self.V), axis=-1)

    def transformed(self, T: RigidTransform) -> "Line3D":
        return Line3D(T.apply(self.P), T.rotation @ self.V)


def transform_plane_raw(pi_w: Plane, T_cw: RigidTransform):
    """``T^{-T} pi`` without canonicalization: ``(R n, d - (R n) . t)``."""
    n = T_cw.rotation @ pi_w.n
    return n, float(pi_w.d - n @ T_cw.translation)


def transform_plane(pi_w: Plane, T_cw: RigidTransform) -> Plane:
    n, d = transform_plane_raw(pi_w, T_cw)
    return Plane(n, d)


def normal_angles(n):
    """Azimuth/elevation of a unit normal, with ``atan2(0, 0) = 0``."""
    nx, ny, nz = float(n[0]), float(n[1]), float(n[2])
    if abs(nx) < 1e-15 and abs(ny) < 1e-15:
        phi = 0.0
    else:
        phi = wrap_angle(math.atan2(ny, nx))
    psi = math.asin(min(1.0, max(-1.0, nz)))
    return phi, psi


def normal_angles_jacobian(n) -> np.ndarray:
    """2x3 derivative of ``normal_angles`` with respect to the normal."""
    nx, ny, nz = float(n[0]), float(n[1]), float(n[2])
    rho2 = nx * nx + ny * ny
    J = np.zeros((2, 3))
    if rho2 > 1e-24:
        J[0, 0] = -ny / rho2
        J[0, 1] = nx / rho2
    J[1, 2] = 1.0 / math.sqrt(max(1.0 - nz * nz, 1e-24))
    return J


def minimal_params(pi: Plane):
    """``(azimuth, elevation, d)`` of a plane."""
    phi, psi = normal_angles(pi.n)
    return phi, psi, pi.d


def normal_from_angles(phi, psi) -> np.ndarray:
    return np.array([math.cos(psi) * math.cos(phi),
                     math.cos(psi) * math.sin(phi),
                     math.sin(psi)])


def project_point(p_c, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = as_vec3(p_c)
    if z <= MIN_DEPTH:
        raise BehindCamera(f"point depth {z:.3g} is not in front of the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def project_points(p_c, K: CameraIntrinsics):
    """Vectorized projection; returns ``(uv, in_front_mask)``.

    Pixels for points behind the camera are NaN.
    """
    p = as_points(p_c)
    front = p[:, 2] > MIN_DEPTH
    uv = np.full((len(p), 2), np.nan)
    z = p[front, 2]
    uv[front, 0] = K.fx * p[front, 0] / z + K.cx
    uv[front, 1] = K.fy * p[front, 1] / z + K.cy
    return uv, front


def in_image(uv, K: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    with np.errstate(invalid="ignore"):
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= K.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height))


def point_plane_distance(p, pi: Plane) -> float:
    return float(as_vec3(p) @ pi.n + pi.d)


def fit_plane_lsq(points) -> Plane:
    """Least-squares plane through ``points`` (centroid + smallest eigenvector)."""
    p = as_points(points)
    c = p.mean(axis=0)
    _, _, Vt = np.linalg.svd(p - c, full_matrices=False)
    n = Vt[-1]
    return Plane(n, -float(n @ c))


def angle_between_normals(a, b) -> float:
    """Unsigned angle between two normals, ignoring their sign."""
    c = abs(float(np.dot(a, b)))
    return math.acos(min(1.0, c))


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Centroid per occupied voxel, ordered by voxel key."""
    p = as_points(points)
    if len(p) == 0 or voxel <= 0:
        return p.copy()
    keys = np.floor(p / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, p)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return sums / counts[:, None]


def box_iou(a: PixelBox, b: PixelBox) -> float:
    """Intersection over union of two axis-aligned boxes (0 for empty union)."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)
