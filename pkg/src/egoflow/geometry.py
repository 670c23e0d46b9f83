"""Pinhole camera model, the linearized rigid motion field and SE(3) helpers.

Image-plane velocities are modelled as

    v(x) = rho(x) A(x) tau + B(x) omega = Q(x) T

with x in normalized (focal-length 1, centered) coordinates.  ``T = (tau, omega)``
describes how scene points move relative to the camera: a point ``X`` in the
camera frame has velocity ``tau + omega x X``.  The camera's own motion is the
negated twist (see :func:`camera_motion`).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

SMALL_ANGLE = 1e-6


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
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def shape(self):
        return (self.height, self.width)

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


# Calibrations published with the TUM RGB-D benchmark.
PRESETS = {
    "freiburg1": CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480),
    "freiburg2": CameraIntrinsics(520.9, 521.0, 325.1, 249.7, 640, 480),
    "freiburg3": CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480),
    "default": CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480),
}
PRESETS["fr1"] = PRESETS["freiburg1"]
PRESETS["fr2"] = PRESETS["freiburg2"]
PRESETS["fr3"] = PRESETS["freiburg3"]


@dataclass(frozen=True)
class NormalizedCoords:
    x: float
    y: float


@dataclass
class CameraVelocity:
    """Twist ``(tau, omega)``: translational and angular velocity per frame interval."""
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float).reshape(3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.tau)) and np.all(np.isfinite(self.omega))):
            raise ValueError("velocity components must be finite")

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float).reshape(6)
        return cls(vec[:3].copy(), vec[3:].copy())

    @property
    def vector(self):
        return np.concatenate([self.tau, self.omega])

    def __neg__(self):
        return CameraVelocity(-self.tau, -self.omega)

    def scaled(self, s):
        return CameraVelocity(self.tau * s, self.omega * s)


@dataclass
class InverseDepthMap:
    rho: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.rho.shape != self.valid.shape or self.rho.ndim != 2:
            raise ShapeError(f"rho {self.rho.shape} and validity {self.valid.shape} must be equal 2-D grids")

    @classmethod
    def from_depth(cls, depth):
        """Inverse depth from metric depth; non-positive or non-finite depth is invalid."""
        depth = np.asarray(depth, dtype=float)
        valid = np.isfinite(depth) & (depth > 0)
        rho = np.zeros_like(depth)
        rho[valid] = 1.0 / depth[valid]
        return cls(rho, valid)

    @property
    def shape(self):
        return self.rho.shape


@dataclass
class MotionField:
    """Per-pixel image velocities in normalized coordinates per frame interval."""
    field: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.field.shape != self.valid.shape + (2,):
            raise ShapeError(f"field {self.field.shape} does not match mask {self.valid.shape}")

    @property
    def shape(self):
        return self.valid.shape

    def to_pixel_flow(self, intrinsics):
        flow = self.field * np.array([intrinsics.fx, intrinsics.fy])
        return FlowField(np.where(self.valid[..., None], flow, 0.0), self.valid.copy())


@dataclass
class FlowField:
    """Per-pixel displacement in pixel units."""
    flow: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=float)
        if self.valid is None:
            self.valid = np.all(np.isfinite(self.flow), axis=-1)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.shape != self.valid.shape + (2,):
            raise ShapeError(f"flow {self.flow.shape} does not match mask {self.valid.shape}")

    @property
    def shape(self):
        return self.valid.shape

    def to_motion_field(self, intrinsics):
        field = self.flow / np.array([intrinsics.fx, intrinsics.fy])
        return MotionField(np.where(self.valid[..., None], field, 0.0), self.valid.copy())


def pixel_to_normalized(intrinsics, u, v):
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise IndexError(f"pixel ({u}, {v}) outside {intrinsics.width}x{intrinsics.height} image")
    return NormalizedCoords((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy)


def normalized_grid(intrinsics):
    """Normalized coordinates of every pixel center, as two (H, W) arrays."""
    u = np.arange(intrinsics.width, dtype=float)
    v = np.arange(intrinsics.height, dtype=float)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    return np.broadcast_to(x[None, :], intrinsics.shape), np.broadcast_to(y[:, None], intrinsics.shape)


def _xy(coords):
    if isinstance(coords, NormalizedCoords):
        return coords.x, coords.y
    x, y = coords
    return x, y


def matrix_A(coords):
    x, y = _xy(coords)
    return np.array([[1.0, 0.0, -x], [0.0, 1.0, -y]])


def matrix_B(coords):
    x, y = _xy(coords)
    return np.array([[-x * y, 1.0 + x * x, -y], [-1.0 - y * y, x * y, x]])


def stacked_Q(x, y, rho):
    """Per-pixel 2x6 matrices ``[rho A(x), B(x)]`` for arrays of coordinates, shape (..., 2, 6)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rho = np.asarray(rho, dtype=float)
    x, y, rho = np.broadcast_arrays(x, y, rho)
    Q = np.zeros(x.shape + (2, 6))
    Q[..., 0, 0] = rho
    Q[..., 0, 2] = -rho * x
    Q[..., 1, 1] = rho
    Q[..., 1, 2] = -rho * y
    Q[..., 0, 3] = -x * y
    Q[..., 0, 4] = 1.0 + x * x
    Q[..., 0, 5] = -y
    Q[..., 1, 3] = -1.0 - y * y
    Q[..., 1, 4] = x * y
    Q[..., 1, 5] = x
    return Q


def _field_from_twist(x, y, rho, T):
    t = T.vector if isinstance(T, CameraVelocity) else np.asarray(T, dtype=float)
    tx, ty, tz, wx, wy, wz = t
    vx = rho * (tx - x * tz) - x * y * wx + (1.0 + x * x) * wy - y * wz
    vy = rho * (ty - y * tz) - (1.0 + y * y) * wx + x * y * wy + x * wz
    return np.stack([vx, vy], axis=-1)


def synthesize_motion_field(rho, T, intrinsics):
    if rho.shape != intrinsics.shape:
        raise ShapeError(f"inverse depth {rho.shape} does not match intrinsics {intrinsics.shape}")
    x, y = normalized_grid(intrinsics)
    field = _field_from_twist(x, y, rho.rho, T)
    field[~rho.valid] = 0.0
    return MotionField(field, rho.valid.copy())


# --- rotations -------------------------------------------------------------

def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rodrigues(rotvec):
    """Rotation matrix for an axis-angle vector via the Rodrigues formula."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta2 = float(rotvec @ rotvec)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    K = skew(rotvec)
    return np.eye(3) + a * K + b * (K @ K)


def quat_from_rotvec(rotvec):
    """Unit quaternion (x, y, z, w) for an axis-angle vector."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta2 = float(rotvec @ rotvec)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        s = 0.5 - theta2 / 48.0
        c = 1.0 - theta2 / 8.0
    else:
        s = np.sin(0.5 * theta) / theta
        c = np.cos(0.5 * theta)
    return np.array([s * rotvec[0], s * rotvec[1], s * rotvec[2], c])


def quat_to_rotation(q):
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R):
    """Unit quaternion (x, y, z, w) with w >= 0, by Shepperd's method."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    return q if q[3] >= 0 else -q


def rotation_log(R):
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    q = rotation_to_quat(R)
    vn = np.linalg.norm(q[:3])
    if vn < 1e-12:
        return 2.0 * q[:3] / q[3]
    theta = 2.0 * np.arctan2(vn, q[3])
    return q[:3] * (theta / vn)


def slerp(q0, q1, alpha):
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    d = float(q0 @ q1)
    if d < 0:
        q1, d = -q1, -d
    if d > 1 - 1e-12:
        q = q0 + alpha * (q1 - q0)
    else:
        th = np.arccos(d)
        q = (np.sin((1 - alpha) * th) * q0 + np.sin(alpha * th) * q1) / np.sin(th)
    return q / np.linalg.norm(q)


# --- poses -----------------------------------------------------------------

@dataclass
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q, t):
        return cls(quat_to_rotation(q), t)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion(self):
        return rotation_to_quat(self.rotation)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


def pose_compose(a, b):
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a):
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def _left_jacobian(rotvec):
    theta2 = float(rotvec @ rotvec)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    K = skew(rotvec)
    return np.eye(3) + b * K + c * (K @ K)


def twist_to_pose(T, delta=1.0, method="quaternion"):
    """SE(3) exponential of ``delta * T``.

    The translation includes the left Jacobian of SO(3) so that poses for a
    fixed twist form a one-parameter subgroup; to first order it is
    ``tau * delta``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not isinstance(T, CameraVelocity):
        T = CameraVelocity.from_vector(T)
    rotvec = T.omega * delta
    if method == "quaternion":
        R = quat_to_rotation(quat_from_rotvec(rotvec))
    elif method == "rodrigues":
        R = rodrigues(rotvec)
    else:
        raise ValueError(f"unknown rotation method {method!r}")
    return Pose(R, _left_jacobian(rotvec) @ (T.tau * delta))


def pose_to_twist(pose, delta=1.0):
    """Inverse of :func:`twist_to_pose` for rotations below pi."""
    rotvec = rotation_log(pose.rotation)
    tau = np.linalg.solve(_left_jacobian(rotvec), pose.translation)
    return CameraVelocity(tau / delta, rotvec / delta)


def camera_motion(T):
    """Camera twist corresponding to a motion-field twist (scene points move with ``T``)."""
    return -T


def is_rotation(R, tol=1e-9):
    R = np.asarray(R)
    return bool(np.abs(R.T @ R - np.eye(3)).max() < tol and abs(np.linalg.det(R) - 1.0) < tol)
