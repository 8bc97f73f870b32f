"""Core 3D/2D geometry for RGB-D calibration.

Planes, rigid transforms, pinhole projection with radial/tangential
distortion, organized point clouds, total-least-squares plane fitting,
plane-pair rigid transform estimation, planar PnP and a generic damped
least-squares solver. Everything works in meters and pixels; depth images
use 0.0 as the invalid-depth marker.

All values are immutable after construction and all operations are pure
functions of their inputs, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised on degenerate geometric input (rank-deficient, parallel, ...)."""


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first: w, x, y, z)


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise GeometryError("zero quaternion")
    q = q / n
    # fix the double-cover sign so equal rotations compare equal
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = 0.5 / np.sqrt(t + 1.0)
        q = np.array([0.25 / s,
                      (m[2, 1] - m[1, 2]) * s,
                      (m[0, 2] - m[2, 0]) * s,
                      (m[1, 0] - m[0, 1]) * s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


def axis_angle_to_quat(rvec):
    """Exponential map: rotation vector (axis * angle, radians) -> quaternion."""
    rvec = np.asarray(rvec, dtype=float)
    theta = np.linalg.norm(rvec)
    if theta < 1e-12:
        # second-order series keeps the map smooth through zero
        half = 0.5 * rvec
        return quat_normalize(np.array([1.0, half[0], half[1], half[2]]))
    axis = rvec / theta
    s = np.sin(theta / 2.0)
    return quat_normalize(np.array([np.cos(theta / 2.0),
                                    axis[0] * s, axis[1] * s, axis[2] * s]))


def quat_to_axis_angle(q):
    q = quat_normalize(q)
    w = min(max(q[0], -1.0), 1.0)
    theta = 2.0 * np.arccos(w)
    s = np.sqrt(max(1.0 - w * w, 0.0))
    if s < 1e-12:
        return np.array([2.0 * q[1], 2.0 * q[2], 2.0 * q[3]])
    return (q[1:] / s) * theta


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane in Hessian form: normal . x - offset = 0.

    The equation may be given with any nonzero normal; it is stored
    canonically (unit normal, offset >= 0) so two representations of the
    same plane compare equal.
    """

    normal: np.ndarray
    offset: float

    def __eq__(self, other):
        return (isinstance(other, Plane)
                and np.array_equal(self.normal, other.normal)
                and self.offset == other.offset)

    def __init__(self, normal, offset):
        normal = np.asarray(normal, dtype=float)
        n = np.linalg.norm(normal)
        if not np.isfinite(n) or n < 1e-12:
            raise GeometryError("plane normal must be a nonzero finite vector")
        normal = normal / n
        offset = float(offset) / n
        if offset < 0.0 or (offset == 0.0 and _first_nonzero_negative(normal)):
            normal = -normal
            offset = -offset
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", offset)
        self.normal.setflags(write=False)

    def signed_distance(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.normal - self.offset

    def depth_along_ray(self, directions):
        """Scale factor t so that t * dir lies on the plane."""
        directions = np.asarray(directions, dtype=float)
        denom = directions @ self.normal
        return self.offset / denom


def _first_nonzero_negative(v):
    for c in v:
        if c != 0.0:
            return c < 0.0
    return False


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid body motion: x' = R(q) x + t, quaternion scalar-first."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, RigidTransform)
                and np.array_equal(self.quaternion, other.quaternion)
                and np.array_equal(self.translation, other.translation))

    def __init__(self, quaternion, translation):
        q = quat_normalize(np.asarray(quaternion, dtype=float))
        t = np.asarray(translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)
        self.quaternion.setflags(write=False)
        self.translation.setflags(write=False)

    @staticmethod
    def identity():
        return RigidTransform((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=float)
        return RigidTransform(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @staticmethod
    def from_axis_angle(rvec, translation):
        return RigidTransform(axis_angle_to_quat(rvec), translation)

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.quaternion)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply `other` first, then `self`."""
        q = quat_multiply(self.quaternion, other.quaternion)
        t = self.apply(other.translation)
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        qinv = quat_conjugate(self.quaternion)
        rinv = quat_to_matrix(qinv)
        return RigidTransform(qinv, -(rinv @ self.translation))

    def rotation_angle(self):
        """Magnitude of the rotation, radians."""
        return float(np.linalg.norm(quat_to_axis_angle(self.quaternion)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with radial (k1, k2, k3) and tangential (p1, p2) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    radial_dist: tuple = (0.0, 0.0, 0.0)
    tangential_dist: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")
        if len(self.radial_dist) > 3 or len(self.tangential_dist) != 2:
            raise GeometryError("expected up to 3 radial and exactly 2 tangential coefficients")
        object.__setattr__(self, "radial_dist",
                           tuple(self.radial_dist) + (0.0,) * (3 - len(self.radial_dist)))
        object.__setattr__(self, "tangential_dist", tuple(self.tangential_dist))

    @property
    def has_distortion(self):
        return any(c != 0.0 for c in self.radial_dist + self.tangential_dist)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Row-major grid of depths in meters; 0.0 marks an invalid measurement."""

    width: int
    height: int
    data: np.ndarray  # (height, width) float64

    def __eq__(self, other):
        return (isinstance(other, DepthImage)
                and (self.width, self.height) == (other.width, other.height)
                and np.array_equal(self.data, other.data))

    def __init__(self, width, height, data):
        data = np.asarray(data, dtype=float).reshape(height, width)
        if not np.all(np.isfinite(data)):
            raise GeometryError("depth image contains non-finite values")
        if np.any(data < 0):
            raise GeometryError("depth image contains negative values")
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "data", data)
        self.data.setflags(write=False)

    @property
    def valid(self):
        return self.data > 0.0


@dataclass(frozen=True, eq=False)
class OrganizedCloud:
    """Point grid mirroring the depth image layout; invalid pixels carry no point."""

    width: int
    height: int
    points: np.ndarray  # (height, width, 3)
    valid: np.ndarray  # (height, width) bool

    def __eq__(self, other):
        return (isinstance(other, OrganizedCloud)
                and (self.width, self.height) == (other.width, other.height)
                and np.array_equal(self.valid, other.valid)
                and np.array_equal(self.points[self.valid],
                                   other.points[other.valid]))

    def __init__(self, width, height, points, valid):
        points = np.asarray(points, dtype=float).reshape(height, width, 3)
        valid = np.asarray(valid, dtype=bool).reshape(height, width)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)
        self.points.setflags(write=False)
        self.valid.setflags(write=False)

    def points_at(self, index_set):
        """Points for pixel coordinates of an IndexSet (all must be valid)."""
        return self.points[index_set.v, index_set.u]

    def depth_image(self) -> DepthImage:
        z = np.where(self.valid, self.points[:, :, 2], 0.0)
        return DepthImage(self.width, self.height, z)


class IndexSet:
    """Duplicate-free set of (u, v) pixel coordinates inside an image."""

    __slots__ = ("uv",)

    def __init__(self, uv, width=None, height=None):
        uv = np.asarray(uv, dtype=np.int64).reshape(-1, 2)
        if uv.shape[0]:
            if width is not None and (np.any(uv[:, 0] < 0) or np.any(uv[:, 0] >= width)):
                raise GeometryError("index set: u coordinate out of bounds")
            if height is not None and (np.any(uv[:, 1] < 0) or np.any(uv[:, 1] >= height)):
                raise GeometryError("index set: v coordinate out of bounds")
            flat = uv[:, 1].astype(np.int64) * (2**32) + uv[:, 0]
            if np.unique(flat).size != uv.shape[0]:
                raise GeometryError("index set contains duplicate pixels")
        self.uv = uv
        self.uv.setflags(write=False)

    @property
    def u(self):
        return self.uv[:, 0]

    @property
    def v(self):
        return self.uv[:, 1]

    def __len__(self):
        return self.uv.shape[0]

    @staticmethod
    def from_mask(mask):
        v, u = np.nonzero(mask)
        return IndexSet(np.column_stack([u, v]))


@dataclass(frozen=True)
class NoiseModel:
    """Depth-dependent measurement noise sigma(z), polynomial in z (meters).

    Must be positive over the sensor working range [0.5, 5.0] m.
    """

    coefficients: tuple

    def __init__(self, coefficients):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in coefficients))
        z = np.linspace(0.5, 5.0, 64)
        value = np.zeros_like(z)
        for c in reversed(self.coefficients):
            value = value * z + c
        if np.any(value <= 0.0):
            raise GeometryError("sigma(z) must be positive on [0.5, 5.0] m")

    def sigma(self, z):
        return sigma_quantization(self, z)


# quantization-error polynomial of a structured-light depth sensor
KINECT1_QUANTIZATION = NoiseModel((-0.00029, 0.00037, 0.001365))


# ---------------------------------------------------------------------------
# operations


def depth_to_cloud(img: DepthImage, intr: CameraIntrinsics) -> OrganizedCloud:
    """Back-project a depth image through the ideal pinhole model.

    Lens distortion is deliberately not applied here: residual depth-lens
    effects are absorbed by the per-pixel undistortion map.
    """
    if (img.width, img.height) != (intr.width, intr.height):
        raise GeometryError("depth image size does not match intrinsics")
    u = np.arange(img.width, dtype=float)
    v = np.arange(img.height, dtype=float)
    xs = (u - intr.cx) / intr.fx
    ys = (v - intr.cy) / intr.fy
    d = img.data
    pts = np.empty((img.height, img.width, 3))
    pts[:, :, 0] = d * xs[None, :]
    pts[:, :, 1] = d * ys[:, None]
    pts[:, :, 2] = d
    return OrganizedCloud(img.width, img.height, pts, img.valid)


def project_point(intr: CameraIntrinsics, p) -> np.ndarray:
    """Pinhole projection with radial/tangential distortion.

    Accepts a single 3-vector or an (N, 3) array; z must be positive.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project points with non-positive z")
    x = pts[:, 0] / z
    y = pts[:, 1] / z
    k1, k2, k3 = intr.radial_dist
    p1, p2 = intr.tangential_dist
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    uv = np.column_stack([intr.fx * xd + intr.cx, intr.fy * yd + intr.cy])
    return uv[0] if single else uv


def undistort_pixel(intr: CameraIntrinsics, uv, iterations: int = 10) -> np.ndarray:
    """Invert the distortion model: pixel -> normalized (x, y) coordinates."""
    uv = np.asarray(uv, dtype=float)
    single = uv.ndim == 1
    px = uv.reshape(-1, 2)
    xd = (px[:, 0] - intr.cx) / intr.fx
    yd = (px[:, 1] - intr.cy) / intr.fy
    if not intr.has_distortion:
        out = np.column_stack([xd, yd])
        return out[0] if single else out
    k1, k2, k3 = intr.radial_dist
    p1, p2 = intr.tangential_dist
    x, y = xd.copy(), yd.copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    out = np.column_stack([x, y])
    return out[0] if single else out


def fit_plane(points, weights=None) -> Plane:
    """Total-least-squares plane through 3D points.

    Weighted centroid plus the smallest singular vector of the (weighted,
    centered) point matrix. Needs at least 3 non-collinear points.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] < 3:
        raise GeometryError("plane fit needs at least 3 points")
    if weights is None:
        centroid = points.mean(axis=0)
        centered = points - centroid
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != points.shape[0] or np.any(w < 0) or w.sum() <= 0:
            raise GeometryError("invalid plane fit weights")
        centroid = (points * w[:, None]).sum(axis=0) / w.sum()
        centered = (points - centroid) * np.sqrt(w)[:, None]
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise GeometryError("plane fit is rank deficient (collinear points)")
    normal = vt[2]
    return Plane(normal, float(normal @ centroid))


def los_project(p, pl: Plane):
    """Project point(s) onto a plane along the line of sight through the origin."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    denom = pts @ pl.normal
    if np.any(np.abs(denom) < 1e-12):
        raise GeometryError("line of sight is parallel to the plane")
    out = pts * (pl.offset / denom)[:, None]
    return out[0] if single else out


def orth_project(p, pl: Plane):
    """Project point(s) orthogonally onto a plane."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    out = pts - np.outer(pts @ pl.normal - pl.offset, pl.normal)
    return out[0] if single else out


def transform_plane(t: RigidTransform, pl: Plane) -> Plane:
    normal = t.rotation_matrix @ pl.normal
    offset = pl.offset + normal @ t.translation
    return Plane(normal, offset)


def estimate_transform_from_planes(planes_a, planes_b) -> RigidTransform:
    """Rigid transform t with transform_plane(t, planes_a[i]) ~ planes_b[i].

    Rotation by Procrustes alignment of the normals; translation from the
    linear system n_b . t = d_b - d_a. Needs >= 3 pairs whose normals
    span 3D.
    """
    if len(planes_a) != len(planes_b) or len(planes_a) < 3:
        raise GeometryError("need at least 3 corresponding plane pairs")
    na = np.array([p.normal for p in planes_a])
    nb = np.array([p.normal for p in planes_b])
    da = np.array([p.offset for p in planes_a])
    db = np.array([p.offset for p in planes_b])
    if np.linalg.svd(na, compute_uv=False)[-1] < 1e-6:
        raise GeometryError("plane normals do not span 3D")
    m = nb.T @ na
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    # canonical plane storage may have flipped individual normals; re-align
    rotated = na @ rot.T
    flip = np.sign(np.sum(rotated * nb, axis=1))
    flip[flip == 0] = 1.0
    nb_al = nb * flip[:, None]
    db_al = db * flip
    # translation: n_b . t = d_b - d_a (rotation leaves the offset unchanged)
    t, *_ = np.linalg.lstsq(nb_al, db_al - da, rcond=None)
    return RigidTransform(matrix_to_quat(rot), t)


def _homography_dlt(src, dst):
    """Direct linear transform homography src (N,2) -> dst (N,2), normalized."""

    def normalize(pts):
        c = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - c, axis=1)), 1e-12)
        t = np.array([[scale, 0, -scale * c[0]],
                      [0, scale, -scale * c[1]],
                      [0, 0, 1.0]])
        ph = np.column_stack([pts, np.ones(len(pts))]) @ t.T
        return ph[:, :2], t

    sn, ts = normalize(src)
    dn, td = normalize(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = sn
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -sn * dn[:, 0:1]
    a[0::2, 8] = -dn[:, 0]
    a[1::2, 3:5] = sn
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -sn * dn[:, 1:2]
    a[1::2, 8] = -dn[:, 1]
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    return h / h[2, 2]


def _pose_from_homography(board_xy, norm_xy):
    """Initial pose of a planar target from its homography to normalized coords."""
    h = _homography_dlt(board_xy, norm_xy)
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1 = h1 * lam
    r2 = h2 * lam
    t = h3 * lam
    r3 = np.cross(r1, r2)
    rot = np.column_stack([r1, r2, r3])
    u, _, vt = np.linalg.svd(rot)
    rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
    if t[2] < 0:
        rot = np.column_stack([-rot[:, 0], -rot[:, 1], rot[:, 2]])
        t = -t
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = t
    return RigidTransform.from_matrix(m)


def solve_pnp(board_points, image_points, intr: CameraIntrinsics):
    """Pose of a planar target from 2D-3D correspondences.

    Initialization by planar-homography decomposition, refinement with the
    Levenberg-Marquardt solver below. Returns (pose, rms) where rms is the
    final RMS reprojection error in pixels.
    """
    board_points = np.asarray(board_points, dtype=float).reshape(-1, 3)
    image_points = np.asarray(image_points, dtype=float).reshape(-1, 2)
    n = board_points.shape[0]
    if n < 4 or image_points.shape[0] != n:
        raise GeometryError("PnP needs at least 4 point pairs with matching counts")
    if np.max(np.abs(board_points[:, 2])) > 1e-9:
        raise GeometryError("PnP expects coplanar board points with z = 0")

    norm_xy = undistort_pixel(intr, image_points)
    pose0 = _pose_from_homography(board_points[:, :2], norm_xy)
    q0 = pose0.quaternion

    def residual(x):
        pose = RigidTransform(quat_multiply(axis_angle_to_quat(x[:3]), q0), x[3:6])
        cam = pose.apply(board_points)
        if np.any(cam[:, 2] <= 0):
            return np.full(2 * n, 1e6)
        return (project_point(intr, cam) - image_points).ravel()

    x0 = np.concatenate([np.zeros(3), pose0.translation])
    if not np.all(np.isfinite(x0)):
        raise GeometryError("degenerate correspondences: homography initialization failed")
    result = lm_minimize(residual, x0)
    x = result.x
    pose = RigidTransform(quat_multiply(axis_angle_to_quat(x[:3]), q0), x[3:6])
    rms = float(np.sqrt(result.final_cost / n))
    if not np.isfinite(rms) or rms > 5.0 or (not result.converged and rms > 1.0):
        raise GeometryError(f"PnP did not converge (rms {rms:.3g} px)")
    return pose, rms


@dataclass
class LMResult:
    x: np.ndarray
    final_cost: float
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list)


def lm_jacobian(residual_fn, x, r=None):
    """Forward finite-difference Jacobian, step max(1e-6, 1e-6 |x_i|)."""
    x = np.asarray(x, dtype=float)
    if r is None:
        r = np.asarray(residual_fn(x), dtype=float)
    jac = np.empty((r.size, x.size))
    for i in range(x.size):
        step = max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xp[i] += step
        jac[:, i] = (np.asarray(residual_fn(xp), dtype=float) - r) / step
    return jac


def lm_minimize(residual_fn, x0, max_iter=200, ftol=1e-10, xtol=1e-12,
                damping_init=1e-3, jacobian_fn=None) -> LMResult:
    """Levenberg-Marquardt over a residual vector function.

    Jacobian by forward finite differences unless `jacobian_fn(fn, x, r)`
    is supplied (used by callers that know the residual sparsity; it must
    produce the same finite-difference values). Damping is multiplied by 10
    on a rejected step and divided by 10 on an accepted one; the accepted
    cost sequence is non-increasing. Terminates when the cost drop falls
    below ftol * max(cost, 1), the step norm falls below xtol, or at
    max_iter.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise GeometryError("residuals are not finite at the initial point")
    cost = float(r @ r)
    lam = damping_init
    jac_fn = jacobian_fn or lm_jacobian
    trace = [cost]
    iterations = 0
    converged = False
    while iterations < max_iter:
        iterations += 1
        jac = jac_fn(residual_fn, x, r)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag < 1e-12] = 1e-12
        accepted = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new <= cost:
                accepted = True
                step_norm = float(np.linalg.norm(step))
                drop = cost - cost_new
                x, r, cost = x_new, r_new, cost_new
                trace.append(cost)
                lam = max(lam / 10.0, 1e-15)
                if drop < ftol * max(cost, 1.0) or step_norm < xtol:
                    converged = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # damping exhausted: local minimum within precision
            break
        if converged:
            break
    return LMResult(x=x, final_cost=cost, iterations=iterations,
                    converged=converged, cost_trace=trace)


def sigma_quantization(nm: NoiseModel, z):
    """Evaluate the noise polynomial sigma(z), meters."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    for c in reversed(nm.coefficients):
        out = out * z + c
    return float(out) if out.ndim == 0 else out
