"""Stage two of the calibration: global correction and extrinsics.

Initialization pairs the checkerboard plane seen by the RGB camera with the
wall plane seen by the depth sensor in every frame, solves the camera-depth
rigid transform from the plane pairs, and fits the four-corner global map
against the board planes with the same binned update machinery as stage one
(bin size = whole image).

The refinement then jointly adjusts the global map coefficients, the
camera-depth transform, all board poses and the depth intrinsics by
damped least squares over two residual families: checkerboard reprojection
and point-to-board-plane distances. Rotations are parameterized as
axis-angle increments composed onto the initial quaternions. Undistorted
depth values stay fixed throughout; the depth intrinsics only re-project
pixels to 3D.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .calib_undistort import (
    BoardSpec,
    CalibrationError,
    SampleGrid,
    UndistortConfig,
    update_map,
)
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    KINECT1_QUANTIZATION,
    NoiseModel,
    Plane,
    RigidTransform,
    axis_angle_to_quat,
    estimate_transform_from_planes,
    fit_plane,
    lm_minimize,
    orth_project,
    project_point,
    quat_multiply,
    solve_pnp,
    transform_plane,
)
from .maps import GlobalMap, UndistortionMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalConfig:
    """Free parameters of stage two."""

    sigma_c: float = 0.2  # checkerboard corner detection noise, pixels
    sigma_u: NoiseModel = field(default=KINECT1_QUANTIZATION)  # depth noise after undistortion
    degree: int = 2  # global correction polynomial degree (constant term pinned to 0)
    max_points_per_frame: int = 400  # wall points kept per frame in the refinement
    max_iter: int = 100
    ftol: float = 1e-10
    xtol: float = 1e-12
    optimize_gmap: bool = True
    optimize_intrinsics: bool = True

    def __post_init__(self):
        if self.sigma_c <= 0:
            raise CalibrationError("sigma_c must be positive")


@dataclass(frozen=True, eq=False)
class FrameObservations:
    """Stage-two view of one frame: corners plus undistorted wall points."""

    frame_id: str
    corners: np.ndarray  # (C, 2) measured pixel coordinates
    uv: np.ndarray  # (S, 2) wall pixel coordinates
    dhat: np.ndarray  # (S,) undistorted depths at uv, held fixed


@dataclass(frozen=True, eq=False)
class RefinementState:
    """Everything stage two estimates."""

    extrinsic: RigidTransform  # depth -> camera
    board_poses: tuple  # board -> camera, one per frame
    intr_depth: CameraIntrinsics
    gmap: GlobalMap

    @property
    def n_parameters(self):
        return 16 + 6 * len(self.board_poses)


def build_observations(frames, undistorted_depths, inlier_sets,
                       max_points=400):
    """Pack frames into FrameObservations, subsampling inliers evenly."""
    obs = []
    for frame in frames:
        inl = inlier_sets[frame.frame_id]
        depth = undistorted_depths[frame.frame_id]
        n = len(inl)
        if n == 0:
            raise CalibrationError(f"frame {frame.frame_id}: empty inlier set")
        take = np.unique(np.linspace(0, n - 1, min(n, max_points)).astype(int))
        uv = inl.uv[take]
        dhat = depth.data[uv[:, 1], uv[:, 0]]
        obs.append(FrameObservations(frame.frame_id, frame.corner_points.copy(),
                                     uv, dhat))
    return obs


def init_global(undistorted_clouds, inlier_sets, corner_sets,
                intr_rgb: CameraIntrinsics, board: BoardSpec,
                cfg: GlobalConfig = GlobalConfig()):
    """Initial global map, camera-depth transform and board poses (plane pairs).

    Per frame: PnP board pose, board plane from the transformed corners,
    wall plane from the undistorted cloud inliers. The rigid transform
    aligning board planes (camera frame) onto wall planes (depth frame)
    initializes the extrinsic; the board planes moved into the depth frame
    then drive the four-corner map fit.
    """
    if not (len(undistorted_clouds) == len(inlier_sets) == len(corner_sets)):
        raise CalibrationError("clouds, inlier sets and corner sets must align")
    poses = []
    board_planes_cam = []
    wall_planes_depth = []
    keep = []
    for k, (cloud, inliers, corners) in enumerate(
            zip(undistorted_clouds, inlier_sets, corner_sets)):
        try:
            pose, _ = solve_pnp(board.corners_3d(), np.asarray(corners).reshape(-1, 2),
                                intr_rgb)
            corners_cam = pose.apply(board.corners_3d())
            board_planes_cam.append(fit_plane(corners_cam))
            wall_planes_depth.append(fit_plane(cloud.points_at(inliers)))
            poses.append(pose)
            keep.append(k)
        except GeometryError as exc:
            log.warning("init_global: frame %d dropped (%s)", k, exc)
    if len(keep) < 3:
        raise CalibrationError("stage two needs at least 3 usable frames")
    cam_to_depth = estimate_transform_from_planes(board_planes_cam, wall_planes_depth)

    first = undistorted_clouds[keep[0]]
    width, height = first.width, first.height
    grid = UndistortionMap.identity(width, height, width, height,
                                    degree=cfg.degree, constant_zero=True)
    samples = SampleGrid.empty(grid.grid_shape, capacity=len(keep))
    update_cfg = UndistortConfig(chi=width, psi=height, degree=cfg.degree,
                                 noise_model=cfg.sigma_u)
    for k, plane_cam in zip(keep, board_planes_cam):
        plane_depth = transform_plane(cam_to_depth, plane_cam)
        grid, samples = update_map(grid, samples, undistorted_clouds[k],
                                   inlier_sets[k], plane_depth, update_cfg)
    gmap = GlobalMap(width, height,
                     grid.control_function(0, 0),
                     grid.control_function(1, 0),
                     grid.control_function(0, 1))
    return gmap, cam_to_depth.inverse(), poses


# ---------------------------------------------------------------------------
# residuals (reference, per-frame form)


def residual_repr(pose: RigidTransform, corners, intr_rgb: CameraIntrinsics,
                  board: BoardSpec, sigma_c=0.2):
    """Checkerboard reprojection residuals, 2 entries per corner, / sigma_c."""
    cam = pose.apply(board.corners_3d())
    if np.any(cam[:, 2] <= 0):
        raise CalibrationError("board corner behind the camera")
    proj = project_point(intr_rgb, cam)
    return ((proj - np.asarray(corners).reshape(-1, 2)) / sigma_c).ravel()


def _board_plane_depth(extrinsic: RigidTransform, pose: RigidTransform,
                       board: BoardSpec) -> Plane:
    corners_depth = extrinsic.inverse().apply(pose.apply(board.corners_3d()))
    return fit_plane(corners_depth)


def residual_pos(extrinsic: RigidTransform, pose: RigidTransform,
                 gmap: GlobalMap, intr_depth: CameraIntrinsics,
                 obs: FrameObservations, board: BoardSpec,
                 sigma_u: NoiseModel = KINECT1_QUANTIZATION):
    """Point-to-board-plane residuals of the globally corrected wall points.

    One entry per wall point: the distance between the corrected point and
    its orthogonal projection onto the board plane (depth frame), scaled by
    1 / (sqrt(|I|) * sigma_u(z)).
    """
    if obs.uv.shape[0] == 0:
        raise CalibrationError("empty inlier set")
    plane = _board_plane_depth(extrinsic, pose, board)
    u = obs.uv[:, 0].astype(float)
    v = obs.uv[:, 1].astype(float)
    rays = np.column_stack([(u - intr_depth.cx) / intr_depth.fx,
                            (v - intr_depth.cy) / intr_depth.fy,
                            np.ones_like(u)])
    pts = rays * obs.dhat[:, None]
    coeffs = gmap.pixel_coefficients(u, v)
    corrected = np.zeros_like(obs.dhat)
    for k in range(coeffs.shape[-1] - 1, -1, -1):
        corrected = corrected * obs.dhat + coeffs[:, k]
    pts = pts * (corrected / obs.dhat)[:, None]
    dist = np.linalg.norm(orth_project(pts, plane) - pts, axis=1)
    sign = np.sign(plane.signed_distance(pts))
    scale = np.sqrt(obs.uv.shape[0]) * sigma_u.sigma(obs.dhat)
    return sign * dist / scale


# ---------------------------------------------------------------------------
# vectorized refinement


def _quats_to_matrices(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty(q.shape[:1] + (3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _exp_quats(rvecs):
    theta = np.linalg.norm(rvecs, axis=1)
    q = np.empty((rvecs.shape[0], 4))
    small = theta < 1e-12
    half = np.where(small, 0.5, np.sin(theta / 2.0) / np.where(theta == 0, 1.0, theta))
    q[:, 0] = np.where(small, 1.0, np.cos(theta / 2.0))
    q[:, 1:] = rvecs * half[:, None]
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _quat_multiply_batch(a, b):
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def _fit_planes_batch(points):
    """Total-least-squares planes for (M, N, 3) point batches.

    Returns (normals (M, 3), offsets (M,)), canonically oriented.
    """
    centroid = points.mean(axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normals = vt[:, 2, :]
    offsets = np.einsum("mi,mi->m", normals, centroid[:, 0, :])
    flip = offsets < 0
    normals[flip] *= -1
    offsets[flip] *= -1
    return normals, offsets


class _RefineProblem:
    """Vectorized residual of the joint stage-two objective.

    Parameter layout: [extrinsic rvec (3), extrinsic t (3), fx fy cx cy (4),
    gmap free coefficients (3 * degree), then per frame rvec (3) + t (3)].
    Rotation vectors are increments on the initial quaternions.
    """

    def __init__(self, state0: RefinementState, observations, intr_rgb,
                 board: BoardSpec, cfg: GlobalConfig):
        self.cfg = cfg
        self.intr_rgb = intr_rgb
        self.board3d = board.corners_3d()
        self.obs = observations
        self.degree = state0.gmap.degree
        self.base_extr_q = state0.extrinsic.quaternion
        self.base_pose_q = np.array([p.quaternion for p in state0.board_poses])
        self.width = state0.gmap.width
        self.height = state0.gmap.height
        self.corners_px = np.array([o.corners for o in observations])
        m = len(observations)
        s = max(o.uv.shape[0] for o in observations)
        self.uv = np.zeros((m, s, 2))
        self.dhat = np.ones((m, s))
        self.point_scale = np.zeros((m, s))
        for k, o in enumerate(observations):
            n = o.uv.shape[0]
            self.uv[k, :n] = o.uv
            self.dhat[k, :n] = o.dhat
            sigma = cfg.sigma_u.sigma(o.dhat)
            self.point_scale[k, :n] = 1.0 / (np.sqrt(n) * sigma)
        self.intr_depth0 = state0.intr_depth
        self.gmap0 = state0.gmap
        self.state0 = state0

    def pack_initial(self):
        m = len(self.obs)
        x = np.zeros(16 + 6 * m)
        x[3:6] = self.state0.extrinsic.translation
        x[6:10] = (self.intr_depth0.fx, self.intr_depth0.fy,
                   self.intr_depth0.cx, self.intr_depth0.cy)
        x[10:16] = self.gmap0.free_coefficients()
        for k, pose in enumerate(self.state0.board_poses):
            x[16 + 6 * k + 3:16 + 6 * k + 6] = pose.translation
        return x

    def unpack(self, x) -> RefinementState:
        extr_q = quat_multiply(axis_angle_to_quat(x[0:3]), self.base_extr_q)
        extrinsic = RigidTransform(extr_q, x[3:6])
        intr = replace(self.intr_depth0, fx=float(x[6]), fy=float(x[7]),
                       cx=float(x[8]), cy=float(x[9]))
        gmap = GlobalMap.from_free_coefficients(self.width, self.height,
                                                x[10:16], self.degree)
        m = len(self.obs)
        rvecs = x[16:].reshape(m, 6)[:, 0:3]
        quats = _quat_multiply_batch(_exp_quats(rvecs), self.base_pose_q)
        poses = tuple(RigidTransform(q, x[16 + 6 * k + 3:16 + 6 * k + 6])
                      for k, q in enumerate(quats))
        return RefinementState(extrinsic=extrinsic, board_poses=poses,
                               intr_depth=intr, gmap=gmap)

    def residual(self, x):
        m = len(self.obs)
        pose_block = x[16:].reshape(m, 6)
        pose_q = _quat_multiply_batch(_exp_quats(pose_block[:, 0:3]),
                                      self.base_pose_q)
        pose_r = _quats_to_matrices(pose_q)
        pose_t = pose_block[:, 3:6]

        # reprojection block
        corners_cam = np.einsum("mij,cj->mci", pose_r, self.board3d) + pose_t[:, None, :]
        if np.any(corners_cam[:, :, 2] <= 0):
            return np.full(self._n_residuals(), 1e6)
        proj = project_point(self.intr_rgb, corners_cam.reshape(-1, 3))
        r_repr = (proj.reshape(m, -1, 2) - self.corners_px) / self.cfg.sigma_c

        # board planes in the depth frame (dependent corner always rebuilt
        # from the free coefficients, so the planarity constraint holds at
        # every evaluation)
        extr_q = quat_multiply(axis_angle_to_quat(x[0:3]), self.base_extr_q)
        extr = RigidTransform(extr_q, x[3:6])
        inv = extr.inverse()
        corners_depth = corners_cam @ inv.rotation_matrix.T + inv.translation
        normals, offsets = _fit_planes_batch(corners_depth)

        fx, fy, cx, cy = x[6], x[7], x[8], x[9]
        rays_x = (self.uv[:, :, 0] - cx) / fx
        rays_y = (self.uv[:, :, 1] - cy) / fy
        g00 = np.concatenate([[0.0], x[10:10 + self.degree]])
        gw0 = np.concatenate([[0.0], x[10 + self.degree:10 + 2 * self.degree]])
        g0h = np.concatenate([[0.0], x[10 + 2 * self.degree:10 + 3 * self.degree]])
        un = self.uv[:, :, 0] / self.width
        vn = self.uv[:, :, 1] / self.height
        corrected = np.zeros_like(self.dhat)
        for k in range(self.degree, -1, -1):
            ck = g00[k] * (1.0 - un - vn) + gw0[k] * un + g0h[k] * vn
            corrected = corrected * self.dhat + ck
        # distance of the corrected point to the board plane
        px = rays_x * corrected
        py = rays_y * corrected
        pz = corrected
        dist = (px * normals[:, None, 0] + py * normals[:, None, 1]
                + pz * normals[:, None, 2] - offsets[:, None])
        r_pos = dist * self.point_scale
        return np.concatenate([r_repr.reshape(-1), r_pos.reshape(-1)])

    def _n_residuals(self):
        m = len(self.obs)
        return m * self.board3d.shape[0] * 2 + self.dhat.size

    def active_indices(self):
        idx = list(range(0, 6))
        if self.cfg.optimize_intrinsics:
            idx.extend(range(6, 10))
        if self.cfg.optimize_gmap:
            idx.extend(range(10, 16))
        idx.extend(range(16, 16 + 6 * len(self.obs)))
        return np.array(idx, dtype=int)


def refine(state0: RefinementState, observations, intr_rgb: CameraIntrinsics,
           board: BoardSpec, cfg: GlobalConfig = GlobalConfig()):
    """Joint nonlinear refinement of (G, extrinsic, board poses, depth K).

    Returns (state, lm_result); lm_result carries the accepted-cost trace,
    non-increasing by construction.
    """
    problem = _RefineProblem(state0, observations, intr_rgb, board, cfg)
    x_full = problem.pack_initial()
    active = problem.active_indices()

    def residual(x_active):
        x = x_full.copy()
        x[active] = x_active
        return problem.residual(x)

    result = lm_minimize(residual, x_full[active], max_iter=cfg.max_iter,
                         ftol=cfg.ftol, xtol=cfg.xtol)
    if not result.converged:
        log.warning("refinement stopped at max_iter with cost %.3e "
                    "(trace: %s)", result.final_cost,
                    ", ".join(f"{c:.3e}" for c in result.cost_trace[-5:]))
    x_final = x_full.copy()
    x_final[active] = result.x
    state = problem.unpack(x_final)
    return state, result


def refine_problem(state0, observations, intr_rgb, board, cfg=GlobalConfig()):
    """Expose the packed residual for gradient checks and diagnostics."""
    return _RefineProblem(state0, observations, intr_rgb, board, cfg)
