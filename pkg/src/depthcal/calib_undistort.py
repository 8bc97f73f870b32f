"""Stage one of the calibration: undistortion map estimation.

Frames are processed nearest-first so the map learned from close, barely
distorted shots bootstraps the wall segmentation of the farther ones. Per
frame: undistort the cloud with the current map, select the wall points with
a checkerboard-seeded RANSAC, fit the reference plane to the *original*
cloud near the wall center, and update the binned map from line-of-sight
projections onto that plane.

Sequential by design: each frame must see the map built from all nearer
frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthImage,
    GeometryError,
    IndexSet,
    KINECT1_QUANTIZATION,
    NoiseModel,
    OrganizedCloud,
    Plane,
    RigidTransform,
    depth_to_cloud,
    fit_plane,
    solve_pnp,
    transform_plane,
)
from .maps import SampleSet, UndistortionMap, apply_undistortion, fit_weighted_poly_batch

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """Raised when a calibration stage cannot produce a usable result."""


@dataclass(frozen=True)
class BoardSpec:
    """Checkerboard geometry: inner corner grid and square size in meters."""

    rows: int
    cols: int
    square_size: float

    def __post_init__(self):
        if self.rows < 3 or self.cols < 3:
            raise CalibrationError("board needs at least a 3x3 inner corner grid")
        if self.square_size <= 0:
            raise CalibrationError("board square size must be positive")

    def corners_3d(self):
        """Corner (r, c) -> (c * s, r * s, 0), row-major (R*C, 3)."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        out = np.zeros((self.rows * self.cols, 3))
        out[:, 0] = c.ravel() * self.square_size
        out[:, 1] = r.ravel() * self.square_size
        return out

    @property
    def plane(self):
        """The board plane in its own frame (z = 0)."""
        return Plane((0.0, 0.0, 1.0), 0.0)


@dataclass(frozen=True, eq=False)
class Frame:
    """One calibration shot: a depth image plus the detected corner grid."""

    frame_id: str
    depth: DepthImage
    corners: np.ndarray  # (rows, cols, 2) pixel coordinates in the RGB image

    def __init__(self, frame_id, depth, corners):
        corners = np.asarray(corners, dtype=float)
        if corners.ndim != 3 or corners.shape[2] != 2:
            raise CalibrationError("corners must form a (rows, cols, 2) grid")
        if not np.all(np.isfinite(corners)):
            raise CalibrationError(f"frame {frame_id}: incomplete corner grid")
        object.__setattr__(self, "frame_id", str(frame_id))
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "corners", corners)
        self.corners.setflags(write=False)

    @property
    def corner_points(self):
        return self.corners.reshape(-1, 2)


@dataclass(frozen=True)
class UndistortConfig:
    """Free parameters of stage one."""

    chi: int = 4  # bin size along u, pixels
    psi: int = 4  # bin size along v, pixels
    degree: int = 2
    kappa: float = 3.0  # RANSAC inlier threshold, multiples of sigma(z)
    ransac_iterations: int = 50
    fit_radius: float = 120.0  # pixels around the inlier centroid used for the plane fit
    min_inliers: int = 100
    seed: int = 0
    noise_model: NoiseModel = field(default=KINECT1_QUANTIZATION)
    seed_angle_deg: float = 30.0  # gate: max angle between candidate and seed normals
    seed_offset_m: float = 0.3  # gate: max offset difference to the seed plane
    # minimum sample depth spread (meters) before a curvature degree is
    # trusted; narrow arcs make super-linear terms explode under extrapolation
    min_spread_linear: float = 0.05
    min_spread_superlinear: float = 0.8

    def __post_init__(self):
        if min(self.chi, self.psi, self.degree, self.ransac_iterations,
               self.min_inliers) <= 0 or self.fit_radius <= 0:
            raise CalibrationError("config values must be positive")
        if self.kappa < 1.0:
            raise CalibrationError("kappa must be at least 1")


class SampleGrid:
    """Sample sets of all control pixels, stored as flat fixed-capacity arrays."""

    __slots__ = ("z", "z_pi", "count")

    def __init__(self, z, z_pi, count):
        self.z = z
        self.z_pi = z_pi
        self.count = count

    @staticmethod
    def empty(grid_shape, capacity):
        gh, gw = grid_shape
        return SampleGrid(np.zeros((gh, gw, capacity)),
                          np.zeros((gh, gw, capacity)),
                          np.zeros((gh, gw), dtype=int))

    def appended(self, mask, z_bar, z_pi_bar):
        """New grid with one (z_bar, z_pi_bar) sample appended where mask holds."""
        z = self.z.copy()
        z_pi = self.z_pi.copy()
        count = self.count.copy()
        if self.z.shape[2] <= count.max(initial=0):
            grow = np.zeros(self.z.shape[:2] + (self.z.shape[2] + 8,))
            grow[:, :, :self.z.shape[2]] = z
            z = grow
            grow = np.zeros_like(z)
            grow[:, :, :self.z_pi.shape[2]] = z_pi
            z_pi = grow
        j, i = np.nonzero(mask)
        z[j, i, count[j, i]] = z_bar[j, i]
        z_pi[j, i, count[j, i]] = z_pi_bar[j, i]
        count[j, i] += 1
        return SampleGrid(z, z_pi, count)

    def mask(self):
        return np.arange(self.z.shape[2])[None, None, :] < self.count[:, :, None]

    def sample_set(self, i, j) -> SampleSet:
        n = self.count[j, i]
        return SampleSet(self.z[j, i, :n], self.z_pi[j, i, :n])


def _board_pose(frame_corners, intr_rgb: CameraIntrinsics, board: BoardSpec):
    return solve_pnp(board.corners_3d(), np.asarray(frame_corners).reshape(-1, 2),
                     intr_rgb)


def sort_frames_by_distance(frames, t0: RigidTransform, intr_rgb: CameraIntrinsics,
                            board: BoardSpec):
    """Frames ordered by ascending board distance (PnP z-translation).

    Frames whose pose estimation fails are dropped with a warning. The sort
    is stable, so equal distances preserve the input order.
    """
    keyed = []
    for frame in frames:
        try:
            pose, _ = _board_pose(frame.corners, intr_rgb, board)
        except GeometryError as exc:
            log.warning("frame %s dropped: PnP failed (%s)", frame.frame_id, exc)
            continue
        keyed.append((float(pose.translation[2]), frame))
    keyed.sort(key=lambda kv: kv[0])
    return [frame for _, frame in keyed]


def _seed_plane(frame_corners, t0, intr_rgb, board) -> Plane:
    """Checkerboard plane moved into the depth sensor frame via t0."""
    pose, _ = _board_pose(frame_corners, intr_rgb, board)
    plane_cam = transform_plane(pose, board.plane)
    return transform_plane(t0.inverse(), plane_cam)


def select_wall_points(undistorted: OrganizedCloud, corners, t0: RigidTransform,
                       intr_rgb: CameraIntrinsics, board: BoardSpec,
                       cfg: UndistortConfig, rng=None) -> IndexSet:
    """Wall pixel coordinates by checkerboard-seeded RANSAC on the undistorted cloud.

    The consensus plane must stay near the seed (normal angle and offset
    gates), which rejects other scene planes such as the floor. The inlier
    threshold scales with the quantization noise at the seed plane depth.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    seed = _seed_plane(corners, t0, intr_rgb, board)
    valid_uv = np.column_stack(np.nonzero(undistorted.valid)[::-1])  # (u, v)
    pts = undistorted.points[valid_uv[:, 1], valid_uv[:, 0]]
    if pts.shape[0] < cfg.min_inliers:
        raise CalibrationError("not enough valid depth points for wall selection")

    if abs(seed.normal[2]) > 0.2:
        z_bar = seed.offset / abs(seed.normal[2])
    else:
        z_bar = float(np.mean(pts[:, 2]))
    threshold = cfg.kappa * cfg.noise_model.sigma(z_bar)
    cos_gate = np.cos(np.deg2rad(cfg.seed_angle_deg))

    def near_seed(plane):
        return (abs(plane.normal @ seed.normal) >= cos_gate
                and abs(plane.offset - seed.offset) <= cfg.seed_offset_m)

    def count_inliers(plane):
        return np.abs(plane.signed_distance(pts)) <= threshold

    best_plane, best_mask = seed, count_inliers(seed)
    best_count = int(best_mask.sum())
    for _ in range(cfg.ransac_iterations):
        take = rng.integers(0, pts.shape[0], size=3)
        if len(set(take.tolist())) < 3:
            continue
        try:
            cand = fit_plane(pts[take])
        except GeometryError:
            continue
        if not near_seed(cand):
            continue
        mask = count_inliers(cand)
        n = int(mask.sum())
        if n > best_count:
            best_plane, best_mask, best_count = cand, mask, n
    if best_count < cfg.min_inliers:
        raise CalibrationError("no candidate plane near the checkerboard seed "
                               f"({best_count} inliers < {cfg.min_inliers})")
    # consensus refinement: refit on the inliers, recount once
    refined = fit_plane(pts[best_mask])
    if near_seed(refined):
        mask = count_inliers(refined)
        if int(mask.sum()) >= cfg.min_inliers:
            best_mask = mask
    return IndexSet(valid_uv[best_mask], width=undistorted.width,
                    height=undistorted.height)


def fit_reference_plane(original: OrganizedCloud, inliers: IndexSet,
                        cfg: UndistortConfig) -> Plane:
    """Reference plane for the map update, fit to the original (distorted) cloud.

    Only inlier pixels within `fit_radius` of the inlier centroid are used;
    restricting the fit to the wall center keeps it stable under the
    depth-dependent distortion at the image borders.
    """
    if len(inliers) == 0:
        raise CalibrationError("empty inlier set")
    uv = inliers.uv.astype(float)
    centroid = uv.mean(axis=0)
    keep = np.hypot(uv[:, 0] - centroid[0], uv[:, 1] - centroid[1]) <= cfg.fit_radius
    if keep.sum() < 3:
        raise CalibrationError("fewer than 3 inliers inside the fit radius")
    pts = original.points[inliers.v[keep], inliers.u[keep]]
    return fit_plane(pts)


def update_map(umap: UndistortionMap, samples: SampleGrid, original: OrganizedCloud,
               inliers: IndexSet, plane: Plane, cfg: UndistortConfig):
    """One frame's map update.

    Every inlier pixel contributes (w, z, z_plane) to the sample pools of its
    4 surrounding control pixels with its bilinear weight; per control pixel
    the weighted mean joins the sample set and the control polynomial is
    refit. Control pixels receiving no samples, and pixels whose fit is
    underdetermined or singular, keep their previous function.
    """
    pts = original.points[inliers.v, inliers.u]
    denom = pts @ plane.normal
    good = np.abs(denom) > 1e-12  # drop rays parallel to the plane
    u = inliers.u[good]
    v = inliers.v[good]
    z = pts[good, 2]
    z_pi = plane.offset * z / denom[good]

    gh, gw = umap.grid_shape
    i0 = u // umap.chi
    j0 = v // umap.psi
    fu = (u - i0 * umap.chi) / umap.chi
    fv = (v - j0 * umap.psi) / umap.psi

    w_sum = np.zeros(gh * gw)
    wz_sum = np.zeros(gh * gw)
    wzpi_sum = np.zeros(gh * gw)
    for dj, wv in ((0, 1.0 - fv), (1, fv)):
        for di, wu in ((0, 1.0 - fu), (1, fu)):
            w = wu * wv
            idx = (j0 + dj) * gw + (i0 + di)
            w_sum += np.bincount(idx, weights=w, minlength=gh * gw)
            wz_sum += np.bincount(idx, weights=w * z, minlength=gh * gw)
            wzpi_sum += np.bincount(idx, weights=w * z_pi, minlength=gh * gw)

    received = (w_sum > 0).reshape(gh, gw)
    z_bar = np.zeros((gh, gw))
    z_pi_bar = np.zeros((gh, gw))
    nz = w_sum > 0
    z_bar.ravel()[nz] = wz_sum[nz] / w_sum[nz]
    z_pi_bar.ravel()[nz] = wzpi_sum[nz] / w_sum[nz]

    new_samples = samples.appended(received, z_bar, z_pi_bar)

    # Refit only the control functions whose sample sets changed. While a
    # control pixel has too few samples, or too narrow a depth spread, for
    # the full degree, fit the best determined lower degree instead so
    # nearer frames can bootstrap the wall segmentation of farther ones;
    # keep the previous function when even a line is underdetermined.
    sel = np.nonzero(received.ravel())[0]
    flat_z = new_samples.z.reshape(gh * gw, -1)[sel]
    flat_zpi = new_samples.z_pi.reshape(gh * gw, -1)[sel]
    flat_mask = new_samples.mask().reshape(gh * gw, -1)[sel]
    spread = (np.where(flat_mask, flat_z, -np.inf).max(axis=1)
              - np.where(flat_mask, flat_z, np.inf).min(axis=1))
    new_coeffs = umap.coefficients.copy()
    flat_out = new_coeffs.reshape(gh * gw, -1)
    pending = np.ones(sel.size, dtype=bool)
    for deg in range(umap.degree, 0, -1):
        if not np.any(pending):
            break
        min_spread = cfg.min_spread_linear if deg == 1 else cfg.min_spread_superlinear
        rows = np.nonzero(pending & (spread >= min_spread))[0]
        if rows.size == 0:
            continue
        coeffs, ok = fit_weighted_poly_batch(flat_z[rows], flat_zpi[rows],
                                             flat_mask[rows], cfg.noise_model,
                                             deg, umap.constant_zero)
        good = rows[ok]
        flat_out[sel[good], :] = 0.0
        flat_out[sel[good], :deg + 1] = coeffs[ok]
        pending[good] = False
    if np.any(pending):
        log.debug("update_map: %d control fits deferred (underdetermined)",
                  int(pending.sum()))
    return umap.with_coefficients(new_coeffs), new_samples


def estimate_undistortion_map(frames, t0: RigidTransform, intr_rgb: CameraIntrinsics,
                              intr_depth: CameraIntrinsics, board: BoardSpec,
                              cfg: UndistortConfig):
    """Run stage one over a frame list.

    Returns (map, inlier_sets) where inlier_sets maps frame id -> IndexSet of
    the wall pixels selected for that frame (stage two consumes them).
    Deterministic for a fixed cfg.seed.
    """
    if len(frames) < cfg.degree + 1:
        raise CalibrationError(
            f"need at least {cfg.degree + 1} frames for a degree-{cfg.degree} map")
    rng = np.random.default_rng(cfg.seed)
    ordered = sort_frames_by_distance(frames, t0, intr_rgb, board)
    if len(ordered) < cfg.degree + 1:
        raise CalibrationError("too few frames with a usable board pose")

    width, height = intr_depth.width, intr_depth.height
    umap = UndistortionMap.identity(width, height, cfg.chi, cfg.psi, cfg.degree)
    samples = SampleGrid.empty(umap.grid_shape, capacity=len(ordered))
    inlier_sets = {}
    for frame in ordered:
        original = depth_to_cloud(frame.depth, intr_depth)
        undistorted = apply_undistortion(umap, original)
        try:
            inliers = select_wall_points(undistorted, frame.corners, t0, intr_rgb,
                                         board, cfg, rng)
            plane = fit_reference_plane(original, inliers, cfg)
        except (CalibrationError, GeometryError) as exc:
            log.warning("frame %s skipped: %s", frame.frame_id, exc)
            continue
        umap, samples = update_map(umap, samples, original, inliers, plane, cfg)
        inlier_sets[frame.frame_id] = inliers
    if len(inlier_sets) < cfg.degree + 1:
        raise CalibrationError("too few usable frames after wall selection")
    return umap, inlier_sets
