"""End-to-end calibration driver plus the real-time correction entry point."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .calib_global import (
    GlobalConfig,
    RefinementState,
    build_observations,
    init_global,
    refine,
)
from .calib_undistort import (
    BoardSpec,
    UndistortConfig,
    estimate_undistortion_map,
)
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    OrganizedCloud,
    RigidTransform,
    depth_to_cloud,
)
from .maps import GlobalMap, UndistortionMap, apply_undistortion

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationResult:
    """Everything the two-stage calibration estimates, plus run diagnostics."""

    umap: UndistortionMap
    gmap: GlobalMap
    extrinsic: RigidTransform  # depth -> camera
    intr_depth: CameraIntrinsics
    intr_rgb: CameraIntrinsics
    board: BoardSpec
    initial_state: RefinementState
    final_state: RefinementState
    inlier_sets: dict
    cost_trace: tuple
    timings: dict


def calibrate(frames, t0: RigidTransform, intr_rgb: CameraIntrinsics,
              intr_depth: CameraIntrinsics, board: BoardSpec,
              undistort_cfg: UndistortConfig = UndistortConfig(),
              global_cfg: GlobalConfig = GlobalConfig()) -> CalibrationResult:
    """Run both calibration stages over a frame list.

    `t0` is the rough initial camera-depth transform (factory values are
    fine); `intr_depth` is the initial depth intrinsics guess that stage two
    refines.
    """
    timings = {}
    tic = time.perf_counter()
    umap, inlier_sets = estimate_undistortion_map(frames, t0, intr_rgb,
                                                  intr_depth, board,
                                                  undistort_cfg)
    timings["undistortion_map"] = time.perf_counter() - tic

    usable = [f for f in frames if f.frame_id in inlier_sets]
    tic = time.perf_counter()
    clouds = []
    inl_list = []
    corners_list = []
    undistorted_depths = {}
    for frame in usable:
        und = apply_undistortion(umap, depth_to_cloud(frame.depth, intr_depth))
        clouds.append(und)
        inl_list.append(inlier_sets[frame.frame_id])
        corners_list.append(frame.corner_points)
        undistorted_depths[frame.frame_id] = und.depth_image()
    gmap0, extr0, poses0 = init_global(clouds, inl_list, corners_list,
                                       intr_rgb, board, global_cfg)
    timings["global_init"] = time.perf_counter() - tic

    state0 = RefinementState(extrinsic=extr0, board_poses=tuple(poses0),
                             intr_depth=intr_depth, gmap=gmap0)
    observations = build_observations(usable, undistorted_depths, inlier_sets,
                                      global_cfg.max_points_per_frame)
    tic = time.perf_counter()
    state, lm_result = refine(state0, observations, intr_rgb, board, global_cfg)
    timings["refinement"] = time.perf_counter() - tic
    log.info("calibration done: %d frames, refine cost %.4e -> %.4e "
             "in %d iterations",
             len(usable), lm_result.cost_trace[0], lm_result.final_cost,
             lm_result.iterations)
    return CalibrationResult(
        umap=umap,
        gmap=state.gmap,
        extrinsic=state.extrinsic,
        intr_depth=state.intr_depth,
        intr_rgb=intr_rgb,
        board=board,
        initial_state=state0,
        final_state=state,
        inlier_sets=inlier_sets,
        cost_trace=tuple(lm_result.cost_trace),
        timings=timings,
    )


def apply_calibration(umap: UndistortionMap, gmap: GlobalMap, img: DepthImage,
                      intr: CameraIntrinsics, threads: int = 1) -> OrganizedCloud:
    """Correct one depth frame (d* = g(u(d))) and back-project it.

    With threads > 1 the image is split into row bands processed
    concurrently; the per-pixel arithmetic is unchanged, so the result is
    numerically identical to the single-threaded path.
    """
    from .maps import correct_depth_image

    if threads <= 1:
        return depth_to_cloud(correct_depth_image(umap, gmap, img), intr)
    dense_u = umap.dense_coefficients()
    dense_g = gmap._grid.dense_coefficients()
    h, w = img.data.shape
    out = np.empty((h, w))
    xs = (np.arange(w) - intr.cx) / intr.fx
    ys = (np.arange(h) - intr.cy) / intr.fy
    pts = np.empty((h, w, 3))
    valid = np.empty((h, w), dtype=bool)

    def run_band(v0, v1):
        band = img.data[v0:v1]
        dhat = _horner(dense_u[v0:v1], band)
        dstar = _horner(dense_g[v0:v1], dhat)
        ok = (band > 0.0) & (dhat > 0.0) & (dstar > 0.0)
        dstar = np.where(ok, dstar, 0.0)
        out[v0:v1] = dstar
        valid[v0:v1] = ok
        pts[v0:v1, :, 0] = dstar * xs[None, :]
        pts[v0:v1, :, 1] = dstar * ys[v0:v1, None]
        pts[v0:v1, :, 2] = dstar

    bounds = np.linspace(0, h, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda k: run_band(bounds[k], bounds[k + 1]),
                      range(threads)))
    return OrganizedCloud(w, h, pts, valid)


def _horner(dense, d):
    out = np.zeros_like(d)
    for k in range(dense.shape[2] - 1, -1, -1):
        out = out * d + dense[:, :, k]
    return out
