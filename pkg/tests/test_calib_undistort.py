import numpy as np
import pytest

import depthcal as dc
from depthcal import synthbench as sb
from depthcal.calib_undistort import SampleGrid
from depthcal.maps import fit_weighted_poly_batch


T0 = dc.RigidTransform((1, 0, 0, 0), (0.025, 0.0, 0.0))


def small_scene(noise=False, seed=3, n_train=12, n_test=3, peak=0.022, floor=None):
    return sb.standard_scene(
        n_train=n_train, n_test=n_test, seed=seed, noise=noise,
        width=160, height=120, floor_y=floor,
        distortion=sb.bowl_distortion(160, 120, peak=peak, grid_bin=(2, 2)))


def small_cfg(**kw):
    base = dict(chi=2, psi=2, degree=2, seed=1, min_inliers=50, fit_radius=24)
    base.update(kw)
    return dc.UndistortConfig(**base)


@pytest.fixture(scope="module")
def clean_scene():
    scene = small_scene()
    frames = [sb.render_frame(scene, k) for k in range(scene.n_frames)]
    return scene, frames


# ---------------------------------------------------------------------------
# board / frame types


def test_board_corner_layout():
    board = dc.BoardSpec(rows=3, cols=4, square_size=0.05)
    pts = board.corners_3d()
    assert pts.shape == (12, 3)
    assert np.allclose(pts[0], (0, 0, 0))
    assert np.allclose(pts[1], (0.05, 0, 0))  # corner (0, 1) -> (c*s, r*s, 0)
    assert np.allclose(pts[4], (0, 0.05, 0))
    assert np.all(pts[:, 2] == 0)


def test_board_rejects_small_grid():
    with pytest.raises(dc.CalibrationError):
        dc.BoardSpec(rows=2, cols=8, square_size=0.1)


def test_frame_rejects_incomplete_corners():
    depth = dc.DepthImage(4, 4, np.ones((4, 4)))
    corners = np.full((3, 4, 2), np.nan)
    with pytest.raises(dc.CalibrationError):
        dc.Frame("x", depth, corners)


def test_config_requires_kappa_at_least_one():
    with pytest.raises(dc.CalibrationError):
        dc.UndistortConfig(kappa=0.5)


# ---------------------------------------------------------------------------
# sort_frames_by_distance


def test_sort_orders_by_board_distance(clean_scene):
    scene, frames = clean_scene
    train = [f for f in frames if not f.is_test]
    ordered = dc.sort_frames_by_distance([f.frame for f in train], T0,
                                         scene.intr_rgb, scene.board)
    dists = {f.frame.frame_id: f.wall_distance for f in train}
    got = [dists[f.frame_id] for f in ordered]
    assert got == sorted(got)


def test_sort_is_stable_for_equal_distances(clean_scene):
    scene, frames = clean_scene
    f = frames[0].frame
    twins = [dc.Frame("a", f.depth, f.corners), dc.Frame("b", f.depth, f.corners),
             dc.Frame("c", f.depth, f.corners)]
    ordered = dc.sort_frames_by_distance(twins, T0, scene.intr_rgb, scene.board)
    assert [fr.frame_id for fr in ordered] == ["a", "b", "c"]


def test_sort_drops_frames_with_garbage_corners(clean_scene):
    scene, frames = clean_scene
    good = frames[0].frame
    corners = good.corners.copy()
    corners[:] = 1.0  # all corners collapsed: homography is degenerate
    bad = dc.Frame("bad", good.depth, corners)
    ordered = dc.sort_frames_by_distance([good, bad], T0, scene.intr_rgb,
                                         scene.board)
    assert [f.frame_id for f in ordered] == [good.frame_id]


# ---------------------------------------------------------------------------
# select_wall_points


def test_select_wall_points_takes_whole_wall_when_undistorted(clean_scene):
    scene, frames = clean_scene
    lf = frames[0]
    cloud = dc.depth_to_cloud(lf.frame.depth, scene.intr_depth)
    # undo the distortion with the oracle, then selection must keep every wall pixel
    uu, vv = np.meshgrid(np.arange(160.0), np.arange(120.0))
    fixed = scene.distortion.correct_exact(uu, vv, lf.frame.depth.data)
    fixed_cloud = dc.depth_to_cloud(
        dc.DepthImage(160, 120, np.where(lf.frame.depth.valid, fixed, 0.0)),
        scene.intr_depth)
    inl = dc.select_wall_points(fixed_cloud, lf.frame.corners, T0,
                                scene.intr_rgb, scene.board, small_cfg(),
                                np.random.default_rng(0))
    assert len(inl) == int((lf.labels == sb.LABEL_WALL).sum())


def test_select_wall_points_excludes_floor():
    scene = small_scene(floor=0.8, n_train=4, n_test=3, seed=9, peak=0.0)
    # far fronto-parallel view shows plenty of floor
    lf = sb.render_frame(scene, scene.n_frames - 1)
    assert (lf.labels == sb.LABEL_FLOOR).any()
    cloud = dc.depth_to_cloud(lf.frame.depth, scene.intr_depth)
    inl = dc.select_wall_points(cloud, lf.frame.corners, scene.true_extrinsic,
                                scene.intr_rgb, scene.board, small_cfg(),
                                np.random.default_rng(0))
    labels = lf.labels[inl.v, inl.u]
    assert np.all(labels == sb.LABEL_WALL)


def test_select_wall_points_empty_image_errors(clean_scene):
    scene, frames = clean_scene
    empty = dc.depth_to_cloud(dc.DepthImage(160, 120, np.zeros((120, 160))),
                              scene.intr_depth)
    with pytest.raises(dc.CalibrationError):
        dc.select_wall_points(empty, frames[0].frame.corners, T0,
                              scene.intr_rgb, scene.board, small_cfg(),
                              np.random.default_rng(0))


# ---------------------------------------------------------------------------
# fit_reference_plane


def test_fit_reference_plane_matches_restricted_fit(clean_scene):
    scene, frames = clean_scene
    lf = frames[0]
    cloud = dc.depth_to_cloud(lf.frame.depth, scene.intr_depth)
    inl = dc.IndexSet.from_mask(lf.labels == sb.LABEL_WALL)
    cfg = small_cfg()
    plane = dc.fit_reference_plane(cloud, inl, cfg)
    uv = inl.uv.astype(float)
    centroid = uv.mean(axis=0)
    keep = np.hypot(*(uv - centroid).T) <= cfg.fit_radius
    expected = dc.fit_plane(cloud.points[inl.v[keep], inl.u[keep]])
    assert np.allclose(plane.normal, expected.normal, atol=1e-12)
    assert plane.offset == pytest.approx(expected.offset, abs=1e-12)


def test_fit_reference_plane_huge_radius_is_unrestricted(clean_scene):
    scene, frames = clean_scene
    lf = frames[0]
    cloud = dc.depth_to_cloud(lf.frame.depth, scene.intr_depth)
    inl = dc.IndexSet.from_mask(lf.labels == sb.LABEL_WALL)
    plane = dc.fit_reference_plane(cloud, inl, small_cfg(fit_radius=10000))
    expected = dc.fit_plane(cloud.points_at(inl))
    assert np.allclose(plane.normal, expected.normal, atol=1e-12)


def test_fit_reference_plane_depth_within_distorted_bounds(clean_scene):
    scene, frames = clean_scene
    # farthest training frame has the strongest bowl
    far = max((f for f in frames if not f.is_test), key=lambda f: f.wall_distance)
    cloud = dc.depth_to_cloud(far.frame.depth, scene.intr_depth)
    inl = dc.IndexSet.from_mask(far.labels == sb.LABEL_WALL)
    plane = dc.fit_reference_plane(cloud, inl, small_cfg())
    depth_at_axis = plane.offset / plane.normal[2]
    z = cloud.points_at(inl)[:, 2]
    assert z.min() <= depth_at_axis <= z.max()


def test_fit_reference_plane_empty_inliers(clean_scene):
    scene, frames = clean_scene
    cloud = dc.depth_to_cloud(frames[0].frame.depth, scene.intr_depth)
    with pytest.raises(dc.CalibrationError):
        dc.fit_reference_plane(cloud, dc.IndexSet(np.empty((0, 2))), small_cfg())


# ---------------------------------------------------------------------------
# update_map


def frame_pieces(scene, lf):
    cloud = dc.depth_to_cloud(lf.frame.depth, scene.intr_depth)
    inl = dc.IndexSet.from_mask(lf.labels == sb.LABEL_WALL)
    return cloud, inl


def test_update_map_identity_when_points_on_plane():
    # an exact plane cloud: every sample pair has z_pi == z
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    scene_plane = dc.Plane((0, 0, 1.0), 2.0)
    img = dc.DepthImage(32, 24, np.full((24, 32), 2.0))
    cloud = dc.depth_to_cloud(img, intr)
    inl = dc.IndexSet.from_mask(cloud.valid)
    cfg = small_cfg(chi=4, psi=4)
    umap = dc.UndistortionMap.identity(32, 24, 4, 4, 2)
    samples = SampleGrid.empty(umap.grid_shape, 4)
    for plane_depth in (2.0, 2.5, 3.5):
        img = dc.DepthImage(32, 24, np.full((24, 32), plane_depth))
        cloud = dc.depth_to_cloud(img, intr)
        umap, samples = dc.update_map(umap, samples, cloud, inl,
                                      dc.Plane((0, 0, 1.0), plane_depth), cfg)
    del scene_plane
    z = np.linspace(2.0, 3.5, 7)
    for (i, j) in [(0, 0), (4, 3), (8, 6)]:
        fn = umap.control_function(i, j)
        assert np.allclose(dc.poly_eval(fn, z), z, atol=1e-9)


def test_update_map_weighted_mean_matches_oracle(clean_scene):
    scene, frames = clean_scene
    lf = frames[0]
    cloud, inl = frame_pieces(scene, lf)
    cfg = small_cfg()
    plane = dc.fit_reference_plane(cloud, inl, cfg)
    umap = dc.UndistortionMap.identity(160, 120, cfg.chi, cfg.psi, cfg.degree)
    samples = SampleGrid.empty(umap.grid_shape, 2)
    _, updated = dc.update_map(umap, samples, cloud, inl, plane, cfg)

    # independent recomputation of the aggregated sample of one control pixel
    target = (20, 15)  # grid column, row -> pixel (40, 30)
    w_sum = z_sum = zpi_sum = 0.0
    for u, v in inl.uv:
        i0, j0 = u // cfg.chi, v // cfg.psi
        for dj in (0, 1):
            for di in (0, 1):
                if (i0 + di, j0 + dj) != target:
                    continue
                s, t = (i0 + di) * cfg.chi, (j0 + dj) * cfg.psi
                w = (1 - abs(u - s) / cfg.chi) * (1 - abs(v - t) / cfg.psi)
                p = cloud.points[v, u]
                z_pi = plane.offset * p[2] / (p @ plane.normal)
                w_sum += w
                z_sum += w * p[2]
                zpi_sum += w * z_pi
    got = updated.sample_set(*target)
    assert len(got) == 1
    assert got.z[0] == pytest.approx(z_sum / w_sum, abs=1e-12)
    assert got.z_pi[0] == pytest.approx(zpi_sum / w_sum, abs=1e-12)


def test_update_map_single_inlier_weight_structure():
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    img_data = np.zeros((24, 32))
    img_data[8, 8] = 2.0  # exactly on control pixel (2, 2) for 4x4 bins
    cloud = dc.depth_to_cloud(dc.DepthImage(32, 24, img_data), intr)
    inl = dc.IndexSet([(8, 8)])
    cfg = small_cfg(chi=4, psi=4, min_inliers=1)
    umap = dc.UndistortionMap.identity(32, 24, 4, 4, 2)
    samples = SampleGrid.empty(umap.grid_shape, 2)
    _, updated = dc.update_map(umap, samples, cloud, inl,
                               dc.Plane((0, 0, 1.0), 2.0), cfg)
    assert updated.count[2, 2] == 1  # weight-1 sample at its own control pixel
    # stencil mates got only zero-weight contributions: no sample appended
    assert updated.count[2, 3] == 0
    assert updated.count[3, 2] == 0
    assert updated.count.sum() == 1


def test_update_map_leaves_unsampled_controls_alone(clean_scene):
    scene, frames = clean_scene
    lf = frames[0]
    cloud, _ = frame_pieces(scene, lf)
    # restrict inliers to the top-left quadrant
    mask = np.zeros((120, 160), dtype=bool)
    mask[:40, :40] = lf.labels[:40, :40] == sb.LABEL_WALL
    inl = dc.IndexSet.from_mask(mask)
    cfg = small_cfg()
    plane = dc.fit_reference_plane(cloud, inl, small_cfg(fit_radius=10000))
    rng = np.random.default_rng(2)
    start = dc.UndistortionMap.identity(160, 120, cfg.chi, cfg.psi, cfg.degree)
    noisy_coeffs = start.coefficients + rng.normal(0, 0.01, start.coefficients.shape)
    start = start.with_coefficients(noisy_coeffs)
    samples = SampleGrid.empty(start.grid_shape, 2)
    updated, _ = dc.update_map(start, samples, cloud, inl, plane, cfg)
    untouched = updated.coefficients[:, 30:]  # far right columns saw no inlier
    assert np.array_equal(untouched, start.coefficients[:, 30:])


# ---------------------------------------------------------------------------
# estimate_undistortion_map


def test_estimate_identity_for_undistorted_data():
    scene = small_scene(peak=0.0, seed=4)
    frames = [sb.render_frame(scene, k) for k in range(scene.n_frames)]
    umap, inliers = dc.estimate_undistortion_map(
        [f.frame for f in frames if not f.is_test], T0, scene.intr_rgb,
        scene.intr_depth, scene.board, small_cfg())
    assert len(inliers) == scene.n_train
    z = np.linspace(1.0, 4.0, 13)
    gh, gw = umap.grid_shape
    for j in range(0, gh, 7):
        for i in range(0, gw, 9):
            fn = umap.control_function(i, j)
            assert np.max(np.abs(dc.poly_eval(fn, z) - z)) < 1e-4


def test_estimate_recovers_injected_field(clean_scene):
    scene, frames = clean_scene
    umap, _ = dc.estimate_undistortion_map(
        [f.frame for f in frames if not f.is_test], T0, scene.intr_rgb,
        scene.intr_depth, scene.board, small_cfg())
    # compare as functions at probe depths; the common depth-dependent shift
    # (reference-plane bias) is stage two's job, so remove the mean per depth
    inj = scene.distortion.undistortion_field
    uu, vv = np.meshgrid(np.arange(0.0, 160.0, 8), np.arange(0.0, 120.0, 8))
    for z in (1.5, 2.5, 3.5):
        rec = np.zeros_like(uu)
        tru = np.zeros_like(uu)
        rc = umap.pixel_coefficients(uu, vv)
        tc = inj.pixel_coefficients(uu, vv)
        for k in range(3):
            rec += rc[:, :, k] * z ** k
            tru += tc[:, :, k] * z ** k
        diff = rec - tru
        diff -= diff.mean()
        assert np.max(np.abs(diff)) < 1.5e-3


def test_estimate_requires_enough_frames(clean_scene):
    scene, frames = clean_scene
    with pytest.raises(dc.CalibrationError):
        dc.estimate_undistortion_map([frames[0].frame], T0, scene.intr_rgb,
                                     scene.intr_depth, scene.board, small_cfg())


def test_estimate_single_distance_leaves_identity():
    # all frames at one distance: curvature is never determined, the identity
    # fallback stays in place per the update policy
    scene = small_scene(peak=0.0, seed=8)
    base = sb.render_frame(scene, 0)
    frames = [dc.Frame(f"f{k}", base.frame.depth, base.frame.corners)
              for k in range(4)]
    umap, _ = dc.estimate_undistortion_map(frames, T0, scene.intr_rgb,
                                           scene.intr_depth, scene.board,
                                           small_cfg())
    gh, gw = umap.grid_shape
    ident = dc.UndistortionMap.identity(160, 120, 2, 2, 2)
    # quadratic terms were never unlocked
    assert np.array_equal(umap.coefficients[:, :, 2],
                          ident.coefficients[:, :, 2])


def test_estimate_is_deterministic(clean_scene):
    scene, frames = clean_scene
    train = [f.frame for f in frames if not f.is_test]
    a, _ = dc.estimate_undistortion_map(train, T0, scene.intr_rgb,
                                        scene.intr_depth, scene.board,
                                        small_cfg(seed=77))
    b, _ = dc.estimate_undistortion_map(train, T0, scene.intr_rgb,
                                        scene.intr_depth, scene.board,
                                        small_cfg(seed=77))
    assert np.array_equal(a.coefficients, b.coefficients)


def test_batch_fit_respects_constant_zero_everywhere():
    rng = np.random.default_rng(0)
    z = rng.uniform(1, 4, (5, 10))
    zpi = 0.97 * z + 0.01 * z * z
    coeffs, ok = fit_weighted_poly_batch(z, zpi, np.ones_like(z, dtype=bool),
                                         dc.KINECT1_QUANTIZATION, 2, True)
    assert ok.all()
    assert np.all(coeffs[:, 0] == 0.0)
    assert np.allclose(coeffs[:, 1], 0.97, atol=1e-9)
