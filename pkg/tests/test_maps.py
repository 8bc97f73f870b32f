import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import depthcal as dc
from depthcal.maps import MapError, fit_weighted_poly_batch


NM = dc.KINECT1_QUANTIZATION


def identity_map(width=32, height=24, chi=4, psi=4, degree=2):
    return dc.UndistortionMap.identity(width, height, chi, psi, degree)


def uniform_map(poly, width=32, height=24, chi=4, psi=4):
    base = identity_map(width, height, chi, psi, degree=poly.degree)
    coeffs = np.broadcast_to(np.asarray(poly.coefficients),
                             base.coefficients.shape).copy()
    return base.with_coefficients(coeffs)


# ---------------------------------------------------------------------------
# PolyFn / poly_eval


def test_poly_eval_identity():
    assert dc.poly_eval(dc.PolyFn((0.0, 1.0)), 2.5) == 2.5


def test_poly_eval_quadratic():
    f = dc.PolyFn((0.03, 0.97, 0.01))
    assert dc.poly_eval(f, 2.0) == pytest.approx(2.01, abs=1e-15)


def test_poly_eval_constant_zero():
    f = dc.PolyFn((0.0, 0.95, 0.02), constant_zero=True)
    assert dc.poly_eval(f, 3.0) == pytest.approx(3.03, abs=1e-15)


def test_polyfn_rejects_nonzero_constant_when_pinned():
    with pytest.raises(MapError):
        dc.PolyFn((0.1, 1.0), constant_zero=True)


def test_polyfn_rejects_degree_5():
    with pytest.raises(MapError):
        dc.PolyFn((0.0, 1.0, 0.0, 0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# fit_weighted_poly


def test_fit_exact_quadratic():
    z = np.array([1.0, 2.0, 3.0, 4.0])
    z_pi = 0.03 + 0.97 * z + 0.01 * z ** 2
    f = dc.fit_weighted_poly((z, z_pi), NM, degree=2)
    assert np.allclose(f.coefficients, (0.03, 0.97, 0.01), atol=1e-9)


def test_fit_constant_zero():
    z = np.array([1.0, 2.0, 3.0])
    z_pi = 0.95 * z + 0.02 * z ** 2
    f = dc.fit_weighted_poly((z, z_pi), NM, degree=2, constant_zero=True)
    assert f.coefficients[0] == 0.0
    assert np.allclose(f.coefficients, (0.0, 0.95, 0.02), atol=1e-9)


def test_fit_matches_pseudo_inverse_oracle():
    # independent oracle: scale rows by 1/sigma and use the pseudo-inverse
    rng = np.random.default_rng(17)
    z = rng.uniform(0.8, 4.5, 200)
    z_pi = 0.02 + 0.96 * z + 0.012 * z ** 2 + rng.normal(0, 0.003, 200)
    f = dc.fit_weighted_poly((z, z_pi), NM, degree=2)

    sigma = NM.sigma(z)
    a = np.column_stack([np.ones_like(z), z, z ** 2]) / sigma[:, None]
    coeffs = np.linalg.pinv(a) @ (z_pi / sigma)
    assert np.allclose(f.coefficients, coeffs, atol=1e-8)


def test_fit_underdetermined():
    with pytest.raises(MapError):
        dc.fit_weighted_poly((np.array([1.0, 2.0]), np.array([1.0, 2.0])), NM, degree=2)


def test_fit_singular_same_depth():
    z = np.full(10, 2.0)
    with pytest.raises(MapError):
        dc.fit_weighted_poly((z, z), NM, degree=2)


def test_fit_batch_flags_bad_sets():
    z = np.array([[1.0, 2, 3, 4], [2.0, 2, 2, 2]])
    z_pi = z.copy()
    mask = np.ones_like(z, dtype=bool)
    coeffs, ok = fit_weighted_poly_batch(z, z_pi, mask, NM, 2, False)
    assert ok[0] and not ok[1]
    assert np.allclose(coeffs[0], (0, 1, 0), atol=1e-9)


def test_sample_set_rejects_nonpositive_depth():
    s = dc.SampleSet()
    with pytest.raises(MapError):
        s.append(0.0, 1.0)


# ---------------------------------------------------------------------------
# surrounding / bilinear weights


def test_surrounding_midpoint():
    m = identity_map()
    got = dict(dc.surrounding(m, 6, 6))
    assert set(got) == {(4, 4), (8, 4), (4, 8), (8, 8)}
    assert all(w == pytest.approx(0.25) for w in got.values())


def test_surrounding_on_control_pixel():
    m = identity_map()
    got = dict(dc.surrounding(m, 4, 4))
    assert got[(4, 4)] == pytest.approx(1.0)
    assert sum(got.values()) == pytest.approx(1.0, abs=1e-15)


def test_surrounding_1d_linearity():
    m = identity_map()
    got = dict(dc.surrounding(m, 5, 4))
    assert got[(4, 4)] == pytest.approx(0.75)
    assert got[(8, 4)] == pytest.approx(0.25)
    assert got[(4, 8)] == 0.0
    assert got[(8, 8)] == 0.0


def test_surrounding_out_of_bounds():
    with pytest.raises(MapError):
        dc.surrounding(identity_map(), 32, 0)


@settings(max_examples=200, deadline=None)
@given(data=st.data())
def test_partition_of_unity(data):
    chi = data.draw(st.integers(1, 16))
    psi = data.draw(st.integers(1, 16))
    w = data.draw(st.integers(2, 64))
    h = data.draw(st.integers(2, 64))
    u = data.draw(st.integers(0, w - 1))
    v = data.draw(st.integers(0, h - 1))
    m = dc.UndistortionMap.identity(w, h, chi, psi)
    weights = [wt for _, wt in dc.surrounding(m, u, v)]
    assert abs(sum(weights) - 1.0) < 1e-12
    assert all(wt >= 0 for wt in weights)


# ---------------------------------------------------------------------------
# undistort_depth / apply_undistortion


def test_undistort_depth_identity():
    m = identity_map()
    assert dc.undistort_depth(m, 6, 6, 2.345) == pytest.approx(2.345, abs=1e-15)


def test_undistort_depth_at_control_point():
    m = identity_map()
    coeffs = m.coefficients.copy()
    coeffs[1, 1] = (0.1, 1.05, 0.002)
    m = m.with_coefficients(coeffs)
    d = 2.0
    expected = 0.1 + 1.05 * d + 0.002 * d * d
    assert dc.undistort_depth(m, 4, 4, d) == pytest.approx(expected, abs=1e-15)


def test_undistort_depth_midpoint_is_mean():
    m = identity_map()
    coeffs = m.coefficients.copy()
    vals = [(0.0, 1.0, 0.0), (0.1, 1.0, 0.0), (0.0, 1.1, 0.0), (0.0, 1.0, 0.01)]
    coeffs[1, 1], coeffs[1, 2], coeffs[2, 1], coeffs[2, 2] = vals
    m = m.with_coefficients(coeffs)
    d = 2.0
    expected = np.mean([a + b * d + c * d * d for a, b, c in vals])
    assert dc.undistort_depth(m, 6, 6, d) == pytest.approx(expected, abs=1e-14)


def test_undistort_depth_invalid_returns_invalid():
    assert dc.undistort_depth(identity_map(), 3, 3, 0.0) == 0.0


def test_continuity_across_bin_boundary():
    m = identity_map()
    coeffs = np.asarray(np.random.default_rng(3).uniform(0.9, 1.1,
                                                         m.coefficients.shape))
    m = m.with_coefficients(coeffs)
    u, v, d = 8, 5, 2.7
    at_node = dc.undistort_depth(m, u, v, d)
    # from the control column the u-blend collapses onto the column exactly
    fv = (v - 4) / 4.0
    col = m.coefficients[1, 2] + fv * (m.coefficients[2, 2] - m.coefficients[1, 2])
    assert at_node == np.polyval(col[::-1], d)
    # left-stencil hat weights give the same value to machine precision
    blend = (1 - fv) * m.coefficients[1, 1:3] + fv * m.coefficients[2, 1:3]
    left = np.polyval(blend[1][::-1], d)
    assert at_node == pytest.approx(left, rel=1e-13)
    # approaching the column from the left is continuous
    just_left = dc.undistort_depth(m, u - 1e-9, v, d)
    assert at_node == pytest.approx(just_left, abs=1e-7)


def test_apply_identity_map_is_identity_on_cloud():
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    rng = np.random.default_rng(0)
    data = rng.uniform(1.0, 4.0, (24, 32))
    data[0, 0] = 0.0
    cloud = dc.depth_to_cloud(dc.DepthImage(32, 24, data), intr)
    out = dc.apply_undistortion(identity_map(), cloud)
    assert np.array_equal(out.points[out.valid], cloud.points[cloud.valid])
    assert np.array_equal(out.valid, cloud.valid)


def test_apply_uniform_scaling_map():
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    data = np.full((24, 32), 2.0)
    cloud = dc.depth_to_cloud(dc.DepthImage(32, 24, data), intr)
    m = uniform_map(dc.PolyFn((0.0, 1.1, 0.0)))
    out = dc.apply_undistortion(m, cloud)
    assert np.allclose(out.points[out.valid], 1.1 * cloud.points[cloud.valid],
                       atol=1e-12)


def test_apply_line_of_sight_preserved():
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    rng = np.random.default_rng(1)
    data = rng.uniform(1.0, 4.0, (24, 32))
    cloud = dc.depth_to_cloud(dc.DepthImage(32, 24, data), intr)
    coeffs = rng.uniform(0.95, 1.05, identity_map().coefficients.shape)
    coeffs[:, :, 0] *= 0.02
    coeffs[:, :, 2] *= 0.01
    m = identity_map().with_coefficients(coeffs)
    out = dc.apply_undistortion(m, cloud)
    cross = np.cross(out.points.reshape(-1, 3), cloud.points.reshape(-1, 3))
    assert np.max(np.abs(cross)) < 1e-12
    # scale factors are positive
    ratio = out.points[:, :, 2] / cloud.points[:, :, 2]
    assert np.all(ratio > 0)


def test_apply_to_depth_image_matches_pointwise_eval():
    m = identity_map()
    coeffs = np.random.default_rng(2).uniform(0.95, 1.05, m.coefficients.shape)
    m = m.with_coefficients(coeffs)
    data = np.random.default_rng(3).uniform(1.0, 4.0, (24, 32))
    img = dc.DepthImage(32, 24, data)
    out = dc.apply_undistortion(m, img)
    for u, v in [(0, 0), (31, 23), (7, 13), (16, 12)]:
        assert out.data[v, u] == pytest.approx(
            dc.undistort_depth(m, u, v, data[v, u]), abs=1e-14)


def test_apply_round_trip_with_inverse_map():
    # distort an exact plane by inverting the map's own blended field per
    # pixel, then apply the map: the result must be the plane again
    intr = dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)
    rng = np.random.default_rng(4)
    coeffs = identity_map(degree=1).coefficients.copy()
    coeffs[:, :, 1] = rng.uniform(0.97, 1.03, coeffs.shape[:2])
    coeffs[:, :, 0] = rng.uniform(-0.02, 0.02, coeffs.shape[:2])
    m = identity_map(degree=1).with_coefficients(coeffs)

    plane_depth = 2.5
    dense = m.dense_coefficients()
    distorted_depth = (plane_depth - dense[:, :, 0]) / dense[:, :, 1]
    distorted = dc.depth_to_cloud(dc.DepthImage(32, 24, distorted_depth), intr)
    restored = dc.apply_undistortion(m, distorted)

    pts = restored.points.reshape(-1, 3)
    plane = dc.fit_plane(pts)
    rms = np.sqrt(np.mean(plane.signed_distance(pts) ** 2))
    assert rms < 1e-9
    assert np.allclose(restored.points[:, :, 2], plane_depth, atol=1e-12)


def test_apply_dimension_mismatch():
    img = dc.DepthImage(16, 16, np.ones((16, 16)))
    with pytest.raises(MapError):
        dc.apply_undistortion(identity_map(), img)


# ---------------------------------------------------------------------------
# GlobalMap


def gmap_from(rows):
    corners = [dc.PolyFn((0.0, *row), constant_zero=True) for row in rows]
    return dc.GlobalMap(32, 24, *corners)


def test_global_eval_identity():
    g = dc.GlobalMap.identity(32, 24)
    assert dc.global_eval(g, 10, 7, 2.2) == pytest.approx(2.2, abs=1e-15)


def test_global_eval_center_is_mean():
    g = gmap_from([(1.0, 0.0), (1.02, 0.0), (0.98, 0.001)])
    d = 2.0
    corners = [g.corner_00, g.corner_w0, g.corner_0h, g.corner_wh]
    expected = np.mean([dc.poly_eval(c, d) for c in corners])
    assert dc.global_eval(g, 16, 12, d) == pytest.approx(expected, abs=1e-14)


def test_global_eval_affine_ramp():
    # corners chosen so the blended surface is the ramp 1 + u/(10 W) sloped in u
    w, h = 32, 24
    g = dc.GlobalMap(w, h,
                     dc.PolyFn((0.0, 1.0), constant_zero=True),
                     dc.PolyFn((0.0, 1.1), constant_zero=True),
                     dc.PolyFn((0.0, 1.0), constant_zero=True))
    d = 2.0
    for u, v in [(0, 0), (8, 5), (16, 12), (31, 23)]:
        expected = d * (1.0 + 0.1 * u / w)
        assert dc.global_eval(g, u, v, d) == pytest.approx(expected, abs=1e-12)


def test_complete_dependent_corner_examples():
    ident = dc.PolyFn((0.0, 1.0), constant_zero=True)
    gw0 = dc.PolyFn((0.0, 1.01), constant_zero=True)
    g0h = dc.PolyFn((0.0, 0.99), constant_zero=True)
    out = dc.complete_dependent_corner(ident, gw0, g0h)
    assert np.allclose(out.coefficients, (0.0, 1.0))
    same = dc.complete_dependent_corner(ident, ident, ident)
    assert same == ident


def test_complete_dependent_corner_degree_mismatch():
    with pytest.raises(MapError):
        dc.complete_dependent_corner(dc.PolyFn((0.0, 1.0), constant_zero=True),
                                     dc.PolyFn((0.0, 1.0, 0.0), constant_zero=True),
                                     dc.PolyFn((0.0, 1.0), constant_zero=True))


@settings(max_examples=50, deadline=None)
@given(coef=st.lists(st.floats(-0.05, 0.05), min_size=6, max_size=6))
def test_dependent_corner_invariant_at_sampled_depths(coef):
    rows = [(1.0 + coef[0], coef[1]), (1.0 + coef[2], coef[3]),
            (1.0 + coef[4], coef[5])]
    g = gmap_from(rows)
    d = np.linspace(0.5, 5.0, 20)
    lhs = dc.poly_eval(g.corner_00, d) + dc.poly_eval(g.corner_wh, d)
    rhs = dc.poly_eval(g.corner_w0, d) + dc.poly_eval(g.corner_0h, d)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_global_blend_is_affine_across_image():
    # the dependent corner kills the bilinear cross term: for any valid map
    # and any fixed depth, the corrected-depth field over the image is affine
    rng = np.random.default_rng(5)
    for _ in range(10):
        g = gmap_from(rng.uniform(-0.05, 0.05, (3, 2)) + [[1.0, 0.0]] * 3)
        u = np.arange(32, dtype=float)[None, :]
        v = np.arange(24, dtype=float)[:, None]
        field = np.empty((24, 32))
        for vv in range(24):
            for uu in range(32):
                field[vv, uu] = dc.global_eval(g, uu, vv, 3.0)
        # second differences vanish for an affine field
        assert np.max(np.abs(np.diff(field, n=2, axis=0))) < 1e-12
        assert np.max(np.abs(np.diff(field, n=2, axis=1))) < 1e-12
        del u, v


def test_global_corrected_plane_depth_field_stays_planar():
    # a fronto-parallel plane has a constant depth field; after correction the
    # field is affine over (u, v), i.e. still an exact plane as a height field
    rng = np.random.default_rng(6)
    g = gmap_from(rng.uniform(-0.03, 0.03, (3, 2)) + [[1.0, 0.0]] * 3)
    img = dc.DepthImage(32, 24, np.full((24, 32), 2.0))
    out = dc.apply_global(g, img)
    uu, vv = np.meshgrid(np.arange(32.0), np.arange(24.0))
    height_field = np.column_stack([uu.ravel(), vv.ravel(), out.data.ravel()])
    pl = dc.fit_plane(height_field)
    rms = np.sqrt(np.mean(pl.signed_distance(height_field) ** 2))
    assert rms < 1e-9


# ---------------------------------------------------------------------------
# full correction


def small_camera():
    return dc.CameraIntrinsics(fx=40, fy=40, cx=16, cy=12, width=32, height=24)


def test_full_correction_identity_maps():
    intr = small_camera()
    rng = np.random.default_rng(7)
    img = dc.DepthImage(32, 24, rng.uniform(1.0, 4.0, (24, 32)))
    out = dc.apply_full_correction(identity_map(), dc.GlobalMap.identity(32, 24),
                                   img, intr)
    ref = dc.depth_to_cloud(img, intr)
    assert np.array_equal(out.points, ref.points)


def test_full_correction_composition_cancels():
    intr = small_camera()
    img = dc.DepthImage(32, 24, np.full((24, 32), 2.0))
    u_map = uniform_map(dc.PolyFn((0.0, 1.1)))
    g_map = dc.GlobalMap(32, 24, *[dc.PolyFn((0.0, 1 / 1.1), constant_zero=True)] * 3)
    out = dc.apply_full_correction(u_map, g_map, img, intr)
    ref = dc.depth_to_cloud(img, intr)
    assert np.allclose(out.points, ref.points, atol=1e-12)


def test_full_correction_order_is_u_then_g():
    intr = small_camera()
    img = dc.DepthImage(32, 24, np.full((24, 32), 2.0))
    u_map = uniform_map(dc.PolyFn((0.05, 1.0)))
    g_map = dc.GlobalMap(32, 24, *[dc.PolyFn((0.0, 1.0, 0.01), constant_zero=True)] * 3)
    out = dc.apply_full_correction(u_map, g_map, img, intr)
    d_hat = 2.05
    expected = d_hat + 0.01 * d_hat ** 2
    assert np.allclose(out.points[:, :, 2], expected, atol=1e-12)


def test_concurrent_application_on_shared_map():
    # maps are immutable after estimation: many threads may apply the same
    # instance with no synchronization and identical results
    from concurrent.futures import ThreadPoolExecutor

    intr = small_camera()
    rng = np.random.default_rng(11)
    img = dc.DepthImage(32, 24, rng.uniform(1.0, 4.0, (24, 32)))
    cloud = dc.depth_to_cloud(img, intr)
    coeffs = identity_map().coefficients + rng.normal(0, 0.005,
                                                      identity_map().coefficients.shape)
    m = identity_map().with_coefficients(coeffs)
    reference = dc.apply_undistortion(m, cloud)
    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(lambda _: dc.apply_undistortion(m, cloud),
                                range(16)))
    for out in results:
        assert np.array_equal(out.points, reference.points)


def test_noise_model_rejects_nonpositive_sigma():
    with pytest.raises(dc.GeometryError):
        dc.NoiseModel((-0.01, 0.001))


def test_correct_depth_image_invalid_passthrough():
    img_data = np.full((24, 32), 2.0)
    img_data[3, 4] = 0.0
    img = dc.DepthImage(32, 24, img_data)
    out = dc.correct_depth_image(identity_map(), dc.GlobalMap.identity(32, 24), img)
    assert out.data[3, 4] == 0.0
    assert out.valid.sum() == img.valid.sum()
