import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereocorr.errors import NonPositiveDisparity
from stereocorr.geometry import (
    BoundingBox,
    StereoRig,
    feature_array,
    focal_from_hfov,
    make_feature_tuple,
    radian_conversion,
    triangulate,
    triangulate_corrected,
)


def unit_rig(**kw):
    base = dict(baseline_m=1.0, focal_px=1000.0, cx=640.0, cy=360.0, width=1280.0, height=720.0)
    base.update(kw)
    return StereoRig(**base)


def test_triangulate_substitution():
    assert triangulate(unit_rig(), 600.0, 500.0) == 10.0


def test_triangulate_default_rig_twenty_meters():
    rig = StereoRig.default()
    # oracle: f = 640 / tan(11 deg), disparity for 20 m = B f / 20
    f = 640.0 / math.tan(math.radians(11.0))
    assert rig.focal_px == pytest.approx(3292.5, abs=0.05)
    disparity = 0.406 * f / 20.0
    assert disparity == pytest.approx(66.84, abs=0.01)
    assert triangulate(rig, 700.0 + disparity, 700.0) == pytest.approx(20.0, rel=1e-12)
    assert triangulate(rig, 66.84, 0.0) == pytest.approx(20.0, rel=1e-3)


@pytest.mark.parametrize("xl, xr", [(500.0, 500.0), (400.0, 500.0)])
def test_triangulate_rejects_non_positive_disparity(xl, xr):
    with pytest.raises(NonPositiveDisparity):
        triangulate(unit_rig(), xl, xr)


def test_triangulate_corrected():
    rig = unit_rig()
    assert triangulate_corrected(rig, 600.0, 500.0, 0.0, 0.0) == triangulate(rig, 600.0, 500.0)
    assert triangulate_corrected(rig, 600.0, 500.0, 5.0, -5.0) == pytest.approx(1000.0 / 110.0, rel=1e-15)
    with pytest.raises(NonPositiveDisparity):
        triangulate_corrected(rig, 600.0, 500.0, -60.0, 41.0)


@given(
    st.floats(0.01, 5.0), st.floats(10.0, 5000.0),
    st.floats(-2000.0, 2000.0), st.floats(1e-3, 1000.0),
)
def test_triangulate_inverse_identity(b, f, xr, disp):
    rig = unit_rig(baseline_m=b, focal_px=f)
    xl = xr + disp
    if not xl - xr > 0:
        return
    d = triangulate(rig, xl, xr)
    assert d * (xl - xr) == pytest.approx(b * f, rel=1e-12)


@given(st.floats(1e-3, 500.0), st.floats(1e-3, 500.0))
def test_triangulate_strictly_decreasing(d1, d2):
    rig = unit_rig()
    if d1 == d2:
        return
    lo, hi = sorted((d1, d2))
    assert triangulate(rig, hi, 0.0) < triangulate(rig, lo, 0.0)


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_zero_offset_is_bit_identical(xl, xr):
    rig = unit_rig()
    if not xl - xr > 0:
        return
    assert triangulate_corrected(rig, xl, xr, 0.0, 0.0) == triangulate(rig, xl, xr)


def test_radian_conversion_examples():
    rig = unit_rig()
    p = radian_conversion(rig, 640.0, 360.0)
    assert (p.theta, p.r) == (0.0, 0.0)
    p = radian_conversion(rig, 740.0, 360.0)
    assert (p.theta, p.r) == (0.0, 100.0)
    p = radian_conversion(rig, 640.0, 460.0)
    assert p.theta == pytest.approx(math.pi / 2, abs=1e-15)
    assert p.r == 100.0


def test_radian_conversion_theta_range():
    rig = unit_rig()
    p = radian_conversion(rig, 540.0, 360.0)
    assert p.theta == math.pi
    p = radian_conversion(rig, 540.0, 359.999)
    assert -math.pi < p.theta < 0


@given(st.floats(0.0, 1280.0), st.floats(0.0, 720.0))
def test_radian_conversion_round_trip(x, y):
    rig = unit_rig()
    p = radian_conversion(rig, x, y)
    assert p.r >= 0
    assert -math.pi < p.theta <= math.pi
    assert abs(rig.cx + p.r * math.cos(p.theta) - x) < 1e-9
    assert abs(rig.cy + p.r * math.sin(p.theta) - y) < 1e-9


def test_feature_tuple_at_center():
    t = make_feature_tuple(unit_rig(), BoundingBox(640.0, 360.0, 128.0, 72.0))
    assert (t.theta, t.r_norm, t.w_norm, t.h_norm) == (0.0, 0.0, 0.1, 0.1)


def test_feature_tuple_off_center():
    t = make_feature_tuple(unit_rig(), BoundingBox(740.0, 360.0, 64.0, 36.0))
    half_diag = math.sqrt(640.0**2 + 360.0**2)  # 734.30...
    assert half_diag == pytest.approx(734.3024, abs=1e-4)
    assert t.theta == 0.0
    assert t.r_norm == pytest.approx(100.0 / half_diag, rel=1e-15)
    assert (t.w_norm, t.h_norm) == (0.05, 0.05)


def test_in_bounds_box_has_r_norm_below_one():
    rig = unit_rig()
    box = BoundingBox(1275.0, 715.0, 10.0, 10.0)
    assert box.fully_inside(rig)
    assert make_feature_tuple(rig, box).r_norm < 1.0
    assert not BoundingBox(640.0 + rig.half_diagonal, 360.0, 10.0, 10.0).inside(rig)


@settings(max_examples=200)
@given(
    st.floats(0.05, 20.0),
    st.floats(10.0, 1270.0), st.floats(10.0, 710.0),
    st.floats(1.0, 200.0), st.floats(1.0, 200.0),
)
def test_feature_tuple_scale_invariant(k, x, y, w, h):
    rig = unit_rig()
    box = BoundingBox(x, y, w, h)
    scaled_rig = StereoRig(1.0, 1000.0, rig.cx * k, rig.cy * k, rig.width * k, rig.height * k)
    a = make_feature_tuple(rig, box).as_array()
    b = make_feature_tuple(scaled_rig, BoundingBox(x * k, y * k, w * k, h * k)).as_array()
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_feature_array_matches_scalar():
    rig = unit_rig()
    rng = np.random.default_rng(3)
    xs, ys = rng.uniform(0, 1280, 50), rng.uniform(0, 720, 50)
    ws, hs = rng.uniform(1, 100, 50), rng.uniform(1, 100, 50)
    batch = feature_array(rig, xs, ys, ws, hs)
    for i in range(50):
        t = make_feature_tuple(rig, BoundingBox(xs[i], ys[i], ws[i], hs[i]))
        np.testing.assert_allclose(batch[i], t.as_array(), rtol=1e-14, atol=1e-15)


def test_focal_from_hfov():
    # scripted oracle: 640 / tan(11 deg)
    assert focal_from_hfov(1280.0, math.radians(22.0)) == pytest.approx(3292.5146, abs=1e-4)
    assert focal_from_hfov(2.0, math.pi / 2) == pytest.approx(1.0, rel=1e-15)
    for bad in (0.0, math.pi, -0.1):
        with pytest.raises(ValueError):
            focal_from_hfov(1280.0, bad)


@pytest.mark.parametrize("kw", [
    dict(baseline_m=0.0), dict(focal_px=-1.0), dict(cx=0.0), dict(cy=720.0),
])
def test_rig_invariants(kw):
    with pytest.raises(ValueError):
        unit_rig(**kw)
