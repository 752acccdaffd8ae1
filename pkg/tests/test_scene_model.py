import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_scene, random_table, ring
from splatdiff.errors import NoCovisibleRegionError, ValidationError
from splatdiff.scene_model import (
    GaussianScene,
    activate,
    activate_table,
    covisibility_filter,
    frustum_visible,
)
from splatdiff.splat_io import CameraRecord, RawSplatRecord
from splatdiff.synth import look_at_camera


def rec(q=(1.0, 0, 0, 0), log_scales=(0.0, 0.0, 0.0), sh=(0.0, 0.0, 0.0), logit=0.0):
    return RawSplatRecord(np.zeros(3), np.array(q, float), np.array(log_scales, float), logit, np.array(sh, float))


def test_identity_quaternion_covariance_and_normal():
    p = activate(rec(log_scales=(0.0, np.log(2), np.log(3))))
    np.testing.assert_allclose(p.Sigma, np.diag([1.0, 4.0, 9.0]), atol=1e-12)
    np.testing.assert_array_equal(p.normal, [1.0, 0.0, 0.0])


def test_zero_dc_is_mid_grey():
    np.testing.assert_array_equal(activate(rec()).color_dc, [0.5, 0.5, 0.5])


def test_opacity_is_sigmoid():
    assert activate(rec(logit=0.0)).opacity == 0.5
    assert 0.0 <= activate(rec(logit=-800.0)).opacity <= activate(rec(logit=800.0)).opacity <= 1.0


def test_zero_quaternion_rejected():
    with pytest.raises(ValidationError):
        activate(rec(q=(0.0, 0.0, 0.0, 0.0)))


def test_isotropic_tie_picks_third_column():
    p = activate(rec(log_scales=(0.1, 0.1, 0.1)))
    np.testing.assert_array_equal(p.normal, p.R[:, 2])


def test_unnormalised_quaternion_is_normalised():
    a = activate(rec(q=(2.0, 0.0, 0.0, 0.0)))
    np.testing.assert_allclose(a.R, np.eye(3), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
       st.lists(st.floats(-4, 1), min_size=3, max_size=3))
def test_random_primitive_invariants(q, ls):
    p = activate(rec(q=q, log_scales=ls))
    S = np.exp(ls)
    # eigenvalues are S^2 as a multiset
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(p.Sigma)), np.sort(S**2), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(p.Sigma, p.R @ np.diag(S**2) @ p.R.T, atol=1e-9)
    assert abs(np.linalg.norm(p.normal) - 1.0) < 1e-9
    np.testing.assert_allclose(p.Sigma, p.Sigma.T, atol=0)
    assert np.linalg.eigvalsh(p.Sigma).min() >= -1e-12
    # normal is perpendicular to the two larger principal axes
    order = np.argsort(S)
    for k in order[1:]:
        if S[k] > S[order[0]] * (1 + 1e-9):
            assert abs(p.normal @ p.R[:, k]) < 1e-6


def test_batch_activation_matches_single(rng):
    t = random_table(50, rng)
    scene = activate_table(t)
    for i in (0, 17, 49):
        p = activate(t[i])
        np.testing.assert_allclose(scene.cov[i], p.Sigma, atol=1e-15)
        np.testing.assert_array_equal(scene.normal[i], p.normal)
        np.testing.assert_array_equal(scene.color[i], p.color_dc)


# --- frustum ---------------------------------------------------------------

CAM = CameraRecord(1, 100, 80, 100.0, 100.0, 50.0, 40.0)


def test_point_on_axis_visible():
    assert frustum_visible(np.array([0.0, 0.0, 1.0]), CAM)


def test_point_behind_camera_not_visible():
    assert not frustum_visible(np.array([0.0, 0.0, -1.0]), CAM)


def test_point_right_of_image_not_visible():
    x = (CAM.width + 5 - CAM.cx) / CAM.fx  # depth 1
    assert not frustum_visible(np.array([x, 0.0, 1.0]), CAM)


def test_image_bounds_half_open():
    # u = 0 is inside, u = width is outside
    assert frustum_visible(np.array([-CAM.cx / CAM.fx, 0.0, 1.0]), CAM)
    assert not frustum_visible(np.array([(CAM.width - CAM.cx) / CAM.fx, 0.0, 1.0]), CAM)


def test_depth_bounds():
    assert not frustum_visible(np.array([0.0, 0.0, 0.005]), CAM)
    assert not frustum_visible(np.array([0.0, 0.0, 2000.0]), CAM)
    assert frustum_visible(np.array([0.0, 0.0, 2000.0]), CAM, z_far=5000.0)


# --- co-visibility ---------------------------------------------------------


def _scene_at(points, cams):
    n = len(points)
    return GaussianScene(mu=np.asarray(points, float), R=np.tile(np.eye(3), (n, 1, 1)), scales=np.ones((n, 3)) * 0.01,
                         cov=np.tile(np.eye(3) * 1e-4, (n, 1, 1)), opacity=np.ones(n) * 0.5,
                         color=np.ones((n, 3)) * 0.5, normal=np.tile([0, 0, 1.0], (n, 1)), cameras=cams)


def test_covisibility_keeps_shared_and_drops_one_rig_only():
    rig1 = [look_at_camera(1, [0, -5, 0], [0, 0, 0], 64, 64, 60.0)]
    rig2 = [look_at_camera(2, [-5, 0, 0], [0, 0, 0], 64, 64, 60.0)]
    # origin is seen by both; (0, -3, 0) lies on rig 1's axis but 3 units off rig 2's at depth 5
    pts = [[0, 0, 0], [0.0, -3.0, 0.0]]
    s1 = _scene_at(pts, rig1)
    s2 = _scene_at(pts, rig2)
    assert frustum_visible(np.array(pts[1]), rig1[0]) and not frustum_visible(np.array(pts[1]), rig2[0])
    a, b = covisibility_filter(s1, s2)
    np.testing.assert_array_equal(a.source_index, [0])
    np.testing.assert_array_equal(b.source_index, [0])


def test_disjoint_rigs_fatal():
    rig1 = [look_at_camera(1, [0, 0, 5], [0, 0, 10], 32, 32, 30.0)]
    rig2 = [look_at_camera(2, [0, 0, -5], [0, 0, -10], 32, 32, 30.0)]
    s1 = _scene_at([[0, 0, 10.0]], rig1)
    s2 = _scene_at([[0, 0, -10.0]], rig2)
    with pytest.raises(NoCovisibleRegionError):
        covisibility_filter(s1, s2)


def test_covisibility_idempotent():
    s1 = random_scene(300, 0, ring(6, 4.0), spread=2.5)
    s2 = random_scene(300, 1, ring(5, 3.0, phase=0.4, first_id=50), spread=2.5)
    a, b = covisibility_filter(s1, s2)
    assert 0 < len(a) < len(s1)
    a2, b2 = covisibility_filter(a, b)
    np.testing.assert_array_equal(a2.source_index, a.source_index)
    np.testing.assert_array_equal(b2.source_index, b.source_index)


def test_derived_slot_length_checked():
    s = random_scene(10)
    s.set_derived("x", np.zeros(10))
    with pytest.raises(ValidationError):
        s.set_derived("y", np.zeros(9))


def test_subset_keeps_derived_and_index():
    s = random_scene(10)
    s.set_derived("x", np.arange(10.0))
    sub = s.subset(np.arange(10) % 2 == 0)
    np.testing.assert_array_equal(sub.derived["x"], [0, 2, 4, 6, 8])
    np.testing.assert_array_equal(sub.source_index, [0, 2, 4, 6, 8])
