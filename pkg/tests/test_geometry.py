import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semismd import geometry as geo
from semismd.diffcore import Tensor, finite_diff_check, ops, precision
from semismd.errors import ChartError, ConfigError, DomainError, ShapeError
from semismd.synthrig import default_rig


def random_rotation_vector(rng, angle):
    axis = rng.normal(size=3)
    return angle * axis / np.linalg.norm(axis)


def random_rigid(rng, max_angle=3.0, trans=5.0):
    w = random_rotation_vector(rng, rng.uniform(0, max_angle))
    return geo.se3_exp(np.concatenate([w, rng.uniform(-trans, trans, 3)]))


INTR = geo.Intrinsics(fx=40.0, fy=38.0, cx=23.5, cy=15.5, width=48, height=32)


# -- exp / log ---------------------------------------------------------------

def test_exp_zero_is_identity():
    np.testing.assert_array_equal(geo.se3_exp(np.zeros(6)), np.eye(4))


def test_exp_half_turn_about_x():
    T = geo.se3_exp(np.array([np.pi, 0, 0, 0, 0, 0]))
    np.testing.assert_allclose(T[:3, :3], np.diag([1.0, -1.0, -1.0]), atol=1e-12)


def test_log_identity_is_zero():
    p = geo.se3_log(np.eye(4))
    np.testing.assert_array_equal(p.as_vector(), np.zeros(6))


def test_log_near_half_turn_about_z():
    angle = np.pi - 1e-3
    c, s = np.cos(angle), np.sin(angle)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    np.testing.assert_allclose(geo.se3_log(T).axis_angle, [0, 0, angle], atol=1e-9)


def test_log_at_pi_raises_chart_error():
    with pytest.raises(ChartError):
        geo.se3_log(geo.se3_exp(np.array([0, 0, np.pi, 0, 0, 0])))


@pytest.mark.parametrize("angle", [1e-10, 1e-4, 0.5, 3.0])
def test_exp_log_round_trip_regimes(angle):
    rng = np.random.default_rng(int(angle * 1e4) % 1000)
    for _ in range(50):
        v = np.concatenate([random_rotation_vector(rng, angle), rng.uniform(-3, 3, 3)])
        T = geo.se3_exp(v)
        back = geo.se3_log(T).as_vector()
        assert np.abs(back - v).max() <= 1e-8
        assert np.abs(geo.se3_exp(back) - T).max() <= 1e-9


def test_exp_of_random_pose_is_rigid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert geo.is_rigid(random_rigid(rng))


def test_exp_matches_matrix_exponential_oracle():
    from scipy.linalg import expm
    rng = np.random.default_rng(1)
    for angle in (1e-6, 0.3, 2.5):
        w = random_rotation_vector(rng, angle)
        np.testing.assert_allclose(geo.so3_exp(w), expm(geo.hat(w)), atol=1e-12)


def test_exp_rejects_non_finite():
    with pytest.raises(DomainError):
        geo.se3_exp(np.array([np.nan, 0, 0, 0, 0, 0]))


# -- conjugation -------------------------------------------------------------

def test_per_camera_pose_trivial_cases():
    rng = np.random.default_rng(2)
    E, P = random_rigid(rng), random_rigid(rng)
    np.testing.assert_allclose(geo.per_camera_pose(np.eye(4), E), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(geo.per_camera_pose(P, np.eye(4)), P, atol=1e-15)


def test_per_camera_pose_dense_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        P, E = random_rigid(rng), random_rigid(rng)
        out = geo.per_camera_pose(P, E)
        worst = max(worst, np.abs(out - np.linalg.inv(E) @ P @ E).max())
        geo.check_rigid(out)
    assert worst <= 1e-10


def test_per_camera_pose_group_action():
    rng = np.random.default_rng(4)
    for _ in range(100):
        P1, P2, E = random_rigid(rng), random_rigid(rng), random_rigid(rng)
        lhs = geo.per_camera_pose(P1 @ P2, E)
        rhs = geo.per_camera_pose(P1, E) @ geo.per_camera_pose(P2, E)
        assert np.abs(lhs - rhs).max() <= 1e-9


def test_differentiable_conjugation_matches_numpy():
    rng = np.random.default_rng(5)
    v = np.concatenate([random_rotation_vector(rng, 0.4), rng.normal(size=3)])
    rig = default_rig()
    with precision(64):
        got = geo.per_camera_poses(geo.pose_matrix(Tensor(v)), rig.extrinsics).data
    for n, E in enumerate(rig.extrinsics):
        np.testing.assert_allclose(got[n], geo.per_camera_pose(geo.se3_exp(v), E), atol=1e-12)


@pytest.mark.parametrize("angle", [0.0, 1e-3, 0.7])
def test_pose_matrix_gradient(angle):
    rng = np.random.default_rng(6)
    v0 = np.concatenate([random_rotation_vector(rng, angle) if angle else np.zeros(3),
                         rng.normal(size=3)])
    w = rng.normal(size=(4, 4))
    with precision(64):
        err = finite_diff_check(lambda v: ops.sum(ops.mul(geo.pose_matrix(v), w)),
                                Tensor(v0, dtype=np.float64), step=1e-6)
    assert err <= 1e-6


def test_check_rigid_rejections():
    with pytest.raises(DomainError):
        geo.check_rigid(np.diag([1.0, 1.0, -1.0, 1.0]))
    bad = np.eye(4)
    bad[3, 0] = 1e-3
    with pytest.raises(DomainError):
        geo.check_rigid(bad)
    with pytest.raises(ShapeError):
        geo.check_rigid(np.eye(3))


# -- projection --------------------------------------------------------------

def test_backproject_principal_point():
    d = np.full((32, 48), 0.25)
    intr = geo.Intrinsics(40.0, 40.0, 10.0, 7.0, 48, 32)
    d[7, 10] = 0.5
    pts = geo.backproject(d, intr)
    np.testing.assert_allclose(pts[:, 7, 10], [0, 0, 2])


def test_backproject_constant_depth_is_plane():
    pts = geo.backproject(np.full((32, 48), 1 / 7.5), INTR)
    np.testing.assert_allclose(pts[2], 7.5)


def test_backproject_rejects_nonpositive():
    d = np.ones((32, 48))
    d[3, 3] = 0.0
    with pytest.raises(DomainError):
        geo.backproject(d, INTR)


def test_project_backproject_round_trip():
    rng = np.random.default_rng(7)
    d = rng.uniform(1 / 40, 1.0, size=(32, 48))
    coords, valid = geo.project(geo.backproject(d, INTR), INTR)
    assert valid.all()
    np.testing.assert_allclose(coords, geo.pixel_grid(32, 48), atol=1e-6)


def test_project_optical_axis_and_behind():
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 30.0], [0.3, 0.1, -1.0]]).T
    coords, valid = geo.project(pts, INTR)
    np.testing.assert_allclose(coords[:2], [[INTR.cx, INTR.cy]] * 2)
    np.testing.assert_array_equal(valid, [True, True, False])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 100.0), st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.floats(0.5, 20))
def test_project_homogeneous(lam, xy, z):
    p = np.array([xy[0], xy[1], z])
    a, _ = geo.project(p, INTR)
    b, _ = geo.project(lam * p, INTR)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-9)


# -- intrinsics --------------------------------------------------------------

def test_intrinsics_validation():
    with pytest.raises(DomainError):
        geo.Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(DomainError):
        geo.Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_intrinsics_scaling():
    s = INTR.scaled(2)
    assert (s.fx, s.fy, s.width, s.height) == (10.0, 9.5, 12, 8)
    # half-pixel aware principal point keeps pooled pixels aligned
    assert (s.cx, s.cy) == ((23.5 + 0.5) / 4 - 0.5, (15.5 + 0.5) / 4 - 0.5)


def test_scaled_intrinsics_agree_with_pooled_geometry():
    # a pooled pixel is the mean of 2**k fine pixels; its ray must be the mean ray
    rays0 = geo.pixel_rays(INTR)
    for k in (1, 2, 3):
        f = 2 ** k
        pooled = rays0.reshape(3, 32 // f, f, 48 // f, f).mean(axis=(2, 4))
        np.testing.assert_allclose(geo.pixel_rays(INTR.scaled(k)), pooled, atol=1e-12)


# -- warp_coords -------------------------------------------------------------

def test_warp_identity():
    d = np.random.default_rng(8).uniform(0.05, 1.0, (1, 1, 32, 48))
    coords, valid = geo.warp_coords(d, INTR, INTR, np.eye(4))
    np.testing.assert_allclose(coords.data[0], geo.pixel_grid(32, 48), atol=1e-4)
    assert valid.all()


def test_warp_z_translation_magnifies_about_principal_point():
    depth, dz = 10.0, 2.0
    d = np.full((1, 1, 32, 48), 1 / depth)
    T = np.eye(4)
    T[2, 3] = -dz  # camera moves toward the plane
    with precision(64):
        coords, _ = geo.warp_coords(d, INTR, INTR, T)
    m = depth / (depth - dz)
    g = geo.pixel_grid(32, 48)
    expect = np.stack([(g[..., 0] - INTR.cx) * m + INTR.cx, (g[..., 1] - INTR.cy) * m + INTR.cy], -1)
    np.testing.assert_allclose(coords.data[0], expect, atol=1e-9)


def test_warp_through_plane_is_all_invalid():
    depth = 5.0
    d = np.full((1, 1, 32, 48), 1 / depth)
    T = np.eye(4)
    T[2, 3] = -2 * depth
    _, valid = geo.warp_coords(d, INTR, INTR, T)
    assert not valid.any()


def test_warp_out_of_bounds_is_invalid():
    d = np.full((1, 1, 32, 48), 0.1)
    T = np.eye(4)
    T[0, 3] = 1.0  # shift by fx * 0.1 = 4 px
    coords, valid = geo.warp_coords(d, INTR, INTR, T)
    u = coords.data[0, ..., 0]
    np.testing.assert_array_equal(valid[0], u <= 47 + 1e-6)


def test_warp_coords_depth_and_pose_gradients():
    rng = np.random.default_rng(9)
    small = geo.Intrinsics(8.0, 8.0, 3.5, 2.5, 8, 6)
    d0 = rng.uniform(0.1, 0.5, (1, 1, 6, 8))
    v0 = np.array([0.02, -0.03, 0.01, 0.1, 0.05, -0.2])
    w = rng.normal(size=(1, 6, 8, 2))
    with precision(64):
        e_d = finite_diff_check(
            lambda d: ops.sum(ops.mul(geo.warp_coords(d, small, small, geo.se3_exp(v0))[0], w)),
            Tensor(d0, dtype=np.float64), step=1e-7)
        e_p = finite_diff_check(
            lambda v: ops.sum(ops.mul(geo.warp_coords(d0, small, small,
                                                      geo.pose_matrix(v))[0], w)),
            Tensor(v0, dtype=np.float64), step=1e-7)
    assert e_d <= 1e-5 and e_p <= 1e-5


# -- rig ---------------------------------------------------------------------

def test_rig_round_trip(tmp_path):
    rig = default_rig()
    rig.save(tmp_path / "rig.json")
    back = geo.CameraRig.load(tmp_path / "rig.json")
    assert back.to_dict() == rig.to_dict()
    assert rig.neighbor(len(rig) - 1) == 0


def test_rig_schema_version_mandatory():
    d = default_rig().to_dict()
    del d["schema_version"]
    with pytest.raises(ConfigError):
        geo.CameraRig.from_dict(d)


def test_rig_needs_two_cameras():
    d = default_rig().to_dict()
    d["cameras"] = d["cameras"][:1]
    with pytest.raises(ConfigError):
        geo.CameraRig.from_dict(d)
