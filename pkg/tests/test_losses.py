import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import (canonical_perturbations, gt_inverse_depth, gt_reprojection_loss, gt_warps,
                     metrics_oracle, sparse_oracle)
from semismd import geometry as geo
from semismd import losses as L
from semismd import synthrig as S
from semismd.diffcore import GradientTape, Tensor, finite_diff_check, ops, precision
from semismd.errors import DegenerateBatch, NumericalError, ShapeError


def ramp(h=12, w=14):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ys, xs


# -- sparse depth ------------------------------------------------------------------

def test_sparse_zero_at_target(rng):
    inv = rng.uniform(0.05, 1, (2, 1, 8, 12))
    valid = rng.random((2, 8, 12)) < 0.3
    assert L.sparse_depth_loss([inv], inv[:, 0], valid, 40.0).item() == 0.0


def test_sparse_single_sample():
    pred = np.full((1, 1, 4, 4), 0.5)
    values = np.zeros((1, 4, 4))
    values[0, 2, 1] = 0.2
    valid = values > 0
    with precision(64):
        assert L.sparse_depth_loss([pred], values, valid, 40.0).item() == pytest.approx(0.3 / 40)


def test_sparse_matches_loop_oracle(rng):
    values = rng.uniform(1 / 40, 1, (3, 16, 24))
    valid = rng.random((3, 16, 24)) < 0.1
    full = rng.uniform(1 / 40, 1, (3, 1, 16, 24))
    with precision(64):
        pred = [p.data for p in L.pyramid(full, 3)]
        got = L.sparse_depth_loss(pred, values, valid, 40.0).item()
    assert abs(got - sparse_oracle(pred, values, valid, 40.0)) <= 1e-6


def test_sparse_empty_is_degenerate():
    with pytest.raises(DegenerateBatch):
        L.sparse_depth_loss([np.ones((1, 1, 4, 4))], np.zeros((1, 4, 4)), np.zeros((1, 4, 4), bool), 40.0)


# -- curvature ------------------------------------------------------------------------

def test_grad_op_examples():
    ys, xs = ramp()
    assert np.all(L.grad_op(np.full((5, 5), 3.0), 1) == 0)
    np.testing.assert_array_equal(L.grad_op(xs, 1), -1.0)
    np.testing.assert_array_equal(L.grad_op(ys, 2), -2.0)
    assert L.grad_op(xs, 2).shape == (10, 12)


def test_curvature_examples():
    ys, xs = ramp()
    np.testing.assert_allclose(L.curvature(0.3 * xs - 1.2 * ys + 4, 2), 0.0, atol=1e-12)
    np.testing.assert_array_equal(L.curvature(xs ** 2, 1), 2.0)
    np.testing.assert_array_equal(L.curvature(xs ** 2, 2), 8.0)
    D = np.random.default_rng(0).normal(size=(9, 9))
    np.testing.assert_array_equal(L.curvature(D, 2), L.grad_op(L.grad_op(D, 2), 2))


def test_curvature_step_too_large():
    with pytest.raises(ShapeError):
        L.grad_op(np.ones((3, 3)), 3)
    with pytest.raises(ShapeError):
        L.curvature(np.ones((5, 8)), 3)


def test_curvature_tensor_and_numpy_agree(rng):
    D = rng.normal(size=(1, 1, 10, 12))
    with precision(64):
        np.testing.assert_array_equal(L.curvature(Tensor(D), 2).data, L.curvature(D, 2))


dyadic = st.integers(-512, 512).map(lambda i: i / 1024.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 1, 16, 24), elements=st.integers(20, 1024).map(lambda i: i / 1024.0)),
       dyadic, dyadic.map(lambda v: v / 16), dyadic.map(lambda v: v / 16))
def test_curvature_loss_affine_invariance(D, a, b, c):
    # dyadic values keep every sum exact, so the identity holds bit for bit
    ys, xs = ramp(16, 24)
    with precision(64):
        assert L.curvature_loss([D], D + a + b * xs + c * ys, steps=3).item() == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 1, 16, 24), elements=st.floats(0.02, 1.0)),
       st.floats(-1, 1), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_curvature_loss_affine_invariance_float(D, a, b, c):
    ys, xs = ramp(16, 24)
    with precision(64):
        assert L.curvature_loss([D], D + a + b * xs + c * ys, steps=3).item() <= 1e-14


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(-4, 4)), st.sampled_from([0.5, 2.0, -4.0, 0.25]),
       st.integers(1, 3))
def test_curvature_homogeneity(D, alpha, t):
    # powers of two keep the products exact in floating point
    np.testing.assert_array_equal(L.curvature(alpha * D, t), alpha * L.curvature(D, t))


def test_curvature_loss_examples(rng):
    wm = rng.uniform(0.05, 1, (2, 1, 16, 24))
    with precision(64):
        assert L.curvature_loss([wm], wm).item() == 0.0
        assert L.curvature_loss([wm + 0.3], wm).item() == pytest.approx(0.0, abs=1e-14)
        zero = np.zeros_like(wm)
        assert L.curvature_loss([2 * wm], wm).item() == pytest.approx(L.curvature_loss([wm], zero).item())


def test_curvature_loss_world_model_gets_no_gradient(rng):
    wm = Tensor(rng.uniform(0.05, 1, (1, 1, 16, 24)), requires_grad=True)
    pred = Tensor(rng.uniform(0.05, 1, (1, 1, 16, 24)), requires_grad=True)
    with GradientTape() as tape:
        loss = L.curvature_loss(L.pyramid(pred, 3), wm)
    tape.backward(loss)
    assert wm.grad is None and pred.grad is not None


def test_curvature_loss_skips_small_levels():
    with precision(64):
        small = L.curvature_loss([np.ones((1, 1, 4, 6))], np.ones((1, 1, 4, 6)) * 2, steps=3)
    assert small.item() == 0.0


# -- SSIM -------------------------------------------------------------------------------

def test_ssim_identity(rng):
    a = rng.uniform(0, 1, (1, 3, 8, 8))
    with precision(64):
        np.testing.assert_allclose(L.ssim(a, a).data, 1.0, atol=1e-12)


def test_ssim_constant_black_white():
    a, b = np.zeros((1, 1, 5, 5)), np.ones((1, 1, 5, 5))
    with precision(64):
        s = L.ssim(a, b).data
    expect = L.SSIM_C1 / (1 + L.SSIM_C1)
    np.testing.assert_allclose(s, expect, rtol=1e-12)
    assert np.all(s < 1e-3)


def test_ssim_symmetric(rng):
    a, b = rng.uniform(0, 1, (2, 3, 7, 9)), rng.uniform(0, 1, (2, 3, 7, 9))
    with precision(64):
        np.testing.assert_array_equal(L.ssim(a, b).data, L.ssim(b, a).data)


def test_ssim_range_and_shape_check(rng):
    a, b = rng.uniform(0, 1, (1, 3, 7, 9)), rng.uniform(0, 1, (1, 3, 7, 9))
    s = L.ssim(a, b).data
    assert s.min() >= -1 and s.max() <= 1
    with pytest.raises(ShapeError):
        L.ssim(a, b[..., :-1])


# -- reprojection -----------------------------------------------------------------------

def test_reproject_identity_pose(rng, rig):
    img = rng.uniform(0, 1, (4, 3, 32, 48))
    inv = rng.uniform(0.05, 0.5, (4, 1, 32, 48))
    eye = np.broadcast_to(np.eye(4), (4, 4, 4))
    with precision(64):
        w, valid = L.reproject(img, inv, rig.intrinsics(0), rig.intrinsics(0), eye)
    np.testing.assert_allclose(w.data, img, atol=1e-9)
    assert valid.all()


def test_reproject_coarse_level_identity_matches_upsampled_source(rng, rig):
    img = rng.uniform(0, 1, (4, 3, 32, 48))
    inv = np.full((4, 1, 16, 24), 0.1)
    eye = np.broadcast_to(np.eye(4), (4, 4, 4))
    with precision(64):
        img1 = ops.resample(img, 16, 24, "average")
        w, valid = L.reproject(img1, inv, rig.intrinsics(1), rig.intrinsics(0), eye)
        up = ops.resample(img1, 32, 48, "bilinear").data
    # interior pixels agree with the bilinear upsample of the pooled source
    np.testing.assert_allclose(w.data[..., 1:-1, 1:-1], up[..., 1:-1, 1:-1], atol=1e-9)


def test_reproject_zero_mask_empties_validity(rng, rig):
    img = rng.uniform(0, 1, (4, 3, 32, 48))
    inv = np.full((4, 1, 32, 48), 0.1)
    eye = np.broadcast_to(np.eye(4), (4, 4, 4))
    _, valid = L.reproject(img, inv, rig.intrinsics(0), rig.intrinsics(0), eye,
                           mask_tgt=np.zeros((4, 32, 48)))
    assert not valid.any()
    warps = [L.Warp(0, Tensor(img), valid)]
    with pytest.raises(DegenerateBatch):
        L.reprojection_loss(warps, img)


def test_reprojection_identical_frames_is_zero(rng, rig):
    img = rng.uniform(0, 1, (4, 3, 32, 48))
    inv = np.full((4, 1, 32, 48), 0.1)
    eye = np.broadcast_to(np.eye(4), (4, 4, 4))
    with precision(64):
        warps = L.warp_pyramid(img, [inv], rig, eye)
        assert L.reprojection_loss(warps, img).item() <= 1e-9


def test_reprojection_loss_aggregation(rng):
    warped = rng.uniform(0, 1, (2, 3, 8, 8))
    tgt = rng.uniform(0, 1, (2, 3, 8, 8))
    valid = rng.random((2, 8, 8)) < 0.5
    with precision(64):
        err = L.photometric_error(warped, tgt, 0.2).data
        got = L.reprojection_loss([L.Warp(0, Tensor(warped), valid)] * 2, tgt, 0.2).item()
    expect = 2 * np.mean([err[n][valid[n]].mean() for n in range(2)])
    assert got == pytest.approx(expect, rel=1e-12)


def test_mask_monotonicity(rng):
    """Shrinking the mask leaves the per-pixel error of the remaining pixels unchanged."""
    warped = rng.uniform(0, 1, (1, 3, 8, 8))
    tgt = rng.uniform(0, 1, (1, 3, 8, 8))
    big = np.ones((1, 8, 8), bool)
    small = big.copy()
    small[0, :3] = False
    with precision(64):
        err = L.photometric_error(warped, tgt).data[0]
        a = L.reprojection_loss([L.Warp(0, Tensor(warped), small)], tgt).item()
    assert a == pytest.approx(err[small[0]].mean(), rel=1e-12)


def test_photometric_l1_weight_extremes(rng):
    a, b = rng.uniform(0, 1, (1, 3, 6, 6)), rng.uniform(0, 1, (1, 3, 6, 6))
    with precision(64):
        l1 = L.photometric_error(a, b, 1.0).data
        ds = L.photometric_error(a, b, 0.0).data
        ssim = L.ssim(a, b).data
    np.testing.assert_allclose(l1, np.abs(a - b).mean(axis=1))
    np.testing.assert_allclose(ds, ((1 - ssim) / 2).mean(axis=1))


def ground_only_frameset(seed, rig):
    sc = S.generate_scene(seed)
    sc.primitives = sc.primitives[:1]
    V = S.sample_motion(np.random.default_rng(seed))
    frames = [S.render(sc, rig, np.eye(4)), S.render(sc, rig, V)]
    images = np.stack([[S.quantize(r.image) for r in f] for f in frames])
    depth = np.stack([[r.depth for r in f] for f in frames])
    return images, depth, V


@pytest.mark.parametrize("seed", range(5))
def test_perfect_depth_and_pose_on_occlusion_free_scene(seed, rig):
    images, depth, V = ground_only_frameset(seed, rig)
    masks = np.isfinite(depth)
    inv = np.where(masks[1], 1 / np.clip(depth[1], 1, 40), 1 / 40)[:, None]
    with precision(64):
        Pn = geo.per_camera_poses(V, rig.extrinsics)
        warps = L.warp_pyramid(images[0], [inv], rig, Pn, masks[1], masks[0])
        assert L.reprojection_loss(warps, images[1]).item() <= 0.005


def test_rotation_perturbation_increases_loss(frameset):
    with precision(64):
        base = gt_reprojection_loss(frameset)
        T = frameset.gt_pose.copy()
        T[:3, :3] = geo.so3_exp(np.array([0.0, 0.0, np.radians(5)])) @ T[:3, :3]
        assert gt_reprojection_loss(frameset, pose=T) > base


def test_gt_optimality_first_seeds(framesets):
    with precision(64):
        for fs in framesets[:2]:
            base = gt_reprojection_loss(fs)
            for label, inv, pose in canonical_perturbations(fs):
                assert gt_reprojection_loss(fs, inv, pose) > base, (fs.seed, label)


def test_warp_source_modes_agree_at_level_zero(frameset):
    with precision(64):
        a = gt_warps(frameset, levels=1, source="pyramid")[0]
        b = gt_warps(frameset, levels=1, source="full")[0]
    np.testing.assert_array_equal(a.warped.data, b.warped.data)
    np.testing.assert_array_equal(a.valid, b.valid)
    with pytest.raises(ValueError):
        gt_warps(frameset, levels=1, source="sideways")


def test_reprojection_gradient_depth(rig):
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (4, 3, 16, 24))
    tgt = rng.uniform(0, 1, (4, 3, 16, 24))
    small = S.default_rig(16, 24)
    v = np.array([0.01, -0.02, 0.015, 0.3, 0.0, 0.05])
    with precision(64):
        Pn = geo.per_camera_poses(geo.se3_exp(v), small.extrinsics)
        d0 = Tensor(rng.uniform(0.05, 0.3, (4, 1, 8, 12)), dtype=np.float64)
        idx = rng.choice(d0.size, 20, replace=False)
        err = finite_diff_check(
            lambda d: L.reprojection_loss(L.warp_pyramid(img, [d], small, Pn), tgt), d0,
            step=1e-5, indices=idx)
    assert err <= 1e-4


# -- semantic -----------------------------------------------------------------------------

def test_semantic_zero_when_aligned(rng):
    img = rng.uniform(0, 1, (2, 3, 8, 8))
    valid = np.ones((2, 8, 8), bool)
    with precision(64):
        out = L.semantic_loss([L.Warp(0, Tensor(img), valid)], img, lambda x: ops.scale(x, 2.0))
    assert out.item() == 0.0


def test_semantic_identity_extractor_is_masked_l1(rng):
    a, b = rng.uniform(0, 1, (2, 3, 8, 8)), rng.uniform(0, 1, (2, 3, 8, 8))
    valid = rng.random((2, 8, 8)) < 0.6
    with precision(64):
        got = L.semantic_loss([L.Warp(0, Tensor(a), valid)], b, lambda x: x).item()
    assert got == pytest.approx(np.mean(np.abs(b - a) * valid[:, None]), rel=1e-12)


def test_semantic_matches_loop_oracle(rng):
    from semismd.model import SemanticExtractor
    ext = SemanticExtractor()
    a, b = rng.uniform(0, 1, (2, 3, 16, 24)), rng.uniform(0, 1, (2, 3, 16, 24))
    valid = rng.random((2, 16, 24)) < 0.7
    with precision(64):
        ext.astype(np.float64)
        got = L.semantic_loss([L.Warp(0, Tensor(a), valid)] * 2, b, ext).item()
        acc = 0.0
        for _ in range(2):
            fa = ext(Tensor(a * valid[:, None])).data
            fb = ext(Tensor(b * valid[:, None])).data
            s, cnt = 0.0, 0
            for v in np.nditer(np.abs(fb - fa)):
                s += float(v)
                cnt += 1
            acc += s / cnt
    assert abs(got - acc) <= 1e-6


def test_semantic_extractor_stays_frozen(rng):
    from semismd.model import SemanticExtractor
    ext = SemanticExtractor()
    warped = Tensor(rng.uniform(0, 1, (1, 3, 16, 24)), requires_grad=True)
    with GradientTape() as tape:
        loss = L.semantic_loss([L.Warp(0, warped, np.ones((1, 16, 24), bool))],
                               rng.uniform(0, 1, (1, 3, 16, 24)), ext)
    tape.backward(loss)
    assert warped.grad is not None
    assert all(t.grad is None and not t.requires_grad for _, t in ext.named_tensors())


# -- total ----------------------------------------------------------------------------------

def test_total_loss_substitution():
    total, bd = L.total_loss(2.0, 4.0, 8.0, 16.0)
    assert total.item() == pytest.approx(14.0)
    assert bd.recombine() == pytest.approx(bd.l_total, rel=1e-6)
    assert bd.factors == {"l_d": 1.0, "l_curv": 0.5, "l_rep": 0.25, "l_seg": 0.125}


def test_total_loss_zero_depth_loss():
    total, _ = L.total_loss(0.0, 4.0, 8.0, 16.0)
    assert total.item() == 0.0


def test_total_loss_names_non_finite_part():
    with pytest.raises(NumericalError, match="l_rep"):
        L.total_loss(1.0, 1.0, float("nan"), 1.0)


def test_total_loss_without_depth_uses_plain_weights():
    total, bd = L.total_loss(None, 4.0, 8.0, None)
    assert total.item() == pytest.approx(0.5 * 4 + 3 * 8)
    assert bd.l_d is None and bd.recombine() == pytest.approx(bd.l_total)


def test_total_loss_frozen_factor_gradient(rng):
    """Gradient equals λ1∇L_d + Σ λ_i (|L_d|/|L_x|) ∇L_x with the factors held fixed."""
    x0 = rng.normal(size=5)
    A, B = rng.normal(size=5), rng.normal(size=5)

    def parts(x):
        return (ops.sum(ops.abs(x)), ops.sum(ops.square(ops.mul(x, A))),
                ops.sum(ops.exp(ops.mul(x, B))), ops.sum(ops.square(x)))

    with precision(64):
        x = Tensor(x0, requires_grad=True, dtype=np.float64)
        with GradientTape() as tape:
            total, bd = L.total_loss(*parts(x))
        tape.backward(total)
        frozen = bd.factors
        err = finite_diff_check(lambda v: L.total_loss(*parts(v), factors=frozen)[0],
                                Tensor(x0, dtype=np.float64))
        # and against the closed form
        lam = dict(zip(("l_d", "l_curv", "l_rep", "l_seg"), L.DEFAULT_WEIGHTS))
        expect = np.zeros(5)
        grads = []
        for i in range(4):
            xi = Tensor(x0, requires_grad=True, dtype=np.float64)
            with GradientTape() as t2:
                p = parts(xi)[i]
            t2.backward(p)
            grads.append(xi.grad)
        for name, g in zip(lam, grads):
            expect += lam[name] * frozen[name] * g
    assert err <= 1e-6
    np.testing.assert_allclose(x.grad, expect, rtol=1e-10)


# -- metrics ------------------------------------------------------------------------------------

def test_metrics_perfect():
    gt = np.random.default_rng(0).uniform(1, 40, (8, 8))
    m = L.metrics(gt, gt, 1, 40)
    assert m["abs_rel"] == 0 and m["a1"] == m["a2"] == m["a3"] == 1


def test_metrics_uniform_scale():
    gt = np.random.default_rng(1).uniform(2, 20, (8, 8))
    m = L.metrics(1.3 * gt, gt, 1, 40)
    assert m["abs_rel"] == pytest.approx(0.3)
    assert m["a1"] == 0 and m["a2"] == 1


def test_metrics_match_loop_oracle(rng):
    gt = rng.uniform(0.5, 50, (3, 10, 12))
    gt[rng.random(gt.shape) < 0.1] = np.inf
    pred = gt * rng.uniform(0.6, 1.5, gt.shape)
    pred[~np.isfinite(pred)] = 5.0
    got = L.metrics(pred, gt, 1.0, 40.0)
    ref = metrics_oracle(pred, gt, 1.0, 40.0)
    for k in L.METRIC_NAMES:
        assert abs(got[k] - ref[k]) <= 1e-6, k


def test_metrics_no_valid_pixels():
    with pytest.raises(ValueError):
        L.metrics(np.ones((2, 2)), np.full((2, 2), np.inf), 1, 40)


def test_metrics_threshold_is_strict():
    gt = np.full((1, 1), 4.0)
    assert L.metrics(np.full((1, 1), 5.0), gt, 1, 40)["a1"] == 0.0


def test_gt_inverse_depth_helper(frameset):
    inv = gt_inverse_depth(frameset)
    assert inv.shape == (4, 1, 32, 48) and (inv > 0).all()


def test_curvature_loss_median_alignment(rng):
    wm = rng.uniform(0.05, 1, (2, 1, 16, 24))
    with precision(64):
        scaled = 3.0 * wm + 0.25
        assert L.curvature_loss([scaled], wm).item() > 0.01
        assert L.curvature_loss([scaled], wm, align=True).item() < \
            L.curvature_loss([scaled], wm).item()
        assert L.curvature_loss([3.0 * wm], wm, align=True).item() <= 1e-12
