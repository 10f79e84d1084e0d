import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import points_in_front, random_pose
from kp3d import gradcheck
from kp3d.errors import DimensionMismatchError, Kp3dError
from kp3d.geometry import CameraIntrinsics, Pose, project, unproject
from kp3d.losses import (SSIM_C1, SSIM_C2, TERMS, LossResult, LossWeights, auto_mask, bilinear_sample,
                         depth_consistency_loss, descriptor_triplet_loss, geometric_loss, keypoint_depth_consistency,
                         keypoint_geometric_loss, photometric_loss, photometric_map, smoothness_loss, ssim,
                         synthesize_view, total_loss, warp_keypoints, score_loss)
from kp3d.synth import SceneConfig, generate_planar_scene, generate_point_scene

K = CameraIntrinsics(400.0, 400.0, 40.0, 30.0)
unit_images = arrays(np.float64, (6, 7), elements=st.floats(0, 1, allow_nan=False))


def ssim_reference(x, y):
    """Direct per-pixel evaluation of the SSIM formula with explicit 3x3 windows."""
    H, W = x.shape
    xp = np.pad(x, 1, mode="edge")
    yp = np.pad(y, 1, mode="edge")
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            a = xp[i:i + 3, j:j + 3].ravel()
            b = yp[i:i + 3, j:j + 3].ravel()
            mx, my = a.mean(), b.mean()
            sx, sy = np.mean((a - mx) ** 2), np.mean((b - my) ** 2)
            sxy = np.mean((a - mx) * (b - my))
            out[i, j] = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (sx + sy + SSIM_C2))
    return out


class TestWarp:
    def test_identity_is_projection(self):
        P = points_in_front(np.random.default_rng(0), 10)
        np.testing.assert_array_equal(warp_keypoints(P, Pose(), K), project(P, K))

    def test_synthetic_oracle(self):
        seq = generate_point_scene(SceneConfig(seed=1), 2)
        pairs = seq.correspondences(0, 1)
        f0, f1 = seq.frames[0].keypoints, seq.frames[1].keypoints
        Kc = seq.config.intrinsics
        P = unproject(f0.positions[:, pairs[:, 0]], f0.depths[pairs[:, 0]], Kc)
        warped = warp_keypoints(P, seq.relative_pose(0, 1), Kc)
        np.testing.assert_allclose(warped, f1.positions[:, pairs[:, 1]], rtol=0, atol=1e-9)

    def test_forward_motion_moves_points_outward(self):
        P = points_in_front(np.random.default_rng(2), 20, 5, 10)
        before = project(P, K) - [[K.cx], [K.cy]]
        after = warp_keypoints(P, Pose(np.eye(3), [0, 0, -1.0]), K) - [[K.cx], [K.cy]]
        assert np.all(np.linalg.norm(after, axis=0) > np.linalg.norm(before, axis=0))
        cos = np.sum(after * before, axis=0) / np.linalg.norm(after, axis=0) / np.linalg.norm(before, axis=0)
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)


class TestGeometric:
    def test_zero(self):
        p = np.random.default_rng(3).uniform(0, 50, (2, 8))
        res = geometric_loss(p, p)
        assert res.value == 0.0
        assert not np.any(res.grad["p_warped"])

    def test_three_four_five(self):
        assert geometric_loss([[3.0], [4.0]], [[0.0], [0.0]]).value == 5.0

    def test_keypoint_form_zero_on_truth(self):
        rng = np.random.default_rng(4)
        P = points_in_front(rng, 10, 3, 8)
        X = random_pose(rng, 0.05, 0.1)
        p_t = project(P, K)
        res = keypoint_geometric_loss(p_t, P[2], warp_keypoints(P, X, K), X, K)
        assert res.value < 1e-12

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_geometric(seed).passed


class TestTriplet:
    @staticmethod
    def triplet(dp, dn):
        f = np.zeros((2, 1))
        return f, np.array([[dp], [0.0]]), np.array([[0.0], [dn]])

    def test_margin_satisfied(self):
        assert descriptor_triplet_loss(*self.triplet(0.1, 0.9), margin=0.2).value == 0.0

    def test_equal_distances(self):
        assert descriptor_triplet_loss(*self.triplet(0.5, 0.5), margin=0.2).value == pytest.approx(0.2, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            descriptor_triplet_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_descriptor(seed).passed


class TestScore:
    def test_equal_errors_equal_scores(self):
        p_c = np.random.default_rng(5).uniform(0, 50, (2, 6))
        offsets = np.array([[3.0, -3, 0, 0, 1.8, 0], [0, 0, 3, -3, 2.4, 3]])
        s = np.linspace(0.1, 0.9, 6)
        assert abs(score_loss(s, s, p_c + offsets, p_c).value) < 1e-15

    def test_centered_deviation_cancels(self):
        p_c = np.zeros((2, 2))
        p_w = np.array([[0.0, 2.0], [0.0, 0.0]])
        assert score_loss([0.5, 0.5], [0.5, 0.5], p_w, p_c).value == 0.0

    def test_can_be_negative(self):
        p_c = np.zeros((2, 2))
        p_w = np.array([[0.0, 2.0], [0.0, 0.0]])
        assert score_loss([0.9, 0.1], [0.9, 0.1], p_w, p_c).value < 0

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_score(seed).passed


class TestBilinear:
    def test_integer_coordinates(self):
        I = np.random.default_rng(6).uniform(size=(5, 6))
        v, u = np.mgrid[0:5, 0:6]
        s = bilinear_sample(I, np.stack([u.ravel(), v.ravel()]))
        np.testing.assert_array_equal(s.values[:, 0], I.ravel())
        assert s.valid.all()

    def test_checkerboard_midpoint(self):
        s = bilinear_sample(np.array([[0.0, 1.0], [1.0, 0.0]]), [[0.5], [0.5]])
        assert s.values[0, 0] == 0.5

    def test_out_of_bounds_invalid(self):
        s = bilinear_sample(np.ones((4, 4)), [[-0.1, 3.0, 3.01, np.nan], [1, 3.0, 1, 1]])
        assert s.valid.tolist() == [False, True, False, False]
        assert s.values[~s.valid].sum() == 0

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_bilinear(seed).passed


class TestSynthesizeView:
    def test_identity_returns_context(self):
        I = np.random.default_rng(7).uniform(size=(12, 16, 3))
        D = np.random.default_rng(8).uniform(1, 5, (12, 16))
        out, valid = synthesize_view(I, D, Pose(), CameraIntrinsics(20, 20, 8, 6))
        assert valid.all()
        np.testing.assert_allclose(out, I, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("motion,tilt", [("lateral", 0.0), ("random", 0.0), ("random", 0.3)])
    def test_planar_oracle(self, motion, tilt):
        seq = generate_planar_scene(SceneConfig(seed=3), 2, texture_seed=3, motion=motion, step=0.3, tilt=tilt)
        I_t, I_c, D_t = seq.frames[0].image, seq.frames[1].image, seq.frames[0].depth
        out, valid = synthesize_view(I_c, D_t, seq.relative_pose(0, 1), seq.config.intrinsics)
        interior = valid.copy()
        interior[:5] = interior[-5:] = False
        interior[:, :5] = interior[:, -5:] = False
        assert interior.mean() > 0.5
        assert np.abs(out[..., 0] - I_t)[interior].max() < 1e-3

    def test_moving_past_scene_is_empty(self):
        D = np.full((6, 8), 3.0)
        out, valid = synthesize_view(np.ones((6, 8)), D, Pose(np.eye(3), [0, 0, -10.0]), CameraIntrinsics(5, 5, 4, 3))
        assert not valid.any()


class TestSSIM:
    def test_self_similarity(self):
        x = np.random.default_rng(9).uniform(size=(8, 9, 3))
        assert np.all(ssim(x, x) == 1.0)

    @settings(max_examples=50, deadline=None)
    @given(unit_images, unit_images)
    def test_symmetry_and_range(self, x, y):
        a, b = ssim(x, y), ssim(y, x)
        assert np.abs(a - b).max() <= 1e-12
        assert np.all(a <= 1 + 1e-12) and np.all(a >= -1 - 1e-12)

    def test_constant_images_hand_value(self):
        expected = (SSIM_C1 * SSIM_C2) / ((1 + SSIM_C1) * SSIM_C2)
        np.testing.assert_allclose(ssim(np.zeros((4, 4)), np.ones((4, 4))), expected, rtol=1e-14)

    def test_against_windowed_reference(self):
        rng = np.random.default_rng(10)
        x, y = rng.uniform(size=(7, 9)), rng.uniform(size=(7, 9))
        np.testing.assert_allclose(ssim(x, y)[..., 0], ssim_reference(x, y), rtol=0, atol=1e-13)

    def test_image_validation(self):
        with pytest.raises(Kp3dError):
            ssim(np.full((3, 3), 1.5), np.ones((3, 3)))
        with pytest.raises(DimensionMismatchError):
            ssim(np.ones((3, 3)), np.ones((3, 4)))


class TestPhotometric:
    def test_zero(self):
        I = np.random.default_rng(11).uniform(size=(6, 6))
        assert photometric_loss(I, I).value == 0.0

    def test_gamma_zero_is_l1(self):
        rng = np.random.default_rng(12)
        a, b = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6))
        assert photometric_loss(a, b, gamma=0.0).value == pytest.approx(np.abs(a - b).mean(), abs=1e-15)

    def test_checkerboard_composition(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
        shifted = np.roll(board, 1, axis=1)
        expected = np.mean(0.85 * (1 - ssim_reference(board, shifted)) / 2 + 0.15 * np.abs(board - shifted))
        assert photometric_loss(board, shifted, 0.85).value == pytest.approx(expected, abs=1e-14)

    def test_mask_reduction(self):
        rng = np.random.default_rng(13)
        a, b = rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5))
        mask = np.zeros((5, 5), bool)
        mask[1:3, 2:4] = True
        assert photometric_loss(a, b, mask=mask).value == pytest.approx(photometric_map(a, b)[mask].mean())
        assert photometric_loss(a, b, mask=np.zeros((5, 5), bool)).value == 0.0

    def test_finite_differences(self):
        for seed in range(2):
            assert gradcheck.check_photometric(seed).passed


class TestAutoMask:
    def test_static_scene_mostly_empty(self):
        rng = np.random.default_rng(14)
        I = rng.uniform(size=(10, 10))
        warped = np.clip(I + 0.05 * rng.normal(size=I.shape), 0, 1)
        assert auto_mask(I, warped, I).mean() < 0.05

    def test_perfect_warp_keeps_changed_pixels(self):
        rng = np.random.default_rng(15)
        I_t = rng.uniform(size=(10, 10))
        I_c = np.clip(I_t + rng.uniform(0.2, 0.3, I_t.shape), 0, 1)
        assert auto_mask(I_t, I_t, I_c).all()

    def test_region_explained_by_context_is_masked(self):
        rng = np.random.default_rng(16)
        I_t = rng.uniform(size=(20, 20))
        I_c = rng.uniform(size=(20, 20))
        I_hat = np.clip(I_t + 0.02 * rng.normal(size=I_t.shape), 0, 1)
        I_c[5:12, 5:12] = I_t[5:12, 5:12]  # object moving with the camera
        I_hat[5:12, 5:12] = rng.uniform(size=(7, 7))
        m = auto_mask(I_t, I_hat, I_c)
        assert not m[6:11, 6:11].any()
        assert m[15:, 15:].all()


class TestSmoothness:
    def test_constant_depth(self):
        res = smoothness_loss(np.full((5, 6), 3.0), np.random.default_rng(17).uniform(size=(5, 6)))
        assert res.value == 0.0

    def test_edge_aware(self):
        D = np.ones((6, 6))
        D[:, 3:] = 2.0
        flat = np.full((6, 6), 0.5)
        edge = flat.copy()
        edge[:, 3:] = 1.0
        assert smoothness_loss(D, edge).value < smoothness_loss(D, flat).value

    def test_scale_invariant(self):
        rng = np.random.default_rng(18)
        D, I = rng.uniform(1, 5, (5, 5)), rng.uniform(size=(5, 5))
        assert smoothness_loss(D, I).value == pytest.approx(smoothness_loss(7.5 * D, I).value, rel=1e-12)

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_smoothness(seed).passed


class TestDepthConsistency:
    def test_equal_depths(self):
        assert depth_consistency_loss([2.0, 5.0], [2.0, 5.0]).value == 0.0

    def test_one_and_three(self):
        assert depth_consistency_loss([1.0], [3.0]).value == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
    def test_scale_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0.5, 50, 10), rng.uniform(0.5, 50, 10)
        assert abs(depth_consistency_loss(c * a, c * b).value - depth_consistency_loss(a, b).value) <= 1e-12

    def test_rejects_non_positive(self):
        with pytest.raises(Kp3dError):
            depth_consistency_loss([1.0, -1.0], [1.0, 1.0])

    def test_dense_form_reads_maps(self):
        D_t = np.full((5, 5), 2.0)
        D_c = np.full((5, 5), 6.0)
        res = keypoint_depth_consistency(D_t, [[1.5, 9.0], [2.0, 1.0]], D_c, [[2.0, 2.0], [2.5, 1.0]])
        assert res.value == 0.5  # second pair falls outside D_t and is ignored
        assert res.grad["d_t"][1] == 0.0

    def test_finite_differences(self):
        for seed in range(3):
            assert gradcheck.check_depth_consistency(seed).passed


class TestTotalLoss:
    def test_all_zero(self):
        terms = {t: LossResult(0.0, {}) for t in TERMS}
        assert total_loss(terms).value == 0.0

    def test_unit_terms_weight_arithmetic(self):
        terms = {t: LossResult(1.0, {}) for t in TERMS}
        res = total_loss(terms, LossWeights())
        assert res.value == pytest.approx(1 + 0.1 + 0.1 + 0.1 * (1 + 1 + 1), abs=1e-15)
        assert res.terms == {t: 1.0 for t in TERMS}

    def test_gradient_is_weighted_sum(self):
        rng = np.random.default_rng(19)
        w = LossWeights(alpha=0.3, beta1=2.0, beta2=0.5, beta3=0.7, beta4=0.2)
        grads = {t: {"x": rng.normal(size=5), "y": rng.normal(size=3)} for t in TERMS}
        terms = {t: LossResult(float(rng.uniform()), grads[t]) for t in TERMS}
        res = total_loss(terms, w)
        coef = w.coefficients()
        expect = sum(coef[t] * grads[t]["x"] for t in TERMS)
        assert np.abs(res.grad["x"] - expect).max() < 1e-10
        assert res.value == pytest.approx(sum(coef[t] * terms[t].value for t in TERMS), abs=1e-12)

    def test_linear_in_each_term(self):
        base = {t: LossResult(0.5, {}) for t in TERMS}
        coef = LossWeights().coefficients()
        for t in TERMS:
            bumped = dict(base, **{t: LossResult(1.5, {})})
            assert total_loss(bumped).value - total_loss(base).value == pytest.approx(coef[t], abs=1e-14)

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            total_loss({"bogus": LossResult(1.0, {})})

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1)
        with pytest.raises(ValueError):
            LossWeights(gamma=1.5)


def test_non_negativity_of_non_score_losses():
    rng = np.random.default_rng(20)
    for _ in range(20):
        a, b = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6))
        assert photometric_loss(a, b).value >= 0
        assert smoothness_loss(rng.uniform(1, 4, (6, 6)), a).value >= 0
        assert depth_consistency_loss(rng.uniform(1, 4, 5), rng.uniform(1, 4, 5)).value >= 0
        assert geometric_loss(rng.normal(size=(2, 5)), rng.normal(size=(2, 5))).value >= 0
        f = rng.normal(size=(4, 5))
        assert descriptor_triplet_loss(f, rng.normal(size=(4, 5)), rng.normal(size=(4, 5))).value >= 0
