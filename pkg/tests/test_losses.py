import math

import numpy as np
import pytest

from sfm_losskit import losses, warp
from sfm_losskit.errors import (
    DegenerateMaskError,
    DimensionError,
    EmptyContextError,
    NoSupervisionError,
)
from sfm_losskit.geometry import CameraIntrinsics, PoseSE3, warp_coords
from sfm_losskit.losses import (
    LossBreakdown,
    LossWeights,
    automask,
    baseline_berhu,
    baseline_l1,
    min_photometric,
    photometric,
    reprojected_distance,
    smoothness,
    ssim,
    total_loss,
    total_loss_grad,
)
from sfm_losskit.synth import SceneSpec, make_scene


def brute_force_ssim(a, b, mask=None, c1=losses.SSIM_C1, c2=losses.SSIM_C2, radius=1):
    """Independent SSIM oracle: naive per-pixel loops over the window,
    statistics over the valid pixels inside the (clipped) box."""
    h, w, channels = a.shape
    if mask is None:
        mask = np.ones((h, w), bool)
    out = np.zeros((h, w))
    for c in range(channels):
        for i in range(h):
            for j in range(w):
                xs, ys = [], []
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w and mask[ii, jj]:
                            xs.append(a[ii, jj, c])
                            ys.append(b[ii, jj, c])
                xs, ys = np.array(xs), np.array(ys)
                mx, my = xs.mean(), ys.mean()
                vx = (xs * xs).mean() - mx * mx
                vy = (ys * ys).mean() - my * my
                cov = (xs * ys).mean() - mx * my
                out[i, j] += ((2 * mx * my + c1) * (2 * cov + c2)) / (
                    (mx * mx + my * my + c1) * (vx + vy + c2)
                )
    return out / channels


def checkerboard(h, w):
    img = ((np.arange(h)[:, None] + np.arange(w)[None, :]) % 2).astype(float)
    return img[..., None]


class TestSsim:
    def test_identical_images_score_one(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (8, 9, 3))
        assert np.abs(ssim(img, img) - 1.0).max() < 1e-12

    def test_constant_images_score_one(self):
        a = np.full((6, 6, 1), 0.5)
        assert np.abs(ssim(a, a.copy()) - 1.0).max() < 1e-12

    def test_inverted_checkerboard_is_negative_inside(self):
        img = checkerboard(8, 8)
        s = ssim(img, 1.0 - img)
        assert (s[1:-1, 1:-1] < 0).all()

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (7, 8, 1))
        b = rng.uniform(0, 1, (7, 8, 1))
        assert np.abs(ssim(a, b) - brute_force_ssim(a, b)).max() < 1e-12

    def test_masked_windows_match_brute_force(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (7, 8, 1))
        b = rng.uniform(0, 1, (7, 8, 1))
        mask = rng.uniform(size=(7, 8)) > 0.3
        ours = ssim(a, b, mask=mask)
        oracle = brute_force_ssim(a, b, mask=mask)
        assert np.abs((ours - oracle)[mask]).max() < 1e-12

    def test_values_bounded(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (10, 10, 3))
        b = rng.uniform(0, 1, (10, 10, 3))
        s = ssim(a, b)
        assert (np.abs(s) <= 1.0 + 1e-12).all()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)))


class TestPhotometric:
    def test_perfect_reconstruction_is_zero(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (6, 7, 3))
        mask = np.ones((6, 7), bool)
        loss = photometric(img, img.copy(), mask, 0.85)
        assert np.abs(loss).max() < 1e-12

    def test_pure_l1_constant_images(self):
        a = np.full((5, 5, 1), 0.2)
        b = np.full((5, 5, 1), 0.7)
        loss = photometric(a, b, np.ones((5, 5), bool), alpha=0.0)
        assert loss == pytest.approx(0.5)

    def test_matches_independent_two_term_evaluation(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (6, 8, 3))
        b = rng.uniform(0, 1, (6, 8, 3))
        mask = np.ones((6, 8), bool)
        alpha = 0.85
        loss = photometric(a, b, mask, alpha)
        expected = np.zeros((6, 8))
        for c in range(3):
            s = ssim(a[..., c : c + 1], b[..., c : c + 1])
            expected += alpha * np.clip((1 - s) / 2, 0, 1)
            expected += (1 - alpha) * np.abs(a[..., c] - b[..., c])
        expected /= 3
        assert np.abs(loss - expected).max() < 1e-12

    def test_invalid_pixels_carry_inf(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, (5, 5, 1))
        mask = np.ones((5, 5), bool)
        mask[1, 2] = False
        loss = photometric(a, a.copy(), mask, 0.85)
        assert np.isinf(loss[1, 2])
        assert np.isfinite(loss[mask]).all()

    def test_upper_bound(self):
        a = np.zeros((6, 6, 1))
        b = np.ones((6, 6, 1))
        for alpha in (0.0, 0.5, 0.85, 1.0):
            loss = photometric(a, b, np.ones((6, 6), bool), alpha)
            assert (loss <= alpha + (1 - alpha) + 1e-12).all()


SMALL_K = CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=15.5, width=48, height=32)


def small_scene(geometry="plane", **kw):
    kw.setdefault("width", 48)
    kw.setdefault("height", 40)
    kw.setdefault("d0", 8.0)
    kw.setdefault("baseline", 0.4)
    kw.setdefault("seed", 3)
    kw.setdefault("beams", 8)
    kw.setdefault("px_per_beam", 6)
    return make_scene(SceneSpec(geometry=geometry, **kw))


class TestMinPhotometric:
    def test_singleton_context_equals_plain_photometric(self):
        scene = small_scene()
        src, pose = scene.contexts[0]
        m, argmin = min_photometric(
            scene.target, [(src, pose)], scene.gt_depth, scene.intrinsics, 0.85
        )
        coords, valid = warp_coords(scene.gt_depth, pose, scene.intrinsics)
        synth, mask = warp.sample_bilinear(src, coords, valid)
        direct = photometric(scene.target, synth, mask, 0.85)
        finite = np.isfinite(direct)
        assert np.abs((m - direct)[finite]).max() < 1e-15
        assert (argmin[finite] == 0).all()
        assert (argmin[~finite] == -1).all()

    def test_duplicated_source_is_idempotent(self):
        scene = small_scene()
        src, pose = scene.contexts[0]
        m1, _ = min_photometric(
            scene.target, [(src, pose)], scene.gt_depth, scene.intrinsics, 0.85
        )
        m2, _ = min_photometric(
            scene.target, [(src, pose), (src, pose)], scene.gt_depth, scene.intrinsics, 0.85
        )
        both = np.isfinite(m1)
        assert np.abs((m1 - m2)[both]).max() == 0.0

    def test_min_below_each_source(self):
        scene = small_scene()
        m, _ = min_photometric(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, 0.85
        )
        for src, pose in scene.contexts:
            coords, valid = warp_coords(scene.gt_depth, pose, scene.intrinsics)
            synth, mask = warp.sample_bilinear(src, coords, valid)
            single = photometric(scene.target, synth, mask, 0.85)
            assert (m <= single + 1e-15).all()

    def test_occluded_region_uses_clean_source(self):
        # d1=4 vs d0=10 at baseline 0.8 gives a ~6 px occlusion band
        scene = small_scene(
            geometry="two_plane", d0=10.0, d1=4.0, strip_min=-2.0,
            strip_max=-0.2, baseline=0.8, width=64, height=48,
        )
        per_source = []
        for src, pose in scene.contexts:
            coords, valid = warp_coords(scene.gt_depth, pose, scene.intrinsics)
            synth, mask = warp.sample_bilinear(src, coords, valid)
            per_source.append(photometric(scene.target, synth, mask, 0.85))
        m, argmin = min_photometric(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, 0.85
        )
        band = scene.occluded[0] & ~scene.occluded[1]
        # erode the analytic band: boundary pixels blend occluder and
        # background under bilinear sampling
        for shift in (-2, -1, 1, 2):
            band &= np.roll(scene.occluded[0], shift, axis=1)
        assert band.sum() > 10
        chosen = argmin[band]
        # inside source-0's occlusion band the min must come from source 1
        assert (chosen == 1).mean() > 0.95
        assert per_source[1][band].mean() < per_source[0][band].mean()

    def test_empty_context_rejected(self):
        scene = small_scene()
        with pytest.raises(EmptyContextError):
            min_photometric(scene.target, [], scene.gt_depth, scene.intrinsics, 0.85)


class TestAutomask:
    def test_static_scene_masks_everything_out(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (8, 10, 1))
        context = [(img.copy(), PoseSE3.identity())]
        ones = np.ones((8, 10), bool)
        warped = [photometric(img, img.copy(), ones, 0.85)]
        unwarped = [photometric(img, img.copy(), ones, 0.85)]
        mask = automask(img, context, warped, unwarped)
        assert not mask.any()

    def test_texture_free_images_mask_false(self):
        img = np.full((6, 6, 1), 0.4)
        context = [(img.copy(), PoseSE3.identity())]
        ones = np.ones((6, 6), bool)
        loss = photometric(img, img.copy(), ones, 0.85)
        assert not automask(img, context, [loss], [loss]).any()

    def test_parallax_scene_keeps_textured_pixels(self):
        scene = small_scene(width=64, height=48)
        warped = []
        unwarped = []
        ones = np.ones(scene.target.shape[:2], bool)
        for src, pose in scene.contexts:
            coords, valid = warp_coords(scene.gt_depth, pose, scene.intrinsics)
            synth, mask = warp.sample_bilinear(src, coords, valid)
            warped.append(photometric(scene.target, synth, mask, 0.85))
            unwarped.append(photometric(scene.target, src, ones, 0.85))
        mask = automask(scene.target, scene.contexts, warped, unwarped)
        assert mask.mean() > 0.9


class TestSmoothness:
    def test_constant_depth_is_zero(self):
        img = np.full((8, 8, 1), 0.3)
        assert smoothness(np.full((8, 8), 5.0), img) == 0.0

    def test_linear_ramp_closed_form(self):
        h, w = 10, 12
        depth = 5.0 + 0.25 * np.tile(np.arange(w, dtype=float), (h, 1))
        img = np.full((h, w, 1), 0.5)  # constant image: edge weights are 1
        disp = 1.0 / depth
        dhat = disp / disp.mean()
        expected = np.abs(np.diff(dhat, axis=1))[: h - 1, :].mean()
        assert smoothness(depth, img) == pytest.approx(expected, rel=1e-12)

    def test_image_edge_suppresses_depth_step(self):
        h, w = 8, 12
        depth = np.full((h, w), 5.0)
        depth[:, w // 2 :] = 7.0
        flat = np.full((h, w, 1), 0.5)
        edged = flat.copy()
        g = 0.4
        edged[:, w // 2 :, 0] += g  # hard image edge collocated with the step
        loss_flat = smoothness(depth, flat)
        loss_edged = smoothness(depth, edged)
        assert loss_edged == pytest.approx(loss_flat * math.exp(-g), rel=1e-12)

    def test_scale_invariance_of_normalized_disparity(self):
        rng = np.random.default_rng(8)
        depth = rng.uniform(3, 12, (9, 9))
        img = rng.uniform(0, 1, (9, 9, 1))
        a = smoothness(depth, img)
        b = smoothness(3.7 * depth, img)
        assert a == pytest.approx(b, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            smoothness(np.ones((4, 4)), np.zeros((5, 4, 1)))


class TestReprojectedDistance:
    def test_pred_equals_gt_is_zero(self):
        scene = small_scene()
        _, pose = scene.contexts[0]
        out = reprojected_distance(
            scene.gt_depth, scene.labels.depth, pose, scene.intrinsics
        )
        assert out.value == 0.0
        assert out.count == scene.labels.n_labels

    def test_single_pixel_hand_computed(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
        gt = np.zeros((4, 4))
        gt[0, 0] = 2.0
        pred = np.full((4, 4), 4.0)
        pose = PoseSE3(translation=(1.0, 0.0, 0.0))
        out = reprojected_distance(pred, gt, pose, k)
        # pi(T*(4,0,0,1)-ray) = 1/4 + 0 = 0.25 ; pi with d=2 -> 0.5
        assert out.value == pytest.approx(0.25, abs=1e-15)
        assert out.count == 1

    def test_identity_pose_is_zero_for_any_prediction(self):
        scene = small_scene()
        pred = scene.gt_depth * 3.1
        out = reprojected_distance(
            pred, scene.labels.depth, PoseSE3.identity(), scene.intrinsics
        )
        assert out.value == pytest.approx(0.0, abs=1e-12)

    def test_depth_weighting_decreases_with_distance(self):
        # same relative error at growing depth reprojects ever smaller
        k = CameraIntrinsics(fx=50.0, fy=50.0, cx=1.5, cy=1.5, width=4, height=4)
        pose = PoseSE3(translation=(0.8, 0.0, 0.0))
        values = []
        for d in (2.0, 4.0, 8.0, 16.0):
            gt = np.zeros((4, 4))
            gt[1, 1] = d
            pred = np.zeros((4, 4))
            pred[1, 1] = 1.2 * d
            values.append(reprojected_distance(pred, gt, pose, k).value)
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_no_labels_raises(self):
        scene = small_scene()
        with pytest.raises(NoSupervisionError):
            reprojected_distance(
                scene.gt_depth, np.zeros_like(scene.gt_depth),
                scene.contexts[0][1], scene.intrinsics,
            )

    def test_behind_camera_labels_dropped(self):
        k = CameraIntrinsics(fx=10.0, fy=10.0, cx=1.5, cy=1.5, width=4, height=4)
        gt = np.zeros((4, 4))
        gt[0, 0] = 1.0
        gt[1, 1] = 5.0
        pred = np.where(gt > 0, gt * 1.1, 0.0)
        pose = PoseSE3(translation=(0.0, 0.0, -2.0))  # pulls near labels behind
        out = reprojected_distance(pred, gt, pose, k)
        assert out.count == 1
        assert out.dropped == 1


class TestBaselines:
    def test_zero_error(self):
        gt = np.array([[1.0, 2.0], [0.0, 3.0]])
        assert baseline_l1(gt, gt) == 0.0
        assert baseline_berhu(gt, gt) == 0.0

    def test_l1_single_error(self):
        gt = np.array([[2.0, 0.0]])
        pred = np.array([[7.0, 0.5]])
        assert baseline_l1(pred, gt) == pytest.approx(5.0)

    def test_berhu_hand_computed_branches(self):
        gt = np.array([[1.0, 1.0]])
        pred = np.array([[2.0, 4.0]])  # errors 1 and 3, c = 2
        expected = (1.0 + (9 + 4) / 4.0) / 2.0
        assert baseline_berhu(pred, gt, c=2.0) == pytest.approx(expected)

    def test_berhu_default_threshold(self):
        gt = np.array([[1.0, 1.0]])
        pred = np.array([[2.0, 6.0]])  # errors 1, 5 -> c = 1
        c = 0.2 * 5.0
        expected = ((1.0**2 + c * c) / (2 * c) + (25 + c * c) / (2 * c)) / 2.0
        assert baseline_berhu(pred, gt) == pytest.approx(expected)

    def test_empty_overlap(self):
        with pytest.raises(NoSupervisionError):
            baseline_l1(np.zeros((2, 2)), np.zeros((2, 2)))


def scaled_contexts(contexts, s):
    return [
        (img, PoseSE3(rotation=p.rotation, translation=tuple(s * np.asarray(p.translation))))
        for img, p in contexts
    ]


class TestTotalLoss:
    def test_breakdown_invariant(self):
        scene = small_scene()
        w = LossWeights(alpha=0.85, lambda_smooth=1e-3, lambda_rep=1e4)
        bd = total_loss(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
            labels=scene.labels.depth,
        )
        recomposed = bd.photo + w.lambda_smooth * bd.smooth + w.lambda_rep * bd.rep
        assert bd.total == pytest.approx(recomposed, abs=1e-12)
        assert bd.photo >= 0 and bd.smooth >= 0 and bd.rep >= 0
        assert bd.masked_pixel_count > 0

    def test_paper_configuration_defaults(self):
        w = LossWeights()
        assert (w.alpha, w.lambda_smooth, w.lambda_rep) == (0.85, 1e-3, 1e4)

    def test_ground_truth_photo_near_zero(self):
        scene = small_scene(texture_cycles=0.02)
        w = LossWeights(lambda_smooth=0.0, lambda_rep=0.0)
        bd = total_loss(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
            labels=scene.labels.depth,
        )
        assert bd.photo < 1e-3

    @pytest.mark.parametrize("s", [0.5, 2.0, 10.0])
    def test_scale_ambiguity_invariance(self, s):
        scene = small_scene(geometry="slant", slant=15.0)
        rng = np.random.default_rng(9)
        depth = scene.gt_depth * np.exp(rng.normal(0, 0.08, scene.gt_depth.shape))
        w = LossWeights(alpha=0.85, lambda_smooth=1e-3, lambda_rep=0.0)
        a = total_loss(scene.target, scene.contexts, depth, scene.intrinsics, w)
        b = total_loss(
            scene.target, scaled_contexts(scene.contexts, s), s * depth,
            scene.intrinsics, w,
        )
        assert b.total == pytest.approx(a.total, rel=1e-9)

    @pytest.mark.parametrize("s", [0.5, 2.0])
    def test_scale_breaking_with_supervision(self, s):
        scene = small_scene()
        w = LossWeights(alpha=0.85, lambda_smooth=1e-3, lambda_rep=1e4)
        base = total_loss(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
            labels=scene.labels.depth,
        )
        scaled = total_loss(
            scene.target, scaled_contexts(scene.contexts, s), s * scene.gt_depth,
            scene.intrinsics, w, labels=scene.labels.depth,
        )
        assert scaled.total > base.total

    def test_static_scene_raises_degenerate_mask(self):
        rng = np.random.default_rng(10)
        img = rng.uniform(0, 1, (16, 16, 1))
        k = CameraIntrinsics(fx=16, fy=16, cx=7.5, cy=7.5, width=16, height=16)
        depth = np.full((16, 16), 4.0)
        with pytest.raises(DegenerateMaskError):
            total_loss(
                img, [(img.copy(), PoseSE3.identity())], depth, k,
                LossWeights(lambda_rep=0.0),
            )

    def test_missing_labels_with_positive_weight_raises(self):
        scene = small_scene()
        w = LossWeights(lambda_rep=1.0)
        with pytest.raises(NoSupervisionError):
            total_loss(
                scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
                labels=np.zeros_like(scene.gt_depth),
            )

    def test_supervised_l1_and_berhu_variants(self):
        scene = small_scene()
        w = LossWeights(lambda_rep=1.0)
        pred = scene.gt_depth * 1.3
        for mode, oracle in (("l1", baseline_l1), ("berhu", baseline_berhu)):
            bd = total_loss(
                scene.target, scene.contexts, pred, scene.intrinsics, w,
                labels=scene.labels.depth, supervised=mode,
            )
            assert bd.rep == pytest.approx(oracle(pred, scene.labels.depth), rel=1e-12)


class TestTotalLossGrad:
    def test_gradient_zero_cases(self):
        scene = small_scene()
        w = LossWeights(alpha=0.85, lambda_smooth=0.0, lambda_rep=1.0)
        _, d_depth, d_poses = total_loss_grad(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
            labels=scene.labels.depth, photo_weight=0.0,
        )
        # at pred == gt the reprojected term sits at the subgradient-zero minimum
        assert np.abs(d_depth).max() == 0.0
        assert np.abs(d_poses).max() == 0.0

    def test_constant_images_zero_photo_gradient(self):
        # constant images would be fully removed by the static-pixel mask, so
        # force the mask open via the cache override: the flat photometric
        # landscape must still give exactly zero depth/pose gradients
        k = CameraIntrinsics(fx=16, fy=16, cx=7.5, cy=7.5, width=16, height=16)
        img = np.full((16, 16, 1), 0.5)
        ctx_img = np.full((16, 16, 1), 0.6)
        depth = np.full((16, 16), 4.0)
        pose = PoseSE3(translation=(0.2, 0.0, 0.0))
        w = LossWeights(alpha=0.0, lambda_smooth=0.0, lambda_rep=0.0)
        _, d_depth, d_poses = total_loss_grad(
            img, [(ctx_img, pose)], depth, k, w,
            unwarped_min=np.full((16, 16), 0.5),
        )
        assert np.abs(d_depth).max() == 0.0
        assert np.abs(d_poses).max() == 0.0

    def test_matches_finite_differences_on_random_scene(self):
        from sfm_losskit.optimize import gradcheck

        scene = small_scene(geometry="slant", slant=10.0)
        w = LossWeights(alpha=0.85, lambda_smooth=1e-3, lambda_rep=1.0)
        report = gradcheck(scene, w, n_samples=688, h=1e-5, tol=1e-4, seed=0)
        assert report.passed, report.failures[:5]

    def test_pyramid_gradients_match_finite_differences(self):
        from sfm_losskit.optimize import gradcheck

        scene = small_scene(width=48, height=40)
        w = LossWeights(alpha=0.85, lambda_smooth=1e-2, lambda_rep=1.0)
        report = gradcheck(
            scene, w, n_samples=688, h=1e-5, tol=1e-4, seed=1, num_scales=4
        )
        assert report.passed, report.failures[:5]

    def test_pyramid_forward_reduces_to_single_scale_at_level_zero(self):
        scene = small_scene(width=48, height=40)
        w = LossWeights(alpha=0.85, lambda_smooth=1e-3, lambda_rep=0.0)
        one = total_loss(scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w)
        four = total_loss(
            scene.target, scene.contexts, scene.gt_depth, scene.intrinsics, w,
            num_scales=4,
        )
        # constant-depth pyramid levels reproduce the same depth, so photo agrees
        assert four.photo == pytest.approx(one.photo, rel=1e-9)
