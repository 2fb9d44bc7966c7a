"""Projection and compositing tests against naive reference renderers."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from wheatsplat.errors import FormatError, InputError
from wheatsplat.rasterizer import (ALPHA_CLAMP, ALPHA_SKIP, LOWPASS, T_STOP,
                                   ContributionLedger,
                                   accumulate_contributions, eval_sh,
                                   flatten_contributions, project_gaussians,
                                   quaternions_to_matrices, rasterize,
                                   render_label_mask, render_rgb, splat_rect)
from wheatsplat.scene_io import GaussianScene, View
from helpers import (naive_composite_pixels, naive_composite_splats, one_view,
                     random_scene)


def axis_view(width: int = 33, height: int = 33, f: float = 40.0,
              cam_z: float = 1.5) -> View:
    """Camera on the +z axis looking straight down at the origin."""
    w2c = np.eye(4)
    w2c[:3, :3] = np.diag([1.0, -1.0, -1.0])
    w2c[:3, 3] = [0.0, 0.0, cam_z]
    return View(id="down", width=width, height=height, fx=f, fy=f,
                cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                world_to_camera=w2c)


def point_scene(positions, opacity_logit, scale=0.01, sh=None) -> GaussianScene:
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = len(positions)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    if sh is None:
        sh = np.zeros((n, 3, 1))
    return GaussianScene(
        positions=positions,
        scale_log=np.full((n, 3), np.log(scale)),
        rotation=quat,
        opacity_logit=np.broadcast_to(
            np.asarray(opacity_logit, dtype=np.float64), (n,)).copy(),
        sh_coeffs=np.asarray(sh, dtype=np.float64),
        instance_id=np.zeros(n, dtype=np.int64),
    )


class TestQuaternions:
    def test_identity(self):
        mats = quaternions_to_matrices(np.array([[1.0, 0.0, 0.0, 0.0]]))
        assert np.allclose(mats[0], np.eye(3), atol=1e-12)

    def test_quarter_turn_about_z(self):
        s = np.sqrt(0.5)
        mats = quaternions_to_matrices(np.array([[s, 0.0, 0.0, s]]))
        expect = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        assert np.allclose(mats[0], expect, atol=1e-12)

    def test_matches_scipy_on_random_batch(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(50, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        ours = quaternions_to_matrices(q)
        theirs = Rotation.from_quat(np.roll(q, -1, axis=1)).as_matrix()
        assert np.allclose(ours, theirs, atol=1e-12)


class TestSplatRect:
    def test_half_open_and_clipped(self):
        mean = np.array([[5.4, 7.2], [-10.0, 2.0]])
        radius = np.array([3, 4])
        rects = splat_rect(mean, radius, 16, 12)
        assert rects[0].tolist() == [2, 9, 4, 11]
        # Fully off-image support clips to an empty range.
        assert rects[1][0] == 0 and rects[1][1] <= 0


class TestProjection:
    def test_on_axis_splat_lands_at_principal_point(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], 0.0)
        splats = project_gaussians(scene, view)
        assert len(splats) == 1
        assert np.allclose(splats.mean2d[0], [view.cx, view.cy], atol=1e-9)
        assert np.isclose(splats.depth[0], 1.5)

    def test_behind_camera_is_culled(self):
        view = axis_view(cam_z=1.5)
        scene = point_scene([[0.0, 0.0, 0.0], [0.0, 0.0, 3.0]], 0.0)
        splats = project_gaussians(scene, view)
        assert splats.gaussian_index.tolist() == [0]

    def test_far_off_image_is_culled(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]], 0.0)
        splats = project_gaussians(scene, view)
        assert splats.gaussian_index.tolist() == [0]

    def test_nonpositive_near_rejected(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], 0.0)
        with pytest.raises(InputError):
            project_gaussians(scene, view, near=0.0)

    def test_depth_sorted_output(self):
        rng = np.random.default_rng(7)
        scene = random_scene(200, rng)
        splats = project_gaussians(scene, one_view()[0])
        assert len(splats) > 100
        assert np.all(np.diff(splats.depth) >= 0)

    def test_isotropic_cov_matches_pinhole_scaling(self):
        # On-axis isotropic Gaussian: projected covariance before the
        # low-pass filter approaches (f * sigma / depth)^2 * I.
        f, sigma, d = 40.0, 0.01, 1.5
        view = axis_view(f=f, cam_z=d)
        scene = point_scene([[0.0, 0.0, 0.0]], 0.0, scale=sigma)
        splats = project_gaussians(scene, view)
        ca, cb, cc = splats.conic[0]
        det = ca * cc - cb * cb
        cov = np.array([[cc, -cb], [-cb, ca]]) / det
        cov -= LOWPASS * np.eye(2)
        expect = (f * sigma / d) ** 2
        assert np.allclose(cov, expect * np.eye(2), rtol=0.01, atol=0.01 * expect)

    def test_radius_from_largest_eigenvalue(self):
        f, sigma, d = 40.0, 0.01, 1.5
        view = axis_view(f=f, cam_z=d)
        scene = point_scene([[0.0, 0.0, 0.0]], 0.0, scale=sigma)
        splats = project_gaussians(scene, view)
        lam = (f * sigma / d) ** 2 + LOWPASS
        assert splats.radius[0] == max(1, int(np.ceil(3.0 * np.sqrt(lam))))

    def test_opacity_activation_is_sigmoid(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], np.log(9.0))
        splats = project_gaussians(scene, view)
        assert np.isclose(splats.opacity[0], 0.9, rtol=1e-12)


class TestCompositing:
    def test_matches_per_pixel_oracle(self):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            scene = random_scene(70, rng, sh_coeffs=1)
            view = one_view(image_size=24)[0]
            splats = project_gaussians(scene, view)
            x = rng.normal(size=(len(scene), 2))
            out = rasterize(splats, x, view)
            ref = naive_composite_pixels(splats, x[splats.gaussian_index],
                                         view.width, view.height)
            assert np.allclose(out.weight_image, ref, atol=1e-5)

    def test_matches_splat_sequential_oracle(self):
        rng = np.random.default_rng(4)
        scene = random_scene(400, rng)
        view = one_view(image_size=48)[0]
        splats = project_gaussians(scene, view)
        x = rng.normal(size=len(scene))
        out = rasterize(splats, x, view)
        ref = naive_composite_splats(splats, x[splats.gaussian_index, None],
                                     view.width, view.height)
        assert np.allclose(out.weight_image, ref[:, :, 0], atol=1e-9)

    def test_single_splat_peak_equals_alpha(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], np.log(9.0))
        out = rasterize(project_gaussians(scene, view), np.ones(1), view)
        cy, cx = int(view.cy), int(view.cx)
        assert np.isclose(out.weight_image[cy, cx], 0.9, rtol=1e-12)
        assert out.weight_image.max() <= 0.9 + 1e-12

    def test_two_coincident_splats_blend_front_to_back(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 0.0)
        splats = project_gaussians(scene, view)
        cy, cx = int(view.cy), int(view.cx)
        ones = rasterize(splats, np.ones(2), view)
        assert np.isclose(ones.weight_image[cy, cx], 0.75, rtol=1e-12)
        front = rasterize(splats, np.array([1.0, 0.0]), view)
        assert np.isclose(front.weight_image[cy, cx], 0.5, rtol=1e-12)
        back = rasterize(splats, np.array([0.0, 1.0]), view)
        assert np.isclose(back.weight_image[cy, cx], 0.25, rtol=1e-12)

    def test_equal_depth_breaks_ties_by_scene_index(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 0.0)
        splats = project_gaussians(scene, view)
        order = np.lexsort((splats.gaussian_index, splats.depth))
        assert splats.gaussian_index[order].tolist() == [0, 1]

    def test_linearity(self):
        rng = np.random.default_rng(9)
        scene = random_scene(120, rng)
        view = one_view(image_size=32)[0]
        splats = project_gaussians(scene, view)
        x = rng.normal(size=len(scene))
        y = rng.normal(size=len(scene))
        combo = rasterize(splats, 2.5 * x - 1.25 * y, view).weight_image
        parts = (2.5 * rasterize(splats, x, view).weight_image
                 - 1.25 * rasterize(splats, y, view).weight_image)
        assert np.allclose(combo, parts, atol=1e-5)

    def test_unit_property_reproduces_alpha_image_exactly(self):
        rng = np.random.default_rng(12)
        scene = random_scene(150, rng)
        view = one_view(image_size=32)[0]
        out = rasterize(project_gaussians(scene, view), np.ones(len(scene)), view)
        assert np.array_equal(out.weight_image, out.alpha_image)

    def test_alpha_image_stays_in_unit_range(self):
        rng = np.random.default_rng(13)
        scene = random_scene(500, rng)
        scene.opacity_logit[:] = 8.0  # nearly opaque everywhere
        view = one_view(image_size=32)[0]
        out = rasterize(project_gaussians(scene, view), np.ones(len(scene)), view)
        assert out.alpha_image.min() >= 0.0
        assert out.alpha_image.max() < 1.0

    def test_alpha_clamp(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], 30.0)
        out = rasterize(project_gaussians(scene, view), np.ones(1), view)
        assert np.isclose(out.weight_image[int(view.cy), int(view.cx)],
                          ALPHA_CLAMP, rtol=1e-12)

    def test_faint_splats_are_skipped(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], -7.0)  # sigmoid(-7) < 1/255
        assert 1.0 / (1.0 + np.exp(7.0)) < ALPHA_SKIP
        out = rasterize(project_gaussians(scene, view), np.ones(1), view)
        assert np.all(out.weight_image == 0.0)

    def test_saturated_transmittance_stops_compositing(self):
        view = axis_view()
        # Four stacked near-opaque splats: T after three is 1e-6 < T_STOP,
        # so the fourth must contribute nothing anywhere.
        pos = [[0.0, 0.0, -0.01 * i] for i in range(4)]
        scene = point_scene(pos, 30.0)
        splats = project_gaussians(scene, view)
        third = rasterize(splats, np.eye(4)[2], view).weight_image
        fourth = rasterize(splats, np.eye(4)[3], view).weight_image
        cy, cx = int(view.cy), int(view.cx)
        assert third[cy, cx] > 0.0
        assert fourth[cy, cx] == 0.0

    def test_empty_projection_renders_zeros(self):
        view = axis_view(cam_z=1.5)
        scene = point_scene([[0.0, 0.0, 5.0]], 0.0)  # behind the camera
        splats = project_gaussians(scene, view)
        assert len(splats) == 0
        out = rasterize(splats, np.ones(1), view)
        assert out.weight_image.shape == (view.height, view.width)
        assert np.all(out.weight_image == 0.0)
        assert np.all(out.alpha_image == 0.0)

    def test_multichannel_property(self):
        rng = np.random.default_rng(15)
        scene = random_scene(60, rng)
        view = one_view(image_size=24)[0]
        splats = project_gaussians(scene, view)
        x = rng.normal(size=(len(scene), 3))
        out = rasterize(splats, x, view)
        assert out.weight_image.shape == (view.height, view.width, 3)
        for c in range(3):
            single = rasterize(splats, x[:, c], view).weight_image
            assert np.allclose(out.weight_image[:, :, c], single, atol=1e-12)

    def test_nonfinite_property_rejected(self):
        view = axis_view()
        scene = point_scene([[0.0, 0.0, 0.0]], 0.0)
        splats = project_gaussians(scene, view)
        with pytest.raises(InputError):
            rasterize(splats, np.array([np.nan]), view)


class TestLedger:
    def test_split_sums_to_alpha_image(self):
        rng = np.random.default_rng(21)
        scene = random_scene(150, rng)
        view = one_view(image_size=32)[0]
        mask = rng.uniform(size=(view.height, view.width)) < 0.5
        ledger = accumulate_contributions(scene, [(view, mask)])
        alpha = rasterize(project_gaussians(scene, view),
                          np.ones(len(scene)), view).alpha_image
        assert np.isclose(ledger.total().sum(), alpha.sum(), atol=1e-3)
        assert ledger.n_views == 1

    def test_all_foreground_mask_puts_everything_in_s_plus(self):
        rng = np.random.default_rng(22)
        scene = random_scene(80, rng)
        view = one_view(image_size=24)[0]
        mask = np.ones((view.height, view.width), dtype=bool)
        ledger = accumulate_contributions(scene, [(view, mask)])
        assert np.all(ledger.s_minus == 0.0)
        assert ledger.s_plus.sum() > 0.0

    def test_merge_equals_joint_accumulation(self):
        rng = np.random.default_rng(23)
        scene = random_scene(100, rng)
        views = one_view(image_size=24, n_views=2)
        masks = [rng.uniform(size=(v.height, v.width)) < 0.4 for v in views]
        joint = accumulate_contributions(scene, list(zip(views, masks)))
        solo = [accumulate_contributions(scene, [(v, m)])
                for v, m in zip(views, masks)]
        merged = solo[0].merge(solo[1])
        assert np.allclose(merged.s_plus, joint.s_plus, atol=1e-12)
        assert np.allclose(merged.s_minus, joint.s_minus, atol=1e-12)
        assert merged.n_views == joint.n_views == 2

    def test_merge_size_mismatch_rejected(self):
        with pytest.raises(InputError):
            ContributionLedger(5).merge(ContributionLedger(6))

    def test_mask_shape_mismatch_names_view(self):
        rng = np.random.default_rng(24)
        scene = random_scene(10, rng)
        view = one_view(image_size=24)[0]
        with pytest.raises(InputError, match=view.id):
            accumulate_contributions(scene, [(view, np.ones((8, 8), dtype=bool))])


class TestFlattenedContributions:
    def test_render_scalar_matches_rasterize(self):
        rng = np.random.default_rng(31)
        scene = random_scene(200, rng)
        view = one_view(image_size=32)[0]
        splats = project_gaussians(scene, view)
        flat = flatten_contributions(splats, view, len(scene))
        x = rng.normal(size=len(scene))
        direct = rasterize(splats, x, view)
        assert np.allclose(flat.render_scalar(x), direct.weight_image, atol=1e-9)
        assert np.allclose(flat.alpha_image, direct.alpha_image, atol=1e-12)

    def test_ledger_terms_match_projected_path(self):
        rng = np.random.default_rng(32)
        scene = random_scene(150, rng)
        view = one_view(image_size=24)[0]
        mask = rng.uniform(size=(view.height, view.width)) < 0.5
        ledger = accumulate_contributions(scene, [(view, mask)])
        splats = project_gaussians(scene, view)
        flat = flatten_contributions(splats, view, len(scene))
        s_plus, s_minus = flat.ledger_terms(mask)
        assert np.allclose(s_plus, ledger.s_plus, atol=1e-9)
        assert np.allclose(s_minus, ledger.s_minus, atol=1e-9)

    def test_flattened_cache_used_by_accumulate(self):
        rng = np.random.default_rng(33)
        scene = random_scene(80, rng)
        view = one_view(image_size=24)[0]
        mask = rng.uniform(size=(view.height, view.width)) < 0.5
        splats = project_gaussians(scene, view)
        cache = {view.id: flatten_contributions(splats, view, len(scene))}
        via_cache = accumulate_contributions(scene, [(view, mask)],
                                             splat_cache=cache)
        direct = accumulate_contributions(scene, [(view, mask)])
        assert np.allclose(via_cache.s_plus, direct.s_plus, atol=1e-9)
        assert np.allclose(via_cache.s_minus, direct.s_minus, atol=1e-9)

    def test_bad_input_shapes_rejected(self):
        rng = np.random.default_rng(34)
        scene = random_scene(20, rng)
        view = one_view(image_size=16)[0]
        flat = flatten_contributions(project_gaussians(scene, view), view,
                                     len(scene))
        with pytest.raises(InputError):
            flat.render_scalar(np.ones(3))
        with pytest.raises(InputError):
            flat.ledger_terms(np.ones((3, 3), dtype=bool))


class TestSphericalHarmonics:
    def test_dc_only_ignores_direction(self):
        rng = np.random.default_rng(41)
        sh = rng.normal(size=(10, 3, 1))
        d1 = rng.normal(size=(10, 3))
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 = np.roll(d1, 3, axis=0)
        assert np.array_equal(eval_sh(sh, d1), eval_sh(sh, d2))

    def test_degree_one_matches_direct_polynomial(self):
        rng = np.random.default_rng(42)
        sh = rng.normal(size=(25, 3, 4))
        dirs = rng.normal(size=(25, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        c0 = 0.28209479177387814
        c1 = 0.4886025119029199
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        expect = (c0 * sh[:, :, 0] - c1 * y * sh[:, :, 1]
                  + c1 * z * sh[:, :, 2] - c1 * x * sh[:, :, 3])
        assert np.allclose(eval_sh(sh, dirs), expect, atol=1e-6)

    def test_higher_degrees_accepted(self):
        rng = np.random.default_rng(43)
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for n in (9, 16):
            vals = eval_sh(rng.normal(size=(4, 3, n)), dirs)
            assert vals.shape == (4, 3)
            assert np.all(np.isfinite(vals))

    def test_unsupported_count_rejected(self):
        with pytest.raises(FormatError):
            eval_sh(np.zeros((2, 3, 5)), np.zeros((2, 3)))

    def test_render_rgb_dc_color(self):
        view = axis_view()
        dc = np.array([0.3, -0.1, 0.8])
        sh = dc[None, :, None] * np.ones((1, 3, 1))
        scene = point_scene([[0.0, 0.0, 0.0]], np.log(9.0), sh=sh)
        out = render_rgb(scene, view)
        c0 = 0.28209479177387814
        expect = 0.9 * np.clip(c0 * dc + 0.5, 0.0, None)
        assert np.allclose(out.rgb_image[int(view.cy), int(view.cx)],
                           expect, atol=1e-9)

    def test_render_rgb_clamps_negative_colors(self):
        view = axis_view()
        sh = np.full((1, 3, 1), -10.0)
        scene = point_scene([[0.0, 0.0, 0.0]], np.log(9.0), sh=sh)
        out = render_rgb(scene, view)
        assert np.all(out.rgb_image >= 0.0)
        assert np.all(out.rgb_image[int(view.cy), int(view.cx)] == 0.0)


class TestLabelMasks:
    def test_no_labels_renders_empty(self):
        rng = np.random.default_rng(51)
        scene = random_scene(50, rng)
        view = one_view(image_size=24)[0]
        mask = render_label_mask(scene, view, np.zeros(len(scene), dtype=bool))
        assert not mask.any()

    def test_full_labels_threshold_alpha(self):
        rng = np.random.default_rng(52)
        scene = random_scene(150, rng)
        view = one_view(image_size=24)[0]
        alpha = rasterize(project_gaussians(scene, view),
                          np.ones(len(scene)), view).alpha_image
        for thr in (0.25, 0.5, 0.9):
            mask = render_label_mask(scene, view,
                                     np.ones(len(scene), dtype=bool),
                                     threshold=thr)
            assert np.array_equal(mask, alpha >= thr)

    def test_cache_paths_agree(self):
        rng = np.random.default_rng(53)
        scene = random_scene(120, rng)
        view = one_view(image_size=24)[0]
        labels = rng.uniform(size=len(scene)) < 0.5
        splats = project_gaussians(scene, view)
        flat = flatten_contributions(splats, view, len(scene))
        m0 = render_label_mask(scene, view, labels)
        m1 = render_label_mask(scene, view, labels, splats=splats)
        m2 = render_label_mask(scene, view, labels, splats=flat)
        assert np.array_equal(m0, m1)
        assert np.array_equal(m1, m2)

    def test_invalid_threshold_rejected(self):
        rng = np.random.default_rng(54)
        scene = random_scene(5, rng)
        view = one_view(image_size=16)[0]
        labels = np.ones(len(scene), dtype=bool)
        for thr in (0.0, 1.0, -0.5):
            with pytest.raises(InputError):
                render_label_mask(scene, view, labels, threshold=thr)

    def test_wrong_label_length_rejected(self):
        rng = np.random.default_rng(55)
        scene = random_scene(5, rng)
        view = one_view(image_size=16)[0]
        with pytest.raises(InputError):
            render_label_mask(scene, view, np.ones(3, dtype=bool))
