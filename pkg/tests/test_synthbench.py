"""Synthetic benchmark generator tests."""

from __future__ import annotations

import numpy as np
import pytest

from wheatsplat.errors import InputError
from wheatsplat.scene_io import InstanceMap
from wheatsplat.synthbench import (GroundTruth, SynthConfig, generate,
                                   load_truth, make_overhead_views,
                                   sample_reference_cloud,
                                   score_against_truth, save_truth)


def small_config(**overrides) -> SynthConfig:
    base = dict(n_heads=2, gaussians_per_head=(40, 60), clutter_gaussians=50,
                n_views=3, image_size=64, rng_seed=0)
    base.update(overrides)
    return SynthConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"n_heads": 0},
        {"n_views": 1},
        {"mask_dropout": -0.1},
        {"mask_dropout": 1.1},
        {"image_size": 31},
        {"mask_threshold": 0.0},
        {"mask_threshold": 1.0},
        {"surface_fraction": 1.2},
        {"head_size_jitter": 1.0},
        {"gaussians_per_head": (0, 5)},
        {"gaussians_per_head": (10, 5)},
        {"clutter_gaussians": -1},
        {"head_semi_axes_cm": (4.0, 0.0, 1.2)},
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(InputError):
            SynthConfig(**kwargs)

    def test_dict_round_trip(self):
        config = small_config(mask_dropout=0.25, mask_morph_noise=1)
        back = SynthConfig.from_dict(config.to_dict())
        assert back == config

    def test_unknown_key_rejected(self):
        data = SynthConfig().to_dict()
        data["n_plots"] = 3
        with pytest.raises(InputError, match="unknown"):
            SynthConfig.from_dict(data)


class TestGenerate:
    def test_deterministic(self):
        config = small_config(mask_dropout=0.3, mask_morph_noise=1)
        scene_a, views_a, pool_a, truth_a = generate(config)
        scene_b, views_b, pool_b, truth_b = generate(config)
        assert np.array_equal(scene_a.positions, scene_b.positions)
        assert np.array_equal(scene_a.opacity_logit, scene_b.opacity_logit)
        assert [v.id for v in views_a] == [v.id for v in views_b]
        keys_a = {(r.view_id, r.mask_id) for r in pool_a.all_unconsumed()}
        keys_b = {(r.view_id, r.mask_id) for r in pool_b.all_unconsumed()}
        assert keys_a == keys_b
        for rec_a, rec_b in zip(pool_a.all_unconsumed(), pool_b.all_unconsumed()):
            assert np.array_equal(rec_a.bitmap, rec_b.bitmap)
        for ha, hb in zip(truth_a.heads, truth_b.heads):
            assert np.array_equal(ha.gaussians, hb.gaussians)

    def test_head_index_sets_disjoint_and_in_range(self):
        config = small_config(n_heads=4)
        scene, _, _, truth = generate(config)
        seen: set[int] = set()
        for head in truth.heads:
            members = set(head.gaussians.tolist())
            assert not (members & seen)
            seen |= members
        assert max(seen) < len(scene)
        # clutter is whatever the heads did not claim
        assert len(scene) - len(seen) == config.clutter_gaussians

    def test_one_head_visible_in_every_view(self):
        config = small_config(n_heads=1, n_views=4, clutter_gaussians=0)
        _, views, pool, truth = generate(config)
        assert len(views) == 4
        records = pool.all_unconsumed()
        assert len(records) == 4
        assert all(r.mask_id == 1 for r in records)
        assert {r.view_id for r in records} == {v.id for v in views}
        assert set(truth.ideal_masks) == {(v.id, 1) for v in views}

    def test_full_dropout_empties_pool(self):
        _, _, pool, truth = generate(small_config(mask_dropout=1.0))
        assert pool.size() == 0
        assert truth.ideal_masks  # truth itself is unaffected

    def test_morph_noise_perturbs_masks(self):
        config = small_config(mask_morph_noise=2)
        _, _, pool, truth = generate(config)
        changed = 0
        for rec in pool.all_unconsumed():
            ideal = truth.ideal_masks[(rec.view_id, rec.mask_id)]
            if not np.array_equal(rec.bitmap, ideal):
                changed += 1
        assert changed == pool.size() > 0

    def test_mask_shapes_match_views(self):
        config = small_config()
        _, views, pool, _ = generate(config)
        size = {v.id: (v.height, v.width) for v in views}
        for rec in pool.all_unconsumed():
            assert rec.bitmap.shape == size[rec.view_id]
            assert rec.bitmap.dtype == bool
            assert rec.area == int(rec.bitmap.sum()) > 0

    def test_analytic_traits(self):
        _, _, _, truth = generate(small_config())
        head = truth.heads[0]
        a, b, c = head.semi_axes
        traits = head.analytic_traits(unit_scale=100.0)
        assert np.isclose(traits["length_cm"], 2.0 * a * 100.0, rtol=1e-12)
        assert np.isclose(traits["width_cm"], c * 100.0, rtol=1e-12)
        assert np.isclose(traits["volume_cm3"],
                          4.0 / 3.0 * np.pi * a * b * c * 1e6, rtol=1e-12)


class TestOverheadViews:
    def test_geometry(self):
        views = make_overhead_views(6, 96)
        assert [v.id for v in views] == [f"view_{i:03d}" for i in range(6)]
        target = np.array([0.0, 0.0, 0.55])
        for v in views:
            rot = v.world_to_camera[:3, :3]
            assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert np.isclose(np.linalg.det(rot), 1.0, atol=1e-12)
            center = v.camera_center()
            assert np.isclose(center[2], 1.8, atol=1e-12)
            # optical axis (third camera row) points at the target
            forward = rot[2]
            to_target = target - center
            to_target /= np.linalg.norm(to_target)
            assert np.allclose(forward, to_target, atol=1e-12)


class TestReferenceCloud:
    def test_points_lie_on_head_surfaces(self):
        config = small_config(reference_points_per_head=200)
        _, _, _, truth = generate(config)
        cloud = sample_reference_cloud(truth, config)
        assert cloud.shape == (2 * 200, 3)
        for i, head in enumerate(truth.heads):
            part = cloud[i * 200:(i + 1) * 200]
            local = (part - head.center) @ head.orientation.T
            radii = np.linalg.norm(local / head.semi_axes, axis=1)
            assert np.allclose(radii, 1.0, atol=1e-9)

    def test_deterministic(self):
        config = small_config()
        _, _, _, truth = generate(config)
        assert np.array_equal(sample_reference_cloud(truth, config),
                              sample_reference_cloud(truth, config))


class TestScoring:
    def test_perfect_prediction(self):
        _, _, _, truth = generate(small_config())
        imap = InstanceMap()
        for head in truth.heads:
            imap.add(head.head_id + 10, head.gaussians.copy(), [("v", 0)])
        score = score_against_truth(imap, truth)
        assert score["detected_fraction"] == 1.0
        assert score["mean_set_iou"] == 1.0
        assert score["id_map"] == {h.head_id + 10: h.head_id
                                   for h in truth.heads}

    def test_empty_prediction(self):
        _, _, _, truth = generate(small_config())
        score = score_against_truth(InstanceMap(), truth)
        assert score["detected_fraction"] == 0.0
        assert score["mean_set_iou"] == 0.0
        assert score["id_map"] == {}

    def test_partial_overlap_below_half_not_detected(self):
        _, _, _, truth = generate(small_config())
        imap = InstanceMap()
        full = truth.heads[0]
        sliver = truth.heads[1]
        imap.add(1, full.gaussians.copy(), [("v", 0)])
        imap.add(2, sliver.gaussians[:10].copy(), [("v", 0)])
        score = score_against_truth(imap, truth)
        sliver_iou = 10 / len(sliver.gaussians)
        assert score["detected_fraction"] == 0.5
        assert np.isclose(score["mean_set_iou"], (1.0 + sliver_iou) / 2.0,
                          atol=1e-12)
        assert score["id_map"] == {1: full.head_id, 2: sliver.head_id}


class TestTruthPersistence:
    def test_round_trip(self, tmp_path):
        config = small_config(head_size_jitter=0.2)
        _, _, _, truth = generate(config)
        path = tmp_path / "truth.json"
        save_truth(truth, config, path)
        loaded, loaded_config = load_truth(path)
        assert loaded_config == config
        assert len(loaded.heads) == len(truth.heads)
        for got, want in zip(loaded.heads, truth.heads):
            assert got.head_id == want.head_id
            assert np.array_equal(got.gaussians, want.gaussians)
            assert np.allclose(got.center, want.center, atol=1e-15)
            assert np.allclose(got.semi_axes, want.semi_axes, atol=1e-15)
            assert np.allclose(got.orientation, want.orientation, atol=1e-15)
        assert not loaded.ideal_masks
