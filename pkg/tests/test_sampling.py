import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatsem.augment import (AugmentationSpec, Step, apply_augmentation, axis_angle_quaternion,
                              base_steps, dc_to_rgb, global_view_steps, identity_spec,
                              local_view_steps, quat_multiply, quat_to_matrix,
                              reflect_quaternions, rgb_to_dc)
from splatsem.sampling import grid_sample, mask_positions, mask_tokens, sample_crop, voxel_keys
from splatsem.scene import GaussianScene

from conftest import random_scene


def test_grid_sample_one_per_voxel_smallest_index():
    s = random_scene(300, seed=3)
    v = grid_sample(s, 0.25)
    keys = voxel_keys(s.centers, 0.25)
    kept_keys = {tuple(k) for k in keys[v.indices]}
    assert len(kept_keys) == len(v.indices)
    all_keys = {tuple(k) for k in keys}
    assert kept_keys == all_keys
    for i in v.indices:
        same = np.flatnonzero((keys == keys[i]).all(1))
        assert same.min() == i


def test_grid_sample_rejects_nonpositive(scene100):
    with pytest.raises(ValueError):
        grid_sample(scene100, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["global", "local"]))
def test_crop_is_knn_of_anchor(seed, kind):
    s = random_scene(200, seed=seed % 17)
    spec = identity_spec(cap_global=128, cap_local=32)
    v = sample_crop(s, kind, spec, seed)
    k = v.augmentation_log[0]["k"]
    assert len(v.indices) == min(k, 200)
    anchor = v.augmentation_log[0]["anchor"]
    d = np.sum((s.centers.astype(np.float64) - s.centers[anchor]) ** 2, axis=1)
    inside = d[v.indices].max()
    outside = np.delete(d, v.indices)
    assert anchor in v.indices
    assert (outside >= inside).all()


def test_crop_clamps_small_scene():
    s = random_scene(10)
    v = sample_crop(s, "global", identity_spec(crop_global=(1.0, 1.0), cap_global=50), 0)
    assert len(v.indices) == 10
    assert v.augmentation_log[-1]["op"] == "crop_clamp"


def test_crop_respects_pool(scene100):
    pool = np.arange(0, 100, 3)
    v = sample_crop(scene100, "local", identity_spec(cap_local=8), 5, indices=pool)
    assert set(v.indices) <= set(pool)


def test_crop_deterministic(scene100):
    spec = identity_spec(cap_global=40)
    a = sample_crop(scene100, "global", spec, 99)
    b = sample_crop(scene100, "global", spec, 99)
    np.testing.assert_array_equal(a.indices, b.indices)


@given(st.integers(0, 500), st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
def test_mask_count(n, ratio, seed):
    m = mask_positions(n, ratio, seed)
    assert m.sum() == int(np.floor(n * ratio + 0.5))


def test_mask_tokens_partition(scene100):
    v = grid_sample(scene100, 0.1)
    masked, kept = mask_tokens(v, 0.6, 4)
    assert len(np.intersect1d(masked, kept)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([masked, kept])), v.indices)


def test_mask_ratio_range():
    with pytest.raises(ValueError):
        mask_positions(10, 1.5, 0)


def test_quaternion_rotation_matches_matrix(rng):
    for _ in range(20):
        a, b = rng.normal(size=4), rng.normal(size=4)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        np.testing.assert_allclose(quat_to_matrix(quat_multiply(a[None], b[None])[0]),
                                   quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


def test_axis_angle_z_quarter_turn():
    R = quat_to_matrix(axis_angle_quaternion("z", np.pi / 2))
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_reflection_of_orientation(rng):
    q = rng.normal(size=(10, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    F = np.diag([-1.0, 1, 1])
    r = reflect_quaternions(q, 0)
    for qi, ri in zip(q, r):
        R = quat_to_matrix(qi)
        S = np.diag(rng.uniform(0.1, 1, 3)) ** 2
        # covariance of the mirrored Gaussian equals F Sigma F
        np.testing.assert_allclose(quat_to_matrix(ri) @ S @ quat_to_matrix(ri).T,
                                   F @ R @ S @ R.T @ F, atol=1e-12)


def test_color_roundtrip(rng):
    rgb = rng.uniform(0, 1, (10, 3))
    np.testing.assert_allclose(dc_to_rgb(rgb_to_dc(rgb)), rgb, atol=1e-12)


def test_identity_augmentation_returns_input(scene100):
    out = apply_augmentation(scene100, identity_spec(), 1)
    assert out.scene is scene100 and out.log == []


def test_rotation_preserves_pairwise_distances(scene100):
    spec = AugmentationSpec([Step("rotate", 1.0, {"axis": "z", "angle": (0.3, 0.9)})])
    out = apply_augmentation(scene100, spec, 3)
    d0 = np.linalg.norm(scene100.centers[:, None] - scene100.centers[None], axis=-1)
    d1 = np.linalg.norm(out.scene.centers[:, None] - out.scene.centers[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-5)
    assert 0.3 <= out.log[0]["angle"] <= 0.9


def test_scale_step_scales_scales(scene100):
    out = apply_augmentation(scene100, AugmentationSpec([Step("scale", 1.0, {"range": (2, 2)})]), 0)
    np.testing.assert_allclose(out.scene.scales, scene100.scales * 2, rtol=1e-6)


def test_jitter_clipped(scene100):
    spec = AugmentationSpec([Step("jitter", 1.0, {"sigma": 1.0, "clip": 0.01})])
    out = apply_augmentation(scene100, spec, 0)
    assert np.abs(out.scene.centers - scene100.centers).max() <= 0.01 + 1e-6


def test_dropout_kept_indices(scene100):
    spec = AugmentationSpec([Step("dropout", 1.0, {"ratio": 0.3})])
    out = apply_augmentation(scene100, spec, 0)
    assert len(out.kept) == 70
    np.testing.assert_array_equal(out.scene.centers, scene100.centers[out.kept])


@pytest.mark.parametrize("steps", [base_steps(), global_view_steps(0), global_view_steps(1),
                                   local_view_steps()])
def test_presets_produce_valid_scenes(scene100, steps):
    out = apply_augmentation(scene100, AugmentationSpec(steps), 11)
    out.scene.validate()
    np.testing.assert_allclose(np.linalg.norm(out.scene.rotations, axis=1), 1, atol=1e-6)
    again = apply_augmentation(scene100, AugmentationSpec(steps), 11)
    assert again.log == out.log


def test_spec_validation():
    with pytest.raises(ValueError):
        AugmentationSpec([Step("warp")])
    with pytest.raises(ValueError):
        AugmentationSpec([Step("rotate", 1.5, {"axis": "z", "angle": (0, 1)})])
    with pytest.raises(ValueError):
        AugmentationSpec(crop_global=(0.5, 0.2))


def test_spec_json_roundtrip():
    s = AugmentationSpec(base_steps())
    t = AugmentationSpec.from_json(s.to_json())
    assert t.to_json() == s.to_json()
