import numpy as np
import pytest
from scipy import ndimage

from handtcl.augment import (
    FINETUNE_POLICY,
    GEOMETRIC_OPS,
    PRETRAIN_POLICY,
    AppearanceParams,
    AugmentationPolicy,
    GeometricParams,
    apply_appearance,
    apply_geometric,
    apply_geometric_each,
    augment_sequence,
    sample_appearance,
    sample_geometric,
    sobel_magnitude,
    transform_labels,
)
from handtcl.errors import InvalidConfig
from handtcl.hand import forward_kinematics, project_weak_perspective

NO_APPEARANCE = AppearanceParams()


def smooth_image(size=64, seed=0):
    rng = np.random.default_rng(seed)
    noise = rng.random((size, size, 3))
    img = ndimage.gaussian_filter(noise, sigma=(6, 6, 0))
    img = (img - img.min()) / (img.max() - img.min())
    # fade to zero at the border so rotations do not pull in fill values
    r = np.hypot(*np.mgrid[0:size, 0:size] - (size - 1) / 2)
    return img * np.clip((size / 2 - 4 - r) / 4, 0, 1)[..., None]


def bilinear_oracle(img, p):
    """scipy's linear interpolation on the inverse-mapped grid, zero padding."""
    h, w, _ = img.shape
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    a = np.deg2rad(p.rotation)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    rows, cols = np.mgrid[0:h, 0:w]
    dst = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    src = (dst - c - np.array(p.translation)) @ rot / p.scale + c
    out = [
        ndimage.map_coordinates(img[..., k], [src[:, 1], src[:, 0]], order=1, mode="grid-constant", cval=0.0)
        for k in range(img.shape[2])
    ]
    return np.clip(np.stack(out, axis=-1).reshape(img.shape), 0, 1)


def test_degenerate_policy_gives_identity_params():
    policy = AugmentationPolicy(rotation_range=(0, 0), scale_range=(1, 1), translation_fraction=0.0)
    p = sample_geometric(policy, np.random.default_rng(0))
    assert p == GeometricParams(0.0, 1.0, (0.0, 0.0)) and p.is_identity


def test_geometric_draws_within_ranges():
    rng = np.random.default_rng(1)
    draws = [sample_geometric(PRETRAIN_POLICY, rng, 64) for _ in range(100_000)]
    rot = np.array([d.rotation for d in draws])
    sc = np.array([d.scale for d in draws])
    tr = np.array([d.translation for d in draws])
    assert rot.min() >= -45 and rot.max() <= 45
    assert sc.min() >= 0.6 and sc.max() <= 2.0
    assert np.abs(tr).max() <= 0.3 * 64
    a = sample_geometric(PRETRAIN_POLICY, np.random.default_rng(9))
    assert a == sample_geometric(PRETRAIN_POLICY, np.random.default_rng(9))


def test_identity_warp_is_exact():
    img = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
    out = apply_geometric(img, GeometricParams(0.0, 1.0, (0.0, 0.0)))
    assert np.array_equal(out, img) and out is not img


def test_integer_translation_moves_delta():
    img = np.zeros((32, 32, 3))
    img[10, 12] = 1.0
    out = apply_geometric(img, GeometricParams(0.0, 1.0, (3.0, -4.0)))
    assert out[6, 15].tolist() == [1.0, 1.0, 1.0]
    assert out.sum() == 3.0


def test_double_half_turn_restores_smooth_image():
    img = smooth_image()
    half = GeometricParams(180.0, 1.0, (0.0, 0.0))
    back = apply_geometric(apply_geometric(img, half), half)
    assert np.abs(back - img).max() < 2e-2


@pytest.mark.parametrize("seed", range(5))
def test_warp_matches_scipy_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((48, 48, 3))
    p = GeometricParams(rng.uniform(-90, 90), rng.uniform(0.5, 2.0), tuple(rng.uniform(-8, 8, 2)))
    assert np.abs(apply_geometric(img, p) - bilinear_oracle(img, p)).max() < 1e-12


def test_stack_and_per_frame_warps_agree():
    rng = np.random.default_rng(3)
    stack = rng.random((4, 32, 32, 3))
    ps = [GeometricParams(rng.uniform(-40, 40), rng.uniform(0.7, 1.5), (1.5, -2.0)) for _ in range(4)]
    each = apply_geometric_each(stack, ps)
    for i in range(4):
        assert np.allclose(each[i], apply_geometric(stack[i], ps[i]), atol=1e-12)
    shared = apply_geometric(stack, ps[0])
    assert np.allclose(shared, apply_geometric_each(stack, [ps[0]] * 4), atol=1e-12)
    with pytest.raises(InvalidConfig):
        apply_geometric_each(stack, ps[:2])


def test_labels_follow_the_warp(small_sequences, tmpl):
    rec = small_sequences[0]
    p = GeometricParams(33.0, 1.3, (4.0, -6.0))
    j3d, j2d, cam, pose = transform_labels(rec.j3d[5], rec.j2d[5], rec.cam, rec.poses[5], p, 64)
    assert np.abs(forward_kinematics(pose, rec.shape, tmpl) - j3d).max() < 1e-9
    assert np.abs(project_weak_perspective(j3d, cam) - j2d).max() < 1e-9
    # a joint drawn at pixel q lands where the inverse warp samples q
    c = np.array([31.5, 31.5])
    a = np.deg2rad(p.rotation)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    back = (j2d - c - np.array(p.translation)) @ rot / p.scale + c
    assert np.allclose(back, rec.j2d[5])


def test_appearance_identity_and_gray_invariance():
    img = np.random.default_rng(4).random((16, 16, 3))
    assert np.array_equal(apply_appearance(img, NO_APPEARANCE), img)
    gray = np.repeat(img[..., :1], 3, axis=-1)
    assert np.allclose(apply_appearance(gray, AppearanceParams(color_drop=True)), gray, atol=1e-15)


def test_sobel_constant_is_zero_and_normalized():
    assert np.array_equal(sobel_magnitude(np.full((16, 16, 3), 0.4)), np.zeros((16, 16, 3)))
    mag = sobel_magnitude(np.random.default_rng(5).random((16, 16, 3)))
    assert mag.max() == 1.0 and mag.min() >= 0


def test_appearance_order():
    img = np.random.default_rng(6).random((16, 16, 3))
    p = AppearanceParams(channel_gains=(1.2, 0.8, 1.0), jitter=(0.05, -0.1, 0.0), color_drop=True)
    step = np.clip(img * [1.2, 0.8, 1.0], 0, 1)
    step = np.clip(step + [0.05, -0.1, 0.0], 0, 1)
    step = np.repeat(step.mean(axis=-1, keepdims=True), 3, axis=-1)
    assert np.allclose(apply_appearance(img, p), step, atol=1e-15)


def test_appearance_respects_enabled_set():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p = sample_appearance(FINETUNE_POLICY, rng)
        assert p == NO_APPEARANCE
    gains = [sample_appearance(PRETRAIN_POLICY, rng).channel_gains for _ in range(1000)]
    assert 0.6 <= np.min(gains) and np.max(gains) <= 1.4


def test_augment_sequence_single_frame_composition():
    frames = smooth_image(32)[None].astype(np.float32)
    log = []
    out = augment_sequence(frames, PRETRAIN_POLICY, np.random.default_rng(8), log=log)
    geo, app = log[0]
    assert np.array_equal(out[0], apply_appearance(apply_geometric(frames[0], geo), app))


def test_augment_sequence_determinism_and_coherence(small_sequences):
    frames = small_sequences[0].frames[:6]
    a = augment_sequence(frames, PRETRAIN_POLICY, np.random.default_rng(9))
    b = augment_sequence(frames, PRETRAIN_POLICY, np.random.default_rng(9))
    assert np.array_equal(a, b) and a.shape == frames.shape
    assert a.min() >= 0 and a.max() <= 1
    log = []
    augment_sequence(frames, PRETRAIN_POLICY, np.random.default_rng(10), log=log)
    assert len(log) == 6 and len({g for g, _ in log}) == 1
    log = []
    augment_sequence(frames, PRETRAIN_POLICY, np.random.default_rng(10), log=log, coherent=False)
    assert len({g for g, _ in log}) == 6


def test_policy_serialization_and_validation():
    assert AugmentationPolicy.from_dict(PRETRAIN_POLICY.to_dict()) == PRETRAIN_POLICY
    assert FINETUNE_POLICY.enabled == frozenset(GEOMETRIC_OPS)
    assert FINETUNE_POLICY.rotation_range == (-90.0, 90.0) and FINETUNE_POLICY.scale_range == (0.7, 1.3)
    assert PRETRAIN_POLICY.only("sobel").enabled == {"sobel"}
    with pytest.raises(InvalidConfig):
        AugmentationPolicy(rotation_range=(10, -10))
    with pytest.raises(InvalidConfig):
        AugmentationPolicy(enabled={"blur"})
