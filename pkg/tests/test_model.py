import numpy as np
import pytest

from handtcl.errors import FormatError, InvalidConfig, ShapeMismatch
from handtcl.hand import forward_kinematics
from handtcl.nn.autograd import Tensor
from handtcl.nn.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from handtcl.nn.model import (
    ENCODER_KEYS,
    HEAD_KEYS,
    HEAD_OUT,
    IDENTITY_6D,
    ModelConfig,
    decode_head,
    encode,
    init_params,
    predict,
)
from handtcl.nn.optim import AdamState, TrainSchedule, adam_step, lr_at

CFG = ModelConfig.for_image_size(16)


@pytest.fixture
def params():
    return init_params(CFG, np.random.default_rng(0))


def test_parameter_layout(params):
    assert set(params) == set(ENCODER_KEYS) | set(HEAD_KEYS)
    assert params["conv1.w"].shape == (3, 3, 3, 8)
    assert params["conv3.w"].shape == (3, 3, 16, 32)
    assert params["embed.w"].shape == (32, 64)
    assert params["head1.w"].shape == (64, 128)
    assert params["head2.w"].shape == (128, HEAD_OUT) == (128, 109)
    assert all(t.dtype == np.float32 for _, t in params.items())


def test_encode_shapes_and_determinism(params):
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    z1, z2 = encode(params, img), encode(params, img)
    assert z1.shape == (64,)
    np.testing.assert_array_equal(z1.data, z2.data)
    assert encode(params, np.stack([img, img, img])).shape == (3, 64)
    assert np.all(np.isfinite(z1.data))


def test_zero_image_with_zero_final_layer_gives_zero_embedding(params):
    params.tensors["embed.w"].data[:] = 0
    params.tensors["embed.b"].data[:] = 0
    z = encode(params, np.zeros((16, 16, 3), np.float32))
    np.testing.assert_array_equal(z.data, np.zeros(64))


def test_encode_rejects_wrong_size(params):
    with pytest.raises(ShapeMismatch):
        encode(params, np.zeros((20, 16, 3)))
    with pytest.raises(ShapeMismatch):
        encode(params, np.zeros((16, 16, 1)))


def test_zero_head_decodes_to_zero_parameters(params):
    for k in ("head2.w", "head2.b"):
        params.tensors[k].data[:] = 0
    pose, shape, cam = decode_head(params, np.ones((2, 64), np.float32))
    assert pose.shape == (2, 16, 6) and shape.shape == (2, 10) and cam.shape == (2, 3)
    np.testing.assert_array_equal(pose.data, 0)
    np.testing.assert_array_equal(shape.data, 0)
    np.testing.assert_allclose(cam.data[:, 0], CFG.cam_scale * np.log(2.0), rtol=1e-5)
    np.testing.assert_allclose(cam.data[:, 1:], CFG.cam_center)


def test_initial_head_predicts_identity_rotations(params, tmpl):
    pose, shape, cam = predict(params, np.random.default_rng(2).random((4, 16, 16, 3)).astype(np.float32))
    np.testing.assert_allclose(pose, np.broadcast_to(IDENTITY_6D, pose.shape), atol=0.2)
    assert np.all(np.isfinite(forward_kinematics(pose.astype(np.float64), shape.astype(np.float64), tmpl)))


def test_camera_scale_is_positive_for_random_weights():
    for seed in range(20):
        p = init_params(CFG, np.random.default_rng(seed))
        p.tensors["head2.w"].data *= 500.0
        z = np.random.default_rng(seed).standard_normal((64, 64)).astype(np.float32) * 10
        _, _, cam = decode_head(p, z)
        assert np.all(cam.data[:, 0] > 0)


def test_every_parameter_receives_a_gradient(params):
    img = np.random.default_rng(3).random((2, 16, 16, 3)).astype(np.float32)
    pose, shape, cam = decode_head(params, encode(params, img))
    (pose.sum() + shape.sum() + cam.sum()).backward()
    for name, t in params.items():
        assert t.grad is not None and t.grad.shape == t.shape, name


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(params, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"seed": 7})
    assert path.read_bytes()[:4] == MAGIC
    loaded, snap = load_checkpoint(path)
    assert snap == {"seed": 7}
    assert loaded.config == params.config
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)
    save_checkpoint(tmp_path / "again.ckpt", loaded, {"seed": 7})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_files(params, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0", raw[:4] + b"\x09" + raw[5:]):
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad.ckpt")


# -- optimizer and schedule ------------------------------------------------


def test_schedule_junctions():
    s = TrainSchedule(base_lr=1e-3, warmup_epochs=10, total_epochs=50)
    assert lr_at(0, s) == 0.0
    assert lr_at(5, s) == pytest.approx(5e-4)
    assert lr_at(10, s) == pytest.approx(1e-3)
    assert lr_at(30, s) == pytest.approx(5e-4)
    assert lr_at(50, s) == 0.0
    assert lr_at(0, TrainSchedule(base_lr=0.1, warmup_epochs=0, total_epochs=5)) == pytest.approx(0.1)


def test_schedule_validation():
    with pytest.raises(InvalidConfig):
        TrainSchedule(warmup_epochs=60, total_epochs=50)
    with pytest.raises(InvalidConfig):
        TrainSchedule(batch_size=0)


def test_adam_matches_reference_update():
    rng = np.random.default_rng(4)
    w0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    params = {"w": Tensor(w0.copy(), requires_grad=True)}
    state = AdamState()
    m = v = np.zeros(5)
    w = w0.copy()
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)


def test_adam_shape_mismatch():
    params = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"w": np.zeros(4)}, AdamState(), 0.1)
    state = AdamState()
    adam_step(params, {"w": np.ones(3)}, state, 0.1)
    params["w"].data = np.zeros(4)
    with pytest.raises(ShapeMismatch):
        adam_step(params, {"w": np.ones(4)}, state, 0.1)
