"""Convolutional encoder and hand-parameter regression head.

Encoder: three 3x3 stride-2 convolutions with ReLU (3 -> 8 -> 16 -> 32
channels), global average pooling and a linear embedding layer. Head: a
two-layer MLP from the embedding to 109 numbers, split into 16 x 6 rotation
values, 10 shape coefficients and the 3 camera values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from ..hand import N_BETAS, N_ROT
from .autograd import Tensor, concat, conv2d, ensure_tensor

HEAD_OUT = N_ROT * 6 + N_BETAS + 3  # 109
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))
SCALE_FLOOR = 1e-6  # softplus underflows to 0 in float32; keeps s strictly positive

ENCODER_KEYS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "embed.w", "embed.b")
HEAD_KEYS = ("head1.w", "head1.b", "head2.w", "head2.b")


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple = (8, 16, 32)
    embed_dim: int = 64
    head_hidden: int = 128
    # camera decoding: s = cam_scale * (softplus(raw) + floor), t = cam_center + cam_shift * raw
    cam_scale: float = 180.0
    cam_shift: float = 32.0
    cam_center: float = 32.0

    @classmethod
    def for_image_size(cls, size, **kw):
        return cls(
            image_size=size,
            cam_scale=180.0 * size / 64.0,
            cam_shift=size / 2.0,
            cam_center=size / 2.0,
            **kw,
        )

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d.get("channels", (8, 16, 32)))
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def astype(self, dtype):
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()},
        )

    def n_parameters(self):
        return sum(v.data.size for v in self.tensors.values())


def init_params(config: ModelConfig | None = None, rng=None, dtype=np.float32) -> ModelParams:
    """He-initialized encoder; head bias starts at identity rotations and a unit camera."""
    config = config or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    c1, c2, c3 = config.channels
    e, hdim = config.embed_dim, config.head_hidden

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    t = {}
    for name, cin, cout in (("conv1", 3, c1), ("conv2", c1, c2), ("conv3", c2, c3)):
        t[f"{name}.w"] = he((3, 3, cin, cout), 9 * cin)
        t[f"{name}.b"] = np.zeros(cout)
    t["embed.w"] = rng.standard_normal((c3, e)) * np.sqrt(1.0 / c3)
    t["embed.b"] = np.zeros(e)
    t["head1.w"] = he((e, hdim), e)
    t["head1.b"] = np.zeros(hdim)
    t["head2.w"] = rng.standard_normal((hdim, HEAD_OUT)) * 0.01
    bias = np.zeros(HEAD_OUT)
    bias[: N_ROT * 6] = np.tile(IDENTITY_6D, N_ROT)
    bias[N_ROT * 6 + N_BETAS] = _SOFTPLUS_INV_ONE
    t["head2.b"] = bias
    return ModelParams(config, {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in t.items()})


def encode(params: ModelParams, images):
    """Embed one (H, W, 3) image or a batch (B, H, W, 3); returns (E,) or (B, E)."""
    x = ensure_tensor(images)
    size = params.config.image_size
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (size, size, 3):
        raise ShapeMismatch(f"expected images of shape ({size}, {size}, 3), got {x.shape}")
    h = x
    for name in ("conv1", "conv2", "conv3"):
        h = conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride=2, padding=1).relu()
    pooled = h.mean(axis=(1, 2))
    z = pooled @ params["embed.w"] + params["embed.b"]
    return z.reshape(z.shape[1]) if single else z


def head(params: ModelParams, z):
    z = ensure_tensor(z)
    hid = (z @ params["head1.w"] + params["head1.b"]).relu()
    return hid @ params["head2.w"] + params["head2.b"]


def decode_raw(raw, config: ModelConfig):
    """Split raw head outputs (..., 109) into pose (..., 16, 6), shape (..., 10), camera (..., 3)."""
    raw = ensure_tensor(raw)
    if raw.shape[-1] != HEAD_OUT:
        raise ShapeMismatch(f"head output must have {HEAD_OUT} values, got {raw.shape[-1]}")
    lead = raw.shape[:-1]
    pose = raw[..., : N_ROT * 6].reshape(*lead, N_ROT, 6)
    shape = raw[..., N_ROT * 6 : N_ROT * 6 + N_BETAS]
    c = raw[..., N_ROT * 6 + N_BETAS :]
    s = (c[..., 0:1].softplus() + SCALE_FLOOR) * config.cam_scale
    t = c[..., 1:3] * config.cam_shift + config.cam_center
    return pose, shape, concat([s, t], axis=-1)


def decode_head(params: ModelParams, z):
    return decode_raw(head(params, z), params.config)


def predict(params: ModelParams, images):
    """Encode and decode in one call; returns numpy (pose, shape, camera)."""
    from .autograd import no_grad

    with no_grad():
        pose, shape, cam = decode_head(params, encode(params, images))
    return pose.data, shape.data, cam.data
