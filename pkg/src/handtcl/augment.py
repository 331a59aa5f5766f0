"""Time-coherent geometric augmentation and per-frame appearance augmentation.

Within a sequence every frame receives the same rotation/scale/translation,
while channel gains, color jitter, color drop and the Sobel filter are
drawn independently for each frame.

Image coordinates follow the renderer: x is the column, y is the row, and
the geometric transform maps a source point ``p`` to
``scale * R(rotation) @ (p - c) + c + translation`` with ``c`` the image center.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidConfig

GEOMETRIC_OPS = ("rotation", "scale", "translation")
APPEARANCE_OPS = ("channel_noise", "color_jitter", "color_drop", "sobel")


@dataclass(frozen=True)
class GeometricParams:
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)  # pixels, (x, y)

    @property
    def is_identity(self):
        return self.rotation == 0.0 and self.scale == 1.0 and tuple(self.translation) == (0.0, 0.0)


@dataclass(frozen=True)
class AppearanceParams:
    channel_gains: tuple = (1.0, 1.0, 1.0)
    color_drop: bool = False
    jitter: tuple = (0.0, 0.0, 0.0)
    sobel: bool = False


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_range: tuple = (-45.0, 45.0)
    scale_range: tuple = (0.6, 2.0)
    translation_fraction: float = 0.3
    gain_range: tuple = (0.6, 1.4)
    jitter_range: float = 0.1
    op_probabilities: dict = field(
        default_factory=lambda: {
            "channel_noise": 1.0,
            "color_jitter": 0.8,
            "color_drop": 0.2,
            "sobel": 0.1,
        }
    )
    enabled: frozenset = frozenset(GEOMETRIC_OPS + APPEARANCE_OPS)

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(GEOMETRIC_OPS + APPEARANCE_OPS)
        if unknown:
            raise InvalidConfig(f"unknown augmentation ops: {sorted(unknown)}")
        for name in ("rotation_range", "scale_range", "gain_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfig(f"{name} is not ordered: {lo} > {hi}")
        if self.scale_range[0] <= 0:
            raise InvalidConfig("scale_range must be positive")
        if self.translation_fraction < 0 or self.jitter_range < 0:
            raise InvalidConfig("translation_fraction and jitter_range must be non-negative")

    def only(self, *ops):
        """Same ranges with just ``ops`` enabled (for per-op ablations)."""
        return replace(self, enabled=frozenset(ops))

    def to_dict(self):
        return {
            "rotation_range": list(self.rotation_range),
            "scale_range": list(self.scale_range),
            "translation_fraction": self.translation_fraction,
            "gain_range": list(self.gain_range),
            "jitter_range": self.jitter_range,
            "op_probabilities": dict(self.op_probabilities),
            "enabled": sorted(self.enabled),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for name in ("rotation_range", "scale_range", "gain_range"):
            if name in d:
                d[name] = tuple(d[name])
        if "enabled" in d:
            d["enabled"] = frozenset(d["enabled"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


PRETRAIN_POLICY = AugmentationPolicy()
FINETUNE_POLICY = AugmentationPolicy(
    rotation_range=(-90.0, 90.0),
    scale_range=(0.7, 1.3),
    translation_fraction=0.4,
    enabled=frozenset(GEOMETRIC_OPS),
)
IDENTITY_POLICY = AugmentationPolicy(enabled=frozenset())
POLICIES = {"pretrain": PRETRAIN_POLICY, "finetune": FINETUNE_POLICY, "none": IDENTITY_POLICY}


# -- geometric -------------------------------------------------------------


def sample_geometric(policy: AugmentationPolicy, rng, image_size=64) -> GeometricParams:
    # all three draws always happen so the stream does not depend on the enabled set
    rot = rng.uniform(*policy.rotation_range)
    scale = rng.uniform(*policy.scale_range)
    span = policy.translation_fraction * image_size
    trans = rng.uniform(-span, span, size=2)
    on = policy.enabled
    return GeometricParams(
        rotation=float(rot) if "rotation" in on else 0.0,
        scale=float(scale) if "scale" in on else 1.0,
        translation=(float(trans[0]), float(trans[1])) if "translation" in on else (0.0, 0.0),
    )


def _rotation_2d(degrees):
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def apply_geometric(img, p: GeometricParams):
    """Warp an (H, W, C) image or an (N, H, W, C) stack; bilinear, zero fill."""
    img = np.asarray(img)
    if p.is_identity:
        return img.copy()
    single = img.ndim == 3
    stack = img[None] if single else img
    n, h, w, c = stack.shape
    # one warp for the whole stack: treat frames as extra channels
    flat = stack.transpose(1, 2, 0, 3).reshape(1, h, w, n * c)
    out = _warp(flat, [p]).reshape(h, w, n, c).transpose(2, 0, 1, 3)
    return out[0] if single else out


def apply_geometric_each(stack, params):
    """Warp frame ``i`` of an (N, H, W, C) stack by ``params[i]``."""
    stack = np.asarray(stack)
    if len(params) != len(stack):
        raise InvalidConfig("need one parameter set per frame")
    return _warp(stack, list(params))


def _warp(stack, params):
    """Bilinear inverse warp of (N, H, W, C) with per-item params (or one shared)."""
    n, h, w, c = stack.shape
    ft = np.result_type(stack.dtype, np.float32)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rows, cols = np.mgrid[0:h, 0:w]
    dst = np.stack([cols.ravel(), rows.ravel()], axis=-1).astype(np.float64)
    # src = R^T (dst - c - t) / scale + c, row-wise
    rot = np.stack([_rotation_2d(p.rotation) for p in params])
    shift = np.array([p.translation for p in params], dtype=np.float64)
    scale = np.array([p.scale for p in params], dtype=np.float64)
    src = np.matmul(dst[None] - center - shift[:, None], rot) / scale[:, None, None] + center

    x0 = np.floor(src[..., 0]).astype(np.int64)
    y0 = np.floor(src[..., 1]).astype(np.int64)
    fx = (src[..., 0] - x0).astype(ft)
    fy = (src[..., 1] - y0).astype(ft)
    # pixels as rows, with one trailing zero row that out-of-bounds taps point at
    flat = np.zeros((n * h * w + 1, c), dtype=ft)
    flat[:-1] = stack.reshape(n * h * w, c)
    base = (np.arange(n) * h * w)[:, None] if len(params) == n else 0
    out = np.zeros((n, h * w, c), dtype=ft)
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xs, ys = x0 + dx, y0 + dy
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h) & (wgt > 0)
        idx = np.where(ok, base + ys * w + xs, n * h * w)
        out += wgt[..., None] * np.take(flat, idx, axis=0)
    return np.clip(out, 0.0, 1.0).astype(stack.dtype).reshape(n, h, w, c)


def transform_labels(j3d, j2d, cam, pose, p: GeometricParams, image_size):
    """Labels consistent with an image warped by ``p``.

    An in-plane image rotation is a rotation of the hand about the camera
    axis through the root; scale and translation fold into the camera.
    Returns ``(j3d, j2d, cam, pose)``.
    """
    out = transform_labels_each(
        np.asarray(j3d)[None], np.asarray(j2d)[None], np.asarray(cam)[None], np.asarray(pose)[None], [p], image_size
    )
    return tuple(a[0] for a in out)


def transform_labels_each(j3d, j2d, cam, pose, params, image_size):
    """Batched :func:`transform_labels`: item ``i`` of each array is moved by ``params[i]``."""
    from .hand import matrix_to_rot6d, rot6d_to_matrix

    center = np.array([(image_size - 1) / 2.0, (image_size - 1) / 2.0])
    rot2 = np.stack([_rotation_2d(p.rotation) for p in params])  # (n, 2, 2)
    scale = np.array([p.scale for p in params], dtype=np.float64)
    shift = np.array([p.translation for p in params], dtype=np.float64)
    rot3 = np.tile(np.eye(3), (len(params), 1, 1))
    rot3[:, :2, :2] = rot2
    j3d = np.einsum("nij,nkj->nki", rot3, np.asarray(j3d, dtype=np.float64))
    j2d = np.asarray(j2d, dtype=np.float64) - center
    j2d = scale[:, None, None] * np.einsum("nij,nkj->nki", rot2, j2d) + center + shift[:, None]
    cam = np.asarray(cam, dtype=np.float64)
    t = scale[:, None] * np.einsum("nij,nj->ni", rot2, cam[:, 1:] - center) + center + shift
    cam = np.concatenate([(scale * cam[:, 0])[:, None], t], axis=1)
    pose = np.array(pose, dtype=np.float64, copy=True)
    pose[:, 0, :] = matrix_to_rot6d(rot3 @ rot6d_to_matrix(pose[:, 0, :]))
    return j3d, j2d, cam, pose


# -- appearance ------------------------------------------------------------


def sample_appearance(policy: AugmentationPolicy, rng) -> AppearanceParams:
    probs = policy.op_probabilities
    on = policy.enabled
    gains = rng.uniform(*policy.gain_range, size=3)
    jitter = rng.uniform(-policy.jitter_range, policy.jitter_range, size=3)
    u = rng.random(4)
    use = {
        op: op in on and u[i] < probs.get(op, 0.0) for i, op in enumerate(APPEARANCE_OPS)
    }
    return AppearanceParams(
        channel_gains=tuple(map(float, gains)) if use["channel_noise"] else (1.0, 1.0, 1.0),
        color_drop=bool(use["color_drop"]),
        jitter=tuple(map(float, jitter)) if use["color_jitter"] else (0.0, 0.0, 0.0),
        sobel=bool(use["sobel"]),
    )


def sobel_magnitude(img):
    """Per-channel 3x3 Sobel gradient magnitude, scaled so the maximum is 1."""
    img = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    return mag / peak if peak > 0 else np.zeros_like(mag)


def apply_appearance(img, p: AppearanceParams):
    """Channel noise, then jitter, then color drop, then Sobel; clamped to [0, 1]."""
    img = np.asarray(img)
    dtype = img.dtype
    out = img.astype(np.float64)
    if p.channel_gains != (1.0, 1.0, 1.0):
        out = np.clip(out * np.asarray(p.channel_gains), 0.0, 1.0)
    if p.jitter != (0.0, 0.0, 0.0):
        out = np.clip(out + np.asarray(p.jitter), 0.0, 1.0)
    if p.color_drop:
        out = np.repeat(out.mean(axis=-1, keepdims=True), out.shape[-1], axis=-1)
    if p.sobel:
        out = sobel_magnitude(out)
    return np.clip(out, 0.0, 1.0).astype(dtype)


# -- sequences -------------------------------------------------------------


def augment_sequence(frames, policy: AugmentationPolicy, rng, log=None, coherent=True):
    """Augment an (n, H, W, 3) stack.

    One geometric draw is shared by all frames; each frame then gets its own
    appearance draw. With ``coherent=False`` every frame draws its own
    geometric parameters instead. If ``log`` is a list, one
    ``(geometric, appearance)`` tuple per frame is appended to it.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or len(frames) < 1:
        raise InvalidConfig("augment_sequence expects an (n, H, W, C) stack with n >= 1")
    size = frames.shape[2]
    if coherent:
        geo = sample_geometric(policy, rng, size)
        warped = apply_geometric(frames, geo)
        geos = [geo] * len(frames)
    else:
        geos = [sample_geometric(policy, rng, size) for _ in frames]
        warped = apply_geometric_each(frames, geos)
    out = np.empty_like(warped)
    for i, frame in enumerate(warped):
        app = sample_appearance(policy, rng)
        out[i] = apply_appearance(frame, app)
        if log is not None:
            log.append((geos[i], app))
    return out
