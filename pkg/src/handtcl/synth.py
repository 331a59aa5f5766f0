"""Synthetic grasp-like hand videos and their on-disk dataset format.

A sequence moves the hand from one random pose to another with a
smoothstep profile, then holds the final pose for a configurable fraction
of the clip. Low-frequency sinusoidal noise is added to every joint angle.
Frames are rendered as a color-coded skeleton over a flat background, with
an optional rectangle occluding the hand during the hold.

Dataset layout::

    <dir>/manifest.json
    <dir>/seq_00000.tcsq
    ...

Each ``.tcsq`` container starts with the header ``b"TCSQ" | version u32 |
n u32 | H u32 | W u32`` and is followed by little-endian arrays in this
order: frames float32 (n, H, W, 3); poses float64 (n, 16, 6); shape
float64 (10,); j3d float64 (n, 21, 3); j2d float64 (n, 21, 2); camera
float64 (3,) holding (s, tx, ty).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hand
from .errors import FormatError, InvalidConfig

SEQ_MAGIC = b"TCSQ"
SEQ_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIIII")

DEFAULT_PALETTE = (
    (0.10, 0.10, 0.12),
    (0.22, 0.16, 0.10),
    (0.08, 0.18, 0.22),
    (0.20, 0.22, 0.10),
    (0.25, 0.12, 0.20),
    (0.30, 0.30, 0.32),
)
FINGER_COLORS = np.array(
    [
        (0.95, 0.35, 0.30),  # thumb
        (0.95, 0.80, 0.25),  # index
        (0.35, 0.90, 0.35),  # middle
        (0.30, 0.65, 0.95),  # ring
        (0.80, 0.40, 0.95),  # pinky
    ]
)
JOINT_COLOR = np.array([1.0, 1.0, 1.0])
JOINT_ALPHA = 0.8
BONE_HALF_WIDTH = 1.0  # pixels at 64x64, scaled with the image size
JOINT_SIGMA = 0.8


@dataclass
class SynthConfig:
    n_frames: int = 60
    fps: float = 30.0
    grasp_hold_fraction: float = 0.3
    pose_noise_amplitude: float = 0.03
    occluder_probability: float = 0.3
    image_size: int = 64
    background_palette: tuple = DEFAULT_PALETTE

    def validate(self):
        if int(self.n_frames) < 2:
            raise InvalidConfig("n_frames must be at least 2")
        if not 0.0 <= self.grasp_hold_fraction <= 1.0:
            raise InvalidConfig("grasp_hold_fraction must lie in [0, 1]")
        if not 0.0 <= self.occluder_probability <= 1.0:
            raise InvalidConfig("occluder_probability must lie in [0, 1]")
        if self.pose_noise_amplitude < 0:
            raise InvalidConfig("pose_noise_amplitude must be non-negative")
        if self.fps <= 0:
            raise InvalidConfig("fps must be positive")
        if int(self.image_size) < 16:
            raise InvalidConfig("image_size must be at least 16")
        if len(self.background_palette) == 0:
            raise InvalidConfig("background_palette is empty")
        return self

    def to_dict(self):
        d = asdict(self)
        d["background_palette"] = [list(map(float, c)) for c in self.background_palette]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "background_palette" in d:
            d["background_palette"] = tuple(tuple(c) for c in d["background_palette"])
        try:
            return cls(**d).validate()
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


@dataclass
class SequenceRecord:
    frames: np.ndarray  # (n, H, W, 3) float32 in [0, 1]
    poses: np.ndarray  # (n, 16, 6)
    shape: np.ndarray  # (10,)
    j3d: np.ndarray  # (n, 21, 3) meters
    j2d: np.ndarray  # (n, 21, 2) pixels
    cam: np.ndarray  # (3,) = (s, tx, ty)
    fps: float
    seq_id: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.poses)

    @property
    def camera(self):
        return hand.CameraWeakPerspective.from_array(self.cam)


@dataclass
class RenderStyle:
    background: tuple
    occluder: tuple | None = None  # (row0, col0, row1, col1, r, g, b)


# -- pose trajectories -----------------------------------------------------

# joint-angle limits in radians, per articulated slot: (flex, abduction)
_FINGER_LIMITS = {
    0: ((-0.3, 0.7), (-0.5, 0.5)),  # base joint
    1: ((-0.1, 1.4), (0.0, 0.0)),
    2: ((0.0, 1.2), (0.0, 0.0)),
}
_THUMB_LIMITS = {
    0: ((-0.4, 0.6), (-0.6, 0.4)),
    1: ((-0.2, 0.9), (0.0, 0.0)),
    2: ((0.0, 1.1), (0.0, 0.0)),
}
_WRIST_LIMITS = ((-0.7, 0.7), (-0.7, 0.7), (-np.pi / 3, np.pi / 3))  # about x, y, z


def _angle_limits():
    lo, hi = [], []
    for a in range(3):
        lo.append(_WRIST_LIMITS[a][0])
        hi.append(_WRIST_LIMITS[a][1])
    for finger in hand.FINGERS:
        table = _THUMB_LIMITS if finger == "thumb" else _FINGER_LIMITS
        for depth in range(3):
            (f0, f1), (a0, a1) = table[depth]
            lo += [f0, a0]
            hi += [f1, a1]
    return np.array(lo), np.array(hi)


ANGLE_LO, ANGLE_HI = _angle_limits()
SYNERGY_JITTER = 0.1  # per-joint deviation from the finger's curl, as a fraction of the range
WRIST_DRIFT = 0.15  # radians; std of the wrist change between a sequence's start and end pose


def random_pose_angles(rng, jitter=SYNERGY_JITTER):
    """(33,) limit-respecting joint angles drawn through per-finger synergies.

    Each finger gets one curl level in [0, 1] shared by its three flexion
    joints (plus a small per-joint jitter) and one spread value for its
    base abduction; the wrist rotation is uniform within its limits.
    """
    span = ANGLE_HI - ANGLE_LO
    u = np.empty(span.shape)
    u[:3] = rng.random(3)
    curl = rng.random(5)
    spread = rng.random(5)
    per_joint = np.repeat(curl, 3).reshape(5, 3) + jitter * rng.standard_normal((5, 3))
    fingers = np.empty((5, 3, 2))
    fingers[..., 0] = per_joint
    fingers[..., 1] = 0.5
    fingers[:, 0, 1] = spread
    u[3:] = fingers.ravel()
    return ANGLE_LO + span * np.clip(u, 0.0, 1.0)


def angles_to_pose(angles):
    """(..., 33) joint angles -> (..., 16, 6) rotations.

    The first three angles are wrist rotations about x, y, z (applied in
    that order); the rest are (flexion, abduction) pairs for the 15 finger
    joints. Flexion turns about the bone frame's y-axis, abduction about z.
    """
    angles = np.asarray(angles, dtype=np.float64)
    ex, ey, ez = np.eye(3)
    wrist = (
        hand.axis_angle_to_matrix(ez, angles[..., 2])
        @ hand.axis_angle_to_matrix(ey, angles[..., 1])
        @ hand.axis_angle_to_matrix(ex, angles[..., 0])
    )
    fingers = angles[..., 3:].reshape(*angles.shape[:-1], 15, 2)
    rot = hand.axis_angle_to_matrix(ez, fingers[..., 1]) @ hand.axis_angle_to_matrix(
        ey, fingers[..., 0]
    )
    mats = np.concatenate([wrist[..., None, :, :], rot], axis=-3)
    return hand.matrix_to_rot6d(mats)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def angle_trajectory(cfg: SynthConfig, rng):
    """(n, 33) joint angles: smoothstep approach, hold, low-frequency noise."""
    n = int(cfg.n_frames)
    span = ANGLE_HI - ANGLE_LO
    start = random_pose_angles(rng)
    end = random_pose_angles(rng)
    # a grasp mostly closes the fingers: the wrist only drifts around its start orientation
    end[:3] = np.clip(start[:3] + WRIST_DRIFT * rng.standard_normal(3), ANGLE_LO[:3], ANGLE_HI[:3])
    n_hold = int(round(cfg.grasp_hold_fraction * n))
    n_move = n - n_hold
    t = np.arange(n)
    if n_move <= 1:
        progress = np.ones(n)
    else:
        progress = _smoothstep(t / (n_move - 1))
    angles = start + progress[:, None] * (end - start)

    seconds = t / cfg.fps
    freq = rng.uniform(0.2, 1.0, size=(2,) + span.shape)
    phase = rng.uniform(0.0, 2 * np.pi, size=(2,) + span.shape)
    wave = np.sin(2 * np.pi * freq[:, None] * seconds[None, :, None] + phase[:, None]).mean(axis=0)
    angles = angles + cfg.pose_noise_amplitude * wave * (span > 0)
    return np.clip(angles, ANGLE_LO, ANGLE_HI), n_move


# -- rendering -------------------------------------------------------------


def _segment_distance(px, a, b):
    """Distance from pixel centers ``px`` (P, 2) to segments a->b (S, 2)."""
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    ap = px[None, :, :] - a[:, None, :]
    u = np.clip((ap * ab[:, None, :]).sum(-1) / denom[:, None], 0.0, 1.0)
    closest = a[:, None, :] + u[..., None] * ab[:, None, :]
    return np.sqrt(((px[None] - closest) ** 2).sum(-1))


def render_frame(j2d, style: RenderStyle, size=64):
    """Rasterize a 2D skeleton into an (H, W, 3) float32 image in [0, 1].

    Pixel (row r, col c) has its center at image coordinates (x=c, y=r).
    Joints outside the frame simply contribute no pixels.
    """
    h, w = (size, size) if np.isscalar(size) else size
    if min(h, w) < 16:
        raise InvalidConfig("render size must be at least 16")
    j2d = np.asarray(j2d, dtype=np.float64)
    scale = min(h, w) / 64.0
    half_width = BONE_HALF_WIDTH * scale
    sigma = JOINT_SIGMA * scale

    img = np.empty((h, w, 3))
    img[:] = style.background
    # every drawn pixel lies within this margin of a joint or a bone
    margin = max(3 * sigma, half_width + 0.5) + 1
    lo = np.floor(j2d.min(axis=0) - margin).astype(int)
    hi = np.ceil(j2d.max(axis=0) + margin).astype(int)
    c0, r0 = np.maximum(lo, 0)
    c1, r1 = np.minimum(hi + 1, (w, h))
    if c0 < c1 and r0 < r1:
        rows, cols = np.mgrid[r0:r1, c0:c1]
        px = np.stack([cols.ravel(), rows.ravel()], axis=-1).astype(np.float64)
        patch = img[r0:r1, c0:c1].reshape(-1, 3)
        for f, joints in enumerate(hand.FINGERS.values()):
            chain = (0,) + joints
            dist = _segment_distance(px, j2d[list(chain[:-1])], j2d[list(chain[1:])]).min(axis=0)
            alpha = np.clip(half_width + 0.5 - dist, 0.0, 1.0)[:, None]
            patch = patch * (1 - alpha) + FINGER_COLORS[f] * alpha
        d2 = ((px[None] - j2d[:, None, :]) ** 2).sum(-1)
        blob = np.exp(-d2 / (2 * sigma**2))
        blob[d2 > (3 * sigma) ** 2] = 0.0
        alpha = JOINT_ALPHA * blob.max(axis=0)[:, None]
        patch = patch * (1 - alpha) + JOINT_COLOR * alpha
        img[r0:r1, c0:c1] = patch.reshape(r1 - r0, c1 - c0, 3)

    if style.occluder is not None:
        r0, c0, r1, c1 = (int(v) for v in style.occluder[:4])
        img[r0:r1, c0:c1] = style.occluder[4:7]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- sequences -------------------------------------------------------------


def generate_sequence(cfg: SynthConfig, seed: int, tmpl=None, seq_id=None) -> SequenceRecord:
    """Deterministically generate one labeled sequence from ``(cfg, seed)``."""
    cfg.validate()
    tmpl = tmpl or hand.default_template()
    rng = np.random.default_rng(int(seed))
    size = int(cfg.image_size)

    angles, n_move = angle_trajectory(cfg, rng)
    poses = angles_to_pose(angles)
    shape = np.clip(rng.standard_normal(hand.N_BETAS), -3.0, 3.0)
    j3d = hand.forward_kinematics(poses, shape, tmpl)

    s = rng.uniform(230.0, 290.0) * size / 64.0
    xy = j3d[..., :2].reshape(-1, 2)
    middle = (xy.min(axis=0) + xy.max(axis=0)) / 2.0
    t = size / 2.0 - s * middle + rng.uniform(-3.0, 3.0, size=2) * size / 64.0
    cam = np.array([s, t[0], t[1]])
    j2d = hand.project_weak_perspective(j3d, cam)

    palette = np.asarray(cfg.background_palette, dtype=np.float64)
    background = tuple(palette[rng.integers(len(palette))])
    occlude = rng.random() < cfg.occluder_probability
    occ_color = tuple(rng.uniform(0.35, 0.6, size=3))

    frames = np.empty((len(poses), size, size, 3), dtype=np.float32)
    for i in range(len(poses)):
        occluder = None
        if occlude and i >= n_move:
            oh, ow = rng.integers(size // 5, size // 3, size=2)
            r0 = rng.integers(0, size - oh)
            c0 = rng.integers(0, size - ow)
            occluder = (r0, c0, r0 + oh, c0 + ow) + occ_color
        frames[i] = render_frame(j2d[i], RenderStyle(background, occluder), size)

    return SequenceRecord(
        frames=frames,
        poses=poses,
        shape=shape,
        j3d=j3d,
        j2d=j2d,
        cam=cam,
        fps=float(cfg.fps),
        seq_id=seq_id if seq_id is not None else f"seq_{int(seed)}",
        meta={"seed": int(seed), "n_move": int(n_move)},
    )


def generate_sequences(n_sequences, cfg: SynthConfig, seed: int, tmpl=None):
    """In-memory counterpart of :func:`make_dataset` with identical per-sequence seeds."""
    return [
        generate_sequence(cfg, int(seed) + i, tmpl, seq_id=f"seq_{i:05d}")
        for i in range(int(n_sequences))
    ]


# -- containers ------------------------------------------------------------


def write_sequence(path, rec: SequenceRecord):
    n, h, w, _ = rec.frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, n, h, w))
        for arr, dt in (
            (rec.frames, "<f4"),
            (rec.poses, "<f8"),
            (rec.shape, "<f8"),
            (rec.j3d, "<f8"),
            (rec.j2d, "<f8"),
            (rec.cam, "<f8"),
        ):
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_sequence(path, fps, seq_id=""):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, h, w = _HEADER.unpack_from(raw)
    if magic != SEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SEQ_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    layout = [
        ("frames", "<f4", (n, h, w, 3)),
        ("poses", "<f8", (n, hand.N_ROT, 6)),
        ("shape", "<f8", (hand.N_BETAS,)),
        ("j3d", "<f8", (n, hand.N_JOINTS, 3)),
        ("j2d", "<f8", (n, hand.N_JOINTS, 2)),
        ("cam", "<f8", (3,)),
    ]
    offset = _HEADER.size
    out = {}
    for name, dt, shape in layout:
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dt).itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated {name} block")
        out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    out["frames"] = out["frames"].astype(np.float32)
    for k in ("poses", "shape", "j3d", "j2d", "cam"):
        out[k] = out[k].astype(np.float64)
    return SequenceRecord(fps=float(fps), seq_id=seq_id, **out)


@dataclass
class Dataset:
    """A loaded dataset directory: sequences plus the rig they were generated with."""

    sequences: list
    template: hand.KinematicTemplate
    fps: float
    image_size: int
    name: str = ""

    def __len__(self):
        return len(self.sequences)


def make_dataset(out_dir, n_sequences, cfg: SynthConfig, seed: int, tmpl=None):
    """Write ``n_sequences`` sequences plus ``manifest.json`` into ``out_dir``."""
    cfg.validate()
    if n_sequences < 0:
        raise InvalidConfig("n_sequences must be non-negative")
    tmpl = tmpl or hand.default_template()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(int(n_sequences)):
        seq_id = f"seq_{i:05d}"
        rec = generate_sequence(cfg, int(seed) + i, tmpl, seq_id=seq_id)
        fname = f"{seq_id}.tcsq"
        write_sequence(out / fname, rec)
        entries.append({"seq_id": seq_id, "file": fname, "n_frames": len(rec), "seed": int(seed) + i})
    manifest = {
        "format": "handtcl-dataset",
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "n_sequences": int(n_sequences),
        "fps": float(cfg.fps),
        "image_size": [int(cfg.image_size), int(cfg.image_size)],
        "config": cfg.to_dict(),
        "template": tmpl.to_dict(),
        "sequences": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no manifest.json") from None
    if manifest.get("format") != "handtcl-dataset":
        raise FormatError(f"{path}: not a dataset manifest")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest.get('version')}")
    fps = manifest["fps"]
    seqs = [read_sequence(path / e["file"], fps, e["seq_id"]) for e in manifest["sequences"]]
    return Dataset(
        sequences=seqs,
        template=hand.KinematicTemplate.from_dict(manifest["template"]),
        fps=float(fps),
        image_size=int(manifest["image_size"][0]),
        name=path.name,
    )
