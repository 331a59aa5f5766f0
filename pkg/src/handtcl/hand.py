"""Kinematic hand model, 6D rotations and the weak-perspective camera.

The hand is a 21-joint tree (wrist, then four joints per finger from thumb
to pinky) with a linear shape basis on the rest joint positions. Sixteen
joints carry rotations: the wrist, which rotates the whole hand about the
root, and the three proximal joints of each finger. A finger joint's local
rotation is expressed in a frame whose x-axis is the rest-pose direction of
the bone leaving that joint.

Every function here accepts numpy arrays or :class:`~handtcl.nn.autograd.Tensor`
objects. Numpy in gives numpy out; tensors in give tensors out, with the
graph recorded for backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidCamera, NotARotation, ShapeMismatch
from .nn.autograd import Tensor, cross, ensure_tensor, stack

N_JOINTS = 21
N_ROT = 16
N_BETAS = 10
ROOT = 0

PARENT = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])
# wrist + the three proximal joints of each finger; tips carry no rotation
ARTICULATED = np.array([0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19])
FINGERS = {
    "thumb": (1, 2, 3, 4),
    "index": (5, 6, 7, 8),
    "middle": (9, 10, 11, 12),
    "ring": (13, 14, 15, 16),
    "pinky": (17, 18, 19, 20),
}
BONES = np.array([(PARENT[j], j) for j in range(1, N_JOINTS)])

_NORM_EPS = 1e-8
_ANGLE_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class KinematicTemplate:
    rest_joints: np.ndarray  # (21, 3) meters
    parent: np.ndarray = field(default_factory=lambda: PARENT.copy())
    shape_dirs: np.ndarray = None  # (21, 3, 10) meters per unit coefficient
    articulated: np.ndarray = field(default_factory=lambda: ARTICULATED.copy())

    def __post_init__(self):
        rest = np.asarray(self.rest_joints, dtype=np.float64)
        if rest.shape != (N_JOINTS, 3):
            raise ShapeMismatch(f"rest_joints must be (21, 3), got {rest.shape}")
        parent = np.asarray(self.parent, dtype=np.int64)
        if parent[0] != -1 or any(parent[i] >= i or parent[i] < 0 for i in range(1, N_JOINTS)):
            raise ShapeMismatch("parent must be a topologically ordered tree rooted at joint 0")
        dirs = self.shape_dirs
        dirs = np.zeros((N_JOINTS, 3, N_BETAS)) if dirs is None else np.asarray(dirs, np.float64)
        if dirs.shape != (N_JOINTS, 3, N_BETAS):
            raise ShapeMismatch(f"shape_dirs must be (21, 3, 10), got {dirs.shape}")
        articulated = np.asarray(self.articulated, dtype=np.int64)
        if articulated.shape != (N_ROT,):
            raise ShapeMismatch("exactly 16 articulated joints are required")
        object.__setattr__(self, "rest_joints", rest)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "shape_dirs", dirs)
        object.__setattr__(self, "articulated", articulated)
        object.__setattr__(self, "_frames", _bone_frames(rest, parent, articulated))

    @property
    def bone_frames(self):
        """(16, 3, 3) rest frames of the articulated joints; identity for the wrist."""
        return self._frames

    def shaped_rest(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        return self.rest_joints + self.shape_dirs @ beta

    def to_dict(self):
        return {
            "rest_joints": self.rest_joints.tolist(),
            "parent": self.parent.tolist(),
            "shape_dirs": self.shape_dirs.tolist(),
            "articulated": self.articulated.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rest_joints=np.array(d["rest_joints"], dtype=np.float64),
            parent=np.array(d["parent"], dtype=np.int64),
            shape_dirs=np.array(d["shape_dirs"], dtype=np.float64),
            articulated=np.array(d["articulated"], dtype=np.int64),
        )


def _bone_frames(rest, parent, articulated):
    children = {int(p): j for j, p in reversed(list(enumerate(parent))) if p >= 0}
    frames = np.tile(np.eye(3), (len(articulated), 1, 1))
    normal = np.array([0.0, 0.0, 1.0])
    for slot, j in enumerate(articulated):
        if j == ROOT:
            continue
        x = rest[children[int(j)]] - rest[j]
        x = x / np.linalg.norm(x)
        y = np.cross(normal, x)
        y = y / np.linalg.norm(y)
        frames[slot] = np.stack([x, y, np.cross(x, y)], axis=1)
    return frames


def default_template():
    """The built-in right-hand rig: hand in the xy-plane, fingers along +y."""
    rest = np.zeros((N_JOINTS, 3))
    layout = {
        # base position, direction in xy, bone lengths
        "thumb": ((0.022, 0.018), (0.62, 0.78), (0.038, 0.032, 0.026)),
        "index": ((0.024, 0.088), (0.12, 0.99), (0.040, 0.024, 0.021)),
        "middle": ((0.002, 0.092), (0.0, 1.0), (0.044, 0.027, 0.022)),
        "ring": ((-0.019, 0.086), (-0.10, 0.99), (0.041, 0.026, 0.021)),
        "pinky": ((-0.036, 0.076), (-0.22, 0.97), (0.031, 0.020, 0.018)),
    }
    for name, (base, direction, lengths) in layout.items():
        joints = FINGERS[name]
        d = np.array([direction[0], direction[1], 0.0])
        d /= np.linalg.norm(d)
        rest[joints[0], :2] = base
        for a, b, length in zip(joints[:-1], joints[1:], lengths):
            rest[b] = rest[a] + length * d
    # a slight arch so the hand is not perfectly planar
    rest[:, 2] = -0.004 * np.sin(np.pi * rest[:, 0] / 0.08)

    dirs = np.zeros((N_JOINTS, 3, N_BETAS))
    dirs[:, :, 0] = 0.06 * (rest - rest[ROOT])  # overall size
    for name, joints in FINGERS.items():
        for depth, j in enumerate(joints):
            base = rest[joints[0]]
            dirs[j, :, 1] = 0.08 * (rest[j] - base) * (depth > 0)  # finger length
            dirs[j, 0, 2] = 0.05 * rest[joints[0], 0]  # palm width
            dirs[j, 1, 3] = 0.004 * depth * (name in ("index", "middle"))
            dirs[j, 1, 4] = 0.004 * depth * (name in ("ring", "pinky"))
            dirs[j, :2, 5] = 0.003 * depth * np.array([0.5, 1.0]) * (name == "thumb")
    rng = np.random.default_rng(20221010)
    dirs[:, :, 6:] = 0.0015 * rng.standard_normal((N_JOINTS, 3, N_BETAS - 6))
    dirs[ROOT] = 0.0
    return KinematicTemplate(rest_joints=rest, shape_dirs=dirs)


# -- rotations -------------------------------------------------------------


def _check_rot6d(r):
    r = np.asarray(r, dtype=np.float64)
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(n1 <= _NORM_EPS) or np.any(n2 <= _NORM_EPS):
        raise DegenerateInput("6D rotation half-vector has (near) zero norm")
    sin = np.linalg.norm(np.cross(a1, a2), axis=-1) / (n1 * n2)
    if np.any(sin < np.sin(_ANGLE_EPS)):
        raise DegenerateInput("6D rotation half-vectors are parallel")


def _normalize(v):
    return v / (v * v).sum(axis=-1, keepdims=True).sqrt()


def rot6d_to_matrix(r):
    """Map ``(..., 6)`` 6D rotations to ``(..., 3, 3)`` matrices by Gram-Schmidt."""
    as_numpy = not isinstance(r, Tensor)
    r = ensure_tensor(r)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r.shape}")
    _check_rot6d(r.data)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = _normalize(a1)
    b2 = _normalize(a2 - (b1 * a2).sum(axis=-1, keepdims=True) * b1)
    b3 = cross(b1, b2)
    m = stack([b1, b2, b3], axis=-1)
    return m.data if as_numpy else m


def matrix_to_rot6d(m, tol=1e-5):
    """First two columns of a rotation matrix, concatenated."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {m.shape}")
    eye = np.eye(3)
    gram = np.swapaxes(m, -1, -2) @ m
    if np.any(np.abs(gram - eye) > tol) or np.any(np.linalg.det(m) < 0):
        raise NotARotation("matrix is not a proper rotation")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis, angle):
    """Rodrigues formula; numpy only, used by the generator and tests."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)[..., None, None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], -2
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


# -- kinematics ------------------------------------------------------------


def forward_kinematics(pose, shape, tmpl: KinematicTemplate):
    """Joint positions for ``pose`` (..., 16, 6) and ``shape`` (..., 10).

    Returns ``(..., 21, 3)`` joints in meters. Shaped rest joints are posed
    by composing parent-to-child rigid transforms in topological order.
    """
    as_numpy = not (isinstance(pose, Tensor) or isinstance(shape, Tensor))
    pose, shape = ensure_tensor(pose), ensure_tensor(shape)
    if pose.shape[-2:] != (N_ROT, 6):
        raise ShapeMismatch(f"pose must end in (16, 6), got {pose.shape}")
    if shape.shape[-1] != N_BETAS:
        raise ShapeMismatch(f"shape must end in 10, got {shape.shape}")
    dtype = np.result_type(pose.dtype, shape.dtype)

    basis = Tensor(tmpl.shape_dirs.reshape(N_JOINTS * 3, N_BETAS).T.astype(dtype))
    beta = shape.reshape(-1, N_BETAS)
    rest = (beta @ basis).reshape(beta.shape[0], N_JOINTS, 3) + tmpl.rest_joints.astype(dtype)
    rest = rest.reshape(*shape.shape[:-1], N_JOINTS, 3)
    batch = np.broadcast_shapes(pose.shape[:-2], shape.shape[:-1])
    if rest.shape[:-2] != batch:
        rest = rest + np.zeros(batch + (N_JOINTS, 3), dtype=dtype)

    # transforms are carried as deviations from the identity (R - I), so the
    # identity pose leaves every rest joint bit-exact
    frames = tmpl.bone_frames.astype(dtype)
    eye = np.eye(3, dtype=dtype)
    dlocal = Tensor(frames) @ (rot6d_to_matrix(pose) - eye) @ Tensor(np.swapaxes(frames, -1, -2))

    slot = {int(j): s for s, j in enumerate(tmpl.articulated)}
    parent = tmpl.parent
    offsets = rest - rest[..., parent.clip(0), :]  # row 0 unused

    dglob = {ROOT: dlocal[..., slot[ROOT], :, :]}
    shift = {ROOT: None}
    pos = [rest[..., ROOT, :]]
    for j in range(1, N_JOINTS):
        p = int(parent[j])
        d = dglob[p]
        step = (d @ offsets[..., j, :, None])[..., 0]
        shift[j] = step if shift[p] is None else shift[p] + step
        pos.append(rest[..., j, :] + shift[j])
        if j in slot:
            dl = dlocal[..., slot[j], :, :]
            dglob[j] = d + dl + d @ dl
        else:
            dglob[j] = d
    out = stack(pos, axis=-2)
    return out.data if as_numpy else out


def virtual_vertices(joints):
    """Joints plus bone midpoints: ``(..., 41, 3)`` points standing in for a mesh."""
    joints = np.asarray(joints)
    mids = 0.5 * (joints[..., BONES[:, 0], :] + joints[..., BONES[:, 1], :])
    return np.concatenate([joints, mids], axis=-2)


# -- camera ----------------------------------------------------------------


@dataclass(frozen=True)
class CameraWeakPerspective:
    s: float
    t: tuple

    def __post_init__(self):
        if not self.s > 0:
            raise InvalidCamera(f"camera scale must be positive, got {self.s}")

    def as_array(self):
        return np.array([self.s, self.t[0], self.t[1]], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), (float(a[1]), float(a[2])))


def project_weak_perspective(j3d, cam):
    """Scaled orthographic projection ``(s*x + tx, s*y + ty)``.

    ``cam`` is a :class:`CameraWeakPerspective` or an array/tensor whose last
    axis holds ``(s, tx, ty)``.
    """
    if isinstance(cam, CameraWeakPerspective):
        cam = cam.as_array()
    as_numpy = not (isinstance(j3d, Tensor) or isinstance(cam, Tensor))
    j3d, cam = ensure_tensor(j3d), ensure_tensor(cam)
    if cam.shape[-1] != 3:
        raise ShapeMismatch("camera must have trailing dimension 3 (s, tx, ty)")
    if np.any(cam.data[..., 0] <= 0):
        raise InvalidCamera("camera scale must be positive")
    s = cam[..., None, 0:1]
    t = cam[..., None, 1:3]
    out = j3d[..., 0:2] * s + t
    return out.data if as_numpy else out
