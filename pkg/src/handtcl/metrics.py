"""Alignment solvers and reconstruction metrics.

All distances are computed in meters and reported in millimeters.
Acceleration errors are reported in mm/s^2.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, ShapeMismatch, TooShort
from .hand import ROOT, default_template, forward_kinematics, virtual_vertices

MM = 1000.0
F_THRESHOLDS_MM = (5.0, 15.0)


class AlignmentMode(str, Enum):
    NONE = "none"
    ROOT = "ra"
    SCALE_TRANSLATION = "sta"
    PROCRUSTES = "pa"


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def epe(pred, gt):
    """Mean Euclidean distance over points, in mm."""
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * MM)


def v2v(pred, gt):
    """Mean vertex-to-vertex distance in mm; same kernel as :func:`epe` on vertex sets."""
    return epe(pred, gt)


def align_root(pred, gt, root=ROOT):
    pred, gt = _pair(pred, gt)
    return pred + (gt[..., root : root + 1, :] - pred[..., root : root + 1, :])


def align_scale_translation(pred, gt):
    """Least-squares ``s * pred + t`` fit to ``gt`` with ``s >= 0``.

    A negative scale would be a point reflection, which the Procrustes
    solver excludes; clamping keeps this class inside the Procrustes one.
    """
    pred, gt = _pair(pred, gt)
    pc = pred - pred.mean(axis=0)
    gc = gt - gt.mean(axis=0)
    denom = (pc * pc).sum()
    if denom <= 1e-24:
        raise DegenerateCloud("all predicted points coincide")
    s = max((pc * gc).sum() / denom, 0.0)
    return s * pc + gt.mean(axis=0)


def procrustes_transform(pred, gt):
    """Similarity ``(s, R, t)`` minimizing ``|s R pred + t - gt|``; no reflections."""
    pred, gt = _pair(pred, gt)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    pc, gc = pred - mu_p, gt - mu_g
    if np.linalg.matrix_rank(pc, tol=1e-12) < 2:
        raise DegenerateCloud("prediction spans fewer than two dimensions")
    cov = gc.T @ pc
    u, sing, vt = np.linalg.svd(cov)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag(d) @ vt
    s = (sing * d).sum() / (pc * pc).sum()
    t = mu_g - s * rot @ mu_p
    return s, rot, t


def align_procrustes(pred, gt):
    s, rot, t = procrustes_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ rot.T + t


ALIGNERS = {
    AlignmentMode.NONE: lambda p, g: np.asarray(p, dtype=np.float64),
    AlignmentMode.ROOT: align_root,
    AlignmentMode.SCALE_TRANSLATION: align_scale_translation,
    AlignmentMode.PROCRUSTES: align_procrustes,
}


def aligned_epe(pred, gt, mode):
    return epe(ALIGNERS[AlignmentMode(mode)](pred, gt), gt)


def fscore(pred, gt, threshold_mm):
    """Harmonic mean of precision and recall at a distance threshold (mm)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    thr = threshold_mm / MM
    d_pg = cKDTree(gt).query(pred)[0]
    d_gp = cKDTree(pred).query(gt)[0]
    precision = float((d_pg <= thr).mean())
    recall = float((d_gp <= thr).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def accel_error(pred, gt, fps):
    """Mean norm of the difference of second differences, in mm/s^2."""
    pred, gt = _pair(pred, gt)
    if len(pred) < 3:
        raise TooShort("acceleration needs at least three frames")
    acc_p = (pred[2:] - 2 * pred[1:-1] + pred[:-2]) * fps**2
    acc_g = (gt[2:] - 2 * gt[1:-1] + gt[:-2]) * fps**2
    return float(np.linalg.norm(acc_p - acc_g, axis=-1).mean() * MM)


# -- reports ---------------------------------------------------------------


@dataclass
class MetricsReport:
    """Aggregates plus per-sequence values with the same key schema."""

    aggregate: dict = field(default_factory=dict)
    per_sequence: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {"aggregate": self.aggregate, "per_sequence": self.per_sequence, "counts": self.counts}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def flat(self):
        """Aggregate as ``{"pa.epe": value, ...}``."""
        return {f"{mode}.{name}": v for mode, metrics in self.aggregate.items() for name, v in metrics.items()}

    def to_csv(self, path):
        rows = self.flat()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for k in sorted(rows):
                w.writerow([k, repr(rows[k])])


def sequence_metrics(pred_j3d, gt_j3d, fps, thresholds=F_THRESHOLDS_MM):
    """Every metric under every alignment mode for one (n, 21, 3) trajectory pair.

    Returns ``{mode: {metric: value}}``. Per-frame values are averaged over
    the sequence; the acceleration error is computed once per sequence on
    the aligned trajectory.
    """
    pred_j3d = np.asarray(pred_j3d, dtype=np.float64)
    gt_j3d = np.asarray(gt_j3d, dtype=np.float64)
    gt_v = virtual_vertices(gt_j3d)
    out = {}
    for mode in AlignmentMode:
        align = ALIGNERS[mode]
        joints = np.stack([align(p, g) for p, g in zip(pred_j3d, gt_j3d)])
        verts = np.stack([align(p, g) for p, g in zip(virtual_vertices(pred_j3d), gt_v)])
        m = {
            "epe": float(np.mean([epe(p, g) for p, g in zip(joints, gt_j3d)])),
            "v2v": float(np.mean([v2v(p, g) for p, g in zip(verts, gt_v)])),
        }
        for thr in thresholds:
            m[f"f@{thr:g}"] = float(np.mean([fscore(p, g, thr) for p, g in zip(verts, gt_v)]))
        if len(joints) >= 3:
            m["accel"] = accel_error(joints, gt_j3d, fps)
        out[mode.value] = m
    return out


def _mean_of(dicts):
    keys = dicts[0].keys()
    return {
        mode: {name: float(np.mean([d[mode][name] for d in dicts if name in d[mode]])) for name in keys_m}
        for mode, keys_m in ((m, dicts[0][m].keys()) for m in keys)
    }


def evaluate_predictions(sequences, pred_j3d_list):
    """Metrics for precomputed predictions, one (n, 21, 3) array per sequence."""
    per_seq = {}
    for seq, pred in zip(sequences, pred_j3d_list):
        per_seq[seq.seq_id] = sequence_metrics(pred, seq.j3d, seq.fps)
    if not per_seq:
        return MetricsReport(counts={"sequences": 0, "frames": 0})
    aggregate = _mean_of([per_seq[k] for k in per_seq])
    return MetricsReport(
        aggregate=aggregate,
        per_sequence=per_seq,
        counts={"sequences": len(per_seq), "frames": int(sum(len(s) for s in sequences))},
    )


def evaluate(model, sequences, tmpl=None):
    """Run ``model`` on every frame and compute the full metric report.

    ``model`` is either :class:`~handtcl.nn.model.ModelParams` or any callable
    mapping ``(frames, sequence)`` to an ``(n, 21, 3)`` joint array.
    Per-sequence means are averaged over sequences.
    """
    from .nn.model import ModelParams, predict

    tmpl = tmpl or default_template()
    preds = []
    for seq in sequences:
        if isinstance(model, ModelParams):
            pose, shape, _ = predict(model, seq.frames)
            preds.append(forward_kinematics(pose.astype(np.float64), shape.astype(np.float64), tmpl))
        else:
            preds.append(np.asarray(model(seq.frames, seq), dtype=np.float64))
    return evaluate_predictions(sequences, preds)


def identity_model(frames, seq):
    """Test hook: predicts the ground truth exactly."""
    return seq.j3d


def embedding_coherence(params, sequences, k, batch=256):
    """Mean cosine similarity of in-window pairs minus that of out-of-window pairs.

    Pairs are all ordered frame pairs of the same sequence; in-window means
    ``1 <= |i - j| <= k``.
    """
    from .nn.autograd import no_grad
    from .nn.model import encode

    inside, outside = [], []
    for seq in sequences:
        with no_grad():
            z = np.concatenate([encode(params, seq.frames[i : i + batch]).data for i in range(0, len(seq), batch)])
        z = z.astype(np.float64)
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        sim = z @ z.T
        dist = np.abs(np.arange(len(z))[:, None] - np.arange(len(z))[None, :])
        inside.append(sim[(dist >= 1) & (dist <= k)])
        outside.append(sim[dist > k])
    mean_in = float(np.concatenate(inside).mean())
    mean_out = float(np.concatenate(outside).mean())
    return {"in_window": mean_in, "out_of_window": mean_out, "margin": mean_in - mean_out}
