"""Contrastive and supervised losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyBatch, InvalidConfig, ShapeMismatch, ZeroVector
from ..hand import forward_kinematics, project_weak_perspective
from .autograd import Tensor, concat, ensure_tensor, logsumexp

_ZERO_NORM = 1e-12


@dataclass
class FineTuneLossWeights:
    lambda_2d: float = 0.01
    lambda_3d: float = 10.0
    lambda_theta: float = 1.0

    def __post_init__(self):
        w = (self.lambda_2d, self.lambda_3d, self.lambda_theta)
        if min(w) < 0 or max(w) == 0:
            raise InvalidConfig("loss weights must be non-negative and not all zero")


def _unit(z):
    norm = (z * z).sum(axis=-1, keepdims=True).sqrt()
    if np.any(norm.data <= _ZERO_NORM):
        raise ZeroVector("cosine similarity of a zero vector")
    return z / norm


def cosine_sim(u, v):
    """``u.v / (|u| |v|)`` along the last axis."""
    as_numpy = not (isinstance(u, Tensor) or isinstance(v, Tensor))
    u, v = ensure_tensor(u), ensure_tensor(v)
    out = (_unit(u) * _unit(v)).sum(axis=-1)
    return out.data if as_numpy else out


def _per_anchor(z_anchor, z_pos, z_neg, tau, positive_in_denominator):
    """Per-anchor losses for batched inputs (M, E), (M, P, E), (M, N, E)."""
    if not tau > 0:
        raise InvalidConfig("temperature must be positive")
    if z_pos.shape[1] < 1 or z_neg.shape[1] < 1:
        raise EmptyBatch("need at least one positive and one negative")
    a = _unit(z_anchor).reshape(z_anchor.shape[0], 1, z_anchor.shape[1])
    sp = (a * _unit(z_pos)).sum(axis=-1) * (1.0 / tau)  # (M, P)
    sn = (a * _unit(z_neg)).sum(axis=-1) * (1.0 / tau)  # (M, N)
    if not positive_in_denominator:
        # -sum_j [s_ij - lse_k s_ik]
        return -sp.sum(axis=1) + logsumexp(sn, axis=1) * float(sp.shape[1])
    m, p = sp.shape
    n = sn.shape[1]
    # denominator of term j: exp(s_ij) + sum_k exp(s_ik)
    spn = concat(
        [sp.reshape(m, p, 1), (sn.reshape(m, 1, n) + Tensor(np.zeros((1, p, 1), sn.dtype)))], axis=2
    )
    return -(sp - logsumexp(spn, axis=2)).sum(axis=1)


def ntxent_loss(z_anchor, z_positives, z_negatives, tau=0.5, positive_in_denominator=False):
    """Loss of one anchor: ``-sum_j log(exp(s_ij/tau) / sum_k exp(s_ik/tau))``.

    The denominator runs over negatives only unless
    ``positive_in_denominator`` is set.
    """
    za, zp, zn = ensure_tensor(z_anchor), ensure_tensor(z_positives), ensure_tensor(z_negatives)
    if za.ndim != 1 or zp.ndim != 2 or zn.ndim != 2:
        raise ShapeMismatch("expected anchor (E,), positives (P, E), negatives (N, E)")
    loss = _per_anchor(
        za.reshape(1, za.shape[0]),
        zp.reshape(1, *zp.shape),
        zn.reshape(1, *zn.shape),
        tau,
        positive_in_denominator,
    )
    return loss.reshape(())


def batch_contrastive_loss(z_anchor, z_pos, z_neg, tau=0.5, positive_in_denominator=False):
    """Mean of per-anchor losses over the batch (M, E), (M, P, E), (M, N, E)."""
    za, zp, zn = ensure_tensor(z_anchor), ensure_tensor(z_pos), ensure_tensor(z_neg)
    if za.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if za.ndim != 2 or zp.ndim != 3 or zn.ndim != 3:
        raise ShapeMismatch("expected anchors (M, E), positives (M, P, E), negatives (M, N, E)")
    return _per_anchor(za, zp, zn, tau, positive_in_denominator).mean()


def finetune_loss(pred, gt, weights: FineTuneLossWeights, tmpl):
    """Weighted 2D reprojection, 3D joint and parameter losses.

    ``pred`` is ``(pose, shape, cam)``; ``gt`` maps ``j2d``, ``j3d``,
    ``poses`` and ``shape`` to arrays with matching leading dimensions. The
    L1 terms are mean absolute errors over coordinates and the parameter
    term is the mean squared error over the 106 pose and shape values.
    Returns ``(total, parts)`` where ``parts`` holds the unweighted terms.
    """
    pose, shape, cam = (ensure_tensor(x) for x in pred)
    j3d_hat = forward_kinematics(pose, shape, tmpl)
    j2d_hat = project_weak_perspective(j3d_hat, cam)
    dtype = pose.dtype
    l2d = (j2d_hat - np.asarray(gt["j2d"], dtype)).abs().mean()
    l3d = (j3d_hat - np.asarray(gt["j3d"], dtype)).abs().mean()
    lead = pose.shape[:-2]
    theta_hat = concat([pose.reshape(*lead, -1), shape], axis=-1)
    theta = np.concatenate(
        [np.asarray(gt["poses"], dtype).reshape(*lead, -1), np.broadcast_to(gt["shape"], shape.shape)],
        axis=-1,
    )
    ltheta = ((theta_hat - theta) ** 2).mean()
    total = l2d * weights.lambda_2d + l3d * weights.lambda_3d + ltheta * weights.lambda_theta
    return total, {"l2d": float(l2d.data), "l3d": float(l3d.data), "ltheta": float(ltheta.data)}
