"""Temporal windows and probabilistic positive/negative frame sampling.

Positives are drawn from the window of ``k`` frames on either side of the
anchor with a probability that decays with temporal distance; negatives are
drawn from the rest of the same sequence with a probability that grows with
distance. Draws are without replacement and use exponential race keys
(``key = Exp(1) / weight``, smallest keys win), which is distributionally
identical to drawing one item at a time and renormalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCandidates, InvalidConfig, InvalidStrategy, OutOfRange, SequenceTooShort

KINDS = ("linear", "exponential", "tanh", "uniform")
MAX_ANCHOR_RETRIES = 100


@dataclass(frozen=True)
class SamplingStrategy:
    """Distance profile for pair sampling.

    ``uniform`` is not a probabilistic strategy: it weights every window frame
    and every outside frame equally and backs the no-probabilistic-sampling
    ablation. ``sigma`` defaults to ``k / 2`` when left as ``None``.
    """

    kind: str = "linear"
    sigma: float | None = None

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise InvalidStrategy(f"unknown sampling strategy {self.kind!r}")
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidStrategy("sigma must be positive")
        object.__setattr__(self, "kind", kind)

    def scale(self, k):
        return self.sigma if self.sigma is not None else k / 2.0


@dataclass(frozen=True)
class TemporalWindow:
    anchor: int
    radius: int
    indices: np.ndarray

    def __contains__(self, j):
        return bool(np.any(self.indices == j))


@dataclass
class PairSample:
    seq_id: str
    anchor: int
    positives: list
    negatives: list
    dataset: int = 0
    sequence: int = 0

    @property
    def frames(self):
        """Anchor, positives, negatives: the order frames are encoded in."""
        return [self.anchor, *self.positives, *self.negatives]


@dataclass
class BatchSpec:
    M: int = 32
    n_pos: int = 2
    n_neg: int = 8
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)
    radius: int = 15

    def __post_init__(self):
        if self.M < 1 or self.n_pos < 1:
            raise InvalidConfig("M and n_pos must be at least 1")
        # n_neg = 0 is allowed for positive-only draws; training configs require >= 1
        if self.n_neg < 0:
            raise InvalidConfig("n_neg must be non-negative")
        if self.radius < 1:
            raise InvalidConfig("radius must be at least 1")
        if isinstance(self.strategy, str):
            self.strategy = SamplingStrategy(self.strategy)


def default_radius(fps):
    """Window radius of about half the frame rate, at least one frame."""
    if not fps > 0:
        raise InvalidConfig("fps must be positive")
    return max(1, int(math.floor(fps / 2.0 + 0.5)))


def temporal_window(i, k, n):
    if k < 1:
        raise OutOfRange(f"radius must be >= 1, got {k}")
    if not 0 <= i < n:
        raise OutOfRange(f"anchor {i} outside [0, {n})")
    idx = np.concatenate([np.arange(max(0, i - k), i), np.arange(i + 1, min(n, i + k + 1))])
    return TemporalWindow(anchor=int(i), radius=int(k), indices=idx)


def _positive_profile(strategy: SamplingStrategy, k, d):
    d = np.asarray(d, dtype=np.float64)
    sigma = strategy.scale(k)
    if strategy.kind == "linear":
        return k + 1.0 - d
    if strategy.kind == "exponential":
        return np.exp(-(d - 1.0) / sigma)
    if strategy.kind == "tanh":
        return 1.0 - np.abs(np.tanh((d - 1.0) / sigma))
    return np.ones_like(d)


def _negative_profile(strategy: SamplingStrategy, k, d):
    d = np.asarray(d, dtype=np.float64)
    sigma = strategy.scale(k)
    if strategy.kind == "linear":
        return d - k
    if strategy.kind == "exponential":
        return -np.expm1(-(d - k) / sigma)
    if strategy.kind == "tanh":
        return np.abs(np.tanh((d - k) / sigma))
    return np.ones_like(d)


def positive_weights(strategy, k):
    """Probabilities over signed distances ``-k..-1, 1..k``.

    Returns ``(distances, probs)``.
    """
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy)
    if k < 1:
        raise OutOfRange("k must be >= 1")
    d = np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])
    w = _positive_profile(strategy, k, np.abs(d))
    return d, w / w.sum()


def negative_weights(strategy, k, distances):
    """Probabilities over candidate distances (each > k), one entry per candidate."""
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy)
    d = np.abs(np.asarray(distances, dtype=np.float64))
    if d.size == 0:
        raise EmptyCandidates("no frame lies outside the temporal window")
    if np.any(d <= k):
        raise OutOfRange("negative candidates must lie beyond the window radius")
    w = _negative_profile(strategy, k, d)
    return w / w.sum()


def _weight_rows(n, anchors, k, strategy):
    """Unnormalized positive and negative weights, shape (len(anchors), n)."""
    dist = np.abs(np.arange(n)[None, :] - np.asarray(anchors)[:, None])
    inside = (dist >= 1) & (dist <= k)
    outside = dist > k
    wpos = np.where(inside, _positive_profile(strategy, k, np.clip(dist, 1, k)), 0.0)
    wneg = np.where(outside, _negative_profile(strategy, k, np.maximum(dist, k + 1)), 0.0)
    return wpos, wneg


def _race(weights, count, rng):
    """Indices of ``count`` weighted draws without replacement, in draw order."""
    with np.errstate(divide="ignore"):
        keys = rng.standard_exponential(weights.shape) / weights
    if count == 0:
        return np.zeros((len(weights), 0), dtype=np.int64)
    if count == 1:
        return np.argmin(keys, axis=1)[:, None]
    part = np.argpartition(keys, count - 1, axis=1)[:, :count]
    order = np.argsort(np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def sample_pair_indices(n, anchors, spec: BatchSpec, rng):
    """Vectorized draws for many anchors of one sequence length.

    Returns ``(positives, negatives)`` integer arrays of shape
    ``(len(anchors), n_pos)`` and ``(len(anchors), n_neg)``.
    """
    k = spec.radius
    anchors = np.asarray(anchors, dtype=np.int64)
    if np.any(anchors < 0) or np.any(anchors >= n):
        raise OutOfRange("anchor outside the sequence")
    if n < 2 * k + spec.n_neg + 1:
        raise SequenceTooShort(f"need n >= 2k + n_neg + 1 = {2 * k + spec.n_neg + 1}, got {n}")
    window_sizes = np.minimum(anchors, k) + np.minimum(n - 1 - anchors, k)
    if np.any(window_sizes < spec.n_pos):
        raise SequenceTooShort("temporal window holds fewer frames than n_pos")
    wpos, wneg = _weight_rows(n, anchors, k, spec.strategy)
    pos = _race(wpos, spec.n_pos, rng)
    neg = _race(wneg, spec.n_neg, rng)
    return pos, neg


def sample_pairs(n, i, spec: BatchSpec, rng, seq_id="") -> PairSample:
    pos, neg = sample_pair_indices(n, [i], spec, rng)
    return PairSample(seq_id=seq_id, anchor=int(i), positives=pos[0].tolist(), negatives=neg[0].tolist())


def _lengths(dataset):
    return [len(s) for s in getattr(dataset, "sequences", dataset)]


def _seq_ids(dataset):
    seqs = getattr(dataset, "sequences", dataset)
    return [getattr(s, "seq_id", str(j)) for j, s in enumerate(seqs)]


def split_counts(M, n_datasets, offset):
    """Anchors per dataset: equal split, remainder handed out round-robin from ``offset``."""
    base, rem = divmod(M, n_datasets)
    counts = [base] * n_datasets
    for r in range(rem):
        counts[(offset + r) % n_datasets] += 1
    return counts


def build_batch(datasets, spec: BatchSpec, rng):
    """Draw ``spec.M`` anchors split evenly over ``datasets`` and sample their pairs.

    ``datasets`` is a list whose items are datasets (anything with a
    ``sequences`` list) or plain lists of sequences. Each anchor gets its own
    child generator, so the batch does not depend on evaluation order.
    """
    if len(datasets) == 0:
        raise InvalidConfig("no datasets given")
    lengths = [_lengths(d) for d in datasets]
    if any(len(ls) == 0 for ls in lengths):
        raise InvalidConfig("every dataset needs at least one sequence")
    counts = split_counts(spec.M, len(datasets), int(rng.integers(len(datasets))))
    children = rng.spawn(spec.M)
    batch = []
    slot = 0
    for d, count in enumerate(counts):
        ids = _seq_ids(datasets[d])
        for _ in range(count):
            child = children[slot]
            slot += 1
            for _attempt in range(MAX_ANCHOR_RETRIES):
                s = int(child.integers(len(lengths[d])))
                n = lengths[d][s]
                i = int(child.integers(n))
                try:
                    sample = sample_pairs(n, i, spec, child, seq_id=ids[s])
                except SequenceTooShort:
                    continue
                sample.dataset, sample.sequence = d, s
                batch.append(sample)
                break
            else:
                raise SequenceTooShort(
                    f"no valid anchor found in dataset {d} after {MAX_ANCHOR_RETRIES} attempts"
                )
    return batch


def audit_distribution(strategy, k, n=None, n_draws=10**6, rng=None, chunk=100_000):
    """Analytic vs empirical single-draw distributions at an interior anchor.

    Returns a dict with ``distance`` (signed), ``analytic_p`` and
    ``empirical_p`` arrays; rows with ``|distance| <= k`` describe the
    positive distribution and the rest the negative one. Each half sums to 1.
    """
    if isinstance(strategy, str):
        strategy = SamplingStrategy(strategy)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = n if n is not None else 4 * k + 2
    i = n // 2
    spec = BatchSpec(M=1, n_pos=1, n_neg=1, strategy=strategy, radius=k)

    pos_d, pos_p = positive_weights(strategy, k)
    cand = np.array([j - i for j in range(n) if abs(j - i) > k])
    neg_p = negative_weights(strategy, k, cand)

    pos_counts = np.zeros(len(pos_d))
    neg_counts = np.zeros(len(cand))
    pos_lookup = {int(d): r for r, d in enumerate(pos_d)}
    neg_lookup = {int(d): r for r, d in enumerate(cand)}
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        p, q = sample_pair_indices(n, np.full(m, i), spec, rng)
        for d, c in zip(*np.unique(p[:, 0] - i, return_counts=True)):
            pos_counts[pos_lookup[int(d)]] += c
        for d, c in zip(*np.unique(q[:, 0] - i, return_counts=True)):
            neg_counts[neg_lookup[int(d)]] += c
        done += m
    return {
        "distance": np.concatenate([pos_d, cand]),
        "analytic_p": np.concatenate([pos_p, neg_p]),
        "empirical_p": np.concatenate([pos_counts, neg_counts]) / n_draws,
        "n_positive_rows": len(pos_d),
        "n_draws": n_draws,
    }
