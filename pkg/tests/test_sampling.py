from collections import Counter

import numpy as np
import pytest
from scipy import stats

from handtcl.errors import EmptyCandidates, InvalidStrategy, OutOfRange, SequenceTooShort
from handtcl.sampling import (
    BatchSpec,
    SamplingStrategy,
    audit_distribution,
    build_batch,
    default_radius,
    negative_weights,
    positive_weights,
    sample_pair_indices,
    sample_pairs,
    split_counts,
    temporal_window,
)

STRATEGIES = ("linear", "exponential", "tanh")


class FakeSeq:
    def __init__(self, n, seq_id):
        self.n, self.seq_id = n, seq_id

    def __len__(self):
        return self.n


def test_temporal_window_examples():
    assert set(temporal_window(5, 2, 100).indices) == {3, 4, 6, 7}
    assert set(temporal_window(0, 2, 100).indices) == {1, 2}
    brute = {j for j in range(100) if 0 < abs(j - 99) <= 15}
    assert set(temporal_window(99, 15, 100).indices) == brute == set(range(84, 99))


def test_temporal_window_errors():
    with pytest.raises(OutOfRange):
        temporal_window(100, 2, 100)
    with pytest.raises(OutOfRange):
        temporal_window(3, 0, 100)


def test_positive_weights_examples():
    d, p = positive_weights("linear", 2)
    assert list(d) == [-2, -1, 1, 2]
    assert np.allclose(p, np.array([1, 2, 2, 1]) / 6, atol=1e-15)
    for s in STRATEGIES:
        assert np.allclose(positive_weights(s, 1)[1], [0.5, 0.5])


def test_negative_weights_examples():
    assert np.allclose(negative_weights("linear", 2, [3, 4, 5]), np.array([1, 2, 3]) / 6, atol=1e-15)
    for s in STRATEGIES:
        assert negative_weights(s, 4, [9]).tolist() == [1.0]
    with pytest.raises(EmptyCandidates):
        negative_weights("linear", 2, [])
    with pytest.raises(OutOfRange):
        negative_weights("linear", 2, [2, 3])


def test_exp_and_tanh_profiles():
    k, sigma = 6, 3.0
    d, p = positive_weights(SamplingStrategy("exponential", sigma), k)
    f = np.exp(-(np.abs(d) - 1) / sigma)
    assert np.allclose(p, f / f.sum())
    d, p = positive_weights(SamplingStrategy("tanh", sigma), k)
    f = 1 - np.abs(np.tanh((np.abs(d) - 1) / sigma))
    assert np.allclose(p, f / f.sum())
    cand = np.arange(k + 1, 30)
    g = np.abs(np.tanh((cand - k) / sigma))
    assert np.allclose(negative_weights(SamplingStrategy("tanh", sigma), k, cand), g / g.sum())
    g = 1 - np.exp(-(cand - k) / sigma)
    assert np.allclose(negative_weights(SamplingStrategy("exponential", sigma), k, cand), g / g.sum())


@pytest.mark.parametrize("kind", STRATEGIES)
def test_weight_monotonicity_scan(kind):
    for k in range(1, 51):
        d, p = positive_weights(kind, k)
        right = p[d > 0]
        assert np.all(p > 0) and abs(p.sum() - 1) < 1e-12
        assert np.allclose(p[d < 0][::-1], right)
        assert np.all(np.diff(right) <= 1e-15)
        q = negative_weights(kind, k, np.arange(k + 1, k + 60))
        assert np.all(np.diff(q) >= -1e-15)


def test_default_sigma_is_half_radius():
    assert SamplingStrategy("tanh").scale(10) == 5.0
    assert SamplingStrategy("tanh", 2.0).scale(10) == 2.0
    with pytest.raises(InvalidStrategy):
        SamplingStrategy("gaussian")
    with pytest.raises(InvalidStrategy):
        SamplingStrategy("tanh", -1.0)


def test_default_radius():
    assert default_radius(30) == 15
    assert default_radius(10) == 5
    assert default_radius(1) == 1


def test_exhaustion_example():
    spec = BatchSpec(M=1, n_pos=2, n_neg=0, radius=1)
    s = sample_pairs(3, 1, spec, np.random.default_rng(0))
    assert sorted(s.positives) == [0, 2] and s.negatives == []


def test_pair_invariants_property_scan():
    rng = np.random.default_rng(1)
    spec = BatchSpec(M=1, n_pos=2, n_neg=8, radius=5)
    n = 40
    anchors = rng.integers(0, n, 100_000)
    pos, neg = sample_pair_indices(n, anchors, spec, rng)
    dp = np.abs(pos - anchors[:, None])
    dn = np.abs(neg - anchors[:, None])
    assert np.all((dp >= 1) & (dp <= 5))
    assert np.all(dn > 5)
    assert np.all((pos >= 0) & (pos < n)) and np.all((neg >= 0) & (neg < n))
    assert np.all(pos[:, 0] != pos[:, 1])
    srt = np.sort(neg, axis=1)
    assert np.all(np.diff(srt, axis=1) > 0)


def test_sequence_too_short():
    with pytest.raises(SequenceTooShort):
        sample_pairs(20, 10, BatchSpec(n_neg=8, radius=6), np.random.default_rng(0))


def test_positive_histogram_chi_square_n200():
    k = 15
    spec = BatchSpec(M=1, n_pos=1, n_neg=1, strategy="linear", radius=k)
    rng = np.random.default_rng(2)
    counts = Counter()
    for _ in range(10):
        pos, _ = sample_pair_indices(200, np.full(100_000, 100), spec, rng)
        counts.update((pos[:, 0] - 100).tolist())
    d, p = positive_weights("linear", k)
    observed = np.array([counts[int(x)] for x in d])
    assert observed.sum() == 10**6
    assert stats.chisquare(observed, p * 10**6).pvalue > 0.01


def test_linear_k2_monte_carlo_tv():
    out = audit_distribution("linear", 2, n_draws=10**6, rng=np.random.default_rng(3))
    npos = out["n_positive_rows"]
    assert np.abs(out["empirical_p"][:npos] - out["analytic_p"][:npos]).sum() / 2 < 0.005
    assert np.abs(out["empirical_p"][npos:] - out["analytic_p"][npos:]).sum() / 2 < 0.005


def test_build_batch_split_and_determinism():
    a = [FakeSeq(60, f"a{i}") for i in range(3)]
    b = [FakeSeq(60, f"b{i}") for i in range(5)]
    spec = BatchSpec(M=10, radius=5)
    batch = build_batch([a, b], spec, np.random.default_rng(4))
    assert Counter(s.dataset for s in batch) == {0: 5, 1: 5}
    again = build_batch([a, b], spec, np.random.default_rng(4))
    assert [(s.seq_id, s.anchor, s.positives, s.negatives) for s in batch] == [
        (s.seq_id, s.anchor, s.positives, s.negatives) for s in again
    ]
    one = build_batch([a], BatchSpec(M=4, radius=5), np.random.default_rng(5))
    assert len(one) == 4 and all(s.dataset == 0 for s in one)


def test_build_batch_remainder_round_robin():
    a, b = [FakeSeq(60, "a")], [FakeSeq(60, "b")]
    rng = np.random.default_rng(6)
    splits = Counter()
    for _ in range(200):
        c = Counter(s.dataset for s in build_batch([a, b], BatchSpec(M=11, radius=5), rng))
        assert abs(c[0] - c[1]) == 1
        splits[(c[0], c[1])] += 1
    assert set(splits) == {(6, 5), (5, 6)}
    assert split_counts(11, 2, 1) == [5, 6]


def test_build_batch_retries_then_fails():
    spec = BatchSpec(M=2, radius=5, n_neg=8)
    with pytest.raises(SequenceTooShort):
        build_batch([[FakeSeq(12, "x")]], spec, np.random.default_rng(7))
