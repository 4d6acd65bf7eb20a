import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from avspeaker.metrics import (MetricError, TrialScore, calinski_harabasz, cosine_score, davies_bouldin,
                               distance_distributions, eer, histogram_rows, read_scores, silhouette,
                               write_histogram, write_scores)
from avspeaker.nn import DegenerateInputError


def brute_force_eer(labels, scores):
    """Try a threshold below, between and above every pair of sorted scores."""
    labels = list(labels)
    scores = list(scores)
    uniq = sorted(set(scores))
    cands = [uniq[0] - 1.0] + [(lo + hi) / 2 for lo, hi in zip(uniq, uniq[1:])] + [uniq[-1] + 1.0]
    n_t = sum(1 for l in labels if l == 1)
    n_n = len(labels) - n_t
    best = None
    for t in cands:
        fn = sum(1 for l, s in zip(labels, scores) if l == 1 and s < t)
        fp = sum(1 for l, s in zip(labels, scores) if l == 0 and s >= t)
        fnr, fpr = fn / n_t, fp / n_n
        if best is None or abs(fpr - fnr) < best[0]:
            best = (abs(fpr - fnr), (fpr + fnr) / 2)
    return best[1]


def mixed_scores(rng, n, separation):
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.standard_normal(n) + separation * labels
    return labels, scores


class TestCosine:
    def test_cases(self):
        e = np.array([0.6, 0.8])
        assert cosine_score(e, e) == 1.0
        assert cosine_score([1, 0], [0, 1]) == 0.0
        assert cosine_score([1, 0], [-1, 0]) == -1.0

    def test_zero(self):
        with pytest.raises(DegenerateInputError):
            cosine_score([0, 0], [1, 0])


class TestEer:
    def test_perfect(self):
        assert eer([TrialScore(1, 0.9), TrialScore(1, 0.8), TrialScore(0, 0.2), TrialScore(0, 0.1)])[0] == 0.0

    def test_reversed(self):
        assert eer([TrialScore(1, 0.1), TrialScore(0, 0.9)])[0] == 1.0

    def test_one_third(self):
        labels = [1, 1, 1, 0, 0, 0]
        scores = [0.9, 0.8, 0.4, 0.6, 0.2, 0.1]
        value, _ = eer((labels, scores))
        assert value == pytest.approx(1 / 3, abs=1e-15)

    def test_single_class(self):
        with pytest.raises(MetricError):
            eer((np.ones(3), np.arange(3.0)))

    def test_non_finite(self):
        with pytest.raises(MetricError):
            eer(([0, 1], [0.0, np.nan]))

    @pytest.mark.parametrize("separation", [0.0, 1.0, 3.0])
    def test_brute_force_oracle(self, separation):
        labels, scores = mixed_scores(np.random.default_rng(int(separation * 10)), 600, separation)
        assert eer((labels, scores))[0] == brute_force_eer(labels, scores)

    def test_ties_in_scores(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, 200)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 7, 200).astype(float)
        assert eer((labels, scores))[0] == brute_force_eer(labels, scores)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), sep=st.floats(-2, 4))
    def test_monotone_invariance(self, seed, sep):
        labels, scores = mixed_scores(np.random.default_rng(seed), 80, sep)
        base = eer((labels, scores))[0]
        assert eer((labels, np.exp(scores)))[0] == base
        assert eer((labels, 3.0 * scores - 7.0))[0] == base

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(2, 60))
    def test_in_unit_interval(self, seed, n):
        labels, scores = mixed_scores(np.random.default_rng(seed), n, 1.0)
        value, _ = eer((labels, scores))
        assert 0.0 <= value <= 1.0


class TestDistances:
    def test_identical(self):
        d = distance_distributions([np.ones((3, 2)), np.zeros((2, 2))], 0)
        assert d.intraclass.tolist() == [0.0, 0.0, 0.0]
        np.testing.assert_allclose(d.interclass, [np.sqrt(2)])

    def test_nested_loop_oracle(self):
        rng = np.random.default_rng(0)
        groups = [rng.standard_normal((k, 4)) for k in (5, 3, 4)]
        d = distance_distributions(groups, 1)
        ref = groups[1]
        intra = [np.linalg.norm(ref[i] - ref[j]) for i in range(3) for j in range(i + 1, 3)]
        np.testing.assert_allclose(d.intraclass, intra)
        c = [g.mean(0) for g in groups]
        np.testing.assert_allclose(d.interclass, [np.linalg.norm(c[1] - c[0]), np.linalg.norm(c[1] - c[2])])

    def test_too_few(self):
        with pytest.raises(MetricError):
            distance_distributions([np.ones((1, 2)), np.ones((2, 2))], 0)


FOUR_X = np.array([0.0, 2.0, 10.0, 12.0])
FOUR_Y = np.array([0, 0, 1, 1])


class TestClusterIndices:
    def test_hand_values(self):
        assert abs(calinski_harabasz(FOUR_X, FOUR_Y) - 50.0) < 1e-9
        assert abs(davies_bouldin(FOUR_X, FOUR_Y) - 0.2) < 1e-9
        assert abs(silhouette(FOUR_X, FOUR_Y) - 79 / 99) < 1e-9

    def test_coincident_clusters(self):
        x = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]])
        y = [0, 0, 1, 1]
        assert silhouette(x, y) == 1.0
        assert davies_bouldin(x, y) == 0.0
        with pytest.raises(MetricError):
            calinski_harabasz(x, y)

    def test_all_coincident(self):
        x = np.zeros((4, 2))
        assert silhouette(x, [0, 0, 1, 1]) == 0.0
        with pytest.raises(MetricError):
            davies_bouldin(x, [0, 0, 1, 1])

    def test_one_cluster(self):
        with pytest.raises(MetricError):
            silhouette(FOUR_X, [0, 0, 0, 0])

    def test_singleton_scores_zero(self):
        x = np.array([0.0, 1.0, 10.0])
        # the singleton contributes 0; the pair scores (10 - 1)/10 and (9 - 1)/9
        assert silhouette(x, [0, 0, 1]) == pytest.approx((9 / 10 + 8 / 9) / 3, abs=1e-12)

    def test_per_point_oracle(self):
        rng = np.random.default_rng(1)
        x = np.concatenate([rng.standard_normal((10, 3)), rng.standard_normal((10, 3)) + 2])
        y = np.repeat([0, 1], 10)
        s = []
        for i in range(20):
            d = np.linalg.norm(x - x[i], axis=1)
            same = (y == y[i]) & (np.arange(20) != i)
            a = d[same].mean()
            b = d[y != y[i]].mean()
            s.append((b - a) / max(a, b))
        assert silhouette(x, y) == pytest.approx(np.mean(s), abs=1e-12)

    def test_sklearn_agreement(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((60, 5)) + np.repeat(rng.standard_normal((4, 5)) * 3, 15, axis=0)
        y = np.repeat(np.arange(4), 15)
        assert silhouette(x, y) == pytest.approx(skm.silhouette_score(x, y), abs=1e-10)
        assert calinski_harabasz(x, y) == pytest.approx(skm.calinski_harabasz_score(x, y), rel=1e-10)
        assert davies_bouldin(x, y) == pytest.approx(skm.davies_bouldin_score(x, y), rel=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((15, 3)) + np.repeat(np.eye(3) * 4, 5, axis=0)
        y = np.repeat([0, 1, 2], 5)
        perm = rng.permutation(15)
        relabel = rng.permutation(3)
        for fn in (silhouette, calinski_harabasz, davies_bouldin):
            base = fn(x, y)
            assert fn(x[perm], y[perm]) == pytest.approx(base, rel=1e-10)
            assert fn(x, relabel[y]) == pytest.approx(base, rel=1e-10)
        assert -1 <= silhouette(x, y) <= 1
        assert calinski_harabasz(x, y) >= 0 and davies_bouldin(x, y) >= 0


class TestFiles:
    def test_scores_round_trip(self, tmp_path):
        write_scores(tmp_path / "s.csv", [1, 0], [0.5, -0.25])
        assert (tmp_path / "s.csv").read_text().splitlines()[0] == "label,score"
        assert read_scores(tmp_path / "s.csv") == [TrialScore(1, 0.5), TrialScore(0, -0.25)]

    def test_histogram(self, tmp_path):
        d = distance_distributions([np.array([[0.0], [0.5], [1.0]]), np.array([[1.9], [1.9]])], 0)
        rows = histogram_rows(d)
        assert len(rows) == 100
        assert sum(r[2] for r in rows) == 3 and sum(r[3] for r in rows) == 1
        write_histogram(tmp_path / "h.csv", d)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "bin_left,bin_right,intraclass_count,interclass_count"
        assert len(lines) == 101
        left, right, _, _ = (float(v) for v in lines[1].split(","))
        assert left == 0.0 and right == pytest.approx(0.02)
