import numpy as np
import pytest

from reidlab import ContractError, ShapeError
from reidlab.checks import retrieval_brute_force
from reidlab.evaluate import (
    CORR_HIST_HEADER, CORRELATION_HEADER, METRICS_HEADER,
    cmc_topk, correlation_report, mean_ap, rank_gallery, write_metrics_csv,
)
from reidlab.tensor import Tensor


class TestRankGallery:
    def test_query_present_in_gallery(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(5, 3))
        r = rank_gallery(g[2:3], g, [7], [1, 2, 7, 3, 4])
        assert r.order[0][0] == 2
        assert r.distances[0][0] == 0.0
        assert r.matches[0][0]

    def test_one_dimensional_hand_sort(self):
        r = rank_gallery(np.array([[0.0]]), np.array([[3.0], [1.0], [2.0]]),
                         [0], [0, 0, 0])
        np.testing.assert_array_equal(r.order[0], [1, 2, 0])

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(3, 4))
        g = rng.normal(size=(10, 4))
        glab = rng.integers(0, 3, size=10)
        perm = rng.permutation(10)
        base = rank_gallery(q, g, [0, 1, 2], glab)
        shuffled = rank_gallery(q, g[perm], [0, 1, 2], glab[perm])
        for i in range(3):
            np.testing.assert_array_equal(glab[base.order[i]],
                                          glab[perm][shuffled.order[i]])

    def test_tie_break_by_gallery_index(self):
        g = np.array([[1.0], [1.0], [1.0]])
        r = rank_gallery(np.array([[0.0]]), g, [0], [0, 0, 0])
        np.testing.assert_array_equal(r.order[0], [0, 1, 2])

    def test_camera_exclusion(self):
        q = np.array([[0.0]])
        g = np.array([[0.0], [0.1], [0.2]])
        r = rank_gallery(q, g, [5], [5, 5, 6],
                         query_cams=[1], gallery_cams=[1, 2, 1])
        # the same-id same-camera entry (index 0) is dropped
        np.testing.assert_array_equal(r.order[0], [1, 2])
        np.testing.assert_array_equal(r.matches[0], [True, False])

    def test_distance_axioms_on_computed_matrix(self):
        rng = np.random.default_rng(2)
        e = rng.normal(size=(4, 3))
        r = rank_gallery(e, e, np.arange(4), np.arange(4))
        for i in range(4):
            self_pos = list(r.order[i]).index(i)
            assert r.distances[i][self_pos] == 0.0
        # symmetry: d(i,j) read from query i equals d(j,i) from query j
        d01 = r.distances[0][list(r.order[0]).index(1)]
        d10 = r.distances[1][list(r.order[1]).index(0)]
        assert d01 == d10

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            rank_gallery(np.ones((1, 3)), np.ones((2, 4)), [0], [0, 1])

    def test_unmatched_query_counted(self):
        r = rank_gallery(np.array([[0.0], [5.0]]), np.array([[0.1], [4.9]]),
                         [1, 9], [1, 1])
        assert r.num_unmatched == 1
        assert cmc_topk(r, 1) == 1.0  # only the matched query counts


class TestCmcTopk:
    def _ranking(self, first_match_ranks, gallery=6):
        order, matches, dists = [], [], []
        for fr in first_match_ranks:
            flags = np.zeros(gallery, dtype=bool)
            flags[fr - 1] = True
            order.append(np.arange(gallery))
            matches.append(flags)
            dists.append(np.linspace(0, 1, gallery))
        from reidlab.evaluate import RankingResult
        return RankingResult(order, matches, dists, 0)

    def test_perfect_retrieval(self):
        assert cmc_topk(self._ranking([1, 1, 1]), 1) == 1.0

    def test_hand_case(self):
        r = self._ranking([1, 3])
        assert cmc_topk(r, 1) == 0.5
        assert cmc_topk(r, 3) == 1.0

    def test_top_infinity(self):
        assert cmc_topk(self._ranking([2, 5, 4]), 10 ** 9) == 1.0

    def test_monotone_in_k(self):
        r = self._ranking([1, 2, 4, 6])
        values = [cmc_topk(r, k) for k in range(1, 7)]
        assert values == sorted(values)


class TestMeanAp:
    def test_all_matches_first(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(4, 2))
        r = rank_gallery(q, q + 1e-9, np.arange(4), np.arange(4))
        assert mean_ap(r) == 1.0

    def test_single_match_rank_two(self):
        g = np.array([[0.1], [0.3]])
        r = rank_gallery(np.array([[0.0]]), g, [7], [0, 7])
        assert mean_ap(r) == 0.5

    def test_matches_at_one_and_three(self):
        g = np.array([[0.1], [0.2], [0.3]])
        r = rank_gallery(np.array([[0.0]]), g, [7], [7, 0, 7])
        assert abs(mean_ap(r) - 5.0 / 6.0) < 1e-15

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            nq = int(rng.integers(1, 21))
            ng = int(rng.integers(2, 51))
            dim = int(rng.integers(1, 6))
            num_ids = int(rng.integers(1, 6))
            q = rng.normal(size=(nq, dim))
            g = rng.normal(size=(ng, dim))
            qlab = rng.integers(0, num_ids, size=nq)
            glab = rng.integers(0, num_ids, size=ng)
            if not any(l in glab for l in qlab):
                continue
            r = rank_gallery(q, g, qlab, glab)
            cmc_oracle, map_oracle = retrieval_brute_force(q, g, qlab, glab, ks=(1, 5))
            assert cmc_topk(r, 1) == cmc_oracle[1]
            assert cmc_topk(r, 5) == cmc_oracle[5]
            assert abs(mean_ap(r) - map_oracle) < 1e-12


class TestCorrelationReport:
    def test_proportional_channels(self):
        base = np.array([1.0, 2.0, 5.0, -3.0])
        rep = correlation_report(np.stack([base, 2.0 * base]).reshape(2, 2, 2))
        assert abs(rep.matrix[0, 1] - 1.0) < 1e-12
        assert abs(rep.mean_offdiag - 1.0) < 1e-12

    def test_anticorrelated_absolute_value(self):
        rep = correlation_report(np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]))
        assert abs(rep.matrix[0, 1] - 1.0) < 1e-12

    def test_independent_channels_low_mean(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(6, 10_000))
        rep = correlation_report(f)
        assert rep.mean_offdiag < 0.05

    def test_affine_rescale_invariance(self):
        rng = np.random.default_rng(6)
        f = rng.normal(size=(4, 50))
        scales = rng.uniform(0.5, 3.0, size=4)
        shifts = rng.normal(size=4)
        rep_a = correlation_report(f)
        rep_b = correlation_report(f * scales[:, None] + shifts[:, None])
        np.testing.assert_allclose(rep_a.matrix, rep_b.matrix, atol=1e-9)

    def test_constant_channel_flagged(self):
        f = np.vstack([np.ones(8), np.random.default_rng(7).normal(size=(2, 8))])
        rep = correlation_report(f)
        assert rep.flagged_channels == 1
        np.testing.assert_array_equal(rep.matrix[0], 0.0)
        np.testing.assert_array_equal(rep.matrix[:, 0], 0.0)

    def test_diagonal_and_symmetry(self):
        rng = np.random.default_rng(8)
        rep = correlation_report(Tensor(rng.normal(size=(5, 3, 4))))
        np.testing.assert_array_equal(np.diag(rep.matrix), 1.0)
        np.testing.assert_array_equal(rep.matrix, rep.matrix.T)

    def test_histogram_covers_upper_triangle(self):
        rng = np.random.default_rng(9)
        rep = correlation_report(rng.normal(size=(6, 40)))
        assert rep.histogram.sum() == 6 * 5 // 2
        assert len(rep.bin_edges) == 51

    def test_requires_spatial_samples(self):
        with pytest.raises(ContractError):
            correlation_report(np.ones((3, 1)))

    def test_rejects_bad_rank(self):
        with pytest.raises(ShapeError):
            correlation_report(np.ones(5))


class TestCsvWriters:
    def test_metrics_schema(self, tmp_path):
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [("abc123", "full", 0, 1.0, 1.0, 0.987654321)])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        assert lines[1].startswith("abc123,full,0,1.0000000000,1.0000000000,0.9876543210")

    def test_headers_documented(self):
        assert CORRELATION_HEADER[:2] == ["variant", "activation"]
        assert CORR_HIST_HEADER[-1] == "count"
