import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sglp.errors import DataError
from sglp.segmentation import (
    Segmentation,
    brute_force_segment,
    count_segmentations,
    diameter,
    diameter_table,
    fisher_segment,
    row_sums,
    segmentation_from_json,
    segmentation_to_json,
)


def rng_for(seed):
    return np.random.Generator(np.random.Philox(seed))


class TestRowSums:
    def test_identity(self):
        assert np.array_equal(row_sums(np.eye(5)), np.ones(5))

    def test_all_ones(self):
        assert np.array_equal(row_sums(np.ones((3, 3))), np.full(3, 3.0))

    def test_matches_reversed_iteration_oracle(self):
        m = rng_for(0).uniform(0, 1, size=(4, 4))
        m = (m + m.T) / 2
        sums = row_sums(m)
        for i in range(4):
            reverse_sum = 0.0
            for j in range(3, -1, -1):
                reverse_sum += m[i, j]
            assert abs(sums[i] - reverse_sum) <= 1e-12

    def test_non_square_rejected(self):
        with pytest.raises(DataError, match="square"):
            row_sums(np.zeros((2, 3)))


class TestDiameter:
    def test_singleton_is_zero(self):
        a = rng_for(1).standard_normal(6)
        assert diameter(a, 2, 2) == 0.0

    def test_two_clusters(self):
        a = np.array([0.0, 0.0, 10.0, 10.0])
        assert diameter(a, 0, 3) == pytest.approx(100.0, abs=1e-12)
        assert diameter(a, 0, 1) == 0.0
        assert diameter(a, 2, 3) == 0.0

    def test_reversed_bounds_rejected(self):
        with pytest.raises(DataError, match="invalid segment"):
            diameter(np.arange(5.0), 3, 2)


class TestDiameterTable:
    def test_diagonal_zero(self):
        table = diameter_table(rng_for(2).standard_normal(8))
        assert all(table.d(r, r) == 0.0 for r in range(8))

    def test_matches_direct_evaluation(self):
        a = rng_for(3).standard_normal(10)
        table = diameter_table(a)
        for r in range(10):
            for s in range(r, 10):
                assert abs(table.d(r, s) - diameter(a, r, s)) <= 1e-9

    def test_two_cluster_values(self):
        table = diameter_table(np.array([0.0, 0.0, 10.0, 10.0]))
        assert table.d(0, 3) == pytest.approx(100.0, abs=1e-9)
        assert table.d(0, 1) == 0.0
        assert table.d(2, 3) == 0.0

    def test_growth_law_holds_exactly(self):
        for seed in range(10):
            a = rng_for(seed + 10).uniform(0, 20, size=12)
            t = diameter_table(a).values
            for r in range(12):
                for s in range(r + 1, 12):
                    assert t[r, s] >= t[r + 1, s]
                    assert t[r, s] >= t[r, s - 1]
                    assert t[r, s] >= 0.0


class TestFisherSegment:
    def test_perfectly_separated_clusters(self):
        seg = fisher_segment(np.array([0.0, 0.0, 10.0, 10.0]), 2)
        assert seg.split_starts == (0, 2)
        assert seg.loss == 0.0

    def test_k_equals_length_gives_singletons(self):
        a = rng_for(4).standard_normal(6)
        seg = fisher_segment(a, 6)
        assert seg.split_starts == tuple(range(6))
        assert seg.loss == 0.0

    def test_k_one_whole_range(self):
        a = rng_for(5).standard_normal(7)
        seg = fisher_segment(a, 1)
        assert seg.split_starts == (0,)
        assert seg.loss == pytest.approx(diameter(a, 0, 6), abs=1e-9)

    def test_invalid_k_rejected(self):
        a = np.arange(4.0)
        with pytest.raises(DataError, match="out of range"):
            fisher_segment(a, 0)
        with pytest.raises(DataError, match="out of range"):
            fisher_segment(a, 5)

    def test_tie_breaks_to_lexicographically_smallest(self):
        # [0],[0],[10,10] and [0,0],[10],[10] both cost 0; first starts win
        seg = fisher_segment(np.array([0.0, 0.0, 10.0, 10.0]), 3)
        assert seg.split_starts == (0, 1, 2)

    def test_matches_brute_force_exactly(self):
        rng = rng_for(6)
        for _ in range(200):
            length = int(rng.integers(2, 11))
            k = int(rng.integers(1, min(length, 5) + 1))
            a = rng.standard_normal(length) * float(rng.uniform(0.5, 5.0))
            dp = fisher_segment(a, k)
            bf = brute_force_segment(a, k)
            assert dp.split_starts == bf.split_starts
            assert dp.loss == bf.loss

    def test_loss_monotone_in_k(self):
        a = rng_for(7).standard_normal(9)
        losses = [fisher_segment(a, k).loss for k in range(1, 10)]
        for worse, better in zip(losses, losses[1:]):
            assert better <= worse + 1e-12

    def test_shift_scale_equivariance_of_splits(self):
        rng = rng_for(8)
        for _ in range(50):
            a = rng.standard_normal(8)
            k = int(rng.integers(2, 5))
            base = fisher_segment(a, k)
            for alpha, beta in ((2.0, 5.0), (-1.5, 0.0), (0.25, -3.0)):
                moved = fisher_segment(alpha * a + beta, k)
                assert moved.split_starts == base.split_starts
                assert moved.loss == pytest.approx(alpha**2 * base.loss, rel=1e-9, abs=1e-12)

    def test_recomputed_loss_matches(self):
        a = rng_for(9).standard_normal(10)
        seg = fisher_segment(a, 4)
        recomputed = sum(diameter(a, start, stop) for start, stop in seg.bounds())
        assert abs(recomputed - seg.loss) <= 1e-9

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.integers(min_value=2, max_value=9),
    )
    def test_dp_equals_brute_force_property(self, seed, length):
        a = rng_for(seed).standard_normal(length)
        for k in range(1, length + 1):
            dp = fisher_segment(a, k)
            bf = brute_force_segment(a, k)
            assert dp.split_starts == bf.split_starts
            assert dp.loss == bf.loss


class TestBruteForce:
    def test_enumeration_count(self):
        # L=5, k=3 has C(4, 2) = 6 candidate segmentations
        assert count_segmentations(5, 3) == 6

    def test_k_one(self):
        a = rng_for(10).standard_normal(5)
        seg = brute_force_segment(a, 1)
        assert seg.split_starts == (0,)
        assert seg.loss == pytest.approx(diameter(a, 0, 4), abs=1e-12)

    def test_guard(self):
        a = np.arange(60.0)
        with pytest.raises(DataError, match="fisher_segment"):
            brute_force_segment(a, 30)


class TestCounting:
    def test_examples(self):
        assert count_segmentations(5, 3) == 6
        assert count_segmentations(9, 1) == 1
        assert count_segmentations(9, 9) == 1

    def test_total_over_k(self):
        for length in range(2, 11):
            assert sum(count_segmentations(length, k) for k in range(1, length + 1)) == 2 ** (
                length - 1
            )

    def test_matches_comb(self):
        for length in range(1, 12):
            for k in range(1, length + 1):
                assert count_segmentations(length, k) == math.comb(length - 1, k - 1)

    def test_overflow_guard(self):
        # C(67, 33) = 14226520737620288370 > 2^63 - 1
        with pytest.raises(DataError, match="64-bit"):
            count_segmentations(68, 34)

    def test_invalid_k(self):
        with pytest.raises(DataError):
            count_segmentations(5, 0)
        with pytest.raises(DataError):
            count_segmentations(5, 6)


class TestSegmentationDocument:
    def test_round_trip_with_one_based_starts(self):
        a = rng_for(11).standard_normal(8)
        seg = fisher_segment(a, 3, layer_names=tuple(f"u{i}" for i in range(8)))
        text = segmentation_to_json(seg)
        assert '"split_starts"' in text
        doc_starts = [s + 1 for s in seg.split_starts]
        assert str(doc_starts).replace(" ", "") in text.replace(" ", "").replace("\n", "")
        back = segmentation_from_json(text)
        assert back == seg

    def test_k_mismatch_rejected(self):
        seg = Segmentation((0, 2), 4, 0.0)
        text = segmentation_to_json(seg).replace('"k": 2', '"k": 3')
        with pytest.raises(DataError, match="disagrees"):
            segmentation_from_json(text)

    def test_invalid_document(self):
        with pytest.raises(DataError, match="invalid segmentation"):
            segmentation_from_json("not json at all")

    def test_bounds_and_sizes(self):
        seg = Segmentation((0, 3, 5), 8, 0.0)
        assert seg.bounds() == ((0, 2), (3, 4), (5, 7))
        assert seg.sizes() == (3, 2, 3)
        assert seg.segment_of(0) == 0
        assert seg.segment_of(4) == 1
        assert seg.segment_of(7) == 2
