from __future__ import annotations

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import mp_icc
from tumorburden.agreement import (
    RatingsFormatError,
    RatingsMatrix,
    SpearmanUndefinedError,
    aggregate_ratings,
    bland_altman,
    f_survival,
    icc_2_1,
    read_ratings_csv,
    spearman,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(2, 5)), elements=finite)


def pearson_of_ranks(x, y):
    """Average ranks by explicit tie grouping, then the textbook Pearson formula."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        out = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for m in range(i, j + 1):
                out[order[m]] = (i + j) / 2 + 1
            i = j + 1
        return out

    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = (sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry)) ** 0.5
    return num / den


class TestIcc:
    def test_perfect_agreement(self):
        x = np.repeat(np.array([[1.0], [5.0], [2.0], [9.0]]), 3, axis=1)
        r = icc_2_1(RatingsMatrix.from_array(x))
        assert r.icc == 1.0 and not r.degenerate

    def test_constant_offset(self):
        base = np.array([12.0, 30.0, 18.5, 44.0, 27.0, 9.0])
        x = np.column_stack([base, base + 4.0])
        r = icc_2_1(RatingsMatrix.from_array(x))
        icc, f, p = mp_icc(x)
        assert r.icc < 1.0
        assert r.icc == pytest.approx(float(icc), abs=1e-12)

    def test_random_5_by_3(self, rng):
        x = rng.normal(50.0, 10.0, size=(5, 3))
        r = icc_2_1(RatingsMatrix.from_array(x))
        icc, f, p = mp_icc(x)
        assert r.icc == pytest.approx(float(icc), abs=1e-9)
        assert (r.df1, r.df2) == (4, 8)
        assert r.f_statistic == pytest.approx(float(f), rel=1e-9)
        assert r.p_value == pytest.approx(float(p), rel=1e-8)

    def test_degenerate(self):
        r = icc_2_1(RatingsMatrix.from_array(np.full((4, 3), 7.0)))
        assert r.icc == 1.0 and r.degenerate

    def test_zero_denominator_is_undefined(self):
        r = icc_2_1(RatingsMatrix.from_array([[1.0, 0.0], [0.0, 1.0]]))
        assert r.undefined and np.isnan(r.icc)

    def test_too_small(self):
        with pytest.raises(ValueError):
            icc_2_1(RatingsMatrix.from_array(np.ones((1, 3))))

    def test_missing_rejected(self):
        with pytest.raises(ValueError):
            RatingsMatrix.from_array(np.array([[1.0, np.nan], [2.0, 3.0]]))

    @settings(max_examples=60, deadline=None)
    @given(matrices, st.floats(-100, 100), st.floats(0.01, 100))
    def test_shift_and_scale_invariance(self, x, shift, scale):
        assume(np.ptp(x) > 1e-3)
        base = icc_2_1(RatingsMatrix.from_array(x))
        assume(base.mse > 1e-6 * max(base.msr, base.msc, 1e-300))
        moved = icc_2_1(RatingsMatrix.from_array(scale * x + shift))
        assert moved.icc == pytest.approx(base.icc, abs=1e-7)

    @settings(max_examples=60, deadline=None)
    @given(matrices)
    def test_matches_oracle(self, x):
        assume(np.ptp(x) > 1e-3)
        r = icc_2_1(RatingsMatrix.from_array(x))
        assume(not r.undefined)
        icc, f, p = mp_icc(x)
        assume(float(f) < 1e12)
        assert r.icc == pytest.approx(float(icc), abs=1e-9, rel=1e-9)


class TestFSurvival:
    @pytest.mark.parametrize("f,d1,d2", [(0.5, 3, 6), (2.0, 4, 8), (11.7, 9, 54), (150.0, 2, 2), (1.0, 1, 1)])
    def test_against_mpmath(self, f, d1, d2):
        with mpmath.workdps(40):
            expected = mpmath.betainc(mpmath.mpf(d2) / 2, mpmath.mpf(d1) / 2, 0, mpmath.mpf(d2) / (d2 + d1 * f),
                                      regularized=True)
        assert f_survival(f, d1, d2) == pytest.approx(float(expected), rel=1e-10)

    def test_limits(self):
        assert f_survival(float("inf"), 3, 6) == 0.0
        assert f_survival(0.0, 3, 6) == 1.0


class TestSpearman:
    def test_monotone(self):
        x = np.array([0.3, 1.0, 2.5, 7.0, 8.0])
        assert spearman(x, np.log(x)) == 1.0
        assert spearman(x, -x) == -1.0

    def test_one_tie_pair(self):
        x = [1.0, 2.0, 2.0, 5.0, 3.0, 0.5]
        y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0]
        assert spearman(x, y) == pytest.approx(pearson_of_ranks(x, y), abs=1e-14)

    def test_constant_series(self):
        with pytest.raises(SpearmanUndefinedError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_checks(self):
        with pytest.raises(ValueError):
            spearman([1.0, 2.0], [2.0, 1.0])
        with pytest.raises(ValueError):
            spearman([1.0, 2.0, 3.0], [2.0, 1.0])

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=3, max_size=15))
    def test_rank_oracle_and_monotone_invariance(self, pairs):
        x = np.array([p[0] for p in pairs], dtype=float)
        y = np.array([p[1] for p in pairs], dtype=float)
        assume(np.ptp(x) > 0 and np.ptp(y) > 0)
        rho = spearman(x, y)
        assert rho == pytest.approx(pearson_of_ranks(x, y), abs=1e-12)
        assert spearman(np.exp(x / 10), y ** 3) == pytest.approx(rho, abs=1e-12)


class TestBlandAltman:
    def test_identical(self):
        ba = bland_altman([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (ba.bias, ba.loa_low, ba.loa_high) == (0.0, 0.0, 0.0)

    def test_constant_offset(self):
        ba = bland_altman([3.0, 4.0, 7.0], [1.0, 2.0, 5.0])
        assert (ba.bias, ba.loa_low, ba.loa_high) == (2.0, 2.0, 2.0)

    def test_direct_formula(self, rng):
        x, y = rng.normal(size=12), rng.normal(size=12)
        d = x - y
        mean = sum(d) / len(d)
        sd = (sum((v - mean) ** 2 for v in d) / (len(d) - 1)) ** 0.5
        ba = bland_altman(x, y)
        assert ba.bias == pytest.approx(mean, abs=1e-14)
        assert ba.loa_low == pytest.approx(mean - 1.96 * sd, abs=1e-13)
        assert ba.loa_high == pytest.approx(mean + 1.96 * sd, abs=1e-13)
        assert np.allclose(ba.means, (x + y) / 2) and np.allclose(ba.differences, d)

    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=20))
    def test_antisymmetry_and_order(self, pairs):
        x = [p[0] for p in pairs]
        y = [p[1] for p in pairs]
        a, b = bland_altman(x, y), bland_altman(y, x)
        assert a.bias == -b.bias
        assert a.loa_low <= a.bias <= a.loa_high


class TestAggregate:
    def test_single_column(self):
        m = RatingsMatrix(np.array([[1.0], [4.0]]), ["a", "b"], ["r1"])
        for mode in ("average", "median", "min", "max"):
            assert np.array_equal(aggregate_ratings(m, mode), [1.0, 4.0])
        assert np.allclose(aggregate_ratings(m, "weighted_average", [3.0]), [1.0, 4.0])

    def test_weighted(self):
        m = RatingsMatrix.from_array([[1.0, 2.0, 3.0]])
        assert aggregate_ratings(m, "weighted_average", [1, 1, 2])[0] == 2.25

    def test_weight_errors(self):
        m = RatingsMatrix.from_array([[1.0, 2.0, 3.0]])
        with pytest.raises(ValueError):
            aggregate_ratings(m, "weighted_average", [1, 1])
        with pytest.raises(ValueError):
            aggregate_ratings(m, "weighted_average", [1, 0, 1])
        with pytest.raises(ValueError):
            aggregate_ratings(m, "weighted_average")
        with pytest.raises(ValueError):
            aggregate_ratings(m, "mode")

    def test_median_sort_oracle(self, rng):
        x = rng.normal(size=(9, 5))
        expected = [sorted(row)[2] for row in x.tolist()]
        assert np.array_equal(aggregate_ratings(RatingsMatrix.from_array(x), "median"), expected)

    @given(matrices)
    def test_order(self, x):
        m = RatingsMatrix.from_array(x)
        lo, med, hi = (aggregate_ratings(m, mode) for mode in ("min", "median", "max"))
        assert np.all(lo <= med) and np.all(med <= hi)


class TestCsv:
    def test_with_id_column(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("patient_id,R1,R2\nA,1.5,2\nB,3,4.25\n")
        m = read_ratings_csv(path)
        assert m.raters == ["R1", "R2"] and m.subjects == ["A", "B"]
        assert np.array_equal(m.values, [[1.5, 2.0], [3.0, 4.25]])

    def test_without_id_column(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("R1,R2,R3\n1,2,3\n4,5,6\n\n")
        m = read_ratings_csv(path)
        assert m.subjects == ["1", "2"] and m.values.shape == (2, 3)

    @pytest.mark.parametrize("text", ["", "R1,R2\n", "R1,R2\n1,x\n", "R1,R2\n1,2,3\n"])
    def test_malformed(self, tmp_path, text):
        path = tmp_path / "r.csv"
        path.write_text(text)
        with pytest.raises(RatingsFormatError):
            read_ratings_csv(path)

    def test_missing_cell(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("R1,R2\n1,\n")
        with pytest.raises(ValueError):
            read_ratings_csv(path)
