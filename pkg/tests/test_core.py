import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorenorm.core import (
    DemoManifest,
    NormalStats,
    PairType,
    ScoreRecord,
    ScoreTable,
    TableKind,
    fit_normal_stats,
    normal_cdf,
    standardize,
)
from scorenorm.errors import (
    ConsistencyError,
    DegenerateDistribution,
    EmptyDistribution,
    ManifestViolation,
)

from conftest import make_table

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


def mp_cdf(s, mu, sigma):
    """Independent reference: 0.5 * erfc(-(s - mu) / (sigma * sqrt 2)) at 50 digits."""
    with mpmath.workdps(50):
        z = (mpmath.mpf(s) - mpmath.mpf(mu)) / (mpmath.mpf(sigma) * mpmath.sqrt(2))
        return float(mpmath.erfc(-z) / 2)


class TestFitNormalStats:
    def test_three_values(self):
        st_ = fit_normal_stats([0.1, 0.2, 0.3])
        # population variance 0.02 / 3
        assert st_.mu == pytest.approx(0.2, abs=1e-15)
        assert st_.sigma == pytest.approx(math.sqrt(0.02 / 3), rel=1e-12)
        assert st_.sigma == pytest.approx(0.0816497, abs=1e-7)
        assert st_.count == 3

    def test_single_value(self):
        assert fit_normal_stats([0.5]) == NormalStats(0.5, 0.0, 1)

    @given(st.floats(-1, 1), st.integers(1, 50))
    def test_constant_sample_has_zero_sigma(self, c, n):
        assert fit_normal_stats([c] * n).sigma == 0.0

    def test_empty(self):
        with pytest.raises(EmptyDistribution):
            fit_normal_stats([])

    @given(st.lists(finite, min_size=1, max_size=60), st.randoms())
    def test_permutation_invariant(self, xs, random):
        ys = list(xs)
        random.shuffle(ys)
        a, b = fit_normal_stats(xs), fit_normal_stats(ys)
        assert a.count == b.count
        assert a.mu == pytest.approx(b.mu, rel=1e-12, abs=1e-12)
        assert a.sigma == pytest.approx(b.sigma, rel=1e-9, abs=1e-12)


class TestStandardize:
    def test_example(self):
        stats = NormalStats(0.2, 0.0816497, 3)
        assert standardize(0.5, stats) == pytest.approx(3.67423, abs=1e-5)

    def test_at_mean(self):
        stats = NormalStats(0.37, 0.2, 10)
        assert standardize(0.37, stats) == 0.0

    def test_zero_sigma(self):
        with pytest.raises(DegenerateDistribution):
            standardize(0.3, NormalStats(0.2, 0.0, 4))

    def test_below_floor(self):
        with pytest.raises(DegenerateDistribution):
            standardize(0.3, NormalStats(0.2, 1e-13, 4))

    @given(finite, finite, st.floats(1e-3, 10))
    def test_strictly_increasing(self, a, mu, sigma):
        b = a + 1e-3
        stats = NormalStats(mu, sigma, 5)
        assert standardize(a, stats) < standardize(b, stats)

    @settings(max_examples=60)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=400))
    def test_self_standardization(self, xs):
        stats = fit_normal_stats(xs)
        if stats.sigma < 1e-6:
            return
        z = standardize(np.array(xs), stats)
        assert abs(z.mean()) <= 1e-9
        assert abs(z.std() - 1) <= 1e-9


class TestNormalCdf:
    def test_at_mean(self):
        assert normal_cdf(0.2, NormalStats(0.2, 0.1, 2)) == 0.5

    def test_upper_quantile(self):
        value = normal_cdf(0.395993, NormalStats(0.2, 0.1, 2))
        assert value == pytest.approx(mp_cdf(0.395993, 0.2, 0.1), abs=1e-7)
        assert value == pytest.approx(0.975, abs=1e-5)

    def test_limits(self):
        stats = NormalStats(0.0, 0.1, 2)
        assert normal_cdf(-np.inf, stats) == 0.0
        assert normal_cdf(np.inf, stats) == 1.0

    def test_degenerate_step(self):
        stats = NormalStats(0.3, 0.0, 1)
        assert normal_cdf(0.2, stats) == 0.0
        assert normal_cdf(0.3, stats) == 0.5
        assert normal_cdf(0.4, stats) == 1.0

    @settings(max_examples=200)
    @given(st.floats(-3, 3), st.floats(-1, 1), st.floats(0.01, 2))
    def test_against_erf_reference(self, s, mu, sigma):
        assert normal_cdf(s, NormalStats(mu, sigma, 2)) == pytest.approx(
            mp_cdf(s, mu, sigma), abs=1e-7)

    @given(finite, finite, st.floats(1e-3, 10))
    def test_monotone(self, a, mu, sigma):
        stats = NormalStats(mu, sigma, 2)
        lo, hi = sorted((a, a * 0.5 + mu))
        assert normal_cdf(lo, stats) <= normal_cdf(hi, stats)

    def test_vectorized(self):
        stats = NormalStats(0.0, 1.0, 2)
        out = normal_cdf(np.array([-1.0, 0.0, 1.0]), stats)
        assert out.shape == (3,)
        assert out[1] == 0.5


class TestScoreTable:
    def test_roundtrip_records(self):
        t = make_table(TableKind.TEST, [("a", "a", "Asian", "Asian", 0.8),
                                        ("a", "b", "Asian", "", 0.1)])
        assert len(t) == 2
        assert t[0].pair_type is PairType.GENUINE
        assert t[1].probe_demo is None
        assert t[1].score == 0.1
        assert [r.score for r in t] == [0.8, 0.1]

    def test_genuine_requires_same_subject(self):
        with pytest.raises(ConsistencyError):
            ScoreTable.from_records(
                TableKind.TEST,
                [ScoreRecord("a", "b", "Asian", None, PairType.GENUINE, 0.5)],
                DemoManifest("ethnicity", ("Asian",)))

    def test_impostor_requires_different_subjects(self):
        with pytest.raises(ConsistencyError):
            ScoreTable.from_records(
                TableKind.TEST,
                [ScoreRecord("a", "a", "Asian", None, PairType.IMPOSTOR, 0.5)],
                DemoManifest("ethnicity", ("Asian",)))

    def test_cohort_kinds_are_impostor_only(self):
        with pytest.raises(ConsistencyError):
            make_table(TableKind.GALLERY_COHORT, [("a", "a", "Asian", "Asian", 0.5)])
        t = make_table(TableKind.COHORT_COHORT, [("a", "a", "Asian", "Asian", 0.5)])
        assert t.genuine.all()

    def test_unknown_label(self):
        with pytest.raises(ManifestViolation):
            make_table(TableKind.TEST, [("a", "b", "Martian", "", 0.5)])

    def test_columns_are_read_only(self):
        t = make_table(TableKind.TEST, [("a", "b", "Asian", "", 0.5)])
        with pytest.raises(ValueError):
            t.score[0] = 1.0
