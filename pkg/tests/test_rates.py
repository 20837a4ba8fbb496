import math

import numpy as np
import pytest

from fedtl.errors import ParameterError
from fedtl.rates import (
    RateParams,
    aggregation_privacy_term,
    rate_highdim,
    rate_highdim_terms,
    rate_lowdim,
    rate_lowdim_terms,
    rate_mean,
)

# Values below were evaluated independently at 40-digit precision.
MEAN_100 = 0.2556733808903256416344786949354217752466
LOWDIM_1000 = 3.435513280505752153855468938648042550821
LOWDIM_1000_TERMS = (0.9159196927041409477686257969800855497444, 2.519593587801611206086843141667957001076)
HIGHDIM_2000 = 7.190593479686975216468686285289862699781
AGG_5_12000 = 23.52660873324020394658322121063966498709


class TestRateMean:
    def test_frozen_value(self):
        assert rate_mean(100, 0.05, 1.0) == pytest.approx(MEAN_100, rel=1e-12)

    def test_sampling_term_scaling(self):
        # with privacy negligible the rate halves when n quadruples
        big_eps = 1e9
        assert rate_mean(400, 0.05, big_eps) == pytest.approx(rate_mean(100, 0.05, big_eps) / 2, rel=1e-6)

    def test_strictly_decreasing_in_n(self):
        grid = np.unique(np.logspace(1, 5, 60).astype(int))
        vals = [rate_mean(int(n), 0.05, 1.0) for n in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_small_n_rejected(self):
        with pytest.raises(ParameterError):
            rate_mean(1, 0.05, 1.0)


class TestRateLowdim:
    def test_frozen_value(self):
        assert rate_lowdim(1000, 5, 1.0, 1e-5, 0.05) == pytest.approx(LOWDIM_1000, rel=1e-10)

    def test_terms_exposed(self):
        samp, priv = rate_lowdim_terms(1000, 5, 1.0, 1e-5, 0.05)
        assert samp == pytest.approx(LOWDIM_1000_TERMS[0], rel=1e-10)
        assert priv == pytest.approx(LOWDIM_1000_TERMS[1], rel=1e-10)

    def test_monotone_in_d(self):
        vals = [rate_lowdim(1000, d, 1.0, 1e-5, 0.05) for d in range(1, 30)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_privacy_term_vanishes(self):
        _, priv = rate_lowdim_terms(1000, 5, 1e12, 1e-5, 0.05)
        assert priv < 1e-9

    def test_tiny_n_rejected(self):
        with pytest.raises(ParameterError):
            rate_lowdim(2, 5, 1.0, 1e-5, 0.05)


class TestRateHighdim:
    def test_frozen_value(self):
        assert rate_highdim(2000, 4, 200, 1.0, 1e-5, 0.05) == pytest.approx(HIGHDIM_2000, rel=1e-10)

    def test_linear_in_s_prime_privacy_term(self):
        _, p1 = rate_highdim_terms(2000, 2, 200, 1.0, 1e-5, 0.05)
        _, p2 = rate_highdim_terms(2000, 4, 200, 1.0, 1e-5, 0.05)
        assert p2 == pytest.approx(2 * p1, rel=1e-12)

    def test_doubling_d_changes_only_logs(self):
        for d in (10, 50, 200, 1000):
            ratio = rate_highdim(2000, 4, 2 * d, 1.0, 1e-5, 0.05) / rate_highdim(2000, 4, d, 1.0, 1e-5, 0.05)
            assert 1.0 < ratio < 1.5

    def test_s_prime_bound(self):
        with pytest.raises(ParameterError):
            rate_highdim(2000, 300, 200, 1.0, 1e-5, 0.05)


class TestAggregationPrivacyTerm:
    def test_empty_set_is_zero(self):
        assert aggregation_privacy_term(0, 12000, 4, 200, 1.0, 1e-5, 0.05) == 0.0

    def test_frozen_value(self):
        got = aggregation_privacy_term(5, 12000, 4, 200, 1.0, 1e-5, 0.05)
        assert got == pytest.approx(AGG_5_12000, rel=1e-10)

    def test_decreasing_in_n_agg(self):
        vals = [aggregation_privacy_term(5, n, 4, 200, 1.0, 1e-5, 0.05) for n in (4000, 8000, 16000, 32000)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestDecreasingInEpsilon:
    @pytest.mark.parametrize("fn", [
        lambda e: rate_mean(500, 0.05, e),
        lambda e: rate_lowdim(500, 4, e, 1e-5, 0.05),
        lambda e: rate_highdim(500, 3, 50, e, 1e-5, 0.05),
    ])
    def test_grid(self, fn):
        grid = np.linspace(0.05, 10, 40)
        vals = [fn(float(e)) for e in grid]
        assert all(math.isfinite(v) and v > 0 for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestRateParams:
    def test_invariants(self):
        RateParams(n=100, d=5, s=2, eta=0.05, h=0.0)
        with pytest.raises(ParameterError):
            RateParams(n=100, eta=1.5)
        with pytest.raises(ParameterError):
            RateParams(n=100, d=2, s=5)
        with pytest.raises(ParameterError):
            RateParams(n=100, h=-1.0)
