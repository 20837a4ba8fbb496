import numpy as np
import pytest

from fedtl.errors import ParameterError
from fedtl.harness import audit_ledger
from fedtl.highdim import (
    MetaDecision,
    SparseRegConfig,
    default_sparsity,
    dp_sparse_single,
    fed_sparse,
    meta_sparse,
    sparse_step_size,
)
from fedtl.mechanisms import NoiseMode, PrivacyBudget
from fedtl.rates import aggregation_privacy_term, rate_highdim
from fedtl.synth import Family, ProblemSpec, generate

BUDGET = PrivacyBudget(1.0, 1e-5)
OFF = NoiseMode.OFF


def iht_oracle(X, y, s, rho, iters=200):
    """Plain full-batch iterative hard thresholding, coded independently."""
    n, d = X.shape
    beta = np.zeros(d)
    for _ in range(iters):
        grad = X.T @ (X @ beta - y) / n
        nxt = beta - rho * grad
        drop = np.argpartition(np.abs(nxt), d - s)[: d - s]
        nxt[drop] = 0.0
        beta = nxt
    return beta


def _sparse_instance(rng, n, d, s, sigma=0.0):
    beta_star = np.zeros(d)
    support = rng.choice(d, s, replace=False)
    vals = rng.standard_normal(s)
    beta_star[support] = vals / np.linalg.norm(vals)
    X = rng.standard_normal((n, d))
    y = X @ beta_star + (sigma * rng.standard_normal(n) if sigma else 0.0)
    return X, y, beta_star


class TestConfig:
    def test_default_step(self):
        assert sparse_step_size(1.0) == pytest.approx(0.9 * 0.704)

    def test_default_sparsity(self):
        assert default_sparsity(4) == 17
        assert default_sparsity(2, L=1.2) == int(np.ceil(4.18 * 1.2**4 * 2))

    def test_validation(self):
        with pytest.raises(ParameterError):
            SparseRegConfig(budget=BUDGET, s_prime=0)
        with pytest.raises(ParameterError):
            SparseRegConfig(budget=BUDGET, s_prime=2, lambda_denominator="weird")


class TestSingleSiteNoiseOff:
    def test_recovers_support_and_matches_iht(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            drng = np.random.default_rng(100 + seed)
            X, y, beta_star = _sparse_instance(drng, 2000, 50, 4)
            cfg = SparseRegConfig(budget=BUDGET, s_prime=4, T=25, noise_mode=OFF)
            beta, trace = dp_sparse_single((X, y), cfg, rng)
            assert set(np.nonzero(beta)[0]) == set(np.nonzero(beta_star)[0])
            assert np.linalg.norm(beta - beta_star) <= 1e-4
            oracle = iht_oracle(X, y, 4, cfg.step())
            assert np.linalg.norm(beta - oracle) <= 1e-4

    def test_iterate_sparsity_always(self):
        rng = np.random.default_rng(1)
        X, y, _ = _sparse_instance(rng, 1200, 40, 3, sigma=1.0)
        cfg = SparseRegConfig(budget=PrivacyBudget(10.0, 1e-5), s_prime=7, T=3)
        _, trace = dp_sparse_single((X, y), cfg, rng)
        assert all(k <= 7 for k in trace.support_size)
        assert len(trace.support_size) == 3

    def test_lambda_denominator_flag(self):
        rng = np.random.default_rng(2)
        X, y, _ = _sparse_instance(rng, 1000, 30, 3, sigma=1.0)
        out = {}
        for denom in ("batch", "full"):
            cfg = SparseRegConfig(budget=PrivacyBudget(10.0, 1e-5), s_prime=5, T=4, lambda_denominator=denom)
            _, trace = dp_sparse_single((X, y), cfg, np.random.default_rng(3))
            out[denom] = trace.lam[0]
        # the batch denominator adds T times more selection noise
        assert out["batch"] == pytest.approx(4 * out["full"], rel=1e-9)

    def test_s_prime_exceeding_d(self):
        rng = np.random.default_rng(4)
        X, y, _ = _sparse_instance(rng, 100, 10, 2)
        cfg = SparseRegConfig(budget=BUDGET, s_prime=11)
        with pytest.raises(ParameterError):
            dp_sparse_single((X, y), cfg, rng)


def _fed_spec(K, n, d, s, h=0.0, sigma=1.0, A=None):
    A = frozenset(range(1, K + 1)) if A is None else A
    return ProblemSpec(family=Family.HIGHDIM, K=K, n0=n, A=A, h=h, d=d, s=s, sigma=sigma)


class TestFedSparse:
    def test_empty_subset_reduces_to_target_dynamics(self):
        spec = _fed_spec(2, 1200, 30, 3)
        sites, _ = generate(spec, 5)
        cfg = SparseRegConfig(budget=PrivacyBudget(10.0, 1e-5), s_prime=5, T=4)
        beta, entries, _ = fed_sparse(sites, cfg, frozenset(), master_seed=6)
        assert {e.site_id for e in entries} == {0}
        assert np.count_nonzero(beta) <= 5

    def test_noise_off_matches_pooled_iht(self):
        spec = _fed_spec(2, 1500, 40, 3, sigma=0.0)
        sites, truth = generate(spec, 7)
        cfg = SparseRegConfig(budget=BUDGET, s_prime=3, T=30, noise_mode=OFF)
        beta, entries, trace = fed_sparse(sites, cfg, frozenset({1, 2}), master_seed=8)
        Xp = np.vstack([s.payload[0] for s in sites])
        yp = np.concatenate([s.payload[1] for s in sites])
        oracle = iht_oracle(Xp, yp, 3, cfg.step())
        assert np.linalg.norm(beta - oracle) <= 1e-4
        assert np.linalg.norm(beta - truth.params[0]) <= 1e-4

    def test_iterates_sparse_every_round(self):
        spec = _fed_spec(2, 1600, 30, 3)
        sites, _ = generate(spec, 9)
        cfg = SparseRegConfig(budget=PrivacyBudget(50.0, 1e-5), s_prime=6, T=4)
        _, _, trace = fed_sparse(sites, cfg, frozenset({1, 2}), master_seed=10)
        assert all(k <= 6 for k in trace.support_size)


class TestMetaSparse:
    def test_decision_consistency_invariant(self):
        with pytest.raises(ParameterError):
            MetaDecision(branch="aggregate", lhs=2.0, rhs=1.0)
        MetaDecision(branch="aggregate", lhs=1.0, rhs=2.0)
        MetaDecision(branch="target_only", lhs=2.0, rhs=1.0)

    def test_branch_matches_independent_evaluation(self):
        spec = _fed_spec(2, 1500, 40, 3)
        sites, _ = generate(spec, 11)
        cfg = SparseRegConfig(budget=PrivacyBudget(20.0, 1e-5), s_prime=5, T=4)
        report = meta_sparse(sites, cfg, tilde_c=3.0, master_seed=12)
        n_agg = sum((s.n - (s.n // 2 - 1)) for s in sites if s.site_id == 0 or s.site_id in report.selected)
        lhs = aggregation_privacy_term(len(report.selected), n_agg, 5, 40, 20.0, 1e-5, cfg.eta)
        rhs = 3.0 * rate_highdim(1500, 5, 40, 20.0, 1e-5, cfg.eta)
        assert report.decision.lhs == pytest.approx(lhs)
        assert report.decision.rhs == pytest.approx(rhs)
        assert report.decision.branch == ("aggregate" if lhs <= rhs else "target_only")

    def test_empty_selection_still_aggregates_degenerately(self):
        # far-away sources: nothing selected, lhs = 0 <= rhs keeps the
        # aggregate branch with an empty subset (target-only dynamics)
        spec = _fed_spec(2, 1500, 40, 3, A=frozenset(), h=0.0)
        sites, _ = generate(spec, 13)
        cfg = SparseRegConfig(budget=PrivacyBudget(50.0, 1e-5), s_prime=5, T=4)
        report = meta_sparse(sites, cfg, tilde_c=0.05, master_seed=14)
        assert report.selected == frozenset()
        assert report.decision.lhs == 0.0
        assert report.decision.branch == "aggregate"

    def test_transcript_audits_clean(self):
        spec = _fed_spec(2, 1600, 30, 3)
        sites, _ = generate(spec, 15)
        cfg = SparseRegConfig(budget=PrivacyBudget(10.0, 1e-5), s_prime=5, T=4)
        report = meta_sparse(sites, cfg, tilde_c=3.0, master_seed=16)
        assert audit_ledger(report.transcript, PrivacyBudget(10.0, 1e-5)).ok
        stages = {e.stage for e in report.transcript.entries}
        assert "private_variance" in stages
        assert any(s.startswith("peeling[") for s in stages)

    def test_deterministic_branch_on_rerun(self):
        spec = _fed_spec(3, 1500, 30, 3)
        sites, _ = generate(spec, 17)
        cfg = SparseRegConfig(budget=PrivacyBudget(10.0, 1e-5), s_prime=5, T=4)
        r1 = meta_sparse(sites, cfg, tilde_c=3.0, master_seed=18)
        r2 = meta_sparse(sites, cfg, tilde_c=3.0, master_seed=18)
        assert r1.decision == r2.decision
        assert r1.transcript.serialize() == r2.transcript.serialize()


class TestMetaBranchCrossover:
    def test_aggregation_wins_for_many_similar_sources(self):
        # evaluate both sides of the branch inequality directly: with many
        # similar sources the aggregation privacy error drops below the
        # target-only threshold roughly when K exceeds d/s up to logs
        d, sp, n_half, eps, delta, eta, c = 400, 17, 1000, 1.0, 1e-5, 0.05, 3.0
        rhs = c * rate_highdim(2 * n_half, sp, d, eps, delta, eta)

        def lhs(K):
            return aggregation_privacy_term(K, (K + 1) * n_half, sp, d, eps, delta, eta)

        vals = {K: lhs(K) for K in (1, 2, 5, 10, 20, 50, 100, 200, 400)}
        keys = sorted(vals)
        # the sqrt(K)/(K+1) decay wins over the log growth from K ~ 5 on,
        # and aggregation eventually beats the target-only threshold
        tail = [K for K in keys if K >= 5]
        assert all(vals[a] > vals[b] for a, b in zip(tail, tail[1:]))
        assert vals[1] > rhs
        assert vals[400] <= rhs
        crossover = next(K for K in keys if vals[K] <= rhs)
        assert d / (2 * 17) <= crossover <= 40 * d / 17  # d/s' up to log factors

        for K in (1, 400):
            branch = "aggregate" if lhs(K) <= rhs else "target_only"
            MetaDecision(branch=branch, lhs=lhs(K), rhs=rhs)


class TestCalibratedRateBound:
    def test_error_within_three_rates_monte_carlo(self):
        # calibrated noise in the contracting regime: the estimate stays
        # within 3x the theory rate in at least 90% of runs
        n, d, s = 3000, 100, 3
        sp = default_sparsity(s)
        eps = 1000.0
        cfg = SparseRegConfig(budget=PrivacyBudget(eps, 1e-5), s_prime=sp, T=3)
        bound = 3 * rate_highdim(n, s, d, eps, 1e-5, cfg.eta)
        rng = np.random.default_rng(31)
        hits = 0
        reps = 100
        for seed in range(reps):
            drng = np.random.default_rng(5000 + seed)
            X, y, beta_star = _sparse_instance(drng, n, d, s, sigma=1.0)
            beta, _ = dp_sparse_single((X, y), cfg, rng)
            hits += np.linalg.norm(beta - beta_star) <= bound
        assert hits >= 0.9 * reps
