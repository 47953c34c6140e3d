import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lisbayes.diagnostics import exact_H1, linear_gram_term_variance, smc_level_variance
from lisbayes.errors import ContractError, DegenerateEnsembleError, NumericalError
from lisbayes.gram import GramKind, estimate_H0_reference, estimate_H1_weighted
from lisbayes.marginalize import SurrogateDensity
from lisbayes.model import (
    ConstantModel,
    LinearGaussianModel,
    exact_linear_posterior,
    make_linear_problem,
    make_lognormal_problem,
)
from lisbayes.samplers import (
    MHConfig,
    Proposal,
    ess,
    lis_mcmc_step,
    mh_step,
    next_beta,
    resample_multinomial,
    resample_systematic,
    run_adaptive_lis,
    run_lis_mcmc,
    run_mh,
    run_smc_lis,
)
from lisbayes.subspace import Subspace, leading_eigs, residual, spectrum_report


def std_normal(x):
    return -0.5 * float(np.sum(x * x))


def test_mh_identical_proposal_accepted():
    cfg = MHConfig(scale_tril=np.zeros((2, 2)))
    rng = np.random.default_rng(0)
    for _ in range(20):
        _, acc, _ = mh_step(std_normal, np.array([3.0, -1.0]), cfg, rng)
        assert acc


def test_mh_rejects_minus_inf():
    logd = lambda x: 0.0 if abs(x[0]) < 1e-3 else -np.inf
    x, acc, _ = mh_step(logd, np.zeros(1), MHConfig(1.0), np.random.default_rng(0))
    assert not acc and x[0] == 0


def test_mh_requires_finite_start():
    with pytest.raises(ContractError):
        mh_step(lambda x: -np.inf, np.zeros(1), MHConfig(1.0), np.random.default_rng(0))


def test_mh_standard_normal_moments():
    chain, _ = run_mh(std_normal, np.zeros(1), 100_000, MHConfig(2.4), np.random.default_rng(1))
    assert abs(chain.mean()) < 0.03
    assert 0.94 <= chain.var() <= 1.06


def test_pcn_is_prior_reversible():
    # pCN leaves N(0, 1) invariant for a flat likelihood: every move accepted
    chain, rate = run_mh(std_normal, np.zeros(1), 2000, MHConfig(proposal="PCN", rho=0.3),
                         np.random.default_rng(2))
    assert rate == 1.0


def test_mh_config_validation():
    with pytest.raises(ContractError):
        MHConfig(step_size=-1.0)
    with pytest.raises(ContractError):
        MHConfig(proposal=Proposal.PCN, rho=0.0)


def _lowrank_model(d=6, r=2, seed=0):
    """Linear model whose rows lie in span(e_1..e_r): f depends on x_r only."""
    rng = np.random.default_rng(seed)
    A = np.zeros((3, d))
    A[:, :r] = rng.standard_normal((3, r))
    return LinearGaussianModel(A, rng.standard_normal(3))


def test_exact_marginal_gives_unit_alpha():
    m = _lowrank_model()
    S = leading_eigs(m.C_A, 2)
    sur = SurrogateDensity(m, S, "F", 3, seed=1)
    rec = run_lis_mcmc(m, sur, np.zeros(6), 500, seed=2)
    assert rec.accept_rate_perp == 1.0
    assert np.allclose(rec.alpha, 1.0)


def test_single_step_interface():
    m = _lowrank_model()
    sur = SurrogateDensity(m, leading_eigs(m.C_A, 2), "G", 3)
    x, (ar, ap) = lis_mcmc_step(m, sur, np.zeros(6), MHConfig(), np.random.default_rng(0))
    assert x.shape == (6,) and isinstance(ar, bool) and isinstance(ap, bool)


def test_start_outside_surrogate_support():
    class Wall(ConstantModel):
        def _loglik(self, X):
            return np.where(X[:, 0] > 0, 0.0, -np.inf)
    S = Subspace.from_basis(np.eye(3)[:, :1])
    sur = SurrogateDensity(Wall(3), S, "F", 2)
    with pytest.raises(NumericalError):
        run_lis_mcmc(Wall(3), sur, np.array([-1.0, 0, 0]), 5)


def test_prior_target_moments():
    m = ConstantModel(4)
    S = Subspace.from_basis(np.eye(4)[:, :2])
    sur = SurrogateDensity(m, S, "G", 4)
    X0 = np.random.default_rng(0).standard_normal((2000, 4))
    rec = run_lis_mcmc(m, sur, X0, 50, seed=1)
    X = rec.states[-1]
    se = 1 / math.sqrt(len(X))
    assert np.all(np.abs(X.mean(0)) <= 3 * se)
    assert np.all(np.abs(X.var(0) - 1) <= 3 * math.sqrt(2) * se)


def test_rates_consistent_with_flags(linear10):
    sur = SurrogateDensity(linear10, leading_eigs(exact_H1(linear10), 3), "G", 4)
    rec = run_lis_mcmc(linear10, sur, np.zeros(10), 300, seed=4)
    assert rec.accept_rate_r == rec.accepted_r.mean() and rec.accept_rate_perp == rec.accepted_perp.mean()
    assert rec.states.shape == (300, 10)


def test_invariance_from_exact_posterior(linear10):
    mean, cov = exact_linear_posterior(linear10)
    rng = np.random.default_rng(5)
    n = 2000
    X0 = linear10.sample_posterior(n, rng)
    sur = SurrogateDensity(linear10, leading_eigs(exact_H1(linear10), 4), "G", 4, seed=6)
    X = run_lis_mcmc(linear10, sur, X0, 1000, rng=rng).states[-1]
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(X.mean(0) - mean) <= 3 * sd / math.sqrt(n))
    assert np.all(np.abs(X.var(0) - sd**2) <= 3 * math.sqrt(2) * sd**2 / math.sqrt(n))


def test_adaptive_without_epochs_uses_reference_gram(linear10):
    res = run_adaptive_lis(linear10, 0, 500, 1, 3, seed=7)
    X0 = np.random.default_rng(7).standard_normal((500, 10))
    G = linear10.grad_log_likelihood(X0)
    assert np.allclose(res.subspace.projector(), leading_eigs(G.T @ G / 500, 3).projector(), atol=1e-10)


def test_adaptive_flat_likelihood():
    res = run_adaptive_lis(ConstantModel(5), 3, 100, 1, 2, seed=0)
    assert all(np.all(H.matrix == 0) for H in res.running_means)
    assert residual(res.subspace, res.running_means[-1]) == 0


def test_adaptive_near_optimal(linear20):
    res = run_adaptive_lis(linear20, 5, 2000, 1, 4, seed=0)
    H = exact_H1(linear20)
    assert residual(res.subspace, H) <= 2 * spectrum_report(H).tail_sums[4]
    assert res.chain.states.shape == (6 * 2000, 20)


def test_adaptive_validation():
    with pytest.raises(ContractError):
        run_adaptive_lis(ConstantModel(2), 1, 0, 1, 1)


def test_ess_examples():
    assert ess(np.zeros(7)) == pytest.approx(7)
    assert ess([0.0, -np.inf, -np.inf]) == pytest.approx(1)
    assert ess(np.log([1.0, 1.0, 2.0])) == pytest.approx(16 / 6)
    with pytest.raises(DegenerateEnsembleError):
        ess([-np.inf, -np.inf])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.floats(-1e3, 1e3))
@settings(max_examples=50, deadline=None)
def test_ess_range_and_shift(lw, c):
    lw = np.array(lw)
    e = ess(lw)
    assert 1 - 1e-9 <= e <= len(lw) + 1e-9
    assert ess(lw + c) == pytest.approx(e, rel=1e-9)


def test_next_beta_flat():
    assert next_beta(ConstantModel(2), np.zeros((5, 2)), 0.0, 0.5) == 1.0


def test_next_beta_two_particles():
    c, tau = 10.0, 0.6
    # (1+u)^2 = 2 tau (1+u^2) with u = exp(-delta c)
    a = 1 - 2 * tau
    u = (-2 + math.sqrt(4 - 4 * a * a)) / (2 * a)
    delta = -math.log(u) / c
    beta = next_beta(None, None, 0.0, tau, loglik=np.array([0.0, -c]))
    assert beta == pytest.approx(delta, abs=1e-5)
    ratio = (1 + math.exp(-beta * c)) ** 2 / (2 * (1 + math.exp(-2 * beta * c)))
    assert abs(ratio - tau) <= 1e-3


def test_next_beta_monotone(rng):
    ll = -np.abs(rng.standard_normal(100)) * 50
    b = 0.0
    while b < 1:
        nb = next_beta(None, None, b, 0.5, loglik=ll)
        assert nb > b
        b = nb


def test_next_beta_validation():
    with pytest.raises(ContractError):
        next_beta(None, None, 1.0, 0.5, loglik=np.zeros(2))
    with pytest.raises(ContractError):
        next_beta(None, None, 0.0, 1.5, loglik=np.zeros(2))
    with pytest.raises(DegenerateEnsembleError):
        next_beta(None, None, 0.0, 0.5, loglik=np.full(2, -np.inf))


def test_resample_point_mass():
    P = np.arange(8.0).reshape(4, 2)
    out, idx = resample_multinomial(P, [-np.inf, 0.0, -np.inf, -np.inf], np.random.default_rng(0))
    assert np.all(idx == 1) and np.all(out == P[1])


def test_resample_counts():
    n = 100_000
    P = np.arange(4.0)[:, None]
    lw = np.zeros(4)
    # replicate the 4 particles so the output has n entries
    P = np.repeat(P, n // 4, axis=0)
    lw = np.zeros(n)
    _, idx = resample_multinomial(P, lw, np.random.default_rng(1))
    counts = np.bincount(idx // (n // 4), minlength=4)
    assert np.all(np.abs(counts - n / 4) <= 3 * math.sqrt(n * 0.25 * 0.75))


def test_resample_determinism():
    P = np.random.default_rng(0).standard_normal((10, 2))
    lw = np.random.default_rng(1).standard_normal(10)
    a, _ = resample_multinomial(P, lw, np.random.default_rng(3))
    b, _ = resample_multinomial(P, lw, np.random.default_rng(3))
    assert np.array_equal(a, b)
    s, _ = resample_systematic(P, lw, np.random.default_rng(3))
    assert s.shape == P.shape


def test_smc_flat_single_level():
    res = run_smc_lis(ConstantModel(3), 4000, 1, seed=0)
    assert res.betas == [0.0, 1.0]
    X = res.particles
    assert np.all(np.abs(X.mean(0)) <= 3 / math.sqrt(4000) * 1.5)


def test_smc_linear_posterior(linear10):
    mean, cov = exact_linear_posterior(linear10)
    n = 2048
    res = run_smc_lis(linear10, n, 4, tau=0.5, seed=3)
    X = res.particles
    assert res.betas[-1] == 1.0 and all(b2 > b1 for b1, b2 in zip(res.betas, res.betas[1:]))
    assert np.all(np.abs(X.mean(0) - mean) <= 5 * np.sqrt(np.diag(cov) / n))
    se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(np.cov(X.T) - cov) <= 5 * se)


def test_smc_fixed_schedule(linear10):
    res = run_smc_lis(linear10, 256, 2, betas=[0.25, 0.5, 1.0], seed=0)
    assert res.betas == [0.0, 0.25, 0.5, 1.0]
    with pytest.raises(ContractError):
        run_smc_lis(linear10, 256, 2, betas=[0.5, 0.25, 1.0])


def test_smc_determinism(linear10):
    a = run_smc_lis(linear10, 128, 2, seed=11).particles
    b = run_smc_lis(linear10, 128, 2, seed=11).particles
    assert np.array_equal(a, b)


def test_smc_level_variance_below_prior_weighted_variance_concentrated():
    # exact closed forms; ordering is expected only for a concentrated likelihood
    m = make_linear_problem(10, 10, 1, lambda0=10.0).model
    res = run_smc_lis(m, 2048, 4, seed=3)
    v_mu = linear_gram_term_variance(m, 0.0, 1.0)
    levels = [linear_gram_term_variance(m, a, b) for a, b in zip(res.betas, res.betas[1:])]
    assert len(levels) > 1
    assert max(levels) < v_mu


def test_gram_term_variance_matches_monte_carlo():
    m = make_linear_problem(6, 6, 0, lambda0=1.5).model
    rng = np.random.default_rng(0)
    for a, b in [(0.0, 1.0), (0.0, 0.3), (0.3, 1.0)]:
        v, se = smc_level_variance(m, a, b, 400_000, rng)
        assert abs(linear_gram_term_variance(m, a, b) - v) < 4 * se
