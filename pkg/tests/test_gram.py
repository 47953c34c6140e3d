import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lisbayes.diagnostics import exact_H0, exact_H1
from lisbayes.errors import ContractError, DegenerateEnsembleError, NumericalError
from lisbayes.gram import (
    GramAccumulator,
    GramEstimate,
    GramKind,
    empirical_one_sample_variance,
    epoch_running_mean,
    estimate_H0_reference,
    estimate_H1_chain,
    estimate_H1_weighted,
)
from lisbayes.model import ConstantModel, LinearGaussianModel, TargetModel


class Quadratic2D(TargetModel):
    """log f = -(x0^2 + 3 x0 x1) / 2 (toy)."""

    def __init__(self):
        from lisbayes.model import WhitenedReference
        self.reference = WhitenedReference(2)

    def _loglik(self, X):
        return -0.5 * (X[:, 0] ** 2 + 3 * X[:, 0] * X[:, 1])

    def _grad(self, X):
        return np.column_stack([-X[:, 0] - 1.5 * X[:, 1], -1.5 * X[:, 0]])


def test_constant_model_gives_zero():
    est = estimate_H0_reference(ConstantModel(3), 50, 0)
    assert np.all(est.matrix == 0)


def test_three_term_sum_by_hand():
    model = Quadratic2D()
    X = np.random.default_rng(9).standard_normal((3, 2))
    H = np.zeros((2, 2))
    for x in X:
        g = np.array([-x[0] - 1.5 * x[1], -1.5 * x[0]])
        H += np.outer(g, g)
    est = estimate_H0_reference(model, 3, 9)
    assert np.allclose(est.matrix, H / 3, atol=1e-12)


def test_seed_determinism(linear10):
    a = estimate_H0_reference(linear10, 1000, 5)
    b = estimate_H0_reference(linear10, 1000, 5)
    assert np.array_equal(a.matrix, b.matrix) and a.variance_estimate == b.variance_estimate


def test_batches_do_not_change_result(linear10):
    a = estimate_H0_reference(linear10, 1000, 5, batch_size=1000)
    b = estimate_H0_reference(linear10, 1000, 5, batch_size=7)
    assert np.allclose(a.matrix, b.matrix, atol=1e-10)
    assert a.variance_estimate == pytest.approx(b.variance_estimate, rel=1e-9)


def _entry_se(G, w=None):
    w = np.ones(len(G)) if w is None else w
    T = np.einsum("k,ki,kj->kij", w, G, G)
    return T.std(axis=0, ddof=1) / np.sqrt(len(G))


def test_H0_converges_to_closed_form(linear10):
    est = estimate_H0_reference(linear10, 100_000, 1)
    X = np.random.default_rng(1).standard_normal((100_000, 10))
    se = _entry_se(linear10.grad_log_likelihood(X))
    assert np.all(np.abs(est.matrix - exact_H0(linear10)) <= 3 * se + 1e-12)


def test_H1_chain_matches_closed_form(linear10):
    X = linear10.sample_posterior(100_000, np.random.default_rng(2))
    est = estimate_H1_chain(linear10, X)
    se = _entry_se(linear10.grad_log_likelihood(X))
    assert np.all(np.abs(est.matrix - exact_H1(linear10)) <= 3 * se + 1e-12)


def test_H1_chain_single_state(linear10):
    x = np.ones(10)
    g = linear10.grad_log_likelihood(x)
    assert np.allclose(estimate_H1_chain(linear10, [x]).matrix, np.outer(g, g))


def test_weighted_equal_weights_is_mean():
    G = np.random.default_rng(0).standard_normal((6, 3))
    est = estimate_H1_weighted(G, np.zeros(6))
    assert np.allclose(est.matrix, G.T @ G / 6)


def test_weighted_single_finite_weight():
    G = np.random.default_rng(0).standard_normal((4, 3))
    lw = np.array([-np.inf, 0.3, -np.inf, -np.inf])
    assert np.allclose(estimate_H1_weighted(G, lw).matrix, np.outer(G[1], G[1]))


def test_weighted_matches_naive():
    rng = np.random.default_rng(4)
    G, lw = rng.standard_normal((5, 3)), rng.normal(size=5)
    w = np.exp(lw) / np.exp(lw).sum()
    naive = sum(wi * np.outer(g, g) for wi, g in zip(w, G))
    assert np.allclose(estimate_H1_weighted(G, lw).matrix, naive, atol=1e-12)


@given(st.floats(-500, 500))
@settings(max_examples=25, deadline=None)
def test_weighted_shift_invariance(c):
    rng = np.random.default_rng(1)
    G, lw = rng.standard_normal((8, 3)), rng.normal(size=8)
    a = estimate_H1_weighted(G, lw).matrix
    b = estimate_H1_weighted(G, lw + c).matrix
    assert np.allclose(a, b, atol=1e-12)


def test_weighted_all_neg_inf():
    with pytest.raises(DegenerateEnsembleError):
        estimate_H1_weighted(np.ones((2, 2)), [-np.inf, -np.inf])


def test_nonfinite_gradient_reports_index():
    class Bad(Quadratic2D):
        def _grad(self, X):
            G = super()._grad(X)
            G[2] = np.nan
            return G
    with pytest.raises(NumericalError, match="sample 2"):
        estimate_H0_reference(Bad(), 5, 0)


def test_epoch_running_mean_cases():
    hist = [GramEstimate(np.array([[float(i + 1)]]), 1) for i in range(6)]
    assert epoch_running_mean(hist, 0, 4).matrix[0, 0] == 1.0
    assert epoch_running_mean(hist, 5, 3).matrix[0, 0] == pytest.approx(5.0)
    same = [GramEstimate(np.eye(2), 1)] * 4
    assert np.allclose(epoch_running_mean(same, 3, 2).matrix, np.eye(2))
    with pytest.raises(ContractError):
        epoch_running_mean(hist, 7, 1)


def test_one_sample_variance_cases():
    assert empirical_one_sample_variance(np.ones((4, 2, 2))) == 0
    assert empirical_one_sample_variance([[[0.0]], [[2.0]]]) == pytest.approx(2.0)
    T = np.random.default_rng(0).standard_normal((10, 2, 2))
    naive = 0.0
    for i in range(2):
        for j in range(2):
            v = T[:, i, j]
            naive += np.sum((v - v.mean()) ** 2) / 9
    assert empirical_one_sample_variance(T) == pytest.approx(naive)
    with pytest.raises(ContractError):
        empirical_one_sample_variance(np.ones((1, 2, 2)))


def test_accumulator_variance_matches_terms():
    rng = np.random.default_rng(3)
    G, w = rng.standard_normal((50, 3)), rng.uniform(0.5, 2, 50)
    acc = GramAccumulator(3).add(G[:20], w[:20]).merge(GramAccumulator(3).add(G[20:], w[20:]))
    T = np.einsum("k,ki,kj->kij", w, G, G)
    assert np.allclose(acc.mean, T.mean(0))
    assert acc.variance == pytest.approx(empirical_one_sample_variance(T), rel=1e-10)


def test_variance_below_fourth_moment(linear10):
    est = estimate_H0_reference(linear10, 20_000, 3)
    G = linear10.grad_log_likelihood(np.random.default_rng(3).standard_normal((20_000, 10)))
    q = np.sum(G * G, 1) ** 2
    assert est.variance_estimate <= q.mean() + 3 * q.std(ddof=1) / np.sqrt(len(q))


def test_estimate_symmetric_psd():
    M = np.array([[1.0, 2.0], [0.0, 1.0]])
    est = GramEstimate(M, 1)
    assert np.allclose(est.matrix, est.matrix.T)
    assert np.linalg.eigvalsh(est.matrix).min() >= -1e-12


def test_save_load(tmp_path, linear10):
    est = estimate_H0_reference(linear10, 100, 0)
    est.save(tmp_path / "h.csv", tmp_path / "h.json")
    back = GramEstimate.load(tmp_path / "h.csv", tmp_path / "h.json")
    assert np.array_equal(back.matrix, est.matrix) and back.kind is GramKind.REFERENCE_MC
    assert back.variance_estimate == est.variance_estimate
