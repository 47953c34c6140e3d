"""Metropolis-Hastings, split-kernel LIS MCMC, adaptive LIS and tempered SMC.

The LIS kernel works on a batch of independent states at once: every row
of ``X`` is its own chain, sharing the subspace and the surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DegenerateEnsembleError, NumericalError
from .gram import GramKind, epoch_running_mean, estimate_H1_chain, estimate_H1_weighted, normalized_weights
from .marginalize import SurrogateDensity, eval_log_surrogate
from .model import TemperedModel
from .subspace import leading_eigs


class Proposal(str, Enum):
    RANDOM_WALK = "RandomWalk"
    PCN = "PCN"


@dataclass
class MHConfig:
    """Proposal settings for the low-dimensional (or generic) MH move.

    ``step_size=None`` means the classical 2.38 / sqrt(dim) scaling.
    ``scale_tril`` optionally preconditions the random walk.
    """

    step_size: float | None = None
    proposal: Proposal = Proposal.RANDOM_WALK
    rho: float = 0.5
    scale_tril: np.ndarray | None = None

    def __post_init__(self):
        self.proposal = Proposal(self.proposal)
        if self.step_size is not None and not self.step_size > 0:
            raise ContractError("step_size must be positive")
        if self.proposal is Proposal.PCN and not 0.0 < self.rho <= 1.0:
            raise ContractError("PCN rho must lie in (0, 1]")

    def step_for(self, dim):
        if self.step_size is not None:
            return self.step_size
        return 2.38 / math.sqrt(max(dim, 1))


def _propose(a, cfg, rng):
    """Proposal and log q(a', a) - log q(a, a') (zero for symmetric moves)."""
    n, k = a.shape
    xi = rng.standard_normal((n, k))
    if cfg.proposal is Proposal.PCN:
        c = math.sqrt(1.0 - cfg.rho**2)
        prop = c * a + cfg.rho * xi
        # q(a, a') = N(a'; c a, rho^2 I); reversible w.r.t. N(0, I)
        fwd = -0.5 * np.sum((prop - c * a) ** 2, axis=1) / cfg.rho**2
        bwd = -0.5 * np.sum((a - c * prop) ** 2, axis=1) / cfg.rho**2
        return prop, bwd - fwd
    if cfg.scale_tril is not None:
        xi = xi @ np.asarray(cfg.scale_tril).T
    return a + cfg.step_for(k) * xi, np.zeros(n)


def mh_step(logdensity, x, cfg, rng, current_logp=None):
    """One Metropolis-Hastings update of a single state.

    Returns ``(x_next, accepted, logp_next)``; proposals with ``-inf``
    density are rejected.
    """
    x = np.asarray(x, dtype=float)
    lp = logdensity(x) if current_logp is None else current_logp
    if not np.isfinite(lp):
        raise ContractError("current state must have finite log density")
    prop, log_q = _propose(x[None, :], cfg, rng)
    prop = prop[0]
    lp_new = logdensity(prop)
    log_ratio = lp_new - lp + log_q[0]
    accept = bool(np.isfinite(lp_new) and math.log(rng.uniform()) < min(0.0, log_ratio))
    if accept:
        return prop, True, lp_new
    return x, False, lp


def run_mh(logdensity, x0, n_steps, cfg, rng):
    x = np.asarray(x0, dtype=float)
    lp = logdensity(x)
    out = np.empty((n_steps, x.size))
    acc = 0
    for i in range(n_steps):
        x, a, lp = mh_step(logdensity, x, cfg, rng, lp)
        acc += a
        out[i] = x
    return out, acc / max(n_steps, 1)


@dataclass
class ChainRecord:
    """Chain states plus per-step acceptance flags of both stages.

    ``states`` has shape ``(t, d)`` for one chain or ``(t, n, d)`` for a
    batch of chains. ``alpha`` stores the stage-(iii) acceptance
    probabilities, whose mean estimates E[alpha(X, X')].
    """

    states: np.ndarray
    accepted_r: np.ndarray
    accepted_perp: np.ndarray
    alpha: np.ndarray

    @property
    def accept_rate_r(self):
        return float(np.mean(self.accepted_r)) if self.accepted_r.size else 0.0

    @property
    def accept_rate_perp(self):
        return float(np.mean(self.accepted_perp)) if self.accepted_perp.size else 0.0

    @property
    def mean_alpha(self):
        return float(np.mean(self.alpha)) if self.alpha.size else 0.0


class LISKernel:
    """Algorithm-1 transition: surrogate move on x_r, reference proposal on x_perp.

    Stage (iii) rejection reverts both components.
    """

    def __init__(self, model, surrogate, cfg=None):
        self.model = model
        self.surrogate = surrogate
        self.subspace = surrogate.subspace
        self.cfg = cfg or MHConfig()

    def init_state(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        V = self.subspace.basis
        a = X @ V
        logf = np.asarray(self.model.log_likelihood(X), dtype=float)
        logs = np.asarray(eval_log_surrogate(self.surrogate, a), dtype=float)
        if not np.all(np.isfinite(logs)):
            raise NumericalError("surrogate is -inf (or non-finite) at the current state")
        if np.any(np.isnan(logf)) or not np.all(logf > -np.inf):
            raise NumericalError("log f is not finite at the current state")
        return {"X": X, "a": a, "logf": logf, "logs": logs}

    def step(self, state, rng):
        X, a, logf, logs = state["X"], state["a"], state["logf"], state["logs"]
        n = X.shape[0]
        V, Vp = self.subspace.basis, self.subspace.complement
        k = V.shape[1]
        # (i) surrogate MH move on the retained coefficients
        if k:
            a_prop, log_q = _propose(a, self.cfg, rng)
            logs_prop = np.asarray(eval_log_surrogate(self.surrogate, a_prop), dtype=float)
            log_beta = (logs_prop - 0.5 * np.sum(a_prop**2, axis=1)) - (logs - 0.5 * np.sum(a**2, axis=1)) + log_q
            with np.errstate(invalid="ignore"):
                acc_r = np.isfinite(logs_prop) & (np.log(rng.uniform(size=n)) < np.minimum(0.0, log_beta))
            a_new = np.where(acc_r[:, None], a_prop, a)
            logs_new = np.where(acc_r, logs_prop, logs)
        else:
            acc_r = np.zeros(n, dtype=bool)
            a_new, logs_new = a, logs
        # (ii) complement draw from the conditional reference
        perp = rng.standard_normal((n, Vp.shape[1])) @ Vp.T
        X_prop = a_new @ V.T + perp
        logf_prop = np.asarray(self.model.log_likelihood(X_prop), dtype=float)
        # (iii) alpha = f(x') s(x_r) / (f(x) s(x_r')); the reference factors cancel
        with np.errstate(invalid="ignore", over="ignore"):
            log_alpha = np.minimum(0.0, (logf_prop - logf) + (logs - logs_new))
            log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        acc = np.log(rng.uniform(size=n)) < log_alpha
        new_state = {
            "X": np.where(acc[:, None], X_prop, X),
            "a": np.where(acc[:, None], a_new, a),
            "logf": np.where(acc, logf_prop, logf),
            "logs": np.where(acc, logs_new, logs),
        }
        return new_state, acc_r, acc, np.exp(log_alpha)


def lis_mcmc_step(model, S, x, cfg, rng):
    """Single Algorithm-1 transition; returns ``(x_next, (accepted_r, accepted_perp))``."""
    kernel = LISKernel(model, S, cfg)
    x = np.asarray(x, dtype=float)
    state, acc_r, acc, _ = kernel.step(kernel.init_state(x), rng)
    out = state["X"][0] if x.ndim == 1 else state["X"]
    if x.ndim == 1:
        return out, (bool(acc_r[0]), bool(acc[0]))
    return out, (acc_r, acc)


def run_lis_mcmc(model, surrogate, x0, n_steps, cfg=None, rng=None, seed=0):
    """Run the LIS Metropolis-within-Gibbs kernel for ``n_steps`` from ``x0`` (one state or a batch)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    kernel = LISKernel(model, surrogate, cfg)
    x0 = np.asarray(x0, dtype=float)
    state = kernel.init_state(x0)
    n = state["X"].shape[0]
    d = model.dim
    states = np.empty((n_steps, n, d))
    acc_r = np.empty((n_steps, n), dtype=bool)
    acc_p = np.empty((n_steps, n), dtype=bool)
    alpha = np.empty((n_steps, n))
    for i in range(n_steps):
        state, acc_r[i], acc_p[i], alpha[i] = kernel.step(state, rng)
        states[i] = state["X"]
    if x0.ndim == 1:
        return ChainRecord(states[:, 0], acc_r[:, 0], acc_p[:, 0], alpha[:, 0])
    return ChainRecord(states, acc_r, acc_p, alpha)


@dataclass
class AdaptiveResult:
    chain: ChainRecord
    subspace: object
    history: list = field(default_factory=list)
    running_means: list = field(default_factory=list)


def run_adaptive_lis(model, K, t, K_star, d_r, cfg=None, seed=0, kind="G", M=4):
    """Adaptive LIS MCMC: re-estimates H1 and the subspace every epoch.

    Epoch 0 draws ``t`` reference samples for H^(0); epochs 1..K each run
    ``t`` LIS kernel steps from the last state, recompute H^(j), average
    epochs ``min(j, K_star)..j`` and re-derive the subspace.
    """
    if K < 0 or t < 1 or K_star < 0:
        raise ContractError("need K >= 0, t >= 1, K_star >= 0")
    rng = np.random.default_rng(seed)
    X0 = rng.standard_normal((t, model.dim))
    history = [estimate_H1_chain(model, X0, GramKind.REFERENCE_MC)]
    S = leading_eigs(history[0], d_r)
    chunks = [X0]
    acc_r, acc_p, alpha = [np.zeros(t, dtype=bool)], [np.zeros(t, dtype=bool)], [np.zeros(t)]
    means = [history[0]]
    x = X0[-1]
    for j in range(1, K + 1):
        sur = SurrogateDensity(model, S, kind, M, seed=int(rng.integers(2**63)))
        rec = run_lis_mcmc(model, sur, x, t, cfg, rng)
        chunks.append(rec.states)
        acc_r.append(rec.accepted_r)
        acc_p.append(rec.accepted_perp)
        alpha.append(rec.alpha)
        x = rec.states[-1]
        history.append(estimate_H1_chain(model, rec.states))
        Hbar = epoch_running_mean(history, j, K_star)
        means.append(Hbar)
        S = leading_eigs(Hbar, d_r)
    chain = ChainRecord(np.concatenate(chunks), np.concatenate(acc_r), np.concatenate(acc_p), np.concatenate(alpha))
    return AdaptiveResult(chain, S, history, means)


# --------------------------------------------------------------------------
# Sequential Monte Carlo


def ess(log_weights):
    """(sum w)^2 / sum w^2 for weights given on the log scale."""
    w = normalized_weights(log_weights)
    return float(1.0 / np.sum(w * w))


def _ess_ratio(delta, loglik):
    lw = delta * loglik
    return math.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)) / loglik.size


def next_beta(model, particles, beta_k, tau, loglik=None, tol=1e-6):
    """Next tempering level: ESS / n of weights f^(beta - beta_k) hits ``tau``.

    Returns 1 when the full increment keeps ESS / n >= tau; otherwise
    bisects on the increment to within ``tol``.
    """
    if not 0.0 <= beta_k < 1.0:
        raise ContractError("beta_k must lie in [0, 1)")
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie in (0, 1)")
    if loglik is None:
        loglik = model.log_likelihood(particles)
    loglik = np.asarray(loglik, dtype=float)
    if np.any(np.isnan(loglik)) or np.any(loglik == np.inf):
        raise NumericalError("log-likelihood values must be finite or -inf")
    if not np.any(np.isfinite(loglik)):
        raise DegenerateEnsembleError("every particle has zero likelihood")
    # -inf particles receive zero weight for any positive increment
    finite = np.isfinite(loglik)
    ll = np.where(finite, loglik, -np.inf)
    ll = ll - np.max(ll[finite])
    span = 1.0 - beta_k
    if _ess_ratio(span, ll) >= tau:
        return 1.0
    lo, hi = 0.0, span
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _ess_ratio(mid, ll) >= tau:
            lo = mid
        else:
            hi = mid
    # lo keeps ESS / n >= tau; strictly positive for a non-degenerate ensemble
    delta = lo if lo > 0 else hi
    return beta_k + delta


def resample_multinomial(particles, log_weights, rng):
    """n i.i.d. categorical draws proportional to the weights; returns (particles, indices)."""
    w = normalized_weights(log_weights)
    n = len(w)
    idx = rng.choice(n, size=n, p=w)
    return np.asarray(particles)[idx], idx


def resample_systematic(particles, log_weights, rng):
    w = normalized_weights(log_weights)
    n = len(w)
    u = (rng.uniform() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(w), u, side="left")
    idx = np.minimum(idx, n - 1)
    return np.asarray(particles)[idx], idx


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    log_weights: np.ndarray
    beta: float

    @property
    def ess(self):
        return ess(self.log_weights)


@dataclass
class SMCLevel:
    beta: float
    ess_before: float
    gram: object
    subspace: object
    accept_rate_r: float
    accept_rate_perp: float


@dataclass
class SMCResult:
    ensemble: ParticleEnsemble
    levels: list

    @property
    def particles(self):
        return self.ensemble.particles

    @property
    def betas(self):
        return [0.0] + [lv.beta for lv in self.levels]

    @property
    def subspaces(self):
        return [lv.subspace for lv in self.levels]


def _reduced_scale(a):
    """Cholesky factor of the empirical covariance of retained coefficients."""
    k = a.shape[1]
    if a.shape[0] <= k:
        return None
    C = np.atleast_2d(np.cov(a, rowvar=False)) + 1e-12 * np.eye(k)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return None


def run_smc_lis(model, n, d_r, tau=0.5, betas=None, t_k=5, cfg=None, seed=0, kind="G", M=4,
                adapt_scale=True, resampling="multinomial", max_levels=1000):
    """Tempered SMC with a per-level LIS built from weighted H1.

    Either a fixed schedule ``betas`` (increasing, ending at 1) or the
    adaptive ESS rule with threshold ``tau`` is used. With
    ``adapt_scale`` the reduced random-walk proposal is preconditioned by
    the covariance of the resampled retained coefficients.
    """
    if n < 2:
        raise ContractError("need at least two particles")
    cfg = cfg or MHConfig()
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, model.dim))
    loglik, grads = model.log_likelihood_and_grad(X)
    beta = 0.0
    schedule = None
    if betas is not None:
        schedule = [float(b) for b in betas if b > 0]
        if not schedule or any(b2 <= b1 for b1, b2 in zip(schedule, schedule[1:])) or schedule[-1] != 1.0:
            raise ContractError("betas must increase to exactly 1")
    levels = []
    resample = resample_systematic if resampling == "systematic" else resample_multinomial
    while beta < 1.0:
        if len(levels) >= max_levels:
            raise NumericalError("tempering did not reach beta = 1")
        if schedule is not None:
            new_beta = schedule[len(levels)]
        else:
            new_beta = next_beta(model, X, beta, tau, loglik=loglik)
        delta = new_beta - beta
        with np.errstate(invalid="ignore"):
            log_w = np.where(np.isfinite(loglik), delta * loglik, -np.inf)
        ess_before = ess(log_w)
        H = estimate_H1_weighted(grads, log_w, GramKind.SMC_WEIGHTED)
        S = leading_eigs(H, d_r)
        X, _ = resample(X, log_w, rng)
        target = TemperedModel(model, new_beta)
        level_cfg = cfg
        if adapt_scale and S.rank and cfg.proposal is Proposal.RANDOM_WALK:
            L = _reduced_scale(X @ S.basis)
            if L is not None:
                level_cfg = MHConfig(cfg.step_for(S.rank), Proposal.RANDOM_WALK, cfg.rho, L)
        sur = SurrogateDensity(target, S, kind, M, seed=int(rng.integers(2**63)))
        rec = run_lis_mcmc(target, sur, X, t_k, level_cfg, rng)
        X = rec.states[-1]
        loglik, grads = model.log_likelihood_and_grad(X)
        beta = new_beta
        levels.append(SMCLevel(beta, ess_before, H, S, rec.accept_rate_r, rec.accept_rate_perp))
    return SMCResult(ParticleEnsemble(X, np.zeros(n), beta), levels)
