"""Monte Carlo marginalization of the likelihood over the complement subspace.

For a whitened reference, the conditional reference mu(x_perp | x_r) is a
standard Gaussian on the complement regardless of x_r, so complement
samples are ``V_perp w`` with ``w ~ N(0, I_{d - d_r})``.

Surrogate kinds, each built from M complement samples X_perp^i:

* ``F``: log f_bar^M = logsumexp_i log f(x_r, X_perp^i) - log M
* ``G``: 2 * (logsumexp_i 0.5 log f(x_r, X_perp^i) - log M)
* ``L``: mean_i log f(x_r, X_perp^i)

Normalizing constants Z_g, Z_l are never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, NumericalError
from .model import LOG_2PI


class SurrogateKind(str, Enum):
    F = "F"
    G = "G"
    L = "L"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


class Randomness(str, Enum):
    FIXED_SEED_BANK = "FixedSeedBank"
    FRESH = "Fresh"


class ConditionalReferenceSampler:
    """Draws x = V_r x_r + V_perp w with w standard normal.

    With ``fresh=False`` every call replays the same stream from ``seed``.
    """

    def __init__(self, subspace, seed=0, fresh=False):
        self.subspace = subspace
        self.seed = seed
        self.fresh = fresh
        self._rng = np.random.default_rng(seed)

    @property
    def dim(self):
        return self.subspace.dim

    def noise(self, count):
        rng = self._rng if self.fresh else np.random.default_rng(self.seed)
        return rng.standard_normal((int(count), self.subspace.complement.shape[1]))

    def sample(self, x_r, count):
        return sample_conditional_complement(self, x_r, count)


def sample_conditional_complement(sampler, x_r, count):
    """``count`` full-space points sharing the retained coefficients ``x_r``."""
    if count < 1:
        raise ContractError("count must be >= 1")
    S = sampler.subspace
    x_r = np.asarray(x_r, dtype=float)
    if x_r.shape != (S.rank,):
        raise ContractError(f"x_r must have length {S.rank}")
    W = sampler.noise(count)
    return S.basis @ x_r + W @ S.complement.T


def reduce_log_values(logf, kind, axis=-1):
    """Combine log-likelihood values over the Monte Carlo axis."""
    kind = SurrogateKind.parse(kind)
    logf = np.asarray(logf, dtype=float)
    M = logf.shape[axis]
    if kind is SurrogateKind.L:
        if not np.all(np.isfinite(logf)):
            raise NumericalError("log-likelihood surrogate requires finite log f at every sample")
        return np.mean(logf, axis=axis)
    if np.any(np.isnan(logf)) or np.any(logf == np.inf):
        raise NumericalError("log f values must be finite or -inf")
    if kind is SurrogateKind.F:
        return logsumexp(logf, axis=axis) - math.log(M)
    return 2.0 * (logsumexp(0.5 * logf, axis=axis) - math.log(M))


@dataclass
class SurrogateDensity:
    """Marginalized-likelihood surrogate on the retained coefficients.

    With the default fixed seed bank the M complement draws are sampled
    once and reused for every evaluation, so the surrogate is a genuine
    (randomly drawn, then frozen) function of x_r.
    """

    model: object
    subspace: object
    kind: SurrogateKind = SurrogateKind.G
    M: int = 4
    randomness: Randomness = Randomness.FIXED_SEED_BANK
    seed: int = 0
    bank: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = SurrogateKind.parse(self.kind)
        self.randomness = Randomness(self.randomness)
        if int(self.M) < 1:
            raise ContractError("M must be >= 1")
        self.M = int(self.M)
        n_perp = self.subspace.complement.shape[1]
        self._rng = np.random.default_rng(self.seed)
        if self.bank is None:
            self.bank = np.random.default_rng(self.seed).standard_normal((self.M, n_perp))
        else:
            self.bank = np.asarray(self.bank, dtype=float).reshape(self.M, n_perp)
        self._perp_bank = self.bank @ self.subspace.complement.T  # (M, d)

    def _perp_points(self):
        if self.randomness is Randomness.FIXED_SEED_BANK:
            return self._perp_bank
        W = self._rng.standard_normal(self.bank.shape)
        return W @ self.subspace.complement.T

    def log_values(self, x_r):
        """log f at the M complement points for each x_r; shape (..., M)."""
        x_r = np.asarray(x_r, dtype=float)
        r = self.subspace.rank
        if x_r.shape[-1:] != (r,) and not (r == 0 and x_r.shape[-1:] == (0,)):
            raise ContractError(f"x_r must have trailing dimension {r}")
        single = x_r.ndim == 1
        X_r = np.atleast_2d(x_r)
        base = X_r @ self.subspace.basis.T  # (n, d)
        pts = base[:, None, :] + self._perp_points()[None, :, :]
        n, M, d = pts.shape
        vals = np.asarray(self.model.log_likelihood(pts.reshape(n * M, d))).reshape(n, M)
        return vals[0] if single else vals

    def log_surrogate(self, x_r):
        return eval_log_surrogate(self, x_r)


def eval_log_surrogate(S, x_r):
    """Log of the Monte Carlo marginalized likelihood (no normalization).

    For kinds F and G, ``-inf`` terms are tolerated; if all M terms are
    ``-inf`` the result is ``-inf`` (zero surrogate density).
    """
    vals = S.log_values(x_r)
    with np.errstate(divide="ignore", invalid="ignore"):
        return reduce_log_values(vals, S.kind)


def standard_normal_logpdf(x_r):
    x_r = np.asarray(x_r, dtype=float)
    k = x_r.shape[-1]
    return -0.5 * np.sum(x_r * x_r, axis=-1) - 0.5 * k * LOG_2PI


def eval_log_surrogate_posterior(S, x_r):
    """Unnormalized log surrogate posterior on the retained coefficients."""
    return eval_log_surrogate(S, x_r) + standard_normal_logpdf(x_r)
