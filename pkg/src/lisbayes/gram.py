"""Monte Carlo estimators of the gradient Gram matrices H0 and H1.

H0 = E_mu[grad log f grad log f^T] and H1 = E_pi[...]. Estimates are
accumulated as rank-one update sums so memory stays O(d^2); partial
accumulators merge exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DegenerateEnsembleError, NumericalError


class GramKind(str, Enum):
    REFERENCE_MC = "ReferenceMC"
    WEIGHTED_IS = "WeightedIS"
    CHAIN_EPOCH_AVERAGE = "ChainEpochAverage"
    SMC_WEIGHTED = "SmcWeighted"


def symmetrize_psd(M):
    """(M + M^T)/2 with negative eigenvalues floored at zero."""
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + M.T)
    if S.size == 0:
        return S
    lam, vec = np.linalg.eigh(S)
    if lam.min() < 0.0:
        S = (vec * np.clip(lam, 0.0, None)) @ vec.T
        S = 0.5 * (S + S.T)
    return S


@dataclass
class GramEstimate:
    matrix: np.ndarray
    sample_count: int
    kind: GramKind = GramKind.REFERENCE_MC
    variance_estimate: float | None = None

    def __post_init__(self):
        self.matrix = symmetrize_psd(self.matrix)
        self.kind = GramKind(self.kind)
        if self.sample_count < 1:
            raise ContractError("sample_count must be positive")

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def std_error(self):
        """Root-mean-square Frobenius error sqrt(V / m), if V is known."""
        if self.variance_estimate is None:
            return None
        return math.sqrt(self.variance_estimate / self.sample_count)

    def to_csv(self, path):
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")

    def sidecar(self):
        return {
            "m": int(self.sample_count),
            "kind": self.kind.value,
            "variance_estimate": None if self.variance_estimate is None else float(self.variance_estimate),
        }

    def save(self, csv_path, json_path):
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, csv_path, json_path):
        with open(json_path) as fh:
            meta = json.load(fh)
        M = np.atleast_2d(np.loadtxt(csv_path, delimiter=","))
        return cls(M, meta["m"], GramKind(meta["kind"]), meta["variance_estimate"])


class GramAccumulator:
    """Streaming sum of weighted outer products with exact merging.

    Tracks the mean term and the summed squared Frobenius deviation (Chan's
    pairwise update) so the one-sample variance is available at the end.
    Terms are ``w_k g_k g_k^T``.
    """

    def __init__(self, dim):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros((dim, dim))
        self.m2 = 0.0

    def add(self, grads, weights=None):
        G = np.atleast_2d(np.asarray(grads, dtype=float))
        n = G.shape[0]
        if n == 0:
            return self
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        bmean = (G * w[:, None]).T @ G / n
        # sum_k ||w_k g_k g_k^T - bmean||_F^2 without forming the n terms
        sq = np.sum(G * G, axis=1)
        quad = np.einsum("ki,ij,kj->k", G, bmean, G)
        bm2 = float(np.sum(w * w * sq * sq - 2.0 * w * quad) + n * np.sum(bmean * bmean))
        other = GramAccumulator(self.dim)
        other.count, other.mean, other.m2 = n, bmean, max(bm2, 0.0)
        return self.merge(other)

    def merge(self, other):
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + float(np.sum(delta * delta)) * self.count * other.count / n
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        return self

    @property
    def variance(self):
        if self.count < 2:
            return None
        return self.m2 / (self.count - 1)

    def estimate(self, kind):
        if self.count == 0:
            raise ContractError("no samples accumulated")
        return GramEstimate(self.mean.copy(), self.count, kind, self.variance)


def _check_finite(grads, offset=0):
    bad = ~np.all(np.isfinite(grads), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0]) + offset
        raise NumericalError(f"non-finite gradient at sample {i}")


def estimate_H0_reference(model, m, seed, batch_size=8192):
    """Hat H0 = (1/m) sum grad log f(X^i) grad log f(X^i)^T, X^i ~ N(0, I)."""
    m = int(m)
    if m < 1:
        raise ContractError("m must be >= 1")
    rng = np.random.default_rng(seed)
    acc = GramAccumulator(model.dim)
    done = 0
    while done < m:
        n = min(batch_size, m - done)
        X = rng.standard_normal((n, model.dim))
        G = np.atleast_2d(model.grad_log_likelihood(X))
        _check_finite(G, done)
        acc.add(G)
        done += n
    return acc.estimate(GramKind.REFERENCE_MC)


def normalized_weights(log_weights):
    """Exponentiated, max-shifted and normalized weights."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise ContractError("empty weight vector")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise NumericalError("log-weights must be finite or -inf")
    if not np.any(np.isfinite(lw)):
        raise DegenerateEnsembleError("all log-weights are -inf")
    return np.exp(lw - logsumexp(lw))


def estimate_H1_weighted(gradients, log_weights, kind=GramKind.WEIGHTED_IS):
    """Self-normalized weighted Gram matrix sum_j W_j g_j g_j^T / sum_j W_j.

    The variance estimate treats ``n * W_j / sum W`` as the density ratio,
    i.e. the terms are ``n * wbar_j g_j g_j^T``.
    """
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    lw = np.asarray(log_weights, dtype=float)
    if G.shape[0] != lw.shape[0]:
        raise ContractError("gradients and log_weights must have equal length")
    w = normalized_weights(lw)
    keep = w > 0
    _check_finite(G[keep])
    n = G.shape[0]
    acc = GramAccumulator(G.shape[1])
    Gk = np.where(keep[:, None], G, 0.0)
    acc.add(Gk, n * w)
    est = acc.estimate(kind)
    est.matrix = symmetrize_psd((Gk * w[:, None]).T @ Gk)
    return est


def estimate_H1_chain(model, chain, kind=GramKind.CHAIN_EPOCH_AVERAGE):
    """Plain average of gradient outer products over chain states."""
    X = np.atleast_2d(np.asarray(chain, dtype=float))
    if X.shape[0] == 0:
        raise ContractError("chain is empty")
    G = np.atleast_2d(model.grad_log_likelihood(X))
    _check_finite(G)
    return GramAccumulator(model.dim).add(G).estimate(kind)


def epoch_running_mean(history, j, K_star):
    """Mean of H^(i) for i = min(j, K_star), ..., j."""
    lo = min(j, K_star)
    if j < 0 or lo < 0 or j >= len(history):
        raise ContractError(f"history of length {len(history)} does not cover epochs {lo}..{j}")
    window = history[lo:j + 1]
    M = sum(h.matrix for h in window) / len(window)
    count = sum(h.sample_count for h in window)
    return GramEstimate(M, count, GramKind.CHAIN_EPOCH_AVERAGE)


def empirical_one_sample_variance(terms):
    """sum_ij of the unbiased sample variance of entry (i, j) across terms."""
    T = np.asarray(terms, dtype=float)
    if T.ndim == 1:
        T = T[:, None, None]
    if T.shape[0] < 2:
        raise ContractError("need at least two terms")
    return float(np.sum(np.var(T, axis=0, ddof=1)))
