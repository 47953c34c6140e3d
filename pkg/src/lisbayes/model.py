"""Target densities pi(x) ∝ mu(x) f(x) in whitened coordinates.

Every model exposes a standard Gaussian reference ``mu = N(0, I_d)``; any
physical-space prior covariance is carried by the ``whitening_factor`` so
that ``z = whitening_factor @ x``. Likelihoods are handled exclusively in
the log domain.

All ``log_likelihood`` / ``grad_log_likelihood`` methods accept either a
single point of shape ``(d,)`` or a batch of shape ``(n, d)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ContractError

LOG_2PI = math.log(2.0 * math.pi)


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,) or x.ndim > 2:
        raise ContractError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class WhitenedReference:
    """Standard Gaussian reference with an optional map back to physical space.

    ``whitening_factor`` may be a full ``(d, d)`` matrix or a length-``d``
    vector holding a diagonal factor.
    """

    dim: int
    whitening_factor: np.ndarray | None = None

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ContractError("dim must be positive")
        L = self.whitening_factor
        if L is None:
            return
        L = np.asarray(L, dtype=float)
        if L.ndim == 1:
            if L.shape != (self.dim,) or np.any(L <= 0):
                raise ContractError("diagonal whitening factor must be positive with length dim")
        else:
            if L.shape != (self.dim, self.dim):
                raise ContractError("whitening factor must be (dim, dim)")
            sym = 0.5 * (L + L.T)
            if np.allclose(L, sym, atol=1e-12, rtol=0):
                ok = np.linalg.eigvalsh(sym).min() > 0
            else:
                ok = np.all(np.diag(L) > 0)
            if not ok:
                raise ContractError("whitening factor must have positive eigenvalues/diagonal")
        object.__setattr__(self, "whitening_factor", L)

    def log_density(self, x):
        x = _as_points(x, self.dim)
        return -0.5 * np.sum(x * x, axis=-1) - 0.5 * self.dim * LOG_2PI

    def unwhiten(self, x):
        x = _as_points(x, self.dim)
        L = self.whitening_factor
        if L is None:
            return x.copy()
        if L.ndim == 1:
            return x * L
        return x @ L.T

    def whiten(self, z):
        z = _as_points(z, self.dim)
        L = self.whitening_factor
        if L is None:
            return z.copy()
        if L.ndim == 1:
            return z / L
        return np.linalg.solve(L, z.T).T

    def sample(self, n, rng):
        return rng.standard_normal((n, self.dim))


class TargetModel:
    """Base class: a log-likelihood and its gradient on whitened coordinates.

    Subclasses implement ``_loglik`` and ``_grad`` on a batch ``(n, d)``.
    Instances are treated as immutable after construction.
    """

    reference: WhitenedReference

    @property
    def dim(self):
        return self.reference.dim

    def _loglik(self, X):
        raise NotImplementedError

    def _grad(self, X):
        raise NotImplementedError

    def _loglik_and_grad(self, X):
        return self._loglik(X), self._grad(X)

    def _apply(self, fn, x):
        x = _as_points(x, self.dim)
        if x.ndim == 1:
            out = fn(x[None, :])
            if isinstance(out, tuple):
                return tuple(o[0] for o in out)
            return out[0]
        return fn(x)

    def log_likelihood(self, x):
        return self._apply(self._loglik, x)

    def grad_log_likelihood(self, x):
        return self._apply(self._grad, x)

    def log_likelihood_and_grad(self, x):
        return self._apply(self._loglik_and_grad, x)


def log_unnormalized_target(model, x):
    """log mu(x) + log f(x); ``-inf`` likelihood values propagate."""
    x = _as_points(x, model.dim)
    return model.reference.log_density(x) + model.log_likelihood(x)


class ConstantModel(TargetModel):
    """f(x) = exp(log_c) everywhere; posterior equals the reference."""

    def __init__(self, dim, log_c=0.0):
        self.reference = WhitenedReference(dim)
        self.log_c = float(log_c)

    def _loglik(self, X):
        return np.full(X.shape[0], self.log_c)

    def _grad(self, X):
        return np.zeros_like(X)


class TemperedModel(TargetModel):
    """Likelihood f^beta of a base model, used for tempered SMC targets."""

    def __init__(self, base, beta):
        if not 0.0 <= beta:
            raise ContractError("beta must be nonnegative")
        self.base = base
        self.beta = float(beta)
        self.reference = base.reference

    def _loglik(self, X):
        if self.beta == 0.0:
            return np.zeros(X.shape[0])
        return self.beta * self.base._loglik(X)

    def _grad(self, X):
        return self.beta * self.base._grad(X)

    def _loglik_and_grad(self, X):
        ll, g = self.base._loglik_and_grad(X)
        if self.beta == 0.0:
            return np.zeros_like(ll), np.zeros_like(g)
        return self.beta * ll, self.beta * g


class LinearGaussianModel(TargetModel):
    """log f(x) = -0.5 * ||A x - y||^2 with whitened Gaussian reference."""

    def __init__(self, A, y, whitening_factor=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.shape != (A.shape[0],):
            raise ContractError("y must have length A.shape[0]")
        self.A = A
        self.y = y
        self.reference = WhitenedReference(A.shape[1], whitening_factor)
        C = A.T @ A
        self.C_A = 0.5 * (C + C.T)
        lam, vec = np.linalg.eigh(self.C_A)
        order = np.argsort(lam)[::-1]
        self.C_A_eigenvalues = np.clip(lam[order], 0.0, None)
        self.C_A_eigenvectors = vec[:, order]
        self.u = A.T @ y

    @property
    def dim_obs(self):
        return self.A.shape[0]

    def _loglik(self, X):
        r = X @ self.A.T - self.y
        return -0.5 * np.sum(r * r, axis=1)

    def _grad(self, X):
        # grad log f = -A^T (A x - y)
        return -(X @ self.A.T - self.y) @ self.A

    def _loglik_and_grad(self, X):
        r = X @ self.A.T - self.y
        return -0.5 * np.sum(r * r, axis=1), -r @ self.A

    def tempered(self, beta):
        """Equivalent linear model for f^beta (A, y scaled by sqrt(beta))."""
        s = math.sqrt(beta)
        return LinearGaussianModel(s * self.A, s * self.y, self.reference.whitening_factor)

    def sample_posterior(self, n, rng):
        mean, cov = exact_linear_posterior(self)
        L = np.linalg.cholesky(cov)
        return mean + rng.standard_normal((n, self.dim)) @ L.T


def exact_linear_posterior(model):
    """Posterior mean (C_A + I)^{-1} A^T y and covariance (C_A + I)^{-1}."""
    d = model.dim
    P = model.C_A + np.eye(d)
    cf = linalg.cho_factor(P, lower=True)
    cov = linalg.cho_solve(cf, np.eye(d))
    cov = 0.5 * (cov + cov.T)
    mean = linalg.cho_solve(cf, model.u)
    return mean, cov


def exact_linear_log_Z(model):
    """log Z = -0.5 logdet(I + A A^T) - 0.5 y^T (I + A A^T)^{-1} y.

    Computed through the d x d system: det(I + AA^T) = det(I + C_A) and
    y^T (I + AA^T)^{-1} y = ||y||^2 - u^T (I + C_A)^{-1} u.
    """
    d = model.dim
    cf = linalg.cho_factor(model.C_A + np.eye(d), lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = model.y @ model.y - model.u @ linalg.cho_solve(cf, model.u)
    return -0.5 * logdet - 0.5 * quad


def linear_f_norm_ratio(model):
    """Exact ||f||_{2,mu} / Z for the linear-Gaussian likelihood."""
    log_f2 = exact_linear_log_Z(LinearGaussianModel(math.sqrt(2.0) * model.A, math.sqrt(2.0) * model.y))
    return math.exp(0.5 * log_f2 - exact_linear_log_Z(model))


class LogNormalObservationModel(TargetModel):
    """y = G exp(z) + noise, z = gamma_sqrt * x, noise ~ N(0, sigma^2 I)."""

    def __init__(self, G, gamma_sqrt, sigma, y):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        gamma_sqrt = np.asarray(gamma_sqrt, dtype=float)
        y = np.asarray(y, dtype=float)
        if gamma_sqrt.shape != (G.shape[1],):
            raise ContractError("gamma_sqrt must have length G.shape[1]")
        if y.shape != (G.shape[0],):
            raise ContractError("y must have length G.shape[0]")
        if not sigma > 0:
            raise ContractError("sigma must be positive")
        self.G = G
        self.gamma_sqrt = gamma_sqrt
        self.sigma = float(sigma)
        self.y = y
        self.reference = WhitenedReference(G.shape[1], gamma_sqrt)

    @property
    def dim_obs(self):
        return self.G.shape[0]

    def forward(self, x):
        x = _as_points(x, self.dim)
        return np.exp(x * self.gamma_sqrt) @ self.G.T

    def _loglik(self, X):
        r = self.y - np.exp(X * self.gamma_sqrt) @ self.G.T
        return -0.5 * np.sum(r * r, axis=1) / self.sigma**2

    def _loglik_and_grad(self, X):
        e = np.exp(X * self.gamma_sqrt)
        r = self.y - e @ self.G.T
        ll = -0.5 * np.sum(r * r, axis=1) / self.sigma**2
        g = (r @ self.G) * e * self.gamma_sqrt / self.sigma**2
        return ll, g

    def _grad(self, X):
        return self._loglik_and_grad(X)[1]


class Elliptic1DModel(TargetModel):
    """Log-conductivity inversion for -(k u')' = 0 on (0, 1), u(0)=1, u(1)=0.

    The field lives on the ``n_grid + 1`` cells of a uniform grid with
    ``n_grid`` interior nodes; ``k = exp(mean_field + L x)`` where ``L`` is
    the symmetric square root of the exponential-kernel prior covariance
    ``prior_scale^2 * exp(-|t - t'| / corr_length)`` at cell midpoints.
    Observations are averages of ``u`` over the nodes inside each
    ``(t_lo, t_hi)`` window. Gradients use the discrete adjoint.
    """

    def __init__(self, n_grid, obs_windows, sigma, y, corr_length, prior_scale=1.0, mean_field=0.0):
        n_grid = int(n_grid)
        if n_grid < 1:
            raise ContractError("n_grid must be >= 1")
        if not (sigma > 0 and corr_length > 0 and prior_scale > 0):
            raise ContractError("sigma, corr_length and prior_scale must be positive")
        self.n_grid = n_grid
        self.sigma = float(sigma)
        self.corr_length = float(corr_length)
        self.prior_scale = float(prior_scale)
        self.mean_field = float(mean_field)
        n_cells = n_grid + 1
        self.h = 1.0 / n_cells
        self.nodes = np.linspace(0.0, 1.0, n_grid + 2)
        self.cell_midpoints = (np.arange(n_cells) + 0.5) * self.h
        t = self.cell_midpoints
        cov = prior_scale**2 * np.exp(-np.abs(t[:, None] - t[None, :]) / corr_length)
        lam, vec = np.linalg.eigh(cov)
        self.prior_sqrt = (vec * np.sqrt(lam)) @ vec.T
        self.prior_sqrt = 0.5 * (self.prior_sqrt + self.prior_sqrt.T)
        self.reference = WhitenedReference(n_cells, self.prior_sqrt)

        self.obs_windows = [tuple(map(float, w)) for w in obs_windows]
        O = np.zeros((len(self.obs_windows), n_grid + 2))
        for i, (lo, hi) in enumerate(self.obs_windows):
            mask = (self.nodes >= lo - 1e-12) & (self.nodes <= hi + 1e-12)
            if not mask.any():
                raise ContractError(f"observation window {i} contains no grid node")
            O[i, mask] = 1.0 / mask.sum()
        self.obs_matrix = O
        y = np.asarray(y, dtype=float)
        if y.shape != (len(self.obs_windows),):
            raise ContractError("y must have one entry per observation window")
        self.y = y
        # (n_cells, n_grid + 2) difference operator: (D U)_c = U_{c+1} - U_c
        D = np.zeros((n_cells, n_grid + 2))
        D[np.arange(n_cells), np.arange(n_cells)] = -1.0
        D[np.arange(n_cells), np.arange(n_cells) + 1] = 1.0
        self._D = D

    @property
    def dim_obs(self):
        return len(self.obs_windows)

    def conductivity(self, x):
        x = _as_points(x, self.dim)
        return np.exp(self.mean_field + self.reference.unwhiten(x))

    def _solve(self, kappa, rhs_interior=None):
        """Solve the symmetric tridiagonal stiffness system for one conductivity."""
        n = self.n_grid
        ab = np.zeros((2, n))
        ab[1] = kappa[:-1] + kappa[1:]
        ab[0, 1:] = -kappa[1:-1]
        if rhs_interior is None:
            rhs_interior = np.zeros(n)
            rhs_interior[0] = kappa[0]  # u(0) = 1 moved to the right-hand side
        return linalg.solveh_banded(ab, rhs_interior, lower=False)

    def solve_state(self, x):
        """Full nodal potential (boundary values included) for one parameter."""
        kappa = self.conductivity(np.asarray(x, dtype=float))
        U = np.empty(self.n_grid + 2)
        U[0], U[-1] = 1.0, 0.0
        U[1:-1] = self._solve(kappa)
        return U

    def flux(self, x):
        """Discrete flux k_c (U_{c+1} - U_c) / h on every cell."""
        kappa = self.conductivity(np.asarray(x, dtype=float))
        return kappa * (self._D @ self.solve_state(x)) / self.h

    def forward(self, x):
        x = _as_points(x, self.dim)
        if x.ndim == 1:
            return self.obs_matrix @ self.solve_state(x)
        return np.stack([self.obs_matrix @ self.solve_state(xi) for xi in x])

    def _one(self, x, want_grad):
        kappa = np.exp(self.mean_field + self.prior_sqrt @ x)
        U = np.empty(self.n_grid + 2)
        U[0], U[-1] = 1.0, 0.0
        U[1:-1] = self._solve(kappa)
        r = self.y - self.obs_matrix @ U
        ll = -0.5 * (r @ r) / self.sigma**2
        if not want_grad:
            return ll, None
        g_u = (self.obs_matrix[:, 1:-1].T @ r) / self.sigma**2
        lam = np.zeros(self.n_grid + 2)
        lam[1:-1] = self._solve(kappa, g_u)
        d_kappa = -(self._D @ U) * (self._D @ lam)
        return ll, self.prior_sqrt.T @ (kappa * d_kappa)

    def _loglik(self, X):
        return np.array([self._one(x, False)[0] for x in X])

    def _loglik_and_grad(self, X):
        out = [self._one(x, True) for x in X]
        return np.array([o[0] for o in out]), np.stack([o[1] for o in out])

    def _grad(self, X):
        return self._loglik_and_grad(X)[1]


def check_gradient(model, x, rel_step=1e-5):
    """Relative error between the analytic gradient and central differences.

    The step is ``rel_step * (1 + ||x||)``. Returns ``(max_rel_err, fd, grad)``.
    """
    x = np.asarray(x, dtype=float)
    h = rel_step * (1.0 + np.linalg.norm(x))
    d = x.size
    pts = np.concatenate([x + h * np.eye(d), x - h * np.eye(d)])
    vals = model.log_likelihood(pts)
    fd = (vals[:d] - vals[d:]) / (2.0 * h)
    g = model.grad_log_likelihood(x)
    scale = max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300)
    return float(np.max(np.abs(g - fd)) / scale), fd, g


# --------------------------------------------------------------------------
# Problem generators


def random_orthonormal(rows, cols, rng):
    """Orthonormal columns from a QR factorization of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def power_spectrum(n, scale, decay):
    """scale * j^{-decay} for j = 1..n (decay may be negative)."""
    return scale * np.arange(1, n + 1, dtype=float) ** (-decay)


def random_observation_matrix(dim_obs, dim, lambda0, beta_lambda, rng):
    """G = U diag(lambda0 j^{-beta_lambda}) V^T with Haar-like U, V."""
    k = min(dim_obs, dim)
    U = random_orthonormal(dim_obs, k, rng)
    V = random_orthonormal(dim, k, rng)
    return (U * power_spectrum(k, lambda0, beta_lambda)) @ V.T


@dataclass
class SyntheticProblem:
    model: TargetModel
    truth: np.ndarray
    info: dict = field(default_factory=dict)


def make_linear_problem(dim, dim_obs, seed, lambda0=10.0, beta_lambda=1.0, gamma0=1.0, beta_gamma=0.0,
                        noise_std=1.0):
    """Linear-Gaussian inverse problem A = G Gamma^{1/2}, whitened truth ~ N(0, I)."""
    rng = np.random.default_rng(seed)
    G = random_observation_matrix(dim_obs, dim, lambda0, beta_lambda, rng)
    gamma_sqrt = np.sqrt(power_spectrum(dim, gamma0, beta_gamma))
    A = G * gamma_sqrt
    truth = rng.standard_normal(dim)
    y = A @ truth + noise_std * rng.standard_normal(dim_obs)
    model = LinearGaussianModel(A, y, whitening_factor=gamma_sqrt)
    return SyntheticProblem(model, truth, {"G": G})


def make_lognormal_problem(dim, dim_obs, seed, gamma0=1.0, beta_gamma=2.0, lambda0=10.0, beta_lambda=1.0,
                           sigma=1.0):
    """Linear observations of exp(z) with z ~ N(0, diag(gamma0 j^{-beta_gamma}))."""
    rng = np.random.default_rng(seed)
    G = random_observation_matrix(dim_obs, dim, lambda0, beta_lambda, rng)
    gamma_sqrt = np.sqrt(power_spectrum(dim, gamma0, beta_gamma))
    truth = rng.standard_normal(dim)
    y = G @ np.exp(gamma_sqrt * truth) + sigma * rng.standard_normal(dim_obs)
    return SyntheticProblem(LogNormalObservationModel(G, gamma_sqrt, sigma, y), truth)


def default_obs_windows(n_obs, width=0.05):
    centers = (np.arange(n_obs) + 1.0) / (n_obs + 1.0)
    return [(c - width / 2, c + width / 2) for c in centers]


def make_elliptic_problem(n_grid, dim_obs, seed, sigma=0.01, corr_length=0.3, prior_scale=1.0, width=0.05):
    rng = np.random.default_rng(seed)
    windows = default_obs_windows(dim_obs, width)
    probe = Elliptic1DModel(n_grid, windows, sigma, np.zeros(dim_obs), corr_length, prior_scale)
    truth = rng.standard_normal(probe.dim)
    y = probe.forward(truth) + sigma * rng.standard_normal(dim_obs)
    model = Elliptic1DModel(n_grid, windows, sigma, y, corr_length, prior_scale)
    return SyntheticProblem(model, truth)


def write_synthetic_csv(problem, path_data, path_truth):
    """Write observed data and whitened truth as single-column CSV files."""
    with open(path_data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "y"])
        for i, v in enumerate(problem.model.y):
            w.writerow([i, repr(float(v))])
    with open(path_truth, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x_true"])
        for i, v in enumerate(problem.truth):
            w.writerow([i, repr(float(v))])
