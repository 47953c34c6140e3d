"""Leading eigensubspaces, residuals tr(P_perp H P_perp) and truncation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def _matrix(H):
    M = getattr(H, "matrix", H)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ContractError(f"expected a square matrix, got {M.shape}")
    return 0.5 * (M + M.T)


def _fix_signs(V):
    """Make the largest-magnitude entry of every column positive (lowest index on ties)."""
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)  # argmax returns the first maximal index
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def sorted_eigh(H):
    """Eigenpairs of a symmetric matrix in descending eigenvalue order."""
    lam, vec = np.linalg.eigh(_matrix(H))
    order = np.argsort(-lam, kind="stable")
    return lam[order], _fix_signs(vec[:, order])


@dataclass
class Subspace:
    """Orthonormal basis of a retained subspace plus its complement.

    ``complement`` spans the orthogonal complement; it is needed to draw
    conditional reference samples.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    source_spectrum: np.ndarray
    complement: np.ndarray

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def rank(self):
        return self.basis.shape[1]

    @classmethod
    def from_basis(cls, V):
        """Wrap an arbitrary orthonormal basis, completing its complement."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        d, r = V.shape
        if r and not np.allclose(V.T @ V, np.eye(r), atol=1e-10):
            raise ContractError("basis columns must be orthonormal")
        if r == d:
            comp = np.zeros((d, 0))
        elif r == 0:
            comp = np.eye(d)
        else:
            q, _ = np.linalg.qr(np.hstack([V, np.eye(d)]))
            comp = q[:, r:d]
            comp = comp - V @ (V.T @ comp)
            comp, _ = np.linalg.qr(comp)
        return cls(V, np.full(r, np.nan), np.full(d, np.nan), comp)

    def projector(self):
        return self.basis @ self.basis.T

    def rotated(self, Q):
        """Same span, basis V Q for an orthogonal ``Q``."""
        return Subspace(self.basis @ Q, self.eigenvalues, self.source_spectrum, self.complement)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([repr(float(v)) for v in self.eigenvalues])
            for row in self.basis:
                w.writerow([repr(float(v)) for v in row])


def leading_eigs(H, d_r):
    """Subspace of the ``d_r`` leading eigenvectors of the symmetrized matrix.

    ``d_r = 0`` yields an empty basis.
    """
    M = _matrix(H)
    d = M.shape[0]
    d_r = int(d_r)
    if not 0 <= d_r <= d:
        raise ContractError(f"d_r={d_r} outside [0, {d}]")
    lam, vec = sorted_eigh(M)
    return Subspace(vec[:, :d_r], lam[:d_r].copy(), lam, vec[:, d_r:])


def _basis(S):
    return S.basis if isinstance(S, Subspace) else np.atleast_2d(np.asarray(S, dtype=float))


def residual(S, H):
    """R(X_r, H) = tr(H) - tr(V^T H V), clamped at zero."""
    V = _basis(S)
    M = _matrix(H)
    if V.shape[0] != M.shape[0]:
        raise ContractError("basis and matrix dimensions differ")
    tr = float(np.trace(M))
    val = tr - float(np.trace(V.T @ M @ V)) if V.shape[1] else tr
    return max(val, 0.0)


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    gaps: np.ndarray
    tail_sums: np.ndarray

    def rows(self):
        d = len(self.eigenvalues)
        for r in range(1, d + 1):
            gap = self.gaps[r - 1] if r - 1 < len(self.gaps) else float("nan")
            yield r, self.eigenvalues[r - 1], gap, self.tail_sums[r]


def spectrum_report(H):
    """Descending eigenvalues, consecutive gaps and tail sums.

    ``tail_sums[r] = sum_{i > r} lambda_i`` for r = 0..d.
    """
    lam = np.sort(np.linalg.eigvalsh(_matrix(H)))[::-1]
    lam = np.where(np.abs(lam) < 1e-300, 0.0, lam)
    gaps = lam[:-1] - lam[1:]
    tails = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
    tails = np.minimum.accumulate(np.clip(tails, 0.0, None))
    return SpectrumReport(lam, gaps, tails)


def truncate_by_tail(H, tol):
    """Smallest d_r whose tail eigenvalue sum is <= tol (d if none)."""
    if not tol > 0:
        raise ContractError("tol must be positive")
    tails = spectrum_report(H).tail_sums
    hits = np.flatnonzero(tails <= tol)
    return int(hits[0]) if hits.size else len(tails) - 1


def split(x, S):
    """Coefficients ``V^T x`` and the complement component ``x - V V^T x``."""
    V = _basis(S)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != V.shape[0]:
        raise ContractError("point and subspace dimensions differ")
    coeffs = x @ V
    return coeffs, x - coeffs @ V.T


def combine(coeffs, perp, S):
    """Inverse of :func:`split`."""
    return np.asarray(coeffs) @ _basis(S).T + perp


def _check_psd(M, name):
    lam = np.linalg.eigvalsh(M)
    if lam.min() < -1e-8 * max(abs(lam.max()), 1.0):
        raise ContractError(f"{name} is not positive semidefinite (min eigenvalue {lam.min():.3g})")


def davis_kahan_free_bounds(H_true, H_hat, d_r):
    """Gap-free upper bounds on the effective residual R(X_hat_r, H_true).

    Returns ``(bound1, bound2, actual)`` with::

        bound1 = sum_{i>d_r} lambda_i(H_true) + 2 sqrt(d_r) ||H_hat - H_true||_F
        bound2 = sum_{i>d_r} lambda_i(H_hat) + sqrt(d_r) ||H_hat - H_true||_F + tr(H_true - H_hat)

    Raises if either inequality fails beyond 1e-8.
    """
    A, B = _matrix(H_true), _matrix(H_hat)
    _check_psd(A, "H_true")
    _check_psd(B, "H_hat")
    S = leading_eigs(B, d_r)
    actual = residual(S, A)
    fro = float(np.linalg.norm(B - A))
    root = math.sqrt(d_r)
    bound1 = float(spectrum_report(A).tail_sums[d_r]) + 2.0 * root * fro
    bound2 = float(spectrum_report(B).tail_sums[d_r]) + root * fro + float(np.trace(A - B))
    if actual > min(bound1, bound2) + 1e-8:
        raise AssertionError(f"gap-free residual bound violated: {actual} > min({bound1}, {bound2})")
    return bound1, bound2, actual
