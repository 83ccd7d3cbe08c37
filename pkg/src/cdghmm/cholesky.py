"""Modified Cholesky factorization of covariance matrices.

A symmetric positive-definite ``sigma`` factors uniquely as

    T @ sigma @ T.T == diag(d)

with ``T`` unit lower triangular and ``d`` strictly positive.  Row ``r`` of
``T`` holds the negated coefficients of the least-squares regression of
variable ``r`` on variables ``1..r-1``, and ``d[r]`` is the innovation
variance of that regression, so the factorization reads directly as a
generalized autoregression across the coordinate order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DecompositionError

LOG_2PI = float(np.log(2.0 * np.pi))

# Pivots below this fraction of the largest diagonal entry are treated as a
# positive-definiteness failure; EM with degenerate states can produce
# near-singular scatter matrices and must fail loudly rather than return junk.
PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class ModCholPair:
    """Unit lower triangular factor and innovation variances.

    t_mat : (p, p) unit lower triangular
    d_diag : (p,) strictly positive innovation variances
    """

    t_mat: np.ndarray
    d_diag: np.ndarray

    @property
    def p(self) -> int:
        return self.t_mat.shape[0]

    def d_matrix(self) -> np.ndarray:
        """The diagonal factor as a dense (p, p) matrix."""
        return np.diag(self.d_diag)


def decompose(sigma: np.ndarray, sym_tol: float = 1e-10) -> ModCholPair:
    """Factor an SPD matrix as T sigma T' = D.

    Computed from the standard lower Cholesky factor L (sigma = L L'): with
    L = Lu S, Lu unit lower triangular and S = diag(L), the unique pair is
    T = Lu^{-1} and d = diag(L)^2.

    Raises
    ------
    DecompositionError
        If ``sigma`` is asymmetric beyond ``sym_tol`` or any Cholesky pivot
        falls below ``PIVOT_RTOL`` times the largest diagonal entry; the
        message names the first failing leading minor.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DecompositionError(f"expected a square matrix, got shape {sigma.shape}")
    if not np.all(np.abs(sigma - sigma.T) <= sym_tol):
        raise DecompositionError(
            f"matrix is asymmetric beyond tolerance {sym_tol:g}"
        )
    p = sigma.shape[0]
    tol = PIVOT_RTOL * max(float(np.max(np.diag(sigma))), 0.0)

    # Cholesky-Banachiewicz with an explicit pivot check so the failing
    # leading minor can be reported.
    low = np.zeros((p, p))
    for i in range(p):
        for j in range(i):
            low[i, j] = (sigma[i, j] - low[i, :j] @ low[j, :j]) / low[j, j]
        pivot = sigma[i, i] - low[i, :i] @ low[i, :i]
        if not pivot > tol:
            raise DecompositionError(
                f"matrix is not positive definite: leading minor of order "
                f"{i + 1} has pivot {pivot:.3e}",
                minor=i + 1,
            )
        low[i, i] = np.sqrt(pivot)

    diag = np.diag(low).copy()
    unit_low = low / diag[np.newaxis, :]
    t_mat = solve_triangular(unit_low, np.eye(p), lower=True, unit_diagonal=True)
    # Enforce the exact structural zeros/ones the sub-diagonal solve implies.
    t_mat = np.tril(t_mat)
    np.fill_diagonal(t_mat, 1.0)
    return ModCholPair(t_mat=t_mat, d_diag=diag**2)


def reconstruct_sigma_inverse(pair: ModCholPair) -> np.ndarray:
    """Return sigma^{-1} = T' D^{-1} T."""
    return pair.t_mat.T @ (pair.t_mat / pair.d_diag[:, np.newaxis])


def reconstruct_sigma(pair: ModCholPair) -> np.ndarray:
    """Return sigma = T^{-1} D T^{-T} without forming the dense inverse."""
    inv_t = solve_triangular(
        pair.t_mat, np.eye(pair.p), lower=True, unit_diagonal=True
    )
    return (inv_t * pair.d_diag[np.newaxis, :]) @ inv_t.T


def log_determinant(pair: ModCholPair) -> float:
    """log|sigma|, which equals sum(log d) because T has unit determinant."""
    return float(np.sum(np.log(pair.d_diag)))


def log_density(x: np.ndarray, mu: np.ndarray, pair: ModCholPair) -> np.ndarray | float:
    """Gaussian log-density with covariance given by its factor pair.

    Accepts a single p-vector or an array of shape (..., p); returns a float
    or an array of shape (...,) accordingly.  Uses the quadratic form
    (x - mu)' T' D^{-1} T (x - mu) and |sigma| = prod(d).
    """
    x = np.asarray(x, dtype=float)
    resid = (x - mu) @ pair.t_mat.T
    quad = np.sum(resid**2 / pair.d_diag, axis=-1)
    out = -0.5 * (pair.p * LOG_2PI + log_determinant(pair) + quad)
    if out.ndim == 0:
        return float(out)
    return out
