"""M-step maximizers of the (T, D) factors for all eight family members.

Every member reduces to the same building block: row r of a unit lower
triangular factor solves a (r-1) x (r-1) linear system whose matrix is a
(possibly weighted) leading submatrix of the scatter stack and whose right
hand side is the matching sub-row.  Members with a shared D divide each
row's system by a constant, which cancels, so their factors come from the
plain pooled scatter; only the equal-T/variable-D members (EVA, EVI) keep a
state-dependent divisor and are handled by one conditional-maximization
cycle per M-step, which preserves the EM ascent property.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolverError
from .missingness import ImputedMoments
from .types import ModelStructure

# Effective counts below p flag a degenerate state; the solve may still go
# through (least-squares fallback) but the fit should carry a warning.
DEGENERATE_RATIO = 1.0


@dataclass
class WeightedScatter:
    """Posterior-weighted scatter matrices and effective counts.

    s    : (m, p, p) per-state scatter S_j
    n_j  : (m,) effective counts, total posterior weight per regular state
    pi_j : (m,) n_j normalized by the total regular-state weight; equals
           n_j / (n T) whenever no dropout mass is present
    """

    s: np.ndarray
    n_j: np.ndarray
    pi_j: np.ndarray

    @property
    def m(self) -> int:
        return self.s.shape[0]

    @property
    def p(self) -> int:
        return self.s.shape[1]


def update_mean_and_scatter(
    moments: ImputedMoments, u_reg: np.ndarray
) -> tuple[np.ndarray, WeightedScatter, list[str]]:
    """Posterior-weighted means and scatters from conditional moments.

    mu_j is the weighted mean of the conditional expectations; S_j is the
    weighted mean of Var(X | x_obs, j) plus the outer products of the
    conditional means re-centered at the *updated* mu_j, which is the exact
    maximizer of the expected complete-data log-likelihood.  The absorbing
    state never enters: ``u_reg`` holds regular-state posteriors only, and
    they are identically zero on post-dropout cells.
    """
    flags: list[str] = []
    n_j = u_reg.sum(axis=(0, 1))  # (m,)
    p = moments.cond_mean.shape[3]
    if np.any(n_j <= 0.0):
        raise SolverError(
            f"state(s) {np.flatnonzero(n_j <= 0.0) + 1} have zero posterior mass"
        )
    mu = np.einsum("itj,itjp->jp", u_reg, moments.cond_mean) / n_j[:, np.newaxis]
    dev = moments.cond_mean - mu[np.newaxis, np.newaxis, :, :]
    s = np.einsum("itj,itjp,itjq->jpq", u_reg, dev, dev)
    s += np.einsum("itj,itjpq->jpq", u_reg, moments.cond_var)
    s /= n_j[:, np.newaxis, np.newaxis]
    s = 0.5 * (s + np.transpose(s, (0, 2, 1)))  # keep exactly symmetric
    low = np.flatnonzero(n_j < DEGENERATE_RATIO * p)
    for j in low:
        flags.append(
            f"state {j + 1}: effective count {n_j[j]:.3f} below dimension {p}"
        )
    scatter = WeightedScatter(s=s, n_j=n_j, pi_j=n_j / n_j.sum())
    return mu, scatter, flags


def _solve_rows(
    lhs_stack: np.ndarray,
    rhs_stack: np.ndarray,
    flags: list[str],
    label: str,
) -> np.ndarray:
    """Unit lower triangular factor whose row r solves the r-1 system.

    ``lhs_stack``/``rhs_stack`` are (p, p) matrices; row r of the output
    solves lhs[:r, :r] x = -rhs[r, :r].  Singular systems fall back to a
    pivoted least-squares solution and flag the caller.
    """
    p = lhs_stack.shape[0]
    t_mat = np.eye(p)
    for r in range(1, p):
        a = lhs_stack[:r, :r]
        b = rhs_stack[r, :r]
        try:
            coef = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            coef, *_ = np.linalg.lstsq(a, b, rcond=None)
            flags.append(f"{label}: singular system at row {r + 1}, least-squares fallback")
        if not np.all(np.isfinite(coef)):
            raise SolverError(f"{label}: non-finite solution at row {r + 1}")
        t_mat[r, :r] = -coef
    return t_mat


def _diag_quad(t_mat: np.ndarray, s: np.ndarray) -> np.ndarray:
    """diag(T S T') without forming the full product."""
    return np.einsum("rp,pq,rq->r", t_mat, s, t_mat)


def solve_vva(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-state factors; reproduces each S_j exactly (traditional update)."""
    flags: list[str] = []
    m, p = scatter.m, scatter.p
    chol_t = np.empty((m, p, p))
    chol_d = np.empty((m, p))
    for j in range(m):
        chol_t[j] = _solve_rows(scatter.s[j], scatter.s[j], flags, f"vva state {j + 1}")
        chol_d[j] = _diag_quad(chol_t[j], scatter.s[j])
    return chol_t, chol_d, flags


def solve_vvi(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-state factors, per-state isotropic scale tr(T S T') / p."""
    chol_t, chol_d, flags = solve_vva(scatter)
    iso = chol_d.mean(axis=1)
    return chol_t, np.repeat(iso[:, np.newaxis], scatter.p, axis=1), flags


def solve_vea(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-state factors, shared anisotropic D = sum_j pi_j diag(T_j S_j T_j')."""
    chol_t, per_state_d, flags = solve_vva(scatter)
    shared = np.einsum("j,jp->p", scatter.pi_j, per_state_d)
    return chol_t, np.repeat(shared[np.newaxis, :], scatter.m, axis=0), flags


def solve_vei(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Per-state factors, shared isotropic scale sum_j pi_j tr(T_j S_j T_j')/p."""
    chol_t, per_state_d, flags = solve_vva(scatter)
    iso = float(np.einsum("j,jp->", scatter.pi_j, per_state_d) / scatter.p)
    return chol_t, np.full((scatter.m, scatter.p), iso), flags


def _pooled(scatter: WeightedScatter) -> np.ndarray:
    return np.einsum("j,jpq->pq", scatter.pi_j, scatter.s)


def solve_eea(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Shared factor and shared anisotropic D.

    Within each row system the common divisor d_rr cancels, so the shared
    factor solves the plain pooled-scatter systems; D is then the weighted
    diagonal of T S_j T', which pools the same way.
    """
    flags: list[str] = []
    pooled = _pooled(scatter)
    t_shared = _solve_rows(pooled, pooled, flags, "eea")
    d_shared = _diag_quad(t_shared, pooled)
    m = scatter.m
    return (
        np.repeat(t_shared[np.newaxis], m, axis=0),
        np.repeat(d_shared[np.newaxis], m, axis=0),
        flags,
    )


def solve_eei(scatter: WeightedScatter) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Shared factor and a single scale delta = sum_j pi_j tr(T S_j T')/p."""
    chol_t, d_shared, flags = solve_eea(scatter)
    iso = float(d_shared[0].mean())
    return chol_t, np.full((scatter.m, scatter.p), iso), flags


def solve_eva(
    scatter: WeightedScatter, prev_d: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Shared factor, per-state anisotropic D; one conditional cycle.

    The row-r system carries genuine state-dependent weights n_j / d_r^(j),
    so T and the D_j stay coupled.  Holding D at its previous value (its
    diagonal-of-S_j reading when no previous value exists), the factor step
    is exact, and the D_j step is exact given the new factor; each cycle
    therefore cannot decrease the expected complete-data log-likelihood.
    """
    flags: list[str] = []
    m, p = scatter.m, scatter.p
    if prev_d is None:
        prev_d = np.stack([np.diag(scatter.s[j]).copy() for j in range(m)])
    t_shared = np.eye(p)
    for r in range(1, p):
        w = scatter.n_j / prev_d[:, r]  # (m,)
        a = np.einsum("j,jab->ab", w, scatter.s[:, :r, :r])
        b = np.einsum("j,ja->a", w, scatter.s[:, r, :r])
        try:
            coef = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            coef, *_ = np.linalg.lstsq(a, b, rcond=None)
            flags.append(f"eva: singular system at row {r + 1}, least-squares fallback")
        t_shared[r, :r] = -coef
    chol_d = np.stack([_diag_quad(t_shared, scatter.s[j]) for j in range(m)])
    return np.repeat(t_shared[np.newaxis], m, axis=0), chol_d, flags


def solve_evi(
    scatter: WeightedScatter, prev_delta: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Shared factor, per-state isotropic scales; one conditional cycle.

    With D_j = delta_j I the row weights n_j / delta_j no longer depend on
    the row, so the factor solves the systems of a single reweighted pooled
    scatter; the scale step is then exact given the new factor.
    """
    flags: list[str] = []
    m, p = scatter.m, scatter.p
    if prev_delta is None:
        prev_delta = np.array([np.trace(scatter.s[j]) / p for j in range(m)])
    w = scatter.n_j / prev_delta
    pooled = np.einsum("j,jpq->pq", w / w.sum(), scatter.s)
    t_shared = _solve_rows(pooled, pooled, flags, "evi")
    delta = np.array([_diag_quad(t_shared, scatter.s[j]).mean() for j in range(m)])
    return (
        np.repeat(t_shared[np.newaxis], m, axis=0),
        np.repeat(delta[:, np.newaxis], p, axis=1),
        flags,
    )


def cov_q(chol_t: np.ndarray, chol_d: np.ndarray, scatter: WeightedScatter) -> float:
    """Covariance block of the expected complete-data log-likelihood.

    -(1/2) sum_j n_j [ log|D_j| + tr(T_j S_j T_j' D_j^{-1}) ], dropping the
    constant 2*pi term; used to verify the ascent of conditional cycles.
    """
    total = 0.0
    for j in range(scatter.m):
        quad = _diag_quad(chol_t[j], scatter.s[j])
        total -= 0.5 * scatter.n_j[j] * (
            np.sum(np.log(chol_d[j])) + np.sum(quad / chol_d[j])
        )
    return float(total)


def solve_member(
    structure: ModelStructure,
    scatter: WeightedScatter,
    prev: tuple[np.ndarray, np.ndarray] | None = None,
    n_cycles: int = 1,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Dispatch to the member's update; output satisfies the structure exactly.

    ``prev`` carries the previous iteration's (chol_t, chol_d) and seeds the
    conditional cycles of EVA/EVI; ``n_cycles`` > 1 re-runs those cycles
    (used by tests that compare members after cycle convergence).
    """
    name = structure.name
    chol_t, chol_d, flags = _solve_member_dispatch(name, scatter, prev, n_cycles)
    bad = np.argwhere(~(chol_d > 0.0))
    if bad.size:
        j, r = bad[0]
        raise SolverError(
            f"{name}: non-positive innovation variance at state {j + 1}, "
            f"coordinate {r + 1} (degenerate scatter)"
        )
    return chol_t, chol_d, flags


def _solve_member_dispatch(
    name: str,
    scatter: WeightedScatter,
    prev: tuple[np.ndarray, np.ndarray] | None,
    n_cycles: int,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if name == "VVA":
        return solve_vva(scatter)
    if name == "VVI":
        return solve_vvi(scatter)
    if name == "VEA":
        return solve_vea(scatter)
    if name == "VEI":
        return solve_vei(scatter)
    if name == "EEA":
        return solve_eea(scatter)
    if name == "EEI":
        return solve_eei(scatter)
    if name == "EVA":
        chol_d = prev[1] if prev is not None else None
        flags: list[str] = []
        chol_t = None
        for _ in range(max(1, n_cycles)):
            chol_t, chol_d, f = solve_eva(scatter, prev_d=chol_d)
            flags.extend(f)
        return chol_t, chol_d, flags
    if name == "EVI":
        delta = prev[1][:, 0] if prev is not None else None
        flags = []
        chol_t = None
        chol_d = None
        for _ in range(max(1, n_cycles)):
            chol_t, chol_d, f = solve_evi(scatter, prev_delta=delta)
            delta = chol_d[:, 0]
            flags.extend(f)
        return chol_t, chol_d, flags
    raise SolverError(f"unknown structure {name!r}")
