"""Conditional-Gaussian imputation moments and the probit missingness suite.

Each cell's mask row is scored with a probit factor whose linear predictor
depends on the mechanism (state intercepts, per-variable intercepts, a time
slope, or fully saturated combinations); the E-step multiplies this factor
into the emission probabilities and the M-step refits the coefficients by
weighted maximum likelihood with the state posteriors as prior weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .cholesky import log_density, reconstruct_sigma
from .errors import CdghmmError, DataError
from .types import HmmParams, MissParams, PanelDataset

# Probit probabilities are clipped away from {0, 1} before logs so that a
# degenerate all-missing cell never contributes an infinite factor.
PHI_CLIP = 1e-12

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ImputedMoments:
    """Per-cell, per-state conditional moments given the observed coordinates.

    cond_mean : (n, T, m, p)    observed coordinates passed through unchanged
    cond_var  : (n, T, m, p, p) Var(X | x_obs, state); zero rows/cols at
                                observed coordinates, the full state
                                covariance at fully missing cells
    """

    cond_mean: np.ndarray
    cond_var: np.ndarray

    def cond_sscp(self, mu: np.ndarray) -> np.ndarray:
        """E[(X - mu_j)(X - mu_j)' | x_obs, j] for reference means (m, p)."""
        dev = self.cond_mean - mu[np.newaxis, np.newaxis, :, :]
        return self.cond_var + dev[..., :, np.newaxis] * dev[..., np.newaxis, :]


def mask_patterns(mask: np.ndarray):
    """Group the (n, T) cells by identical mask rows.

    Yields (pattern_row, subject_idx, time_idx) with index arrays into the
    panel; iterating patterns instead of cells keeps every per-pattern
    linear solve out of the hot loop.
    """
    n, n_times, p = mask.shape
    flat = mask.reshape(n * n_times, p)
    keys, inverse = np.unique(flat, axis=0, return_inverse=True)
    cells = np.arange(n * n_times)
    for k in range(keys.shape[0]):
        members = cells[inverse == k]
        yield keys[k], members // n_times, members % n_times


def estep_gaussian(
    data: PanelDataset, params: HmmParams
) -> tuple[np.ndarray, ImputedMoments]:
    """Observed-block log-densities and conditional moments in one pass.

    For missing block m and observed block o of a cell,

        E[X_m | x_o, j]   = mu_m + Sigma_mo Sigma_oo^{-1} (x_o - mu_o)
        Var[X_m | x_o, j] = Sigma_mm - Sigma_mo Sigma_oo^{-1} Sigma_om

    with everything else passed through; a fully missing cell gets the
    state's unconditional moments and log-density zero.  Fully observed
    cells never touch the dense covariance: their density comes straight
    from the factor pair.  Both outputs share each pattern's observed-block
    Cholesky factor, which is why they are computed together.
    """
    n, n_times, p = data.values.shape
    m = params.m
    if not data.mask.any():
        gauss = np.empty((n, n_times, m))
        for j in range(m):
            gauss[:, :, j] = log_density(data.values, params.mu[j], params.state_pair(j))
        moments = ImputedMoments(
            cond_mean=np.broadcast_to(
                data.values[:, :, np.newaxis, :], (n, n_times, m, p)
            ),
            cond_var=np.broadcast_to(np.zeros((p, p)), (n, n_times, m, p, p)),
        )
        return gauss, moments

    gauss = np.zeros((n, n_times, m))
    cond_mean = np.empty((n, n_times, m, p))
    cond_var = np.zeros((n, n_times, m, p, p))
    sigmas = None

    for pattern, obs, mis, subj, time in data.pattern_groups():
        rows = data.values[subj, time]
        if mis.size == 0:
            for j in range(m):
                gauss[subj, time, j] = log_density(
                    rows, params.mu[j], params.state_pair(j)
                )
            cond_mean[subj, time] = rows[:, np.newaxis, :]
            continue
        if sigmas is None:
            sigmas = np.stack(
                [reconstruct_sigma(params.state_pair(j)) for j in range(m)]
            )
        if obs.size == 0:
            cond_mean[subj, time] = params.mu[np.newaxis, :, :]
            cond_var[subj, time] = sigmas[np.newaxis, :, :, :]
            continue
        # Batched over states: one Cholesky/solve per pattern, not per state.
        sig_oo = sigmas[:, obs[:, np.newaxis], obs]  # (m, o, o)
        sig_mo = sigmas[:, mis[:, np.newaxis], obs]  # (m, q, o)
        try:
            low = np.linalg.cholesky(sig_oo)
        except np.linalg.LinAlgError as exc:
            i0, t0 = int(subj[0]), int(time[0])
            raise CdghmmError(
                f"singular observed block at cell (subject {i0}, time {t0}), "
                f"pattern {pattern.astype(int)}"
            ) from exc
        x_obs = rows[:, obs]
        dev = x_obs[np.newaxis, :, :] - params.mu[:, np.newaxis, obs]  # (m, G, o)
        z = np.linalg.solve(low, dev.transpose(0, 2, 1))  # (m, o, G)
        logdet = 2.0 * np.sum(np.log(np.diagonal(low, axis1=1, axis2=2)), axis=1)
        gauss[subj, time] = (
            -0.5 * (obs.size * LOG_2PI + logdet[:, np.newaxis] + (z**2).sum(axis=1))
        ).T
        gain = np.linalg.solve(sig_oo, sig_mo.transpose(0, 2, 1))  # (m, o, q)
        imputed = params.mu[:, np.newaxis, mis] + np.einsum(
            "mgo,moq->mgq", dev, gain
        )  # (m, G, q)
        block = sigmas[:, mis[:, np.newaxis], mis] - np.einsum(
            "mqo,mor->mqr", sig_mo, gain
        )  # (m, q, q)
        cm_full = np.empty((subj.size, m, p))
        cm_full[:, :, obs] = x_obs[:, np.newaxis, :]
        cm_full[:, :, mis] = imputed.transpose(1, 0, 2)
        cond_mean[subj, time] = cm_full
        cv_full = np.zeros((m, p, p))
        cv_full[:, mis[:, np.newaxis], mis] = block
        cond_var[subj, time] = cv_full[np.newaxis, :, :, :]
    return gauss, ImputedMoments(cond_mean=cond_mean, cond_var=cond_var)


def conditional_moments(data: PanelDataset, params: HmmParams) -> ImputedMoments:
    """Conditional mean and covariance of each cell under each regular state."""
    return estep_gaussian(data, params)[1]


def observed_gaussian_loglik(data: PanelDataset, params: HmmParams) -> np.ndarray:
    """(n, T, m) log-density of each cell's observed coordinates per state.

    Fully missing cells contribute zero (a likelihood factor of one).
    """
    return estep_gaussian(data, params)[0]


def _linear_predictor(
    miss: MissParams, m: int, p: int, tau: np.ndarray
) -> np.ndarray:
    """(m, T, p) probit linear predictor table for a coefficient set."""
    n_times = tau.shape[0]
    eta = np.zeros((m, n_times, p))
    a = miss.alpha
    if miss.mechanism == "state":
        eta += a[:, np.newaxis, np.newaxis]
    elif miss.mechanism == "state-var":
        eta += a[:, np.newaxis, :]
    elif miss.mechanism == "state-time-shared":
        eta += a[:, np.newaxis, np.newaxis] + miss.beta_t * tau[np.newaxis, :, np.newaxis]
    elif miss.mechanism == "state-time-full":
        eta += a[:, :, np.newaxis]
    elif miss.mechanism == "state-var-time-shared":
        eta += a[:, np.newaxis, :] + miss.beta_t * tau[np.newaxis, :, np.newaxis]
    elif miss.mechanism == "state-var-time-full":
        eta += np.transpose(a, (0, 2, 1))
    else:
        raise DataError(f"no linear predictor for mechanism {miss.mechanism!r}")
    return eta


def log_prob_tables(miss: MissParams, m: int, p: int, tau: np.ndarray):
    """(log P(miss), log P(observed)) tables of shape (m, T, p)."""
    eta = _linear_predictor(miss, m, p, tau)
    phi = np.clip(ndtr(eta), PHI_CLIP, 1.0 - PHI_CLIP)
    return np.log(phi), np.log1p(-phi)


def miss_log_prob(
    mask_row: np.ndarray,
    state: int,
    t: int,
    miss: MissParams,
    tau: np.ndarray,
) -> float:
    """Log probability of one cell's mask row under one regular state.

    `t` is a 0-based index into the time grid `tau`.  MAR returns zero.
    """
    if miss.mechanism == "mar":
        return 0.0
    mask_row = np.asarray(mask_row, dtype=bool)
    p = mask_row.shape[0]
    m = miss.alpha.shape[0]
    lp1, lp0 = log_prob_tables(miss, m, p, tau)
    return float(np.sum(np.where(mask_row, lp1[state, t], lp0[state, t])))


def mask_log_factors(
    data: PanelDataset, miss: MissParams, m: int
) -> np.ndarray:
    """(n, T, m) log mask-probability per cell and regular state.

    Identically zero under MAR.  The time covariate is the 1..T grid rank;
    post-dropout cells are zeroed because their masks are explained by the
    absorbing state, not the probit model.
    """
    n, n_times, p = data.mask.shape
    if miss.mechanism == "mar":
        return np.zeros((n, n_times, m))
    tau = np.arange(1, n_times + 1, dtype=float)
    lp1, lp0 = log_prob_tables(miss, m, p, tau)
    mask = data.mask.astype(float)
    # sum_j m_itj log Phi + (1 - m_itj) log(1 - Phi), all states at once
    out = np.einsum("itp,ctp->itc", mask, lp1) + np.einsum(
        "itp,ctp->itc", 1.0 - mask, lp0
    )
    out[data.dropped_cells()] = 0.0
    return out


@dataclass
class MissDesign:
    """Sufficient aggregation of the weighted probit design.

    The per-cell design has one row per (subject, time, variable) and
    regular state, response m_itj, weight u_hat_itc, excluding post-dropout
    cells.  Since every mechanism's linear predictor is constant within a
    (state, time, variable) bucket, the weighted totals below carry all the
    information the fits need.

    trials    : (m, T)    total posterior weight per state and time
    successes : (m, T, p) posterior-weighted missing counts
    tau       : (T,)      time covariate values (grid ranks 1..T)
    """

    trials: np.ndarray
    successes: np.ndarray
    tau: np.ndarray

    @property
    def n_rows_per_state(self) -> float:
        """Design rows per state: observed-chain cells times p.

        Posteriors over regular states sum to one on every kept cell, so the
        total trial weight counts cells exactly.
        """
        return float(self.trials.sum()) * float(self.successes.shape[2])


def build_miss_design(data: PanelDataset, u_reg: np.ndarray) -> MissDesign:
    """Aggregate the probit design from posteriors over regular states."""
    keep = ~data.dropped_cells()
    w = u_reg * keep[:, :, np.newaxis]  # (n, T, m)
    trials = w.sum(axis=0).T  # (m, T)
    successes = np.einsum("itc,itp->ctp", w, data.mask.astype(float))
    tau = np.arange(1, data.n_times + 1, dtype=float)
    return MissDesign(trials=trials, successes=successes, tau=tau)


def _closed_form_alpha(successes: np.ndarray, trials: np.ndarray, flags: list[str], label: str):
    """Phi^{-1} of clamped weighted fractions; zero where no weight mass."""
    alpha = np.zeros_like(successes, dtype=float)
    has_mass = trials > 0.0
    frac = np.divide(successes, trials, out=np.zeros_like(alpha), where=has_mass)
    clamped = has_mass & ((frac <= PHI_CLIP) | (frac >= 1.0 - PHI_CLIP))
    frac = np.clip(frac, PHI_CLIP, 1.0 - PHI_CLIP)
    alpha[has_mass] = ndtri(frac[has_mass])
    if np.any(~has_mass):
        flags.append(f"{label}: empty design cells set to zero coefficient")
    if np.any(clamped):
        flags.append(f"{label}: separated cells clamped to +/-Phi^-1({PHI_CLIP:g})")
    return alpha


def _probit_loglik(eta, k, n):
    phi = np.clip(ndtr(eta), PHI_CLIP, 1.0 - PHI_CLIP)
    return float(np.sum(k * np.log(phi) + (n - k) * np.log1p(-phi)))


def _probit_scoring(x, k, n, theta0, flags, label, max_iter=100, grad_tol=1e-8):
    """Damped Fisher scoring for a weighted binomial probit.

    x : (B, q) design rows per bucket, k/n : (B,) successes and trials.
    Step-halving keeps the weighted log-likelihood non-decreasing from the
    warm start, which the EM ascent guarantee relies on.
    """
    theta = theta0.astype(float).copy()
    live = n > 0.0
    x, k, n = x[live], k[live], n[live]
    if x.shape[0] == 0:
        flags.append(f"{label}: empty probit design, keeping warm start")
        return theta
    ll = _probit_loglik(x @ theta, k, n)
    for _ in range(max_iter):
        eta = x @ theta
        phi = np.clip(ndtr(eta), PHI_CLIP, 1.0 - PHI_CLIP)
        # The density underflows to zero long before |eta| = 40; clipping
        # only silences spurious overflow from transient scoring steps.
        dens = np.exp(-0.5 * np.clip(eta, -40.0, 40.0) ** 2) / np.sqrt(2.0 * np.pi)
        grad_eta = k * dens / phi - (n - k) * dens / (1.0 - phi)
        grad = x.T @ grad_eta
        if np.max(np.abs(grad)) < grad_tol:
            break
        w = n * dens**2 / (phi * (1.0 - phi))
        info = (x * w[:, np.newaxis]).T @ x
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(info, grad, rcond=None)
            flags.append(f"{label}: singular information matrix, least-squares step")
        # Damp until the likelihood stops decreasing.
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            ll_new = _probit_loglik(x @ cand, k, n)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            flags.append(f"{label}: scoring step rejected, keeping current iterate")
            break
        if ll_new < ll:
            break
        theta, ll = cand, ll_new
    return theta


def fit_miss_params(
    design: MissDesign,
    mechanism: str,
    warm: MissParams | None = None,
) -> tuple[MissParams, list[str]]:
    """Weighted maximum-likelihood probit coefficients for one mechanism.

    Intercept-only mechanisms use the closed form Phi^{-1}(weighted missing
    fraction) cell by cell; the shared-slope mechanisms run damped Fisher
    scoring warm-started from the previous coefficients.
    """
    flags: list[str] = []
    if mechanism == "mar":
        return MissParams.mar(), flags

    trials, successes, tau = design.trials, design.successes, design.tau
    m, n_times, p = successes.shape

    if mechanism == "state":
        k = successes.sum(axis=(1, 2))
        n_tot = trials.sum(axis=1) * p
        alpha = _closed_form_alpha(k, n_tot, flags, "state")
        return MissParams(mechanism=mechanism, alpha=alpha), flags
    if mechanism == "state-var":
        k = successes.sum(axis=1)  # (m, p)
        n_tot = np.repeat(trials.sum(axis=1)[:, np.newaxis], p, axis=1)
        alpha = _closed_form_alpha(k, n_tot, flags, "state-var")
        return MissParams(mechanism=mechanism, alpha=alpha), flags
    if mechanism == "state-time-full":
        k = successes.sum(axis=2)  # (m, T)
        n_tot = trials * p
        alpha = _closed_form_alpha(k, n_tot, flags, "state-time-full")
        return MissParams(mechanism=mechanism, alpha=alpha), flags
    if mechanism == "state-var-time-full":
        k = np.transpose(successes, (0, 2, 1))  # (m, p, T)
        n_tot = np.repeat(trials[:, np.newaxis, :], p, axis=1)
        alpha = _closed_form_alpha(k, n_tot, flags, "state-var-time-full")
        return MissParams(mechanism=mechanism, alpha=alpha), flags

    if mechanism == "state-time-shared":
        # Buckets (c, t): q = m intercepts + one slope.
        k = successes.sum(axis=2).ravel()
        n_tot = (trials * p).ravel()
        x = np.zeros((m * n_times, m + 1))
        for c in range(m):
            x[c * n_times : (c + 1) * n_times, c] = 1.0
            x[c * n_times : (c + 1) * n_times, m] = tau
        theta0 = np.zeros(m + 1)
        if warm is not None and warm.mechanism == mechanism and warm.alpha.shape == (m,):
            theta0[:m] = warm.alpha
            theta0[m] = warm.beta_t
        theta = _probit_scoring(x, k, n_tot, theta0, flags, mechanism)
        return (
            MissParams(mechanism=mechanism, alpha=theta[:m], beta_t=float(theta[m])),
            flags,
        )

    if mechanism == "state-var-time-shared":
        # Buckets (c, j, t): q = m*p intercepts + one slope.
        k = np.transpose(successes, (0, 2, 1)).ravel()
        n_tot = np.repeat(trials[:, np.newaxis, :], p, axis=1).ravel()
        q = m * p
        x = np.zeros((q * n_times, q + 1))
        for cell in range(q):
            x[cell * n_times : (cell + 1) * n_times, cell] = 1.0
            x[cell * n_times : (cell + 1) * n_times, q] = tau
        theta0 = np.zeros(q + 1)
        if warm is not None and warm.mechanism == mechanism and warm.alpha.shape == (m, p):
            theta0[:q] = warm.alpha.ravel()
            theta0[q] = warm.beta_t
        theta = _probit_scoring(x, k, n_tot, theta0, flags, mechanism)
        return (
            MissParams(
                mechanism=mechanism,
                alpha=theta[:q].reshape(m, p),
                beta_t=float(theta[q]),
            ),
            flags,
        )

    raise DataError(f"unknown mechanism {mechanism!r}")
