"""Scaled forward/backward recursions and posterior expectations.

Probabilities are normalized per cell instead of carried in log space: the
absorbing dropout state puts exact zeros into the emission vector, which a
pure log-space recursion would have to special-case.  The per-cell log
normalizers accumulate into the observed-data log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImpossibleObservationError
from .missingness import mask_log_factors, observed_gaussian_loglik
from .types import HmmParams, PanelDataset

NEG_INF = -np.inf


@dataclass
class Posteriors:
    """Smoothed quantities for one parameter set.

    alpha, beta : (n, T, K) scaled forward/backward probabilities
    u_hat       : (n, T, K) state posteriors, rows sum to one
    v_hat       : (n, T, K, K) transition posteriors; index t holds the
                  (t-1 -> t) transition, so t = 0 is all zero
    scale_log   : (n, T) accumulated log normalizers
    loglik      : total observed-data log-likelihood
    """

    alpha: np.ndarray
    beta: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    scale_log: np.ndarray
    loglik: float


def emission_log_table(
    data: PanelDataset, params: HmmParams, gauss_ll: np.ndarray | None = None
) -> np.ndarray:
    """(n, T, K) joint log factor per cell and chain state.

    Regular states combine the Gaussian density of the observed coordinates
    (zero when nothing is observed), the probit mask factor, and a dropout
    indicator that zeroes them on dropped cells.  The absorbing state, when
    present, has factor one exactly on dropped cells and zero elsewhere.
    ``gauss_ll`` lets the EM reuse the densities already computed together
    with the conditional moments.
    """
    n, n_times, _ = data.values.shape
    m, k = params.m, params.k_states
    if gauss_ll is None:
        gauss_ll = observed_gaussian_loglik(data, params)
    table = np.full((n, n_times, k), NEG_INF)
    table[:, :, :m] = gauss_ll + mask_log_factors(data, params.miss, m)
    dropped = data.dropped_cells()
    table[:, :, :m][dropped] = NEG_INF
    if k == m + 1:
        table[:, :, m] = np.where(dropped, 0.0, NEG_INF)
    return table


def emission_log_factors(
    data: PanelDataset, params: HmmParams, i: int, t: int
) -> np.ndarray:
    """Length-K log emission factor vector for one cell."""
    return emission_log_table(data, params)[i, t]


def _shifted_weights(table: np.ndarray):
    """exp(table - rowmax) with the rowmax kept for log-likelihood recovery.

    Fully impossible cells (all -inf) get a zero weight row; the forward
    pass raises on them with the offending cell index.
    """
    shift = np.max(table, axis=2)
    safe_shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(invalid="ignore"):
        w = np.exp(table - safe_shift[:, :, np.newaxis])
    w[~np.isfinite(table)] = 0.0
    return w, safe_shift


def _forward_from_table(table: np.ndarray, params: HmmParams, weights=None):
    n, n_times, k = table.shape
    w, shift = weights if weights is not None else _shifted_weights(table)
    alpha = np.empty((n, n_times, k))
    scale_log = np.empty((n, n_times))
    state = params.delta[np.newaxis, :] * w[:, 0, :]
    for t in range(n_times):
        if t > 0:
            state = (alpha[:, t - 1, :] @ params.gamma) * w[:, t, :]
        mass = state.sum(axis=1)
        bad = np.flatnonzero(~(mass > 0.0))  # catches zero and non-finite mass
        if bad.size:
            i = int(bad[0])
            raise ImpossibleObservationError(
                f"zero emission mass at subject {i}, time {t}",
                subject=i,
                time=t,
            )
        alpha[:, t, :] = state / mass[:, np.newaxis]
        scale_log[:, t] = np.log(mass) + shift[:, t]
    return alpha, scale_log


def _backward_from_table(
    table: np.ndarray, params: HmmParams, scale_log: np.ndarray, weights=None
):
    n, n_times, k = table.shape
    w, shift = weights if weights is not None else _shifted_weights(table)
    # Reuse the forward normalizers so beta stays well conditioned; any
    # positive per-time scaling cancels in the posterior ratios.
    scale = np.exp(scale_log - shift)
    beta = np.empty((n, n_times, k))
    beta[:, n_times - 1, :] = 1.0
    for t in range(n_times - 2, -1, -1):
        beta[:, t, :] = (w[:, t + 1, :] * beta[:, t + 1, :]) @ params.gamma.T
        beta[:, t, :] /= scale[:, t + 1][:, np.newaxis]
    return beta


def forward(data: PanelDataset, params: HmmParams):
    """Scaled forward probabilities and per-cell log normalizers.

    Per-subject log-likelihood is the time-sum of ``scale_log``.
    """
    table = emission_log_table(data, params)
    return _forward_from_table(table, params)


def backward(data: PanelDataset, params: HmmParams) -> np.ndarray:
    """Scaled backward probabilities; the last time slice is all ones."""
    table = emission_log_table(data, params)
    _, scale_log = _forward_from_table(table, params)
    return _backward_from_table(table, params, scale_log)


def loglik(data: PanelDataset, params: HmmParams) -> float:
    _, scale_log = forward(data, params)
    return float(scale_log.sum())


def posteriors(
    data: PanelDataset, params: HmmParams, gauss_ll: np.ndarray | None = None
) -> Posteriors:
    """State and transition posteriors plus the observed log-likelihood."""
    table = emission_log_table(data, params, gauss_ll=gauss_ll)
    weights = _shifted_weights(table)
    alpha, scale_log = _forward_from_table(table, params, weights=weights)
    beta = _backward_from_table(table, params, scale_log, weights=weights)
    w = weights[0]

    u_hat = alpha * beta
    u_hat /= u_hat.sum(axis=2, keepdims=True)

    n, n_times, k = table.shape
    v_hat = np.zeros((n, n_times, k, k))
    for t in range(1, n_times):
        joint = (
            alpha[:, t - 1, :, np.newaxis]
            * params.gamma[np.newaxis, :, :]
            * (w[:, t, :] * beta[:, t, :])[:, np.newaxis, :]
        )
        v_hat[:, t] = joint / joint.sum(axis=(1, 2))[:, np.newaxis, np.newaxis]

    return Posteriors(
        alpha=alpha,
        beta=beta,
        u_hat=u_hat,
        v_hat=v_hat,
        scale_log=scale_log,
        loglik=float(scale_log.sum()),
    )
