"""Misclassification and parameter-recovery scoring with label matching.

Latent states are only identified up to a permutation, so decoded labels
are matched to the truth by the permutation minimizing the error count and
every RMSE is computed under that same permutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .cholesky import reconstruct_sigma
from .errors import CdghmmError
from .types import HmmParams


@dataclass
class ScoreReport:
    misclass: float
    rmse_gamma: float
    rmse_delta: float
    rmse_mu: float
    rmse_sigma: float
    permutation: tuple[int, ...]


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def _permute_params(params: HmmParams, perm: tuple[int, ...]) -> HmmParams:
    """Relabel regular states so fitted state j becomes perm[j]."""
    m = params.m
    inv = np.empty(m, dtype=int)
    inv[list(perm)] = np.arange(m)  # new label -> old label
    k = params.k_states
    chain_map = np.arange(k)
    chain_map[:m] = inv
    delta = params.delta[chain_map]
    gamma = params.gamma[np.ix_(chain_map, chain_map)]
    return HmmParams(
        m=m,
        delta=delta,
        gamma=gamma,
        mu=params.mu[inv],
        chol_t=params.chol_t[inv],
        chol_d=params.chol_d[inv],
        miss=params.miss,
    )


def score(
    decoded: np.ndarray,
    true_states: np.ndarray,
    fitted: HmmParams,
    truth: HmmParams,
) -> ScoreReport:
    """Permutation-minimized misclassification plus per-block RMSEs.

    Dropout cells (true label m) are excluded from the misclassification;
    the transition RMSE runs over the m regular rows including the dropout
    column when present, the initial-distribution RMSE over the m regular
    entries, and the covariance RMSE over every state's upper triangle
    including the diagonal.
    """
    if fitted.m != truth.m:
        raise CdghmmError(
            f"state count mismatch: fitted m={fitted.m}, truth m={truth.m}"
        )
    decoded = np.asarray(decoded)
    true_states = np.asarray(true_states)
    if decoded.shape != true_states.shape:
        raise CdghmmError("decoded and true state grids differ in shape")
    m = truth.m
    keep = true_states < m
    d_kept = decoded[keep]
    t_kept = true_states[keep]

    errors = {
        perm: float(np.mean(np.array(perm)[d_kept] != t_kept))
        for perm in permutations(range(m))
    }
    best_err = min(errors.values())
    candidates = [perm for perm, err in errors.items() if err == best_err]

    sig_true = np.stack([reconstruct_sigma(truth.state_pair(j)) for j in range(m)])
    upper = np.triu_indices(truth.p)

    # Ties on the error count are broken by the RMSE tuple, which is itself
    # invariant under joint relabeling of (decoded, fitted); a lexicographic
    # tie-break on the permutation would not be.
    best: ScoreReport | None = None
    for perm in candidates:
        fitted_p = _permute_params(fitted, perm)
        sig_fit = np.stack(
            [reconstruct_sigma(fitted_p.state_pair(j)) for j in range(m)]
        )
        report = ScoreReport(
            misclass=best_err,
            rmse_gamma=_rmse(fitted_p.gamma[:m], truth.gamma[:m]),
            rmse_delta=_rmse(fitted_p.delta[:m], truth.delta[:m]),
            rmse_mu=_rmse(fitted_p.mu, truth.mu),
            rmse_sigma=_rmse(
                sig_fit[:, upper[0], upper[1]], sig_true[:, upper[0], upper[1]]
            ),
            permutation=perm,
        )
        key = (report.rmse_mu, report.rmse_gamma, report.rmse_delta, report.rmse_sigma)
        if best is None or key < (
            best.rmse_mu,
            best.rmse_gamma,
            best.rmse_delta,
            best.rmse_sigma,
        ):
            best = report
    return best
