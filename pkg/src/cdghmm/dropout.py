"""Absorbing-state bookkeeping for subjects that leave the study.

Dropout adds one chain state: its initial probability is zero, its
transition row is the unit vector on itself, its emission factor is exactly
one on dropped cells and zero elsewhere.  Means and covariances never see
it; only the chain-level updates run over the extra state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .types import PanelDataset


@dataclass(frozen=True)
class DropoutAugmentation:
    """Whether the chain carries an absorbing state and its dimensions."""

    enabled: bool
    m: int

    @property
    def k_states(self) -> int:
        return self.m + 1 if self.enabled else self.m


def detect_dropout(data: PanelDataset) -> np.ndarray:
    """Per-subject 0-based index of the first dropped time point, -1 if none.

    Dropout is a *trailing* run of fully missing rows; interior all-missing
    rows followed by any observed row are ordinary missingness.  A subject
    whose trailing run covers the whole grid would have dropped out before
    the second time point, which the model does not allow.
    """
    all_missing = data.mask.all(axis=2)  # (n, T)
    n, n_times = all_missing.shape
    out = np.full(n, -1, dtype=int)
    for i in range(n):
        t = n_times
        while t > 0 and all_missing[i, t - 1]:
            t -= 1
        if t == n_times:
            continue
        if t == 0:
            raise DataError(
                f"subject {i}: every row is missing, dropout would start at the "
                "first time point"
            )
        out[i] = t
    return out


def mstep_transition(
    u_hat: np.ndarray,
    v_hat: np.ndarray,
    aug: DropoutAugmentation,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Initial-distribution and transition updates from the posteriors.

    delta averages the first-time-point state posteriors; gamma row-normalizes
    the summed transition posteriors.  The absorbing row is overwritten with
    its structural form and the absorbing initial probability forced to zero.
    Rows with no posterior mass fall back to uniform with a flag (their
    expected complete-data contribution is zero, so any row is a maximizer).
    """
    flags: list[str] = []
    k = aug.k_states
    n = u_hat.shape[0]

    delta = u_hat[:, 0, :].sum(axis=0) / n
    if aug.enabled:
        delta[aug.m] = 0.0
    total = delta.sum()
    if total <= 0.0:
        raise DataError("no posterior mass at the first time point")
    delta = delta / total

    counts = v_hat[:, 1:, :, :].sum(axis=(0, 1))  # (K, K)
    gamma = np.empty((k, k))
    for j in range(k):
        row_mass = counts[j].sum()
        if row_mass <= 0.0:
            gamma[j] = 1.0 / k
            flags.append(f"transition row {j + 1} has no mass, uniform fallback")
        else:
            gamma[j] = counts[j] / row_mass
    if aug.enabled:
        gamma[aug.m] = 0.0
        gamma[aug.m, aug.m] = 1.0
    return delta, gamma, flags
