"""Shared data model: panel observations, structure choices, model parameters.

Shape conventions used everywhere downstream:

    values  : (n, T, p)   observations, NaN at masked cells
    mask    : (n, T, p)   True = unobserved
    delta   : (K,)        initial distribution, K = m (+1 with dropout)
    gamma   : (K, K)      row-stochastic transition matrix
    mu      : (m, p)      state means (regular states only)
    chol_t  : (m, p, p)   unit lower triangular factors, rows equal when shared
    chol_d  : (m, p)      innovation variances, constant rows when isotropic
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cholesky import ModCholPair
from .errors import DataError

PROB_TOL = 1e-12

MECHANISMS = (
    "mar",
    "state",
    "state-var",
    "state-time-shared",
    "state-time-full",
    "state-var-time-shared",
    "state-var-time-full",
)

STRUCTURE_NAMES = ("eea", "vva", "vea", "eva", "vvi", "vei", "evi", "eei")


@dataclass(frozen=True)
class ModelStructure:
    """One of the eight covariance constraint combinations.

    The three-letter name reads: T equal/variable across states, D
    equal/variable across states, D anisotropic/isotropic.
    """

    t_equal: bool
    d_equal: bool
    d_isotropic: bool

    @property
    def name(self) -> str:
        return (
            ("E" if self.t_equal else "V")
            + ("E" if self.d_equal else "V")
            + ("I" if self.d_isotropic else "A")
        )

    @classmethod
    def from_name(cls, name: str) -> "ModelStructure":
        key = name.strip().lower()
        if len(key) != 3 or key not in STRUCTURE_NAMES:
            raise DataError(
                f"unknown model structure {name!r}; expected one of {STRUCTURE_NAMES}"
            )
        return cls(
            t_equal=key[0] == "e",
            d_equal=key[1] == "e",
            d_isotropic=key[2] == "i",
        )


def count_free_params(structure: ModelStructure, m: int, p: int) -> int:
    """Free covariance parameters for one family member.

    T contributes p(p-1)/2 sub-diagonal coefficients per distinct factor,
    D contributes p (anisotropic) or 1 (isotropic) per distinct factor.
    """
    if m < 1 or p < 1:
        raise DataError(f"need m >= 1 and p >= 1, got m={m}, p={p}")
    t_blocks = 1 if structure.t_equal else m
    d_blocks = 1 if structure.d_equal else m
    d_per_block = 1 if structure.d_isotropic else p
    return t_blocks * (p * (p - 1) // 2) + d_blocks * d_per_block


def miss_param_count(mechanism: str, m: int, p: int, n_times: int) -> int:
    """Number of free missingness coefficients for a mechanism."""
    if mechanism not in MECHANISMS:
        raise DataError(f"unknown mechanism {mechanism!r}")
    return {
        "mar": 0,
        "state": m,
        "state-var": m * p,
        "state-time-shared": m + 1,
        "state-time-full": m * n_times,
        "state-var-time-shared": m * p + 1,
        "state-var-time-full": m * p * n_times,
    }[mechanism]


def total_free_params(
    structure: ModelStructure,
    m: int,
    p: int,
    mechanism: str,
    n_times: int,
    dropout: bool,
) -> int:
    """Total parameter count entering the BIC penalty.

    Covariance block plus m-1 initial probabilities, the free transition
    entries (each of the m regular rows has K-1 of them, where K includes
    the absorbing state when dropout is modeled), m*p means, and the
    missingness coefficients.
    """
    k_states = m + 1 if dropout else m
    return (
        count_free_params(structure, m, p)
        + (m - 1)
        + m * (k_states - 1)
        + m * p
        + miss_param_count(mechanism, m, p, n_times)
    )


@dataclass(frozen=True)
class MissParams:
    """Probit missingness coefficients for one mechanism.

    `alpha` shape depends on the mechanism: (m,) for state, (m, p) for
    state-var, (m, T) for state-time-full, (m, p, T) for
    state-var-time-full; the *-shared mechanisms pair an intercept array
    with the single time slope `beta_t`.  MAR carries no coefficients and
    contributes a factor of one to every likelihood product.
    """

    mechanism: str
    alpha: np.ndarray | None = None
    beta_t: float | None = None

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise DataError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "mar":
            if self.alpha is not None or self.beta_t is not None:
                raise DataError("mar carries no missingness coefficients")
        elif self.alpha is None:
            raise DataError(f"mechanism {self.mechanism!r} requires alpha")
        has_slope = self.mechanism in ("state-time-shared", "state-var-time-shared")
        if has_slope and self.beta_t is None:
            raise DataError(f"mechanism {self.mechanism!r} requires beta_t")
        if not has_slope and self.beta_t is not None:
            raise DataError(f"mechanism {self.mechanism!r} does not take beta_t")

    @classmethod
    def mar(cls) -> "MissParams":
        return cls(mechanism="mar")

    @classmethod
    def zeros(cls, mechanism: str, m: int, p: int, n_times: int) -> "MissParams":
        """All-zero coefficients (probability 0.5 per cell)."""
        shapes = {
            "state": (m,),
            "state-var": (m, p),
            "state-time-shared": (m,),
            "state-time-full": (m, n_times),
            "state-var-time-shared": (m, p),
            "state-var-time-full": (m, p, n_times),
        }
        if mechanism == "mar":
            return cls.mar()
        beta = 0.0 if mechanism in ("state-time-shared", "state-var-time-shared") else None
        return cls(mechanism=mechanism, alpha=np.zeros(shapes[mechanism]), beta_t=beta)

    def expected_alpha_shape(self, m: int, p: int, n_times: int) -> tuple:
        return {
            "mar": (),
            "state": (m,),
            "state-var": (m, p),
            "state-time-shared": (m,),
            "state-time-full": (m, n_times),
            "state-var-time-shared": (m, p),
            "state-var-time-full": (m, p, n_times),
        }[self.mechanism]


@dataclass
class PanelDataset:
    """Observations for n subjects on a common time grid.

    The mask is authoritative: masked cells are overwritten with NaN on
    construction so a stray sentinel in a data file can never leak into a
    computation.  ``dropout_time[i]`` is the 0-based index of the first
    dropped time point, or -1; every row from that index on must be fully
    masked, and dropout before the second time point is rejected.
    """

    values: np.ndarray
    mask: np.ndarray
    dropout_time: np.ndarray | None = None
    time_values: np.ndarray | None = None
    ids: list[str] | None = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        self.mask = np.array(self.mask, dtype=bool)
        if self.values.ndim != 3:
            raise DataError(f"values must be (n, T, p), got shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise DataError(
                f"mask shape {self.mask.shape} != values shape {self.values.shape}"
            )
        n, n_times, p = self.values.shape
        if n < 1 or n_times < 2 or p < 1:
            raise DataError(
                f"need n >= 1, T >= 2, p >= 1; got n={n}, T={n_times}, p={p}"
            )
        if self.dropout_time is None:
            self.dropout_time = np.full(n, -1, dtype=int)
        else:
            self.dropout_time = np.asarray(self.dropout_time, dtype=int)
            if self.dropout_time.shape != (n,):
                raise DataError("dropout_time must have one entry per subject")
        for i, t_d in enumerate(self.dropout_time):
            if t_d < 0:
                continue
            if t_d < 1 or t_d >= n_times:
                raise DataError(
                    f"subject {i}: dropout index {t_d} outside the allowed "
                    f"range 1..{n_times - 1}"
                )
            if not self.mask[i, t_d:].all():
                raise DataError(
                    f"subject {i}: cells observed at or after dropout index {t_d}"
                )
        if self.time_values is None:
            self.time_values = np.arange(1, n_times + 1, dtype=float)
        else:
            self.time_values = np.asarray(self.time_values, dtype=float)
            if self.time_values.shape != (n_times,):
                raise DataError("time_values must have one entry per time point")
        if self.ids is not None and len(self.ids) != n:
            raise DataError("ids must have one entry per subject")
        if np.any(~np.isfinite(self.values[~self.mask])):
            raise DataError("non-finite value in an observed cell")
        # NaN sentinel under every masked cell, regardless of file content.
        self.values = np.where(self.mask, np.nan, self.values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def p(self) -> int:
        return self.values.shape[2]

    @property
    def has_dropout(self) -> bool:
        return bool(np.any(self.dropout_time >= 0))

    def dropped_cells(self) -> np.ndarray:
        """(n, T) boolean grid, True from each subject's dropout time on."""
        t_idx = np.arange(self.n_times)[np.newaxis, :]
        t_d = self.dropout_time[:, np.newaxis]
        return (t_d >= 0) & (t_idx >= t_d)

    def pattern_groups(self) -> list:
        """Cells grouped by identical mask rows, computed once per dataset.

        Returns (pattern, observed_idx, missing_idx, subject_idx, time_idx)
        tuples; cached because the mask is immutable and the grouping sits
        on the per-iteration hot path of the EM.
        """
        cached = getattr(self, "_pattern_groups", None)
        if cached is not None:
            return cached
        n, n_times, p = self.mask.shape
        flat = self.mask.reshape(n * n_times, p)
        keys, inverse = np.unique(flat, axis=0, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(keys.shape[0] + 1))
        groups = []
        for k in range(keys.shape[0]):
            members = order[bounds[k] : bounds[k + 1]]
            groups.append(
                (
                    keys[k],
                    np.flatnonzero(~keys[k]),
                    np.flatnonzero(keys[k]),
                    members // n_times,
                    members % n_times,
                )
            )
        self._pattern_groups = groups
        return groups


@dataclass
class HmmParams:
    """Full parameter set for one fitted or simulated model.

    With a dropout state, delta and gamma have m+1 entries per axis, the
    last initial probability is zero and the last transition row is the
    unit vector on itself; the Gaussian blocks never include the absorbing
    state.
    """

    m: int
    delta: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    chol_t: np.ndarray
    chol_d: np.ndarray
    miss: MissParams = field(default_factory=MissParams.mar)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.chol_t = np.asarray(self.chol_t, dtype=float)
        self.chol_d = np.asarray(self.chol_d, dtype=float)

    @property
    def k_states(self) -> int:
        """Chain dimension: m, or m+1 when an absorbing state is present."""
        return self.delta.shape[0]

    @property
    def has_dropout_state(self) -> bool:
        return self.k_states == self.m + 1

    @property
    def p(self) -> int:
        return self.mu.shape[1]

    def state_pair(self, j: int) -> ModCholPair:
        return ModCholPair(t_mat=self.chol_t[j], d_diag=self.chol_d[j])


def validate(params: HmmParams, structure: ModelStructure) -> list[str]:
    """Check every structural invariant; returns [] when all hold."""
    out: list[str] = []
    m, k = params.m, params.k_states
    if k not in (m, m + 1):
        out.append(f"delta length {k} is neither m nor m+1 for m={m}")
        return out
    if params.gamma.shape != (k, k):
        out.append(f"gamma shape {params.gamma.shape} != ({k}, {k})")
        return out

    if np.any(params.delta < -PROB_TOL):
        out.append("delta has negative entries")
    if abs(params.delta.sum() - 1.0) > PROB_TOL:
        out.append(f"delta sums to {params.delta.sum():.15f}, not 1")
    if np.any(params.gamma < -PROB_TOL):
        out.append("gamma has negative entries")
    row_sums = params.gamma.sum(axis=1)
    for j, s in enumerate(row_sums):
        if abs(s - 1.0) > PROB_TOL:
            out.append(f"gamma row {j + 1} not stochastic (sums to {s:.15f})")
    if params.has_dropout_state:
        if abs(params.delta[m]) > PROB_TOL:
            out.append("absorbing-state initial probability is not zero")
        absorbing_row = np.zeros(k)
        absorbing_row[m] = 1.0
        if not np.array_equal(params.gamma[m], absorbing_row):
            out.append("absorbing transition row is not the unit vector on itself")

    if params.mu.shape[0] != m:
        out.append(f"mu has {params.mu.shape[0]} rows, expected m={m}")
    p = params.p
    if params.chol_t.shape != (m, p, p):
        out.append(f"chol_t shape {params.chol_t.shape} != ({m}, {p}, {p})")
        return out
    if params.chol_d.shape != (m, p):
        out.append(f"chol_d shape {params.chol_d.shape} != ({m}, {p})")
        return out

    for j in range(m):
        t_j = params.chol_t[j]
        if not np.array_equal(np.diag(t_j), np.ones(p)):
            out.append(f"state {j + 1}: chol_t diagonal is not all ones")
        if np.any(np.triu(t_j, k=1) != 0.0):
            out.append(f"state {j + 1}: chol_t has nonzero entries above the diagonal")
        if np.any(params.chol_d[j] <= 0.0):
            out.append(f"state {j + 1}: chol_d has non-positive entries")

    if structure.t_equal:
        for j in range(1, m):
            if not np.array_equal(params.chol_t[j], params.chol_t[0]):
                out.append(f"t_equal violated: chol_t state {j + 1} != state 1")
    if structure.d_equal:
        for j in range(1, m):
            if not np.array_equal(params.chol_d[j], params.chol_d[0]):
                out.append(f"d_equal violated: chol_d state {j + 1} != state 1")
    if structure.d_isotropic:
        for j in range(m):
            if np.any(params.chol_d[j] != params.chol_d[j][0]):
                out.append(f"isotropy violated: chol_d state {j + 1} is not constant")
    return out
