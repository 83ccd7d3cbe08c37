"""EM orchestration: initialization, E/M alternation, scoring, decoding.

One iteration follows the estimation loop's literal step order: conditional
moments at the current parameters, then state and transition posteriors,
then the chain, mean/scatter, covariance-factor, and missingness updates.
The observed log-likelihood is evaluated on entry to each iteration, so the
returned parameters are exactly the ones the last trace entry scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .dropout import DropoutAugmentation, mstep_transition
from .errors import AscentError, CdghmmError, FitError, InitializationError
from .forward_backward import Posteriors, posteriors
from .missingness import (
    ImputedMoments,
    build_miss_design,
    estep_gaussian,
    fit_miss_params,
)
from .solvers import solve_member, update_mean_and_scatter
from .types import HmmParams, ModelStructure, PanelDataset, total_free_params

ASCENT_TOL = 1e-8


@dataclass
class FitConfig:
    """Estimation settings; defaults match the documented contract."""

    structure: ModelStructure
    m: int
    mechanism: str = "mar"
    dropout: bool | None = None  # None: enable iff the data carry dropout
    max_iter: int = 1000
    rel_tol: float = 1e-6
    n_starts: int = 10
    rng_seed: int | tuple = 0
    init: str = "kmeans"  # kmeans | random | random-subject

    def seed_entropy(self) -> list[int]:
        if isinstance(self.rng_seed, (tuple, list)):
            return [int(s) for s in self.rng_seed]
        return [int(self.rng_seed)]

    def __post_init__(self):
        if self.m < 1:
            raise CdghmmError(f"need m >= 1, got {self.m}")
        if self.max_iter < 1 or self.rel_tol <= 0.0 or self.n_starts < 1:
            raise CdghmmError("max_iter >= 1, rel_tol > 0 and n_starts >= 1 required")
        if self.init not in ("kmeans", "random", "random-subject"):
            raise CdghmmError(f"unknown init {self.init!r}")


@dataclass
class FitResult:
    params: HmmParams
    loglik: float
    loglik_trace: np.ndarray
    bic: float
    icl: float
    rho: int
    decoded: np.ndarray
    iterations: int
    converged: bool
    diagnostics: list[str] = field(default_factory=list)


def _augmentation(data: PanelDataset, config: FitConfig) -> DropoutAugmentation:
    if config.dropout is None:
        return DropoutAugmentation(enabled=data.has_dropout, m=config.m)
    if not config.dropout and data.has_dropout:
        raise CdghmmError(
            "data carry dropout flags but the configuration disables the "
            "absorbing state; reload the data without dropout detection"
        )
    return DropoutAugmentation(enabled=bool(config.dropout), m=config.m)


def _mean_imputed_rows(data: PanelDataset) -> np.ndarray:
    """(n*T, p) pooled rows with per-variable observed means under the mask."""
    col_mean = np.nanmean(np.where(data.mask, np.nan, data.values), axis=(0, 1))
    col_mean = np.where(np.isfinite(col_mean), col_mean, 0.0)
    filled = np.where(data.mask, col_mean[np.newaxis, np.newaxis, :], data.values)
    return filled.reshape(-1, data.p)


def _seed_u_hat(
    data: PanelDataset,
    config: FitConfig,
    aug: DropoutAugmentation,
    rng: np.random.Generator,
    method: str,
) -> np.ndarray:
    """Initial state posteriors for one start.

    ``kmeans``: softened cluster labels of the mean-imputed pooled rows.
    ``random``: independent soft assignments per cell.
    ``random-subject``: every subject's whole trajectory drawn to one state;
    the implied initial transition matrix is strongly diagonal, so the first
    smoothing pass leans on temporal coherence rather than cell noise (the
    natural random assignment when the units of clustering are subjects).
    """
    n, n_times, _ = data.values.shape
    m, k = config.m, aug.k_states
    dropped = data.dropped_cells()
    keep = ~dropped.reshape(-1)

    u = np.zeros((n * n_times, k))
    rows = _mean_imputed_rows(data)[keep]
    if method == "kmeans":
        distinct = np.unique(rows, axis=0).shape[0]
        if distinct < m:
            raise InitializationError(
                f"{m} states requested but the pooled data have only "
                f"{distinct} distinct rows"
            )
        _, labels = kmeans2(rows, m, minit="++", seed=rng, iter=25)
        soft = np.full((rows.shape[0], m), 0.1 / m)
        soft[np.arange(rows.shape[0]), labels] += 0.9
    elif method == "random":
        soft = rng.dirichlet(np.ones(m), size=rows.shape[0])
    elif method == "random-subject":
        if n < m:
            raise InitializationError(f"{m} states but only {n} subjects")
        z = rng.integers(0, m, size=n)
        for _ in range(100):
            if np.unique(z).size == m:
                break
            z = rng.integers(0, m, size=n)
        else:
            raise InitializationError("could not draw all states across subjects")
        per_subject = np.full((n, m), 0.1 / m)
        per_subject[np.arange(n), z] += 0.9
        soft = np.repeat(per_subject[:, np.newaxis, :], n_times, axis=1)
        soft = soft.reshape(n * n_times, m)[keep]
    else:
        raise InitializationError(f"unknown init {method!r}")
    u[keep, :m] = soft
    if aug.enabled:
        u[~keep, m] = 1.0
    return u.reshape(n, n_times, k)


def _mstep_params(
    data: PanelDataset,
    config: FitConfig,
    aug: DropoutAugmentation,
    u_hat: np.ndarray,
    v_hat: np.ndarray,
    moments,
    prev: HmmParams | None,
    diagnostics: list[str],
) -> HmmParams:
    delta, gamma, flags = mstep_transition(u_hat, v_hat, aug)
    diagnostics.extend(flags)
    u_reg = u_hat[:, :, : config.m]
    mu, scatter, flags = update_mean_and_scatter(moments, u_reg)
    diagnostics.extend(flags)
    prev_pair = (prev.chol_t, prev.chol_d) if prev is not None else None
    chol_t, chol_d, flags = solve_member(config.structure, scatter, prev=prev_pair)
    diagnostics.extend(flags)
    design = build_miss_design(data, u_reg)
    miss, flags = fit_miss_params(
        design, config.mechanism, warm=prev.miss if prev is not None else None
    )
    diagnostics.extend(flags)
    return HmmParams(
        m=config.m,
        delta=delta,
        gamma=gamma,
        mu=mu,
        chol_t=chol_t,
        chol_d=chol_d,
        miss=miss,
    )


def initialize(
    data: PanelDataset,
    config: FitConfig,
    rng: np.random.Generator,
    method: str | None = None,
) -> HmmParams:
    """Seed posteriors, derive chain parameters, run one M-step.

    At this point no model parameters exist yet, so the Gaussian block is
    seeded from the mean-imputed rows treated as complete data (zero
    conditional variance).
    """
    aug = _augmentation(data, config)
    u_hat = _seed_u_hat(data, config, aug, rng, method or config.init)
    # Independence seed for the transition posteriors.
    v_hat = u_hat[:, :-1, :, np.newaxis] * u_hat[:, 1:, np.newaxis, :]
    v_hat = np.concatenate(
        [np.zeros_like(v_hat[:, :1]), v_hat], axis=1
    )
    n, n_times, p = data.values.shape
    filled = _mean_imputed_rows(data).reshape(n, n_times, p)
    moments = ImputedMoments(
        cond_mean=np.repeat(filled[:, :, np.newaxis, :], config.m, axis=2),
        cond_var=np.zeros((n, n_times, config.m, p, p)),
    )
    diagnostics: list[str] = []
    return _mstep_params(data, config, aug, u_hat, v_hat, moments, None, diagnostics)


def _em_single_start(
    data: PanelDataset,
    config: FitConfig,
    params: HmmParams,
) -> tuple[HmmParams, list[float], Posteriors, int, bool, list[str]]:
    aug = _augmentation(data, config)
    diagnostics: list[str] = []
    trace: list[float] = []
    post = None
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        gauss_ll, moments = estep_gaussian(data, params)
        post = posteriors(data, params, gauss_ll=gauss_ll)
        ll = post.loglik
        if trace:
            if ll < trace[-1] - ASCENT_TOL:
                raise AscentError(
                    f"log-likelihood decreased from {trace[-1]:.10f} to "
                    f"{ll:.10f} at iteration {iteration}"
                )
            if abs(ll - trace[-1]) / (1.0 + abs(ll)) < config.rel_tol:
                trace.append(ll)
                converged = True
                break
        trace.append(ll)
        params = _mstep_params(
            data, config, aug, post.u_hat, post.v_hat, moments, params, diagnostics
        )
    if not converged:
        # Parameters moved after the last evaluation; score them once more.
        post = posteriors(data, params)
        if post.loglik < trace[-1] - ASCENT_TOL:
            raise AscentError(
                f"log-likelihood decreased from {trace[-1]:.10f} to "
                f"{post.loglik:.10f} at the final evaluation"
            )
        trace.append(post.loglik)
    return params, trace, post, iteration, converged, diagnostics


def information_criteria(
    loglik: float, u_hat: np.ndarray, rho: int
) -> tuple[float, float]:
    """(BIC, ICL) with BIC = 2 l - rho log(nT); larger is better.

    The ICL subtracts the posterior entropy at the MAP assignment:
    2 * sum MAP{u} log u, which is zero for one-hot posteriors.
    """
    n, n_times, _ = u_hat.shape
    bic = 2.0 * loglik - rho * np.log(n * n_times)
    map_val = u_hat.max(axis=2)
    icl = bic + 2.0 * float(np.sum(np.log(map_val)))
    return float(bic), float(icl)


def local_decode(
    data: PanelDataset, params: HmmParams
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell labels maximizing the marginal state posterior.

    Returns 0-based labels (dropout cells get label m) and the posterior
    table; ties break toward the lowest state index.
    """
    post = posteriors(data, params)
    return post.u_hat.argmax(axis=2), post.u_hat


def fit(data: PanelDataset, config: FitConfig) -> FitResult:
    """Best-of-``n_starts`` EM fit, selected by final log-likelihood.

    The first start uses the configured initialization; later starts redraw
    from the same random scheme (cell-level random when the first start was
    k-means).  Per-start failures are recorded and the next start attempted;
    FitError is raised only when every start fails.
    """
    aug = _augmentation(data, config)
    best: FitResult | None = None
    failures: list[str] = []
    # Restarts redraw from the configured random scheme; a k-means first
    # start falls back to cell-level random draws for the later ones.
    restart_method = config.init if config.init.startswith("random") else "random"
    for start in range(config.n_starts):
        rng = np.random.default_rng(config.seed_entropy() + [start])
        method = config.init if start == 0 else restart_method
        try:
            params0 = initialize(data, config, rng, method=method)
            params, trace, post, iters, converged, diagnostics = _em_single_start(
                data, config, params0
            )
        except (CdghmmError, np.linalg.LinAlgError, FloatingPointError) as exc:
            failures.append(f"start {start}: {type(exc).__name__}: {exc}")
            continue
        rho = total_free_params(
            config.structure,
            config.m,
            data.p,
            config.mechanism,
            data.n_times,
            aug.enabled,
        )
        bic, icl = information_criteria(trace[-1], post.u_hat, rho)
        result = FitResult(
            params=params,
            loglik=trace[-1],
            loglik_trace=np.asarray(trace),
            bic=bic,
            icl=icl,
            rho=rho,
            decoded=post.u_hat.argmax(axis=2),
            iterations=iters,
            converged=converged,
            diagnostics=diagnostics,
        )
        if best is None or result.loglik > best.loglik:
            best = result
    if best is None:
        raise FitError(
            f"all {config.n_starts} starts failed: " + "; ".join(failures)
        )
    if failures:
        best.diagnostics.extend(failures)
    return best
