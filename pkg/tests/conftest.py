"""Shared test helpers.

The brute-force likelihood oracle below deliberately avoids every package
code path it is used to check: densities come from dense matrix inverses,
mask probabilities from scipy's normal CDF, and the likelihood from an
explicit sum over all state sequences.
"""

from __future__ import annotations

from itertools import product

import numpy as np
from scipy.special import logsumexp, ndtr

from cdghmm import HmmParams, MissParams, PanelDataset

PHI_CLIP = 1e-12


def random_spd(rng, p, scale=1.0):
    """Well-conditioned random SPD matrix with unit-order eigenvalues."""
    a = rng.standard_normal((p, p))
    q, _ = np.linalg.qr(a)
    eigs = rng.uniform(0.3, 3.0, size=p) * scale
    return (q * eigs) @ q.T


def oracle_eta(miss: MissParams, state, t, j, n_times):
    """Mechanism linear predictor recomputed longhand; t, j are 0-based."""
    tau = float(t + 1)
    mech = miss.mechanism
    if mech == "state":
        return miss.alpha[state]
    if mech == "state-var":
        return miss.alpha[state, j]
    if mech == "state-time-shared":
        return miss.alpha[state] + miss.beta_t * tau
    if mech == "state-time-full":
        return miss.alpha[state, t]
    if mech == "state-var-time-shared":
        return miss.alpha[state, j] + miss.beta_t * tau
    if mech == "state-var-time-full":
        return miss.alpha[state, j, t]
    raise ValueError(mech)


def oracle_mask_logprob(mask_row, miss: MissParams, state, t, n_times):
    if miss.mechanism == "mar":
        return 0.0
    total = 0.0
    for j, bit in enumerate(mask_row):
        phi = float(ndtr(oracle_eta(miss, state, t, j, n_times)))
        phi = min(max(phi, PHI_CLIP), 1.0 - PHI_CLIP)
        total += np.log(phi) if bit else np.log1p(-phi)
    return total


def oracle_emission_logf(data: PanelDataset, params: HmmParams, i, t, j):
    """Log emission factor for one cell and chain state, dense-matrix route."""
    m = params.m
    dropped = data.dropout_time[i] >= 0 and t >= data.dropout_time[i]
    if j == m:  # absorbing state
        return 0.0 if dropped else -np.inf
    if dropped:
        return -np.inf
    obs = np.flatnonzero(~data.mask[i, t])
    total = 0.0
    if obs.size:
        t_mat, d_diag = params.chol_t[j], params.chol_d[j]
        sigma = np.linalg.inv(t_mat.T @ np.diag(1.0 / d_diag) @ t_mat)
        sub = sigma[np.ix_(obs, obs)]
        dev = data.values[i, t, obs] - params.mu[j, obs]
        quad = dev @ np.linalg.inv(sub) @ dev
        _, logdet = np.linalg.slogdet(sub)
        total += -0.5 * (obs.size * np.log(2 * np.pi) + logdet + quad)
    if not dropped:
        total += oracle_mask_logprob(
            data.mask[i, t], params.miss, j, t, data.n_times
        )
    return total


def oracle_loglik(data: PanelDataset, params: HmmParams):
    """Observed log-likelihood by summing over all K^T state sequences."""
    k = params.k_states
    n, n_times = data.n, data.n_times
    log_delta = np.log(np.where(params.delta > 0, params.delta, np.nan))
    log_delta = np.where(params.delta > 0, log_delta, -np.inf)
    log_gamma = np.log(np.where(params.gamma > 0, params.gamma, np.nan))
    log_gamma = np.where(params.gamma > 0, log_gamma, -np.inf)

    total = 0.0
    seqs = np.array(list(product(range(k), repeat=n_times)))
    for i in range(n):
        logf = np.array(
            [
                [oracle_emission_logf(data, params, i, t, j) for j in range(k)]
                for t in range(n_times)
            ]
        )
        with np.errstate(invalid="ignore"):
            terms = (
                log_delta[seqs[:, 0]]
                + log_gamma[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
                + logf[np.arange(n_times), seqs].sum(axis=1)
            )
        terms = np.where(np.isnan(terms), -np.inf, terms)
        total += logsumexp(terms)
    return float(total)


def oracle_state_posterior(data: PanelDataset, params: HmmParams, i):
    """(T, K) marginal posterior over states for one subject, by enumeration."""
    k = params.k_states
    n_times = data.n_times
    log_delta = np.where(params.delta > 0, np.log(np.maximum(params.delta, 1e-300)), -np.inf)
    log_gamma = np.where(params.gamma > 0, np.log(np.maximum(params.gamma, 1e-300)), -np.inf)
    logf = np.array(
        [
            [oracle_emission_logf(data, params, i, t, j) for j in range(k)]
            for t in range(n_times)
        ]
    )
    seqs = np.array(list(product(range(k), repeat=n_times)))
    with np.errstate(invalid="ignore"):
        terms = (
            log_delta[seqs[:, 0]]
            + log_gamma[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
            + logf[np.arange(n_times), seqs].sum(axis=1)
        )
    terms = np.where(np.isnan(terms), -np.inf, terms)
    weights = np.exp(terms - logsumexp(terms))
    post = np.zeros((n_times, k))
    for w, seq in zip(weights, seqs):
        post[np.arange(n_times), seq] += w
    return post


def random_params(rng, m, p, mechanism="mar", dropout=False, n_times=4):
    """Valid random parameters with well-separated means."""
    k = m + 1 if dropout else m
    delta = rng.dirichlet(np.ones(m))
    gamma_reg = rng.dirichlet(np.ones(k), size=m)
    if dropout:
        delta = np.concatenate([delta, [0.0]])
        absorbing = np.zeros(k)
        absorbing[m] = 1.0
        gamma = np.vstack([gamma_reg, absorbing])
    else:
        gamma = gamma_reg
    mu = rng.standard_normal((m, p)) * 2.0
    chol_t = []
    chol_d = []
    for _ in range(m):
        t_mat = np.eye(p)
        idx = np.tril_indices(p, k=-1)
        t_mat[idx] = rng.standard_normal(idx[0].size) * 0.4
        chol_t.append(t_mat)
        chol_d.append(rng.uniform(0.5, 2.0, size=p))
    if mechanism == "mar":
        miss = MissParams.mar()
    else:
        shapes = {
            "state": (m,),
            "state-var": (m, p),
            "state-time-shared": (m,),
            "state-time-full": (m, n_times),
            "state-var-time-shared": (m, p),
            "state-var-time-full": (m, p, n_times),
        }
        beta = (
            float(rng.uniform(-0.3, 0.3))
            if mechanism in ("state-time-shared", "state-var-time-shared")
            else None
        )
        miss = MissParams(
            mechanism=mechanism,
            alpha=rng.uniform(-1.5, 0.5, size=shapes[mechanism]),
            beta_t=beta,
        )
    return HmmParams(
        m=m,
        delta=delta,
        gamma=gamma,
        mu=mu,
        chol_t=np.stack(chol_t),
        chol_d=np.stack(chol_d),
        miss=miss,
    )


def random_dataset(rng, n, n_times, p, miss_rate=0.0, dropout_rate=0.0):
    """Random panel with optional interior missingness and trailing dropout."""
    values = rng.standard_normal((n, n_times, p))
    mask = rng.random((n, n_times, p)) < miss_rate
    mask[:, 0, :] = False  # keep the first row partly observed
    dropout_time = np.full(n, -1, dtype=int)
    if dropout_rate > 0.0:
        for i in range(n):
            if rng.random() < dropout_rate:
                t_d = int(rng.integers(1, n_times))
                dropout_time[i] = t_d
                mask[i, t_d:, :] = True
    # interior all-missing rows adjacent to the tail would shift detection;
    # that is fine for these tests, the flags below are authoritative.
    return PanelDataset(
        values=values, mask=mask, dropout_time=dropout_time
    )
