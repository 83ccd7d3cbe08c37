import numpy as np
import pytest

from cdghmm import score
from cdghmm.errors import CdghmmError

from conftest import random_params


def test_perfect_decode_scores_zero():
    rng = np.random.default_rng(0)
    truth = random_params(rng, 2, 3)
    states = rng.integers(0, 2, size=(5, 4))
    report = score(states, states, truth, truth)
    assert report.misclass == 0.0
    assert report.rmse_gamma == 0.0
    assert report.rmse_delta == 0.0
    assert report.rmse_mu == 0.0
    assert report.rmse_sigma == 0.0
    assert report.permutation == (0, 1)


def test_swapped_labels_resolve_to_zero():
    rng = np.random.default_rng(1)
    truth = random_params(rng, 2, 3)
    from cdghmm import HmmParams

    swapped = HmmParams(
        m=2,
        delta=truth.delta[[1, 0]],
        gamma=truth.gamma[np.ix_([1, 0], [1, 0])],
        mu=truth.mu[[1, 0]],
        chol_t=truth.chol_t[[1, 0]],
        chol_d=truth.chol_d[[1, 0]],
        miss=truth.miss,
    )
    states = rng.integers(0, 2, size=(6, 5))
    report = score(1 - states, states, swapped, truth)
    assert report.misclass == 0.0
    assert report.permutation == (1, 0)
    assert report.rmse_mu < 1e-12
    assert report.rmse_gamma < 1e-12
    assert report.rmse_sigma < 1e-12


def test_random_labels_bounded_by_half():
    rng = np.random.default_rng(2)
    truth = random_params(rng, 2, 2)
    errs = []
    for _ in range(40):
        states = rng.integers(0, 2, size=(10, 6))
        decoded = rng.integers(0, 2, size=(10, 6))
        report = score(decoded, states, truth, truth)
        errs.append(report.misclass)
        assert report.misclass <= 0.5 + 1e-12
    assert 0.3 < np.mean(errs) <= 0.5


def test_joint_relabeling_invariance():
    rng = np.random.default_rng(3)
    truth = random_params(rng, 3, 2)
    fitted = random_params(rng, 3, 2)
    decoded = rng.integers(0, 3, size=(8, 5))
    states = rng.integers(0, 3, size=(8, 5))
    base = score(decoded, states, fitted, truth)
    perm = np.array([2, 0, 1])
    from cdghmm import HmmParams

    relabeled = HmmParams(
        m=3,
        delta=fitted.delta[perm],
        gamma=fitted.gamma[np.ix_(perm, perm)],
        mu=fitted.mu[perm],
        chol_t=fitted.chol_t[perm],
        chol_d=fitted.chol_d[perm],
        miss=fitted.miss,
    )
    lookup = np.empty(3, dtype=int)
    lookup[perm] = np.arange(3)
    moved = score(lookup[decoded], states, relabeled, truth)
    assert moved.misclass == base.misclass
    assert abs(moved.rmse_gamma - base.rmse_gamma) < 1e-12
    assert abs(moved.rmse_mu - base.rmse_mu) < 1e-12
    assert abs(moved.rmse_sigma - base.rmse_sigma) < 1e-12


def test_permutation_never_worse_than_identity():
    rng = np.random.default_rng(4)
    truth = random_params(rng, 3, 2)
    for _ in range(20):
        decoded = rng.integers(0, 3, size=(6, 4))
        states = rng.integers(0, 3, size=(6, 4))
        report = score(decoded, states, truth, truth)
        identity_err = float(np.mean(decoded != states))
        assert report.misclass <= identity_err + 1e-12


def test_dropout_cells_excluded_from_misclass():
    rng = np.random.default_rng(5)
    truth = random_params(rng, 2, 2, dropout=True)
    states = np.zeros((4, 5), dtype=int)
    states[:, 3:] = 2  # dropout label
    decoded = states.copy()
    decoded[0, 0] = 1  # one real error among 12 kept cells
    report = score(decoded, states, truth, truth)
    assert abs(report.misclass - 1.0 / 12.0) < 1e-12


def test_state_count_mismatch_raises():
    rng = np.random.default_rng(6)
    with pytest.raises(CdghmmError):
        score(
            np.zeros((2, 2), dtype=int),
            np.zeros((2, 2), dtype=int),
            random_params(rng, 2, 2),
            random_params(rng, 3, 2),
        )
