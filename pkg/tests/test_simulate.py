import numpy as np
import pytest

from cdghmm import SimSpec, apply_mnar_mask, generate, run_study
from cdghmm.errors import DataError
from cdghmm.simulate import (
    MaskClippingWarning,
    RESULT_COLUMNS,
    SIM1_GAMMAS,
    _generate_sim2,
    mask_rates,
)


def _basic_spec(**overrides):
    base = dict(
        m=2,
        n=40,
        n_times=5,
        p=3,
        delta=[0.5, 0.5],
        gamma=[[0.9, 0.1], [0.2, 0.8]],
        mu=[[0.0, 0.0, 0.0], [4.0, 4.0, 4.0]],
        sigma=np.eye(3),
        seed=0,
    )
    base.update(overrides)
    return SimSpec(**base)


def test_generate_is_deterministic_bitwise():
    a = generate(_basic_spec(seed=123))
    b = generate(_basic_spec(seed=123))
    assert np.array_equal(a[0].values, b[0].values, equal_nan=True)
    assert np.array_equal(a[0].mask, b[0].mask)
    assert np.array_equal(a[1], b[1])


def test_generate_absorbing_start_stays_in_state_one():
    spec = _basic_spec(delta=[1.0, 0.0], gamma=np.eye(2))
    _, states, _ = generate(spec)
    assert np.all(states == 0)


def test_generate_transition_frequencies_match_gamma():
    spec = _basic_spec(n=2000, gamma=SIM1_GAMMAS[1])
    _, states, _ = generate(spec)
    for j in range(2):
        rows = states[:, :-1] == j
        hits = states[:, 1:][rows]
        freq = np.mean(hits == j)
        se = np.sqrt(0.95 * 0.05 / rows.sum())
        assert abs(freq - 0.95) < 4 * se


def test_generate_emissions_match_state_means():
    spec = _basic_spec(n=3000)
    data, states, truth = generate(spec)
    for j in range(2):
        cells = data.values[states == j]
        assert np.max(np.abs(cells.mean(axis=0) - truth.mu[j])) < 0.15


def test_generate_realizes_dropout_from_absorbing_column():
    spec = _basic_spec(
        delta=[0.5, 0.5, 0.0],
        gamma=[[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.0, 0.0, 1.0]],
        seed=5,
    )
    data, states, _ = generate(spec)
    assert data.has_dropout
    dropped = states == 2
    assert np.array_equal(data.dropped_cells(), dropped)
    assert np.all(data.mask[dropped])
    # once absorbed, always absorbed
    assert not np.any(~dropped[:, 1:] & dropped[:, :-1])


def test_mask_rates_product_form_and_clipping():
    rates, clipped = mask_rates(
        2, 4, 0.3, np.array([0.8, 0.2]), np.array([0.8, 0.2, 0.0, 0.0])
    )
    assert rates.shape == (2, 4)
    assert rates[0, 0] == 1.0  # 0.3 * 1.6 * 3.2 clips
    assert abs(rates[0, 1] - 0.3 * 1.6 * 0.8) < 1e-12
    assert rates[0, 2] == 0.0
    assert (0, 0) in clipped


def test_apply_mask_zero_rate_is_identity():
    data, states, _ = generate(_basic_spec())
    masked = apply_mnar_mask(data, states, 0.0, None, None, seed=1)
    assert not masked.mask.any()


def test_apply_mask_zero_weight_state_untouched():
    data, states, _ = generate(_basic_spec(n=200))
    masked = apply_mnar_mask(data, states, 0.3, np.array([1.0, 0.0]), None, seed=2)
    assert not masked.mask[states == 1].any()
    assert masked.mask[states == 0].any()


def test_apply_mask_rates_within_binomial_error():
    spec = _basic_spec(n=4000, p=4, mu=np.zeros((2, 4)), sigma=np.eye(4))
    data, states, _ = generate(spec)
    m_miss = np.array([0.8, 0.2])
    v_miss = np.array([[0.8, 0.2, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])
    with pytest.warns(MaskClippingWarning):
        masked = apply_mnar_mask(data, states, 0.3, m_miss, v_miss, seed=3)
    rates, _ = mask_rates(2, 4, 0.3, m_miss, v_miss)
    for c in range(2):
        for j in range(4):
            cells = masked.mask[states == c][:, j]
            n_cells = cells.size
            se = np.sqrt(max(rates[c, j] * (1 - rates[c, j]), 1e-12) / n_cells)
            # t = 0 guard can shave a handful of cells below the target rate
            assert abs(cells.mean() - rates[c, j]) < 3 * se + 5.0 / n_cells


def test_apply_mask_never_blanks_first_row():
    spec = _basic_spec(n=500)
    data, states, _ = generate(spec)
    # balanced rate 0.9 per cell: plenty of fully masked draws to repair
    masked = apply_mnar_mask(data, states, 0.9, None, None, seed=4)
    assert masked.mask.mean() > 0.5
    assert not masked.mask[:, 0, :].all(axis=1).any()


def test_sim2_design_five_switchers():
    data, states, truth = _generate_sim2(7)
    assert data.n == 60 and data.n_times == 6 and data.p == 2
    assert (states[:, 3] == 1).sum() == 5
    assert np.all(states[:, :3] == 0)
    assert np.all(states[states[:, 3] == 1, 3:] == 1)  # absorbing trajectory
    switchers = states[:, 3] == 1
    # variable 1 climbs by about +2 per step after the switch
    assert data.values[switchers, 5, 0].mean() > data.values[switchers, 3, 0].mean()
    assert abs(truth.gamma[0, 1] - 0.17) < 1e-12


def test_run_study_schema_and_grid_shape():
    table = run_study(
        "sim1",
        replicates=2,
        seed=0,
        models=("eei",),
        gamma_ids=(1,),
        n_values=(100,),
        fit_overrides=dict(max_iter=40, rel_tol=1e-5),
    )
    assert list(table.columns) == RESULT_COLUMNS
    assert len(table) == 2
    assert set(table["model"]) == {"eei"}
    assert table["error"].eq("").all()
    assert table["misclass"].notna().all()


def test_run_study_full_grid_row_count():
    table = run_study(
        "sim1",
        replicates=1,
        seed=1,
        fit_overrides=dict(max_iter=5, rel_tol=1e-3),
    )
    # replicates x models x gammas x sample sizes
    assert len(table) == 1 * 8 * 3 * 2


def test_run_study_rejects_unknown_name():
    with pytest.raises(DataError):
        run_study("sim9", replicates=1)


def test_run_study_is_deterministic():
    kwargs = dict(
        replicates=1,
        seed=42,
        models=("vvi",),
        gamma_ids=(1,),
        n_values=(100,),
        fit_overrides=dict(max_iter=30, rel_tol=1e-5),
    )
    a = run_study("sim1", **kwargs)
    b = run_study("sim1", **kwargs)
    assert a["misclass"].tolist() == b["misclass"].tolist()
    assert a["bic"].tolist() == b["bic"].tolist()
