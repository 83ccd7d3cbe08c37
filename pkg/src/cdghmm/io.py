"""Long-format CSV ingestion and JSON serialization of fits and specs.

The data format is one row per (id, time) with a header: an ``id`` column,
a numeric ``time`` column, an optional 0/1 ``dropout`` column, and one
numeric column per variable.  Missing cells are the empty string or the
literal ``NA``; any other non-numeric content is an error that names the
offending cell.
"""

from __future__ import annotations

import csv
import json

import numpy as np
import pandas as pd

from .dropout import detect_dropout
from .errors import DataError
from .simulate import SimSpec
from .types import HmmParams, MissParams, PanelDataset

FIT_FORMAT_VERSION = 1
MISSING_TOKENS = ("", "NA")


def _parse_float_column(raw: np.ndarray, name: str) -> np.ndarray:
    """Exact string-to-double conversion that names the first bad cell.

    pandas' fast numeric parser is not correctly rounded, which would break
    the bitwise save/load round trip; numpy's conversion is.
    """
    try:
        return raw.astype(np.float64)
    except ValueError:
        for r, cell in enumerate(raw):
            try:
                float(cell)
            except ValueError:
                raise DataError(
                    f"unparseable value {cell!r} in column {name!r} at data row {r + 2}"
                ) from None
        raise


def load_panel(
    path,
    dropout: str = "auto",
    id_col: str = "id",
    time_col: str = "time",
    dropout_col: str = "dropout",
    variables: list[str] | None = None,
) -> PanelDataset:
    """Assemble the (n, T, p) tensor from a long CSV.

    Subjects are sorted by id (as strings), times numerically; every id must
    carry the same time grid (encode shorter series with trailing missing
    rows).  ``dropout`` is one of ``auto`` (detect trailing all-missing
    runs), ``column`` (read the 0/1 column), or ``off``.
    """
    frame = pd.read_csv(
        path, dtype=str, keep_default_na=False, skipinitialspace=True
    )
    for col in (id_col, time_col):
        if col not in frame.columns:
            raise DataError(f"required column {col!r} missing from {path}")
    if dropout == "column" and dropout_col not in frame.columns:
        raise DataError(f"dropout column {dropout_col!r} missing from {path}")
    if variables is None:
        variables = [
            c for c in frame.columns if c not in (id_col, time_col, dropout_col)
        ]
    if not variables:
        raise DataError("no variable columns found")

    times = _parse_float_column(frame[time_col].to_numpy(), time_col)
    frame = frame.assign(**{time_col: times})

    dup = frame.duplicated(subset=[id_col, time_col], keep=False)
    if dup.any():
        rows = [int(r) + 2 for r in np.flatnonzero(dup.to_numpy())[:5]]
        raise DataError(f"duplicate (id, time) pairs at data row(s) {rows}")

    ids = sorted(frame[id_col].unique())
    grid = np.sort(frame[time_col].unique())
    ragged = []
    for subject in ids:
        have = np.sort(frame.loc[frame[id_col] == subject, time_col].to_numpy())
        if have.shape[0] != grid.shape[0] or not np.array_equal(have, grid):
            ragged.append(subject)
    if ragged:
        raise DataError(
            f"id(s) {ragged[:5]} do not cover the common time grid; encode "
            "shorter series with trailing NA rows"
        )

    n, n_times, p = len(ids), grid.shape[0], len(variables)
    values = np.zeros((n, n_times, p))
    mask = np.zeros((n, n_times, p), dtype=bool)
    dropout_flag = np.zeros((n, n_times), dtype=bool)

    id_index = {s: i for i, s in enumerate(ids)}
    time_index = {t: j for j, t in enumerate(grid)}
    row_i = frame[id_col].map(id_index).to_numpy()
    row_t = frame[time_col].map(time_index).to_numpy()

    for k, name in enumerate(variables):
        raw = frame[name].to_numpy()
        is_missing = np.isin(raw, MISSING_TOKENS)
        parsed = _parse_float_column(np.where(is_missing, "0", raw), name)
        values[row_i, row_t, k] = np.where(is_missing, np.nan, parsed)
        mask[row_i, row_t, k] = is_missing

    if dropout == "column":
        raw = frame[dropout_col].to_numpy()
        ok = np.isin(raw, ("0", "1")) | np.isin(raw, MISSING_TOKENS)
        if not ok.all():
            r = int(np.flatnonzero(~ok)[0])
            raise DataError(
                f"dropout column must be 0/1, got {raw[r]!r} at data row {r + 2}"
            )
        dropout_flag[row_i, row_t] = raw == "1"

    data = PanelDataset(values=values, mask=mask, time_values=grid, ids=list(ids))
    if dropout == "auto":
        data.dropout_time = detect_dropout(data)
    elif dropout == "column":
        dropout_time = np.full(n, -1, dtype=int)
        for i in range(n):
            hits = np.flatnonzero(dropout_flag[i])
            if hits.size:
                dropout_time[i] = int(hits[0])
                # The flag is authoritative: everything from there is unobserved.
                mask[i, dropout_time[i] :, :] = True
        data = PanelDataset(
            values=np.where(mask, np.nan, values),
            mask=mask,
            dropout_time=dropout_time,
            time_values=grid,
            ids=list(ids),
        )
    elif dropout != "off":
        raise DataError(f"dropout mode must be auto|column|off, got {dropout!r}")
    return data


def save_panel(data: PanelDataset, path, variables: list[str] | None = None) -> None:
    """Write the long CSV; masked cells become empty strings.

    Floats are written with ``repr`` so a round trip through ``load_panel``
    reproduces values and mask bit for bit.  A dropout column is included
    only when the dataset carries dropout.
    """
    if variables is None:
        variables = [f"var{k + 1}" for k in range(data.p)]
    ids = data.ids or [str(i + 1) for i in range(data.n)]
    with_dropout = data.has_dropout
    dropped = data.dropped_cells()
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        header = ["id", "time"] + list(variables)
        if with_dropout:
            header.append("dropout")
        writer.writerow(header)
        for i in range(data.n):
            for t in range(data.n_times):
                row = [ids[i], repr(float(data.time_values[t]))]
                for k in range(data.p):
                    row.append(
                        "" if data.mask[i, t, k] else repr(float(data.values[i, t, k]))
                    )
                if with_dropout:
                    row.append("1" if dropped[i, t] else "0")
                writer.writerow(row)


def params_to_dict(params: HmmParams) -> dict:
    return {
        "m": params.m,
        "delta": params.delta.tolist(),
        "gamma": params.gamma.tolist(),
        "mu": params.mu.tolist(),
        "chol_t": params.chol_t.tolist(),
        "chol_d": params.chol_d.tolist(),
        "miss": {
            "mechanism": params.miss.mechanism,
            "alpha": None if params.miss.alpha is None else params.miss.alpha.tolist(),
            "beta_t": params.miss.beta_t,
        },
    }


def params_from_dict(blob: dict) -> HmmParams:
    miss_blob = blob["miss"]
    miss = MissParams(
        mechanism=miss_blob["mechanism"],
        alpha=None if miss_blob["alpha"] is None else np.asarray(miss_blob["alpha"]),
        beta_t=miss_blob["beta_t"],
    )
    return HmmParams(
        m=int(blob["m"]),
        delta=np.asarray(blob["delta"]),
        gamma=np.asarray(blob["gamma"]),
        mu=np.asarray(blob["mu"]),
        chol_t=np.asarray(blob["chol_t"]),
        chol_d=np.asarray(blob["chol_d"]),
        miss=miss,
    )


def save_fit(result, config, path) -> None:
    """Versioned fit JSON carrying everything a later decode needs."""
    blob = {
        "format_version": FIT_FORMAT_VERSION,
        "model": config.structure.name.lower(),
        "states": config.m,
        "mechanism": config.mechanism,
        "dropout": result.params.has_dropout_state,
        "seed": list(config.seed_entropy()),
        "loglik": result.loglik,
        "loglik_trace": [float(x) for x in result.loglik_trace],
        "bic": result.bic,
        "icl": result.icl,
        "rho": result.rho,
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "diagnostics": list(result.diagnostics),
        "params": params_to_dict(result.params),
    }
    with open(path, "w") as handle:
        json.dump(blob, handle, indent=2)


def load_fit(path) -> dict:
    with open(path) as handle:
        blob = json.load(handle)
    version = blob.get("format_version")
    if version != FIT_FORMAT_VERSION:
        raise DataError(f"unsupported fit format version {version!r}")
    blob["params"] = params_from_dict(blob["params"])
    return blob


def load_sim_spec(path) -> SimSpec:
    """Read a SimSpec from JSON; array fields are nested lists."""
    with open(path) as handle:
        blob = json.load(handle)
    try:
        return SimSpec(
            m=int(blob["m"]),
            n=int(blob["n"]),
            n_times=int(blob.get("n_times", blob.get("T"))),
            p=int(blob["p"]),
            delta=np.asarray(blob["delta"], dtype=float),
            gamma=np.asarray(blob["gamma"], dtype=float),
            mu=np.asarray(blob["mu"], dtype=float),
            sigma=np.asarray(blob["sigma"], dtype=float),
            p_miss=float(blob.get("p_miss", 0.0)),
            m_miss=None if blob.get("m_miss") is None else np.asarray(blob["m_miss"]),
            v_miss=None if blob.get("v_miss") is None else np.asarray(blob["v_miss"]),
            seed=int(blob.get("seed", 0)),
        )
    except KeyError as exc:
        raise DataError(f"simulation spec is missing field {exc}") from exc
