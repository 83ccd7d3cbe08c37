"""Command-line surface: simulate, fit, decode, study, select.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.  Errors
are emitted as one JSON object on stderr so callers can machine-read them.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .em import FitConfig, fit, local_decode
from .errors import CdghmmError, DataError
from .io import (
    load_fit,
    load_panel,
    load_sim_spec,
    params_to_dict,
    save_fit,
    save_panel,
)
from .simulate import STUDY_NAMES, generate, run_study
from .types import MECHANISMS, STRUCTURE_NAMES, ModelStructure

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route through our exit-code scheme
        raise _UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CDGHMM_THREADS")
    return max(1, int(env)) if env else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdghmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic panel CSV")
    sim.add_argument("--spec", required=True, help="SimSpec JSON file")
    sim.add_argument("--out", required=True, help="output data CSV")
    sim.add_argument("--truth", help="optional JSON for true params and states")

    fit_p = sub.add_parser("fit", help="fit one family member")
    fit_p.add_argument("--data", required=True)
    fit_p.add_argument("--model", required=True, choices=STRUCTURE_NAMES)
    fit_p.add_argument("--states", required=True, type=int)
    fit_p.add_argument("--mechanism", default="mar", choices=MECHANISMS)
    fit_p.add_argument("--dropout", default="auto", choices=("auto", "column", "off"))
    fit_p.add_argument("--starts", type=int, default=10)
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--tol", type=float, default=1e-6)
    fit_p.add_argument("--max-iter", type=int, default=1000)
    fit_p.add_argument(
        "--init", default="kmeans", choices=("kmeans", "random", "random-subject")
    )
    fit_p.add_argument("--out", required=True, help="output fit JSON")

    dec = sub.add_parser("decode", help="label each cell by posterior state")
    dec.add_argument("--data", required=True)
    dec.add_argument("--fit", required=True)
    dec.add_argument("--out", required=True, help="output states CSV")

    study = sub.add_parser("study", help="run a benchmark study grid")
    study.add_argument("--name", required=True, choices=STUDY_NAMES)
    study.add_argument("--replicates", required=True, type=int)
    study.add_argument("--seed", type=int, default=0)
    study.add_argument("--models", nargs="*", choices=STRUCTURE_NAMES)
    study.add_argument("--mechanisms", nargs="*", choices=MECHANISMS)
    study.add_argument("--gamma-ids", nargs="*", type=int)
    study.add_argument("--n-values", nargs="*", type=int)
    study.add_argument("--m-values", nargs="*", type=int)
    study.add_argument("--p-miss-values", nargs="*", type=float)
    study.add_argument("--out", required=True, help="output results CSV")

    sel = sub.add_parser("select", help="fit all 8 members and rank them")
    sel.add_argument("--data", required=True)
    sel.add_argument("--states", required=True, type=int)
    sel.add_argument("--mechanism", default="mar", choices=MECHANISMS)
    sel.add_argument("--criterion", default="bic", choices=("bic", "icl"))
    sel.add_argument("--dropout", default="auto", choices=("auto", "column", "off"))
    sel.add_argument("--starts", type=int, default=10)
    sel.add_argument("--seed", type=int, default=0)
    sel.add_argument("--tol", type=float, default=1e-6)
    sel.add_argument("--max-iter", type=int, default=1000)
    sel.add_argument("--out", required=True, help="output report JSON")

    for p in (sim, fit_p, dec, study, sel):
        p.add_argument("--threads", type=int, help="worker cap (env CDGHMM_THREADS)")
    return parser


def _cmd_simulate(args) -> int:
    spec = load_sim_spec(args.spec)
    data, states, truth = generate(spec)
    save_panel(data, args.out)
    if args.truth:
        blob = {
            "params": params_to_dict(truth),
            "states": (states + 1).tolist(),  # 1-based; m+1 marks dropout
        }
        with open(args.truth, "w") as handle:
            json.dump(blob, handle, indent=2)
    return EXIT_OK


def _fit_config(args, m: int, structure_name: str) -> FitConfig:
    return FitConfig(
        structure=ModelStructure.from_name(structure_name),
        m=m,
        mechanism=args.mechanism,
        max_iter=args.max_iter,
        rel_tol=args.tol,
        n_starts=args.starts,
        rng_seed=args.seed,
        init=getattr(args, "init", "kmeans"),
    )


def _cmd_fit(args) -> int:
    data = load_panel(args.data, dropout=args.dropout)
    config = _fit_config(args, args.states, args.model)
    result = fit(data, config)
    save_fit(result, config, args.out)
    return EXIT_OK


def _cmd_decode(args) -> int:
    blob = load_fit(args.fit)
    dropout_mode = "auto" if blob["dropout"] else "off"
    data = load_panel(args.data, dropout=dropout_mode)
    params = blob["params"]
    labels, u_hat = local_decode(data, params)
    ids = data.ids or [str(i + 1) for i in range(data.n)]
    k = u_hat.shape[2]
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["id", "time", "state"] + [f"p_state_{j + 1}" for j in range(k)]
        )
        for i in range(data.n):
            for t in range(data.n_times):
                writer.writerow(
                    [ids[i], repr(float(data.time_values[t])), int(labels[i, t]) + 1]
                    + [repr(float(u_hat[i, t, j])) for j in range(k)]
                )
    return EXIT_OK


def _cmd_study(args) -> int:
    table = run_study(
        args.name,
        replicates=args.replicates,
        seed=args.seed,
        models=args.models,
        mechanisms=args.mechanisms,
        gamma_ids=args.gamma_ids,
        n_values=args.n_values,
        m_values=args.m_values,
        p_miss_values=args.p_miss_values,
        n_jobs=_threads(args),
    )
    table.to_csv(args.out, index=False)
    return EXIT_OK


def _cmd_select(args) -> int:
    data = load_panel(args.data, dropout=args.dropout)
    ranking = []
    for name in STRUCTURE_NAMES:
        config = _fit_config(args, args.states, name)
        try:
            result = fit(data, config)
            ranking.append(
                {
                    "model": name,
                    "bic": result.bic,
                    "icl": result.icl,
                    "loglik": result.loglik,
                    "rho": result.rho,
                    "converged": bool(result.converged),
                }
            )
        except CdghmmError as exc:
            ranking.append({"model": name, "error": str(exc)})
    scored = [r for r in ranking if args.criterion in r]
    if not scored:
        raise CdghmmError("every member failed to fit")
    scored.sort(key=lambda r: r[args.criterion], reverse=True)
    failed = [r for r in ranking if args.criterion not in r]
    report = {
        "criterion": args.criterion,
        "states": args.states,
        "mechanism": args.mechanism,
        "ranking": scored + failed,
        "best": scored[0]["model"],
    }
    with open(args.out, "w") as handle:
        json.dump(report, handle, indent=2)
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "decode": _cmd_decode,
    "study": _cmd_study,
    "select": _cmd_select,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except DataError as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except (CdghmmError, np.linalg.LinAlgError) as exc:
        _emit_error("numeric", str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
