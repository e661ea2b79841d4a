"""Command-line interface: ``gen``, ``fit``, ``bound`` and ``rate``.

Every command reads a JSON config with the fields of
:class:`~pbsurrogate.harness.ExperimentSpec`. ``gen``, ``fit`` and ``bound``
act on a single sample size, taken from ``"n"`` or else the first entry of
``"n_grid"``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .gibbs import posterior_mean, save_samples
from .harness import (
    FINITE_CLASS, MATCOMP, ExperimentSpec, bound_report_for, fit_cell, generate_cell_data, run_experiment,
    write_outputs,
)
from .matcomp import save_diagnostics, save_matrix_csv, vb_mean_matrix
from .synthdata import save_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _load(path, seed):
    with open(path) as fh:
        cfg = json.load(fh)
    n = cfg.pop("n", None)
    if n is not None:
        cfg.setdefault("n_grid", [int(n)])
    if "n_grid" not in cfg:
        raise ValueError("config needs 'n' or 'n_grid'")
    if seed is not None:
        cfg["master_seed"] = int(seed)
    spec = ExperimentSpec.from_dict(cfg)
    return spec, int(n) if n is not None else spec.n_grid[0]


def _out_dir(args, spec):
    out = args.out or spec.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    spec, n = _load(args.config, args.seed)
    out = _out_dir(args, spec)
    data, truth = generate_cell_data(spec, n)
    path = os.path.join(out, "dataset.csv")
    save_dataset(data, path, {"problem": spec.problem, "master_seed": spec.master_seed, "n": n})
    if spec.problem == MATCOMP:
        save_matrix_csv(truth, os.path.join(out, "sign_matrix.csv"))
    else:
        np.savetxt(os.path.join(out, "theta_star.csv"), truth[None, :], delimiter=",", fmt="%.17g")
    print(path)
    return EXIT_OK


def cmd_fit(args) -> int:
    spec, n = _load(args.config, args.seed)
    out = _out_dir(args, spec)
    cell, fitted = fit_cell(spec, n, 0)
    summary = {
        "problem": spec.problem, "n": n, "seed": cell.seed, "excess_randomized": cell.excess_randomized,
        "excess_mean_estimator": cell.excess_mean_estimator, "bound_rhs": cell.bound_rhs, "info": cell.info,
    }
    if spec.problem == FINITE_CLASS:
        summary["posterior_weights"] = fitted["weights"].tolist()
    elif "family" in fitted:
        save_matrix_csv(vb_mean_matrix(fitted["family"]), os.path.join(out, "vb_mean.csv"))
        save_diagnostics(os.path.join(out, "vb_family.json"), {**fitted["family"].to_dict(), **fitted["family"].diagnostics})
    elif spec.problem == MATCOMP:
        samples = fitted["samples"]
        save_matrix_csv(posterior_mean(samples), os.path.join(out, "posterior_mean.csv"))
        summary["diagnostics"] = samples.info
    else:
        samples = fitted["samples"]
        save_samples(samples, os.path.join(out, "samples.csv"))
        summary["posterior_mean"] = posterior_mean(samples).tolist()
    save_diagnostics(os.path.join(out, "fit_summary.json"), summary)
    print(json.dumps({k: summary[k] for k in ("excess_randomized", "excess_mean_estimator", "bound_rhs")}))
    return EXIT_OK


def cmd_bound(args) -> int:
    spec, n = _load(args.config, args.seed)
    report = bound_report_for(spec, n)
    text = report.to_json(indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bound_report.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_rate(args) -> int:
    spec, _ = _load(args.config, args.seed)
    out = _out_dir(args, spec)
    report = run_experiment(spec, threads=args.threads)
    paths = write_outputs(spec, report, out)
    print(json.dumps({"slope": report.slope, "half_width": report.half_width, "failures": len(report.failures),
                      **paths}))
    return EXIT_PARTIAL if report.failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbsurrogate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "gen": (cmd_gen, "emit a synthetic dataset"),
        "fit": (cmd_fit, "fit one posterior and evaluate it"),
        "bound": (cmd_bound, "evaluate the bound right-hand side"),
        "rate": (cmd_rate, "run a full rate experiment"),
    }
    for name, (fn, help_) in handlers.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, default=None, help="worker processes for independent cells")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
