"""Rate experiments: sweeps over sample sizes, replicate averaging, log-log
slope fits and comparison of empirical excess risk with bound curves.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import math
import multiprocessing
import os
import platform
import traceback
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .bounds import (
    BoundConstants, bound_rhs_finite, bound_rhs_gaussian, bound_rhs_matcomp, bound_rhs_sparse,
    canonical_gaussian_s, canonical_sparse_tau,
)
from .exceptions import RateFitError
from .gibbs import COMPONENTWISE, GibbsConfig, exact_finite_posterior, posterior_mean, run_chain
from .losses import LossKind
from .matcomp import matcomp_chain, vb_fit, vb_mean_matrix
from .priors import INVERSE_GAMMA, IsotropicGaussian, LowRankHier, ScaledStudent
from .synthdata import (
    UNIT_SPHERE, MatCompModelSpec, MatCompTruth, SparseModelSpec, SparseTruth, excess_risk_mc, gen_matcomp,
    gen_sparse,
)

FINITE_CLASS = "FiniteClass"
GAUSSIAN_LINEAR = "GaussianLinear"
SPARSE_LINEAR = "SparseLinear"
MATCOMP = "MatComp"
PROBLEMS = (FINITE_CLASS, GAUSSIAN_LINEAR, SPARSE_LINEAR, MATCOMP)

CSV_COLUMNS = ("n", "replicate", "excess_randomized", "excess_mean_estimator", "bound_rhs")
MIN_RATE_POINTS = 4

# Defaults per problem; anything given in the config overrides these.
DEFAULT_SAMPLER = {
    FINITE_CLASS: {},
    GAUSSIAN_LINEAR: {"sampler": COMPONENTWISE, "n_steps": 600, "burn_in": 200},
    SPARSE_LINEAR: {"sampler": COMPONENTWISE, "n_steps": 600, "burn_in": 200, "jump_scale": 5.0},
    MATCOMP: {"n_steps": 3000, "burn_in": 1000},
}
DEFAULT_PRIOR = {
    GAUSSIAN_LINEAR: {"sigma": 1.0},
    SPARSE_LINEAR: {"C1": 100.0},
    MATCOMP: {"a": 1.0, "b": 0.1, "gamma_kind": INVERSE_GAMMA},
}

_MASK64 = (1 << 64) - 1
_GOLDEN64 = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """Finalizer of the splitmix64 generator."""
    z = (x + _GOLDEN64) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Chain ``state <- splitmix64(state ^ splitmix64(key))`` over the keys.

    Seeds depend only on the master seed and the keys (sample size,
    replicate, stream), so runs that differ only in model parameters share
    their randomness.
    """
    state = splitmix64(int(master) & _MASK64)
    for key in keys:
        state = splitmix64(state ^ splitmix64(int(key) & _MASK64))
    return state


@dataclass
class ExperimentSpec:
    problem: str
    model: dict
    n_grid: list
    replicates: int = 10
    sampler: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)
    constants: BoundConstants = field(default_factory=BoundConstants)
    loss: str = "hinge"
    learner: str = "mcmc"
    n_test: Optional[int] = 20_000
    eval_draws: int = 100
    master_seed: int = 0
    out_dir: Optional[str] = None
    threads: int = 1

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError("problem must be one of %s" % (PROBLEMS,))
        self.n_grid = [int(v) for v in self.n_grid]
        if len(self.n_grid) == 0 or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be non-empty and strictly increasing")
        if self.n_grid[0] < 1:
            raise ValueError("sample sizes must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        if self.learner not in ("mcmc", "vb"):
            raise ValueError("learner must be 'mcmc' or 'vb'")
        if isinstance(self.constants, dict):
            self.constants = BoundConstants.from_dict(self.constants)
        if not LossKind.parse(self.loss).is_surrogate:
            raise ValueError("a surrogate loss is required")

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentSpec":
        cfg = dict(cfg)
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise ValueError("unknown experiment fields: %s" % sorted(unknown))
        return cls(**cfg)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["constants"] = self.constants.to_dict()
        out.pop("C_bar", None)
        return out

    def sampler_settings(self) -> dict:
        merged = dict(DEFAULT_SAMPLER[self.problem])
        merged.update(self.sampler)
        return merged

    def prior_settings(self) -> dict:
        merged = dict(DEFAULT_PRIOR.get(self.problem, {}))
        merged.update(self.prior)
        return merged


@dataclass
class CellResult:
    n: int
    replicate: int
    seed: int
    excess_randomized: float
    excess_mean_estimator: float
    bound_rhs: float
    info: dict = field(default_factory=dict)


@dataclass
class RateReport:
    problem: str
    n_grid: list
    mean_randomized: list
    se_randomized: list
    mean_mean_estimator: list
    se_mean_estimator: list
    bound_rhs: list
    slope: Optional[float]
    intercept: Optional[float]
    half_width: Optional[float]
    slope_mean_estimator: Optional[float]
    half_width_mean_estimator: Optional[float]
    cells: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    guard_flags: list = field(default_factory=list)
    fit_note: str = ""

    def points(self, column: str = "randomized"):
        means = self.mean_randomized if column == "randomized" else self.mean_mean_estimator
        ses = self.se_randomized if column == "randomized" else self.se_mean_estimator
        return list(zip(self.n_grid, means, ses))


# ---------------------------------------------------------------- problems


def finite_class_thetas(M: int, d: int = 2) -> np.ndarray:
    """``M`` unit directions at angles ``2 pi k / M`` in the first two coordinates; row 0 is ``e_1``."""
    ang = 2.0 * np.pi * np.arange(M) / M
    out = np.zeros((M, d))
    out[:, 0] = np.cos(ang)
    out[:, 1] = np.sin(ang)
    return out


def _sparse_spec(model: dict) -> SparseModelSpec:
    return SparseModelSpec(
        d=int(model["d"]), s_star=int(model.get("s_star", 1)), signal=float(model.get("signal", 1.0)),
        h=float(model.get("h", 0.45)), feature_law=model.get("feature_law", UNIT_SPHERE),
    )


def _matcomp_spec(model: dict) -> MatCompModelSpec:
    return MatCompModelSpec(
        d1=int(model["d1"]), d2=int(model["d2"]), r=int(model["r"]), B_inf=float(model.get("B_inf", 1.0)),
        K_rank=model.get("K_rank"), h=float(model.get("h", 0.45)),
    )


def _finite_model(model: dict) -> SparseModelSpec:
    return SparseModelSpec(d=int(model.get("d", 2)), s_star=1, signal=1.0, h=float(model.get("h", 0.5)),
                           feature_law=model.get("feature_law", UNIT_SPHERE))


def bound_report_for(spec: ExperimentSpec, n: int):
    """:class:`BoundReport` at sample size ``n`` for the problem of ``spec``."""
    c = spec.constants
    if spec.problem == FINITE_CLASS:
        return bound_rhs_finite(c, int(spec.model.get("M", 16)), n)
    if spec.problem == GAUSSIAN_LINEAR:
        ms = _sparse_spec(spec.model)
        sigma = float(spec.prior_settings()["sigma"])
        th = ms.theta_star()
        return bound_rhs_gaussian(c, ms.d, float(th @ th), sigma, n, canonical_gaussian_s(n, ms.d))
    if spec.problem == SPARSE_LINEAR:
        ms = _sparse_spec(spec.model)
        C1 = float(spec.prior_settings()["C1"])
        tau = canonical_sparse_tau(n, ms.d, ms.C_x)
        return bound_rhs_sparse(c, ms.d, ms.s_star, C1, ms.C_x, n, tau)
    ms = _matcomp_spec(spec.model)
    a = float(spec.prior_settings()["a"])
    return bound_rhs_matcomp(ms.r, ms.d1, ms.d2, n, a, ms.B_inf, c)


def bound_for(spec: ExperimentSpec, n: int) -> float:
    return bound_report_for(spec, n).total


def _thin_to(draws, k):
    step = max(1, len(draws) // max(1, k))
    return draws[::step]


def _linear_cell(spec, n, data_seed, chain_seed, test_seed):
    problem = spec.problem
    ms = _sparse_spec(spec.model)
    data, theta_star = gen_sparse(ms, n, data_seed)
    truth = SparseTruth(ms, theta_star)
    lam = n / spec.constants.C_bar
    pset = spec.prior_settings()
    if problem == SPARSE_LINEAR:
        prior = ScaledStudent(canonical_sparse_tau(n, ms.d, ms.C_x), float(pset["C1"]), ms.d)
    else:
        prior = IsotropicGaussian(float(pset["sigma"]), ms.d)
    cfg = GibbsConfig(lam=lam, seed=chain_seed, **spec.sampler_settings())
    samples = run_chain(cfg, data, spec.loss, prior)
    draws = _thin_to(samples.draws, spec.eval_draws)
    ex_rand = excess_risk_mc(list(draws), truth, spec.n_test, test_seed)
    ex_mean = excess_risk_mc(posterior_mean(samples), truth, spec.n_test, test_seed)
    return ex_rand, ex_mean, {"acceptance_rate": samples.acceptance_rate}, {"data": data, "samples": samples}


def _finite_cell(spec, n, data_seed, test_seed):
    ms = _finite_model(spec.model)
    M = int(spec.model.get("M", 16))
    thetas = finite_class_thetas(M, ms.d)
    data, theta_star = gen_sparse(ms, n, data_seed)
    truth = SparseTruth(ms, theta_star)
    w = exact_finite_posterior(list(thetas), np.full(M, 1.0 / M), data, spec.loss, n / spec.constants.C_bar)
    ex_rand = excess_risk_mc(list(thetas), truth, spec.n_test, test_seed, weights=w)
    ex_mean = excess_risk_mc(w @ thetas, truth, spec.n_test, test_seed)
    fitted = {"data": data, "weights": w, "thetas": thetas}
    return ex_rand, ex_mean, {"posterior_mass_at_truth": float(w[0])}, fitted


def _matcomp_cell(spec, n, data_seed, chain_seed, test_seed):
    ms = _matcomp_spec(spec.model)
    data, M_star = gen_matcomp(ms, n, data_seed)
    truth = MatCompTruth(ms, M_star)
    pset = spec.prior_settings()
    prior = LowRankHier(ms.d1, ms.d2, ms.rank, float(pset["a"]), float(pset["b"]), pset.get("gamma_kind", INVERSE_GAMMA))
    lam = n / spec.constants.C_bar
    if spec.learner == "vb":
        vb_kw = {k: v for k, v in spec.sampler.items() if k in ("max_iters", "tol", "max_inner")}
        fam = vb_fit(data, prior, lam, seed=chain_seed, **vb_kw)
        rng = np.random.default_rng(test_seed)
        mats = [
            (fam.mean_L + np.sqrt(fam.var_L) * rng.standard_normal(fam.var_L.shape))
            @ (fam.mean_R + np.sqrt(fam.var_R) * rng.standard_normal(fam.var_R.shape)).T
            for _ in range(spec.eval_draws)
        ]
        ex_rand = excess_risk_mc(mats, truth, None)
        ex_mean = excess_risk_mc(vb_mean_matrix(fam), truth, None)
        info = {"vb_iterations": fam.diagnostics["iterations"], "final_objective": fam.diagnostics["final_objective"]}
        return ex_rand, ex_mean, info, {"data": data, "M_star": M_star, "family": fam}
    cfg = GibbsConfig(lam=lam, seed=chain_seed, **spec.sampler_settings())
    samples = matcomp_chain(cfg, data, prior)
    draws = _thin_to(samples.draws, spec.eval_draws)
    ex_rand = excess_risk_mc([st.product() for st in draws], truth, None)
    ex_mean = excess_risk_mc(posterior_mean(samples), truth, None)
    info = {"acceptance_rate": samples.acceptance_rate, "block_acceptance": samples.info["block_acceptance"]}
    return ex_rand, ex_mean, info, {"data": data, "M_star": M_star, "samples": samples}


def fit_cell(spec: ExperimentSpec, n: int, replicate: int):
    """Generate, fit and evaluate one (sample size, replicate) cell.

    Returns the :class:`CellResult` and a dict holding the data and the
    fitted object (posterior samples, finite weights or variational family).
    """
    seed = derive_seed(spec.master_seed, n, replicate)
    data_seed, chain_seed, test_seed = (derive_seed(seed, k) for k in range(3))
    if spec.problem == FINITE_CLASS:
        ex_rand, ex_mean, info, fitted = _finite_cell(spec, n, data_seed, test_seed)
    elif spec.problem == MATCOMP:
        ex_rand, ex_mean, info, fitted = _matcomp_cell(spec, n, data_seed, chain_seed, test_seed)
    else:
        ex_rand, ex_mean, info, fitted = _linear_cell(spec, n, data_seed, chain_seed, test_seed)
    return CellResult(n, replicate, seed, ex_rand, ex_mean, bound_for(spec, n), info), fitted


def run_cell(spec: ExperimentSpec, n: int, replicate: int) -> CellResult:
    return fit_cell(spec, n, replicate)[0]


def generate_cell_data(spec: ExperimentSpec, n: int, replicate: int = 0):
    """The dataset (and truth) that :func:`fit_cell` would use for this cell."""
    data_seed = derive_seed(derive_seed(spec.master_seed, n, replicate), 0)
    if spec.problem == MATCOMP:
        return gen_matcomp(_matcomp_spec(spec.model), n, data_seed)
    if spec.problem == FINITE_CLASS:
        return gen_sparse(_finite_model(spec.model), n, data_seed)
    return gen_sparse(_sparse_spec(spec.model), n, data_seed)


def _run_cell_safe(spec, n, replicate):
    try:
        return run_cell(spec, n, replicate), None
    except Exception as exc:  # noqa: BLE001 - every failure is reported in the manifest
        return None, {
            "n": n, "replicate": replicate, "seed": derive_seed(spec.master_seed, n, replicate),
            "error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc(),
        }


# ---------------------------------------------------------------- fitting


def fit_rate(points: Sequence) -> tuple:
    """OLS of ``log(mean_excess)`` on ``log(n)``.

    Uses the longest prefix of ``points`` (sorted by n) with positive means.
    Returns ``(slope, intercept, half_width)`` where ``half_width`` is the
    95% Student-t half-width of the slope (0 for an exact power law).
    """
    pts = sorted(((float(n), float(m)) for n, m, *_ in points), key=lambda p: p[0])
    prefix = []
    for n, m in pts:
        if not (m > 0 and math.isfinite(m)):
            break
        prefix.append((n, m))
    if len(prefix) < MIN_RATE_POINTS:
        raise RateFitError("need at least %d leading points with positive mean, got %d" % (MIN_RATE_POINTS, len(prefix)))
    x = np.log([p[0] for p in prefix])
    y = np.log([p[1] for p in prefix])
    res = stats.linregress(x, y)
    dof = len(prefix) - 2
    half = float(stats.t.ppf(0.975, dof) * res.stderr)
    return float(res.slope), float(res.intercept), half


def compare_bound(report: RateReport, column: str = "randomized", tolerance: float = 4.0) -> dict:
    """Ratios empirical / bound per n, with a drift summary.

    ``bounded`` is true when ``max(ratio) / min(ratio) <= tolerance``; no
    claim is made that ratios are at most one since ``Psi`` is unknown.
    """
    means = np.asarray(report.mean_randomized if column == "randomized" else report.mean_mean_estimator, dtype=float)
    rhs = np.asarray(report.bound_rhs, dtype=float)
    ratios = means / rhs
    out = {"n": list(report.n_grid), "ratios": ratios.tolist()}
    pos = ratios > 0
    if pos.sum() >= 2:
        lo, hi = ratios[pos].min(), ratios[pos].max()
        out["max_over_min"] = float(hi / lo)
        out["log_trend_slope"] = float(np.polyfit(np.log(np.asarray(report.n_grid)[pos]), np.log(ratios[pos]), 1)[0])
        out["bounded"] = bool(hi / lo <= tolerance)
    else:
        out["max_over_min"] = None
        out["log_trend_slope"] = None
        out["bounded"] = None
    return out


def _aggregate(spec: ExperimentSpec, cells, failures) -> RateReport:
    by_n = {n: [c for c in cells if c.n == n] for n in spec.n_grid}

    def mean_se(vals):
        v = np.asarray(vals, dtype=float)
        if v.size == 0:
            return math.nan, math.nan
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        return float(v.mean()), se

    mr, sr, mm, sm = [], [], [], []
    for n in spec.n_grid:
        a, b = mean_se([c.excess_randomized for c in by_n[n]])
        c_, d_ = mean_se([c.excess_mean_estimator for c in by_n[n]])
        mr.append(a), sr.append(b), mm.append(c_), sm.append(d_)
    bounds = [bound_for(spec, n) for n in spec.n_grid]
    report = RateReport(spec.problem, list(spec.n_grid), mr, sr, mm, sm, bounds, None, None, None, None, None,
                        cells=cells, failures=failures)
    try:
        report.slope, report.intercept, report.half_width = fit_rate(report.points("randomized"))
    except RateFitError as exc:
        report.fit_note = "randomized: %s" % exc
    try:
        report.slope_mean_estimator, _, report.half_width_mean_estimator = fit_rate(report.points("mean"))
    except RateFitError as exc:
        report.fit_note = (report.fit_note + "; " if report.fit_note else "") + "mean estimator: %s" % exc
    # soft guard: mean estimator no worse than twice the randomized one plus 2 SE
    for n, a, b, s in zip(spec.n_grid, mr, mm, sr):
        s = 0.0 if not math.isfinite(s) else s
        if math.isfinite(b) and b > 2.0 * a + 2.0 * s:
            report.guard_flags.append({"n": n, "excess_randomized": a, "excess_mean_estimator": b})
    return report


def run_experiment(spec: ExperimentSpec, threads: Optional[int] = None) -> RateReport:
    """Run every (n, replicate) cell, aggregate and fit the rate."""
    jobs = [(n, r) for n in spec.n_grid for r in range(spec.replicates)]
    workers = spec.threads if threads is None else threads
    results = []
    if workers and workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futs = [pool.submit(_run_cell_safe, spec, n, r) for n, r in jobs]
            results = [f.result() for f in futs]
    else:
        results = [_run_cell_safe(spec, n, r) for n, r in jobs]
    cells = sorted((c for c, _ in results if c is not None), key=lambda c: (c.n, c.replicate))
    failures = sorted((f for _, f in results if f is not None), key=lambda f: (f["n"], f["replicate"]))
    return _aggregate(spec, cells, failures)


# ---------------------------------------------------------------- output


def rate_csv_text(report: RateReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cells:
        w.writerow([c.n, c.replicate, repr(float(c.excess_randomized)), repr(float(c.excess_mean_estimator)),
                    repr(float(c.bound_rhs))])
    return buf.getvalue()


def _versions() -> dict:
    import numba
    import scipy

    return {"pbsurrogate": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def summary_dict(spec: ExperimentSpec, report: RateReport) -> dict:
    return {
        "problem": report.problem,
        "slope_column": "excess_randomized",
        "slope": report.slope, "intercept": report.intercept, "half_width": report.half_width,
        "slope_mean_estimator": report.slope_mean_estimator,
        "half_width_mean_estimator": report.half_width_mean_estimator,
        "fit_note": report.fit_note,
        "per_n": [
            {"n": n, "mean_randomized": a, "se_randomized": b, "mean_mean_estimator": c, "se_mean_estimator": d,
             "bound_rhs": e}
            for n, a, b, c, d, e in zip(report.n_grid, report.mean_randomized, report.se_randomized,
                                        report.mean_mean_estimator, report.se_mean_estimator, report.bound_rhs)
        ],
        "bound_comparison": compare_bound(report),
        "guard_flags": report.guard_flags,
        "n_failures": len(report.failures),
        "constants": spec.constants.to_dict(),
        "spec": spec.to_dict(),
        "versions": _versions(),
    }


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def write_outputs(spec: ExperimentSpec, report: RateReport, out_dir) -> dict:
    """Write ``rate_report.csv``, ``summary.json`` and, on failures, ``failure_manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "rate_report.csv"), "summary": os.path.join(out_dir, "summary.json")}
    with open(paths["csv"], "w", newline="") as fh:
        fh.write(rate_csv_text(report))
    with open(paths["summary"], "w") as fh:
        json.dump(_nan_to_none(summary_dict(spec, report)), fh, indent=2, sort_keys=True)
    if report.failures:
        paths["manifest"] = os.path.join(out_dir, "failure_manifest.json")
        with open(paths["manifest"], "w") as fh:
            json.dump(report.failures, fh, indent=2, sort_keys=True)
    return paths
