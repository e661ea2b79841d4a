"""Gibbs posteriors ``exp(-lam * r_n(theta)) * prior(theta)``: exact on finite sets,
random-walk Metropolis on continuous ones, and the posterior-mean estimator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .exceptions import DiagnosticsError, SupportError
from .losses import DEFAULT_S_MAX, Dataset, LossKind, empirical_risk, losses_from_scores
from .priors import (
    FactorState, IsotropicGaussian, ScaledStudent, in_support, log_density_unnormalized, sample_prior,
)

JOINT = "joint"
COMPONENTWISE = "componentwise"
TARGET_ACCEPTANCE = 0.234


@dataclass
class GibbsConfig:
    """Chain settings. ``lam`` is the inverse temperature.

    With ``sampler="componentwise"`` each step is a full sweep over the
    coordinates (linear classifiers only). ``proposal_scale=None`` selects
    ``2.4/sqrt(d)`` times the prior scale. Adaptation of proposal scales
    happens during burn-in only.
    """

    lam: float
    n_steps: int = 10_000
    burn_in: int = 1_000
    proposal_scale: Optional[float] = None
    thin: int = 1
    seed: int = 0
    sampler: str = JOINT
    jump_scale: Optional[float] = None
    init: Optional[Any] = None
    adapt: bool = True
    s_max: float = DEFAULT_S_MAX
    min_acceptance: float = 0.01

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.n_steps < 1 or self.thin < 1:
            raise ValueError("n_steps and thin must be positive")
        if not 0 <= self.burn_in < self.n_steps:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_steps")
        if self.proposal_scale is not None and not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")
        if self.sampler not in (JOINT, COMPONENTWISE):
            raise ValueError("unknown sampler %r" % self.sampler)

    @classmethod
    def from_constants(cls, constants, n: int, **kw) -> "GibbsConfig":
        """Inverse temperature ``n / C_bar``."""
        return cls(lam=n / constants.C_bar, **kw)

    def echo(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "init"}
        out["warm_start"] = self.init is not None
        return out


@dataclass
class PosteriorSamples:
    draws: Any
    log_unnorm_target: np.ndarray
    acceptance_rate: float
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.draws)


def log_gibbs_unnormalized(theta, data: Dataset, kind, prior, lam: float, s_max: float = DEFAULT_S_MAX) -> float:
    """``-lam * r_n(theta) + log prior(theta)``; raises SupportError off-support."""
    lp = log_density_unnormalized(prior, theta)
    if lam == 0:
        return lp
    return -lam * empirical_risk(kind, data, theta, s_max) + lp


def finite_posterior_from_risks(risks, prior_weights, lam: float) -> np.ndarray:
    risks = np.asarray(risks, dtype=float)
    w = np.asarray(prior_weights, dtype=float)
    if risks.size == 0:
        raise ValueError("empty parameter set")
    if w.shape != risks.shape:
        raise ValueError("one prior weight per parameter is required")
    if np.any(w <= 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("prior weights must be positive and sum to 1")
    logw = -lam * risks + np.log(w)
    return np.exp(logw - logsumexp(logw))


def exact_finite_posterior(thetas: Sequence, prior_weights, data: Dataset, kind, lam: float,
                           s_max: float = DEFAULT_S_MAX) -> np.ndarray:
    """Normalized Gibbs weights over a finite parameter set."""
    if len(thetas) == 0:
        raise ValueError("empty parameter set")
    risks = [empirical_risk(kind, data, th, s_max) for th in thetas]
    return finite_posterior_from_risks(risks, prior_weights, lam)


def _prior_scale(prior) -> float:
    if isinstance(prior, IsotropicGaussian):
        return prior.sigma
    if isinstance(prior, ScaledStudent):
        return prior.tau
    raise TypeError("no scalar scale for prior %r" % (prior,))


def run_chain(config: GibbsConfig, data: Dataset, kind, prior) -> PosteriorSamples:
    """Sample the Gibbs posterior of a linear classifier by random-walk Metropolis."""
    kind = LossKind.parse(kind)
    if not kind.is_surrogate:
        raise ValueError("the Gibbs posterior needs a surrogate loss")
    if config.sampler == COMPONENTWISE:
        return _run_componentwise(config, data, kind, prior)
    return _run_joint(config, data, kind, prior)


def _initial_state(config, prior, rng):
    if config.init is None:
        return np.asarray(sample_prior(prior, rng), dtype=float)
    theta = np.array(config.init, dtype=float)
    if not in_support(prior, theta):
        raise SupportError("warm start lies outside the prior support")
    return theta


def _run_joint(config, data, kind, prior):
    rng = np.random.default_rng(config.seed)
    theta = _initial_state(config, prior, rng)
    d = theta.shape[0]
    scale = config.proposal_scale
    if scale is None:
        scale = 2.4 / math.sqrt(d) * _prior_scale(prior)
    initial_scale = scale

    def target(th):
        try:
            return log_gibbs_unnormalized(th, data, kind, prior, config.lam, config.s_max)
        except SupportError:
            return None

    current = target(theta)
    draws, logs = [], []
    accepted = 0
    for t in range(config.n_steps):
        prop = theta + scale * rng.standard_normal(d)
        lp = target(prop)
        ok = lp is not None and math.log(rng.random()) < lp - current
        if ok:
            theta, current = prop, lp
            accepted += 1
        if t < config.burn_in and config.adapt:
            # Robbins-Monro on log scale towards the target acceptance
            scale *= math.exp(((1.0 if ok else 0.0) - TARGET_ACCEPTANCE) / math.sqrt(t + 1.0))
        elif t >= config.burn_in and (t - config.burn_in) % config.thin == 0:
            draws.append(theta.copy())
            logs.append(current)
    rate = accepted / config.n_steps
    info = {"config": config.echo(), "initial_proposal_scale": initial_scale, "proposal_scale": scale}
    if rate < config.min_acceptance:
        raise DiagnosticsError("acceptance rate %.4f below %.4f" % (rate, config.min_acceptance), rate)
    return PosteriorSamples(np.array(draws), np.array(logs), rate, info)


def _run_componentwise(config, data, kind, prior):
    if data.is_matrix:
        raise ValueError("componentwise sampler supports linear classifiers only")
    if isinstance(prior, IsotropicGaussian):
        prior_kind, pscale, C1 = _kernels.GAUSSIAN, prior.sigma, math.inf
    elif isinstance(prior, ScaledStudent):
        prior_kind, pscale, C1 = _kernels.STUDENT, prior.tau, prior.C1
    else:
        raise TypeError("componentwise sampler needs a Gaussian or scaled Student prior")
    loss_kind = _kernels.HINGE if kind is LossKind.HINGE else _kernels.LOGISTIC
    rng = np.random.default_rng(config.seed)
    theta = _initial_state(config, prior, rng)
    d = theta.shape[0]
    ZT = np.ascontiguousarray((data.features * data.labels[:, None]).T)
    margins = theta @ ZT
    base = config.proposal_scale if config.proposal_scale is not None else 2.4 / math.sqrt(d) * _prior_scale(prior)
    scales = np.full(d, float(base))
    jump = float(config.jump_scale or 0.0)
    accepts = np.zeros(d)

    def batch(k, adapt):
        normals = rng.standard_normal((k, d, 2))
        uniforms = rng.random((k, d, 3))
        if prior_kind == _kernels.STUDENT:
            indep = rng.standard_t(3, size=(k, d)) / math.sqrt(3.0)
        else:
            indep = rng.standard_normal((k, d))
        return _kernels.coordinate_sweeps(
            theta, margins, ZT, float(config.lam), loss_kind, float(config.s_max), prior_kind, float(pscale),
            float(C1), scales, jump, normals, uniforms, indep, adapt, accepts,
        )

    if config.burn_in:
        batch(config.burn_in, bool(config.adapt))
    kept = batch(config.n_steps - config.burn_in, False)[:: config.thin]
    rate = float(accepts.sum() / (d * config.n_steps))
    info = {"config": config.echo(), "initial_proposal_scale": base, "proposal_scales": scales.tolist()}
    if rate < config.min_acceptance:
        raise DiagnosticsError("acceptance rate %.4f below %.4f" % (rate, config.min_acceptance), rate)
    s = data.features @ kept.T
    risk = losses_from_scores(kind, data.labels[:, None], s, config.s_max).mean(axis=0)
    logs = -config.lam * risk + np.array([log_density_unnormalized(prior, th) for th in kept])
    return PosteriorSamples(kept, logs, rate, info)


def posterior_mean(samples: PosteriorSamples):
    """Average of the draws; for factor states, the average of ``L @ R.T``."""
    draws = samples.draws
    if len(draws) == 0:
        raise ValueError("no draws")
    first = draws[0]
    if isinstance(first, FactorState) or hasattr(first, "product"):
        acc = np.zeros_like(first.product())
        for st in draws:
            acc += st.product()
        return acc / len(draws)
    return np.mean(np.asarray(draws, dtype=float), axis=0)


def _flatten(draw):
    if isinstance(draw, FactorState):
        names = (
            ["L_%d_%d" % ix for ix in np.ndindex(draw.L.shape)]
            + ["R_%d_%d" % ix for ix in np.ndindex(draw.R.shape)]
            + ["gamma_%d" % k for k in range(draw.gamma.shape[0])]
        )
        return names, np.concatenate([draw.L.ravel(), draw.R.ravel(), draw.gamma])
    v = np.asarray(draw, dtype=float).ravel()
    return ["theta_%d" % i for i in range(v.shape[0])], v


def save_samples(samples: PosteriorSamples, path) -> None:
    """Write draws as CSV (one row per draw) plus a ``<path>.json`` sidecar."""
    path = str(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, draw in enumerate(samples.draws):
            names, vals = _flatten(draw)
            if i == 0:
                w.writerow(names + ["log_unnorm_target"])
            w.writerow([repr(float(v)) for v in vals] + [repr(float(samples.log_unnorm_target[i]))])
    side = {"acceptance_rate": samples.acceptance_rate, "n_draws": len(samples.draws)}
    side.update(_jsonable(samples.info))
    with open(path + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_samples(path) -> PosteriorSamples:
    """Read a vector-valued sample CSV written by :func:`save_samples`."""
    path = str(path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path + ".json") as fh:
        side = json.load(fh)
    rate = side.pop("acceptance_rate")
    side.pop("n_draws", None)
    return PosteriorSamples(raw[:, :-1], raw[:, -1], rate, side)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
