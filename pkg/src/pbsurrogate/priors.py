"""Prior families: isotropic Gaussian, scaled Student on an L1 ball, and the
hierarchical low-rank prior for matrix completion.

Densities are unnormalized. Constants that do not depend on the parameter
are dropped; for the hierarchical prior the ``-log(gamma_k)/2`` terms of the
conditional Gaussians are kept because they depend on ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .exceptions import SamplingError, SupportError

DEFAULT_MAX_PROPOSALS = 1_000_000

GAMMA = "gamma"
INVERSE_GAMMA = "inverse_gamma"


@dataclass(frozen=True)
class IsotropicGaussian:
    sigma: float
    d: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if int(self.d) < 1:
            raise ValueError("d must be a positive integer")


@dataclass(frozen=True)
class ScaledStudent:
    """Density proportional to ``prod_i (tau^2 + theta_i^2)^(-2)`` on ``||theta||_1 <= C1``.

    Each factor is a Student-t(3) density with scale ``tau / sqrt(3)``, so
    the unrestricted coordinates have variance ``tau^2``.
    """

    tau: float
    C1: float
    d: int

    def __post_init__(self):
        if not (self.tau > 0 and self.C1 > 0):
            raise ValueError("tau and C1 must be positive")
        if int(self.d) < 1:
            raise ValueError("d must be a positive integer")
        if not self.C1 > 2 * self.d * self.tau:
            raise ValueError("C1 must exceed 2*d*tau (got C1=%g, 2*d*tau=%g)" % (self.C1, 2 * self.d * self.tau))


@dataclass(frozen=True)
class LowRankHier:
    """``gamma_k ~ pi_gamma`` iid, rows of L and R ~ N(0, diag(gamma)).

    ``pi_gamma`` is Gamma(shape=a, rate=b) or InverseGamma(shape=a, scale=b).
    """

    d1: int
    d2: int
    K_rank: int
    a: float
    b: float
    gamma_kind: str = INVERSE_GAMMA

    def __post_init__(self):
        if min(int(self.d1), int(self.d2), int(self.K_rank)) < 1:
            raise ValueError("d1, d2 and K_rank must be positive integers")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")
        if self.gamma_kind not in (GAMMA, INVERSE_GAMMA):
            raise ValueError("gamma_kind must be %r or %r" % (GAMMA, INVERSE_GAMMA))


PriorSpec = Union[IsotropicGaussian, ScaledStudent, LowRankHier]


@dataclass
class FactorState:
    """Parameter of the hierarchical model: factors and per-column variances."""

    L: np.ndarray
    R: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.L.shape[1] != self.R.shape[1] or self.gamma.shape != (self.L.shape[1],):
            raise ValueError("L, R and gamma disagree on the number of columns")

    def product(self) -> np.ndarray:
        return self.L @ self.R.T

    def copy(self) -> "FactorState":
        return FactorState(self.L.copy(), self.R.copy(), self.gamma.copy())


@dataclass(frozen=True)
class TranslatedPrior:
    """Scaled Student prior restricted to an L1 ball of radius ``2*d*tau`` and shifted to ``center``."""

    base: ScaledStudent
    center: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.shape != (self.base.d,):
            raise ValueError("center must be a d-vector")
        object.__setattr__(self, "center", c)

    @property
    def radius(self) -> float:
        return 2.0 * self.base.d * self.base.tau


def log_gamma_prior(gamma, a: float, b: float, kind: str) -> np.ndarray:
    """Unnormalized log density of the variance prior, elementwise."""
    g = np.asarray(gamma, dtype=float)
    if kind == GAMMA:
        return (a - 1.0) * np.log(g) - b * g
    return -(a + 1.0) * np.log(g) - b / g


def log_density_unnormalized(prior: PriorSpec, theta) -> float:
    """Log of the unnormalized prior density at ``theta``.

    Raises SupportError outside the support rather than returning -inf.
    """
    if isinstance(prior, IsotropicGaussian):
        th = _vector(theta, prior.d)
        return float(-0.5 * np.dot(th, th) / prior.sigma**2)
    if isinstance(prior, ScaledStudent):
        th = _vector(theta, prior.d)
        l1 = float(np.abs(th).sum())
        if l1 > prior.C1:
            raise SupportError("||theta||_1 = %g exceeds C1 = %g" % (l1, prior.C1))
        return float(-2.0 * np.sum(np.log(prior.tau**2 + th**2)))
    if isinstance(prior, LowRankHier):
        L, R, gamma = theta.L, theta.R, theta.gamma
        if L.shape != (prior.d1, prior.K_rank) or R.shape != (prior.d2, prior.K_rank):
            raise ValueError("factor shapes do not match the prior")
        if np.any(~(gamma > 0)):
            raise SupportError("all gamma entries must be positive")
        sq = np.sum(L**2, axis=0) + np.sum(R**2, axis=0)
        out = np.sum(log_gamma_prior(gamma, prior.a, prior.b, prior.gamma_kind))
        out += np.sum(-0.5 * (prior.d1 + prior.d2) * np.log(gamma) - 0.5 * sq / gamma)
        return float(out)
    raise TypeError("unknown prior %r" % (prior,))


def in_support(prior: PriorSpec, theta) -> bool:
    if isinstance(prior, ScaledStudent):
        return bool(np.abs(np.asarray(theta)).sum() <= prior.C1)
    if isinstance(prior, LowRankHier):
        return bool(np.all(np.asarray(theta.gamma) > 0))
    return True


def sample_gamma(a: float, b: float, kind: str, rng, size=None):
    if kind == GAMMA:
        return rng.gamma(a, 1.0 / b, size=size)
    return b / rng.gamma(a, 1.0, size=size)


def sample_prior(prior: PriorSpec, rng, max_proposals: int = DEFAULT_MAX_PROPOSALS):
    """One exact draw from ``prior``."""
    if isinstance(prior, IsotropicGaussian):
        return prior.sigma * rng.standard_normal(prior.d)
    if isinstance(prior, ScaledStudent):
        return _student_in_ball(prior.tau, prior.d, prior.C1, 1, rng, max_proposals)[0]
    if isinstance(prior, LowRankHier):
        gamma = sample_gamma(prior.a, prior.b, prior.gamma_kind, rng, size=prior.K_rank)
        sd = np.sqrt(gamma)
        L = rng.standard_normal((prior.d1, prior.K_rank)) * sd
        R = rng.standard_normal((prior.d2, prior.K_rank)) * sd
        return FactorState(L, R, gamma)
    raise TypeError("unknown prior %r" % (prior,))


def sample_translated(p0: TranslatedPrior, rng, size=None, max_proposals: int = DEFAULT_MAX_PROPOSALS):
    """Draw(s) from the translated, ball-restricted Student prior."""
    m = 1 if size is None else int(size)
    z = _student_in_ball(p0.base.tau, p0.base.d, p0.radius, m, rng, max_proposals)
    out = z + p0.center
    return out[0] if size is None else out


def student_scale(tau: float) -> float:
    """Scale of the t(3) law whose density is proportional to ``(tau^2 + t^2)^(-2)``."""
    return tau / np.sqrt(3.0)


def _student_in_ball(tau, d, radius, size, rng, max_proposals):
    # Budget is max_proposals attempts per requested draw; fail early once the
    # observed acceptance rate makes the budget unreachable.
    budget = max_proposals * size
    accepted = []
    n_acc = n_prop = 0
    while n_acc < size:
        batch = int(min(max(2 * (size - n_acc), 64), 200_000))
        z = student_scale(tau) * rng.standard_t(3, size=(batch, d))
        ok = np.abs(z).sum(axis=1) <= radius
        n_prop += batch
        take = z[ok][: size - n_acc]
        accepted.append(take)
        n_acc += take.shape[0]
        if n_acc >= size:
            break
        rate = n_acc / n_prop
        if n_prop >= budget or (n_prop >= 10_000 and rate * budget < size):
            raise SamplingError(
                "rejection budget exceeded (acceptance rate ~ %.3g)" % rate, acceptance_rate=rate
            )
    return np.concatenate(accepted, axis=0)


def _vector(theta, d):
    th = np.asarray(theta, dtype=float)
    if th.shape != (d,):
        raise ValueError("expected a %d-vector, got shape %s" % (d, th.shape))
    return th


def prior_to_dict(prior: PriorSpec) -> dict:
    if isinstance(prior, IsotropicGaussian):
        return {"kind": "isotropic_gaussian", "sigma": prior.sigma, "d": prior.d}
    if isinstance(prior, ScaledStudent):
        return {"kind": "scaled_student", "tau": prior.tau, "C1": prior.C1, "d": prior.d}
    if isinstance(prior, LowRankHier):
        return {
            "kind": "low_rank_hier", "d1": prior.d1, "d2": prior.d2, "K_rank": prior.K_rank,
            "a": prior.a, "b": prior.b, "gamma_kind": prior.gamma_kind,
        }
    raise TypeError("unknown prior %r" % (prior,))


def prior_from_dict(cfg: dict) -> PriorSpec:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "isotropic_gaussian":
        return IsotropicGaussian(float(cfg["sigma"]), int(cfg["d"]))
    if kind == "scaled_student":
        return ScaledStudent(float(cfg["tau"]), float(cfg["C1"]), int(cfg["d"]))
    if kind == "low_rank_hier":
        return LowRankHier(
            int(cfg["d1"]), int(cfg["d2"]), int(cfg["K_rank"]), float(cfg["a"]), float(cfg["b"]),
            cfg.get("gamma_kind", INVERSE_GAMMA),
        )
    raise ValueError("unknown prior kind %r" % kind)
