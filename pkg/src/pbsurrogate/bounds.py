"""Constants, KL divergences and evaluable right-hand sides of the excess-risk bounds.

Every ``bound_rhs_*`` returns a :class:`BoundReport` whose total is

    Psi * (excess_phi_term + kl_multiplier * kl_term / n)

with ``kl_multiplier`` defaulting to ``C_bar`` and ``lambda_used = n / C_bar``.
``Psi`` is not computable from the model constants; it defaults to 1 and
rate studies only compare shapes, never absolute validity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import DomainError, InfiniteKLError, InsufficientSpreadError
from .losses import Dataset

DEFAULT_K_FLOOR = 1e-6


@dataclass(frozen=True)
class BoundConstants:
    B_loss: float = 1.0
    L_lip: float = 1.0
    K_bernstein: float = 0.5
    c_margin: float = 1.0
    Psi: float = 1.0

    def __post_init__(self):
        for name in ("B_loss", "L_lip", "K_bernstein", "c_margin", "Psi"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)

    @property
    def C_bar(self) -> float:
        return max(2.0 * self.L_lip**2 * self.K_bernstein, self.B_loss)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["C_bar"] = self.C_bar
        return out

    @classmethod
    def from_dict(cls, cfg: Optional[dict]) -> "BoundConstants":
        cfg = dict(cfg or {})
        cfg.pop("C_bar", None)
        return cls(**{k: float(v) for k, v in cfg.items()})


@dataclass
class BoundReport:
    excess_phi_term: float
    kl_term: float
    lambda_used: float
    total: float
    n: int
    multiplier: float
    kl_multiplier: float
    construction: dict
    constants: BoundConstants
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["constants"] = self.constants.to_dict()
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _report(constants, n, excess, kl, construction, kl_multiplier=None, notes=()):
    mult = constants.C_bar if kl_multiplier is None else float(kl_multiplier)
    total = constants.Psi * (excess + mult * kl / n)
    return BoundReport(
        excess_phi_term=float(excess), kl_term=float(kl), lambda_used=n / constants.C_bar,
        total=float(total), n=int(n), multiplier=constants.Psi, kl_multiplier=mult,
        construction=construction, constants=constants, notes=list(notes),
    )


def kl_gaussian_isotropic(m, s: float, sigma: float) -> float:
    """KL(N(m, s^2 I) || N(0, sigma^2 I))."""
    if not (s > 0 and sigma > 0):
        raise DomainError("scales must be positive")
    m = np.atleast_1d(np.asarray(m, dtype=float))
    d = m.shape[0]
    ratio = (s / sigma) ** 2
    return float(np.dot(m, m) / (2 * sigma**2) + 0.5 * d * (ratio - math.log(ratio) - 1.0))


def kl_dirac_finite(theta_index: int, prior_weights) -> float:
    """KL of a point mass against a finite prior: ``-log(prior_weights[theta_index])``."""
    w = float(np.asarray(prior_weights, dtype=float)[theta_index])
    if w < 0:
        raise DomainError("prior weights must be nonnegative")
    if w == 0:
        raise InfiniteKLError("zero prior mass at index %d" % theta_index)
    return -math.log(w)


def bound_rhs_finite(constants: BoundConstants, M: int, n: int, prior_weight: Optional[float] = None):
    """Finite class, Dirac at the risk minimizer: ``Psi * C_bar * log(1/pi(theta*)) / n``."""
    if M < 1 or n < 1:
        raise DomainError("M and n must be positive")
    w = 1.0 / M if prior_weight is None else prior_weight
    kl = kl_dirac_finite(0, [w])
    return _report(constants, n, 0.0, kl, {"kind": "dirac", "M": int(M), "prior_weight": w})


def bound_rhs_gaussian(constants: BoundConstants, d: int, norm_theta_star_sq: float, sigma: float,
                       n: int, s: float):
    """Gaussian prior, Gaussian candidate centred at theta* with scale ``s``."""
    if not (d >= 1 and n >= 1 and sigma > 0 and s > 0 and norm_theta_star_sq >= 0):
        raise DomainError("invalid arguments to bound_rhs_gaussian")
    excess = constants.L_lip * s * math.sqrt(d)
    ratio = (s / sigma) ** 2
    kl = norm_theta_star_sq / (2 * sigma**2) + 0.5 * d * (ratio - math.log(ratio) - 1.0)
    return _report(constants, n, excess, kl, {"kind": "gaussian", "s": s, "sigma": sigma, "d": int(d)})


def canonical_gaussian_s(n: int, d: int) -> float:
    return 1.0 / (n * math.sqrt(d))


def scan_gaussian_s(constants, d, norm_theta_star_sq, sigma, n, grid: Optional[Sequence[float]] = None):
    """Minimize the Gaussian display over a log-grid of ``s``; returns (best, grid, totals)."""
    s0 = canonical_gaussian_s(n, d)
    if grid is None:
        lo, hi = min(s0, sigma) / 100.0, max(s0, sigma) * 10.0
        grid = np.unique(np.concatenate([np.geomspace(lo, hi, 400), [s0, sigma]]))
    grid = np.asarray(grid, dtype=float)
    reports = [bound_rhs_gaussian(constants, d, norm_theta_star_sq, sigma, n, s) for s in grid]
    totals = np.array([r.total for r in reports])
    # ties resolved towards the largest s
    best = len(totals) - 1 - int(np.argmin(totals[::-1]))
    return reports[best], grid, totals


def canonical_sparse_tau(n: int, d: int, C_x: float) -> float:
    return 1.0 / (C_x * n * math.sqrt(d))


def sparse_kl_bound(s_star: int, C1: float, tau: float) -> float:
    """Upper bound on KL(translated prior || prior): ``4 s* log(C1/(tau s*)) + log 2``."""
    return 4.0 * s_star * math.log(C1 / (tau * s_star)) + math.log(2.0)


def bound_rhs_sparse(constants: BoundConstants, d: int, s_star: int, C1: float, C_x: float, n: int,
                     tau: float, kl_multiplier: Optional[float] = None):
    """Sparse linear classification with the scaled Student prior.

    ``excess = 2 C_x tau sqrt(d)``, ``kl = 4 s* log(C1/(tau s*)) + log 2``.
    The multiplier applies to the whole KL bound.
    """
    if not (0 < tau < C1 / (2.0 * d)):
        raise DomainError("tau must lie in (0, C1/(2d)) = (0, %g)" % (C1 / (2.0 * d)))
    if not (1 <= s_star <= d):
        raise DomainError("s_star must satisfy 1 <= s_star <= d")
    if not (C_x > 0 and n >= 1):
        raise DomainError("C_x and n must be positive")
    excess = C_x * 2.0 * tau * math.sqrt(d)
    kl = sparse_kl_bound(s_star, C1, tau)
    construction = {
        "kind": "translated_student", "tau": tau, "canonical_tau": canonical_sparse_tau(n, d, C_x),
        "C1": C1, "C_x": C_x, "s_star": int(s_star), "d": int(d),
    }
    return _report(constants, n, excess, kl, construction, kl_multiplier)


def scan_sparse_tau(constants, d, s_star, C1, C_x, n, grid=None, kl_multiplier=None):
    t0 = canonical_sparse_tau(n, d, C_x)
    upper = C1 / (2.0 * d)
    if grid is None:
        grid = np.geomspace(min(t0, upper) / 1e3, upper * (1 - 1e-9), 400)
        if t0 < upper:
            grid = np.unique(np.concatenate([grid, [t0]]))
    grid = np.asarray(grid, dtype=float)
    reports = [bound_rhs_sparse(constants, d, s_star, C1, C_x, n, t, kl_multiplier) for t in grid]
    totals = np.array([r.total for r in reports])
    return reports[int(np.argmin(totals))], grid, totals


def c_a(a: float) -> float:
    """``log(8 sqrt(pi) Gamma(a) 2^(10a+1)) + 3`` evaluated in log space."""
    if not a > 0:
        raise DomainError("a must be positive")
    return math.log(8.0) + 0.5 * math.log(math.pi) + math.lgamma(a) + (10.0 * a + 1.0) * math.log(2.0) + 3.0


def matcomp_kl_bound(r: int, d1: int, d2: int, n: int, a: float) -> float:
    return 2.0 * (1.0 + 2.0 * a) * r * (d1 + d2) * (math.log(n * d1 * d2) + c_a(a))


def bound_rhs_matcomp(r: int, d1: int, d2: int, n: int, a: float, B_inf: float,
                      constants: BoundConstants, kl_multiplier: Optional[float] = None):
    """1-bit matrix completion: ``B/n + C_bar * 2(1+2a) r (d1+d2) [log(n d1 d2) + C_a] / n``."""
    if not (r >= 1 and a > 0 and B_inf > 0 and n >= 1 and d1 >= 1 and d2 >= 1):
        raise DomainError("invalid arguments to bound_rhs_matcomp")
    kl = matcomp_kl_bound(r, d1, d2, n, a)
    delta = B_inf / (8.0 * (n * d1 * d2) ** 2)
    construction = {"kind": "matcomp_box", "delta": delta, "r": int(r), "d1": int(d1), "d2": int(d2),
                    "a": a, "B_inf": B_inf, "C_a": c_a(a)}
    notes = ["KL multiplier taken equal to C_bar unless overridden"]
    return _report(constants, n, B_inf / n, kl, construction, kl_multiplier, notes)


def estimate_bernstein_K(risk: Callable, theta_star, sample_thetas, floor: float = DEFAULT_K_FLOOR) -> float:
    """Empirical Bernstein constant ``max ||theta - theta*||^2 / (R(theta) - R(theta*))``.

    ``risk`` maps a parameter to its population surrogate risk. Candidates
    whose excess risk is below ``floor`` are excluded.
    """
    ts = np.asarray(theta_star, dtype=float)
    r_star = float(risk(theta_star))
    best = None
    for th in sample_thetas:
        excess = float(risk(th)) - r_star
        if excess < floor:
            continue
        dist = float(np.sum((np.asarray(th, dtype=float) - ts) ** 2))
        ratio = dist / excess
        best = ratio if best is None else max(best, ratio)
    if best is None:
        raise InsufficientSpreadError("all candidates have excess risk below %g" % floor)
    return best


def check_margin(data: Dataset, c_margin: float, atol: float = 1e-12) -> bool:
    """True iff no ``p(x_i)`` lies in ``0 < |p - 1/2| < 1/(2c)``.

    Boundary points are compared with absolute tolerance ``atol`` so that
    ``p = 1/2 + h`` stored in floating point passes at ``c = 1/(2h)``.
    """
    if data.true_cond_prob is None:
        raise ValueError("dataset carries no true conditional probabilities")
    if not c_margin > 0:
        raise DomainError("c_margin must be positive")
    gap = np.abs(data.true_cond_prob - 0.5)
    bad = (gap > 0.0) & (gap < 1.0 / (2.0 * c_margin) - atol)
    return not bool(np.any(bad))
