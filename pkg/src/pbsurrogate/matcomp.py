"""1-bit matrix completion with the hinge-loss Gibbs posterior over ``M = L R^T``.

Two learners share the hierarchical low-rank prior: a Metropolis-within-blocks
chain and a mean-field variational fit. The variational family is a product of
Gaussians over the entries of ``L`` and ``R`` and, per column, a distribution
over ``gamma_k`` of the same kind as the prior (Gamma with rate, or inverse
Gamma with scale).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, sparse
from scipy.special import digamma, gammaln
from scipy.stats import norm

from . import _kernels
from .exceptions import DiagnosticsError, OptimizationError, SupportError
from .gibbs import GibbsConfig, PosteriorSamples, _jsonable
from .losses import DEFAULT_S_MAX, Dataset, LossKind, empirical_risk, scores
from .priors import GAMMA, INVERSE_GAMMA, FactorState, LowRankHier, log_density_unnormalized, sample_prior

__all__ = [
    "FactorState", "VBFamilySpec", "gaussian_hinge_expectation", "hinge_matcomp_risk", "matcomp_chain",
    "vb_fit", "vb_objective", "vb_mean_matrix", "save_matrix_csv", "save_diagnostics",
]


def _check_matrix_data(data: Dataset, d1: int, d2: int):
    if not data.is_matrix:
        raise ValueError("matrix-completion data required")
    if data.shape != (d1, d2):
        raise ValueError("data shape %s does not match factor shapes (%d, %d)" % (data.shape, d1, d2))


def hinge_matcomp_risk(state, data: Dataset, s_max: float = DEFAULT_S_MAX) -> float:
    """Empirical hinge risk of ``L @ R.T`` using only the observed entries."""
    return empirical_risk(LossKind.HINGE, data, state, s_max)


def gaussian_hinge_expectation(mu, s):
    """``E[(1 - z)_+]`` for ``z ~ N(mu, s^2)``: ``(1 - mu) Phi(c) + s phi(c)`` with ``c = (1 - mu)/s``."""
    mu = np.asarray(mu, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("standard deviation must be nonnegative")
    gap = 1.0 - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(s > 0, gap / np.where(s > 0, s, 1.0), 0.0)
        out = np.where(s > 0, gap * norm.cdf(c) + s * norm.pdf(c), np.maximum(gap, 0.0))
    return float(out) if out.ndim == 0 else out


def _incidence(idx, size, n):
    """Sparse ``size x n`` matrix summing per-observation rows into factor rows."""
    return sparse.csr_matrix((np.ones(n), (idx, np.arange(n))), shape=(size, n))


def _csr_index(idx, size):
    order = np.argsort(idx, kind="stable")
    ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(np.bincount(idx, minlength=size), out=ptr[1:])
    return ptr, order.astype(np.int64)


def matcomp_chain(config: GibbsConfig, data: Dataset, prior: LowRankHier) -> PosteriorSamples:
    """Sample the hinge Gibbs posterior over ``(L, R, gamma)``.

    One step of ``config.n_steps`` is a full sweep over the rows of ``L``, the
    rows of ``R`` and the components of ``gamma``. Proposal scales adapt during
    burn-in only. ``config.init`` may hold a :class:`FactorState` warm start.
    """
    _check_matrix_data(data, prior.d1, prior.d2)
    rng = np.random.default_rng(config.seed)
    if config.init is None:
        state = sample_prior(prior, rng)
    else:
        state = config.init.copy()
        if state.L.shape != (prior.d1, prior.K_rank) or state.R.shape != (prior.d2, prior.K_rank):
            raise ValueError("warm start shapes do not match the prior")
        if np.any(~(state.gamma > 0)):
            raise SupportError("warm start has nonpositive gamma")
    L = np.ascontiguousarray(state.L)
    R = np.ascontiguousarray(state.R)
    gamma = state.gamma.copy()
    d1, d2, K = prior.d1, prior.d2, prior.K_rank
    rows = np.ascontiguousarray(data.features[:, 0])
    cols = np.ascontiguousarray(data.features[:, 1])
    sc = scores(FactorState(L, R, gamma), data).copy()
    row_ptr, row_obs = _csr_index(rows, d1)
    col_ptr, col_obs = _csr_index(cols, d2)
    lam_n = config.lam / data.n if data.n else 0.0
    base = config.proposal_scale if config.proposal_scale is not None else 2.4 / math.sqrt(K) * 0.1
    scales_L = np.full(d1, base)
    scales_R = np.full(d2, base)
    scales_g = np.full(K, 0.5)
    accepts = np.zeros(3)
    inverse = prior.gamma_kind == INVERSE_GAMMA

    def run(k, adapt):
        out_L = np.empty((k, d1, K))
        out_R = np.empty((k, d2, K))
        out_g = np.empty((k, K))
        _kernels.factor_sweeps(
            L, R, gamma, data.labels, rows, cols, sc, row_ptr, row_obs, col_ptr, col_obs,
            float(lam_n), float(config.s_max), float(prior.a), float(prior.b), inverse,
            scales_L, scales_R, scales_g,
            rng.standard_normal((k, d1, K)), rng.standard_normal((k, d2, K)), rng.standard_normal((k, K)),
            rng.random((k, d1 + d2 + K)), adapt, accepts, out_L, out_R, out_g,
        )
        return out_L, out_R, out_g

    if config.burn_in:
        run(config.burn_in, bool(config.adapt))
    out_L, out_R, out_g = run(config.n_steps - config.burn_in, False)
    keep = slice(None, None, config.thin)
    draws = [FactorState(l, r, g) for l, r, g in zip(out_L[keep], out_R[keep], out_g[keep])]
    moves = config.n_steps * np.array([d1, d2, K], dtype=float)
    block_rates = accepts / moves
    rate = float(accepts.sum() / moves.sum())
    info = {
        "config": config.echo(), "block_acceptance": {"L": block_rates[0], "R": block_rates[1], "gamma": block_rates[2]},
        "initial_proposal_scale": base,
    }
    if rate < config.min_acceptance:
        raise DiagnosticsError("acceptance rate %.4f below %.4f" % (rate, config.min_acceptance), rate)
    logs = np.array([
        -config.lam * hinge_matcomp_risk(st, data, config.s_max) + log_density_unnormalized(prior, st) for st in draws
    ])
    return PosteriorSamples(draws, logs, rate, info)


# ---------------------------------------------------------------- variational


@dataclass
class VBFamilySpec:
    """Mean-field parameters.

    ``gamma_shape``/``gamma_param`` are the shape and rate of a Gamma law when
    ``gamma_kind == "gamma"``, or the shape and scale of an inverse Gamma law
    otherwise.
    """

    mean_L: np.ndarray
    var_L: np.ndarray
    mean_R: np.ndarray
    var_R: np.ndarray
    gamma_shape: np.ndarray
    gamma_param: np.ndarray
    gamma_kind: str = INVERSE_GAMMA
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mean_L", "var_L", "mean_R", "var_R", "gamma_shape", "gamma_param"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        if self.mean_L.shape != self.var_L.shape or self.mean_R.shape != self.var_R.shape:
            raise ValueError("means and variances disagree in shape")
        for name in ("var_L", "var_R", "gamma_shape", "gamma_param"):
            if np.any(~(getattr(self, name) > 0)):
                raise ValueError("%s must be strictly positive" % name)
        if self.gamma_kind == GAMMA and np.any(self.gamma_shape <= 1):
            raise ValueError("Gamma shape must exceed 1 so that E[1/gamma] is finite")

    @classmethod
    def initial(cls, prior: LowRankHier, seed: int = 0, mean_scale: float = 0.3, var: float = 0.01) -> "VBFamilySpec":
        """Random small means (to break the sign symmetry) and small variances."""
        rng = np.random.default_rng(seed)
        K = prior.K_rank
        if prior.gamma_kind == GAMMA:
            shape, param = np.full(K, max(prior.a, 1.0) + 1.0), np.full(K, prior.b)
        else:
            shape, param = np.full(K, prior.a), np.full(K, prior.b)
        return cls(
            mean_scale * rng.standard_normal((prior.d1, K)), np.full((prior.d1, K), var),
            mean_scale * rng.standard_normal((prior.d2, K)), np.full((prior.d2, K), var),
            shape, param, prior.gamma_kind,
        )

    def copy(self) -> "VBFamilySpec":
        return VBFamilySpec(self.mean_L, self.var_L, self.mean_R, self.var_R, self.gamma_shape, self.gamma_param,
                            self.gamma_kind, dict(self.diagnostics))

    def to_dict(self) -> dict:
        return {
            "mean_L": self.mean_L.tolist(), "var_L": self.var_L.tolist(), "mean_R": self.mean_R.tolist(),
            "var_R": self.var_R.tolist(), "gamma_shape": self.gamma_shape.tolist(),
            "gamma_param": self.gamma_param.tolist(), "gamma_kind": self.gamma_kind,
        }


def _gamma_moments(shape, param, kind):
    """``(E[log gamma], E[1/gamma])`` under the variational law."""
    if kind == GAMMA:
        return digamma(shape) - np.log(param), param / (shape - 1.0)
    return np.log(param) - digamma(shape), shape / param


def _kl_gamma_family(shape, param, a, b):
    # KL(Gamma(shape, rate=param) || Gamma(a, rate=b)); the inverse-Gamma KL is identical
    # with scales in place of rates since 1/gamma is then Gamma distributed.
    return ((shape - a) * digamma(shape) - gammaln(shape) + gammaln(a)
            + a * (np.log(param) - np.log(b)) + shape * (b - param) / param)


def _score_moments(fam: VBFamilySpec, rows, cols):
    mL, vL, mR, vR = fam.mean_L[rows], fam.var_L[rows], fam.mean_R[cols], fam.var_R[cols]
    mu = np.einsum("ik,ik->i", mL, mR)
    var = np.einsum("ik,ik->i", vL, mR**2 + vR) + np.einsum("ik,ik->i", mL**2, vR)
    return mu, var


def _kl_terms(fam: VBFamilySpec, prior: LowRankHier):
    e_log, e_inv = _gamma_moments(fam.gamma_shape, fam.gamma_param, fam.gamma_kind)
    sq = (fam.mean_L**2 + fam.var_L).sum(axis=0) + (fam.mean_R**2 + fam.var_R).sum(axis=0)
    dim_sum = prior.d1 + prior.d2
    n_entries = fam.var_L.size + fam.var_R.size
    kl = float(np.sum(_kl_gamma_family(fam.gamma_shape, fam.gamma_param, prior.a, prior.b)))
    kl += float(np.sum(0.5 * dim_sum * e_log + 0.5 * sq * e_inv))
    kl -= 0.5 * (np.log(fam.var_L).sum() + np.log(fam.var_R).sum()) + 0.5 * n_entries
    return kl


def vb_kl(fam: VBFamilySpec, prior: LowRankHier) -> float:
    """Exact ``KL(q || prior)`` for a mean-field member ``q``."""
    return _kl_terms(fam, prior)


def vb_expected_risk(fam: VBFamilySpec, data: Dataset) -> float:
    """Mean over observations of ``E[(1 - y z)_+]`` with ``z`` Gaussian with the propagated moments.

    The score ``<L_i, R_j>`` under ``q`` is a sum of products of Gaussians, so
    this is a moment-matched approximation of the exact expectation under ``q``.
    """
    rows, cols = data.features[:, 0], data.features[:, 1]
    mu, var = _score_moments(fam, rows, cols)
    return float(np.mean(gaussian_hinge_expectation(data.labels * mu, np.sqrt(var))))


def vb_objective(fam: VBFamilySpec, data: Dataset, prior: LowRankHier, lam: float) -> float:
    """``lam * E_q[r_n] + KL(q || prior)``."""
    _check_matrix_data(data, prior.d1, prior.d2)
    risk = vb_expected_risk(fam, data) if lam > 0 else 0.0
    return lam * risk + vb_kl(fam, prior)


def vb_mean_matrix(fam: VBFamilySpec) -> np.ndarray:
    """``E_q[L R^T]``, which factorizes under mean-field independence."""
    return fam.mean_L @ fam.mean_R.T


class _FactorBlock:
    """Objective and gradient in (means, log-variances) of one factor given the other."""

    def __init__(self, data, prior, lam, which):
        self.y = data.labels
        self.n = data.n
        rows, cols = data.features[:, 0], data.features[:, 1]
        self.own, self.other = (rows, cols) if which == "L" else (cols, rows)
        size = prior.d1 if which == "L" else prior.d2
        self.gather = _incidence(self.own, size, self.n)
        self.lam = lam
        self.which = which

    def setup(self, fam):
        if self.which == "L":
            self.shape = fam.mean_L.shape
            self.m_other, self.v_other = fam.mean_R[self.other], fam.var_R[self.other]
        else:
            self.shape = fam.mean_R.shape
            self.m_other, self.v_other = fam.mean_L[self.other], fam.var_L[self.other]
        _, self.e_inv = _gamma_moments(fam.gamma_shape, fam.gamma_param, fam.gamma_kind)

    def __call__(self, x):
        size = self.shape[0] * self.shape[1]
        m = x[:size].reshape(self.shape)
        logv = x[size:].reshape(self.shape)
        v = np.exp(logv)
        f = 0.5 * np.sum(self.e_inv * (m**2 + v)) - 0.5 * logv.sum()
        gm = self.e_inv * m
        gv = 0.5 * self.e_inv - 0.5 / v
        if self.lam > 0 and self.n:
            mo, vo = self.m_other, self.v_other
            mi, vi = m[self.own], v[self.own]
            mu = np.einsum("ik,ik->i", mi, mo)
            var = np.einsum("ik,ik->i", vi, mo**2 + vo) + np.einsum("ik,ik->i", mi**2, vo)
            sd = np.sqrt(var)
            c = (1.0 - self.y * mu) / sd
            w = self.lam / self.n
            f += w * float(np.sum((1.0 - self.y * mu) * norm.cdf(c) + sd * norm.pdf(c)))
            d_mu = -w * self.y * norm.cdf(c)
            d_var = w * norm.pdf(c) / (2.0 * sd)
            gm = gm + self.gather @ (d_mu[:, None] * mo + 2.0 * d_var[:, None] * mi * vo)
            gv = gv + self.gather @ (d_var[:, None] * (mo**2 + vo))
        return f, np.concatenate([gm.ravel(), (gv * v).ravel()])


def _update_factor(block, fam, max_inner):
    block.setup(fam)
    if block.which == "L":
        m, v = fam.mean_L, fam.var_L
    else:
        m, v = fam.mean_R, fam.var_R
    x0 = np.concatenate([m.ravel(), np.log(v).ravel()])
    f0, _ = block(x0)
    res = optimize.minimize(block, x0, jac=True, method="L-BFGS-B", options={"maxiter": max_inner})
    if not res.fun <= f0:
        return
    size = m.size
    new_m = res.x[:size].reshape(m.shape)
    new_v = np.exp(np.clip(res.x[size:], -700.0, 700.0)).reshape(m.shape)
    if block.which == "L":
        fam.mean_L, fam.var_L = new_m, new_v
    else:
        fam.mean_R, fam.var_R = new_m, new_v


def _update_gamma(fam, prior):
    sq = (fam.mean_L**2 + fam.var_L).sum(axis=0) + (fam.mean_R**2 + fam.var_R).sum(axis=0)
    half_dim = 0.5 * (prior.d1 + prior.d2)
    if fam.gamma_kind == INVERSE_GAMMA:
        # exact minimizer: the conditional law is inverse Gamma
        fam.gamma_shape = np.full_like(sq, prior.a + half_dim)
        fam.gamma_param = prior.b + 0.5 * sq
        return
    for k in range(sq.shape[0]):
        def f(z, s=sq[k]):
            shape, rate = 1.0 + math.exp(z[0]), math.exp(z[1])
            e_log, e_inv = digamma(shape) - z[1], rate / (shape - 1.0)
            return float(_kl_gamma_family(shape, rate, prior.a, prior.b) + half_dim * e_log + 0.5 * s * e_inv)

        z0 = np.array([math.log(fam.gamma_shape[k] - 1.0), math.log(fam.gamma_param[k])])
        res = optimize.minimize(f, z0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 2000})
        if res.fun <= f(z0):
            fam.gamma_shape[k] = 1.0 + math.exp(res.x[0])
            fam.gamma_param[k] = math.exp(res.x[1])


def vb_fit(data: Dataset, prior: LowRankHier, lam: float, family: Optional[VBFamilySpec] = None,
           max_iters: int = 200, tol: float = 1e-6, seed: int = 0, max_inner: int = 50,
           increase_tol: float = 1e-9) -> VBFamilySpec:
    """Block coordinate descent on the variational objective.

    Blocks are visited in the fixed order L, R, gamma. Stops when the relative
    decrease over an iteration falls below ``tol`` or after ``max_iters``
    iterations. Raises :class:`OptimizationError` (with the objective trace) if
    an iteration increases the objective by more than
    ``increase_tol * max(1, |objective|)``.
    """
    if not (tol > 0 and max_iters >= 1):
        raise ValueError("tol and max_iters must be positive")
    if not lam >= 0:
        raise ValueError("lam must be nonnegative")
    _check_matrix_data(data, prior.d1, prior.d2)
    fam = VBFamilySpec.initial(prior, seed) if family is None else family.copy()
    if fam.gamma_kind != prior.gamma_kind:
        raise ValueError("family and prior disagree on the variance law")
    blocks = [_FactorBlock(data, prior, lam, "L"), _FactorBlock(data, prior, lam, "R")]
    trace = [vb_objective(fam, data, prior, lam)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        for block in blocks:
            _update_factor(block, fam, max_inner)
        _update_gamma(fam, prior)
        current = vb_objective(fam, data, prior, lam)
        prev = trace[-1]
        trace.append(current)
        if current > prev + increase_tol * max(1.0, abs(prev)):
            raise OptimizationError("objective increased from %.12g to %.12g at iteration %d" % (prev, current, it), trace)
        if (prev - current) <= tol * max(1.0, abs(prev)):
            converged = True
            break
    fam.diagnostics = {"objective_trace": trace, "final_objective": trace[-1], "iterations": it, "converged": converged}
    return fam


def save_matrix_csv(M, path) -> None:
    """Dense CSV export of a learned matrix."""
    np.savetxt(path, np.asarray(M, dtype=float), delimiter=",", fmt="%.17g")


def save_diagnostics(path, diagnostics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(diagnostics), fh, indent=2, sort_keys=True)
