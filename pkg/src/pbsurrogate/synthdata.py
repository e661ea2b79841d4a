"""Synthetic classification models with known conditional probabilities.

Labels follow ``p(x) = 1/2 + h * sign(score*(x))``, so the margin condition
holds with ``1/(2c) = h`` and the Bayes classifier is ``sign(score*(x))``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .losses import Dataset, LossKind, losses_from_scores

UNIT_SPHERE = "unit_sphere"
RADEMACHER_GRID = "rademacher_grid"


@dataclass(frozen=True)
class SparseModelSpec:
    d: int
    s_star: int
    signal: float = 1.0
    h: float = 0.45
    feature_law: str = UNIT_SPHERE

    def __post_init__(self):
        if not 1 <= self.s_star <= self.d:
            raise ValueError("s_star must satisfy 1 <= s_star <= d")
        if not 0 <= self.h <= 0.5:
            raise ValueError("h must lie in [0, 1/2]")
        if self.feature_law not in (UNIT_SPHERE, RADEMACHER_GRID):
            raise ValueError("unknown feature law %r" % self.feature_law)

    @property
    def margin_gap(self) -> float:
        """Enforced lower bound on ``|p - 1/2|`` away from the decision boundary."""
        return self.h

    @property
    def C_x(self) -> float:
        """``E||X||``: exact for both feature laws."""
        return 1.0 if self.feature_law == UNIT_SPHERE else math.sqrt(self.d)

    def theta_star(self) -> np.ndarray:
        th = np.zeros(self.d)
        th[: self.s_star] = self.signal
        return th


@dataclass(frozen=True)
class MatCompModelSpec:
    d1: int
    d2: int
    r: int
    B_inf: float = 1.0
    K_rank: Optional[int] = None
    h: float = 0.45

    def __post_init__(self):
        if not 1 <= self.r <= min(self.d1, self.d2):
            raise ValueError("r must satisfy 1 <= r <= min(d1, d2)")
        if not 0 <= self.h <= 0.5:
            raise ValueError("h must lie in [0, 1/2]")
        if not self.B_inf > 0:
            raise ValueError("B_inf must be positive")

    @property
    def rank(self) -> int:
        """Number of factor columns used by learners (default ``2 r``)."""
        return 2 * self.r if self.K_rank is None else int(self.K_rank)


def sample_features(law: str, m: int, d: int, rng) -> np.ndarray:
    if law == UNIT_SPHERE:
        X = rng.standard_normal((m, d))
        return X / np.linalg.norm(X, axis=1, keepdims=True)
    return rng.choice(np.array([-1.0, 1.0]), size=(m, d))


def _labels(p, rng):
    return np.where(rng.random(p.shape[0]) < p, 1.0, -1.0)


@dataclass
class SparseTruth:
    spec: SparseModelSpec
    theta_star: np.ndarray

    def cond_prob(self, X) -> np.ndarray:
        return 0.5 + self.spec.h * np.sign(X @ self.theta_star)

    def sample_features(self, m, rng):
        return sample_features(self.spec.feature_law, m, self.spec.d, rng)


@dataclass
class MatCompTruth:
    spec: MatCompModelSpec
    M_star: np.ndarray

    def cond_prob_matrix(self) -> np.ndarray:
        return 0.5 + self.spec.h * self.M_star


def gen_sparse(spec: SparseModelSpec, n: int, seed: int):
    """Draw ``n`` labelled points; returns ``(Dataset, theta_star)``."""
    rng = np.random.default_rng(seed)
    theta_star = spec.theta_star()
    X = sample_features(spec.feature_law, n, spec.d, rng)
    p = 0.5 + spec.h * np.sign(X @ theta_star)
    y = _labels(p, rng)
    meta = {"model": "sparse", "spec": asdict(spec), "seed": int(seed), "C_x": spec.C_x}
    return Dataset(X, y, p, meta=meta), theta_star


def matcomp_factors(spec: MatCompModelSpec, rng):
    """Generating pair in M(r, B): columns beyond ``r`` are zero, entries in ``[-B, B]``."""
    K = max(spec.rank, spec.r)
    U = np.zeros((spec.d1, K))
    V = np.zeros((spec.d2, K))
    U[:, : spec.r] = rng.uniform(-spec.B_inf, spec.B_inf, size=(spec.d1, spec.r))
    V[:, : spec.r] = rng.uniform(-spec.B_inf, spec.B_inf, size=(spec.d2, spec.r))
    return U, V


def gen_matcomp(spec: MatCompModelSpec, n: int, seed: int):
    """Sample ``n`` entry positions uniformly with replacement; returns ``(Dataset, M_star)``."""
    rng = np.random.default_rng(seed)
    U, V = matcomp_factors(spec, rng)
    M_star = np.sign(U @ V.T)
    M_star[M_star == 0] = 1.0
    rows = rng.integers(0, spec.d1, size=n)
    cols = rng.integers(0, spec.d2, size=n)
    p = 0.5 + spec.h * M_star[rows, cols]
    y = _labels(p, rng)
    meta = {"model": "matcomp", "spec": asdict(spec), "seed": int(seed), "U_bar": U, "V_bar": V}
    data = Dataset(np.column_stack([rows, cols]), y, p, shape=(spec.d1, spec.d2), meta=meta)
    return data, M_star


def _as_list(predictor):
    """Split a predictor into a list of single parameter points."""
    if isinstance(predictor, (list, tuple)) and not hasattr(predictor, "L"):
        return list(predictor), True
    return [predictor], False


def _matrix_of(point):
    return point.product() if hasattr(point, "product") else np.asarray(point, dtype=float)


def pointwise_excess(scores_, bayes_sign, margin_weight) -> np.ndarray:
    """``|2p - 1| * 1{sign(score) != Bayes}``; a zero score counts as disagreement."""
    return margin_weight * (np.sign(scores_) != bayes_sign)


def excess_risk_mc(predictor, truth, n_test: Optional[int] = 20_000, seed: int = 0, weights=None) -> float:
    """Misclassification excess risk ``R_01(predictor) - R*`` from exact conditional probabilities.

    ``predictor`` is one parameter point or a list of points (a randomized
    classifier, averaged with ``weights`` or uniformly). For sparse models the
    expectation over ``x`` is a Monte-Carlo average on ``n_test`` fresh draws;
    for matrix completion with ``n_test=None`` it is exact over all entries.
    """
    points, is_list = _as_list(predictor)
    if isinstance(truth, SparseTruth):
        rng = np.random.default_rng(seed)
        X = truth.sample_features(int(n_test), rng)
        s_true = X @ truth.theta_star
        bayes = np.sign(s_true)
        wgt = np.where(s_true != 0, 2.0 * truth.spec.h, 0.0)
        P = np.asarray(points, dtype=float)
        S = X @ P.T
        per = pointwise_excess(S, bayes[:, None], wgt[:, None]).mean(axis=0)
    elif isinstance(truth, MatCompTruth):
        bayes = truth.M_star
        wgt = np.full(bayes.shape, 2.0 * truth.spec.h)
        if n_test is None:
            per = np.array([pointwise_excess(_matrix_of(pt), bayes, wgt).mean() for pt in points])
        else:
            rng = np.random.default_rng(seed)
            rows = rng.integers(0, bayes.shape[0], size=int(n_test))
            cols = rng.integers(0, bayes.shape[1], size=int(n_test))
            per = np.array([
                pointwise_excess(_matrix_of(pt)[rows, cols], bayes[rows, cols], wgt[rows, cols]).mean()
                for pt in points
            ])
    else:
        raise TypeError("unknown truth model %r" % (truth,))
    if not is_list:
        return float(per[0])
    w = np.full(len(per), 1.0 / len(per)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.dot(w, per))


def population_surrogate_risk(truth: SparseTruth, kind, theta, n_mc: int = 200_000, seed: int = 0,
                              s_max: float = 50.0) -> float:
    """``E[p phi(s) + (1 - p) phi(-s)]`` on a fixed Monte-Carlo design (common random numbers)."""
    kind = LossKind.parse(kind)
    rng = np.random.default_rng(seed)
    X = truth.sample_features(n_mc, rng)
    p = truth.cond_prob(X)
    s = X @ np.asarray(theta, dtype=float)
    pos = losses_from_scores(kind, np.ones_like(s), s, s_max)
    neg = losses_from_scores(kind, -np.ones_like(s), s, s_max)
    return float(np.mean(p * pos + (1.0 - p) * neg))


def save_dataset(data: Dataset, path, header: Optional[dict] = None) -> None:
    """CSV with a leading ``# {json}`` line describing the generating spec and seed."""
    head = {k: v for k, v in data.meta.items() if not isinstance(v, np.ndarray)}
    if data.is_matrix:
        head["shape"] = list(data.shape)
    head.update(header or {})
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(head, sort_keys=True) + "\n")
        w = csv.writer(fh)
        if data.is_matrix:
            cols = ["row", "col"]
        else:
            cols = ["x_%d" % j for j in range(data.dim)]
        w.writerow(cols + ["label", "p"])
        p = data.true_cond_prob if data.true_cond_prob is not None else np.full(data.n, np.nan)
        for i in range(data.n):
            feats = [str(int(v)) for v in data.features[i]] if data.is_matrix else [repr(float(v)) for v in data.features[i]]
            w.writerow(feats + [str(int(data.labels[i])), repr(float(p[i]))])


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
        head = json.loads(first[2:]) if first.startswith("# ") else {}
        rows = list(csv.reader(fh))
    names, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    p = body[:, -1]
    p = None if np.all(np.isnan(p)) else p
    if names[:2] == ["row", "col"]:
        return Dataset(body[:, :2].astype(np.int64), body[:, -2], p, shape=tuple(head["shape"]), meta=head)
    return Dataset(body[:, :-2], body[:, -2], p, meta=head)
