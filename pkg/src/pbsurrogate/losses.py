"""Losses, empirical risks and Bayes risks for binary classification.

Surrogates are evaluated at the real-valued score (``theta @ x`` for linear
classifiers, ``M[i, j]`` for matrix completion), not at the sign of the score.
Scores are clamped to ``[-s_max, s_max]`` before any surrogate is evaluated so
that the surrogate is bounded by ``LossKind.bound(s_max)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

import numpy as np

from .exceptions import DomainError

DEFAULT_S_MAX = 50.0


class LossKind(enum.Enum):
    ZERO_ONE = "zero_one"
    HINGE = "hinge"
    LOGISTIC = "logistic"

    @property
    def is_surrogate(self) -> bool:
        return self is not LossKind.ZERO_ONE

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant in the score argument."""
        if self is LossKind.ZERO_ONE:
            raise DomainError("the 0-1 loss is not Lipschitz")
        return 1.0

    def bound(self, s_max: float = DEFAULT_S_MAX) -> float:
        """Upper bound of the loss on scores clamped to ``[-s_max, s_max]``."""
        if self is LossKind.ZERO_ONE:
            return 1.0
        if self is LossKind.HINGE:
            return 1.0 + s_max
        return float(np.logaddexp(0.0, s_max))

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_").replace("zeroone", "zero_one")
        return cls(key)


class FactorPair(NamedTuple):
    """A low-rank predictor ``M = L @ R.T``."""

    L: np.ndarray
    R: np.ndarray

    def product(self) -> np.ndarray:
        return self.L @ self.R.T


@dataclass(frozen=True)
class Dataset:
    """Features (or entry positions) with +/-1 labels.

    For matrix completion ``features`` is an ``(n, 2)`` integer array of
    zero-based ``(row, col)`` positions and ``shape`` holds ``(d1, d2)``.
    """

    features: np.ndarray
    labels: np.ndarray
    true_cond_prob: Optional[np.ndarray] = None
    shape: Optional[tuple] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float)
        if labels.ndim != 1:
            raise ValueError("labels must be a 1-d array")
        if not np.all((labels == 1.0) | (labels == -1.0)):
            raise ValueError("labels must be exactly -1 or +1")
        object.__setattr__(self, "labels", labels)
        if self.shape is not None:
            feats = np.asarray(self.features, dtype=np.int64)
            if feats.ndim != 2 or feats.shape[1] != 2:
                raise ValueError("matrix-completion features must be (n, 2) index pairs")
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        else:
            feats = np.asarray(self.features, dtype=float)
            if feats.ndim != 2:
                raise ValueError("features must be an (n, d) matrix")
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("features and labels disagree on n")
        object.__setattr__(self, "features", feats)
        if self.true_cond_prob is not None:
            p = np.asarray(self.true_cond_prob, dtype=float)
            if p.shape != labels.shape:
                raise ValueError("true_cond_prob must have one entry per sample")
            if np.any((p < 0.0) | (p > 1.0)) or not np.all(np.isfinite(p)):
                raise ValueError("true_cond_prob entries must lie in [0, 1]")
            object.__setattr__(self, "true_cond_prob", p)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def is_matrix(self) -> bool:
        return self.shape is not None

    @property
    def dim(self) -> int:
        if self.is_matrix:
            raise DomainError("matrix-completion data has no feature dimension")
        return int(self.features.shape[1])


def scores(theta: Any, data: Dataset) -> np.ndarray:
    """Real-valued scores of a parameter point on every sample of ``data``.

    ``theta`` may be a d-vector (linear classifier), a dense ``(d1, d2)``
    matrix, or any object carrying ``L`` and ``R`` factor matrices.
    """
    if data.is_matrix:
        rows, cols = data.features[:, 0], data.features[:, 1]
        d1, d2 = data.shape
        if data.n and (rows.min() < 0 or cols.min() < 0 or rows.max() >= d1 or cols.max() >= d2):
            raise DomainError("entry index out of range for shape %s" % (data.shape,))
        if hasattr(theta, "L") and hasattr(theta, "R"):
            L, R = np.asarray(theta.L), np.asarray(theta.R)
            if L.shape[0] != d1 or R.shape[0] != d2:
                raise ValueError("factor shapes do not match data shape")
            return np.einsum("ik,ik->i", L[rows], R[cols])
        M = np.asarray(theta, dtype=float)
        if M.shape != (d1, d2):
            raise ValueError("matrix shape %s does not match data shape %s" % (M.shape, data.shape))
        return M[rows, cols]
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != data.dim:
        raise ValueError(
            "parameter dimension %s does not match feature dimension %d" % (theta.shape, data.dim)
        )
    return data.features @ theta


def surrogate_loss(kind, y, score, s_max: float = DEFAULT_S_MAX):
    """Convex surrogate loss of label(s) ``y`` at score(s) ``score``.

    Hinge: ``max(0, 1 - y*s)``; logistic: ``log(1 + exp(-y*s))`` evaluated
    with ``logaddexp`` so large margins neither overflow nor lose precision.
    """
    kind = LossKind.parse(kind)
    if not kind.is_surrogate:
        raise DomainError("the 0-1 loss is not a surrogate")
    s = np.asarray(score, dtype=float)
    if not np.all(np.isfinite(s)):
        raise DomainError("score must be finite")
    margin = np.asarray(y, dtype=float) * np.clip(s, -s_max, s_max)
    if kind is LossKind.HINGE:
        out = np.maximum(0.0, 1.0 - margin)
    else:
        out = np.logaddexp(0.0, -margin)
    return float(out) if out.ndim == 0 else out


def zero_one_loss(y, score):
    """Misclassification indicator; a zero score counts as an error for both labels."""
    m = np.asarray(y, dtype=float) * np.asarray(score, dtype=float)
    out = (m <= 0.0).astype(float)
    return float(out) if out.ndim == 0 else out


def losses_from_scores(kind, labels, s, s_max: float = DEFAULT_S_MAX) -> np.ndarray:
    kind = LossKind.parse(kind)
    if kind is LossKind.ZERO_ONE:
        return zero_one_loss(labels, s)
    return surrogate_loss(kind, labels, s, s_max)


def empirical_risk(kind, data: Dataset, theta, s_max: float = DEFAULT_S_MAX) -> float:
    """Mean per-sample loss of ``theta`` on ``data``."""
    s = scores(theta, data)
    return float(np.mean(losses_from_scores(kind, data.labels, s, s_max)))


def bayes_risk_exact(data: Dataset) -> float:
    """Conditional Bayes risk ``mean(min(p, 1 - p))`` on the sampled design points."""
    if data.true_cond_prob is None:
        raise ValueError("dataset carries no true conditional probabilities")
    p = data.true_cond_prob
    return float(np.mean(np.minimum(p, 1.0 - p)))


def sign_risk_equivalence(m1, m2, data: Optional[Dataset] = None) -> bool:
    """True iff both points give scores of identical sign on every index.

    Without ``data`` both points must be dense arrays of the same shape and
    every entry is compared.
    """
    if data is None:
        a = m1.product() if hasattr(m1, "product") else np.asarray(m1, dtype=float)
        b = m2.product() if hasattr(m2, "product") else np.asarray(m2, dtype=float)
        if a.shape != b.shape:
            raise ValueError("points have different shapes")
    else:
        a, b = scores(m1, data), scores(m2, data)
    return bool(np.array_equal(np.sign(a), np.sign(b)))
