"""Conditionally independent generative model of labeling-function votes.

Each LF j has a class-symmetric accuracy ``alpha_j`` (probability that a
non-abstaining vote matches the true class) and a coverage ``beta_j``.
Abstains carry no evidence, so a row with no votes gets the prior.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin

from .weaksup import LabelMatrix

ALPHA_MIN, ALPHA_MAX = 0.01, 0.99


class LabelModelError(ValueError):
    pass


@dataclass
class LabelModelParams:
    accuracies: np.ndarray
    coverages: np.ndarray
    class_balance: float
    lf_names: list[str] = field(default_factory=list)
    method: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.accuracies = np.asarray(self.accuracies, dtype=np.float64)
        self.coverages = np.asarray(self.coverages, dtype=np.float64)
        if not 0.0 < self.class_balance < 1.0:
            raise LabelModelError("class_balance must be in (0, 1)")
        if self.accuracies.shape != self.coverages.shape:
            raise LabelModelError("accuracies and coverages must have the same length")
        if not self.lf_names:
            self.lf_names = [f"lf{j}" for j in range(len(self.accuracies))]

    def to_dict(self) -> dict:
        return {
            "class_balance": self.class_balance,
            "method": self.method,
            "seed": self.seed,
            "lfs": {n: {"accuracy": float(a), "coverage": float(b)}
                    for n, a, b in zip(self.lf_names, self.accuracies, self.coverages)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelModelParams":
        names = list(doc["lfs"])
        return cls(
            accuracies=[doc["lfs"][n]["accuracy"] for n in names],
            coverages=[doc["lfs"][n]["coverage"] for n in names],
            class_balance=float(doc["class_balance"]),
            lf_names=names,
            method=doc.get("method", ""),
            seed=doc.get("seed"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelModelParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _as_votes(matrix) -> np.ndarray:
    if isinstance(matrix, LabelMatrix):
        return matrix.votes.astype(np.int64)
    return np.atleast_2d(np.asarray(matrix, dtype=np.int64))


def _posteriors(alpha: np.ndarray, p: float, L: np.ndarray) -> np.ndarray:
    la = np.log(alpha)
    l1a = np.log1p(-alpha)
    pos = (L == 1).astype(np.float64)
    neg = (L == -1).astype(np.float64)
    log_odds = (np.log(p) - np.log1p(-p)) + pos @ (la - l1a) + neg @ (l1a - la)
    out = expit(log_odds)
    # no vote, no update: return the prior bit-exactly
    out[~(L != 0).any(axis=1)] = p
    return out


def posterior(params: LabelModelParams, votes: Sequence[int]) -> float:
    """P(Y=+1 | votes) for one row of votes."""
    row = np.asarray(votes, dtype=np.int64)
    if row.ndim != 1 or row.shape[0] != params.accuracies.shape[0]:
        raise LabelModelError(f"expected {params.accuracies.shape[0]} votes, got shape {row.shape}")
    return float(_posteriors(params.accuracies, params.class_balance, row[None, :])[0])


def predict_labels(params: LabelModelParams, matrix) -> list[tuple[str, float]]:
    L = _as_votes(matrix)
    if L.shape[1] != params.accuracies.shape[0]:
        raise LabelModelError(f"matrix has {L.shape[1]} LFs, params have {params.accuracies.shape[0]}")
    probs = _posteriors(params.accuracies, params.class_balance, L)
    ids = matrix.group_ids if isinstance(matrix, LabelMatrix) else [str(i) for i in range(L.shape[0])]
    return list(zip(ids, probs.tolist()))


def agreement_stats(L: np.ndarray):
    """Empirical P(v_j == v_k | both vote) and the joint-vote counts."""
    voted = (L != 0).astype(np.float64)
    both = voted.T @ voted
    same = (L == 1).astype(np.float64).T @ (L == 1) + (L == -1).astype(np.float64).T @ (L == -1)
    with np.errstate(invalid="ignore", divide="ignore"):
        agree = np.where(both > 0, same / np.maximum(both, 1), np.nan)
    return agree, both


def _check_fittable(L: np.ndarray, minimum: int = 2):
    covering = int(((L != 0).any(axis=0)).sum())
    if covering < minimum:
        raise LabelModelError(f"need at least {minimum} LFs with nonzero coverage, found {covering}")


def _resolve_sign(alpha: np.ndarray) -> np.ndarray:
    if alpha.mean() < 0.5:
        alpha = 1.0 - alpha
    return np.clip(alpha, ALPHA_MIN, ALPHA_MAX)


def fit_moments(matrix, class_balance: float, lr: float = 0.1, n_iter: int = 20000,
                init: float = 0.7, gtol: float = 1e-10, lf_names=None) -> LabelModelParams:
    """Fit accuracies by matching pairwise agreement rates.

    Under conditional independence two LFs that both vote agree with
    probability ``a_j a_k + (1 - a_j)(1 - a_k)``. Gradient descent on the
    logits of ``a`` minimizes the squared gap to the observed rates.
    """
    L = _as_votes(matrix)
    _check_fittable(L)
    m = L.shape[1]
    agree, both = agreement_stats(L)
    mask = np.triu(both > 0, k=1)
    target = np.where(mask, agree, 0.0)
    theta = np.full(m, np.log(init / (1 - init)))
    for _ in range(n_iter):
        a = expit(theta)
        implied = np.outer(a, a) + np.outer(1 - a, 1 - a)
        resid = np.where(mask, implied - target, 0.0)
        r = resid + resid.T
        # d implied_jk / d a_j = 2 a_k - 1
        grad_a = 2.0 * (r @ (2 * a - 1))
        step = grad_a * a * (1 - a)
        theta -= lr * step
        if np.abs(step).max() < gtol:
            break
    return LabelModelParams(_resolve_sign(expit(theta)), (L != 0).mean(axis=0), class_balance,
                            _names(matrix, lf_names, m), "moments")


def fit_em(matrix, class_balance: float, init="moments", tol: float = 1e-6, max_iter: int = 500,
           lf_names=None) -> LabelModelParams:
    """Fit accuracies by expectation-maximization with a fixed class prior.

    ``init`` is ``"moments"``, a scalar, or a per-LF array. A non-moments
    start allows a single covering LF, which leaves alpha where it started.
    """
    L = _as_votes(matrix)
    m = L.shape[1]
    if isinstance(init, str):
        if init != "moments":
            raise LabelModelError(f"unknown init {init!r}")
        alpha = fit_moments(L, class_balance).accuracies.copy()
    else:
        _check_fittable(L, minimum=1)
        alpha = np.broadcast_to(np.asarray(init, dtype=np.float64), (m,)).copy()
    voted = L != 0
    n_j = voted.sum(axis=0)
    pos = (L == 1).astype(np.float64)
    neg = (L == -1).astype(np.float64)
    for _ in range(max_iter):
        q = _posteriors(np.clip(alpha, 1e-6, 1 - 1e-6), class_balance, L)
        agree = q @ pos + (1 - q) @ neg
        new = np.where(n_j > 0, agree / np.maximum(n_j, 1), alpha)
        delta = np.abs(new - alpha).max() if m else 0.0
        alpha = new
        if delta < tol:
            break
    return LabelModelParams(_resolve_sign(alpha), voted.mean(axis=0), class_balance,
                            _names(matrix, lf_names, m), "em")


def _names(matrix, lf_names, m):
    if lf_names is not None:
        return list(lf_names)
    if isinstance(matrix, LabelMatrix):
        return list(matrix.lf_names)
    return [f"lf{j}" for j in range(m)]


def sample_votes(accuracies, coverages, class_balance: float, n: int, seed: int = 0):
    """Draw (votes, labels) from the generative model itself."""
    rng = np.random.default_rng(seed)
    a = np.asarray(accuracies, dtype=np.float64)
    b = np.asarray(coverages, dtype=np.float64)
    y = np.where(rng.random(n) < class_balance, 1, -1)
    fires = rng.random((n, a.size)) < b
    correct = rng.random((n, a.size)) < a
    votes = np.where(fires, np.where(correct, y[:, None], -y[:, None]), 0).astype(np.int8)
    return votes, y


class LabelModel(BaseEstimator, ClassifierMixin):
    """Estimator front end: ``fit`` on a vote matrix, ``predict_proba`` rows."""

    def __init__(self, class_balance=0.5, method="moments", lr=0.1, n_iter=20000, tol=1e-6, max_iter=500):
        self.class_balance = class_balance
        self.method = method
        self.lr = lr
        self.n_iter = n_iter
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        if self.method == "moments":
            self.params_ = fit_moments(X, self.class_balance, lr=self.lr, n_iter=self.n_iter)
        elif self.method == "em":
            self.params_ = fit_em(X, self.class_balance, tol=self.tol, max_iter=self.max_iter)
        else:
            raise LabelModelError(f"unknown method {self.method!r}")
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "params_")
        p1 = np.array([p for _, p in predict_labels(self.params_, X)])
        return np.column_stack([1 - p1, p1])

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X)[:, 1] >= threshold).astype(int)
