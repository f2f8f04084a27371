"""Mahalanobis OOD scoring over ID-trained embeddings, and detection metrics.

Convention throughout: higher score = more OOD; OOD is the positive class.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata


def embed_for_scoring(h_G, h_sup=None) -> np.ndarray:
    """Row-wise ``concat(h_G, h_sup) / ||concat||``; accepts single vectors or stacks."""
    parts = [np.atleast_2d(np.asarray(h_G, dtype=np.float64))]
    if h_sup is not None:
        parts.append(np.atleast_2d(np.asarray(h_sup, dtype=np.float64)))
    z = np.concatenate(parts, axis=1)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroDivisionError("zero-norm embedding cannot be normalised")
    z = z / norms
    return z[0] if np.ndim(h_G) == 1 else z


@dataclass(frozen=True, eq=False)
class GaussianStats:
    centroids: np.ndarray  # (C, D)
    covariance: np.ndarray  # (D, D) tied
    precision: np.ndarray  # inverse of covariance + ridge * I
    ridge: float

    def save(self, path) -> None:
        np.savez(path, centroids=self.centroids, covariance=self.covariance,
                 precision=self.precision, ridge=np.array(self.ridge))

    @classmethod
    def load(cls, path) -> "GaussianStats":
        with np.load(path) as f:
            return cls(f["centroids"], f["covariance"], f["precision"], float(f["ridge"]))


def estimate_gaussian(z, labels, num_classes: Optional[int] = None) -> GaussianStats:
    """Class means and tied covariance ``(1/N) sum_c sum_i (z_i - mu_c)(z_i - mu_c)^T``.

    The inverse is taken on ``cov + eps I`` with ``eps = 1e-6 * trace / D``
    (at least 1e-10).
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, width = z.shape
    C = int(num_classes if num_classes is not None else y.max() + 1)
    counts = np.bincount(y, minlength=C)
    if np.any(counts == 0):
        raise ValueError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")
    mu = np.stack([z[y == c].mean(axis=0) for c in range(C)])
    centred = z - mu[y]
    cov = centred.T @ centred / n
    cov = (cov + cov.T) / 2
    ridge = max(1e-6 * np.trace(cov) / width, 1e-10)
    reg = cov + ridge * np.eye(width)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("covariance singular even after ridge") from None
    inv_chol = np.linalg.solve(chol, np.eye(width))
    precision = inv_chol.T @ inv_chol
    return GaussianStats(mu, cov, (precision + precision.T) / 2, float(ridge))


def mahalanobis_all(z, stats: GaussianStats) -> np.ndarray:
    """(n, C) matrix of squared Mahalanobis distances to every centroid."""
    z = np.atleast_2d(z)
    diff = z[:, None, :] - stats.centroids[None, :, :]
    return np.einsum("ncd,de,nce->nc", diff, stats.precision, diff)


def mahalanobis_score(z, stats: GaussianStats, mode: str = "nearest"):
    """``nearest`` = min over classes (default); ``literal-max`` = max over classes."""
    d = mahalanobis_all(z, stats)
    if mode == "nearest":
        s = d.min(axis=1)
    elif mode == "literal-max":
        s = d.max(axis=1)
    else:
        raise ValueError(f"unknown scoring mode {mode!r}")
    return float(s[0]) if np.ndim(z) == 1 else s


def threshold_at_tpr(id_scores, target: float = 0.95) -> float:
    """Smallest lambda with at least ``target`` of ID scores <= lambda."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("no ID scores")
    k = max(1, int(math.ceil(target * s.size - 1e-9)))
    return float(s[k - 1])


# --------------------------------------------------------------------------
# metrics


def _check_binary(scores, is_ood):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_ood, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("both ID and OOD samples are required")
    return s, y


def auroc(scores, is_ood) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    s, y = _check_binary(scores, is_ood)
    r = rankdata(s)
    n_pos, n_neg = y.sum(), (~y).sum()
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def aupr(scores, is_ood) -> float:
    """Average precision over the descending score sweep, tied scores taken together."""
    s, y = _check_binary(scores, is_ood)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall = tp_at / y.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def fpr95_threshold(scores, is_ood, tpr: float = 0.95) -> float:
    """Largest threshold t such that at least ``tpr`` of OOD scores are >= t."""
    s, y = _check_binary(scores, is_ood)
    ood = np.sort(s[y])[::-1]
    k = max(1, int(math.ceil(tpr * ood.size - 1e-9)))
    return float(ood[k - 1])


def fpr95(scores, is_ood, tpr: float = 0.95) -> float:
    s, y = _check_binary(scores, is_ood)
    t = fpr95_threshold(s, y, tpr)
    return float(np.mean(s[~y] >= t))


def id_accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("no samples")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# --------------------------------------------------------------------------
# exports


@dataclass
class ScoredSet:
    scores: np.ndarray
    is_ood: np.ndarray
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_ood = np.asarray(self.is_ood, dtype=bool)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def write_csv(self, path, precision: int = 10) -> None:
        pred = np.argmax(self.logits, axis=1) if self.logits is not None else [None] * len(self.scores)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["graph_id", "score", "is_ood", "predicted_class"])
            for i, (s, o, p) in enumerate(zip(self.scores, self.is_ood, pred)):
                w.writerow([i, f"{s:.{precision}g}", int(o), "" if p is None else int(p)])

    def metrics(self, id_labels=None) -> dict:
        out = {
            "auroc": auroc(self.scores, self.is_ood),
            "aupr": aupr(self.scores, self.is_ood),
            "fpr95": fpr95(self.scores, self.is_ood),
            "lambda": threshold_at_tpr(self.scores[~self.is_ood]),
        }
        if id_labels is not None and self.logits is not None:
            out["id_acc"] = id_accuracy(self.logits[~self.is_ood], id_labels)
        return out
