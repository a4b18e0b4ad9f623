"""ACC and AUC for binary, multiclass (one-vs-rest) and multilabel tasks, plus ROC points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, SingleClass

TIE_POLICIES = ("half", "paper")


def predict_labels(scores, task: str) -> np.ndarray:
    """Hard predictions: argmax (lowest index wins ties) or, for multilabel, ``p >= 0.5``."""
    s = np.asarray(scores, dtype=np.float64)
    if task == "multilabel":
        return (s >= 0.5).astype(np.int64)
    if s.ndim == 1:
        return (s >= 0.5).astype(np.int64)
    return np.argmax(s, axis=1)


def accuracy(Y, Z) -> float:
    """Mean over samples of the fraction of labels predicted exactly."""
    Y = np.asarray(Y)
    Z = np.asarray(Z)
    if Y.shape != Z.shape:
        raise ShapeMismatch(f"true labels {Y.shape} and predictions {Z.shape} differ in shape")
    if Y.size == 0:
        raise ShapeMismatch("no samples to score")
    if Y.ndim == 1:
        Y, Z = Y[:, None], Z[:, None]
    return float(np.mean(np.mean(Y == Z, axis=1)))


def auc_pair_counts(scores, labels) -> tuple[int, int, int, int]:
    """Integer pair counts ``(less, tied, n_neg, n_pos)`` over (negative, positive) pairs.

    ``less`` counts pairs with ``f(neg) < f(pos)``; ``tied`` counts equal scores.
    Sorting the negatives once makes this O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.size} scores for {y.size} labels")
    pos = s[y == 1]
    neg = np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise SingleClass(f"AUC needs both classes ({pos.size} positive, {neg.size} negative)")
    left = np.searchsorted(neg, pos, side="left")
    right = np.searchsorted(neg, pos, side="right")
    less = int(left.sum())
    tied = int((right - left).sum())
    return less, tied, int(neg.size), int(pos.size)


def auc_binary(scores, labels, tie_policy: str = "half") -> float:
    """Probability that a random positive outscores a random negative.

    ``tie_policy="paper"`` counts only strict wins; ``"half"`` gives ties 1/2.
    """
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"tie_policy must be one of {TIE_POLICIES}")
    less, tied, n0, n1 = auc_pair_counts(scores, labels)
    wins = less if tie_policy == "paper" else less + 0.5 * tied
    return wins / (n0 * n1)


def _per_column_auc(S, Yb, tie_policy):
    per = []
    for j in range(S.shape[1]):
        try:
            per.append(auc_binary(S[:, j], Yb[:, j], tie_policy))
        except SingleClass:
            per.append(None)
    present = [a for a in per if a is not None]
    if not present:
        raise SingleClass("no label has both positive and negative samples")
    return float(np.mean(present)), per


def auc_multiclass_ovr(scores, labels, tie_policy: str = "half"):
    """Macro one-vs-rest AUC and per-class AUCs (``None`` where a class is absent)."""
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if S.ndim != 2 or S.shape[0] != y.size:
        raise ShapeMismatch(f"score matrix {S.shape} does not match {y.size} labels")
    if np.unique(y).size < 2:
        raise SingleClass("one-vs-rest AUC needs at least two classes present")
    onehot = (y[:, None] == np.arange(S.shape[1])[None, :]).astype(np.int64)
    return _per_column_auc(S, onehot, tie_policy)


def auc_multilabel(scores, Y, tie_policy: str = "half"):
    """Mean per-label AUC; labels with a single class present are skipped."""
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(Y)
    if S.shape != Y.shape or S.ndim != 2:
        raise ShapeMismatch(f"score matrix {S.shape} does not match label matrix {Y.shape}")
    return _per_column_auc(S, Y, tie_policy)


def roc_curve(scores, labels) -> np.ndarray:
    """ROC points ``(fpr, tpr)``, one per distinct threshold (descending), from (0,0) to (1,1)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.size} scores for {y.size} labels")
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        raise SingleClass(f"ROC needs both classes ({n1} positive, {n0} negative)")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    return np.vstack([np.r_[0, fp / n0], np.r_[0, tp / n1]]).T


def roc_area(points) -> float:
    p = np.asarray(points)
    return float(np.sum(np.diff(p[:, 0]) * (p[1:, 1] + p[:-1, 1]) / 2.0))


@dataclass
class MetricsReport:
    task: str
    n: int
    k: int
    acc: float
    auc: float
    per_label_auc: list = field(default_factory=list)
    roc_points: list = field(default_factory=list)
    tie_policy: str = "half"

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "k": self.k,
            "acc": self.acc,
            "auc": self.auc,
            "tie_policy": self.tie_policy,
            "per_label_auc": self.per_label_auc,
            "roc_points": [None if r is None else [list(map(float, p)) for p in r] for r in self.roc_points],
        }


def evaluate(probs, labels, task: str, tie_policy: str = "half") -> MetricsReport:
    """Metrics from predicted probabilities.

    ``probs`` is ``(n, 2)`` for binary, ``(n, C)`` for multiclass and
    ``(n, k)`` sigmoid outputs for multilabel; ``labels`` as returned by
    ``DatasetManifest.label_array``.
    """
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    pred = predict_labels(P, task)
    acc = accuracy(y, pred)
    if task == "binary":
        score = P[:, 1] if P.ndim == 2 else P
        auc = auc_binary(score, y, tie_policy)
        return MetricsReport(task, len(y), 1, acc, auc, [auc], [roc_curve(score, y)], tie_policy)
    if task == "multiclass":
        auc, per = auc_multiclass_ovr(P, y, tie_policy)
        Yb = (y[:, None] == np.arange(P.shape[1])[None, :]).astype(np.int64)
    elif task == "multilabel":
        auc, per = auc_multilabel(P, y, tie_policy)
        Yb = y
    else:
        raise ValueError(f"unknown task {task!r}")
    rocs = [roc_curve(P[:, j], Yb[:, j]) if a is not None else None for j, a in enumerate(per)]
    return MetricsReport(task, len(y), P.shape[1] if task == "multilabel" else 1, acc, auc, per, rocs, tie_policy)
