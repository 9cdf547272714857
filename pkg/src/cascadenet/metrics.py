"""Classification metrics, segmentation IoU, and k-means clustering.

All pure functions; k-means iterations are internally sequential.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError
from .image import MaskImage


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray  # (K, K) int64
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truths, class_names) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise InvalidInputError("preds and truths must have equal length")
    k = len(class_names)
    if preds.size and (preds.min() < 0 or preds.max() >= k
                       or truths.min() < 0 or truths.max() >= k):
        raise InvalidInputError(f"labels out of range for {k} classes")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts=counts, class_names=list(class_names))


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise InvalidInputError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def f1_scores(cm: ConfusionMatrix) -> tuple[dict[str, float | None], float]:
    """Per-class F1 and the macro mean.

    A class absent from both predictions and truths is excluded from the
    macro mean (reported as None); zero precision+recall contributes 0.
    """
    counts = cm.counts
    per_class: dict[str, float | None] = {}
    macro_terms = []
    for i, name in enumerate(cm.class_names):
        tp = counts[i, i]
        truth_total = counts[i, :].sum()
        pred_total = counts[:, i].sum()
        if truth_total == 0 and pred_total == 0:
            per_class[name] = None
            continue
        denom = truth_total + pred_total
        f1 = float(2.0 * tp / denom) if denom else 0.0
        per_class[name] = f1
        macro_terms.append(f1)
    if not macro_terms:
        raise UndefinedMetricError("no class present in predictions or truths")
    return per_class, float(np.mean(macro_terms))


@dataclass
class RocCurve:
    """Threshold-sweep operating points from (0,0) to (1,1), both monotone."""
    fpr: np.ndarray
    tpr: np.ndarray
    positive_class: int | str = 1


def roc_auc(scores, truths, positive_class=1) -> tuple[RocCurve, float]:
    """ROC from a descending threshold sweep; AUC by trapezoid rule.

    The area accumulates in raw (fp, tp) count units, all exact halves, so it
    equals the pair-counting rank statistic bit for bit after one division.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape:
        raise InvalidInputError("scores and truths must align")
    pos = truths == 1 if truths.dtype != bool else truths
    p = int(pos.sum())
    n = int((~pos).sum())
    if p == 0 or n == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_pos = pos[order]
    sorted_scores = scores[order]

    fps = [0]
    tps = [0]
    tp = fp = 0
    i = 0
    total = len(scores)
    while i < total:
        j = i
        while j < total and sorted_scores[j] == sorted_scores[i]:
            if sorted_pos[j]:
                tp += 1
            else:
                fp += 1
            j += 1
        fps.append(fp)
        tps.append(tp)
        i = j
    fps_arr = np.array(fps, dtype=np.float64)
    tps_arr = np.array(tps, dtype=np.float64)
    area = 0.0
    for idx in range(1, len(fps)):
        area += (fps_arr[idx] - fps_arr[idx - 1]) * (tps_arr[idx] + tps_arr[idx - 1]) / 2.0
    curve = RocCurve(fpr=fps_arr / n, tpr=tps_arr / p, positive_class=positive_class)
    return curve, float(area / (p * n))


def macro_ovr_auc(probabilities, truths,
                  class_names=None) -> tuple[dict, float]:
    """One-vs-rest AUC per class plus the unweighted mean."""
    probs = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise InvalidInputError("probabilities must be N x K with K >= 2")
    k = probs.shape[1]
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    missing = [names[c] for c in range(k) if not np.any(truths == c)]
    if missing:
        raise UndefinedMetricError(f"classes missing from truths: {missing}")
    per_class = {}
    for c in range(k):
        _, auc = roc_auc(probs[:, c], (truths == c).astype(np.int64),
                         positive_class=names[c])
        per_class[names[c]] = auc
    return per_class, float(np.mean(list(per_class.values())))


def mean_iou(pred: MaskImage, truth: MaskImage) -> float:
    """Mean of foreground and background IoU; an empty union scores 1."""
    if pred.pixels.shape != truth.pixels.shape:
        raise InvalidInputError("mask dimensions differ")
    ious = []
    for cls in (1, 0):
        a = pred.pixels == cls
        b = truth.pixels == cls
        union = np.logical_or(a, b).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(float(np.logical_and(a, b).sum() / union))
    return float(np.mean(ious))


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: list[float] = field(default_factory=list)  # WCSS per iteration


def _kpp_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(vectors)
    centroids = np.empty((k, vectors.shape[1]), dtype=np.float64)
    centroids[0] = vectors[rng.integers(n)]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = vectors[rng.integers(n)]
        else:
            centroids[i] = vectors[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((vectors - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 100,
           init: str = "kmeans++") -> KMeansResult:
    """Lloyd's algorithm, deterministic under seed; objective never increases."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise InvalidInputError("kmeans expects an N x D matrix")
    n = len(vectors)
    if k < 1 or k > n:
        raise InvalidInputError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    if init == "kmeans++":
        centroids = _kpp_init(vectors, k, rng)
    elif init == "random":
        centroids = vectors[rng.choice(n, size=k, replace=False)].astype(np.float64)
    else:
        raise InvalidInputError(f"unknown init {init!r}")

    assignments = np.full(n, -1, dtype=np.int64)
    objective: list[float] = []
    for _ in range(max_iter):
        d2 = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for c in range(k):
            members = vectors[new_assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster on the farthest point
                centroids[c] = vectors[d2.min(axis=1).argmax()]
        d2_new = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2_new.argmin(axis=1)
        objective.append(float(d2_new[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    return KMeansResult(assignments=assignments, centroids=centroids,
                        objective=objective)
