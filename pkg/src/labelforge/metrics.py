"""Evaluation protocols: mIoU, keypoint PCK and L2, five-fold selection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataError
from .schema import LabelSchema


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_labels: int) -> np.ndarray:
    """|C| x |C| counts; rows = ground truth, columns = prediction."""
    truth = np.asarray(truth).ravel()
    pred = np.asarray(pred).ravel()
    if truth.shape != pred.shape:
        raise DataError(f"mask sizes differ: {truth.shape} vs {pred.shape}")
    if truth.size == 0:
        raise DataError("empty masks")
    hi = int(max(truth.max(), pred.max()))
    if hi >= n_labels:
        raise DataError(f"mask index {hi} out of range for {n_labels} labels")
    idx = truth.astype(np.int64) * n_labels + pred.astype(np.int64)
    return np.bincount(idx, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def miou(
    pred: np.ndarray,
    truth: np.ndarray,
    schema: LabelSchema,
    ignore_background: bool = False,
) -> tuple[dict[str, float], float]:
    """Per-label IoU and their mean.

    Labels absent from both masks are excluded from the mean; the
    background label (index 0) is excluded when the flag is set.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"resolution mismatch: pred {pred.shape} vs truth {truth.shape}")
    n = len(schema)
    cm = confusion_matrix(truth, pred, n)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_label: dict[str, float] = {}
    included = []
    for c in range(n):
        if union[c] == 0:
            continue  # label in neither mask
        if ignore_background and c == 0:
            continue
        iou = float(inter[c] / union[c])
        per_label[schema.names[c]] = iou
        included.append(iou)
    if not included:
        raise DataError("no labels present in either mask")
    return per_label, float(np.mean(included))


@dataclass(frozen=True)
class PckConfig:
    """PCK thresholds in percent of the longer image side."""

    thresholds: tuple[float, ...] = (5.0, 10.0, 15.0, 25.0)

    def __post_init__(self) -> None:
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th):
            raise DataError("thresholds must be positive")
        object.__setattr__(self, "thresholds", th)


def pck(
    pred_kps: Mapping[str, tuple[float, float]],
    truth_kps: Mapping[str, tuple[float, float]],
    image_size: tuple[int, int],
    config: PckConfig = PckConfig(),
) -> dict[float, float]:
    """Percentage of keypoints within each threshold distance.

    A keypoint counts as correct at threshold t when the Euclidean
    prediction error is at most (t/100) * max(h, w).
    """
    if not truth_kps:
        raise DataError("empty ground-truth keypoint set")
    missing = set(truth_kps) - set(pred_kps)
    if missing:
        raise DataError(f"predictions missing keypoints: {sorted(missing)}")
    h, w = image_size
    norm = float(max(h, w))
    dists = []
    for name, (tx, ty) in truth_kps.items():
        px, py = pred_kps[name]
        dists.append(float(np.hypot(px - tx, py - ty)))
    dists = np.asarray(dists)
    return {
        t: float(100.0 * np.mean(dists <= (t / 100.0) * norm))
        for t in config.thresholds
    }


def l2_heatmap(pred, truth) -> float:
    """Mean squared error over pixels (and keypoints, if stacked)."""
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"heatmap shapes differ: {p.shape} vs {t.shape}")
    diff = p - t
    return float(np.mean(diff * diff))


def five_fold_select(scores: np.ndarray) -> tuple[float, float]:
    """Five-fold checkpoint selection over per-image metric scores.

    `scores` is (n_checkpoints, n_images), higher better. Images split
    into five contiguous folds (as equal as possible, in index order).
    Each fold acts as validation: the checkpoint with the best mean
    score on the fold is evaluated on the remaining four folds. Returns
    the mean and the population standard deviation of the five results.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise DataError(f"expected (checkpoints, images) scores, got {scores.shape}")
    n_images = scores.shape[1]
    if n_images < 5:
        raise DataError(f"five-fold selection needs at least 5 images, got {n_images}")
    folds = np.array_split(np.arange(n_images), 5)
    results = []
    for f in range(5):
        val = folds[f]
        rest = np.concatenate([folds[g] for g in range(5) if g != f])
        best = int(np.argmax(scores[:, val].mean(axis=1)))  # ties: lowest index
        results.append(float(scores[best, rest].mean()))
    results = np.asarray(results)
    return float(results.mean()), float(results.std())
