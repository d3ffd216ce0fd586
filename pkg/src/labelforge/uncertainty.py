"""Ensemble disagreement scoring and uncertainty filtering.

Per-pixel disagreement is the Jensen-Shannon divergence of the N member
distributions: the entropy of the mean distribution minus the mean of
the member entropies, in nats. An image's score is the sum over its
pixels; the most uncertain images get dropped at a configurable ratio.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

_SUM_TOL = 1e-9


def _as_distributions(dists, arity: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(dists, dtype=np.float64)
    except ValueError as exc:  # ragged input: members disagree on arity
        raise DataError(f"arity mismatch across distributions: {exc}") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"expected distributions of equal arity, got shape {arr.shape}")
    if arity is not None and arr.shape[1] != arity:
        raise DataError(f"arity mismatch: expected {arity}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DataError("distributions must be finite and non-negative")
    if np.any(np.abs(arr.sum(axis=1) - 1.0) > _SUM_TOL):
        raise DataError("distributions must sum to 1")
    return arr


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 * ln 0 = 0."""
    p = _as_distributions(dist)[0]
    return float(_entropy_rows(p[None, :])[0])


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise -sum(p ln p) over the last axis; p may contain zeros."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def js_divergence(dists) -> float:
    """JS divergence of N distributions: H(mean) - mean(H), in nats.

    Zero iff all inputs are equal; never exceeds ln N.
    """
    arr = _as_distributions(dists)
    mean = arr.mean(axis=0)
    value = float(_entropy_rows(mean[None, :])[0] - _entropy_rows(arr).mean())
    return max(0.0, value)


@dataclass(frozen=True, eq=False)
class UncertaintyReport:
    """Per-pixel JS raster plus the image-level sum used for filtering."""

    sample_id: int
    pixel_js: np.ndarray  # (h, w) float64, nats
    image_score: float

    def __post_init__(self) -> None:
        raster = np.ascontiguousarray(self.pixel_js, dtype=np.float64)
        if raster.ndim != 2:
            raise DataError(f"pixel raster must be 2-D, got {raster.shape}")
        if not np.all(np.isfinite(raster)) or raster.min() < 0:
            raise DataError("pixel JS values must be finite and non-negative")
        if abs(float(raster.sum()) - self.image_score) > 1e-6 * max(1.0, abs(self.image_score)):
            raise DataError("image_score does not equal the raster sum")
        raster.setflags(write=False)
        object.__setattr__(self, "pixel_js", raster)
        object.__setattr__(self, "image_score", float(self.image_score))


def score_image(member_dists: np.ndarray, sample_id: int = 0, validate: bool = True) -> UncertaintyReport:
    """Per-pixel JS raster and its sum for one image.

    `member_dists` is (N, h, w, C): every member's class distribution at
    every pixel, as returned by predict_segmentation. `validate=False`
    skips the input re-checks when the caller just produced the
    distributions itself (they are revalidated nowhere else).
    """
    arr = np.asarray(member_dists, dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"expected (N, h, w, C) member distributions, got {arr.shape}")
    if validate:
        if not np.all(np.isfinite(arr)):
            raise DataError("member distributions contain non-finite values")
        sums = arr.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > _SUM_TOL):
            raise DataError("member distributions must sum to 1 at every pixel")
    mean = arr.mean(axis=0)  # (h, w, C)
    if validate:
        js = _entropy_rows(mean) - _entropy_rows(arr).mean(axis=0)
    else:
        # trusted softmax outputs are strictly positive: plain p*log(p)
        js = -(mean * np.log(mean)).sum(axis=-1) + (arr * np.log(arr)).sum(axis=-1).mean(axis=0)
    js = np.maximum(js, 0.0)
    return UncertaintyReport(
        sample_id=sample_id, pixel_js=js, image_score=float(js.sum())
    )


def keypoint_variance_score(member_heats: np.ndarray, sample_id: int = 0) -> UncertaintyReport:
    """Heat-variance analogue for keypoint ensembles (our extension).

    The JS formulation needs class distributions, which keypoint heads
    do not produce; this substitutes the per-pixel variance of member
    heat values summed over pixels and keypoints. Not used by default.
    """
    arr = np.asarray(member_heats, dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"expected (N, h, w, K) member heats, got {arr.shape}")
    var = arr.var(axis=0).sum(axis=-1)
    return UncertaintyReport(sample_id=sample_id, pixel_js=var, image_score=float(var.sum()))


def filter_by_uncertainty(
    reports: Sequence[UncertaintyReport], ratio: float
) -> tuple[list[int], list[int]]:
    """Partition sample ids into (kept, dropped) by image score.

    Drops the ceil(ratio * n) highest scores; equal scores drop the
    higher sample id first. Kept and dropped ids are each returned in
    ascending id order.
    """
    if not (0.0 <= ratio < 1.0):
        raise DataError(f"filter ratio must be in [0, 1), got {ratio}")
    ids = [r.sample_id for r in reports]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids in reports")
    n_drop = math.ceil(ratio * len(reports))
    by_severity = sorted(reports, key=lambda r: (-r.image_score, -r.sample_id))
    dropped = sorted(r.sample_id for r in by_severity[:n_drop])
    kept = sorted(r.sample_id for r in by_severity[n_drop:])
    return kept, dropped


def export_reports(
    reports: Sequence[UncertaintyReport], kept_ids: Iterable[int]
) -> str:
    """Line-delimited audit record: id, image score, kept flag."""
    kept = set(kept_ids)
    lines = ["sample_id\timage_score\tkept"]
    for r in sorted(reports, key=lambda r: r.sample_id):
        lines.append(f"{r.sample_id}\t{r.image_score:.17g}\t{int(r.sample_id in kept)}")
    return "\n".join(lines) + "\n"
