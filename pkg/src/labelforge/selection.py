"""Active-learning candidate selection.

One round discards the most uncertain slice of the pool, restricts to
the band just below it, and runs k-center greedy over per-sample
embeddings inside that band. The chosen candidates then wait for a
human to confirm the most realistic few for annotation.

Embeddings are mean-pooled per-pixel feature vectors; Euclidean
distance; every tie breaks toward the lower sample id so rounds are
reproducible regardless of pool ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .backbone import GeneratedSample, LatentCode
from .errors import DataError
from .feature_volume import FeatureVolume, features_at

DEFAULT_CONFIRM_LIMIT = 6


@dataclass(frozen=True, eq=False)
class PoolEntry:
    """One candidate: id, embedding, uncertainty score, latent provenance."""

    sample_id: int
    embedding: np.ndarray
    image_score: float
    latent: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        emb = np.ascontiguousarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise DataError("embedding must be a finite 1-D vector")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if self.latent is not None:
            z = np.ascontiguousarray(self.latent, dtype=np.float64)
            z.setflags(write=False)
            object.__setattr__(self, "latent", z)


@dataclass(frozen=True)
class SelectionRound:
    """One proposed batch and its (partial) human confirmation."""

    k_percent: float
    band_width: float
    n_centers: int
    seed_id: int
    chosen_ids: tuple[int, ...]
    human_confirmed: tuple[int, ...] = ()
    confirm_limit: int = DEFAULT_CONFIRM_LIMIT
    embedding_kind: str = "mean_pixel_feature"

    def __post_init__(self) -> None:
        chosen = tuple(int(i) for i in self.chosen_ids)
        confirmed = tuple(int(i) for i in self.human_confirmed)
        if len(chosen) != self.n_centers:
            raise DataError(
                f"round has {len(chosen)} chosen ids but n_centers={self.n_centers}"
            )
        if not set(confirmed) <= set(chosen):
            raise DataError("human-confirmed ids must be a subset of chosen ids")
        if len(confirmed) > self.confirm_limit:
            raise DataError(
                f"at most {self.confirm_limit} candidates may be confirmed per round"
            )
        object.__setattr__(self, "chosen_ids", chosen)
        object.__setattr__(self, "human_confirmed", confirmed)

    def confirm(self, sample_id: int) -> "SelectionRound":
        if sample_id in self.human_confirmed:
            return self
        return replace(self, human_confirmed=self.human_confirmed + (int(sample_id),))

    def to_dict(self) -> dict:
        return {
            "k_percent": self.k_percent,
            "band_width": self.band_width,
            "n_centers": self.n_centers,
            "seed_id": self.seed_id,
            "chosen_ids": list(self.chosen_ids),
            "human_confirmed": list(self.human_confirmed),
            "confirm_limit": self.confirm_limit,
            "embedding_kind": self.embedding_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionRound":
        return cls(
            k_percent=d["k_percent"],
            band_width=d["band_width"],
            n_centers=d["n_centers"],
            seed_id=d["seed_id"],
            chosen_ids=tuple(d["chosen_ids"]),
            human_confirmed=tuple(d.get("human_confirmed", ())),
            confirm_limit=d.get("confirm_limit", DEFAULT_CONFIRM_LIMIT),
            embedding_kind=d.get("embedding_kind", "mean_pixel_feature"),
        )


def kcenter_greedy(pool: Sequence[PoolEntry], n: int, seed_id: int) -> list[int]:
    """Greedy k-center selection starting from seed_id.

    Each subsequent center maximizes its minimum Euclidean distance to
    the already-chosen centers; exact distance ties break to the lower
    sample id. The result depends only on the pool's contents, not its
    ordering. Greedy is a 2-approximation of the optimal k-center radius.
    """
    if not pool:
        raise DataError("empty pool")
    if n > len(pool):
        raise DataError(f"cannot select {n} centers from a pool of {len(pool)}")
    entries = sorted(pool, key=lambda e: e.sample_id)
    ids = [e.sample_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids in pool")
    dims = {e.embedding.shape[0] for e in entries}
    if len(dims) != 1:
        raise DataError(f"embeddings disagree on dimension: {sorted(dims)}")
    try:
        seed_pos = ids.index(seed_id)
    except ValueError:
        raise DataError(f"seed id {seed_id} not in pool") from None
    X = np.stack([e.embedding for e in entries])
    chosen = [seed_pos]
    min_d = np.linalg.norm(X - X[seed_pos], axis=1)
    for _ in range(n - 1):
        min_d[chosen] = -1.0  # never re-pick a center
        nxt = int(np.argmax(min_d))  # first max = lowest id (entries id-sorted)
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(X - X[nxt], axis=1))
    return [ids[i] for i in chosen]


def _severity_rank(pool: Sequence[PoolEntry]) -> list[PoolEntry]:
    """Most uncertain first; ties rank the higher id as more uncertain."""
    return sorted(pool, key=lambda e: (-e.image_score, -e.sample_id))


def uncertainty_band(
    pool: Sequence[PoolEntry], k_percent: float, band_width: float
) -> list[PoolEntry]:
    """Entries ranked inside (k, k + band] percent by image score."""
    if not (0.0 <= k_percent < 100.0) or band_width <= 0:
        raise DataError("k_percent must be in [0, 100) and band_width positive")
    ranked = _severity_rank(pool)
    n = len(ranked)
    n_top = math.ceil(k_percent / 100.0 * n)
    n_end = math.ceil(min(k_percent + band_width, 100.0) / 100.0 * n)
    return ranked[n_top:n_end]


def propose_batch(
    pool: Sequence[PoolEntry],
    k_percent: float = 10.0,
    band_width: float = 10.0,
    n_centers: int = 12,
    confirm_limit: int = DEFAULT_CONFIRM_LIMIT,
) -> SelectionRound:
    """One AL selection round over a scored pool.

    Discards the top k% most uncertain entries, keeps the next
    band_width percentage points, and picks n_centers representatives by
    k-center greedy seeded at the band's minimum-score entry. The round
    returns awaiting human confirmation of up to confirm_limit ids.
    """
    band = uncertainty_band(pool, k_percent, band_width)
    if not band:
        raise DataError(
            f"uncertainty band ({k_percent}, {k_percent + band_width}] percent "
            f"of a pool of {len(pool)} is empty; enlarge the pool"
        )
    if n_centers > len(band):
        raise DataError(
            f"cannot pick {n_centers} centers from a band of {len(band)}; "
            "enlarge the pool or widen the band"
        )
    seed = min(band, key=lambda e: (e.image_score, e.sample_id))
    chosen = kcenter_greedy(band, n_centers, seed.sample_id)
    return SelectionRound(
        k_percent=k_percent,
        band_width=band_width,
        n_centers=n_centers,
        seed_id=seed.sample_id,
        chosen_ids=tuple(chosen),
        confirm_limit=confirm_limit,
    )


def mean_pixel_feature(volume: FeatureVolume, mode: str = "bilinear") -> np.ndarray:
    """Mean over all pixels of the concatenated feature vector, float64.

    Small volumes materialize in one shot; large ones stream row by row
    so the full D x H x W tensor never exists.
    """
    th, tw = volume.target_height, volume.target_width
    if th * tw * volume.feature_dim <= 16_000_000:
        from .feature_volume import materialize

        full = materialize(volume, mode)
        return full.reshape(-1, volume.feature_dim).astype(np.float64).mean(axis=0)
    xs = np.arange(tw, dtype=np.int64)
    acc = np.zeros(volume.feature_dim, dtype=np.float64)
    for y in range(th):
        acc += features_at(volume, xs, np.full(tw, y, dtype=np.int64), mode).sum(axis=0)
    return acc / (th * tw)


def mean_latent(pool: Sequence[PoolEntry]) -> LatentCode:
    """The synthetic latent at the mean of the pool's latent vectors."""
    latents = [e.latent for e in pool if e.latent is not None]
    if not latents:
        raise DataError("pool has no latent provenance")
    dims = {z.shape[0] for z in latents}
    if len(dims) != 1:
        raise DataError("pool latents disagree on dimension")
    return LatentCode.from_vector(np.mean(np.stack(latents), axis=0))


def first_round_seed(
    pool: Sequence[PoolEntry],
    generate: Callable[[LatentCode], GeneratedSample],
) -> GeneratedSample:
    """Bootstrap sample for the very first annotation round.

    Regenerates through the backbone at the mean of the pool's latents.
    """
    return generate(mean_latent(pool))


def save_round(round_: SelectionRound, path) -> None:
    """Versioned, human-readable round state."""
    doc = {"format": "selection-round", "version": 1, "round": round_.to_dict()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_round(path) -> SelectionRound:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "selection-round":
        raise DataError(f"{path} is not a selection round file")
    if doc.get("version") != 1:
        raise DataError(f"unsupported round file version {doc.get('version')}")
    return SelectionRound.from_dict(doc["round"])
