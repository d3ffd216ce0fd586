"""Multi-resolution feature maps and per-pixel feature vector assembly.

A backbone emits an ordered list of feature maps at non-decreasing
resolutions. Upsampling every map to the resolution of the last one and
concatenating along channels gives each pixel a single D-dimensional
feature vector; those vectors are what the interpreter consumes.

Canonical storage layout is row-major (y, x, channel) float32. All
interpolation arithmetic accumulates in float64 and rounds back to
float32, so indexing into a fully materialized upsampled map and
sampling a single coordinate give bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Literal, Sequence

import numpy as np

from .errors import DataError

UpsampleMode = Literal["nearest", "bilinear"]

_MODES = ("nearest", "bilinear")


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise DataError(f"unknown upsample mode {mode!r}, expected one of {_MODES}")


@dataclass(frozen=True)
class FeatureMap:
    """One backbone feature map: (height, width, channels) float32, finite."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"feature map must be (h, w, c), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise DataError(f"feature map has a zero-sized axis: {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("feature map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureVolume:
    """Ordered feature maps; the last map fixes the target resolution."""

    maps: tuple[FeatureMap, ...]

    def __post_init__(self) -> None:
        maps = tuple(self.maps)
        if not maps:
            raise DataError("feature volume needs at least one map")
        for prev, cur in zip(maps, maps[1:]):
            if cur.height < prev.height or cur.width < prev.width:
                raise DataError(
                    "map resolutions must be non-decreasing, got "
                    f"{prev.height}x{prev.width} before {cur.height}x{cur.width}"
                )
        object.__setattr__(self, "maps", maps)

    @property
    def target_height(self) -> int:
        return self.maps[-1].height

    @property
    def target_width(self) -> int:
        return self.maps[-1].width

    @property
    def feature_dim(self) -> int:
        """Total channel count D over all maps."""
        return sum(m.channels for m in self.maps)


@dataclass(frozen=True)
class PixelFeature:
    """The concatenated feature vector of one pixel at target resolution."""

    values: np.ndarray
    x: int
    y: int


def _nearest_indices(dst: int, src: int) -> np.ndarray:
    # floor(o * src / dst) in exact integer arithmetic; identity when dst == src
    return (np.arange(dst, dtype=np.int64) * src) // dst


def _bilinear_coords(dst_idx: np.ndarray, dst: int, src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates with edge clamping.

    Returns (i0, i1, frac) so that a sample is (1-frac)*v[i0] + frac*v[i1].
    """
    s = (dst_idx.astype(np.float64) + 0.5) * (src / dst) - 0.5
    s = np.clip(s, 0.0, src - 1.0)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, s - i0


def _gather_nearest(data: np.ndarray, ys: np.ndarray, xs: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = data.shape[:2]
    sy = (ys.astype(np.int64) * h) // th
    sx = (xs.astype(np.int64) * w) // tw
    return data[sy, sx]


def _gather_bilinear(data: np.ndarray, ys: np.ndarray, xs: np.ndarray, th: int, tw: int) -> np.ndarray:
    h, w = data.shape[:2]
    if h == th and w == tw:
        # identity resolution: source coordinates land exactly on pixels
        # (frac is exactly 0), so interpolation reduces to a plain gather
        return data[ys, xs]
    y0, y1, fy = _bilinear_coords(ys, th, h)
    x0, x1, fx = _bilinear_coords(xs, tw, w)
    fy = fy[..., None]
    fx = fx[..., None]
    d = data.astype(np.float64)
    top = (1.0 - fx) * d[y0, x0] + fx * d[y0, x1]
    bot = (1.0 - fx) * d[y1, x0] + fx * d[y1, x1]
    return ((1.0 - fy) * top + fy * bot).astype(np.float32)


def upsample(fmap: FeatureMap, target_h: int, target_w: int, mode: UpsampleMode = "bilinear") -> FeatureMap:
    """Upsample a feature map to (target_h, target_w).

    Nearest replicates source values; bilinear interpolates between the
    four neighbours of the half-pixel-center source coordinate, clamping
    at the edges. Upsampling to the map's own resolution is the identity.

    Args:
        fmap: source map.
        target_h: output height, >= fmap.height.
        target_w: output width, >= fmap.width.
        mode: "nearest" or "bilinear".

    Returns:
        FeatureMap at the target resolution with the same channel count.
    """
    _check_mode(mode)
    if target_h < fmap.height or target_w < fmap.width:
        raise DataError(
            f"upsample target {target_h}x{target_w} is smaller than source "
            f"{fmap.height}x{fmap.width}"
        )
    ys = np.arange(target_h, dtype=np.int64)[:, None]
    xs = np.arange(target_w, dtype=np.int64)[None, :]
    if mode == "nearest":
        out = _gather_nearest(fmap.data, ys, xs, target_h, target_w)
    else:
        out = _gather_bilinear(fmap.data, ys, xs, target_h, target_w)
    return FeatureMap(out)


def features_at(
    volume: FeatureVolume,
    xs: Sequence[int] | np.ndarray,
    ys: Sequence[int] | np.ndarray,
    mode: UpsampleMode = "bilinear",
) -> np.ndarray:
    """Gather concatenated feature vectors at target-resolution coordinates.

    The batched workhorse behind pixel_feature and iter_pixel_features:
    returns an (n, D) float32 array, bit-identical to materializing every
    upsampled map and indexing.
    """
    _check_mode(mode)
    th, tw = volume.target_height, volume.target_width
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    if xs.shape != ys.shape:
        raise DataError(f"coordinate arrays disagree: {xs.shape} vs {ys.shape}")
    if xs.size and (xs.min() < 0 or xs.max() >= tw or ys.min() < 0 or ys.max() >= th):
        raise DataError(
            f"coordinates out of bounds for target {th}x{tw}: "
            f"x in [{xs.min()}, {xs.max()}], y in [{ys.min()}, {ys.max()}]"
        )
    parts = []
    for m in volume.maps:
        if mode == "nearest":
            parts.append(_gather_nearest(m.data, ys, xs, th, tw))
        else:
            parts.append(_gather_bilinear(m.data, ys, xs, th, tw))
    return np.concatenate(parts, axis=-1)


def pixel_feature(volume: FeatureVolume, x: int, y: int, mode: UpsampleMode = "bilinear") -> PixelFeature:
    """The D-dimensional concatenated feature vector at (x, y).

    Channels appear in map order. Coordinates are at target resolution.
    """
    th, tw = volume.target_height, volume.target_width
    if not (0 <= x < tw and 0 <= y < th):
        raise DataError(f"pixel ({x}, {y}) out of bounds for target {th}x{tw}")
    values = features_at(volume, np.array([x]), np.array([y]), mode)[0]
    return PixelFeature(values=values, x=int(x), y=int(y))


def iter_pixel_features(volume: FeatureVolume, mode: UpsampleMode = "bilinear") -> Iterator[PixelFeature]:
    """Yield every pixel's feature vector in row-major order.

    Streams one row at a time so the full D x H x W tensor is never
    materialized. Yields target_h * target_w features, (x, y) with y-major
    traversal, each equal to pixel_feature at that coordinate.
    """
    _check_mode(mode)
    th, tw = volume.target_height, volume.target_width
    xs = np.arange(tw, dtype=np.int64)
    for y in range(th):
        row = features_at(volume, xs, np.full(tw, y, dtype=np.int64), mode)
        for x in range(tw):
            yield PixelFeature(values=row[x], x=x, y=int(y))


def materialize(volume: FeatureVolume, mode: UpsampleMode = "bilinear") -> np.ndarray:
    """Full (target_h, target_w, D) float32 tensor of per-pixel features.

    Convenience for small volumes and tests; prefer features_at or
    iter_pixel_features when D x H x W is large.
    """
    ups = [upsample(m, volume.target_height, volume.target_width, mode) for m in volume.maps]
    return np.concatenate([u.data for u in ups], axis=-1)
