"""Backbones: sources of (image, feature volume) pairs.

Two implementations of one contract:

* a procedural toy generator with analytically known ground truth, used
  for verification and desk-scale experiments, and
* a reader/writer for `.fvd` feature dumps produced by an external
  feature extractor.

The toy generator renders a multi-part blob (a body disk with smaller
part disks on its rim, pose and scale driven by the latent vector) and
emits one feature map per level at doubling resolutions. The finest
level carries the exact signed distance to every shape, so a pixel's
ground-truth label is a deterministic function of its concatenated
feature vector; coarser levels carry smoothed copies, coordinate
encodings and latent style broadcasts, and every level is padded with
nuisance channels (pure noise, constants) that an interpreter has to
learn to ignore.

A corruption knob warps the distance fields (and the rendered image)
for a configurable fraction of seeds while leaving the ground truth
untouched, producing genuinely ambiguous samples for uncertainty
filtering to find.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from io import BytesIO
from typing import BinaryIO, Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .feature_volume import FeatureMap, FeatureVolume, materialize
from .schema import LabelSchema

# grammar constants shared by geometry and its analytic area bounds
_CENTER_JITTER = 0.10  # body center offset, fraction of image size
_ANGLE_JITTER = 0.20  # part angle jitter, fraction of its angular slot
_DIST_RANGE = (0.85, 1.05)  # part center distance, multiples of body radius


def _sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-x))


def _lerp(lo: float, hi: float, t):
    return lo + (hi - lo) * t


def _stable_hash64(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


@dataclass(frozen=True, eq=False)
class LatentCode:
    """A latent vector plus the seed it was derived from.

    `from_seed` is the documented generator: z = standard normal draws
    from numpy's PCG64 stream seeded with `seed`. Synthetic codes (e.g.
    a mean of other latents) carry an explicit z; their seed is a stable
    hash of the vector, used only to derive per-sample noise.
    """

    seed: int
    z: np.ndarray
    synthetic: bool = False

    def __post_init__(self) -> None:
        z = np.ascontiguousarray(self.z, dtype=np.float64)
        if z.ndim != 1 or z.size == 0:
            raise DataError(f"latent z must be a non-empty vector, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise DataError("latent z contains non-finite values")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @classmethod
    def from_seed(cls, seed: int, dim: int = 64) -> "LatentCode":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(seed=seed, z=rng.standard_normal(dim))

    @classmethod
    def from_vector(cls, z: np.ndarray) -> "LatentCode":
        z = np.ascontiguousarray(z, dtype=np.float64)
        return cls(seed=_stable_hash64(z.tobytes()), z=z, synthetic=True)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Toy-backbone ground truth: label mask plus named keypoints."""

    mask: np.ndarray  # (h, w) uint16 of schema label indices
    keypoints: tuple[tuple[str, int, int], ...]  # (name, x, y)

    def __post_init__(self) -> None:
        mask = np.ascontiguousarray(self.mask, dtype=np.uint16)
        if mask.ndim != 2:
            raise DataError(f"truth mask must be 2-D, got shape {mask.shape}")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "keypoints", tuple(tuple(k) for k in self.keypoints))


@dataclass(frozen=True, eq=False)
class GeneratedSample:
    """One backbone output: latent, RGB image, features, optional truth."""

    latent: LatentCode
    image: np.ndarray  # (h, w, 3) uint8
    features: FeatureVolume
    truth: Optional[GroundTruth] = None

    def __post_init__(self) -> None:
        img = np.ascontiguousarray(self.image, dtype=np.uint8)
        th, tw = self.features.target_height, self.features.target_width
        if img.shape != (th, tw, 3):
            raise DataError(
                f"image shape {img.shape} does not match feature target {th}x{tw}"
            )
        if self.truth is not None and self.truth.mask.shape != (th, tw):
            raise DataError("truth mask resolution does not match features")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


_PART_PALETTE = (
    (40, 40, 48),      # unlabeled (never rendered by the toy)
    (64, 104, 136),    # backdrop
    (216, 176, 88),    # body
    (200, 72, 72),
    (96, 168, 96),
    (148, 96, 188),
    (220, 132, 180),
    (90, 190, 190),
    (180, 180, 90),
    (130, 90, 60),
)


@dataclass(frozen=True)
class ToyBackboneConfig:
    """Shape grammar and feature layout for the toy backbone.

    Level resolutions double from `base_resolution`; the image lives at
    the final level's resolution. Radii and jitters are fractions of the
    image size. The grammar is validated so that part disks never leave
    the image and never overlap each other, which keeps the analytic
    per-part area bounds exact.
    """

    num_levels: int = 4
    base_resolution: int = 8
    channels_per_level: Optional[tuple[int, ...]] = None
    latent_dim: int = 64
    num_parts: int = 3
    body_radius_range: tuple[float, float] = (0.20, 0.27)
    part_radius_range: tuple[float, float] = (0.05, 0.09)
    corruption_fraction: float = 0.0
    corruption_strength: float = 0.9
    style_seed: int = 20240
    resolutions: Optional[tuple[int, ...]] = None  # derived unless given explicitly

    def __post_init__(self) -> None:
        if self.num_levels < 2:
            raise ConfigError("toy backbone needs at least 2 levels")
        if self.num_parts < 1:
            raise ConfigError("toy backbone needs at least one part")
        base = int(self.base_resolution)
        if base < 4 or (base & (base - 1)) != 0:
            raise ConfigError("base_resolution must be a power of two >= 4")
        derived = tuple(base * 2**i for i in range(self.num_levels))
        if self.resolutions is None:
            object.__setattr__(self, "resolutions", derived)
        elif tuple(self.resolutions) != derived:
            raise ConfigError(
                f"level resolutions must double from the base: expected {derived}, "
                f"got {tuple(self.resolutions)}"
            )
        min_ch = 2 * (self.num_parts + 1) + 2  # sdf + membership + coordinates
        if self.channels_per_level is None:
            object.__setattr__(
                self,
                "channels_per_level",
                tuple(max(min_ch, 24 >> i) for i in range(self.num_levels)),
            )
        ch = tuple(int(c) for c in self.channels_per_level)
        if len(ch) != self.num_levels:
            raise ConfigError(
                f"channels_per_level has {len(ch)} entries for {self.num_levels} levels"
            )
        if any(c < min_ch for c in ch):
            raise ConfigError(
                f"each level needs at least {min_ch} channels "
                "(signed distances + coordinate encodings)"
            )
        object.__setattr__(self, "channels_per_level", ch)
        if self.latent_dim < 3 + 3 * self.num_parts:
            raise ConfigError(
                f"latent_dim {self.latent_dim} too small for {self.num_parts} parts"
            )
        if not (0.0 <= self.corruption_fraction <= 1.0):
            raise ConfigError("corruption_fraction must be in [0, 1]")
        lo, hi = self.body_radius_range
        plo, phi = self.part_radius_range
        if not (0 < lo <= hi and 0 < plo <= phi):
            raise ConfigError("radius ranges must be positive and ordered")
        # whole object stays inside the image
        reach = 0.5 + _CENTER_JITTER + _DIST_RANGE[1] * hi + phi
        if reach > 0.99:
            raise ConfigError(
                f"shape grammar can reach fraction {reach:.3f} of the image; "
                "shrink radii or jitter"
            )
        # adjacent part disks can never touch
        if self.num_parts > 1:
            slot = 2 * math.pi / self.num_parts
            min_gap = slot * (1 - 2 * _ANGLE_JITTER)
            chord = 2 * _DIST_RANGE[0] * lo * math.sin(min_gap / 2)
            if chord <= 2 * phi:
                raise ConfigError(
                    f"parts may overlap: min center distance {chord:.3f} vs "
                    f"diameter {2 * phi:.3f}; reduce num_parts or part radius"
                )

    @property
    def image_size(self) -> int:
        return self.resolutions[-1]

    @property
    def feature_dim(self) -> int:
        return sum(self.channels_per_level)

    def label_schema(self) -> LabelSchema:
        names = ["unlabeled", "backdrop", "body"] + [
            f"part_{j + 1}" for j in range(self.num_parts)
        ]
        palette = [
            _PART_PALETTE[min(i, len(_PART_PALETTE) - 1)] for i in range(len(names))
        ]
        return LabelSchema(names=tuple(names), palette=tuple(palette))

    def keypoint_schema(self) -> LabelSchema:
        names = ["unlabeled", "body"] + [f"part_{j + 1}" for j in range(self.num_parts)]
        palette = [_PART_PALETTE[min(i + 1, len(_PART_PALETTE) - 1)] for i in range(len(names))]
        return LabelSchema(names=tuple(names), palette=tuple(palette), task="keypoints")

    def to_dict(self) -> dict:
        return {
            "num_levels": self.num_levels,
            "base_resolution": self.base_resolution,
            "channels_per_level": list(self.channels_per_level),
            "latent_dim": self.latent_dim,
            "num_parts": self.num_parts,
            "body_radius_range": list(self.body_radius_range),
            "part_radius_range": list(self.part_radius_range),
            "corruption_fraction": self.corruption_fraction,
            "corruption_strength": self.corruption_strength,
            "style_seed": self.style_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyBackboneConfig":
        kw = dict(d)
        for key in ("channels_per_level", "body_radius_range", "part_radius_range"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        unknown = set(kw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown toy backbone config keys: {sorted(unknown)}")
        return cls(**kw)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class _Geometry:
    """Shape list in continuous image coordinates (units of target pixels)."""

    centers: np.ndarray  # (1 + num_parts, 2) -- body first, then parts in order
    radii: np.ndarray  # (1 + num_parts,)


def _geometry(config: ToyBackboneConfig, z: np.ndarray) -> _Geometry:
    size = float(config.image_size)
    m = config.num_parts
    cx = size * (0.5 + _CENTER_JITTER * math.tanh(z[0]))
    cy = size * (0.5 + _CENTER_JITTER * math.tanh(z[1]))
    rb = size * _lerp(*config.body_radius_range, _sigmoid(z[2]))
    centers = [(cx, cy)]
    radii = [rb]
    slot = 2 * math.pi / m
    for j in range(m):
        theta = slot * (j + 0.5 + _ANGLE_JITTER * math.tanh(z[3 + 3 * j]))
        dist = rb * _lerp(*_DIST_RANGE, _sigmoid(z[4 + 3 * j]))
        rp = size * _lerp(*config.part_radius_range, _sigmoid(z[5 + 3 * j]))
        centers.append((cx + dist * math.cos(theta), cy + dist * math.sin(theta)))
        radii.append(rp)
    return _Geometry(centers=np.array(centers), radii=np.array(radii))


def _sdf_grid(geom: _Geometry, res: int, size: float) -> np.ndarray:
    """Signed distance of every shape at the pixel centers of a res x res grid.

    Returns (res, res, n_shapes) float64 in target-pixel units.
    """
    scale = size / res
    coords = (np.arange(res, dtype=np.float64) + 0.5) * scale
    xx = coords[None, :, None]
    yy = coords[:, None, None]
    dx = xx - geom.centers[:, 0][None, None, :]
    dy = yy - geom.centers[:, 1][None, None, :]
    return np.sqrt(dx * dx + dy * dy) - geom.radii[None, None, :]


def _paint_labels(sdf: np.ndarray) -> np.ndarray:
    """Paint rule: backdrop, then body, then parts in order (later wins)."""
    h, w, n = sdf.shape
    mask = np.ones((h, w), dtype=np.uint16)  # backdrop
    for i in range(n):
        mask[sdf[..., i] < 0.0] = i + 2
    return mask


def _corruption_field(rng: np.random.Generator, config: ToyBackboneConfig, n_shapes: int):
    """Smooth per-shape warp fields: sums of random plane-wave sinusoids."""
    size = float(config.image_size)
    n_waves = 4
    amp = config.corruption_strength * float(np.mean(config.part_radius_range)) * size
    freq = rng.uniform(3.0, 8.0, size=(n_shapes, n_waves))
    angle = rng.uniform(0.0, 2 * math.pi, size=(n_shapes, n_waves))
    phase = rng.uniform(0.0, 2 * math.pi, size=(n_shapes, n_waves))
    weight = rng.normal(size=(n_shapes, n_waves))
    weight = weight / np.sqrt(np.sum(weight**2, axis=1, keepdims=True))

    def warp(res: int) -> np.ndarray:
        scale = size / res
        coords = (np.arange(res, dtype=np.float64) + 0.5) * scale / size
        xx = coords[None, :]
        yy = coords[:, None]
        out = np.zeros((res, res, n_shapes))
        for s in range(n_shapes):
            acc = np.zeros((res, res))
            for i in range(n_waves):
                kx = freq[s, i] * math.cos(angle[s, i])
                ky = freq[s, i] * math.sin(angle[s, i])
                acc += weight[s, i] * np.sin(2 * math.pi * (kx * xx + ky * yy) + phase[s, i])
            out[..., s] = amp * acc / math.sqrt(n_waves)
        return out

    return warp


def _style_vector(config: ToyBackboneConfig, level: int, width: int, z: np.ndarray) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(config.style_seed + 7919 * level))
    w = rng.standard_normal((width, z.size)) / math.sqrt(z.size)
    b = rng.standard_normal(width) * 0.1
    return np.tanh(w @ z + b)


def _render_image(
    config: ToyBackboneConfig, sdf_fine: np.ndarray, style: np.ndarray
) -> np.ndarray:
    """RGB render from the (possibly corrupted) fine distance fields."""
    size = config.image_size
    schema = config.label_schema()
    labels = _paint_labels(sdf_fine)
    palette = np.array(schema.palette, dtype=np.float64)
    rgb = palette[labels]
    # soft shading from the nearest surface plus a latent tint
    nearest = np.min(np.abs(sdf_fine), axis=-1)
    shade = 0.75 + 0.25 * np.tanh(nearest / (0.05 * size))
    tint = 1.0 + 0.08 * style[:3] if style.size >= 3 else np.ones(3)
    out = np.clip(rgb * shade[..., None] * tint[None, None, :], 0, 255)
    return np.floor(out).astype(np.uint8)


def toy_generate(config: ToyBackboneConfig, latent: LatentCode) -> GeneratedSample:
    """Generate one toy sample: image, feature volume, ground truth.

    Deterministic in (config, latent.seed). The geometry depends only on
    the latent vector; per-sample noise channels and the corruption draw
    depend only on the seed.
    """
    if latent.z.size != config.latent_dim:
        raise DataError(
            f"latent dim {latent.z.size} does not match config latent_dim {config.latent_dim}"
        )
    size = config.image_size
    z = latent.z
    rng = np.random.Generator(np.random.PCG64(latent.seed))
    corrupted = bool(rng.random() < config.corruption_fraction)
    geom = _geometry(config, z)
    n_shapes = 1 + config.num_parts

    truth_sdf = _sdf_grid(geom, size, float(size))
    mask = _paint_labels(truth_sdf)

    warp = _corruption_field(rng, config, n_shapes) if corrupted else None

    maps = []
    fine_sdf_feat = None
    for level, res in enumerate(config.resolutions):
        n_ch = config.channels_per_level[level]
        sdf = truth_sdf if res == size else _sdf_grid(geom, res, float(size))
        if warp is not None:
            sdf = sdf + warp(res)
        if res == size:
            fine_sdf_feat = sdf
        # exact distances, then soft shape membership at the level's own
        # sharpness (finer levels resolve boundaries more crisply)
        tau = 0.75 * (size / res)
        blocks = [sdf / size, np.tanh(-sdf / tau)]
        coords = (np.arange(res, dtype=np.float64) + 0.5) / res
        blocks.append(np.broadcast_to(coords[None, :, None], (res, res, 1)))
        blocks.append(np.broadcast_to(coords[:, None, None], (res, res, 1)))
        extra = n_ch - (2 * n_shapes + 2)
        if extra > 0:
            n_style = (extra + 2) // 3
            n_noise = (extra + 1) // 3
            n_const = extra // 3
            style = _style_vector(config, level, n_style, z)
            blocks.append(np.broadcast_to(style[None, None, :], (res, res, n_style)))
            if n_noise:
                blocks.append(rng.standard_normal((res, res, n_noise)))
            if n_const:
                blocks.append(np.ones((res, res, n_const)))
        data = np.concatenate(blocks, axis=-1).astype(np.float32)
        maps.append(FeatureMap(data))

    keypoints = [("body", *_kp_pixel(geom.centers[0], size))]
    for j in range(config.num_parts):
        keypoints.append((f"part_{j + 1}", *_kp_pixel(geom.centers[j + 1], size)))

    image = _render_image(config, fine_sdf_feat, _style_vector(config, 0, 3, z))
    return GeneratedSample(
        latent=latent,
        image=image,
        features=FeatureVolume(maps=tuple(maps)),
        truth=GroundTruth(mask=mask, keypoints=tuple(keypoints)),
    )


def _kp_pixel(center: np.ndarray, size: int) -> tuple[int, int]:
    x = int(np.clip(round(float(center[0]) - 0.5), 0, size - 1))
    y = int(np.clip(round(float(center[1]) - 0.5), 0, size - 1))
    return x, y


def part_pixel_bounds(config: ToyBackboneConfig) -> tuple[float, float]:
    """Analytic bounds on one part's pixel count from the grammar.

    A disk of radius r fully inside the image covers between
    pi*(r - sqrt(2)/2)^2 and pi*(r + sqrt(2)/2)^2 pixel centers; parts
    never overlap each other and are painted after the body.
    """
    size = config.image_size
    r_lo = config.part_radius_range[0] * size
    r_hi = config.part_radius_range[1] * size
    lo = math.pi * max(0.0, r_lo - math.sqrt(2) / 2) ** 2
    hi = math.pi * (r_hi + math.sqrt(2) / 2) ** 2
    return lo, hi


def verify_realizability(sample: GeneratedSample, mode: str = "bilinear") -> int:
    """Check that truth labels are a function of per-pixel feature vectors.

    Groups every pixel by the bytes of its concatenated feature vector
    and raises DataError if any group spans two labels. Returns the
    number of distinct feature vectors. Exhaustive; intended for
    resolutions up to about 128x128.
    """
    if sample.truth is None:
        raise DataError("sample has no ground truth to verify against")
    feats = materialize(sample.features, mode)
    th, tw, _ = feats.shape
    seen: dict[bytes, int] = {}
    mask = sample.truth.mask
    for y in range(th):
        row = feats[y]
        for x in range(tw):
            key = row[x].tobytes()
            label = int(mask[y, x])
            prev = seen.setdefault(key, label)
            if prev != label:
                raise DataError(
                    f"realizability violated at ({x}, {y}): feature vector maps "
                    f"to labels {prev} and {label}"
                )
    return len(seen)


# ---------------------------------------------------------------------------
# .fvd feature dump format
#
# little-endian, layout:
#   magic    4s   = b"FVD1"
#   version  u32  = 1
#   flags    u32  bit0 image present, bit1 truth present, bit2 synthetic latent
#   seed     u64
#   dz       u32  latent dimension
#   D        u32  declared total channel count (must equal sum of map channels)
#   k        u32  number of maps
#   k * (h u32, w u32, c u32)
#   z        dz * f64
#   k raw float32 payloads, row-major (y, x, channel)
#   [image]  u64 byte length + PNG bytes
#   [truth]  h*w u16 mask + u32 n_keypoints + per keypoint:
#            u16 name length, utf-8 name, f64 x, f64 y
# ---------------------------------------------------------------------------

MAGIC = b"FVD1"
VERSION = 1

_FLAG_IMAGE = 1
_FLAG_TRUTH = 2
_FLAG_SYNTHETIC = 4


def write_feature_dump(sample: GeneratedSample, path) -> None:
    """Serialize a sample to a `.fvd` dump; load_feature_dump inverts it bit-exactly."""
    vol = sample.features
    flags = 0
    if sample.image is not None:
        flags |= _FLAG_IMAGE
    if sample.truth is not None:
        flags |= _FLAG_TRUTH
    if sample.latent.synthetic:
        flags |= _FLAG_SYNTHETIC
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIQ", VERSION, flags, sample.latent.seed))
        f.write(struct.pack("<III", sample.latent.z.size, vol.feature_dim, len(vol.maps)))
        for m in vol.maps:
            f.write(struct.pack("<III", m.height, m.width, m.channels))
        f.write(sample.latent.z.astype("<f8").tobytes())
        for m in vol.maps:
            f.write(m.data.astype("<f4").tobytes())
        if flags & _FLAG_IMAGE:
            buf = BytesIO()
            Image.fromarray(sample.image).save(buf, format="PNG")
            png = buf.getvalue()
            f.write(struct.pack("<Q", len(png)))
            f.write(png)
        if flags & _FLAG_TRUTH:
            f.write(sample.truth.mask.astype("<u2").tobytes())
            f.write(struct.pack("<I", len(sample.truth.keypoints)))
            for name, x, y in sample.truth.keypoints:
                raw = name.encode("utf-8")
                f.write(struct.pack("<H", len(raw)))
                f.write(raw)
                f.write(struct.pack("<dd", float(x), float(y)))


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated payload: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_feature_dump(path) -> GeneratedSample:
    """Read a `.fvd` dump back into a GeneratedSample.

    Raises DataError with a distinct message for bad magic, version
    mismatch, header/channel-sum mismatch, and truncation (naming the
    offending map).
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DataError(f"bad magic {magic!r}, not a feature dump")
        version, flags, seed = struct.unpack("<IIQ", _read_exact(f, 16, "header"))
        if version != VERSION:
            raise DataError(f"version mismatch: file has {version}, reader supports {VERSION}")
        dz, total_ch, k = struct.unpack("<III", _read_exact(f, 12, "header"))
        shapes = []
        for i in range(k):
            shapes.append(struct.unpack("<III", _read_exact(f, 12, f"map {i} header")))
        declared = sum(c for _, _, c in shapes)
        if declared != total_ch:
            raise DataError(
                f"header mismatch: declared D={total_ch} but maps sum to {declared}"
            )
        z = np.frombuffer(_read_exact(f, 8 * dz, "latent vector"), dtype="<f8").copy()
        maps = []
        for i, (h, w, c) in enumerate(shapes):
            n = h * w * c * 4
            raw = _read_exact(f, n, f"map {i}")
            maps.append(FeatureMap(np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()))
        volume = FeatureVolume(maps=tuple(maps))
        th, tw = volume.target_height, volume.target_width
        if flags & _FLAG_IMAGE:
            (png_len,) = struct.unpack("<Q", _read_exact(f, 8, "image header"))
            png = _read_exact(f, png_len, "image payload")
            image = np.asarray(Image.open(BytesIO(png)).convert("RGB"), dtype=np.uint8)
        else:
            image = np.zeros((th, tw, 3), dtype=np.uint8)
        truth = None
        if flags & _FLAG_TRUTH:
            raw = _read_exact(f, th * tw * 2, "truth mask")
            mask = np.frombuffer(raw, dtype="<u2").reshape(th, tw).copy()
            (n_kp,) = struct.unpack("<I", _read_exact(f, 4, "keypoint count"))
            kps = []
            for i in range(n_kp):
                (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"keypoint {i}"))
                name = _read_exact(f, name_len, f"keypoint {i} name").decode("utf-8")
                x, y = struct.unpack("<dd", _read_exact(f, 16, f"keypoint {i} coords"))
                kps.append((name, int(x), int(y)))
            truth = GroundTruth(mask=mask, keypoints=tuple(kps))
        latent = LatentCode(seed=seed, z=z, synthetic=bool(flags & _FLAG_SYNTHETIC))
        return GeneratedSample(latent=latent, image=image, features=volume, truth=truth)
