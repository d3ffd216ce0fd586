"""The style interpreter: an ensemble of per-pixel MLPs.

Each member is a three-weight-layer MLP with rectifier hidden
activations, applied independently to every pixel's concatenated
feature vector (weights shared across pixels). Segmentation members
end in softmax over the label set and train with cross-entropy;
keypoint members emit one unbounded heat value per keypoint and train
with mean squared error against Gaussian heat targets. Backbone
features are constants: gradients stop at the feature vector.

Members train independently, each from its own seed and its own pixel
draws, and vote at prediction time: majority label per pixel for
segmentation, mean heat per pixel for keypoints.

Parameters and training math are float64 so finite-difference gradient
checks are meaningful; inference matmuls run in float32 (features are
float32 anyway) with softmax taken in float64.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import GeneratedSample
from .errors import ConfigError, DataError, DivergenceError
from .feature_volume import FeatureVolume, PixelFeature, features_at
from .schema import LabelSchema


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    """A generated sample plus a human labeling (mask or keypoints)."""

    sample: GeneratedSample
    mask: Optional[np.ndarray] = None  # (h, w) uint16 label indices
    keypoints: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self) -> None:
        th = self.sample.features.target_height
        tw = self.sample.features.target_width
        if self.mask is not None:
            mask = np.ascontiguousarray(self.mask, dtype=np.uint16)
            if mask.shape != (th, tw):
                raise DataError(
                    f"mask shape {mask.shape} does not match sample {th}x{tw}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
        kps = tuple(tuple(k) for k in self.keypoints)
        for name, x, y in kps:
            if not (0 <= x < tw and 0 <= y < th):
                raise DataError(f"keypoint {name!r} at ({x}, {y}) out of bounds")
        object.__setattr__(self, "keypoints", kps)

    @classmethod
    def from_truth(cls, sample: GeneratedSample, task: str = "segmentation") -> "AnnotatedSample":
        """Self-annotate a toy sample from its ground truth."""
        if sample.truth is None:
            raise DataError("sample has no ground truth to annotate from")
        if task == "segmentation":
            return cls(sample=sample, mask=sample.truth.mask)
        return cls(sample=sample, keypoints=sample.truth.keypoints)

    def validate_against(self, schema: LabelSchema) -> None:
        if schema.task == "segmentation":
            if self.mask is None:
                raise DataError("segmentation schema but sample has no mask")
            top = int(self.mask.max()) if self.mask.size else 0
            if top >= len(schema):
                raise DataError(
                    f"mask index {top} out of range for {len(schema)} labels"
                )
        else:
            if not self.keypoints:
                raise DataError("keypoint schema but sample has no keypoints")
            known = set(schema.names[1:])
            for name, _, _ in self.keypoints:
                if name not in known:
                    raise DataError(f"keypoint {name!r} not in schema")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and sampling knobs; every value lands in the checkpoint.

    `batch_pixels` is the total pixel budget of one optimization step,
    split evenly over the annotated samples (each sample is drawn with
    the per-region quota every step).
    """

    steps: int = 2000
    batch_pixels: int = 2048
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_members: int = 10
    member_seed_offsets: Optional[tuple[int, ...]] = None
    hidden: tuple[int, int] = (256, 128)
    heat_sigma_frac: float = 0.02  # keypoint target sigma, fraction of max(h, w)
    upsample_mode: str = "bilinear"

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_pixels < 1 or self.n_members < 1:
            raise ConfigError("steps, batch_pixels and n_members must be positive")
        if self.learning_rate <= 0 or self.heat_sigma_frac <= 0:
            raise ConfigError("learning_rate and heat_sigma_frac must be positive")
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must be two positive layer widths")
        offsets = self.member_seed_offsets
        if offsets is None:
            offsets = tuple(range(self.n_members))
        else:
            offsets = tuple(int(o) for o in offsets)
        if len(offsets) != self.n_members or len(set(offsets)) != len(offsets):
            raise ConfigError("member_seed_offsets must be n_members distinct values")
        object.__setattr__(self, "member_seed_offsets", offsets)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_pixels": self.batch_pixels,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "n_members": self.n_members,
            "member_seed_offsets": list(self.member_seed_offsets),
            "hidden": list(self.hidden),
            "heat_sigma_frac": self.heat_sigma_frac,
            "upsample_mode": self.upsample_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        for key in ("member_seed_offsets", "hidden"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class MlpClassifier:
    """One ensemble member: exactly three weight layers, float64."""

    weights: tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise DataError("classifier must have exactly three weight layers")
        ws, bs = [], []
        for w, b in zip(self.weights, self.biases):
            # own private copies: freezing must not alias caller arrays
            w = np.array(w, dtype=np.float64, order="C")
            b = np.array(b, dtype=np.float64, order="C")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError("classifier parameters contain non-finite values")
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DataError(f"bad layer shapes {w.shape} / {b.shape}")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        if ws[0].shape[1] != ws[1].shape[0] or ws[1].shape[1] != ws[2].shape[0]:
            raise DataError("layer widths do not chain")
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))
        object.__setattr__(self, "_f32_cache", None)

    def params_f32(self):
        """Cached float32 view of the parameters for inference matmuls."""
        cached = self._f32_cache
        if cached is None:
            cached = (
                tuple(w.astype(np.float32) for w in self.weights),
                tuple(b.astype(np.float32) for b in self.biases),
            )
            object.__setattr__(self, "_f32_cache", cached)
        return cached

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[2].shape[1]


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Single-keypoint heat raster with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DataError(f"heatmap must be 2-D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("heatmap contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise DataError("heatmap values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class InterpreterEnsemble:
    """N trained members sharing one schema and layer shape."""

    members: tuple[MlpClassifier, ...]
    schema: LabelSchema
    train_config: TrainConfig
    loss_curves: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self) -> None:
        if not self.members:
            raise DataError("ensemble needs at least one member")
        shapes = {tuple(w.shape for w in m.weights) for m in self.members}
        if len(shapes) != 1:
            raise DataError("ensemble members disagree on layer shapes")
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "loss_curves", tuple(tuple(c) for c in self.loss_curves))

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def feature_dim(self) -> int:
        return self.members[0].in_dim

    @property
    def keypoint_names(self) -> tuple[str, ...]:
        return self.schema.names[1:]



# ----------------------------------------------------------------- forward


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _forward_batch(member: MlpClassifier, X: np.ndarray) -> np.ndarray:
    """Raw head outputs (logits or heats) for a (B, D) float batch."""
    if X.dtype == np.float32:
        (W1, W2, W3), (b1, b2, b3) = member.params_f32()
    else:
        W1, W2, W3 = member.weights
        b1, b2, b3 = member.biases
    h1 = _relu(X @ W1 + b1)
    h2 = _relu(h1 @ W2 + b2)
    return h2 @ W3 + b3


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64; strictly positive, sums to 1."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(member: MlpClassifier, feature, task: str = "segmentation") -> np.ndarray:
    """Run one member on one pixel feature.

    Returns the softmax class distribution for segmentation, or the raw
    per-keypoint heat vector (unbounded; clamping to [0, 1] happens only
    at prediction time).
    """
    if isinstance(feature, PixelFeature):
        values = feature.values
    else:
        values = np.asarray(feature)
    if values.ndim != 1 or values.shape[0] != member.in_dim:
        raise DataError(
            f"feature dim {values.shape} does not match classifier input {member.in_dim}"
        )
    if not np.all(np.isfinite(values)):
        raise DataError("feature vector contains non-finite values")
    out = _forward_batch(member, values.astype(np.float64)[None, :])[0]
    if task == "segmentation":
        return softmax(out)
    return out


# ------------------------------------------------------------ pixel sampling


def connected_regions(mask: np.ndarray) -> np.ndarray:
    """4-connected components of equal non-background label.

    Returns an int32 map: 0 for background, 1..R for regions.
    """
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int32)
    next_id = 0
    for sy in range(h):
        for sx in range(w):
            if mask[sy, sx] == 0 or out[sy, sx] != 0:
                continue
            next_id += 1
            label = mask[sy, sx]
            stack = [(sy, sx)]
            out[sy, sx] = next_id
            while stack:
                y, x = stack.pop()
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and out[ny, nx] == 0 and mask[ny, nx] == label:
                        out[ny, nx] = next_id
                        stack.append((ny, nx))
    return out


def gaussian_heatmap(kp: tuple[float, float], h: int, w: int, sigma: float) -> Heatmap:
    """Gaussian heat target: exp(-((x-kx)^2 + (y-ky)^2) / (2 sigma^2)).

    Peaks at exactly 1 on the keypoint pixel when the keypoint has
    integer coordinates.
    """
    kx, ky = float(kp[0]), float(kp[1])
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    if not (0 <= kx < w and 0 <= ky < h):
        raise DataError(f"keypoint ({kx}, {ky}) out of bounds for {h}x{w}")
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    d2 = (xs - kx) ** 2 + (ys - ky) ** 2
    return Heatmap(np.exp(-d2 / (2.0 * sigma * sigma)))


def _heat_values_at(
    keypoints: Sequence[tuple[str, int, int]],
    names: Sequence[str],
    xs: np.ndarray,
    ys: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Per-keypoint Gaussian heat targets at sampled coordinates, (B, K)."""
    by_name = {}
    for name, x, y in keypoints:
        by_name.setdefault(name, []).append((x, y))
    out = np.zeros((xs.size, len(names)), dtype=np.float64)
    for k, name in enumerate(names):
        for x, y in by_name.get(name, ()):
            d2 = (xs - x) ** 2 + (ys - y) ** 2
            out[:, k] = np.maximum(out[:, k], np.exp(-d2 / (2.0 * sigma * sigma)))
    return out


class _PixelSampler:
    """Cached per-sample draw machinery behind sample_pixels and training."""

    def __init__(self, annotated: AnnotatedSample, task: str, sigma: float):
        self.annotated = annotated
        self.task = task
        self.sigma = sigma
        th = annotated.sample.features.target_height
        tw = annotated.sample.features.target_width
        if task == "segmentation":
            if annotated.mask is None:
                raise DataError("segmentation sampling needs a mask")
            regions = connected_regions(annotated.mask)
            self.n_regions = int(regions.max())
            if self.n_regions == 0:
                raise DataError("sample has zero labeled pixels")
            ys, xs = np.nonzero(annotated.mask)
            self.labeled_xs = xs
            self.labeled_ys = ys
            flat_regions = regions[ys, xs]
            order = np.argsort(flat_regions, kind="stable")
            self._by_region = order
            self._region_sizes = np.bincount(flat_regions, minlength=self.n_regions + 1)[1:]
            self._region_offsets = np.concatenate([[0], np.cumsum(self._region_sizes)[:-1]])
        else:
            if not annotated.keypoints:
                raise DataError("keypoint sampling needs keypoints")
            self.n_regions = len(annotated.keypoints)
            xs, ys = np.meshgrid(np.arange(tw), np.arange(th))
            self.labeled_xs = xs.ravel()
            self.labeled_ys = ys.ravel()
            # each keypoint's own pixel is its "region": always drawn once
            self.kp_coords = [(x, y) for _, x, y in annotated.keypoints]

    def draw(self, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if batch < self.n_regions:
            raise DataError(
                f"batch {batch} smaller than the {self.n_regions} labeled regions"
            )
        if self.task == "segmentation":
            # one pixel per region (vectorized), then uniform over labeled area
            within = (rng.random(self.n_regions) * self._region_sizes).astype(np.int64)
            picks = self._by_region[self._region_offsets + within]
            extra = rng.integers(0, self.labeled_xs.size, size=batch - self.n_regions)
            flat = np.concatenate([picks, extra])
            return self.labeled_xs[flat], self.labeled_ys[flat]
        quota_x = np.array([c[0] for c in self.kp_coords], dtype=np.int64)
        quota_y = np.array([c[1] for c in self.kp_coords], dtype=np.int64)
        extra = rng.integers(0, self.labeled_xs.size, size=batch - self.n_regions)
        return (
            np.concatenate([quota_x, self.labeled_xs[extra]]),
            np.concatenate([quota_y, self.labeled_ys[extra]]),
        )

    def targets(self, xs: np.ndarray, ys: np.ndarray, names: Sequence[str]) -> np.ndarray:
        if self.task == "segmentation":
            return self.annotated.mask[ys, xs].astype(np.int64)
        return _heat_values_at(self.annotated.keypoints, names, xs, ys, self.sigma)


def sample_pixels(
    annotated: AnnotatedSample,
    batch: int,
    rng: np.random.Generator,
    schema: Optional[LabelSchema] = None,
    sigma: float = 2.0,
    mode: str = "bilinear",
) -> list[tuple[PixelFeature, object]]:
    """Draw a training batch from one annotated sample.

    Every labeled 4-connected region contributes at least one pixel;
    the remaining draws are uniform over the labeled area (for keypoint
    tasks: the keypoint pixels, then uniform over the image). Targets
    are label indices (segmentation) or per-keypoint heat vectors.
    """
    task = schema.task if schema is not None else ("keypoints" if annotated.keypoints and annotated.mask is None else "segmentation")
    sampler = _PixelSampler(annotated, task, sigma)
    xs, ys = sampler.draw(batch, rng)
    names = schema.names[1:] if (schema is not None and task == "keypoints") else tuple(
        n for n, _, _ in annotated.keypoints
    )
    targets = sampler.targets(xs, ys, names)
    feats = features_at(annotated.sample.features, xs, ys, mode)
    out = []
    for i in range(xs.size):
        target = int(targets[i]) if task == "segmentation" else targets[i]
        out.append((PixelFeature(values=feats[i], x=int(xs[i]), y=int(ys[i])), target))
    return out


# ----------------------------------------------------------------- training


def init_params(
    in_dim: int, hidden: tuple[int, int], out_dim: int, rng: np.random.Generator
) -> MlpClassifier:
    """He-style initialization in float64.

    Biases start at small random values rather than zero so no rectifier
    pre-activation sits exactly on its kink (keeps finite-difference
    gradient checks clean).
    """
    dims = [in_dim, hidden[0], hidden[1], out_dim]
    ws, bs = [], []
    for a, b in zip(dims, dims[1:]):
        ws.append(rng.standard_normal((a, b)) * math.sqrt(2.0 / a))
        bs.append(rng.standard_normal(b) * 0.05)
    return MlpClassifier(weights=tuple(ws), biases=tuple(bs))


def loss_and_gradients(
    member: MlpClassifier, X: np.ndarray, targets: np.ndarray, task: str
) -> tuple[float, list[np.ndarray]]:
    """Mean loss and analytic gradients in parameter order W1,b1,W2,b2,W3,b3.

    Cross-entropy of softmax vs integer labels for segmentation; mean
    squared error vs heat targets (averaged over batch and keypoints)
    for keypoint regression.
    """
    W1, W2, W3 = member.weights
    b1, b2, b3 = member.biases
    X = X.astype(np.float64)
    B = X.shape[0]
    z1 = X @ W1 + b1
    h1 = _relu(z1)
    z2 = h1 @ W2 + b2
    h2 = _relu(z2)
    out = h2 @ W3 + b3
    if task == "segmentation":
        p = softmax(out)
        eps = 1e-300
        loss = float(-np.mean(np.log(p[np.arange(B), targets] + eps)))
        dout = p
        dout[np.arange(B), targets] -= 1.0
        dout /= B
    else:
        diff = out - targets
        loss = float(np.mean(diff * diff))
        dout = 2.0 * diff / diff.size
    dW3 = h2.T @ dout
    db3 = dout.sum(axis=0)
    dh2 = dout @ W3.T
    dz2 = dh2 * (z2 > 0)
    dW2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ W2.T
    dz1 = dh1 * (z1 > 0)
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return loss, [dW1, db1, dW2, db2, dW3, db3]


class _Adam:
    def __init__(self, shapes, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def _train_member(
    member_idx: int,
    samplers: list[_PixelSampler],
    schema: LabelSchema,
    config: TrainConfig,
    feature_dim: int,
) -> tuple[MlpClassifier, tuple[float, ...]]:
    rng = np.random.Generator(
        np.random.PCG64(config.seed + config.member_seed_offsets[member_idx])
    )
    out_dim = len(schema) if schema.task == "segmentation" else len(schema) - 1
    member = init_params(feature_dim, config.hidden, out_dim, rng)
    params = [member.weights[0], member.biases[0], member.weights[1], member.biases[1], member.weights[2], member.biases[2]]
    adam = _Adam([p.shape for p in params], config.learning_rate, config.beta1, config.beta2, config.eps)
    per_image = max(1, config.batch_pixels // len(samplers))
    names = schema.names[1:]
    curve = []
    for step in range(config.steps):
        feats_all, targets_all = [], []
        for sampler in samplers:
            xs, ys = sampler.draw(per_image, rng)
            feats = features_at(sampler.annotated.sample.features, xs, ys, config.upsample_mode)
            feats_all.append(feats)
            targets_all.append(sampler.targets(xs, ys, names))
        X = np.concatenate(feats_all).astype(np.float64)
        if schema.task == "segmentation":
            targets = np.concatenate(targets_all)
        else:
            targets = np.concatenate(targets_all, axis=0)
        current = MlpClassifier(weights=(params[0], params[2], params[4]), biases=(params[1], params[3], params[5]))
        loss, grads = loss_and_gradients(current, X, targets, schema.task)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"member {member_idx} diverged at step {step}: loss={loss}; "
                f"last finite loss={curve[-1] if curve else 'n/a'}"
            )
        curve.append(loss)
        params = adam.step(params, grads)
    final = MlpClassifier(weights=(params[0], params[2], params[4]), biases=(params[1], params[3], params[5]))
    return final, tuple(curve)


_TRAIN_STATE: dict = {}


def _train_member_forked(member_idx: int):
    return _train_member(
        member_idx,
        _TRAIN_STATE["samplers"],
        _TRAIN_STATE["schema"],
        _TRAIN_STATE["config"],
        _TRAIN_STATE["feature_dim"],
    )


def train_ensemble(
    annotated: Sequence[AnnotatedSample],
    schema: LabelSchema,
    config: TrainConfig = TrainConfig(),
    workers: int = 1,
) -> InterpreterEnsemble:
    """Train N members independently on per-pixel features.

    Each member gets its own seed and its own pixel draws; features are
    read through FeatureVolume only and never modified. Members share no
    state, so `workers > 1` trains them in parallel processes with
    bitwise-identical results. Raises DivergenceError with diagnostics
    if a loss goes non-finite.
    """
    if not annotated:
        raise DataError("need at least one annotated sample")
    dims = {a.sample.features.feature_dim for a in annotated}
    if len(dims) != 1:
        raise DataError(f"annotated samples disagree on feature dim: {sorted(dims)}")
    for a in annotated:
        a.validate_against(schema)
    size = max(
        annotated[0].sample.features.target_height,
        annotated[0].sample.features.target_width,
    )
    sigma = config.heat_sigma_frac * size
    samplers = [_PixelSampler(a, schema.task, sigma) for a in annotated]
    per_image = max(1, config.batch_pixels // len(samplers))
    worst = max(s.n_regions for s in samplers)
    if per_image < worst:
        raise ConfigError(
            f"batch_pixels {config.batch_pixels} gives {per_image} pixels per image "
            f"but a sample has {worst} labeled regions"
        )
    feature_dim = next(iter(dims))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        from multiprocessing import get_context

        global _TRAIN_STATE
        _TRAIN_STATE = {
            "samplers": samplers, "schema": schema, "config": config,
            "feature_dim": feature_dim,
        }
        try:
            ctx = get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_train_member_forked, range(config.n_members)))
        finally:
            _TRAIN_STATE = {}
    else:
        results = [
            _train_member(i, samplers, schema, config, feature_dim)
            for i in range(config.n_members)
        ]
    members = tuple(r[0] for r in results)
    curves = tuple(r[1] for r in results)
    return InterpreterEnsemble(
        members=members, schema=schema, train_config=config, loss_curves=curves
    )


# ---------------------------------------------------------------- inference


def _volume_shape(volume) -> tuple[int, int]:
    if isinstance(volume, np.ndarray):
        return volume.shape[0], volume.shape[1]
    return volume.target_height, volume.target_width


def _check_volume_dim(volume, ensemble: InterpreterEnsemble) -> None:
    dim = volume.shape[-1] if isinstance(volume, np.ndarray) else volume.feature_dim
    if dim != ensemble.feature_dim:
        raise DataError(
            f"volume D={dim} does not match ensemble D={ensemble.feature_dim}"
        )

def _member_outputs(ensemble: InterpreterEnsemble, volume, mode: str, y0: int, y1: int) -> np.ndarray:
    if isinstance(volume, np.ndarray):  # pre-materialized (H, W, D) features
        feats = volume[y0:y1].reshape(-1, volume.shape[-1])
    else:
        tw = volume.target_width
        xs = np.tile(np.arange(tw, dtype=np.int64), y1 - y0)
        ys = np.repeat(np.arange(y0, y1, dtype=np.int64), tw)
        feats = features_at(volume, xs, ys, mode)  # float32 (B, D)
    # per-member 2-D matmuls: broadcast-batched matmul bypasses the fast
    # BLAS path and runs several times slower on large blocks
    return np.stack([_forward_batch(m, feats) for m in ensemble.members])


def _run_blocks(ensemble, volume, mode, workers, task, block_rows=32):
    """Per-block inference, optionally parallel across a thread pool.

    Threads suffice: the matmuls release the GIL and all state is
    read-only. The block partition is fixed, so results are identical
    for any worker count, and concurrent calls never share state.
    """
    th, _ = _volume_shape(volume)
    blocks = [(y, min(y + block_rows, th)) for y in range(0, th, block_rows)]

    def compute(block):
        y0, y1 = block
        logits = _member_outputs(ensemble, volume, mode, y0, y1)
        if task != "segmentation":
            return logits
        # finish the per-pixel work inside the worker; the caller only concatenates
        dists = softmax(logits)
        n_members, batch, n_labels = logits.shape
        votes = logits.argmax(axis=-1)  # (N, B)
        flat = (votes + np.arange(batch, dtype=np.int64) * n_labels).ravel()
        counts = np.bincount(flat, minlength=batch * n_labels).reshape(batch, n_labels)
        labels = counts.argmax(axis=-1).astype(np.uint16)
        return dists, labels

    if workers <= 1:
        results = [compute(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(compute, blocks))
    if task != "segmentation":
        return np.concatenate(results, axis=1)  # (N, H*W, out)
    dists = np.concatenate([r[0] for r in results], axis=1)
    labels = np.concatenate([r[1] for r in results])
    return dists, labels


def predict_segmentation(
    ensemble: InterpreterEnsemble,
    volume: FeatureVolume,
    mode: str = "bilinear",
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote label mask plus every member's distribution per pixel.

    `volume` may also be a pre-materialized (H, W, D) float32 array when
    the caller already holds the full feature tensor. Returns
    (mask uint16 (H, W), distributions float64 (N, H, W, C)); vote ties
    break to the lowest label index.
    """
    if ensemble.schema.task != "segmentation":
        raise DataError("segmentation prediction on a keypoint ensemble")
    _check_volume_dim(volume, ensemble)
    th, tw = _volume_shape(volume)
    dists, labels = _run_blocks(ensemble, volume, mode, workers, "segmentation")
    n_labels = len(ensemble.schema)
    return labels.reshape(th, tw), dists.reshape(ensemble.n_members, th, tw, n_labels)


def predict_segmentation_with_scores(
    ensemble: InterpreterEnsemble,
    volume,
    mode: str = "bilinear",
    workers: int = 1,
    block_rows: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote mask plus the per-pixel JS disagreement, one pass.

    Matches predict_segmentation followed by uncertainty.score_image
    (member entropies come from the log-sum-exp identity instead of a
    second log pass) but never materializes the full member-distribution
    tensor. The factory's throughput path; the uncertainty module stays
    the reference implementation.
    """
    if ensemble.schema.task != "segmentation":
        raise DataError("segmentation prediction on a keypoint ensemble")
    _check_volume_dim(volume, ensemble)
    th, tw = _volume_shape(volume)
    blocks = [(y, min(y + block_rows, th)) for y in range(0, th, block_rows)]

    def compute(block):
        y0, y1 = block
        logits = _member_outputs(ensemble, volume, mode, y0, y1)
        n_members, batch, n_labels = logits.shape
        # label-first layout keeps every reduction contiguous (the label
        # axis is short, so last-axis reductions are pathologically
        # slow); float32 suffices for a filter ranking signal
        zt = np.ascontiguousarray(logits.transpose(2, 0, 1), dtype=np.float32)
        zm = zt - zt.max(axis=0)
        e = np.exp(zm)
        norm = e.sum(axis=0)  # (N, B)
        p = e / norm
        # H(p_t) = log(sum exp(zm)) - sum p * zm  (shift-invariant)
        member_entropy = np.log(norm) - (p * zm).sum(axis=0)  # (N, B)
        p_mean = p.mean(axis=1)  # (C, B)
        mean_entropy = -(p_mean * np.log(p_mean)).sum(axis=0)
        js = mean_entropy.astype(np.float64) - member_entropy.mean(axis=0, dtype=np.float64)
        js = np.maximum(js, 0.0)
        votes = zt.argmax(axis=0)  # (N, B)
        flat = (votes + np.arange(batch, dtype=np.int64)[None, :] * n_labels).ravel()
        counts = np.bincount(flat, minlength=batch * n_labels).reshape(batch, n_labels)
        return counts.argmax(axis=-1).astype(np.uint16), js

    if workers <= 1:
        results = [compute(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(compute, blocks))
    mask = np.concatenate([r[0] for r in results]).reshape(th, tw)
    js = np.concatenate([r[1] for r in results]).reshape(th, tw)
    return mask, js


def predict_keypoints(
    ensemble: InterpreterEnsemble,
    volume: FeatureVolume,
    mode: str = "bilinear",
    workers: int = 1,
) -> tuple[dict[str, Heatmap], dict[str, tuple[int, int]]]:
    """Mean member heat per keypoint plus the argmax location.

    Member heats are clamped to [0, 1] before averaging; location ties
    break in row-major order.
    """
    if ensemble.schema.task != "keypoints":
        raise DataError("keypoint prediction on a segmentation ensemble")
    _check_volume_dim(volume, ensemble)
    th, tw = _volume_shape(volume)
    heats = _run_blocks(ensemble, volume, mode, workers, "keypoints").astype(np.float64)
    heats = np.clip(heats, 0.0, 1.0)
    mean = heats.mean(axis=0)  # (H*W, K)
    maps, locs = {}, {}
    for k, name in enumerate(ensemble.keypoint_names):
        grid = mean[:, k].reshape(th, tw)
        maps[name] = Heatmap(grid)
        flat = int(np.argmax(grid))
        locs[name] = (flat % tw, flat // tw)
    return maps, locs


# --------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"IEC1"
CHECKPOINT_VERSION = 1


def ensemble_to_bytes(ensemble: InterpreterEnsemble) -> bytes:
    """The exact bytes save_ensemble writes; also used for content hashing."""
    header = {
        "schema": ensemble.schema.to_dict(),
        "train_config": ensemble.train_config.to_dict(),
        "n_members": ensemble.n_members,
        "layer_shapes": [list(w.shape) for w in ensemble.members[0].weights],
        "loss_curves": [list(c) for c in ensemble.loss_curves],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    for m in ensemble.members:
        for w, b in zip(m.weights, m.biases):
            chunks.append(w.astype("<f8").tobytes())
            chunks.append(b.astype("<f8").tobytes())
    return b"".join(chunks)


def save_ensemble(ensemble: InterpreterEnsemble, path) -> None:
    """Versioned binary checkpoint; load_ensemble(save) is bit-exact."""
    with open(path, "wb") as f:
        f.write(ensemble_to_bytes(ensemble))


def load_ensemble(path) -> InterpreterEnsemble:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"checkpoint version {version} unsupported")
        header = json.loads(f.read(hlen).decode())
        schema = LabelSchema.from_dict(header["schema"])
        config = TrainConfig.from_dict(header["train_config"])
        shapes = [tuple(s) for s in header["layer_shapes"]]
        members = []
        for _ in range(header["n_members"]):
            ws, bs = [], []
            for shape in shapes:
                n = shape[0] * shape[1] * 8
                ws.append(np.frombuffer(f.read(n), dtype="<f8").reshape(shape).copy())
                bs.append(np.frombuffer(f.read(shape[1] * 8), dtype="<f8").copy())
            members.append(MlpClassifier(weights=tuple(ws), biases=tuple(bs)))
        curves = tuple(tuple(c) for c in header.get("loss_curves", ()))
    return InterpreterEnsemble(
        members=tuple(members), schema=schema, train_config=config, loss_curves=curves
    )


def ensemble_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
