"""The dataset factory: synthesize, score, filter, write, resume.

One run draws consecutive seeds, pushes each through the backbone and
the interpreter ensemble, scores ensemble disagreement, and writes an
image-annotation pair per seed. After all pairs exist, the most
uncertain fraction is flagged dropped (files stay on disk so the ratio
can be re-ablated without regeneration). A manifest documents schema,
config hashes, per-pair provenance and content hashes; everything but
timestamps and wall-clock timings is reproducible byte for byte.

Interrupted runs leave a partial manifest with a resume token; resume
completes the remaining seeds and finalizes to the identical manifest
an uninterrupted run would have produced.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from io import BytesIO
from multiprocessing import get_context
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .backbone import LatentCode, ToyBackboneConfig, toy_generate
from .errors import DataError
from .feature_volume import materialize
from .interpreter import (
    InterpreterEnsemble,
    ensemble_to_bytes,
    predict_keypoints,
    predict_segmentation_with_scores,
)
from .reporting import render_uncertainty_histogram
from .schema import LabelSchema
from .uncertainty import (
    UncertaintyReport,
    export_reports,
    filter_by_uncertainty,
    keypoint_variance_score,
)

MANIFEST_NAME = "manifest.json"
PNG_COMPRESS_LEVEL = 1  # fixed (deterministic bytes); speed over size
PARTIAL_NAME = "manifest.partial.json"
FORMAT_NAME = "labelforge-manifest"
FORMAT_VERSION = 1

# manifest keys that legitimately differ between reruns
TIMESTAMP_KEYS = ("created_at", "wall_ms", "total_wall_s")


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _mask_png_bytes(mask: np.ndarray, schema: LabelSchema) -> bytes:
    if len(schema) > 256:
        raise DataError("palette-indexed masks support at most 256 labels")
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = []
    for rgb in schema.palette:
        flat.extend(rgb)
    flat.extend([0] * (768 - len(flat)))
    img.putpalette(flat)
    buf = BytesIO()
    img.save(buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    return buf.getvalue()


def _write_mask_png(mask: np.ndarray, schema: LabelSchema, path) -> None:
    Path(path).write_bytes(_mask_png_bytes(mask, schema))


def read_mask_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        raise DataError(f"{path} is not a palette-indexed mask")
    return np.asarray(img, dtype=np.uint16)


def _write_keypoint_record(locs, peaks, path) -> None:
    lines = ["name\tx\ty\tpeak"]
    for name in sorted(locs):
        x, y = locs[name]
        lines.append(f"{name}\t{x}\t{y}\t{peaks[name]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


_FACTORY_STATE: dict = {}
_BLAS_LIMIT = None


def _pin_blas():
    global _BLAS_LIMIT
    _BLAS_LIMIT = threadpool_limits(limits=1, user_api="blas")


def _make_pair(index: int) -> dict:
    cfg: ToyBackboneConfig = _FACTORY_STATE["config"]
    ensemble: InterpreterEnsemble = _FACTORY_STATE["ensemble"]
    out_dir: Path = _FACTORY_STATE["out_dir"]
    mode: str = _FACTORY_STATE["mode"]
    seed = _FACTORY_STATE["seed_start"] + index
    t0 = time.perf_counter()
    sample = toy_generate(cfg, LatentCode.from_seed(seed, cfg.latent_dim))
    image_rel = f"images/{index:06d}.png"
    buf = BytesIO()
    Image.fromarray(sample.image).save(buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL)
    image_bytes = buf.getvalue()
    (out_dir / image_rel).write_bytes(image_bytes)
    # materialize the feature tensor once; prediction and the pooled
    # embedding both read it (identical numerics to the streaming path)
    feats = materialize(sample.features, mode)
    if ensemble.schema.task == "segmentation":
        mask, js = predict_segmentation_with_scores(ensemble, feats, mode=mode)
        report = UncertaintyReport(sample_id=index, pixel_js=js, image_score=float(js.sum()))
        ann_rel = f"masks/{index:06d}.png"
        ann_bytes = _mask_png_bytes(mask, ensemble.schema)
        (out_dir / ann_rel).write_bytes(ann_bytes)
    else:
        maps, locs = predict_keypoints(ensemble, feats, mode=mode)
        stack = np.stack([maps[n].data for n in ensemble.keypoint_names], axis=-1)
        report = keypoint_variance_score(stack[None], sample_id=index)
        peaks = {n: float(maps[n].data.max()) for n in maps}
        ann_rel = f"keypoints/{index:06d}.txt"
        _write_keypoint_record(locs, peaks, out_dir / ann_rel)
        ann_bytes = (out_dir / ann_rel).read_bytes()
    embedding = (
        feats.reshape(-1, feats.shape[-1]).astype(np.float64).mean(axis=0).astype(np.float32)
    )
    wall_ms = (time.perf_counter() - t0) * 1e3
    return {
        "id": index,
        "seed": seed,
        "image": image_rel,
        "annotation": ann_rel,
        "image_sha256": hashlib.sha256(image_bytes).hexdigest(),
        "annotation_sha256": hashlib.sha256(ann_bytes).hexdigest(),
        "image_score": report.image_score,
        "wall_ms": round(wall_ms, 3),
        "_embedding": embedding,
    }


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed manifest document plus its directory."""

    out_dir: Path
    doc: dict

    @property
    def pairs(self) -> list[dict]:
        return self.doc["pairs"]

    @property
    def kept_ids(self) -> list[int]:
        return [p["id"] for p in self.pairs if p["kept"]]

    @property
    def complete(self) -> bool:
        return self.doc.get("complete", False)


def _manifest_doc_base(config, ensemble_hash, schema, count, ratio, seed, mode) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "task": schema.task,
        "schema": schema.to_dict(),
        "backbone": {"kind": "toy", "config": config.to_dict(), "config_hash": config.content_hash()},
        "ensemble_hash": ensemble_hash,
        "requested": count,
        "filter_ratio": ratio,
        "seed_start": seed,
        "upsample_mode": mode,
        "complete": False,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "pairs": [],
    }


def _write_doc(doc: dict, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    tmp.replace(path)


def _finalize(doc: dict, out_dir: Path, embeddings: dict[int, np.ndarray]) -> DatasetManifest:
    ratio = doc["filter_ratio"]
    reports = [
        UncertaintyReport(
            sample_id=p["id"],
            pixel_js=np.array([[p["image_score"]]]),
            image_score=p["image_score"],
        )
        for p in doc["pairs"]
    ]
    kept, dropped = filter_by_uncertainty(reports, ratio)
    kept_set = set(kept)
    for p in doc["pairs"]:
        p["kept"] = p["id"] in kept_set
    doc["complete"] = True
    doc.pop("resume_token", None)
    (out_dir / "uncertainty.log").write_text(export_reports(reports, kept))
    if embeddings:
        order = sorted(embeddings)
        np.save(out_dir / "embeddings.npy", np.stack([embeddings[i] for i in order]))
    render_uncertainty_histogram(
        [p["image_score"] for p in doc["pairs"]],
        kept_set,
        [p["id"] for p in doc["pairs"]],
        out_dir / "uncertainty_hist.png",
    )
    _write_doc(doc, out_dir / MANIFEST_NAME)
    partial = out_dir / PARTIAL_NAME
    if partial.exists():
        partial.unlink()
    return DatasetManifest(out_dir=out_dir, doc=doc)


def _run_pairs(doc: dict, out_dir: Path, config, ensemble, workers, stop_after=None):
    """Generate remaining pairs; returns id -> embedding for new pairs."""
    done = {p["id"] for p in doc["pairs"]}
    todo = [i for i in range(doc["requested"]) if i not in done]
    if stop_after is not None:
        todo = todo[:stop_after]
    if not todo:
        return {}
    global _FACTORY_STATE
    _FACTORY_STATE = {
        "config": config,
        "ensemble": ensemble,
        "out_dir": out_dir,
        "mode": doc["upsample_mode"],
        "seed_start": doc["seed_start"],
    }
    try:
        # per-pair matmuls are tiny; multi-threaded BLAS only adds sync
        # overhead, so each worker (and the sequential path) pins to one
        if workers <= 1:
            with threadpool_limits(limits=1, user_api="blas"):
                records = [_make_pair(i) for i in todo]
        else:
            ctx = get_context("fork")
            with ProcessPoolExecutor(
                max_workers=workers, mp_context=ctx, initializer=_pin_blas
            ) as pool:
                records = list(pool.map(_make_pair, todo, chunksize=16))
    finally:
        _FACTORY_STATE = {}
    embeddings = {}
    for rec in records:
        embeddings[rec["id"]] = rec.pop("_embedding")
        rec["kept"] = None  # decided at finalization
        doc["pairs"].append(rec)
    doc["pairs"].sort(key=lambda p: p["id"])
    return embeddings


def synthesize(
    config: ToyBackboneConfig,
    ensemble: InterpreterEnsemble,
    count: int,
    filter_ratio: float,
    seed: int,
    out_dir,
    workers: int = 1,
    stop_after: Optional[int] = None,
) -> DatasetManifest:
    """Generate `count` image-annotation pairs from seeds seed..seed+count-1.

    Writes images/, masks/ (or keypoints/), uncertainty.log, an
    uncertainty histogram figure, per-sample embeddings, and the
    manifest. Dropped pairs stay on disk flagged kept=false. With
    `stop_after`, writes a resumable partial manifest instead of
    finalizing (chunked operation; resume() completes it).
    """
    if count < 1:
        raise DataError("count must be positive")
    if not (0.0 <= filter_ratio < 1.0):
        raise DataError(f"filter ratio must be in [0, 1), got {filter_ratio}")
    if config.feature_dim != ensemble.feature_dim:
        raise DataError(
            f"backbone D={config.feature_dim} does not match ensemble D={ensemble.feature_dim}"
        )
    out_dir = Path(out_dir)
    for sub in ("images", "masks" if ensemble.schema.task == "segmentation" else "keypoints"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    ensemble_hash = hashlib.sha256(ensemble_to_bytes(ensemble)).hexdigest()
    doc = _manifest_doc_base(
        config, ensemble_hash, ensemble.schema, count, filter_ratio, seed,
        ensemble.train_config.upsample_mode,
    )
    embeddings = _run_pairs(doc, out_dir, config, ensemble, workers, stop_after)
    if len(doc["pairs"]) < count:
        doc["resume_token"] = {
            "pairs_done": len(doc["pairs"]),
            "backbone_config_hash": config.content_hash(),
            "ensemble_hash": ensemble_hash,
        }
        for i, e in embeddings.items():
            np.save(out_dir / f"embeddings.partial.{i:06d}.npy", e)
        _write_doc(doc, out_dir / PARTIAL_NAME)
        return DatasetManifest(out_dir=out_dir, doc=doc)
    return _finalize(doc, out_dir, embeddings)


def resume(
    out_dir,
    config: ToyBackboneConfig,
    ensemble: InterpreterEnsemble,
    workers: int = 1,
) -> DatasetManifest:
    """Complete a partial run; refuses if config or ensemble changed.

    Resuming a complete manifest is a no-op.
    """
    out_dir = Path(out_dir)
    final = out_dir / MANIFEST_NAME
    partial = out_dir / PARTIAL_NAME
    if final.exists() and not partial.exists():
        return load_manifest(out_dir)
    if not partial.exists():
        raise DataError(f"no partial manifest in {out_dir}")
    with open(partial) as f:
        doc = json.load(f)
    token = doc.get("resume_token")
    if token is None:
        raise DataError("partial manifest lacks a resume token")
    if token["backbone_config_hash"] != config.content_hash():
        raise DataError("resume refused: backbone config changed")
    ensemble_hash = hashlib.sha256(ensemble_to_bytes(ensemble)).hexdigest()
    if token["ensemble_hash"] != ensemble_hash:
        raise DataError("resume refused: ensemble checkpoint changed")
    embeddings = {}
    for p in out_dir.glob("embeddings.partial.*.npy"):
        idx = int(p.stem.split(".")[-1])
        embeddings[idx] = np.load(p)
    new_embeddings = _run_pairs(doc, out_dir, config, ensemble, workers)
    embeddings.update(new_embeddings)
    manifest = _finalize(doc, out_dir, embeddings)
    for p in out_dir.glob("embeddings.partial.*.npy"):
        p.unlink()
    return manifest


def load_manifest(out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest: {exc}") from None
    if doc.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a dataset manifest")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported manifest version {doc.get('version')}")
    return DatasetManifest(out_dir=out_dir, doc=doc)


def manifest_fingerprint(manifest: DatasetManifest) -> bytes:
    """Canonical manifest bytes with timestamps and timings stripped."""

    def strip(obj):
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in obj.items() if k not in TIMESTAMP_KEYS}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    return json.dumps(strip(manifest.doc), sort_keys=True).encode()


def validate_manifest(out_dir) -> list[str]:
    """Check every manifest invariant; returns itemized violations."""
    manifest = load_manifest(out_dir)
    doc = manifest.doc
    out = Path(out_dir)
    violations: list[str] = []
    schema = LabelSchema.from_dict(doc["schema"])
    requested = doc["requested"]
    ratio = doc["filter_ratio"]
    pairs = doc["pairs"]
    if len(pairs) != requested:
        violations.append(f"manifest has {len(pairs)} pairs, requested {requested}")
    expected_kept = requested - math.ceil(ratio * requested)
    kept = [p for p in pairs if p.get("kept")]
    if len(kept) != expected_kept:
        violations.append(
            f"kept count {len(kept)} != requested - ceil(ratio*requested) = {expected_kept}"
        )
    for p in pairs:
        pid = p["id"]
        for key in ("image", "annotation"):
            rel = p[key]
            path = out / rel
            if not path.exists():
                violations.append(f"pair {pid}: missing file {rel}")
                continue
            digest = _sha256_file(path)
            if digest != p[f"{key}_sha256"]:
                violations.append(f"pair {pid}: {key} hash mismatch for {rel}")
        if doc["task"] == "segmentation":
            path = out / p["annotation"]
            if path.exists():
                mask = read_mask_png(path)
                bad = int((mask >= len(schema)).sum())
                if bad:
                    violations.append(
                        f"pair {pid}: mask has {bad} pixels outside the {len(schema)}-label schema"
                    )
    return violations
