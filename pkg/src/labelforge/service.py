"""Annotation service: the machine side of the human-in-the-loop rounds.

A project directory (created by `toygen`) holds candidate feature
dumps, accumulated annotations, selection rounds, and ensemble
checkpoints. This service exposes them over JSON-over-HTTP under
/api/v1: a human reviews round candidates with prediction overlays,
accepts or skips them by realism (at most six accepted per round),
submits polygon annotations which the server rasterizes, and triggers
retraining; retraining then proposes the next round.

The service is the single writer of a served project directory: it
drops a lock file that mutating CLI subcommands check. Masks are
rasterized with even-odd fill at pixel centers after snapping vertices
to 1/256 pixel, entirely in integer arithmetic, so the same record
produces the same mask bytes on every platform.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .backbone import (
    GeneratedSample,
    LatentCode,
    ToyBackboneConfig,
    load_feature_dump,
    toy_generate,
    write_feature_dump,
)
from .errors import DataError
from .factory import read_mask_png
from .interpreter import (
    AnnotatedSample,
    InterpreterEnsemble,
    TrainConfig,
    load_ensemble,
    predict_segmentation,
    save_ensemble,
    train_ensemble,
)
from .metrics import miou
from .schema import LabelSchema
from .selection import PoolEntry, SelectionRound, mean_pixel_feature, propose_batch
from .uncertainty import score_image

API_PREFIX = "/api/v1"
LOCK_NAME = "lock"
SNAP = 256  # fixed-point vertex grid: 1/256 pixel

# test hook: worker sleeps this long before training (keeps the
# retrain-in-flight refusal deterministic to exercise)
TRAIN_DELAY_S = 0.0


# ------------------------------------------------------------ rasterization


def _snap(value: float) -> int:
    return int(round(float(value) * SNAP))


def rasterize(record: "AnnotationRecord", h: int, w: int, schema: LabelSchema) -> np.ndarray:
    """Even-odd polygon fill at pixel centers, later polygons overpaint.

    Vertices snap to 1/256 pixel; the parity test runs in exact integer
    arithmetic, so output is identical across platforms.
    """
    mask = np.zeros((h, w), dtype=np.uint16)
    cy = np.arange(h, dtype=np.int64) * SNAP + SNAP // 2  # pixel center y
    cx = np.arange(w, dtype=np.int64) * SNAP + SNAP // 2
    for label_name, vertices in record.polygons:
        label = schema.index_of(label_name)
        vx = np.array([_snap(x) for x, _ in vertices], dtype=np.int64)
        vy = np.array([_snap(y) for _, y in vertices], dtype=np.int64)
        parity = np.zeros((h, w), dtype=bool)
        n = len(vx)
        for i in range(n):
            x1, y1 = vx[i], vy[i]
            x2, y2 = vx[(i + 1) % n], vy[(i + 1) % n]
            straddle = (y1 > cy) != (y2 > cy)  # (h,)
            if not straddle.any():
                continue
            dy = y2 - y1
            # crossing test: cx < x1 + (cy - y1) * (x2 - x1) / dy, exact in ints
            lhs = (cx[None, :] - x1) * dy  # (1, w) * scalar
            rhs = (cy[:, None] - y1) * (x2 - x1)  # (h, 1)
            hit = (lhs < rhs) if dy > 0 else (lhs > rhs)
            parity ^= hit & straddle[:, None]
        mask[parity] = label
    return mask


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class AnnotationRecord:
    """One human annotation: polygons in z-order and/or keypoints."""

    sample_id: int
    annotator: str
    polygons: tuple[tuple[str, tuple[tuple[float, float], ...]], ...] = ()
    keypoints: tuple[tuple[str, float, float], ...] = ()
    created_at: str = ""
    mask_sha256: str = ""

    def validate(self, h: int, w: int, schema: LabelSchema) -> None:
        for label_name, vertices in self.polygons:
            schema.index_of(label_name)  # raises on unknown labels
            if len(vertices) < 3:
                raise DataError(
                    f"polygon for {label_name!r} has {len(vertices)} vertices, needs >= 3"
                )
            for x, y in vertices:
                if not (0 <= x <= w and 0 <= y <= h):
                    raise DataError(f"vertex ({x}, {y}) out of bounds for {w}x{h}")
        for name, x, y in self.keypoints:
            if not (0 <= x < w and 0 <= y < h):
                raise DataError(f"keypoint {name!r} at ({x}, {y}) out of bounds")

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "annotator": self.annotator,
            "polygons": [
                {"label": label, "vertices": [list(v) for v in vertices]}
                for label, vertices in self.polygons
            ],
            "keypoints": [list(k) for k in self.keypoints],
            "created_at": self.created_at,
            "mask_sha256": self.mask_sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            sample_id=int(d["sample_id"]),
            annotator=d.get("annotator", ""),
            polygons=tuple(
                (p["label"], tuple(tuple(v) for v in p["vertices"]))
                for p in d.get("polygons", ())
            ),
            keypoints=tuple(tuple(k) for k in d.get("keypoints", ())),
            created_at=d.get("created_at", ""),
            mask_sha256=d.get("mask_sha256", ""),
        )


# forward-only transitions; skipped and annotated are terminal
_TRANSITIONS = {
    "proposed": {"accepted", "skipped"},
    "accepted": {"annotated"},
    "annotated": set(),
    "skipped": set(),
}
VALID_STATUSES = tuple(_TRANSITIONS)


# ----------------------------------------------------------------- project


class Project:
    """State owner for one project directory (single writer)."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "project.json"
        if not meta_path.exists():
            raise DataError(f"no project.json in {self.root}; run toygen first")
        meta = json.loads(meta_path.read_text())
        self.backbone = ToyBackboneConfig.from_dict(meta["backbone"])
        self.schema = LabelSchema.from_dict(meta["schema"])
        self.train_params = meta.get("train", {})
        self.select_params = meta.get("select", {})
        (self.root / "annotations").mkdir(exist_ok=True)
        (self.root / "rounds").mkdir(exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)
        self._write_mutex = threading.Lock()

    # --- samples

    def sample_ids(self) -> list[int]:
        return sorted(int(p.stem) for p in (self.root / "samples").glob("*.fvd"))

    def sample_path(self, sample_id: int) -> Path:
        path = self.root / "samples" / f"{sample_id:06d}.fvd"
        if not path.exists():
            raise DataError(f"no sample {sample_id}")
        return path

    def load_sample(self, sample_id: int) -> GeneratedSample:
        return load_feature_dump(self.sample_path(sample_id))

    # --- annotations

    def annotation_path(self, sample_id: int) -> Path:
        return self.root / "annotations" / f"{sample_id:06d}.json"

    def mask_path(self, sample_id: int) -> Path:
        return self.root / "annotations" / f"{sample_id:06d}.png"

    def annotated_ids(self) -> list[int]:
        return sorted(
            int(p.stem) for p in (self.root / "annotations").glob("*.json")
        )

    def store_annotation(self, record: AnnotationRecord) -> tuple[np.ndarray, str]:
        sample = self.load_sample(record.sample_id)
        h = sample.features.target_height
        w = sample.features.target_width
        record.validate(h, w, self.schema)
        mask = rasterize(record, h, w, self.schema)
        digest = hashlib.sha256(mask.tobytes()).hexdigest()
        record = AnnotationRecord(
            sample_id=record.sample_id,
            annotator=record.annotator,
            polygons=record.polygons,
            keypoints=record.keypoints,
            created_at=datetime.now(timezone.utc).isoformat(),
            mask_sha256=digest,
        )
        with self._write_mutex:
            img = Image.fromarray(mask.astype(np.uint8), mode="P")
            flat = []
            for rgb in self.schema.palette:
                flat.extend(rgb)
            flat.extend([0] * (768 - len(flat)))
            img.putpalette(flat)
            img.save(self.mask_path(record.sample_id), format="PNG")
            with open(self.annotation_path(record.sample_id), "w") as f:
                json.dump(record.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
        return mask, digest

    # --- rounds

    def round_ids(self) -> list[int]:
        return sorted(int(p.stem.split("_")[1]) for p in (self.root / "rounds").glob("round_*.json"))

    def round_path(self, round_id: int) -> Path:
        return self.root / "rounds" / f"round_{round_id:03d}.json"

    def load_round(self, round_id: int) -> dict:
        path = self.round_path(round_id)
        if not path.exists():
            raise DataError(f"no round {round_id}")
        return json.loads(path.read_text())

    def save_round_doc(self, doc: dict) -> None:
        with self._write_mutex:
            with open(self.round_path(doc["id"]), "w") as f:
                json.dump(doc, f, indent=2, sort_keys=True)
                f.write("\n")

    def next_ids(self) -> tuple[int, int]:
        rounds = self.round_ids()
        next_round = (rounds[-1] + 1) if rounds else 0
        samples = self.sample_ids()
        next_sample = (samples[-1] + 1) if samples else 0
        return next_round, next_sample

    # --- checkpoints

    def checkpoint_paths(self) -> list[Path]:
        return sorted((self.root / "checkpoints").glob("ensemble_*.iec"))

    def latest_ensemble(self) -> Optional[InterpreterEnsemble]:
        paths = self.checkpoint_paths()
        return load_ensemble(paths[-1]) if paths else None

    def train_config(self) -> TrainConfig:
        defaults = {
            "steps": 150,
            "batch_pixels": 1024,
            "n_members": 10,
            "hidden": (32, 16),
            "learning_rate": 3e-3,
            "seed": 0,
        }
        defaults.update(self.train_params)
        if isinstance(defaults.get("hidden"), list):
            defaults["hidden"] = tuple(defaults["hidden"])
        return TrainConfig(**defaults)

    def annotated_samples(self) -> list[AnnotatedSample]:
        out = []
        for sid in self.annotated_ids():
            sample = self.load_sample(sid)
            mask = read_mask_png(self.mask_path(sid))
            out.append(AnnotatedSample(sample=sample, mask=mask))
        return out

    def metrics_history(self) -> list[dict]:
        path = self.root / "metrics.log"
        if not path.exists():
            return []
        out = []
        for line in path.read_text().strip().split("\n")[1:]:
            dataset, metric, value, std, tag = line.split("\t")
            out.append(
                {"dataset": dataset, "metric": metric, "value": float(value),
                 "std": float(std), "tag": tag}
            )
        return out

    def append_metric(self, dataset: str, metric: str, value: float, std: float, tag: str) -> None:
        path = self.root / "metrics.log"
        with self._write_mutex:
            if not path.exists():
                path.write_text("dataset\tmetric\tvalue\tstd\ttag\n")
            with open(path, "a") as f:
                f.write(f"{dataset}\t{metric}\t{value:.17g}\t{std:.17g}\t{tag}\n")


def acquire_lock(root) -> Path:
    path = Path(root) / LOCK_NAME
    path.write_text(str(os.getpid()))
    return path


def check_no_lock(root) -> None:
    path = Path(root) / LOCK_NAME
    if path.exists():
        raise DataError(
            f"project {root} is served (lock file present, pid {path.read_text().strip()}); "
            "stop the service before mutating it"
        )


def export_annotation_masks(project_dir, out_dir) -> int:
    """Re-rasterize every stored annotation record into out_dir."""
    project = Project(project_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for sid in project.annotated_ids():
        record = AnnotationRecord.from_dict(
            json.loads(project.annotation_path(sid).read_text())
        )
        sample = project.load_sample(sid)
        mask = rasterize(
            record, sample.features.target_height, sample.features.target_width, project.schema
        )
        img = Image.fromarray(mask.astype(np.uint8), mode="P")
        flat = []
        for rgb in project.schema.palette:
            flat.extend(rgb)
        flat.extend([0] * (768 - len(flat)))
        img.putpalette(flat)
        img.save(out / f"{sid:06d}.png", format="PNG")
        n += 1
    return n


# ------------------------------------------------------------------- jobs


class RetrainRunner:
    """Single background retrain job; refuses overlap."""

    def __init__(self, project: Project):
        self.project = project
        self._lock = threading.Lock()
        self.running = False
        self.last_error: Optional[str] = None
        self.progress = ""
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        with self._lock:
            if self.running:
                raise DataError("a retrain is already in flight")
            if not self.project.annotated_ids():
                raise DataError("retrain refused: zero annotated samples")
            self.running = True
            self.last_error = None
            self.progress = "starting"
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def join(self, timeout=None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def _run(self) -> None:
        try:
            if TRAIN_DELAY_S:
                time.sleep(TRAIN_DELAY_S)
            project = self.project
            self.progress = "training"
            annotated = project.annotated_samples()
            ensemble = train_ensemble(annotated, project.schema, project.train_config())
            idx = len(project.checkpoint_paths())
            ckpt = project.root / "checkpoints" / f"ensemble_{idx:03d}.iec"
            save_ensemble(ensemble, ckpt)
            self.progress = "evaluating"
            self._evaluate(ensemble, tag=ckpt.name)
            self.progress = "selecting"
            try:
                propose_next_round(project, ensemble)
            except DataError as exc:
                self.progress = f"round not proposed: {exc}"
            else:
                self.progress = "done"
        except Exception as exc:  # surfaced via status endpoint
            self.last_error = str(exc)
            self.progress = "failed"
        finally:
            self.running = False

    def _evaluate(self, ensemble: InterpreterEnsemble, tag: str) -> None:
        project = self.project
        cfg = project.backbone
        seeds = range(900_000, 900_000 + 5)
        scores = []
        for s in seeds:
            sample = toy_generate(cfg, LatentCode.from_seed(s, cfg.latent_dim))
            mask, _ = predict_segmentation(ensemble, sample.features)
            _, mean = miou(mask, sample.truth.mask, project.schema)
            scores.append(mean)
        project.append_metric(
            "heldout_toy", "miou", float(np.mean(scores)), float(np.std(scores)), tag
        )


def score_pool(project: Project, ensemble: InterpreterEnsemble) -> list[PoolEntry]:
    """Score every unannotated sample for banding and coreset selection."""
    annotated = set(project.annotated_ids())
    pool = []
    for sid in project.sample_ids():
        if sid in annotated:
            continue
        sample = project.load_sample(sid)
        _, dists = predict_segmentation(ensemble, sample.features)
        report = score_image(dists, sample_id=sid)
        pool.append(
            PoolEntry(
                sample_id=sid,
                embedding=mean_pixel_feature(sample.features),
                image_score=report.image_score,
                latent=sample.latent.z,
            )
        )
    return pool


def propose_next_round(
    project: Project, ensemble: InterpreterEnsemble, overrides: Optional[dict] = None
) -> dict:
    pool = score_pool(project, ensemble)
    params = {"k_percent": 10.0, "band_width": 10.0, "n_centers": 12}
    params.update(project.select_params)
    if overrides:
        unknown = set(overrides) - set(params)
        if unknown:
            raise DataError(f"unknown round parameters: {sorted(unknown)}")
        params.update(overrides)
    round_ = propose_batch(pool, **params)
    round_id, _ = project.next_ids()
    doc = {
        "id": round_id,
        "round": round_.to_dict(),
        "statuses": {str(sid): "proposed" for sid in round_.chosen_ids},
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    project.save_round_doc(doc)
    return doc


def bootstrap_round(project: Project) -> dict:
    """First round before any checkpoint: the mean-latent sample."""
    ids = project.sample_ids()
    if not ids:
        raise DataError("project has no samples")
    latents = [project.load_sample(sid).latent.z for sid in ids]
    mean_code = LatentCode.from_vector(np.mean(np.stack(latents), axis=0))
    sample = toy_generate(project.backbone, mean_code)
    round_id, new_sid = project.next_ids()
    write_feature_dump(sample, project.root / "samples" / f"{new_sid:06d}.fvd")
    round_ = SelectionRound(
        k_percent=0.0, band_width=100.0, n_centers=1,
        seed_id=new_sid, chosen_ids=(new_sid,),
    )
    doc = {
        "id": round_id,
        "round": round_.to_dict(),
        "statuses": {str(new_sid): "proposed"},
        "bootstrap": True,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    project.save_round_doc(doc)
    return doc


# -------------------------------------------------------------------- app


def _png_response(arr: np.ndarray, palette: Optional[LabelSchema] = None):
    from fastapi import Response

    if palette is not None:
        img = Image.fromarray(arr.astype(np.uint8), mode="P")
        flat = []
        for rgb in palette.palette:
            flat.extend(rgb)
        flat.extend([0] * (768 - len(flat)))
        img.putpalette(flat)
    else:
        img = Image.fromarray(arr)
    buf = BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def build_app(project_dir, with_lock: bool = True):
    """Construct the FastAPI app bound to one project directory."""
    from contextlib import asynccontextmanager

    from fastapi import FastAPI, HTTPException
    from fastapi.responses import JSONResponse

    project = Project(project_dir)
    runner = RetrainRunner(project)

    lifespan = None
    if with_lock:

        @asynccontextmanager
        async def lifespan(app):
            lock_path = acquire_lock(project.root)
            try:
                yield
            finally:
                if lock_path.exists():
                    lock_path.unlink()

    app = FastAPI(title="labelforge annotation service", version="1", lifespan=lifespan)
    app.state.project = project
    app.state.runner = runner

    def fail(status: int, reason: str):
        raise HTTPException(status_code=status, detail={"error": reason})

    @app.exception_handler(DataError)
    async def _data_error(request, exc):
        return JSONResponse(status_code=422, content={"detail": {"error": str(exc)}})

    @app.get(API_PREFIX + "/project")
    def get_project():
        return {
            "schema": project.schema.to_dict(),
            "backbone": project.backbone.to_dict(),
            "n_samples": len(project.sample_ids()),
            "n_annotated": len(project.annotated_ids()),
            "n_checkpoints": len(project.checkpoint_paths()),
        }

    @app.get(API_PREFIX + "/schema")
    def get_schema():
        return project.schema.to_dict()

    @app.get(API_PREFIX + "/samples")
    def list_samples():
        annotated = set(project.annotated_ids())
        return [
            {"id": sid, "annotated": sid in annotated} for sid in project.sample_ids()
        ]

    @app.get(API_PREFIX + "/rounds")
    def list_rounds():
        return [project.load_round(rid) for rid in project.round_ids()]

    @app.post(API_PREFIX + "/rounds", status_code=201)
    def create_round(overrides: Optional[dict] = None):
        # round parameters apply to this new round only, never retroactively
        ensemble = project.latest_ensemble()
        if ensemble is None:
            return bootstrap_round(project)
        return propose_next_round(project, ensemble, overrides)

    @app.get(API_PREFIX + "/rounds/{round_id}")
    def get_round(round_id: int):
        try:
            return project.load_round(round_id)
        except DataError as exc:
            fail(404, str(exc))

    def _transition(round_id: int, sample_id: int, new_status: str):
        doc = project.load_round(round_id)
        statuses = doc["statuses"]
        key = str(sample_id)
        if key not in statuses:
            fail(404, f"sample {sample_id} is not a candidate of round {round_id}")
        current = statuses[key]
        if new_status not in _TRANSITIONS.get(current, set()):
            fail(409, f"cannot move candidate from {current} to {new_status}")
        if new_status == "accepted":
            limit = doc["round"].get("confirm_limit", 6)
            accepted = sum(1 for s in statuses.values() if s in ("accepted", "annotated"))
            if accepted >= limit:
                fail(409, f"round already has {accepted} accepted candidates (limit {limit})")
            round_obj = SelectionRound.from_dict(doc["round"])
            doc["round"] = round_obj.confirm(sample_id).to_dict()
        statuses[key] = new_status
        project.save_round_doc(doc)
        return doc

    @app.post(API_PREFIX + "/rounds/{round_id}/candidates/{sample_id}/accept")
    def accept_candidate(round_id: int, sample_id: int):
        return _transition(round_id, sample_id, "accepted")

    @app.post(API_PREFIX + "/rounds/{round_id}/candidates/{sample_id}/skip")
    def skip_candidate(round_id: int, sample_id: int):
        return _transition(round_id, sample_id, "skipped")

    @app.get(API_PREFIX + "/candidates/{sample_id}/image.png")
    def candidate_image(sample_id: int):
        try:
            sample = project.load_sample(sample_id)
        except DataError as exc:
            fail(404, str(exc))
        return _png_response(sample.image)

    @app.get(API_PREFIX + "/candidates/{sample_id}/prediction.png")
    def candidate_prediction(sample_id: int):
        ensemble = project.latest_ensemble()
        if ensemble is None:
            fail(409, "no trained ensemble yet")
        try:
            sample = project.load_sample(sample_id)
        except DataError as exc:
            fail(404, str(exc))
        mask, _ = predict_segmentation(ensemble, sample.features)
        return _png_response(mask, palette=project.schema)

    @app.get(API_PREFIX + "/candidates/{sample_id}/uncertainty.png")
    def candidate_uncertainty(sample_id: int):
        ensemble = project.latest_ensemble()
        if ensemble is None:
            fail(409, "no trained ensemble yet")
        try:
            sample = project.load_sample(sample_id)
        except DataError as exc:
            fail(404, str(exc))
        _, dists = predict_segmentation(ensemble, sample.features)
        report = score_image(dists, sample_id=sample_id)
        peak = np.log(max(ensemble.n_members, 2))
        gray = np.clip(report.pixel_js / peak * 255.0, 0, 255).astype(np.uint8)
        return _png_response(gray)

    @app.get(API_PREFIX + "/annotations/{sample_id}/mask.png")
    def annotation_mask(sample_id: int):
        path = project.mask_path(sample_id)
        if not path.exists():
            fail(404, f"sample {sample_id} has no annotation")
        return _png_response(np.asarray(Image.open(path)), palette=project.schema)

    @app.post(API_PREFIX + "/annotations", status_code=201)
    def submit_annotation(payload: dict):
        record = AnnotationRecord.from_dict(payload)
        # a round candidate must be accepted before annotation (the
        # accept-6 limit would be meaningless otherwise)
        candidate_rounds = []
        for rid in project.round_ids():
            doc = project.load_round(rid)
            status = doc["statuses"].get(str(record.sample_id))
            if status in ("proposed", "skipped"):
                fail(409, f"candidate of round {rid} is {status}; accept it before annotating")
            if status == "accepted":
                candidate_rounds.append(doc)
        mask, digest = project.store_annotation(record)
        for doc in candidate_rounds:
            doc["statuses"][str(record.sample_id)] = "annotated"
            project.save_round_doc(doc)
        labels, counts = np.unique(mask, return_counts=True)
        return {
            "sample_id": record.sample_id,
            "mask_sha256": digest,
            "mask_url": f"{API_PREFIX}/annotations/{record.sample_id}/mask.png",
            "pixels_per_label": {
                project.schema.names[int(l)]: int(c) for l, c in zip(labels, counts)
            },
        }

    @app.post(API_PREFIX + "/retrain", status_code=202)
    def retrain():
        try:
            runner.start()
        except DataError as exc:
            fail(409, str(exc))
        return {"status": "started"}

    @app.get(API_PREFIX + "/retrain/status")
    def retrain_status():
        return {
            "running": runner.running,
            "progress": runner.progress,
            "last_error": runner.last_error,
            "checkpoints": [p.name for p in project.checkpoint_paths()],
        }

    @app.get(API_PREFIX + "/metrics")
    def metrics():
        return project.metrics_history()

    return app
