import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from labelforge import service
from labelforge.backbone import LatentCode, toy_generate, write_feature_dump
from labelforge.errors import DataError
from labelforge.schema import LabelSchema
from labelforge.service import (
    AnnotationRecord,
    Project,
    build_app,
    check_no_lock,
    export_annotation_masks,
    rasterize,
)


def schema_ab():
    return LabelSchema(
        names=("unlabeled", "A", "B"),
        palette=((0, 0, 0), (255, 0, 0), (0, 255, 0)),
    )


def record(polygons, sample_id=0):
    return AnnotationRecord(sample_id=sample_id, annotator="t", polygons=tuple(polygons))


def oracle_even_odd(vertices, px, py):
    """Exact even-odd point-in-polygon at the pixel center, via Fractions,
    on vertices snapped to 1/256 like the rasterizer contract says."""
    vs = [(Fraction(round(x * 256), 256), Fraction(round(y * 256), 256)) for x, y in vertices]
    cx, cy = Fraction(2 * px + 1, 2), Fraction(2 * py + 1, 2)
    inside = False
    n = len(vs)
    for i in range(n):
        x1, y1 = vs[i]
        x2, y2 = vs[(i + 1) % n]
        if (y1 > cy) != (y2 > cy):
            x_int = x1 + (cy - y1) * (x2 - x1) / (y2 - y1)
            if cx < x_int:
                inside = not inside
    return inside


class TestRasterize:
    def test_square_covers_16_pixels(self):
        square = [(2, 2), (6, 2), (6, 6), (2, 6)]
        mask = rasterize(record([("A", square)]), 16, 16, schema_ab())
        assert int((mask == 1).sum()) == 16
        ys, xs = np.nonzero(mask == 1)
        assert xs.min() == 2 and xs.max() == 5 and ys.min() == 2 and ys.max() == 5

    def test_empty_record_is_all_background(self):
        mask = rasterize(record([]), 8, 8, schema_ab())
        assert np.all(mask == 0)

    def test_z_order_later_polygon_wins(self):
        a = [(1, 1), (6, 1), (6, 6), (1, 6)]
        b = [(4, 4), (9, 4), (9, 9), (4, 9)]
        mask = rasterize(record([("A", a), ("B", b)]), 12, 12, schema_ab())
        assert mask[5, 5] == 2  # intersection labeled B
        assert mask[2, 2] == 1
        assert mask[8, 8] == 2

    def test_matches_exact_even_odd_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(40):
            n_vertices = int(rng.integers(3, 13))
            angles = np.sort(rng.uniform(0, 2 * math.pi, n_vertices))
            radii = rng.uniform(3, 14, n_vertices)
            vertices = [
                (16 + r * math.cos(a), 16 + r * math.sin(a))
                for r, a in zip(radii, angles)
            ]
            vertices = [(min(max(x, 0), 32), min(max(y, 0), 32)) for x, y in vertices]
            mask = rasterize(record([("A", vertices)]), 32, 32, schema_ab())
            for py in range(32):
                for px in range(32):
                    want = 1 if oracle_even_odd(vertices, px, py) else 0
                    assert mask[py, px] == want, (trial, px, py)

    def test_deterministic(self):
        vertices = [(1.13, 2.77), (9.5, 1.02), (7.3, 9.9), (2.2, 8.1)]
        a = rasterize(record([("B", vertices)]), 16, 16, schema_ab())
        b = rasterize(record([("B", vertices)]), 16, 16, schema_ab())
        assert np.array_equal(a, b)

    def test_out_of_schema_label_rejected(self):
        rec = record([("nope", [(0, 0), (4, 0), (4, 4)])])
        with pytest.raises(DataError):
            rasterize(rec, 8, 8, schema_ab())

    def test_degenerate_polygon_rejected(self):
        rec = record([("A", [(0, 0), (4, 4)])])
        with pytest.raises(DataError):
            rec.validate(8, 8, schema_ab())

    def test_out_of_bounds_vertex_rejected(self):
        rec = record([("A", [(0, 0), (9, 0), (9, 9)])])
        with pytest.raises(DataError):
            rec.validate(8, 8, schema_ab())


@pytest.fixture()
def project_dir(tmp_path, tiny_config):
    root = tmp_path / "project"
    (root / "samples").mkdir(parents=True)
    for seed in range(12):
        sample = toy_generate(tiny_config, LatentCode.from_seed(seed, tiny_config.latent_dim))
        write_feature_dump(sample, root / "samples" / f"{seed:06d}.fvd")
    meta = {
        "format": "labelforge-project",
        "version": 1,
        "backbone": tiny_config.to_dict(),
        "backbone_hash": tiny_config.content_hash(),
        "schema": tiny_config.label_schema().to_dict(),
        "train": {
            "steps": 40, "batch_pixels": 256, "n_members": 2,
            "hidden": [16, 16], "learning_rate": 3e-3, "seed": 1,
        },
        "select": {"k_percent": 10.0, "band_width": 60.0, "n_centers": 3},
    }
    (root / "project.json").write_text(json.dumps(meta, indent=2))
    return root


def big_square(size=16, margin=3, label="body"):
    lo, hi = margin, size - margin
    return {"label": label, "vertices": [[lo, lo], [hi, lo], [hi, hi], [lo, hi]]}


def wait_retrain(client, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get("/api/v1/retrain/status").json()
        if not status["running"]:
            return status
        time.sleep(0.05)
    raise TimeoutError("retrain did not finish")


class TestServiceApi:
    def test_project_and_schema_endpoints(self, project_dir, tiny_config):
        with TestClient(build_app(project_dir)) as client:
            proj = client.get("/api/v1/project").json()
            assert proj["n_samples"] == 12
            assert proj["n_annotated"] == 0
            schema = client.get("/api/v1/schema").json()
            assert schema["names"] == list(tiny_config.label_schema().names)
            samples = client.get("/api/v1/samples").json()
            assert len(samples) == 12 and not samples[0]["annotated"]

    def test_bootstrap_round_is_mean_latent_sample(self, project_dir, tiny_config):
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            assert doc["bootstrap"] is True
            assert len(doc["round"]["chosen_ids"]) == 1
            new_id = doc["round"]["chosen_ids"][0]
            assert new_id == 12  # appended after seeds 0..11
            img = client.get(f"/api/v1/candidates/{new_id}/image.png")
            assert img.status_code == 200
            assert img.headers["content-type"] == "image/png"
        sample = Project(project_dir).load_sample(12)
        latents = [
            Project(project_dir).load_sample(s).latent.z for s in range(12)
        ]
        assert np.allclose(sample.latent.z, np.mean(np.stack(latents), axis=0))

    def test_annotation_flow_square_16_pixels(self, project_dir):
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            sid = doc["round"]["chosen_ids"][0]
            rid = doc["id"]
            # must accept before annotating
            refused = client.post(
                "/api/v1/annotations",
                json={"sample_id": sid, "annotator": "cv", "polygons": [
                    {"label": "body", "vertices": [[2, 2], [6, 2], [6, 6], [2, 6]]}
                ]},
            )
            assert refused.status_code == 409
            client.post(f"/api/v1/rounds/{rid}/candidates/{sid}/accept")
            resp = client.post(
                "/api/v1/annotations",
                json={"sample_id": sid, "annotator": "cv", "polygons": [
                    {"label": "body", "vertices": [[2, 2], [6, 2], [6, 6], [2, 6]]}
                ]},
            )
            assert resp.status_code == 201
            body = resp.json()
            assert body["pixels_per_label"]["body"] == 16
            mask = client.get(f"/api/v1/annotations/{sid}/mask.png")
            assert mask.status_code == 200
            round_doc = client.get(f"/api/v1/rounds/{rid}").json()
            assert round_doc["statuses"][str(sid)] == "annotated"

    def test_accept_limit_six(self, project_dir):
        project = Project(project_dir)
        ids = project.sample_ids()[:8]
        doc = {
            "id": 0,
            "round": {
                "k_percent": 0.0, "band_width": 100.0, "n_centers": 8,
                "seed_id": ids[0], "chosen_ids": ids, "human_confirmed": [],
                "confirm_limit": 6, "embedding_kind": "mean_pixel_feature",
            },
            "statuses": {str(s): "proposed" for s in ids},
            "created_at": "t",
        }
        project.save_round_doc(doc)
        with TestClient(build_app(project_dir)) as client:
            for sid in ids[:6]:
                r = client.post(f"/api/v1/rounds/0/candidates/{sid}/accept")
                assert r.status_code == 200
            seventh = client.post(f"/api/v1/rounds/0/candidates/{ids[6]}/accept")
            assert seventh.status_code == 409
            assert "limit" in seventh.json()["detail"]["error"]

    def test_forward_only_transitions(self, project_dir):
        project = Project(project_dir)
        ids = project.sample_ids()[:2]
        doc = {
            "id": 0,
            "round": {
                "k_percent": 0.0, "band_width": 100.0, "n_centers": 2,
                "seed_id": ids[0], "chosen_ids": ids, "human_confirmed": [],
                "confirm_limit": 6, "embedding_kind": "mean_pixel_feature",
            },
            "statuses": {str(s): "proposed" for s in ids},
            "created_at": "t",
        }
        project.save_round_doc(doc)
        with TestClient(build_app(project_dir)) as client:
            client.post(f"/api/v1/rounds/0/candidates/{ids[0]}/accept")
            assert client.post(f"/api/v1/rounds/0/candidates/{ids[0]}/skip").status_code == 409
            client.post(f"/api/v1/rounds/0/candidates/{ids[1]}/skip")
            assert client.post(f"/api/v1/rounds/0/candidates/{ids[1]}/accept").status_code == 409
            refused = client.post(
                "/api/v1/annotations",
                json={"sample_id": ids[1], "annotator": "t", "polygons": [big_square()]},
            )
            assert refused.status_code == 409

    def test_retrain_refused_without_annotations(self, project_dir):
        with TestClient(build_app(project_dir)) as client:
            r = client.post("/api/v1/retrain")
            assert r.status_code == 409
            assert "zero annotated" in r.json()["detail"]["error"]

    def test_full_al_round_flow(self, project_dir):
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            sid, rid = doc["round"]["chosen_ids"][0], doc["id"]
            client.post(f"/api/v1/rounds/{rid}/candidates/{sid}/accept")
            client.post(
                "/api/v1/annotations",
                json={"sample_id": sid, "annotator": "cv", "polygons": [big_square()]},
            )
            started = client.post("/api/v1/retrain")
            assert started.status_code == 202
            status = wait_retrain(client)
            assert status["last_error"] is None
            assert status["checkpoints"] == ["ensemble_000.iec"]
            # prediction overlay now available
            pred = client.get(f"/api/v1/candidates/{sid}/prediction.png")
            assert pred.status_code == 200
            unc = client.get(f"/api/v1/candidates/{sid}/uncertainty.png")
            assert unc.status_code == 200
            # a fresh round was proposed over the unannotated pool
            rounds = client.get("/api/v1/rounds").json()
            assert len(rounds) == 2
            assert len(rounds[1]["round"]["chosen_ids"]) == 3
            assert sid not in rounds[1]["round"]["chosen_ids"]
            metrics = client.get("/api/v1/metrics").json()
            assert metrics and metrics[0]["metric"] == "miou"

    def test_retrain_in_flight_refusal(self, project_dir, monkeypatch):
        monkeypatch.setattr(service, "TRAIN_DELAY_S", 0.8)
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            sid, rid = doc["round"]["chosen_ids"][0], doc["id"]
            client.post(f"/api/v1/rounds/{rid}/candidates/{sid}/accept")
            client.post(
                "/api/v1/annotations",
                json={"sample_id": sid, "annotator": "cv", "polygons": [big_square()]},
            )
            assert client.post("/api/v1/retrain").status_code == 202
            second = client.post("/api/v1/retrain")
            assert second.status_code == 409
            assert "in flight" in second.json()["detail"]["error"]
            wait_retrain(client)

    def test_prediction_overlay_requires_checkpoint(self, project_dir):
        with TestClient(build_app(project_dir)) as client:
            r = client.get("/api/v1/candidates/0/prediction.png")
            assert r.status_code == 409

    def test_state_survives_restart_byte_identically(self, project_dir):
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            sid, rid = doc["round"]["chosen_ids"][0], doc["id"]
            client.post(f"/api/v1/rounds/{rid}/candidates/{sid}/accept")
            before_api = client.get(f"/api/v1/rounds/{rid}").json()
        round_file = project_dir / "rounds" / f"round_{rid:03d}.json"
        before_bytes = round_file.read_bytes()
        with TestClient(build_app(project_dir)) as client:
            after_api = client.get(f"/api/v1/rounds/{rid}").json()
        assert round_file.read_bytes() == before_bytes
        assert after_api == before_api

    def test_lock_file_lifecycle(self, project_dir):
        with TestClient(build_app(project_dir)):
            assert (project_dir / "lock").exists()
            with pytest.raises(DataError):
                check_no_lock(project_dir)
        assert not (project_dir / "lock").exists()
        check_no_lock(project_dir)

    def test_documented_api_paths_exist(self, project_dir):
        spec = json.loads(Path("docs/api_v1.json").read_text())
        app = build_app(project_dir, with_lock=False)
        routes = {(m, r.path) for r in app.routes for m in getattr(r, "methods", ())}
        for ep in spec["endpoints"]:
            path = ep["path"].replace("{round_id}", "{round_id}").replace("{sample_id}", "{sample_id}")
            assert (ep["method"], path) in routes, ep


class TestExport:
    def test_export_rerasterizes_records(self, project_dir, tmp_path):
        with TestClient(build_app(project_dir)) as client:
            doc = client.post("/api/v1/rounds").json()
            sid, rid = doc["round"]["chosen_ids"][0], doc["id"]
            client.post(f"/api/v1/rounds/{rid}/candidates/{sid}/accept")
            client.post(
                "/api/v1/annotations",
                json={"sample_id": sid, "annotator": "cv", "polygons": [big_square()]},
            )
        out = tmp_path / "masks"
        n = export_annotation_masks(project_dir, out)
        assert n == 1
        from labelforge.factory import read_mask_png

        exported = read_mask_png(out / f"{sid:06d}.png")
        stored = read_mask_png(project_dir / "annotations" / f"{sid:06d}.png")
        assert np.array_equal(exported, stored)
