"""Command-line surface: one subcommand per pipeline operation.

Flags beat config-file values, which beat defaults. The config file is
versioned JSON with one section per subcommand; unknown sections or
keys are errors, not warnings. Every run writes a provenance record
(effective config plus content hashes of its inputs) beside its
artifacts, and exits with a family-specific code:

    0 ok, 2 usage, 3 config, 4 data, 5 numeric divergence.

LABELFORGE_WORKERS overrides the worker count of any subcommand.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import factory
from .backbone import LatentCode, ToyBackboneConfig, load_feature_dump, toy_generate, write_feature_dump
from .errors import ConfigError, DataError, LabelForgeError
from .interpreter import (
    AnnotatedSample,
    TrainConfig,
    load_ensemble,
    save_ensemble,
    train_ensemble,
)
from .metrics import miou
from .reporting import render_iou_bars, render_loss_curves, write_metric_report
from .schema import LabelSchema
from .selection import PoolEntry, propose_batch, save_round
from .uncertainty import UncertaintyReport, export_reports, filter_by_uncertainty

CONFIG_VERSION = 1

# parameter tables: name -> (type, default). None defaults mean "required".
_BACKBONE_PARAMS = {
    "levels": (int, 4),
    "base": (int, 8),
    "parts": (int, 3),
    "channels": (str, ""),  # comma-separated per-level counts, empty = derived
    "latent_dim": (int, 64),
    "corruption": (float, 0.0),
    "corruption_strength": (float, 0.9),
    "style_seed": (int, 20240),
}

PARAMS: dict[str, dict[str, tuple]] = {
    "toygen": {
        "out": (str, None),
        "count": (int, 8),
        "seed": (int, 0),
        **_BACKBONE_PARAMS,
    },
    "annotate-export": {
        "project": (str, None),
        "out": (str, None),
    },
    "train": {
        "samples": (str, None),
        "out": (str, None),
        "annotations": (str, ""),
        "task": (str, "segmentation"),
        "n": (int, 10),
        "steps": (int, 2000),
        "batch": (int, 2048),
        "lr": (float, 1e-3),
        "hidden": (str, "256,128"),
        "seed": (int, 0),
        "sigma_frac": (float, 0.02),
        "mode": (str, "bilinear"),
    },
    "synthesize": {
        "ensemble": (str, None),
        "out": (str, None),
        "count": (int, 10000),
        "filter": (float, 0.10),
        "seed": (int, 0),
        "workers": (int, 1),
        **_BACKBONE_PARAMS,
    },
    "filter": {
        "dataset": (str, None),
        "ratio": (float, 0.10),
    },
    "select": {
        "dataset": (str, None),
        "out": (str, ""),
        "k": (float, 10.0),
        "band": (float, 10.0),
        "centers": (int, 12),
    },
    "eval": {
        "pred": (str, None),
        "truth": (str, None),
        "schema": (str, None),
        "out": (str, None),
        "task": (str, "segmentation"),
        "dataset_name": (str, "dataset"),
        "ignore_background": (bool, False),
        "pck_thresholds": (str, "5,10,15,25"),
    },
    "validate": {
        "dataset": (str, None),
    },
    "serve": {
        "project": (str, None),
        "host": (str, "127.0.0.1"),
        "port": (int, 8321),
    },
}


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def load_config_file(path, subcommand: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must be a JSON object")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    for section in doc:
        if section != "version" and section not in PARAMS:
            raise ConfigError(f"unknown config section {section!r}")
    section = doc.get(subcommand, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {subcommand!r} must be an object")
    table = PARAMS[subcommand]
    for key in section:
        if key not in table:
            raise ConfigError(f"unknown config key {subcommand}.{key}")
    return section


def effective_config(subcommand: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags."""
    table = PARAMS[subcommand]
    merged = {k: spec[1] for k, spec in table.items()}
    if args.config:
        section = load_config_file(args.config, subcommand)
        for k, v in section.items():
            typ = table[k][0]
            try:
                merged[k] = typ(v) if not isinstance(v, bool) or typ is bool else v
            except (TypeError, ValueError):
                raise ConfigError(f"config key {subcommand}.{k} is not a {typ.__name__}")
    for k in table:
        flag_val = getattr(args, k.replace("-", "_"), None)
        if flag_val is not None:
            merged[k] = flag_val
    missing = [k for k, v in merged.items() if v is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    if "workers" in merged and os.environ.get("LABELFORGE_WORKERS"):
        merged["workers"] = int(os.environ["LABELFORGE_WORKERS"])
    return merged


def write_provenance(out_dir, subcommand: str, cfg: dict, inputs: dict[str, str]) -> None:
    doc = {
        "command": subcommand,
        "effective_config": cfg,
        "input_hashes": inputs,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "provenance.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _backbone_from_cfg(cfg: dict) -> ToyBackboneConfig:
    channels = None
    if cfg["channels"]:
        channels = tuple(int(c) for c in str(cfg["channels"]).split(","))
    return ToyBackboneConfig(
        num_levels=cfg["levels"],
        base_resolution=cfg["base"],
        channels_per_level=channels,
        latent_dim=cfg["latent_dim"],
        num_parts=cfg["parts"],
        corruption_fraction=cfg["corruption"],
        corruption_strength=cfg["corruption_strength"],
        style_seed=cfg["style_seed"],
    )


# ------------------------------------------------------------- subcommands


def cmd_toygen(cfg: dict) -> int:
    from .service import check_no_lock

    backbone = _backbone_from_cfg(cfg)
    out = Path(cfg["out"])
    if out.exists():
        check_no_lock(out)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    for i in range(cfg["count"]):
        seed = cfg["seed"] + i
        sample = toy_generate(backbone, LatentCode.from_seed(seed, backbone.latent_dim))
        write_feature_dump(sample, samples_dir / f"{seed:06d}.fvd")
    project = {
        "format": "labelforge-project",
        "version": 1,
        "backbone": backbone.to_dict(),
        "backbone_hash": backbone.content_hash(),
        "schema": backbone.label_schema().to_dict(),
    }
    with open(out / "project.json", "w") as f:
        json.dump(project, f, indent=2, sort_keys=True)
        f.write("\n")
    write_provenance(out, "toygen", cfg, {"backbone_config": backbone.content_hash()})
    print(f"wrote {cfg['count']} feature dumps to {samples_dir}")
    return 0


def _load_annotated(samples_dir: str, annotations_dir: str, task: str) -> list[AnnotatedSample]:
    paths = sorted(Path(samples_dir).glob("*.fvd"))
    if not paths:
        raise DataError(f"no .fvd dumps in {samples_dir}")
    out = []
    for p in paths:
        sample = load_feature_dump(p)
        if annotations_dir:
            mask_path = Path(annotations_dir) / (p.stem + ".png")
            if not mask_path.exists():
                raise DataError(f"no annotation {mask_path} for dump {p.name}")
            out.append(AnnotatedSample(sample=sample, mask=factory.read_mask_png(mask_path)))
        else:
            out.append(AnnotatedSample.from_truth(sample, task=task))
    return out


def cmd_train(cfg: dict) -> int:
    from .service import check_no_lock

    project_dir = Path(cfg["samples"]).parent
    if Path(cfg["out"]).resolve().is_relative_to(project_dir.resolve()):
        check_no_lock(project_dir)
    annotated = _load_annotated(cfg["samples"], cfg["annotations"], cfg["task"])
    project_path = Path(cfg["samples"]).parent / "project.json"
    if project_path.exists():
        project = json.loads(project_path.read_text())
        backbone = ToyBackboneConfig.from_dict(project["backbone"])
        schema = (
            backbone.label_schema() if cfg["task"] == "segmentation" else backbone.keypoint_schema()
        )
    else:
        raise DataError(f"no project.json next to {cfg['samples']}")
    train_config = TrainConfig(
        steps=cfg["steps"],
        batch_pixels=cfg["batch"],
        learning_rate=cfg["lr"],
        seed=cfg["seed"],
        n_members=cfg["n"],
        hidden=tuple(int(h) for h in str(cfg["hidden"]).split(",")),
        heat_sigma_frac=cfg["sigma_frac"],
        upsample_mode=cfg["mode"],
    )
    ensemble = train_ensemble(annotated, schema, train_config)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ensemble(ensemble, out)
    render_loss_curves(ensemble.loss_curves, out.with_suffix(".loss.png"))
    checkpoint_hash = _sha256_file(out)
    write_provenance(
        out.parent, "train", cfg,
        {"checkpoint": checkpoint_hash, "n_samples": str(len(annotated))},
    )
    print(f"checkpoint {out} sha256={checkpoint_hash}")
    return 0


def cmd_synthesize(cfg: dict) -> int:
    backbone = _backbone_from_cfg(cfg)
    ensemble = load_ensemble(cfg["ensemble"])
    manifest = factory.synthesize(
        backbone,
        ensemble,
        count=cfg["count"],
        filter_ratio=cfg["filter"],
        seed=cfg["seed"],
        out_dir=cfg["out"],
        workers=cfg["workers"],
    )
    write_provenance(
        cfg["out"], "synthesize", cfg,
        {
            "backbone_config": backbone.content_hash(),
            "ensemble": _sha256_file(cfg["ensemble"]),
        },
    )
    kept = len(manifest.kept_ids)
    print(f"synthesized {len(manifest.pairs)} pairs, kept {kept}, "
          f"dropped {len(manifest.pairs) - kept}")
    return 0


def cmd_filter(cfg: dict) -> int:
    manifest = factory.load_manifest(cfg["dataset"])
    doc = manifest.doc
    reports = [
        UncertaintyReport(p["id"], np.array([[p["image_score"]]]), p["image_score"])
        for p in doc["pairs"]
    ]
    kept, dropped = filter_by_uncertainty(reports, cfg["ratio"])
    kept_set = set(kept)
    for p in doc["pairs"]:
        p["kept"] = p["id"] in kept_set
    doc["filter_ratio"] = cfg["ratio"]
    factory._write_doc(doc, Path(cfg["dataset"]) / factory.MANIFEST_NAME)
    (Path(cfg["dataset"]) / "uncertainty.log").write_text(export_reports(reports, kept))
    from .reporting import render_uncertainty_histogram

    render_uncertainty_histogram(
        [p["image_score"] for p in doc["pairs"]], kept_set,
        [p["id"] for p in doc["pairs"]],
        Path(cfg["dataset"]) / "uncertainty_hist.png",
    )
    write_provenance(cfg["dataset"], "filter", cfg, {"manifest": "refiltered"})
    print(f"kept {len(kept)}, dropped {len(dropped)} at ratio {cfg['ratio']}")
    return 0


def cmd_select(cfg: dict) -> int:
    manifest = factory.load_manifest(cfg["dataset"])
    emb_path = Path(cfg["dataset"]) / "embeddings.npy"
    if not emb_path.exists():
        raise DataError(f"no embeddings.npy in {cfg['dataset']}")
    embeddings = np.load(emb_path)
    pool = []
    for p in manifest.pairs:
        z = LatentCode.from_seed(
            p["seed"], manifest.doc["backbone"]["config"]["latent_dim"]
        ).z
        pool.append(
            PoolEntry(
                sample_id=p["id"],
                embedding=embeddings[p["id"]].astype(np.float64),
                image_score=p["image_score"],
                latent=z,
            )
        )
    round_ = propose_batch(
        pool, k_percent=cfg["k"], band_width=cfg["band"], n_centers=cfg["centers"]
    )
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["dataset"]) / "round.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_round(round_, out)
    write_provenance(out.parent, "select", cfg, {"dataset": str(cfg["dataset"])})
    print(f"round with {len(round_.chosen_ids)} candidates -> {out}")
    return 0


def _read_keypoint_record(path) -> dict[str, tuple[float, float]]:
    out = {}
    lines = Path(path).read_text().strip().split("\n")
    for line in lines[1:]:  # header: name x y peak
        name, x, y = line.split("\t")[:3]
        out[name] = (float(x), float(y))
    return out


def _eval_keypoints(cfg: dict) -> int:
    from .metrics import PckConfig, pck
    from .reporting import render_pck_curve

    schema = LabelSchema.from_dict(json.loads(Path(cfg["schema"]).read_text()))
    pred_dir, truth_dir = Path(cfg["pred"]), Path(cfg["truth"])
    preds = sorted(pred_dir.glob("*.txt"))
    if not preds:
        raise DataError(f"no keypoint records in {pred_dir}")
    thresholds = tuple(float(t) for t in str(cfg["pck_thresholds"]).split(","))
    config = PckConfig(thresholds=thresholds)
    size = json.loads(Path(cfg["schema"]).read_text()).get("image_size", 64)
    per_threshold: dict[float, list[float]] = {t: [] for t in thresholds}
    for p in preds:
        t = truth_dir / p.name
        if not t.exists():
            raise DataError(f"no ground-truth record for {p.name}")
        result = pck(_read_keypoint_record(p), _read_keypoint_record(t), (size, size), config)
        for th, v in result.items():
            per_threshold[th].append(v)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = []
    curve = {}
    for th in thresholds:
        vals = per_threshold[th]
        curve[th] = float(np.mean(vals))
        records.append({
            "dataset": cfg["dataset_name"], "metric": f"pck@{th:g}",
            "value": curve[th], "std": float(np.std(vals)),
        })
    write_metric_report(out / "metrics.log", records)
    render_pck_curve(curve, out / "pck_curve.png")
    write_provenance(out, "eval", cfg, {"n_images": str(len(preds))})
    print(f"pck over {len(preds)} records: " + ", ".join(f"{t:g}%: {v:.1f}" for t, v in curve.items()))
    return 0


def cmd_eval(cfg: dict) -> int:
    if cfg["task"] == "keypoints":
        return _eval_keypoints(cfg)
    schema = LabelSchema.from_dict(json.loads(Path(cfg["schema"]).read_text()))
    pred_dir, truth_dir = Path(cfg["pred"]), Path(cfg["truth"])
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise DataError(f"no predicted masks in {pred_dir}")
    per_image = []
    label_accum: dict[str, list[float]] = {}
    for p in preds:
        t = truth_dir / p.name
        if not t.exists():
            raise DataError(f"no ground-truth mask for {p.name}")
        per_label, mean = miou(
            factory.read_mask_png(p), factory.read_mask_png(t), schema,
            ignore_background=cfg["ignore_background"],
        )
        per_image.append(mean)
        for name, v in per_label.items():
            label_accum.setdefault(name, []).append(v)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = [
        {
            "dataset": cfg["dataset_name"],
            "metric": "miou",
            "value": float(np.mean(per_image)),
            "std": float(np.std(per_image)),
        }
    ]
    label_means = {n: float(np.mean(v)) for n, v in sorted(label_accum.items())}
    for name, v in label_means.items():
        records.append({"dataset": cfg["dataset_name"], "metric": f"iou.{name}", "value": v})
    write_metric_report(out / "metrics.log", records)
    render_iou_bars(label_means, out / "iou_bars.png")
    write_provenance(out, "eval", cfg, {"n_images": str(len(per_image))})
    print(f"miou {np.mean(per_image):.4f} +- {np.std(per_image):.4f} over {len(per_image)} images")
    return 0


def cmd_validate(cfg: dict) -> int:
    violations = factory.validate_manifest(cfg["dataset"])
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        raise DataError(f"{len(violations)} manifest violation(s)")
    print("manifest ok")
    return 0


def cmd_annotate_export(cfg: dict) -> int:
    from .service import export_annotation_masks

    n = export_annotation_masks(cfg["project"], cfg["out"])
    write_provenance(cfg["out"], "annotate-export", cfg, {"project": str(cfg["project"])})
    print(f"exported {n} masks to {cfg['out']}")
    return 0


def cmd_serve(cfg: dict) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(cfg["project"])
    uvicorn.run(app, host=cfg["host"], port=cfg["port"], log_level="warning")
    return 0


_HANDLERS = {
    "toygen": cmd_toygen,
    "annotate-export": cmd_annotate_export,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "filter": cmd_filter,
    "select": cmd_select,
    "eval": cmd_eval,
    "validate": cmd_validate,
    "serve": cmd_serve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelforge",
        description="few-shot labeled-dataset factory on generative-backbone features",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, table in PARAMS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        for key, (typ, default) in table.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_const", const=True, default=None)
            else:
                p.add_argument(flag, type=typ, default=None, help=f"default: {default}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg = effective_config(args.subcommand, args)
        return _HANDLERS[args.subcommand](cfg)
    except LabelForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
