"""Restartable pipeline stages: tile, bags, train, eval, report.

Layout under ``cfg.out_dir``::

    tiles/   <slide>.patches, manifest.csv, stage.json
    bags/    split.json, clinical.json, correlation.csv, manifest.jsonl, stage.json
    train/   checkpoint.bin, log.csv, stage.json
    eval/    metrics.csv, roc_<cohort>[_<class>].csv, predictions.csv, stage.json

Every stage writes ``stage.json`` with its cumulative config hash and checks
the hash of the stage before it. JSON and JSON-lines outputs carry the hash
inline; the CSV tables have fixed headers, so their hash lives in the
sidecar of the same directory.
"""

from __future__ import annotations

import csv
import glob
import json
import logging
import os

import numpy as np

from . import clinical as clin
from .bags import CohortSplit, materialize, plan_bags, separation_violations, split_cohorts, write_bag_manifest, read_bag_manifest
from .config import RunConfig
from .errors import ConfigHashMismatch, DimensionError, MissingInputError
from .evaluate import predict_slides, read_metrics_csv, report, roc_csv, roc_curve, slide_reports
from .imagery import Patch, channel_stats, load_image, load_mask, slide_id_from_path, tile_slide, write_manifest
from .milnet import (ModelConfig, _read_framed, _write_framed, init_model, load_checkpoint, read_features,
                     save_checkpoint)
from .train import train_loop, write_log

log = logging.getLogger(__name__)

PATCHES_SCHEMA = "alnmil.patches/1"
IMAGE_EXTS = (".png", ".tif", ".tiff")


def stage_dir(cfg: RunConfig, stage: str) -> str:
    return os.path.join(cfg.out_dir, {"tile": "tiles"}.get(stage, stage))


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise MissingInputError(f"{path} not found; run the earlier stage first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_stage(cfg: RunConfig, stage: str, **info) -> dict:
    meta = {"stage": stage, "config_hash": cfg.stage_hash(stage), **info}
    _write_json(os.path.join(stage_dir(cfg, stage), "stage.json"), meta)
    return meta


def check_stage(cfg: RunConfig, stage: str) -> dict:
    """Load an upstream stage's sidecar and verify its hash against ``cfg``."""
    meta = _read_json(os.path.join(stage_dir(cfg, stage), "stage.json"))
    expected = cfg.stage_hash(stage)
    if meta.get("config_hash") != expected:
        raise ConfigHashMismatch(
            f"{stage} outputs were made with config {meta.get('config_hash')}, current config gives {expected}")
    return meta


# -- patch files ---------------------------------------------------------------------

def write_patches(path, slide_id: str, patches, config_hash: str = "") -> None:
    """Kept patches of one slide: JSON header (coords, tile size) plus a raw uint8 blob."""
    size = patches[0].tile_size if patches else 0
    header = {"schema": PATCHES_SCHEMA, "slide_id": slide_id, "tile_size": size,
              "coords": [[p.x, p.y] for p in patches],
              "entropy_bits": [round(p.entropy_bits, 6) for p in patches], "config_hash": config_hash}
    blob = b"".join(np.ascontiguousarray(p.pixels, dtype=np.uint8).tobytes() for p in patches)
    _write_framed(path, header, blob)


def read_patches(path) -> list[Patch]:
    header, blob = _read_framed(path)
    if header.get("schema") != PATCHES_SCHEMA:
        raise ValueError(f"{path}: not a patch file")
    t, coords = header["tile_size"], header["coords"]
    pixels = np.frombuffer(blob, dtype=np.uint8)
    if pixels.size != len(coords) * t * t * 3:
        raise DimensionError(f"{path}: blob size does not match {len(coords)} patches of {t}px")
    pixels = pixels.reshape(len(coords), t, t, 3)
    return [Patch(header["slide_id"], x, y, pixels[i].copy(), e)
            for i, ((x, y), e) in enumerate(zip(coords, header["entropy_bits"]))]


def _list_slides(slides_dir: str) -> list[str]:
    if not slides_dir or not os.path.isdir(slides_dir):
        raise MissingInputError(f"slides directory {slides_dir!r} not found")
    paths = sorted(p for p in glob.glob(os.path.join(slides_dir, "*")) if p.lower().endswith(IMAGE_EXTS))
    if not paths:
        raise MissingInputError(f"no PNG/TIFF slides in {slides_dir}")
    return paths


def _find_mask(masks_dir: str, slide_id: str) -> str:
    for ext in (".png", ".PNG"):
        path = os.path.join(masks_dir, slide_id + ext)
        if os.path.exists(path):
            return path
    raise MissingInputError(f"no mask for slide {slide_id} in {masks_dir}")


# -- stages ----------------------------------------------------------------------------

def cmd_tile(cfg: RunConfig) -> dict:
    """Tile every slide, drop low-entropy patches and write per-slide patch files."""
    out = stage_dir(cfg, "tile")
    os.makedirs(out, exist_ok=True)
    if cfg.features_dir:
        counts = {}
        for path in sorted(glob.glob(os.path.join(cfg.features_dir, "*.feat"))):
            counts[slide_id_from_path(path)] = int(read_features(path).shape[0])
        if not counts:
            raise MissingInputError(f"no .feat files in {cfg.features_dir}")
        return write_stage(cfg, "tile", slides=counts, source="features")

    h = cfg.stage_hash("tile")
    rows, counts = [], {}
    for path in _list_slides(cfg.slides_dir):
        slide_id = slide_id_from_path(path)
        img = load_image(path)
        mask = load_mask(_find_mask(cfg.masks_dir, slide_id)) if cfg.uses_masks else None
        patches = tile_slide(img, slide_id, cfg.tile_size, cfg.tile_stride, mask, cfg.mask_coverage_min)
        kept = [p for p in patches if p.entropy_bits >= cfg.entropy_threshold]
        rows += [(p, p.entropy_bits >= cfg.entropy_threshold) for p in patches]
        write_patches(os.path.join(out, slide_id + ".patches"), slide_id, kept, h)
        counts[slide_id] = len(kept)
        log.info("%s: %d tiles, %d kept", slide_id, len(patches), len(kept))
    write_manifest(os.path.join(out, "manifest.csv"), rows)
    return write_stage(cfg, "tile", slides=counts, source="slides")


def _patient_of(slide_id: str, patients) -> str:
    if slide_id in patients:
        return slide_id
    head = slide_id.split("_", 1)[0]
    if head in patients:
        return head
    raise MissingInputError(f"slide {slide_id} matches no patient in the clinical table")


def cmd_bags(cfg: RunConfig) -> dict:
    """Split patients, fit the clinical encoder on the training cohort and plan every bag."""
    tiles = check_stage(cfg, "tile")
    if not cfg.clinical_csv or not os.path.exists(cfg.clinical_csv):
        raise MissingInputError(f"clinical table {cfg.clinical_csv!r} not found")
    records = {r.patient_id: r for r in clin.parse_clinical(cfg.clinical_csv)}
    sizes = tiles["slides"]
    slide_to_patient = {sid: _patient_of(sid, records) for sid in sizes}
    patients = sorted(set(slide_to_patient.values()))
    split = split_cohorts(patients, cfg.seed)

    encoder = clin.select_features(mode=cfg.clinical_features)
    if cfg.uses_clinical:
        encoder.fit([records[p] for p in sorted(split.train)])
        vectors = dict(zip(patients, encoder.transform([records[p] for p in patients]).tolist()))
    else:
        vectors = {p: [] for p in patients}
    labels = {p: records[p].label(cfg.task) for p in patients}

    out = stage_dir(cfg, "bags")
    os.makedirs(out, exist_ok=True)
    h = cfg.stage_hash("bags")
    _write_json(os.path.join(out, "split.json"), {**split.to_dict(), "config_hash": h})
    _write_json(os.path.join(out, "clinical.json"), {
        "config_hash": h, "schema": [list(s) for s in encoder.schema] if cfg.uses_clinical else [],
        "stats": {k: list(v) for k, v in encoder.stats.items()}, "vectors": vectors, "labels": labels})
    names, data = clin.encode_for_correlation([records[p] for p in patients], cfg.task)
    clin.write_correlation(os.path.join(out, "correlation.csv"), names, clin.correlation_matrix(data))

    plans = plan_bags(sizes, labels, split, cfg.n_instances, cfg.bags_per_slide, cfg.seed,
                      slide_to_patient)
    coords = _slide_coords(cfg, sizes)
    for plan in plans:
        plan["patch_coords"] = [coords[plan["slide_id"]][i] for i in plan["indices"]]
    problems = separation_violations(plans, split, slide_to_patient)
    if problems:
        raise AssertionError("cohort leakage: " + "; ".join(problems))
    write_bag_manifest(os.path.join(out, "manifest.jsonl"), plans, h)
    counts = {c: sum(p["cohort"] == c for p in plans) for c in ("train", "val", "test")}
    return write_stage(cfg, "bags", bags=counts, slide_to_patient=slide_to_patient,
                       n_instances=cfg.n_instances, bags_per_slide=cfg.bags_per_slide)


def _slide_coords(cfg: RunConfig, sizes) -> dict:
    if cfg.features_dir:
        return {sid: [[i, 0] for i in range(n)] for sid, n in sizes.items()}
    out = stage_dir(cfg, "tile")
    return {sid: _read_framed(os.path.join(out, sid + ".patches"))[0]["coords"] for sid in sizes}


def _slide_items(cfg: RunConfig, slide_id: str):
    if cfg.features_dir:
        return read_features(os.path.join(cfg.features_dir, slide_id + ".feat"))
    return read_patches(os.path.join(stage_dir(cfg, "tile"), slide_id + ".patches"))


def load_bags(cfg: RunConfig, cohorts=("train", "val", "test"), mean=None, std=None) -> list:
    """Rebuild the bags listed in the manifest, instances included."""
    meta = check_stage(cfg, "bags")
    out = stage_dir(cfg, "bags")
    clinical = _read_json(os.path.join(out, "clinical.json"))
    records = [r for r in read_bag_manifest(os.path.join(out, "manifest.jsonl")) if r["cohort"] in cohorts]
    mean = cfg.norm_mean if mean is None else mean
    std = cfg.norm_std if std is None else std
    cache, bags = {}, []
    for rec in records:
        sid = rec["slide_id"]
        if sid not in cache:
            items = _slide_items(cfg, sid)
            coords = [[i, 0] for i in range(len(items))] if cfg.features_dir else [[p.x, p.y] for p in items]
            cache[sid] = (items, {tuple(c): i for i, c in enumerate(coords)})
        items, index = cache[sid]
        plan = {**rec, "indices": [index[tuple(c)] for c in rec["patch_coords"]]}
        vec = np.asarray(clinical["vectors"][meta["slide_to_patient"][sid]], dtype=np.float64)
        bags.append(materialize(plan, items, vec, cfg.seed, cfg.out_size, cfg.augment, mean, std))
    return bags


def _norm_stats(cfg: RunConfig):
    if cfg.normalize == "fixed" or cfg.features_dir:
        return list(cfg.norm_mean), list(cfg.norm_std)
    meta = check_stage(cfg, "bags")
    split = CohortSplit.from_dict(_read_json(os.path.join(stage_dir(cfg, "bags"), "split.json")))
    patches = []
    for sid, patient in sorted(meta["slide_to_patient"].items()):
        if patient in split.train:
            patches += read_patches(os.path.join(stage_dir(cfg, "tile"), sid + ".patches"))
    mean, std = channel_stats(patches)
    return list(mean), list(std)


def model_config(cfg: RunConfig) -> ModelConfig:
    clinical = _read_json(os.path.join(stage_dir(cfg, "bags"), "clinical.json"))
    feat_dim = cfg.feat_dim
    if cfg.features_dir:
        first = sorted(glob.glob(os.path.join(cfg.features_dir, "*.feat")))[0]
        feat_dim = int(_read_framed(first)[0]["dim"])
    return ModelConfig(feat_dim=feat_dim, attn_dim=cfg.attn_dim, clin_dim=len(clinical["schema"]),
                       n_classes=cfg.n_classes, gated=cfg.gated, featurizer=not cfg.features_dir)


def cmd_train(cfg: RunConfig) -> dict:
    """Train on the training cohort, select on validation AUROC, save checkpoint and log."""
    check_stage(cfg, "bags")
    mean, std = _norm_stats(cfg)
    bags = load_bags(cfg, ("train", "val"), mean, std)
    train_bags = [b for b in bags if b.cohort == "train"]
    val_bags = [b for b in bags if b.cohort == "val"]
    model = init_model(model_config(cfg), seed=cfg.seed_for("init"))
    best, history = train_loop(model, train_bags, val_bags, cfg.train_config())

    out = stage_dir(cfg, "train")
    os.makedirs(out, exist_ok=True)
    h = cfg.stage_hash("train")
    save_checkpoint(os.path.join(out, "checkpoint.bin"), best, h, meta={"norm_mean": mean, "norm_std": std})
    write_log(os.path.join(out, "log.csv"), history)
    defined = [r["val_auroc"] for r in history if r["val_auroc"] is not None]
    return write_stage(cfg, "train", epochs=len(history), best_val_auroc=max(defined) if defined else None)


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    """Score every cohort at slide level and write metrics, ROC points and predictions."""
    path = checkpoint or os.path.join(stage_dir(cfg, "train"), "checkpoint.bin")
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint {path} not found")
    model, header = load_checkpoint(path)
    expected = model_config(cfg)
    if model.config != expected:
        raise DimensionError(f"checkpoint dims {model.config.to_dict()} do not match configuration {expected.to_dict()}")
    if header.get("config_hash") != cfg.stage_hash("train"):
        raise ConfigHashMismatch(
            f"checkpoint was trained with config {header.get('config_hash')}, current config gives {cfg.stage_hash('train')}")
    meta = header.get("meta", {})
    bags = load_bags(cfg, mean=meta.get("norm_mean"), std=meta.get("norm_std"))

    out = stage_dir(cfg, "eval")
    os.makedirs(out, exist_ok=True)
    class_names = ["N0", "N+"] if cfg.task == "binary" else list(clin.ALN_LABELS)
    reports, pred_rows = [], []
    for cohort in ("train", "val", "test"):
        preds = predict_slides(model, [b for b in bags if b.cohort == cohort], cfg.aggregate)
        if not preds:
            continue
        reports += slide_reports(preds, cohort, cfg.task, cfg.threshold, class_names)
        probs = np.stack([p.probs for p in preds])
        labels = np.array([p.label for p in preds])
        if cfg.task == "binary":
            _write_text(os.path.join(out, f"roc_{cohort}.csv"), roc_csv(roc_curve(probs[:, 1], labels == 1)))
        else:
            for c, name in enumerate(class_names):
                _write_text(os.path.join(out, f"roc_{cohort}_{name}.csv"), roc_csv(roc_curve(probs[:, c], labels == c)))
        pred_rows += [(cohort, p.slide_id, p.label, *p.probs) for p in preds]
    _write_text(os.path.join(out, "metrics.csv"), report(reports, "csv"))
    with open(os.path.join(out, "predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cohort", "slide_id", "label", *(f"p_{n}" for n in class_names)])
        for row in pred_rows:
            writer.writerow([*row[:3], *(f"{v:.8f}" for v in row[3:])])
    return write_stage(cfg, "eval", checkpoint=os.path.abspath(path), mode=cfg.mode,
                       n_instances=cfg.n_instances, bags_per_slide=cfg.bags_per_slide)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_report(run_dirs, cohort: str = "test", names=None) -> str:
    """Markdown table comparing the given cohort across finished runs."""
    rows, notes = [], []
    for i, run_dir in enumerate(run_dirs):
        eval_dir = os.path.join(run_dir, "eval")
        metrics_path = os.path.join(eval_dir, "metrics.csv")
        if not os.path.exists(metrics_path):
            raise MissingInputError(f"{metrics_path} not found; run eval first")
        meta = _read_json(os.path.join(eval_dir, "stage.json"))
        name = names[i] if names else meta.get("mode") or os.path.basename(os.path.normpath(run_dir))
        rows += [m for m in read_metrics_csv(metrics_path, run=name) if m.cohort == cohort]
        notes.append(f"{name}: N = {meta.get('n_instances')}, bags per slide = {meta.get('bags_per_slide')}, "
                     f"config {meta.get('config_hash')}")
    body = report(rows, "markdown")
    return "\n".join(f"- {n}" for n in notes) + ("\n\n" if notes else "") + body


def run_all(cfg: RunConfig) -> dict:
    """tile, bags, train and eval in sequence; returns the eval sidecar."""
    cmd_tile(cfg)
    cmd_bags(cfg)
    cmd_train(cfg)
    return cmd_eval(cfg)

