"""Synthetic witness-task slides for desk-scale runs.

Each slide is blank glass (constant color, zero entropy) with a rectangular
tissue area of pink noise texture. A tile-aligned "tumor" block inside the
tissue is written to the mask. Positive patients carry witness tiles: dark
blue-violet texture with fine horizontal stripes, placed mostly inside the
tumor block and a few elsewhere in the tissue. Labels in the clinical table
follow witness presence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .clinical import VOCABULARIES, ClinicalRecord, write_clinical
from .imagery import save_png

GLASS = (242, 240, 244)
WITNESS_RGB = np.array([70.0, 45.0, 150.0])


@dataclass
class SynthConfig:
    n_patients: int = 50
    slide_size: int = 256
    tile_size: int = 32
    positive_frac: float = 0.4
    seed: int = 0


def _tissue_texture(rng, h, w, base):
    noise = rng.normal(0.0, 24.0, size=(h, w, 3))
    low = rng.normal(0.0, 12.0, size=(h // 8 + 1, w // 8 + 1, 1))
    low = np.kron(low, np.ones((8, 8, 1)))[:h, :w]
    return base + noise + low


def _witness_texture(rng, h, w):
    stripes = 40.0 * np.sin(np.arange(h) * (np.pi / 2))[:, None, None]
    return WITNESS_RGB + stripes + rng.normal(0.0, 18.0, size=(h, w, 3))


def make_slide(rng: np.random.Generator, cfg: SynthConfig, positive: bool):
    """Return (image, mask, witness tile coords) for one slide."""
    s, t = cfg.slide_size, cfg.tile_size
    g = s // t
    img = np.empty((s, s, 3))
    img[:] = GLASS
    mask = np.zeros((s, s), dtype=bool)

    # tissue occupies a random block of the tile grid, at least 5x5 tiles
    tw = int(rng.integers(max(5, g - 3), g + 1))
    th = int(rng.integers(max(5, g - 3), g + 1))
    tx = int(rng.integers(0, g - tw + 1))
    ty = int(rng.integers(0, g - th + 1))
    stain = np.array([205.0, 125.0, 175.0]) + rng.normal(0.0, 10.0, size=3)
    region = (slice(ty * t, (ty + th) * t), slice(tx * t, (tx + tw) * t))
    img[region] = _tissue_texture(rng, th * t, tw * t, stain)

    # annotated tumor block: 3x3 to 4x4 tiles inside the tissue
    mw = int(rng.integers(3, 5))
    mh = int(rng.integers(3, 5))
    mx = tx + int(rng.integers(0, tw - mw + 1))
    my = ty + int(rng.integers(0, th - mh + 1))
    mask[my * t:(my + mh) * t, mx * t:(mx + mw) * t] = True

    witness = []
    if positive:
        inside = [(i, j) for j in range(my, my + mh) for i in range(mx, mx + mw)]
        outside = [(i, j) for j in range(ty, ty + th) for i in range(tx, tx + tw)
                   if not (mx <= i < mx + mw and my <= j < my + mh)]
        n_in = max(1, int(round(0.6 * len(inside))))
        n_out = max(1, int(round(0.2 * len(outside))))
        picks = [inside[k] for k in rng.choice(len(inside), n_in, replace=False)]
        picks += [outside[k] for k in rng.choice(len(outside), min(n_out, len(outside)), replace=False)]
        for i, j in sorted(picks):
            img[j * t:(j + 1) * t, i * t:(i + 1) * t] = _witness_texture(rng, t, t)
            witness.append((i * t, j * t))
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), mask, witness


def make_record(rng: np.random.Generator, patient_id: str, positive: bool) -> ClinicalRecord:
    if positive:
        lnm = int(rng.integers(1, 3)) if rng.random() < 0.5 else int(rng.integers(3, 9))
        label = "N1-2" if lnm <= 2 else "N2+"
    else:
        lnm, label = 0, "N0"
    pick = lambda col: VOCABULARIES[col][int(rng.integers(len(VOCABULARIES[col])))]
    return ClinicalRecord(
        patient_id=patient_id,
        age=float(np.clip(np.round(rng.normal(52.0, 10.0)), 22, 90)),
        tumor_size=float(np.clip(np.round(rng.normal(2.6 + 0.4 * positive, 1.0), 1), 0.3, 10.0)),
        tumor_type=pick("tumor_type"), er=pick("er"), pr=pick("pr"), her2=pick("her2"),
        her2_expr=pick("her2_expr"), grade=pick("grade"),
        surgery="ALND" if positive and rng.random() < 0.7 else "SLNB",
        ki67=float(np.clip(np.round(rng.normal(25.0, 15.0)), 0, 100)),
        subtype=pick("subtype"), lnm_count=lnm, aln_label=label,
    )


def generate(out_dir, cfg: SynthConfig, write_masks: bool = True) -> dict:
    """Write slides/, masks/ and clinical.csv under ``out_dir``; returns witness coords per patient."""
    if cfg.slide_size < 5 * cfg.tile_size:
        raise ValueError("slide_size must hold at least 5 tiles per side")
    rng = np.random.default_rng(cfg.seed)
    slides_dir = os.path.join(out_dir, "slides")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(slides_dir, exist_ok=True)
    if write_masks:
        os.makedirs(masks_dir, exist_ok=True)
    ids = [f"P{i:03d}" for i in range(cfg.n_patients)]
    n_pos = int(round(cfg.positive_frac * cfg.n_patients))
    positive = set(rng.permutation(cfg.n_patients)[:n_pos].tolist())
    records, witnesses = [], {}
    for i, pid in enumerate(ids):
        img, mask, witness = make_slide(rng, cfg, i in positive)
        save_png(os.path.join(slides_dir, f"{pid}.png"), img)
        if write_masks:
            save_png(os.path.join(masks_dir, f"{pid}.png"), mask.astype(np.uint8) * 255)
        records.append(make_record(rng, pid, i in positive))
        witnesses[pid] = witness
    write_clinical(os.path.join(out_dir, "clinical.csv"), records)
    return witnesses


def has_witness(tile: np.ndarray) -> bool:
    """Detect the witness signature: blue-dominant mean color plus a period-4 row oscillation."""
    px = tile.astype(np.float64)
    mean = px.reshape(-1, 3).mean(axis=0)
    if not (mean[2] > mean[0] + 40 and mean[2] > mean[1] + 60):
        return False
    rows = px.mean(axis=(1, 2))
    phase = np.sin(np.arange(rows.size) * (np.pi / 2))
    return float((rows - rows.mean()) @ phase) / max(1.0, float(phase @ phase)) > 20.0
