"""Per-patient cohort split and MIL bag construction."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .augment import compose
from .imagery import DEFAULT_MEAN, DEFAULT_STD, Patch, resize_normalize

COHORTS = ("train", "val", "test")


def derive_seed(root: int, *names) -> int:
    """Stable 64-bit sub-seed for a named purpose (independent of PYTHONHASHSEED)."""
    text = ":".join([str(int(root)), *map(str, names)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class CohortSplit:
    train: frozenset
    val: frozenset
    test: frozenset

    def cohort_of(self, patient_id: str) -> str:
        for name in COHORTS:
            if patient_id in getattr(self, name):
                return name
        raise KeyError(patient_id)

    def to_dict(self) -> dict:
        return {name: sorted(getattr(self, name)) for name in COHORTS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CohortSplit":
        return cls(*(frozenset(d[name]) for name in COHORTS))


def split_cohorts(patient_ids: Sequence[str], seed: int = 0) -> CohortSplit:
    """Random per-patient split: 20% test, then 25% of the remainder as validation."""
    ids = sorted(set(patient_ids))
    if len(ids) != len(patient_ids):
        raise ValueError("duplicate patient ids")
    n = len(ids)
    if n < 5:
        raise ValueError(f"need at least 5 patients to form train/val/test cohorts, got {n}")
    n_test = _round_half_up(0.2 * n)
    n_val = _round_half_up(0.25 * (n - n_test))
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    shuffled = [ids[i] for i in order]
    return CohortSplit(
        train=frozenset(shuffled[n_test + n_val:]),
        val=frozenset(shuffled[n_test:n_test + n_val]),
        test=frozenset(shuffled[:n_test]),
    )


@dataclass
class Bag:
    slide_id: str
    cohort: str
    instances: np.ndarray
    clinical: np.ndarray
    label: int
    patch_coords: list = field(default_factory=list)
    bag_index: int = 0
    replacement: bool = False


def sample_indices(rng: np.random.Generator, n_available: int, n_instances: int) -> tuple[np.ndarray, bool]:
    replace = n_available < n_instances
    idx = rng.choice(n_available, size=n_instances, replace=replace)
    return np.sort(idx), replace


def plan_bags(
    slide_sizes: Mapping[str, int],
    labels: Mapping[str, int],
    split: CohortSplit,
    n_instances: int = 10,
    bags_per_slide: int = 4,
    seed: int = 0,
    slide_to_patient: Mapping[str, str] | None = None,
) -> list[dict]:
    """Choose the patch indices of every bag without touching pixels.

    Returns manifest records with keys slide_id, cohort, indices, label,
    bag_index, replacement. Slides with no patches are skipped with a warning.
    """
    if n_instances < 1 or bags_per_slide < 1:
        raise ValueError("n_instances and bags_per_slide must be >= 1")
    plans = []
    for slide_id in sorted(slide_sizes):
        patient = slide_to_patient[slide_id] if slide_to_patient else slide_id
        if slide_sizes[slide_id] == 0:
            warnings.warn(f"slide {slide_id} has no kept patches and is excluded", stacklevel=2)
            continue
        cohort = split.cohort_of(patient)
        rng = np.random.default_rng(derive_seed(seed, "bags", slide_id))
        for b in range(bags_per_slide):
            idx, replaced = sample_indices(rng, slide_sizes[slide_id], n_instances)
            plans.append({"slide_id": slide_id, "cohort": cohort, "indices": idx.tolist(),
                          "label": int(labels[patient]), "bag_index": b, "replacement": replaced})
    return plans


def materialize(
    plan: Mapping,
    items: Sequence[Patch] | np.ndarray,
    clinical_vector: np.ndarray,
    seed: int = 0,
    out_size: int = 224,
    augment: Sequence | None = None,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
) -> Bag:
    """Turn one planned bag into instance tensors (augmenting training-cohort bags only)."""
    idx = plan["indices"]
    slide_id, cohort = plan["slide_id"], plan["cohort"]
    if isinstance(items, np.ndarray):
        instances = items[idx].astype(np.float64)
        coords = [[int(i), 0] for i in idx]
    else:
        chosen = [items[i] for i in idx]
        coords = [[p.x, p.y] for p in chosen]
        if augment and cohort == "train":
            aug_rng = np.random.default_rng(derive_seed(seed, "augment", slide_id, plan["bag_index"]))
            pixels = [compose(augment, aug_rng, p.pixels) for p in chosen]
        else:
            pixels = [p.pixels for p in chosen]
        instances = np.stack([resize_normalize(px, out_size, mean, std) for px in pixels])
    return Bag(slide_id, cohort, instances, np.asarray(clinical_vector, dtype=np.float64),
               int(plan["label"]), coords, int(plan["bag_index"]), bool(plan["replacement"]))


def build_bags(
    slide_patches: Mapping[str, Sequence[Patch] | np.ndarray],
    clinical: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    split: CohortSplit,
    n_instances: int = 10,
    bags_per_slide: int = 4,
    seed: int = 0,
    out_size: int = 224,
    augment: Sequence | None = None,
    mean=DEFAULT_MEAN,
    std=DEFAULT_STD,
    slide_to_patient: Mapping[str, str] | None = None,
) -> list[Bag]:
    """Materialize ``bags_per_slide`` bags of ``n_instances`` for every slide.

    ``slide_patches`` maps slide id to kept patches, or to a (M, D) matrix of
    precomputed features. Patches within a bag are drawn without replacement
    unless the slide has fewer than ``n_instances`` of them, in which case the
    bag's ``replacement`` flag is set.
    """
    for slide_id in slide_patches:
        patient = slide_to_patient[slide_id] if slide_to_patient else slide_id
        if patient not in clinical:
            raise KeyError(f"slide {slide_id}: no clinical vector for patient {patient}")
    sizes = {sid: len(items) for sid, items in slide_patches.items()}
    plans = plan_bags(sizes, labels, split, n_instances, bags_per_slide, seed, slide_to_patient)
    return [
        materialize(plan, slide_patches[plan["slide_id"]],
                    clinical[slide_to_patient[plan["slide_id"]] if slide_to_patient else plan["slide_id"]],
                    seed, out_size, augment, mean, std)
        for plan in plans
    ]


def separation_violations(bag_records: Sequence, split: CohortSplit, slide_to_patient=None) -> list[str]:
    """Bags whose cohort disagrees with their patient's cohort (should be empty)."""
    problems = []
    for rec in bag_records:
        slide_id = rec["slide_id"] if isinstance(rec, Mapping) else rec.slide_id
        cohort = rec["cohort"] if isinstance(rec, Mapping) else rec.cohort
        patient = slide_to_patient[slide_id] if slide_to_patient else slide_id
        try:
            actual = split.cohort_of(patient)
        except KeyError:
            problems.append(f"{slide_id}: patient {patient} is in no cohort")
            continue
        if actual != cohort:
            problems.append(f"{slide_id}: bag cohort {cohort} but patient cohort {actual}")
    return problems


def write_bag_manifest(path, records: Sequence[Mapping], config_hash: str = "") -> None:
    """JSON-lines manifest, one bag per line; ``records`` are plans (with ``patch_coords`` added) or dicts."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            rec = {"slide_id": r["slide_id"], "cohort": r["cohort"], "patch_coords": r["patch_coords"],
                   "label": r["label"], "bag_index": r["bag_index"], "replacement": r["replacement"],
                   "config_hash": config_hash}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_bag_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
