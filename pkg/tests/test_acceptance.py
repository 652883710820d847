"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import dataclasses
import json
import time

import numpy as np
import pytest
from PIL import Image

from alnmil import imagery, pipeline
from alnmil.augment import affine, compose, hflip, vflip
from alnmil.bags import CohortSplit, read_bag_manifest, separation_violations
from alnmil.clinical import ClinicalRecord, VOCABULARIES, lr_fit, lr_predict, select_features
from alnmil.config import load_config
from alnmil.evaluate import confusion_metrics, metrics_from_counts, roc_auc
from alnmil.imagery import Patch, filter_patches, read_manifest, shannon_entropy
from alnmil.milnet import ModelConfig, attention, forward, grad_check, init_model
from alnmil.synth import SynthConfig, generate
from alnmil.train import TrainConfig, cosine_warm_restarts

from conftest import record

# pinned tolerances
GRAD_TOL = 1e-6
GRAD_SECONDS = 30.0
MIL_TOL = 1e-12
F1_TARGET, F1_TOL = 0.667, 1e-3
IDENTITY_TOL = 1e-12
E2E_AUROC = 0.95
E2E_SECONDS = 300.0
ENTROPY_TOL = 1e-9
LR_ACCURACY = 0.99


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_1_gradient_check():
    start = time.perf_counter()
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = init_model(ModelConfig(feat_dim=8, attn_dim=4, clin_dim=3, n_classes=2), seed=rng)
        x = rng.normal(size=(4, 3, 8, 8))
        errs.append(grad_check(model, x, rng.normal(size=3), int(rng.integers(2)), eps=1e-5))
    elapsed = time.perf_counter() - start
    ok = max(errs) < GRAD_TOL and elapsed < GRAD_SECONDS
    record(1, ok, f"max rel err {max(errs):.2e} over 10 seeds (N=4, S=8, D=8), {elapsed:.1f} s")
    assert max(errs) < GRAD_TOL
    assert elapsed < GRAD_SECONDS


def test_criterion_2_mil_invariants():
    rng = np.random.default_rng(2024)
    worst_sum = worst_perm = 0.0
    uniform_ok = True
    for trial in range(1000):
        featurizer = trial % 4 == 0
        d = int(rng.integers(1, 9))
        cfg = ModelConfig(feat_dim=d, attn_dim=int(rng.integers(1, 9)), clin_dim=int(rng.integers(0, 4)),
                          n_classes=int(rng.integers(2, 4)), gated=bool(rng.integers(2)), featurizer=featurizer)
        model = init_model(cfg, seed=rng)
        n = int(rng.integers(1, 12))
        x = rng.normal(size=(n, 3, 8, 8)) if featurizer else rng.normal(scale=3.0, size=(n, d))
        clin = rng.normal(size=cfg.clin_dim)
        fwd = forward(model, x, clin)
        worst_sum = max(worst_sum, abs(fwd.a.sum() - 1.0))
        perm = rng.permutation(n)
        worst_perm = max(worst_perm, float(np.abs(forward(model, x[perm], clin).logits - fwd.logits).max()))
        model.params["attn_w"][...] = 0.0
        a, _ = attention(model, fwd.h)
        uniform_ok &= bool(np.all(a == 1.0 / n))
    ok = worst_sum <= MIL_TOL and worst_perm <= MIL_TOL and uniform_ok
    record(2, ok, f"1000 trials: |sum a - 1| <= {worst_sum:.1e}, permutation delta <= {worst_perm:.1e}, "
                  f"zero attn_w uniform: {uniform_ok}")
    assert ok


def test_criterion_3_auroc_oracle():
    rng = np.random.default_rng(3)
    mismatches, min_tie_frac = 0, 1.0
    for _ in range(1000):
        n = int(rng.integers(4, 60))
        scores = rng.integers(0, max(2, n // 3), n) / 10.0
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        _, counts = np.unique(scores, return_counts=True)
        min_tie_frac = min(min_tie_frac, counts[counts > 1].sum() / n)
        if roc_auc(scores, labels) != brute_auroc(scores.tolist(), labels.tolist()):
            mismatches += 1
    example = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = mismatches == 0 and min_tie_frac >= 0.2 and example == 0.75
    record(3, ok, f"{mismatches} mismatches in 1000 sets (tied fraction >= {min_tie_frac:.2f}); worked example {example}")
    assert ok


def test_criterion_4_table_consistency():
    # smallest confusion table whose rounded rates match the reference row
    row = dict(accuracy=0.739, sensitivity=0.679, specificity=0.776, ppv=0.655, npv=0.794)
    r3 = lambda v: round(v, 3)
    found = None
    for total in range(4, 400):
        for tp in range(1, total):
            for fn in range(1, total - tp):
                if r3(tp / (tp + fn)) != row["sensitivity"]:
                    continue
                for fp in range(1, total - tp - fn):
                    tn = total - tp - fn - fp
                    m = metrics_from_counts(tp, fp, tn, fn)
                    if all(r3(getattr(m, k)) == v for k, v in row.items()):
                        found = (tp, fn, fp, tn)
                        break
                if found:
                    break
            if found:
                break
        if found:
            break
    tp, fn, fp, tn = found
    m = metrics_from_counts(tp, fp, tn, fn)
    f1_ok = abs(m.f1 - F1_TARGET) <= F1_TOL

    rng = np.random.default_rng(4)
    worst = abs((m.sensitivity * (tp + fn) + m.specificity * (tn + fp)) / (tp + fn + fp + tn) - m.accuracy)
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n).astype(bool)
        labels[:2] = [False, True]
        rep = confusion_metrics(rng.random(n), labels, threshold=float(rng.random()))
        n_pos, n_neg = int(labels.sum()), int((~labels).sum())
        worst = max(worst, abs((rep.sensitivity * n_pos + rep.specificity * n_neg) / n - rep.accuracy))
    ok = f1_ok and worst <= IDENTITY_TOL
    record(4, ok, f"counts TP={tp} FN={fn} FP={fp} TN={tn} give F1 {m.f1:.4f}; accuracy identity max dev {worst:.1e}")
    assert ok


@pytest.fixture(scope="module")
def witness_runs(tmp_path_factory):
    """Both modes end to end on the 50-patient witness task; records mask-file opens."""
    root = tmp_path_factory.mktemp("witness")
    generate(root / "data", SynthConfig(n_patients=50, seed=0))
    runs = {}
    for mode in ("dlcnbc", "dlcnbc-ws"):
        flags = dict(slides_dir=str(root / "data/slides"), clinical_csv=str(root / "data/clinical.csv"),
                     out_dir=str(root / mode), mode=mode, tile_size=32, out_size=16, feat_dim=8, attn_dim=8,
                     n_instances=10, bags_per_slide=4)
        if mode == "dlcnbc":
            flags["masks_dir"] = str(root / "data/masks")
        cfg = load_config(None, ["train.epochs=200"], **flags)
        opened = []
        real_open, real_mask = Image.open, imagery.load_mask
        with pytest.MonkeyPatch.context() as mp:
            mp.setattr(Image, "open", lambda fp, *a, **k: (opened.append(str(fp)), real_open(fp, *a, **k))[1])
            mp.setattr(pipeline, "load_mask", lambda p: (opened.append("MASK:" + str(p)), real_mask(p))[1])
            start = time.perf_counter()
            pipeline.run_all(cfg)
            elapsed = time.perf_counter() - start
        with open(f"{cfg.out_dir}/eval/metrics.csv") as fh:
            test_row = [line for line in fh if line.startswith("test,")][0].split(",")
        mask_opens = sum("mask" in p.lower() for p in opened)
        runs[mode] = dict(cfg=cfg, auroc=float(test_row[2]), seconds=elapsed, mask_opens=mask_opens)
    return runs


@pytest.mark.slow
def test_criterion_5_end_to_end(witness_runs):
    ws, m = witness_runs["dlcnbc-ws"], witness_runs["dlcnbc"]
    ok = all(r["auroc"] >= E2E_AUROC and r["seconds"] < E2E_SECONDS for r in (ws, m)) \
        and ws["mask_opens"] == 0 and m["mask_opens"] > 0
    record(5, ok, f"test AUROC dlcnbc {m['auroc']:.3f} ({m['seconds']:.0f} s), dlcnbc-ws {ws['auroc']:.3f} "
                  f"({ws['seconds']:.0f} s); mask files read by dlcnbc-ws: {ws['mask_opens']}")
    assert ok


def test_criterion_6_scheduler():
    cfg = TrainConfig(base_lr=1e-4, T_0=10, eta_min=0.0)
    lr0, lr_end, lr_mid = cosine_warm_restarts(0, cfg), cosine_warm_restarts(10, cfg), cosine_warm_restarts(5, cfg)
    ok = lr0 == 1e-4 and lr_end == cfg.eta_min and lr_mid == pytest.approx(5e-5, rel=1e-12)
    record(6, ok, f"lr(0)={lr0!r}, lr(T_0)={lr_end!r}, lr(T_0/2)={lr_mid!r}")
    assert ok


@pytest.mark.slow
def test_criterion_7_determinism(tmp_path):
    generate(tmp_path / "data", SynthConfig(n_patients=16, seed=7))
    outputs = []
    for k in range(2):
        cfg = load_config(None, ["train.epochs=8", "augment=['rotation(10)', 'vflip(0.5)', 'color_jitter(0.2,0.2,0.2,0.05)']"],
                          slides_dir=str(tmp_path / "data/slides"), clinical_csv=str(tmp_path / "data/clinical.csv"),
                          out_dir=str(tmp_path / f"run{k}"), tile_size=32, out_size=16, feat_dim=8, attn_dim=8, seed=123)
        pipeline.run_all(cfg)
        outputs.append([open(f"{cfg.out_dir}/{p}", "rb").read()
                        for p in ("train/checkpoint.bin", "eval/metrics.csv", "train/log.csv", "bags/manifest.jsonl")])
    same = [a == b for a, b in zip(*outputs)]
    ok = all(same)
    record(7, ok, f"checkpoint identical: {same[0]}, metrics CSV identical: {same[1]} "
                  f"(log {same[2]}, bag manifest {same[3]})")
    assert ok


@pytest.mark.slow
def test_criterion_8_preprocessing(witness_runs):
    rng = np.random.default_rng(8)
    const_kept = 0
    for _ in range(500):
        color = rng.integers(0, 256, 3)
        px = np.broadcast_to(color, (16, 16, 3)).astype(np.uint8)
        p = Patch("c", 0, 0, px, shannon_entropy(px))
        const_kept += len(filter_patches([p], float(rng.uniform(1e-9, 8.0))))
    gray = np.arange(256, dtype=np.uint8).reshape(16, 16)
    h8 = shannon_entropy(np.repeat(gray[..., None], 3, axis=-1))

    violations, scanned = 0, 0
    for r in witness_runs.values():
        run = r["cfg"].out_dir
        split = CohortSplit.from_dict(json.load(open(f"{run}/bags/split.json")))
        records = read_bag_manifest(f"{run}/bags/manifest.jsonl")
        kept = {(m["slide_id"], m["x"], m["y"]) for m in read_manifest(f"{run}/tiles/manifest.csv") if m["kept"]}
        violations += len(separation_violations(records, split))
        # every patch must be a kept patch of the bag's own slide
        for rec in records:
            for x, y in rec["patch_coords"]:
                scanned += 1
                violations += (rec["slide_id"], x, y) not in kept
    ok = const_kept == 0 and abs(h8 - 8.0) <= ENTROPY_TOL and violations == 0
    record(8, ok, f"constant patches kept: {const_kept}/500; uniform entropy {h8:.12f}; "
                  f"{violations} separation violations over {scanned} bag patches")
    assert ok


def test_criterion_9_augmentation_identities():
    rng = np.random.default_rng(9)
    exact = repro = True
    spec = ["rotation(10)", "vflip(0.5)", "hflip", "shear(8)", "scale(0.9, 1.1)", "translate(0.1)",
            "color_jitter(0.3, 0.3, 0.3, 0.1)", "grayscale(0.2)", "solarize(128, 0.2)", "posterize(4, 0.2)",
            "erase(0.02, 0.2)", "crop(0.8)"]
    for trial in range(100):
        img = rng.integers(0, 256, (int(rng.integers(1, 20)), int(rng.integers(1, 20)), 3), dtype=np.uint8)
        exact &= affine(img, rotate_deg=0.0).tobytes() == img.tobytes()
        exact &= hflip(hflip(img)).tobytes() == img.tobytes() and vflip(vflip(img)).tobytes() == img.tobytes()
        exact &= compose([], np.random.default_rng(trial), img).tobytes() == img.tobytes()
        a = compose(spec, np.random.default_rng(trial), img)
        b = compose(spec, np.random.default_rng(trial), img)
        repro &= a.tobytes() == b.tobytes()
    ok = exact and repro
    record(9, ok, f"identities bit-exact on 100 images: {exact}; seeded compose reproducible: {repro}")
    assert ok


def _records(rng, n):
    pick = lambda col: VOCABULARIES[col][int(rng.integers(len(VOCABULARIES[col])))]
    return [ClinicalRecord(f"P{i}", float(rng.normal(52, 10)), float(rng.gamma(3.0, 0.8)), pick("tumor_type"),
                           pick("er"), pick("pr"), pick("her2"), pick("her2_expr"), pick("grade"), pick("surgery"),
                           float(rng.uniform(0, 100)), pick("subtype"), 0, "N0") for i in range(n)]


def test_criterion_10_logistic_baseline():
    rng = np.random.default_rng(10)
    train, held_out = _records(rng, 300), _records(rng, 80)
    enc = select_features(train)
    x = enc.transform(train)
    w = rng.normal(size=x.shape[1])
    score = x @ w
    keep = np.abs(score - np.median(score)) > 0.25
    x, y = x[keep][:200], (score[keep][:200] > np.median(score)).astype(float)
    model = lr_fit(x, y)
    acc = float(((lr_predict(model, x) > 0.5) == y).mean())

    # held-out rows must be encoded with the training cohort's mean and std
    ages = np.array([r.age for r in train])
    expect = (np.array([r.age for r in held_out]) - ages.mean()) / ages.std()
    got = enc.transform(held_out)[:, 0]
    own = enc.transform(held_out)[:, 0].std()
    reuse_ok = bool(np.allclose(got, expect, rtol=0, atol=1e-12)) and abs(own - 1.0) > 1e-6
    refit = dataclasses.replace(enc, stats=dict(enc.stats))
    refit.fit(held_out)
    reuse_ok &= not np.allclose(refit.transform(held_out)[:, 0], got)
    ok = len(y) == 200 and acc >= LR_ACCURACY and reuse_ok
    record(10, ok, f"training accuracy {acc:.3f} on 200 separable vectors; held-out encoding uses training stats: {reuse_ok}")
    assert ok
