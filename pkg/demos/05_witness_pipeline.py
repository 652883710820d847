"""End-to-end run on the synthetic witness task, with and without tumor masks.

Writes a dataset and two runs under the output directory, then prints the
comparison table. At the defaults each run takes about a minute.

    python demos/05_witness_pipeline.py --out /tmp/witness --epochs 200
"""

import argparse
import os

from alnmil import pipeline
from alnmil.config import load_config
from alnmil.synth import SynthConfig, generate

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="witness_demo")
ap.add_argument("--epochs", type=int, default=200)
ap.add_argument("--patients", type=int, default=50)
args = ap.parse_args()

data = os.path.join(args.out, "data")
generate(data, SynthConfig(n_patients=args.patients, seed=0))

runs = []
for mode in ("dlcnbc", "dlcnbc-ws"):
    flags = dict(slides_dir=f"{data}/slides", clinical_csv=f"{data}/clinical.csv", out_dir=os.path.join(args.out, mode),
                 mode=mode, tile_size=32, out_size=16, feat_dim=8, attn_dim=8)
    if mode == "dlcnbc":
        flags["masks_dir"] = f"{data}/masks"
    cfg = load_config(None, [f"train.epochs={args.epochs}"], **flags)
    pipeline.run_all(cfg)
    runs.append(cfg.out_dir)
    print(f"{mode}: done, outputs in {cfg.out_dir}")

print()
print(pipeline.cmd_report(runs))
