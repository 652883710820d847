"""Encode clinical records and fit the logistic-regression baseline.

Numeric columns are standardized with training-cohort statistics only;
held-out rows reuse them. The correlation audit includes the outcome.

    python demos/03_clinical_baseline.py
"""

import tempfile

import numpy as np

from alnmil.clinical import (correlation_matrix, encode_for_correlation, lr_fit, lr_predict, parse_clinical,
                             select_features)
from alnmil.evaluate import roc_auc
from alnmil.synth import SynthConfig, generate

with tempfile.TemporaryDirectory() as tmp:
    generate(tmp, SynthConfig(n_patients=120, seed=3), write_masks=False)
    records = parse_clinical(f"{tmp}/clinical.csv")

train, test = records[:90], records[90:]
enc = select_features(train)
print("schema:", [name for name, _ in enc.schema])
print("training stats:", {k: tuple(round(v, 2) for v in s) for k, s in enc.stats.items()})

x_tr, x_te = enc.transform(train), enc.transform(test)
y_tr = np.array([r.label() for r in train], float)
y_te = np.array([r.label() for r in test], float)
model = lr_fit(x_tr, y_tr, epochs=2000, lr=0.1)
print(f"clinical-only test AUROC {roc_auc(lr_predict(model, x_te), y_te):.3f}")

names, data = encode_for_correlation(records)
corr = correlation_matrix(data)
top = sorted(((abs(c), n) for n, c in zip(names[:-1], corr[-1, :-1]) if not np.isnan(c)), reverse=True)[:4]
print("strongest correlations with the outcome:", [(n, round(float(c), 2)) for c, n in top])
