"""Attention pooling over a bag, and a finite-difference check of backward().

    python demos/04_attention_mil.py
"""

import numpy as np

from alnmil.milnet import ModelConfig, backward, forward, grad_check_detail, init_model
from alnmil.train import cross_entropy

rng = np.random.default_rng(0)
model = init_model(ModelConfig(feat_dim=8, attn_dim=4, clin_dim=3), seed=rng)
bag = rng.normal(size=(5, 3, 8, 8))
clin = rng.normal(size=3)

fwd = forward(model, bag, clin)
print("attention:", np.round(fwd.a, 3), "sum", fwd.a.sum())
print("logits:", fwd.logits)

perm = rng.permutation(5)
print("permuted bag, max logit change:", np.abs(forward(model, bag[perm], clin).logits - fwd.logits).max())

loss, dlogits = cross_entropy(fwd.logits, 1)
model.zero_grad()
backward(model, fwd, dlogits)
print(f"loss {loss:.4f}; grad norms:", {k: round(float(np.linalg.norm(g)), 4) for k, g in model.grads.items()})

d = grad_check_detail(model, bag, clin, 1)
print(f"finite differences over {d['checked']} entries: max relative error {d['max_rel_err']:.2e}")
