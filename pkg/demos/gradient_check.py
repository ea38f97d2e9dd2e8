"""
Checking gradients by central differences
=========================================

Every model's backward pass is hand-written.  This script compares it with
central finite differences on a tiny random instance.
"""

import numpy as np

from crossrec import data, synthetic
from crossrec.neucdcf import KINDS, TrainConfig, init_model, objective, training_index

base = synthetic.cross_domain(m=6, n_s=5, n_t=5, density_s=0.6, density_t=0.6, seed=1)
ds = data.apply_protocol(base, data.ProtocolSpec("sparse", 0, seed=3))


def numeric_grad(f, params, h=1e-5):
    out = {}
    for key, P in params.items():
        g = np.zeros_like(P)
        for i in np.ndindex(P.shape):
            old = P[i]
            P[i] = old + h
            fp = f()
            P[i] = old - h
            fm = f()
            P[i] = old
            g[i] = (fp - fm) / (2 * h)
        out[key] = g
    return out


# %%
# Relative error per entry, with a small floor so exact zeros do not divide.
for kind in KINDS:
    model = init_model(kind, ds, TrainConfig(k=4, layers=2, alpha=0.4, init_std=0.5, seed=21))
    idx = training_index(model, ds)
    _, grads, _ = objective(model, ds, idx, l2=0.001)
    num = numeric_grad(lambda: objective(model, ds, idx, l2=0.001)[0], model.params)
    worst = max(
        float(np.max(np.abs(grads[k] - num[k]) / np.maximum(np.maximum(np.abs(grads[k]), np.abs(num[k])), 1e-6)))
        for k in num
    )
    print(f"{kind:8s} {len(model.params):2d} tensors  max relative error {worst:.2e}")
