"""
A soft top-k gate in isolation
==============================

One searchable dimension of 32 units.  Its pruning ratio ``a`` acts as a
threshold on rank-normalized importance, and a steep sigmoid turns that
threshold into an almost binary mask that is still differentiable in ``a``.
"""

import numpy as np

from dms import autodiff as ad
from dms import topk as tk

rng = np.random.default_rng(0)
op = tk.TopkOperator(32)
op.importance = rng.random(32)

# Normalized importance is rank / N: evenly spaced no matter how the raw
# scores are distributed.
print("normalized importance:", np.round(np.sort(op.normalized()), 3)[:6], "...")

for a in (0.0, 0.25, 0.5, 0.75):
    op.set_ratio(a)
    m = tk.unit_mask(op).data
    fuzzy = int(np.sum((m > 0.05) & (m < 0.95)))
    print(f"a={a:.2f}  kept={tk.element_count(op):2d}  mask sum={m.sum():6.2f}  fuzzy units={fuzzy}")

# The mask sum moves smoothly with a, so a resource penalty on it can be
# minimized by gradient descent.
op.set_ratio(0.5)
total = ad.sum_(tk.unit_mask(op))
ad.backward(total)
print("d(mask sum)/da at a=0.5:", float(op.a.grad[0]), "(about -N)")
