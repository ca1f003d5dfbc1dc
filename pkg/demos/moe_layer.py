"""
A sparse expert layer built from a dense FFN
============================================

Stage III starts by copying the trained FFN into every expert.  With a zero
router every expert is equally likely, the first ``k`` win the tie, and the
layer returns exactly ``k/E`` times the old FFN output.
"""

import numpy as np

from moetune.autodiff import Tensor
from moetune.moe import FFNParams, init_from_ffn, moe_forward

rng = np.random.default_rng(0)
ffn = FFNParams.init(width=16, hidden=32, ffn_factor=2, rng=rng)
tokens = Tensor(rng.normal(size=(10, 16)))
dense = ffn(tokens).values

for E, k in [(4, 2), (4, 4), (8, 1)]:
    ens = init_from_ffn(ffn, E, k)
    out = moe_forward(tokens, ens, use_capacity=False).output.values
    print(f"E={E} k={k}: max |moe - (k/E) ffn| = {np.abs(out - dense * k / E).max():.1e}")

# Once the router is trained the experts diverge and each token's compute
# stays at k expert evaluations whatever E is.
ens = init_from_ffn(ffn, 8, 2, router_init=1.0, rng=rng)
res = moe_forward(tokens, ens, use_capacity=False)
print("experts chosen per token:\n", res.decision.selected)
print("MACs", res.macs, "=", 10 * 2, "assignments x", ens.experts[0].macs_per_token())
