"""
Top-k routing and Batch Priority Routing
========================================

A router turns each token into a probability over experts.  Each token goes
to its ``k`` most likely experts; an expert that is oversubscribed keeps the
assignments with the largest gates and drops the rest.
"""

import numpy as np

from moetune.autodiff import Tensor
from moetune.router import RouterState, RoutingDecision, apply_capacity, route, select_top_k

# Four tokens that all prefer expert 0.  With c = 1.0 and one expert per token,
# each of the two experts has room for floor(1.0 * 1 * 4 / 2) = 2 assignments.
probs = np.array([[0.6, 0.4], [0.9, 0.1], [0.7, 0.3], [0.8, 0.2]])
sel, gates = select_top_k(probs, 1)
decision = apply_capacity(RoutingDecision(probs, sel, gates), capacity_factor=1.0)
print("kept:", decision.kept[:, 0])  # gates 0.9 and 0.8 survive, not the first two tokens
print("drop rate:", decision.drop_rate())

# Drop rate against capacity factor for a random router.
rng = np.random.default_rng(1)
state = RouterState(Tensor(rng.normal(size=(8, 4))), top_k=2)
x = Tensor(rng.normal(size=(64, 8)))
for c in (0.5, 1.0, 1.5, 2.0):
    state.capacity_factor = c
    _, d = route(x, state)
    print(f"c={c:3.1f}  drop rate {d.drop_rate():.3f}")
