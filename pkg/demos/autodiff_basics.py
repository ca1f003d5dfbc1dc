"""
Reverse-mode gradients on numpy arrays
======================================

Every operation on a ``Tensor`` records its inputs and a closure that pushes
gradients back to them.  ``backward`` walks that record in reverse.
"""

import numpy as np

from moetune import autodiff as ad
from moetune.autodiff import Tensor

# A two-layer perceptron on a handful of points.
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
w1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w2 = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

logits = ad.gelu(x @ w1) @ w2
loss = -ad.mean(ad.take(ad.log_softmax(logits), (np.arange(5), np.array([0, 1, 0, 1, 1]))))
loss.backward()
print("loss", loss.item())
print("dloss/dw2\n", w2.grad)

# The same derivative by central differences, one entry at a time.
def value():
    out = ad.gelu(x @ w1) @ w2
    return -ad.mean(ad.take(ad.log_softmax(out), (np.arange(5), np.array([0, 1, 0, 1, 1])))).item()

eps = 1e-5
w2.values[1, 0] += eps
up = value()
w2.values[1, 0] -= 2 * eps
down = value()
w2.values[1, 0] += eps
print("numeric", (up - down) / (2 * eps), "analytic", w2.grad[1, 0])

# Overflow is caught at the op that produced it.
try:
    with np.errstate(over="ignore"):
        ad.exp(Tensor([1000.0]))
except ad.NonFiniteError as exc:
    print("caught:", exc)
