"""The computation engine behind training and perturbation search.

Builds a small graph, checks its reverse-mode gradients against central
finite differences, and shows how the tanh transform keeps perturbation
weights strictly inside their imperceptibility box.
"""

import numpy as np

from fooloc import Graph, sgd_step, tanh_reparam

rng = np.random.default_rng(1)

# f(W) = mean(relu(x @ W)) with gradient from one backward sweep
g = Graph()
x = g.leaf(rng.normal(size=(5, 4)))
w = g.leaf(rng.normal(size=(4, 3)), parameter=True)
loss = g.mean(g.relu(g.matmul(x, w)))
value = g.evaluate(loss)
grads = g.backward(loss)
print(f"loss = {value:.6f}, dloss/dW shape {grads[w].shape}")

# central finite differences as an independent oracle
fd = np.zeros_like(g.value(w))
base = g.value(w).copy()
h = 1e-5
for idx in np.ndindex(*base.shape):
    for sign in (1, -1):
        bumped = base.copy()
        bumped[idx] += sign * h
        g.set_value(w, bumped)
        fd[idx] += sign * g.evaluate(loss).item() / (2 * h)
g.set_value(w, base)
print("max |analytic - finite difference|:", float(np.max(np.abs(grads[w] - fd))))

# one plain gradient step
g.evaluate(loss)
sgd_step(g, g.backward(loss), eta=0.1)
print("loss after one step:", float(g.evaluate(loss)))

# the box transform: any real input lands strictly inside (1-d, 1+d)
delta = 0.15
xi = np.array([-1e6, -3.0, 0.0, 3.0, 1e6])
gamma = tanh_reparam(xi, delta)
print("\nxi     :", xi)
print("gamma  :", gamma)
print(f"strictly inside (1-{delta}, 1+{delta}):",
      bool(np.all(gamma > 1 - delta) and np.all(gamma < 1 + delta)))
