"""
Reverse-mode gradients on a small graph
=======================================

Build a tiny graph by hand, run ``backward`` and compare the tape's answer
with central finite differences.
"""

import numpy as np

from ctan import ops
from ctan.gradcheck import numerical_gradient, relative_error
from ctan.tensor import Tensor, backward

rng = np.random.default_rng(0)

# Leaves that should receive gradients are created with requires_grad.
w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))

# loss = mean cross-entropy of a linear layer followed by a sigmoid gate
labels = np.array([0, 2, 1, 1, 0])
logits = ops.broadcast_mul(ops.sigmoid(ops.linear(w, None, x)), ops.linear(w, None, x))
loss = ops.softmax_cross_entropy(logits, labels)
backward(loss)
print("loss", loss.item())


def f():
    h = ops.linear(Tensor(w.data), None, x)
    return ops.softmax_cross_entropy(ops.broadcast_mul(ops.sigmoid(h), h), labels).item()


numeric = numerical_gradient(f, w.data)
print("max relative error vs finite differences: %.2e" % relative_error(w.grad, numeric))

# The gradient reversal layer is the identity going forward and flips the
# sign (scaled by lambda) going backward.
z = Tensor(np.ones(3), requires_grad=True)
backward(ops.sum_all(ops.grad_reverse(z, 0.5)))
print("grad through reversal at lambda=0.5:", z.grad)
