"""A short tour of the tape-based autograd that everything else is built on."""

import numpy as np

from bayesformer import autograd as ag
from bayesformer.checks import numerical_grad, rel_error

rng = np.random.default_rng(0)

# a tiny two-layer network on a batch of 4 inputs
x = ag.Tensor(rng.standard_normal((4, 3)))
W1 = ag.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
W2 = ag.Tensor(rng.standard_normal((5, 2)), requires_grad=True)


def loss():
    h = ag.gelu(x @ W1)
    return ag.log_softmax(h @ W2, axis=-1).sum() * -1.0


out = loss()
out.backward()
print("loss:", out.item())
print("dL/dW2 from backward:\n", W2.grad)

# the same gradient by central differences
num = numerical_grad(lambda: loss().item(), W2)
print("max relative error vs finite differences: %.2e" % rel_error(W2.grad, num).max())

# masked softmax: the upper triangle gets exactly zero weight
scores = ag.Tensor(rng.standard_normal((4, 4)))
causal = np.tril(np.ones((4, 4), dtype=bool))
att = ag.softmax(scores, axis=-1, mask=causal).data
print("causal attention weights:\n", np.round(att, 3))
print("row sums:", att.sum(axis=-1))
