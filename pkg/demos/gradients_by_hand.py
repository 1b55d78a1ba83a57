"""
Checking a hand-written backward pass
=====================================

Builds a tiny conv + batch-norm + ReLU + dense graph on the reverse-mode
engine and compares its gradient with central differences.
"""
import numpy as np

from pcrefine import layers as L
from pcrefine.tensor import Tensor, mean, relu, reshape

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 1, 5, 5, 5)))
k = Tensor(rng.normal(size=(4, 1, 3, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
gamma, beta = Tensor(np.ones(4), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
y = np.array([0, 1])


def loss():
    h = L.conv3d(x, k, b, pad=1)
    h = relu(L.batch_norm(h, gamma, beta, L.BatchNormState(4), train=True, axis=1))
    h = mean(reshape(h, (2, 4, -1)), axis=2)
    return L.softmax_cross_entropy(L.dense(h, w), y)


out = loss()
out.backward()
print("loss", out.item())

h = 1e-5
for name, t in (("kernel", k), ("gamma", gamma), ("dense", w)):
    flat = t.data.reshape(-1)
    worst = 0.0
    for i in rng.choice(flat.size, min(8, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + h
        up = loss().item()
        flat[i] = old - h
        down = loss().item()
        flat[i] = old
        num = (up - down) / (2 * h)
        ana = t.grad.reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    print("%-7s worst relative error %.1e" % (name, worst))
