"""
Autodiff on numpy arrays
========================

Build a small graph with the ``gradcore`` tensors, run the backward pass and
compare the result with central finite differences.
"""

import numpy as np

from diffseg.gradcore import Tensor, conv2d, group_norm, no_grad, relu

rng = np.random.default_rng(0)

# a 3x3 convolution followed by group norm and ReLU, reduced to a scalar
x = Tensor(rng.normal(size=(2, 4, 8, 8)))
kernel = Tensor(rng.normal(size=(4, 4, 3, 3)) * 0.2, requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)
weights = rng.normal(size=(2, 4, 8, 8))


def loss():
    h = relu(group_norm(conv2d(x, kernel, padding=1), 2, gamma, beta))
    return (h * weights).sum()


loss().backward()
print("analytic dL/dkernel[0, 0]:\n", kernel.grad[0, 0])

# central differences on the same entries
step = 1e-5
numeric = np.zeros((3, 3))
for i in range(3):
    for j in range(3):
        old = kernel.data[0, 0, i, j]
        kernel.data[0, 0, i, j] = old + step
        up = loss().item()
        kernel.data[0, 0, i, j] = old - step
        down = loss().item()
        kernel.data[0, 0, i, j] = old
        numeric[i, j] = (up - down) / (2 * step)
print("finite differences:\n", numeric)
print("max relative error:", np.max(np.abs(numeric - kernel.grad[0, 0]) / np.abs(numeric)))

# inside no_grad no graph is recorded, which is what sampling loops rely on
with no_grad():
    out = conv2d(x, kernel, padding=1)
print("requires_grad inside no_grad:", out.requires_grad)
