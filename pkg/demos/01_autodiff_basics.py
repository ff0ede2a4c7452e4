"""
Reverse-mode autodiff on plain numpy arrays
===========================================

Every model in this package differentiates through one small tape. A
tensor wraps a float array; entering a Tape records each op; backward
walks the records in reverse and accumulates gradients.
"""

import numpy as np

from peterrec.tensor import Tape, Tensor, matmul, reduce_sum, relu, sigmoid

# two parameters and one input, all ordinary arrays underneath
w = Tensor(np.array([[0.4, -0.2], [0.1, 0.5]]), requires_grad=True)
b = Tensor(np.array([0.05, -0.3]), requires_grad=True)
x = Tensor(np.array([[1.0, 2.0], [0.5, -1.0]]))

with Tape() as tape:
    h = relu(matmul(x, w) + b)
    loss = reduce_sum(h * sigmoid(h))
tape.backward(loss)

print("loss :", float(loss.data))
print("dL/dw:\n", w.grad)
print("dL/db:", b.grad)

# the tape's answer should match a central finite difference
eps = 1e-5
probe = w.data.copy()
probe[0, 1] += eps
up = float(reduce_sum((lambda t: t * sigmoid(t))(relu(matmul(x, Tensor(probe)) + b))).data)
probe[0, 1] -= 2 * eps
dn = float(reduce_sum((lambda t: t * sigmoid(t))(relu(matmul(x, Tensor(probe)) + b))).data)
numeric = (up - dn) / (2 * eps)
print(f"dL/dw[0,1] numeric {numeric:.8f} vs tape {w.grad[0, 1]:.8f}")

# gradients accumulate across uses of the same tensor; zeroing is explicit
w.zero_grad()
print("after zero_grad:", w.grad)
