"""
Reverse-mode gradients and a finite-difference check
====================================================

Fit a two-layer network to a sine by hand-rolled gradient descent, then
compare the tape's gradients against central differences.
"""

import numpy as np

from ssmdose import autodiff as ad
from ssmdose.autodiff import Tensor

rng = np.random.default_rng(0)
x = np.linspace(-3, 3, 64)[:, None]
y = np.sin(x)

W1 = ad.parameter(rng.normal(size=(1, 16)))
b1 = ad.parameter(np.zeros(16))
W2 = ad.parameter(rng.normal(size=(16, 1)) / 4)
params = [W1, b1, W2]


def loss():
    h = ad.silu(ad.linear(Tensor(x), W1, b1))
    return ad.mse(ad.linear(h, W2), Tensor(y))


for step in range(500):
    for p in params:
        p.grad = None
    value = loss()
    value.backward()
    for p in params:
        p.data -= 0.05 * p.grad
    if step % 100 == 0:
        print(f"step {step:3d}  mse {float(value.data):.4f}")

# the tape and central differences agree to well under 1e-6 relative error
print("grad check:", ad.grad_check(loss, params, 1e-5))
