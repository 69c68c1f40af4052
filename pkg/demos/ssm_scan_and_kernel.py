"""
A diagonal state-space model, two ways
======================================

Discretize a continuous diagonal SSM with zero-order hold, run it as a
recurrence, and run it again as a causal convolution with its kernel. The
two agree to round-off. Then run the input-dependent (selective) version.
"""

import numpy as np

from ssmdose.ssm import SsmParams, discretize, selective_ssm, ssm_conv_apply, ssm_conv_kernel, ssm_scan

rng = np.random.default_rng(1)
N, L = 4, 32
P = -np.arange(1, N + 1, dtype=float)  # stable diagonal state matrix
Q = rng.normal(size=N)
R = rng.normal(size=N)

d = discretize(0.1, P, Q)
u = rng.normal(size=L)
by_scan = ssm_scan(d, R, u)
by_conv = ssm_conv_apply(ssm_conv_kernel(d, R, L), u)
print("max |scan - conv| =", np.max(np.abs(by_scan - by_conv)))

# Closed form: delta = ln 2 and P = 1 double the state each step
d2 = discretize(np.log(2.0), np.array([1.0]), np.array([3.0]))
print("P_bar =", d2.P_bar, " Q_bar =", d2.Q_bar)

# Selective scan: step sizes and projections now depend on each token
params = SsmParams(dim=6, n_state=N, rng=rng)
tokens = rng.normal(size=(2, L, 6))
out = selective_ssm(tokens, params)
print("selective output", out.shape)
