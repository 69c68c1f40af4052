"""Diagonal state-space layers: discretization, recurrent scan, convolution kernel.

Symbol mapping used throughout: ``u`` is the input sequence, ``y`` the hidden
state and ``x`` the output. The continuous system is

    y'(t) = P y(t) + Q u(t),    x(t) = R y(t)

with ``P`` diagonal (stored as its length-N diagonal). Zero-order hold with
step ``delta`` gives ``P_bar = exp(delta P)`` and
``Q_bar = (delta P)^-1 (exp(delta P) - 1) delta Q`` elementwise, and the
discrete system runs as ``y_t = P_bar_t * y_{t-1} + Q_bar_t * u_t``,
``x_t = R . y_t``. When the parameters do not vary over tokens the same map
is a causal convolution with kernel ``H_k = R . P_bar^k Q_bar``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Function, Tensor
from .nn import Linear, Module

# below this |delta * P| the ZOH factor uses its Taylor expansion
SERIES_THRESHOLD = 1e-6


def _phi1(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, with the limit 1 + z/2 for tiny |z|."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _dphi1(z: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Derivative of ``_phi1``: (exp(z) - phi) / z, series 1/2 + z/3 + z^2/8 near 0."""
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, (np.exp(z) - phi) / safe)


@dataclass
class DiscreteSsm:
    """Per-token discrete transition and input matrices (diagonal, elementwise)."""

    P_bar: np.ndarray
    Q_bar: np.ndarray

    def is_time_invariant(self) -> bool:
        if self.P_bar.ndim < 2 or self.P_bar.shape[0] == 1:
            return True
        return bool(np.all(self.P_bar == self.P_bar[:1]) and np.all(self.Q_bar == self.Q_bar[:1]))


def discretize(delta, P, Q) -> DiscreteSsm:
    """Zero-order-hold discretization of a diagonal system.

    ``delta`` holds one positive step per token (shape ``(L,)``) or a scalar;
    ``P`` is the diagonal of the state matrix, either as a length-N vector or
    as a square matrix that must be diagonal; ``Q`` has shape ``(N,)`` or
    ``(L, N)``. Returns arrays of shape ``(L, N)`` (``(N,)`` for scalar delta).
    """
    delta = np.asarray(delta, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(~(delta > 0)):
        raise ValueError("discretize: delta must be strictly positive")
    if P.ndim == 2:
        if P.shape[0] != P.shape[1] or np.any(P - np.diag(np.diag(P))):
            raise ValueError("discretize: state matrix must be diagonal")
        P = np.diag(P).copy()
    elif P.ndim > 2:
        raise ValueError(f"discretize: state matrix has unsupported shape {P.shape}")
    P = np.atleast_1d(P)
    d = delta[..., None]
    z = d * P
    return DiscreteSsm(P_bar=np.exp(z), Q_bar=_phi1(z) * d * Q)


def ssm_scan(d: DiscreteSsm, R, u, y0=None) -> np.ndarray:
    """Run the discrete recurrence left to right and project the state.

    Shapes: ``u`` is ``(L,)`` for one channel or ``(L, D)`` for D independent
    channels; ``P_bar`` and ``Q_bar`` are ``(L, N)`` or ``(L, D, N)`` (a
    token-constant ``(N,)`` / ``(D, N)`` is repeated); ``R`` is ``(N,)`` or
    per-token ``(L, N)``. Returns ``x`` with the shape of ``u``.
    """
    u = np.asarray(u, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if u.ndim not in (1, 2) or u.shape[0] < 1:
        raise ValueError(f"ssm_scan: input must be (L,) or (L, D), got {u.shape}")
    L = u.shape[0]
    state_shape = (u.shape[1], R.shape[-1]) if u.ndim == 2 else (R.shape[-1],)
    Pb = _per_token(d.P_bar, L, state_shape, "P_bar")
    Qb = _per_token(d.Q_bar, L, state_shape, "Q_bar")
    Rt = _per_token(R, L, (R.shape[-1],), "R")
    y = np.zeros(state_shape) if y0 is None else np.array(y0, dtype=np.float64)
    if y.shape != state_shape:
        raise ValueError(f"ssm_scan: initial state shape {y.shape} != {state_shape}")
    out = np.empty_like(u)
    for t in range(L):
        drive = Qb[t] * (u[t][..., None] if u.ndim == 2 else u[t])
        y = Pb[t] * y + drive
        out[t] = y @ Rt[t]
    return out


def _per_token(a: np.ndarray, L: int, shape: tuple, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape == shape:
        return np.broadcast_to(a, (L,) + shape)
    if a.shape == (L,) + shape:
        return a
    raise ValueError(f"ssm_scan: {name} shape {a.shape} does not conform to {(L,) + shape}")


def ssm_conv_kernel(d: DiscreteSsm, R, N: int) -> np.ndarray:
    """Length-N kernel ``H_k = sum_n R_n P_bar_n^k Q_bar_n`` of a time-invariant system.

    ``P_bar``/``Q_bar`` are ``(N_state,)`` or a per-token ``(L, N_state)``
    stack whose rows are all identical.
    """
    if not d.is_time_invariant():
        raise ValueError("ssm_conv_kernel: parameters vary over tokens; use ssm_scan instead")
    Pb = np.asarray(d.P_bar, dtype=np.float64)
    Qb = np.asarray(d.Q_bar, dtype=np.float64)
    if Pb.ndim == 2:
        Pb, Qb = Pb[0], Qb[0]
    R = np.asarray(R, dtype=np.float64)
    if Pb.ndim != 1 or R.shape != Pb.shape or Qb.shape != Pb.shape:
        raise ValueError(f"ssm_conv_kernel: shapes {Pb.shape}, {Qb.shape}, {R.shape} do not conform")
    powers = Pb[None, :] ** np.arange(N)[:, None]
    return (powers * Qb) @ R


def ssm_conv_apply(kernel, u) -> np.ndarray:
    """Causal convolution ``x_t = sum_{k<=t} H_k u_{t-k}``; kernel length must equal L."""
    kernel = np.asarray(kernel, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if kernel.shape != u.shape:
        raise ValueError(f"ssm_conv_apply: kernel shape {kernel.shape} != sequence shape {u.shape}")
    out = np.zeros_like(u)
    for t in range(u.shape[0]):
        out[t] = np.sum(kernel[: t + 1][::-1] * u[: t + 1], axis=0)
    return out


# ---------------------------------------------------------------------------
# selective (input-dependent) layer


class SelectiveScan(Function):
    """Fused discretize-and-scan with token-varying parameters.

    Inputs: ``u`` (B, L, D), ``delta`` (B, L, D) positive, ``P`` (N,) diagonal,
    ``Bm`` (B, L, N) input matrix per token, ``Cm`` (B, L, N) output matrix per
    token. Each of the D channels runs its own N-dimensional state:

        y_t = exp(delta_t P) * y_{t-1} + phi1(delta_t P) delta_t Bm_t u_t
        x_t = Cm_t . y_t
    """

    name = "selective_scan"

    def forward(self, u, delta, P, Bm, Cm):
        if u.ndim != 3 or delta.shape != u.shape or P.ndim != 1:
            raise ad._shape_error(self.name, u.shape, delta.shape, P.shape)
        b, L, _ = u.shape
        n = P.shape[0]
        if Bm.shape != (b, L, n) or Cm.shape != (b, L, n):
            raise ad._shape_error(self.name, u.shape, Bm.shape, Cm.shape)
        if np.any(delta <= 0):
            raise ValueError("selective_scan: delta must be strictly positive")
        z = delta[..., None] * P  # (B, L, D, N)
        a = np.exp(z)
        phi = _phi1(z)
        dbu = (delta * u)[..., None] * Bm[:, :, None, :]
        drive = phi * dbu
        h = np.empty_like(z)
        y = np.zeros(z.shape[:1] + z.shape[2:])
        for t in range(L):
            y = a[:, t] * y + drive[:, t]
            h[:, t] = y
        out = np.einsum("bldn,bln->bld", h, Cm)
        self.saved = (u, delta, P, Bm, Cm, z, a, phi, dbu, h)
        return out

    def backward(self, g):
        u, delta, P, Bm, Cm, z, a, phi, dbu, h = self.saved
        L = u.shape[1]
        gC = np.einsum("bld,bldn->bln", g, h)
        gh = g[..., None] * Cm[:, :, None, :]
        # reverse sweep: gh_t += a_{t+1} gh_{t+1}
        for t in range(L - 2, -1, -1):
            gh[:, t] += a[:, t + 1] * gh[:, t + 1]
        ga = np.zeros_like(a)
        ga[:, 1:] = gh[:, 1:] * h[:, :-1]
        gz = ga * a + gh * dbu * _dphi1(z, phi)
        gdbu = gh * phi
        gdu = np.einsum("bldn,bln->bld", gdbu, Bm)  # d/d(delta*u)
        gdelta = np.einsum("bldn,n->bld", gz, P) + gdu * u
        gu = gdu * delta
        gP = np.einsum("bldn,bld->n", gz, delta)
        gB = np.einsum("bldn,bld->bln", gdbu, delta * u)
        return gu, gdelta, gP, gB, gC


def selective_scan(u, delta, P, Bm, Cm) -> Tensor:
    return SelectiveScan.apply(u, delta, P, Bm, Cm)


def s4d_real_init(n_state: int) -> np.ndarray:
    """Diagonal S4D-real initialization ``P_n = -(n + 1)``."""
    return -(np.arange(n_state, dtype=np.float64) + 1.0)


class SsmParams(Module):
    """Learned parameters of one selective SSM layer over D channels.

    ``P_log`` stores ``log(-P)`` so the diagonal state matrix stays strictly
    negative. ``Q_proj`` and ``R_proj`` map each token to its input and
    output matrices; ``delta_proj`` produces the per-channel time step
    through a softplus.
    """

    def __init__(
        self,
        dim: int,
        n_state: int,
        rng: np.random.Generator,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        self.n_state = n_state
        self.P_log = ad.parameter(np.log(-s4d_real_init(n_state)))
        self.Q_proj = Linear(dim, n_state, rng, bias=False)
        self.R_proj = Linear(dim, n_state, rng, bias=False)
        self.delta_proj = Linear(dim, dim, rng)
        self.delta_proj.weight.data *= 0.1
        # softplus^-1 of log-uniform initial steps
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
        self.delta_proj.bias.data[:] = dt + np.log(-np.expm1(-dt))

    def state_matrix(self) -> Tensor:
        return ad.scale(ad.exp(self.P_log), -1.0)


def selective_ssm(u: Tensor, params: SsmParams) -> Tensor:
    """Input-dependent SSM over a (B, L, D) or (L, D) sequence; output has u's shape."""
    u = ad.as_tensor(u)
    squeeze = u.ndim == 2
    if squeeze:
        u = ad.reshape(u, (1,) + u.shape)
    delta = ad.softplus(params.delta_proj(u))
    Bm = params.Q_proj(u)
    Cm = params.R_proj(u)
    out = selective_scan(u, delta, params.state_matrix(), Bm, Cm)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out
