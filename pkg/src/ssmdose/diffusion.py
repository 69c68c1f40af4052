"""Variance-preserving diffusion: schedule, forward corruption, loss, reverse sampler.

Step convention: noise levels are indexed ``k = 0 .. T-1`` with
``alpha_bar[k] = prod_{j<=k} (1 - beta[j])``. :func:`q_sample` and the
network take this index. The reverse chain is written in terms of
``t = T .. 1`` where state ``x_t`` sits at index ``t - 1``; ``x_0`` is the
clean estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def drift_coefficient(self, k: int) -> float:
        """Per-step drift factor of the discretized forward SDE, ``sqrt(1 - beta) - 1``."""
        return float(np.sqrt(self.alphas[k]) - 1.0)

    def diffusion_coefficient(self, k: int) -> float:
        """Per-step noise scale of the discretized forward SDE, ``sqrt(beta)``."""
        return float(np.sqrt(self.betas[k]))


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` over T steps."""
    if T < 1:
        raise ValueError(f"make_schedule: T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"make_schedule: need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return DiffusionSchedule(np.linspace(beta_min, beta_max, T))


def _check_index(k, sched: DiffusionSchedule, name: str) -> None:
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= sched.T):
        raise ValueError(f"{name}: step {k} outside [0, {sched.T})")


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps``; t is an index or per-sample array."""
    _check_index(t, sched, "q_sample")
    x0 = np.asarray(x0, dtype=np.float64)
    ab = sched.alpha_bar[np.asarray(t)]
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


# model(x_t, k, cond) -> eps_hat Tensor; k is an int array of noise indices
NoiseModel = Callable[..., Tensor]


def eps_from_v(v: Tensor, x_t, k, sched: DiffusionSchedule) -> Tensor:
    """Noise estimate ``sqrt(1 - ab) x_t + sqrt(ab) v`` from a velocity output ``v``.

    The exact velocity ``sqrt(ab) eps - sqrt(1 - ab) x0`` maps back to
    ``eps``. A network trained this way still minimises the noise loss, but
    its output carries the clean signal at high noise levels, where a plain
    noise predictor can ignore the condition.
    """
    _check_index(k, sched, "eps_from_v")
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
    ab = sched.alpha_bar[np.asarray(k)]
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x_t.ndim - 1))
    gain = np.broadcast_to(np.sqrt(ab), x_t.shape)
    return ad.mul(ad.as_tensor(v), Tensor(np.array(gain))) + Tensor(np.sqrt(1.0 - ab) * x_t)


def training_loss(model: NoiseModel, x0, cond, rng: np.random.Generator, sched: DiffusionSchedule) -> Tensor:
    """Noise-prediction loss ``||eps - eps_hat(x_t, t, c)||^2``, summed per sample, averaged over the batch.

    One noise index per sample is drawn uniformly from ``[0, T)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    k = rng.integers(0, sched.T, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, k, eps, sched)
    eps_hat = model(Tensor(x_t), k, cond)
    loss = ad.scale(ad.sum_squares(eps_hat, Tensor(eps)), 1.0 / b)
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"training_loss: non-finite loss at steps {k.tolist()}, |x_t|={np.linalg.norm(x_t):.3g}"
        )
    return loss


def reverse_step(
    model: NoiseModel,
    x_t,
    t: int,
    cond,
    rng: np.random.Generator,
    sched: DiffusionSchedule,
    t_prev: int | None = None,
    clip: tuple[float, float] | None = None,
    variance: str = "beta",
) -> np.ndarray:
    """One ancestral step of the reverse-time SDE from ``x_t`` to ``x_{t_prev}``.

    The score is ``-eps_hat / sqrt(1 - alpha_bar_t)``; the mean step is
    ``(x_t + beta' score) / sqrt(1 - beta')`` with injected variance
    ``beta'`` where ``1 - beta' = alpha_bar_t / alpha_bar_prev``. With the
    default ``t_prev = t - 1`` this is the plain single-step update; a larger
    gap gives the strided sampler. No noise is added on the final step.
    ``clip`` bounds the implied clean estimate before forming the mean.
    ``variance="posterior"`` injects the forward posterior variance
    ``beta' (1 - alpha_bar_prev) / (1 - alpha_bar_t)`` instead of ``beta'``.
    """
    if variance not in ("beta", "posterior"):
        raise ValueError(f"reverse_step: variance must be 'beta' or 'posterior', got {variance!r}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"reverse_step: t={t} outside [1, {sched.T}]")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"reverse_step: t_prev={t_prev} must be in [0, {t})")
    x_t = np.asarray(x_t, dtype=np.float64)
    ab_t = sched.alpha_bar[t - 1]
    ab_prev = sched.alpha_bar[t_prev - 1] if t_prev >= 1 else 1.0
    beta = 1.0 - ab_t / ab_prev
    k = np.full(x_t.shape[0], t - 1)
    with ad.no_grad():
        eps_hat = np.asarray(ad.as_tensor(model(Tensor(x_t), k, cond)).data)
    if clip is None:
        mean = (x_t - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(1.0 - beta)
    else:
        x0_hat = np.clip((x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t), *clip)
        # posterior mean of x_prev given x_t and the clean estimate
        mean = (
            np.sqrt(ab_prev) * beta / (1.0 - ab_t) * x0_hat
            + np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t) * x_t
        )
    if t_prev == 0:
        out = mean
    else:
        var = beta if variance == "beta" else beta * (1.0 - ab_prev) / (1.0 - ab_t)
        out = mean + np.sqrt(var) * rng.standard_normal(x_t.shape)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"reverse_step: non-finite state at t={t}")
    return out


@dataclass
class SampleResult:
    x0: np.ndarray
    diagnostics: list[tuple[int, float, float]]  # (t, mean, std) after each step


def sample(
    model: NoiseModel,
    cond,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    shape: tuple[int, ...],
    stride: int = 1,
    clip: tuple[float, float] | None = None,
    variance: str = "beta",
) -> SampleResult:
    """Draw ``x_T ~ N(0, I)`` of ``shape`` and run the reverse chain down to ``x_0``.

    ``stride > 1`` evaluates every ``stride``-th step only (always ending at
    t=1). ``cond`` is passed to ``model`` unchanged at every step, so callers
    should hand in precomputed structure features.
    """
    if stride < 1:
        raise ValueError("sample: stride must be >= 1")
    x = rng.standard_normal(shape)
    steps = list(range(sched.T, 0, -stride))
    diagnostics = []
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        x = reverse_step(model, x, t, cond, rng, sched, t_prev=t_prev, clip=clip, variance=variance)
        diagnostics.append((t, float(x.mean()), float(x.std())))
    return SampleResult(x0=x, diagnostics=diagnostics)
