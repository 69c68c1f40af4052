"""Run configuration, Adam, the learning-rate law, training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import container
from .diffusion import DiffusionSchedule, eps_from_v, make_schedule, sample, training_loss
from .network import DoseDenoiser, UNetConfig, count_parameters
from .phantoms import Phantom

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# dose in [0, 1.2] <-> model space; 0 -> -1, 1 -> +1
DOSE_CLIP = (0.0, 1.2)
PREDICTIONS = ("v", "eps")


def dose_to_model(dose: np.ndarray) -> np.ndarray:
    return 2.0 * dose - 1.0


def model_to_dose(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) / 2.0


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class OptimConfig:
    lr: float = 1e-2
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global gradient-norm bound; 0 disables


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: str = "data"
    seed: int = 0
    epochs: int = 60
    batch_size: int = 16
    sample_stride: int = 1
    keep_every: int = 0
    prediction: str = "v"  # network output: "v" (velocity) or "eps" (noise)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.prediction not in PREDICTIONS:
            raise ValueError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.optim.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")
        if not 0 < self.optim.lr_min <= self.optim.lr:
            raise ValueError("need 0 < lr_min <= lr")
        if self.model.num_steps != self.schedule.T:
            raise ValueError(f"model.num_steps {self.model.num_steps} != schedule.T {self.schedule.T}")
        self.model.validate()

    def decay_start(self) -> int:
        return self.epochs // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = UNetConfig(**d.pop("model", {}))
        schedule = ScheduleConfig(**d.pop("schedule", {}))
        optim = OptimConfig(**d.pop("optim", {}))
        return cls(model=model, schedule=schedule, optim=optim, **d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def make_schedule(self) -> DiffusionSchedule:
        return make_schedule(self.schedule.T, self.schedule.beta_min, self.schedule.beta_max)


def lr_at_epoch(epoch: int, epochs: int, lr0: float, lr_min: float, decay_start: int | None = None) -> float:
    """Constant ``lr0`` before ``decay_start`` (default: half the epochs), then linear to ``lr_min``.

    The first decayed epoch is ``decay_start`` itself and the last epoch
    (``epochs - 1``) runs at exactly ``lr_min``.
    """
    if not 0 <= epoch < epochs:
        raise ValueError(f"lr_at_epoch: epoch {epoch} outside [0, {epochs})")
    start = epochs // 2 if decay_start is None else decay_start
    if epoch < start:
        return lr0
    span = epochs - start
    frac = (epoch - start + 1) / span
    if frac >= 1.0:
        return lr_min
    return lr0 + (lr_min - lr0) * frac


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``. Returns the norm before."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def noise_estimate(out, x_t, k, sched: DiffusionSchedule, prediction: str):
    """The network output as a noise estimate, converting from velocity when needed."""
    if prediction == "eps":
        return out
    if prediction == "v":
        return eps_from_v(out, x_t, k, sched)
    raise ValueError(f"unknown prediction {prediction!r}")


def _batch(items: list[Phantom]) -> tuple[np.ndarray, np.ndarray]:
    x0 = dose_to_model(np.stack([ph.dose for ph in items]))
    cond = np.stack([ph.structure for ph in items])
    return x0, cond


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    seconds: float


class Trainer:
    """Single-process trainer. All randomness flows from one generator seeded by the config."""

    def __init__(self, cfg: RunConfig, train_set: list[Phantom]):
        cfg.validate()
        if not train_set:
            raise ValueError("Trainer: empty training set")
        shape = train_set[0].dose.shape[-1]
        if shape != cfg.model.image_size or train_set[0].structure.shape[0] != cfg.model.cond_channels:
            raise ValueError(
                f"Trainer: dataset samples {train_set[0].structure.shape} do not match model config "
                f"(image_size={cfg.model.image_size}, cond_channels={cfg.model.cond_channels})"
            )
        self.cfg = cfg
        self.train_set = train_set
        self.sched = cfg.make_schedule()
        self.model = DoseDenoiser(cfg.model, seed=cfg.seed)
        self.params = dict(self.model.named_parameters())
        o = cfg.optim
        self.opt = Adam(self.params, o.beta1, o.beta2, o.eps)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.epoch = 0
        self.step = 0

    def _net(self, x, k, cond):
        return noise_estimate(self.model(x, k, cond=cond), x, k, self.sched, self.cfg.prediction)

    def train_step(self, items: list[Phantom], lr: float) -> float:
        x0, cond = _batch(items)
        loss = training_loss(self._net, x0, cond, self.rng, self.sched)
        self.model.zero_grad()
        loss.backward()
        clip_grad_norm(self.params.values(), self.cfg.optim.grad_clip)
        self.opt.step(lr)
        self.step += 1
        return float(loss.data)

    def train_epoch(self, on_step: Callable[[StepRecord], None] | None = None) -> list[StepRecord]:
        cfg = self.cfg
        lr = lr_at_epoch(self.epoch, cfg.epochs, cfg.optim.lr, cfg.optim.lr_min, cfg.decay_start())
        order = self.rng.permutation(len(self.train_set))
        records = []
        for i in range(0, len(order), cfg.batch_size):
            items = [self.train_set[j] for j in order[i : i + cfg.batch_size]]
            t0 = time.perf_counter()
            loss = self.train_step(items, lr)
            rec = StepRecord(self.epoch, self.step, loss, lr, time.perf_counter() - t0)
            records.append(rec)
            if on_step:
                on_step(rec)
        self.epoch += 1
        return records

    # -- checkpoints -------------------------------------------------------

    def checkpoint_bytes(self) -> bytes:
        arrays = {}
        for k, p in self.params.items():
            arrays[f"param/{k}"] = p.data
        for k in self.params:
            arrays[f"adam_m/{k}"] = self.opt.m[k]
            arrays[f"adam_v/{k}"] = self.opt.v[k]
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "adam_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
        }
        return container.encode(arrays, meta)

    def save(self, path) -> None:
        container.atomic_write(Path(path), self.checkpoint_bytes())

    @classmethod
    def restore(cls, path, train_set: list[Phantom]) -> "Trainer":
        arrays, meta = container.load(path)
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        tr = cls(RunConfig.from_dict(meta["config"]), train_set)
        tr.load_arrays(arrays, meta)
        return tr

    def load_arrays(self, arrays: dict, meta: dict) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        for k in self.params:
            self.opt.m[k][...] = arrays[f"adam_m/{k}"]
            self.opt.v[k][...] = arrays[f"adam_v/{k}"]
        self.opt.t = int(meta["adam_t"])
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]


def load_model(path) -> tuple[DoseDenoiser, RunConfig]:
    """Model weights and config from a checkpoint, without optimizer state."""
    arrays, meta = container.load(path)
    cfg = RunConfig.from_dict(meta["config"])
    model = DoseDenoiser(cfg.model, seed=cfg.seed)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, cfg


@dataclass
class Prediction:
    dose: np.ndarray  # (B, 1, H, W), clipped to DOSE_CLIP
    outside_fraction: float  # fraction of raw pixels outside DOSE_CLIP before clipping
    diagnostics: list[tuple[int, float, float]]
    seconds_per_step: float


def predict_doses(
    model: DoseDenoiser,
    structures: np.ndarray,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    stride: int = 1,
    variance: str = "beta",
    prediction: str = "v",
) -> Prediction:
    """Sample dose maps for a batch of structure stacks (B, 2+O, H, W).

    Structure features are computed once and reused at every reverse step.
    ``prediction`` must match the parametrisation the model was trained with.
    """
    structures = np.asarray(structures, dtype=np.float64)
    with ad.no_grad():
        feats = model.encode(structures)
    t0 = time.perf_counter()
    res = sample(
        lambda x, k, f: noise_estimate(model(x, k, feats=f), x, k, sched, prediction),
        feats,
        sched,
        rng,
        shape=(structures.shape[0], 1) + structures.shape[2:],
        stride=stride,
        clip=(dose_to_model(DOSE_CLIP[0]), dose_to_model(DOSE_CLIP[1])),
        variance=variance,
    )
    elapsed = (time.perf_counter() - t0) / max(1, len(res.diagnostics))
    raw = model_to_dose(res.x0)
    outside = float(np.mean((raw < DOSE_CLIP[0]) | (raw > DOSE_CLIP[1])))
    return Prediction(np.clip(raw, *DOSE_CLIP), outside, res.diagnostics, elapsed)


def parameter_report(model: DoseDenoiser) -> dict[str, int]:
    return {
        "total": count_parameters(model),
        "unet": count_parameters(model.unet),
        "structure_encoder": count_parameters(model.encoder),
    }
