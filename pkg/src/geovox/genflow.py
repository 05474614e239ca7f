"""Flow-matching and DDPM objectives, samplers and hard conditioning."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, SamplingError, TrainingError
from .sparsity import K, ConditionVolume, condition_channels, decode, embed
from .tensor import Adam, ParameterSet, Tensor

FM = "fm"
DDPM = "ddpm"
OBJECTIVES = (FM, DDPM)


class Model(Protocol):
    params: ParameterSet

    def forward(self, x_t, t, c) -> Tensor: ...

    def predict(self, x_t, t, c) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta ramp; ``alpha_bars[0] == 1`` so index t runs 0..T.

    ``beta_start``/``beta_end`` describe a ``reference_T``-step ramp; shorter
    schedules scale the betas by reference_T / T so the total noise injected
    stays comparable. Betas are capped at 0.999.
    """

    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reference_T: int = 1000
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or self.reference_T < 1:
            raise ConfigError("schedule needs T >= 1")
        if not (0 < self.beta_start < 1 and 0 < self.beta_end < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.T > 1 and not self.beta_start < self.beta_end:
            raise ConfigError("beta ramp must be increasing")
        scale = self.reference_T / self.T
        ramp = np.minimum(np.linspace(self.beta_start * scale, self.beta_end * scale, self.T), 0.999)
        betas = np.concatenate([[0.0], ramp])
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    def posterior_variance(self, t: int) -> float:
        return float((1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t])


# -- paths -------------------------------------------------------------------

def _bcast(v, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def fm_interpolant(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear path point x_t and its target velocity x1 - x0; t has one entry per sample."""
    tb = _bcast(t, x0.ndim).astype(x0.dtype)
    return (1 - tb) * x0 + tb * x1, x1 - x0


def ddpm_marginal(x0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    ab = _bcast(alpha_bar, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(x0.dtype)


def fm_loss(model: Model, x0: np.ndarray, x1: np.ndarray, c: np.ndarray, t) -> Tensor:
    x_t, u = fm_interpolant(x0, x1, t)
    return T.mse_loss(model.forward(x_t, t, c), u)


def ddpm_loss(model: Model, x0: np.ndarray, eps: np.ndarray, c: np.ndarray, t_idx, schedule: NoiseSchedule) -> Tensor:
    t_idx = np.asarray(t_idx)
    x_t = ddpm_marginal(x0, eps, schedule.alpha_bars[t_idx])
    return T.mse_loss(model.forward(x_t, t_idx / schedule.T, c), eps)


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    objective: str = FM
    batch_size: int = 4
    lr: float = 2e-4
    clip_norm: float = 1.0
    epochs: int = 30
    seed: int = 0
    val_seed: int = 12345
    ddpm_T: int = 200
    decay_steps: int = 0  # > 0: cosine decay of lr to zero over this many steps

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_steps < 0 or not self.lr > 0 or not self.clip_norm > 0:
            raise ConfigError(f"invalid training configuration: {self}")


class TrainState:
    """Model, optimizer, step counter, RNG and loss history of one training stream."""

    def __init__(self, model: Model, config: TrainConfig = TrainConfig()):
        self.model = model
        self.config = config
        self.optimizer = Adam(model.params, lr=config.lr)
        self.step = 0
        self.epoch = 0
        self.rng = np.random.default_rng(config.seed)
        self.history: list[dict] = []
        self.schedule = NoiseSchedule(config.ddpm_T)

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_rng_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def learning_rate(config: TrainConfig, step: int) -> float:
    if not config.decay_steps:
        return config.lr
    frac = min(step, config.decay_steps) / config.decay_steps
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def _finish_step(state: TrainState, loss: Tensor) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {state.step}")
    T.backward(loss)
    T.clip_grad_norm(state.model.params, state.config.clip_norm)
    state.optimizer.lr = learning_rate(state.config, state.step)
    state.optimizer.step()
    state.step += 1
    return value


def fm_training_step(state: TrainState, x1: np.ndarray, c: np.ndarray) -> float:
    """One optimizer update on a batch of embedded targets ``x1`` [B,K,...] and conditions ``c``."""
    rng = state.rng
    t = rng.random(x1.shape[0])
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    state.model.params.zero_grad()
    return _finish_step(state, fm_loss(state.model, x0, x1, c, t))


def ddpm_training_step(state: TrainState, x0: np.ndarray, c: np.ndarray) -> float:
    rng = state.rng
    t = rng.integers(1, state.schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    state.model.params.zero_grad()
    return _finish_step(state, ddpm_loss(state.model, x0, eps, c, t, state.schedule))


def training_step(state: TrainState, x: np.ndarray, c: np.ndarray) -> float:
    if state.config.objective == FM:
        return fm_training_step(state, x, c)
    return ddpm_training_step(state, x, c)


def validation_loss(state: TrainState, x: np.ndarray, c: np.ndarray, batch_size: int | None = None) -> float:
    """Objective on held-out data with a fixed noise stream, comparable across epochs."""
    rng = np.random.default_rng(state.config.val_seed)
    bs = batch_size or state.config.batch_size
    total, n = 0.0, 0
    with T.no_grad():
        for s in range(0, len(x), bs):
            xb, cb = x[s:s + bs], c[s:s + bs]
            if state.config.objective == FM:
                t = rng.random(len(xb))
                x0 = rng.standard_normal(xb.shape).astype(xb.dtype)
                loss = fm_loss(state.model, x0, xb, cb, t)
            else:
                t = rng.integers(1, state.schedule.T + 1, size=len(xb))
                eps = rng.standard_normal(xb.shape).astype(xb.dtype)
                loss = ddpm_loss(state.model, xb, eps, cb, t, state.schedule)
            total += loss.item() * len(xb)
            n += len(xb)
    return total / n


def fit(state: TrainState, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None = None,
        epochs: int | None = None, log: Callable[[dict], None] | None = None) -> list[dict]:
    """Run whole epochs of shuffled mini-batches; appends one history record per epoch."""
    x, c = train
    if len(x) != len(c) or len(x) == 0:
        raise ConfigError("training set must be non-empty with matching conditions")
    epochs = state.config.epochs if epochs is None else epochs
    bs = state.config.batch_size
    for _ in range(epochs):
        t0 = time.perf_counter()
        order = state.rng.permutation(len(x))
        losses = []
        for s in range(0, len(x), bs):
            idx = np.sort(order[s:s + bs])
            losses.append(training_step(state, x[idx], c[idx]))
        state.epoch += 1
        rec = {"epoch": state.epoch, "step": state.step, "train_loss": float(np.mean(losses)),
               "seconds": time.perf_counter() - t0}
        if val is not None and len(val[0]):
            rec["val_loss"] = validation_loss(state, *val)
        state.history.append(rec)
        if log is not None:
            log(rec)
    return state.history


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ConfigError(f"need at least {window} values, got {len(v)}")
    return np.convolve(v, np.ones(window) / window, mode="valid")


# -- conditioning and sampling ----------------------------------------------

@dataclass
class Conditioning:
    """Dense arrays derived from a condition volume, batched as [1,...]."""

    channels: np.ndarray  # [1,K+1,X,Y,Z]
    known: np.ndarray  # [1,1,X,Y,Z] bool
    target: np.ndarray  # [1,K,X,Y,Z] embedded labels (0 where unknown)

    @classmethod
    def from_condition(cls, cond: ConditionVolume, dtype=np.float32) -> "Conditioning":
        known = cond.known[None, None]
        lab = np.where(cond.known, cond.labels, 1).astype(np.int8)
        target = np.where(known, embed(lab, dtype)[None], 0).astype(dtype)
        return cls(condition_channels(cond).astype(dtype)[None], known, target)


def hard_condition_project(x_t: np.ndarray, t: float, cond: Conditioning, frozen_noise: np.ndarray, mode: str,
                           schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Overwrite labeled voxels with their on-path value; ``t`` is in [0,1] for FM and an index 0..T for DDPM."""
    if mode == FM:
        on_path = (1 - t) * frozen_noise + t * cond.target
    elif mode == DDPM:
        if schedule is None:
            raise ConfigError("DDPM projection needs a schedule")
        ab = schedule.alpha_bars[int(t)]
        on_path = math.sqrt(ab) * cond.target + math.sqrt(1 - ab) * frozen_noise
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return np.where(cond.known, on_path, x_t).astype(x_t.dtype)


def _check(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite sampler state {where}")


def _noise(cond: ConditionVolume, seed: int, dtype) -> tuple[np.random.Generator, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng, rng.standard_normal((1, K) + cond.labels.shape).astype(dtype)


def integrate_ode(model: Model, cond: ConditionVolume, steps: int = 50, seed: int = 0,
                  dtype=np.float32, project: bool = True) -> np.ndarray:
    """Euler integration from t=0 to t=1 with projection after every step; returns the final state.

    ``project=False`` still feeds the condition to the model but skips the overwrite.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    cd = Conditioning.from_condition(cond, dtype)
    _, x0 = _noise(cond, seed, dtype)
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        v = model.predict(x, np.array([k * dt]), cd.channels)
        x = (x + np.asarray(dt, dtype) * v).astype(dtype)
        if project:
            x = hard_condition_project(x, 1.0 if k == steps - 1 else (k + 1) * dt, cd, x0, FM)
        _check(x, f"at Euler step {k + 1}")
    return x


def sample_ode(model: Model, cond: ConditionVolume, steps: int = 50, seed: int = 0, dtype=np.float32,
               project: bool = True) -> np.ndarray:
    return decode(integrate_ode(model, cond, steps, seed, dtype, project)[0])


def integrate_ancestral(model: Model, cond: ConditionVolume, schedule: NoiseSchedule = NoiseSchedule(),
                        seed: int = 0, dtype=np.float32) -> np.ndarray:
    """DDPM reverse recursion x_T -> x_0 with projection after every step; returns x_0."""
    cd = Conditioning.from_condition(cond, dtype)
    rng, xT = _noise(cond, seed, dtype)
    x = hard_condition_project(xT, schedule.T, cd, xT, DDPM, schedule)
    for t in range(schedule.T, 0, -1):
        eps = model.predict(x, np.array([t / schedule.T]), cd.channels)
        coef = schedule.betas[t] / math.sqrt(1 - schedule.alpha_bars[t])
        mean = (x - coef * eps) / math.sqrt(schedule.alphas[t])
        if t > 1:
            z = rng.standard_normal(x.shape)
            x = (mean + math.sqrt(schedule.posterior_variance(t)) * z).astype(dtype)
        else:
            x = mean.astype(dtype)
        x = hard_condition_project(x, t - 1, cd, xT, DDPM, schedule)
        _check(x, f"at reverse step {t}")
    return x


def sample_ancestral(model: Model, cond: ConditionVolume, schedule: NoiseSchedule = NoiseSchedule(),
                     seed: int = 0, dtype=np.float32) -> np.ndarray:
    return decode(integrate_ancestral(model, cond, schedule, seed, dtype)[0])


def sample(model: Model, cond: ConditionVolume, objective: str, seed: int = 0, steps: int = 50,
           schedule: NoiseSchedule | None = None) -> np.ndarray:
    if objective == FM:
        return sample_ode(model, cond, steps, seed)
    if objective == DDPM:
        return sample_ancestral(model, cond, schedule or NoiseSchedule(), seed)
    raise ConfigError(f"unknown objective {objective!r}")


def prepare_batch(volumes: Sequence[np.ndarray], conds: Sequence[ConditionVolume],
                  dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack embedded truths [N,K,...] and condition tensors [N,K+1,...]."""
    x = np.stack([embed(v.astype(np.int8), dtype) for v in volumes])
    c = np.stack([condition_channels(cv).astype(dtype) for cv in conds])
    return x, c
