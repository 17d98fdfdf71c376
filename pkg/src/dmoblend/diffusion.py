"""Noise schedule, forward corruption, reverse posterior and denoiser training.

Arrays in a ``NoiseSchedule`` are indexed by the step ``t`` itself: entry 0 is
the clean anchor (``alpha_bar[0] == 1``, ``beta[0] == 0``) and entries
``1..T`` are the diffusion steps.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserModel

log = logging.getLogger(__name__)

MAX_BETA = 0.999


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    schedule_offset: float = 0.008

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (self.T + 1,):
            raise ValueError(f"beta must have T+1={self.T + 1} entries (index 0 unused)")
        self.beta[0] = 0.0
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def check_step(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")


def cosine_alpha_bar(T: int, offset: float = 0.008) -> np.ndarray:
    """Closed-form cosine-schedule ᾱ_t for t = 0..T (before any clipping)."""
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + offset) / (1.0 + offset) * math.pi / 2) ** 2
    return f / f[0]


def build_cosine_schedule(T: int, offset: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise ValueError("need at least two diffusion steps")
    if offset <= 0:
        raise ValueError("schedule offset must be positive")
    ab = cosine_alpha_bar(T, offset)
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
    return NoiseSchedule(T=T, beta=beta, schedule_offset=offset)


def _coef(values: np.ndarray, t, ndim: int):
    c = np.asarray(values[t], dtype=np.float64)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(sched: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Corrupt ``x0`` to step ``t`` in one shot.  ``t`` may be a per-row array."""
    x0 = np.asarray(x0)
    if np.shape(x0) != np.shape(eps):
        raise ValueError("x0 and eps must have the same shape")
    if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > sched.T):
        raise ValueError("t must lie in [1, T]")
    ab = _coef(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean(sched: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    if sched.beta[t] == 0.0:
        return x_t / math.sqrt(a)  # no corruption at this step, also avoids 0/0 when abar is 1
    return (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)


def posterior_variance(sched: NoiseSchedule, t: int) -> float:
    if sched.beta[t] == 0.0:
        return 0.0
    return (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t]) * sched.beta[t]


def posterior_step(sched: NoiseSchedule, x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: np.ndarray | None) -> np.ndarray:
    """One reverse step x_t -> x_{t-1}.  At t = 1 the mean is returned without noise."""
    sched.check_step(t)
    mean = posterior_mean(sched, x_t, eps_hat, t)
    if t == 1:
        return mean
    return mean + math.sqrt(posterior_variance(sched, t)) * z


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 4096
    learning_rate: float = 1e-3
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.warmup_steps) <= 0 or self.learning_rate < 0:
            raise ValueError("batch_size, epochs and warmup_steps must be positive")


def warmup_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate for optimizer step ``step`` (1-based): linear ramp then flat."""
    return cfg.learning_rate * min(1.0, step / cfg.warmup_steps)


def train(model: DenoiserModel, data: np.ndarray, sched: NoiseSchedule, cfg: TrainConfig,
          callback=None) -> tuple[DenoiserModel, list[float]]:
    """Fit ``model`` to predict the injected noise on ``data`` (images in [0, 1]).

    Returns the model and the per-epoch mean loss.  All randomness (shuffling,
    step draws, noise) comes from one generator seeded with ``cfg.seed``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("training data must be a nonempty stack of (n_pt, n) images")
    if data.shape[1] != model.config.n_pt:
        raise ValueError(f"images have {data.shape[1]} rows, model expects {model.config.n_pt}")
    if sched.T != model.config.steps:
        raise ValueError(f"schedule has T={sched.T}, model is configured for T={model.config.steps}")
    images = 2.0 * data - 1.0

    rng = np.random.default_rng(cfg.seed)
    dtype = model.out.weight.dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    losses = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue  # batch norm needs more than one sample
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            xt = q_sample(sched, x0, t, eps)
            step += 1
            for group in opt.param_groups:
                group["lr"] = warmup_lr(cfg, step)
            pred = model(torch.from_numpy(xt).to(dtype)[:, None], torch.from_numpy(t))
            loss = torch.mean((pred[:, 0] - torch.from_numpy(eps).to(dtype)) ** 2)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
        log.debug("epoch %d loss %.5f", epoch + 1, losses[-1])
        if callback is not None:
            callback(epoch + 1, losses[-1])
    model.eval()
    return model, losses


def write_loss_csv(losses, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(losses, start=1):
            writer.writerow([i, repr(float(v))])
