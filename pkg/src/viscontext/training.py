"""Masked-loss training: batches, AdamW and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
from torch import nn

from .schedule import NoiseSchedule, masked_noise

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    loss_normalization: str = "masked_mean"
    eval_every: int = 250
    grad_clip: float | None = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_normalization not in ("masked_mean", "sum"):
            raise ValueError(f"unknown loss normalization {self.loss_normalization!r}")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps must be >= 0 and eval_every >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def masked_loss(eps: torch.Tensor, eps_hat: torch.Tensor, m: torch.Tensor, normalization: str = "masked_mean"):
    """Squared error of the noise prediction restricted to the mask.

    Off-mask entries of ``eps``/``eps_hat`` never touch the result, not even
    through non-finite values.
    """
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    mask = m.bool().expand_as(eps)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask is empty; masked loss is undefined")
    diff = torch.where(mask, eps - eps_hat, torch.zeros((), dtype=eps.dtype))
    total = diff.pow(2).sum()
    if normalization == "masked_mean":
        return total / count
    if normalization == "sum":
        return total
    raise ValueError(f"unknown loss normalization {normalization!r}")


@dataclass
class Batch:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    m: torch.Tensor
    cond: torch.Tensor
    x0: torch.Tensor

    def __len__(self):
        return len(self.t)


def make_batch(dataset, rng: torch.Generator, sched: NoiseSchedule, batch_size: int) -> Batch:
    """Draw samples, steps and noise from ``rng``; noise only the masked region."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    idx = torch.randint(0, len(dataset), (batch_size,), generator=rng)
    x0, m, cond = dataset.get(idx)
    t = torch.randint(1, sched.T + 1, (batch_size,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return Batch(masked_noise(x0, m, t, eps, sched), t, eps, m, cond, x0)


@dataclass
class TrainState:
    model: nn.Module
    moments: dict[str, tuple[torch.Tensor, torch.Tensor]]
    rng: torch.Generator
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.model.named_parameters() if p.requires_grad}


def init_state(model: nn.Module, seed: int) -> TrainState:
    moments = {
        n: (torch.zeros_like(p), torch.zeros_like(p)) for n, p in model.named_parameters() if p.requires_grad
    }
    return TrainState(model, moments, torch.Generator().manual_seed(seed))


def adamw_step(state: TrainState, grads: dict[str, torch.Tensor], tcfg: TrainConfig) -> TrainState:
    """One decoupled-weight-decay Adam update on the trainable tensors.

    ``grads`` must hold exactly one entry per trainable tensor. Frozen
    tensors are never touched.
    """
    params = state.trainable()
    if set(grads) != set(params):
        raise KeyError(
            f"gradients for {sorted(set(grads) ^ set(params))} do not match the trainable set"
        )
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    beta1, beta2 = tcfg.betas
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.moments[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if tcfg.weight_decay:
                p.mul_(1.0 - tcfg.learning_rate * tcfg.weight_decay)
            denom = (v.sqrt() / math.sqrt(bc2)).add_(tcfg.eps)
            p.addcdiv_(m, denom, value=-tcfg.learning_rate / bc1)
    state.step = step
    return state


def compute_gradients(state: TrainState, batch: Batch, tcfg: TrainConfig) -> tuple[float, dict[str, torch.Tensor]]:
    params = state.trainable()
    state.model.zero_grad(set_to_none=True)
    eps_hat = state.model(batch.x_t, batch.t, batch.cond)
    loss = masked_loss(batch.eps, eps_hat, batch.m, tcfg.loss_normalization)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {state.step + 1}")
    loss.backward()
    if tcfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(list(params.values()), tcfg.grad_clip)
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    return value, grads


def train(
    model: nn.Module,
    dataset,
    sched: NoiseSchedule,
    tcfg: TrainConfig,
    state: TrainState | None = None,
    callback: Callable[[TrainState], None] | None = None,
) -> tuple[TrainState, list[float]]:
    """Run until ``state.step == tcfg.max_steps``.

    Pass a restored ``state`` to resume. ``callback`` fires after every
    ``eval_every``-th step and is where evaluation and snapshots hook in.
    """
    state = state if state is not None else init_state(model, tcfg.seed)
    model.train()
    while state.step < tcfg.max_steps:
        batch = make_batch(dataset, state.rng, sched, tcfg.batch_size)
        loss, grads = compute_gradients(state, batch, tcfg)
        adamw_step(state, grads, tcfg)
        state.loss_history.append(loss)
        if state.step % 100 == 0:
            log.info("step %d loss %.5f", state.step, loss)
        if callback is not None and state.step % tcfg.eval_every == 0:
            callback(state)
    model.zero_grad(set_to_none=True)
    model.eval()
    return state, list(state.loss_history)


def smoothed(values: list[float], window: int) -> list[float]:
    """Trailing moving average."""
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
