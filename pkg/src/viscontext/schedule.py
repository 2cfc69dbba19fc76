"""Noise schedules and the masked forward process.

Timesteps are 1-indexed: ``t = 1..T``. Tables are stored 0-indexed, so the
value for step ``t`` lives at ``[t - 1]``. ``alpha_bar(0)`` is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    beta_start: float
    beta_end: float

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def to_json(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T, beta, alpha, alpha_bar, float(beta_start), float(beta_end))


def short_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule with the betas rescaled by ``1000 / T`` so a short chain
    reaches a comparable terminal noise level to the 1000-step default."""
    scale = 1000.0 / T
    return linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def schedule_from_json(d: dict) -> NoiseSchedule:
    return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def _per_sample(values: torch.Tensor, t, x: torch.Tensor) -> torch.Tensor:
    """Gather table values for step(s) ``t`` and reshape for broadcasting over ``x``."""
    t = torch.as_tensor(t, dtype=torch.long)
    out = values[t - 1].to(x.dtype)
    if out.ndim == 0:
        return out
    return out.reshape(-1, *([1] * (x.ndim - 1)))


def masked_noise(x0: torch.Tensor, m: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise only the masked region of ``x0`` to step ``t``.

    ``x0``/``eps`` are ``(..., C, H, W)``; ``m`` broadcasts over channels.
    ``t`` is an int or a ``(B,)`` tensor of steps. Off the mask the output is
    ``x0`` bit-for-bit.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    tt = torch.as_tensor(t)
    if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > sched.T:
        raise ValueError(f"timestep(s) {t} outside [1, {sched.T}]")
    ab = _per_sample(sched.alpha_bar, tt, x0)
    noised = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return torch.where(m.bool(), noised, x0)


def sample_timestep(rng: torch.Generator, T: int, size: int | None = None):
    """Uniform step(s) in ``[1, T]``. Returns an int, or a ``(size,)`` tensor."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    n = 1 if size is None else size
    t = torch.randint(1, T + 1, (n,), generator=rng)
    return int(t[0]) if size is None else t
