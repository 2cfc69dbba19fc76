"""Masked reverse diffusion.

Noise is placed only inside the target mask and the clean context is copied
back over every intermediate, so the denoiser sees clean context at every
step exactly as it did during training.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import nn

from .schedule import NoiseSchedule


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


def reimpose(x: torch.Tensor, x0_context: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Hard copy of the context pixels (no blending)."""
    return torch.where(m.bool(), x, x0_context)


def init_masked_latent(x0_context: torch.Tensor, m: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    eps = torch.randn(x0_context.shape, generator=rng, dtype=x0_context.dtype)
    return reimpose(eps, x0_context, m)


@torch.no_grad()
def ddpm_step(model, x_t, t: int, cond, m, x0_context, sched: NoiseSchedule, rng: torch.Generator):
    """Ancestral step ``t -> t-1`` with posterior variance; no noise at ``t = 1``."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    eps_hat = model(x_t, t, cond)
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t > 1:
        sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab))
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        mean = mean + sigma * z
    return reimpose(mean, x0_context, m)


@torch.no_grad()
def ddim_step(model, x_t, t: int, t_prev: int, cond, m, x0_context, sched: NoiseSchedule, eta: float, rng):
    if not 0 <= t_prev < t <= sched.T:
        raise ValueError(f"invalid DDIM step pair t={t}, t_prev={t_prev}")
    eps_hat = model(x_t, t, cond)
    ab = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
    return reimpose(out, x0_context, m)


def timestep_ladder(T: int, steps: int) -> list[int]:
    """Evenly spaced descending steps from ``T`` down to 1, both included."""
    if steps >= T:
        return list(range(T, 0, -1))
    if steps == 1:
        return [T]
    ladder = [int(round(T - i * (T - 1) / (steps - 1))) for i in range(steps)]
    return sorted(set(ladder), reverse=True)


@torch.no_grad()
def sample(
    model: nn.Module,
    x0_context: torch.Tensor,
    m: torch.Tensor,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    scfg: SamplerConfig,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Fill the masked region of ``x0_context`` (``(B, C, H, W)``).

    ``on_step(t, x)`` sees every intermediate, starting with ``x_T``. The
    result is clamped to ``[-1, 1]``; intermediates are not.
    """
    model.eval()
    rng = torch.Generator().manual_seed(scfg.seed)
    x = init_masked_latent(x0_context, m, rng)
    ladder = timestep_ladder(sched.T, scfg.steps)
    if on_step is not None:
        on_step(ladder[0], x)
    if scfg.kind == "ddpm":
        if len(ladder) != sched.T:
            raise ValueError("ddpm sampling requires steps >= T; use ddim for strided ladders")
        for t in ladder:
            x = ddpm_step(model, x, t, cond, m, x0_context, sched, rng)
            if on_step is not None:
                on_step(t - 1, x)
    else:
        for i, t in enumerate(ladder):
            t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
            x = ddim_step(model, x, t, t_prev, cond, m, x0_context, sched, scfg.eta, rng)
            if on_step is not None:
                on_step(t_prev, x)
    if not torch.isfinite(x).all():
        raise FloatingPointError("sampler produced non-finite values")
    return reimpose(x.clamp(-1.0, 1.0), x0_context, m)
