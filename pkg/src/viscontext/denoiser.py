"""Tiny conditional U-Net that predicts the noise added to a canvas.

Layout follows the usual latent-diffusion U-Net at toy size: residual conv
blocks with a timestep embedding, and at selected levels a transformer block
holding a self-attention (``attn1``) and a cross-attention (``attn2``) over
learned condition-token embeddings.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 32
    depth: int = 3
    attn_levels: tuple[int, ...] = (1, 2)
    cond_vocab: int = 32
    cond_dim: int = 64
    cond_len: int = 4
    time_dim: int = 128
    heads: int = 4
    groups: int = 8

    def __post_init__(self):
        self.attn_levels = tuple(int(a) for a in self.attn_levels)
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if not self.attn_levels:
            raise ValueError("attn_levels must name at least one level")
        if any(not 0 <= a < self.depth for a in self.attn_levels):
            raise ValueError(f"attn_levels {self.attn_levels} outside [0, {self.depth})")
        for name in ("in_channels", "base_width", "cond_vocab", "cond_dim", "cond_len", "time_dim", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.base_width % self.groups:
            raise ValueError("base_width must be divisible by groups")

    def widths(self) -> list[int]:
        return [self.base_width * min(2**level, 4) for level in range(self.depth)]

    @property
    def stride(self) -> int:
        return 2 ** (self.depth - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["attn_levels"] = list(self.attn_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding of shape ``(h * w, dim)``; half the
    channels encode the row, half the column."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float32) / max(quarter, 1))
    ys = torch.arange(h, dtype=torch.float32)[:, None] * freqs
    xs = torch.arange(w, dtype=torch.float32)[:, None] * freqs
    row = torch.cat([ys.sin(), ys.cos()], dim=-1)[:, None, :].expand(h, w, 2 * quarter)
    col = torch.cat([xs.sin(), xs.cos()], dim=-1)[None, :, :].expand(h, w, 2 * quarter)
    pe = torch.cat([row, col], dim=-1).reshape(h * w, 4 * quarter)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Multi-head attention with separately named q/k/v/out projections."""

    def __init__(self, dim: int, context_dim: int | None, heads: int):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, d = x.shape
        q = self.to_q(x).view(b, n, self.heads, d // self.heads).transpose(1, 2)
        k = self.to_k(context).view(b, context.shape[1], self.heads, d // self.heads).transpose(1, 2)
        v = self.to_v(context).view(b, context.shape[1], self.heads, d // self.heads).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, cond_dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, None, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, cond_dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x, cond):
        x = x + self.attn1(self.norm1(x))
        x = x + self.attn2(self.norm2(x), cond)
        return x + self.ff(self.norm3(x))


class SpatialTransformer(nn.Module):
    def __init__(self, ch: int, cond_dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.block = TransformerBlock(ch, cond_dim, heads)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        y = self.proj_in(self.norm(x))
        y = y.flatten(2).transpose(1, 2) + position_encoding(h, w, c).to(y.dtype)
        y = self.block(y, cond)
        y = y.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(y)


class Level(nn.Module):
    def __init__(self, c_in: int, c_out: int, cfg: DenoiserConfig, attn: bool):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.groups)
        self.attn = SpatialTransformer(c_out, cfg.cond_dim, cfg.heads, cfg.groups) if attn else None

    def forward(self, x, temb, cond):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, cond)
        return x


class Denoiser(nn.Module):
    """Noise predictor ``eps(x_t, t, tokens)`` on ``(B, C, H, W)`` canvases.

    ``H`` and ``W`` must be divisible by ``2 ** (depth - 1)``.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.token_embedding = nn.Embedding(cfg.cond_vocab, cfg.cond_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c_prev = widths[0]
        for level, w in enumerate(widths):
            self.down.append(Level(c_prev, w, cfg, level in cfg.attn_levels))
            if level < cfg.depth - 1:
                self.downsample.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            c_prev = w

        self.mid = Level(c_prev, c_prev, cfg, (cfg.depth - 1) in cfg.attn_levels)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            w = widths[level]
            self.up.append(Level(c_prev + w, w, cfg, level in cfg.attn_levels))
            if level > 0:
                self.upsample.append(nn.Conv2d(w, widths[level - 1], 3, padding=1))
                c_prev = widths[level - 1]
            else:
                c_prev = w

        self.norm_out = nn.GroupNorm(cfg.groups, c_prev)
        self.conv_out = nn.Conv2d(c_prev, cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if c != self.cfg.in_channels or h % self.cfg.stride or w % self.cfg.stride:
            raise ValueError(
                f"input shape {tuple(x.shape)} incompatible with {self.cfg.in_channels} channels "
                f"and stride {self.cfg.stride}"
            )
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        cond = torch.as_tensor(cond, dtype=torch.long)
        if cond.ndim == 1:
            cond = cond[None]
        if cond.shape[0] == 1 and b > 1:
            cond = cond.expand(b, -1)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))
        ctx = self.token_embedding(cond)

        h_ = self.conv_in(x)
        skips = []
        for level, block in enumerate(self.down):
            h_ = block(h_, temb, ctx)
            skips.append(h_)
            if level < self.cfg.depth - 1:
                h_ = self.downsample[level](h_)
        h_ = self.mid(h_, temb, ctx)
        for i, block in enumerate(self.up):
            h_ = block(torch.cat([h_, skips.pop()], dim=1), temb, ctx)
            if i < self.cfg.depth - 1:
                h_ = F.interpolate(h_, scale_factor=2.0, mode="nearest")
                h_ = self.upsample[i](h_)
        return self.conv_out(F.silu(self.norm_out(h_)))


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Build a denoiser with parameters drawn deterministically from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(cfg)
    return model


def predict_noise(model: nn.Module, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    """Single-canvas or batched noise prediction; accepts ``(C, H, W)`` too."""
    if x_t.ndim == 3:
        return model(x_t[None], t, cond)[0]
    return model(x_t, t, cond)


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def trainable_fraction(model: nn.Module) -> float:
    total = count_parameters(model)
    return count_parameters(model, trainable_only=True) / total if total else 0.0


def set_trainable(model: nn.Module, flag: bool) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(flag)
    return model


def attention_projection_names(model: nn.Module, kind: str = "attn1") -> list[str]:
    """Dotted names of every q/k/v projection in the ``kind`` attention layers."""
    return [
        name
        for name, mod in model.named_modules()
        if name.rsplit(".", 1)[-1] in ("to_q", "to_k", "to_v") and name.split(".")[-2] == kind
    ]
