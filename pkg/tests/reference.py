"""Independent oracles for the tests.

A plain (unmasked) DDPM ancestral sampler written from the textbook update,
sharing nothing with the package's sampler or schedule code, and closed-form
parameter counts derived layer by layer from the denoiser config.
"""
import numpy as np
import torch

from viscontext.denoiser import DenoiserConfig


def reference_ddpm_chain(model, shape, cond, T, beta_start, beta_end, seed):
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alphas_cumprod = np.cumprod(alphas)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen)
    chain = [x]
    with torch.no_grad():
        for idx in reversed(range(T)):
            eps = model(x, idx + 1, cond)
            coef = betas[idx] / np.sqrt(1.0 - alphas_cumprod[idx])
            mean = (x - coef * eps) / np.sqrt(alphas[idx])
            if idx > 0:
                var = betas[idx] * (1.0 - alphas_cumprod[idx - 1]) / (1.0 - alphas_cumprod[idx])
                x = mean + np.sqrt(var) * torch.randn(shape, generator=gen)
            else:
                x = mean
            chain.append(x)
    return chain


def expected_param_count(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count, derived layer by layer from the architecture."""
    C, td, cd, V = cfg.in_channels, cfg.time_dim, cfg.cond_dim, cfg.cond_vocab
    w = cfg.widths()

    def res(ci, co):
        n = 2 * ci + ci * co * 9 + co + td * co + co + 2 * co + co * co * 9 + co
        return n + (ci * co + co if ci != co else 0)

    def attn(ch):
        n = 2 * ch + ch * ch + ch  # norm + proj_in
        n += 2 * ch + 3 * ch * ch + ch * ch + ch  # norm1 + attn1
        n += 2 * ch + ch * ch + 2 * cd * ch + ch * ch + ch  # norm2 + attn2
        n += 2 * ch + ch * 2 * ch + 2 * ch + 2 * ch * ch + ch  # norm3 + ff
        return n + ch * ch + ch  # proj_out

    total = 2 * (td * td + td) + V * cd + C * w[0] * 9 + w[0]
    c_prev = w[0]
    for lvl in range(cfg.depth):
        total += res(c_prev, w[lvl]) + (attn(w[lvl]) if lvl in cfg.attn_levels else 0)
        if lvl < cfg.depth - 1:
            total += w[lvl] * w[lvl] * 9 + w[lvl]
        c_prev = w[lvl]
    total += res(c_prev, c_prev) + (attn(c_prev) if cfg.depth - 1 in cfg.attn_levels else 0)
    for lvl in reversed(range(cfg.depth)):
        total += res(c_prev + w[lvl], w[lvl]) + (attn(w[lvl]) if lvl in cfg.attn_levels else 0)
        if lvl > 0:
            total += w[lvl] * w[lvl - 1] * 9 + w[lvl - 1]
            c_prev = w[lvl - 1]
        else:
            c_prev = w[lvl]
    return total + 2 * w[0] + w[0] * C * 9 + C


def expected_adapter_count(cfg: DenoiserConfig, r: int) -> int:
    w = cfg.widths()
    blocks = [w[lvl] for lvl in cfg.attn_levels] * 2
    if cfg.depth - 1 in cfg.attn_levels:
        blocks.append(w[-1])
    return sum(3 * r * 2 * ch for ch in blocks)
