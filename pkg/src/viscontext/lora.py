"""Low-rank adapters on named linear projections."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .denoiser import set_trainable

DEFAULT_TARGETS = ("attn1.to_q", "attn1.to_k", "attn1.to_v")


@dataclass
class LoraConfig:
    r: int = 32
    alpha: float = 4.0
    targets: tuple[str, ...] = field(default_factory=lambda: DEFAULT_TARGETS)
    init_std: float = 0.01

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.r < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.r}")
        if not self.targets:
            raise ValueError("LoRA needs at least one target")

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def to_json(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LoraConfig":
        return cls(**d)


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * x A^T B^T`` with the base weight frozen."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, generator: torch.Generator, init_std: float = 0.01):
        super().__init__()
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scale = alpha / r
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_A = nn.Parameter(
            torch.randn(r, base.in_features, generator=generator, dtype=base.weight.dtype) * init_std
        )
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=base.weight.dtype))

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.lora_B @ self.lora_A)

    def forward(self, x):
        return self.base(x) + self.scale * ((x @ self.lora_A.t()) @ self.lora_B.t())


def _resolve(model: nn.Module, targets) -> list[str]:
    names = [n for n, _ in model.named_modules()]
    resolved = []
    for target in targets:
        hits = [n for n in names if n == target or n.endswith("." + target)]
        if not hits:
            raise KeyError(f"LoRA target {target!r} matches no module")
        resolved.extend(hits)
    return sorted(set(resolved))


def _set_submodule(model: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, child, module)


def lora_modules(model: nn.Module) -> dict[str, LoRALinear]:
    return {n: m for n, m in model.named_modules() if isinstance(m, LoRALinear)}


def attach_lora(model: nn.Module, lcfg: LoraConfig, seed: int = 0) -> nn.Module:
    """Freeze ``model`` and wrap every target projection with an adapter.

    Mutates and returns ``model``. B starts at zero, so the function computed
    is unchanged until the first update.
    """
    if lora_modules(model):
        raise RuntimeError("model already carries LoRA adapters")
    names = _resolve(model, lcfg.targets)
    gen = torch.Generator().manual_seed(seed)
    set_trainable(model, False)
    for name in names:
        base = model.get_submodule(name)
        if not isinstance(base, nn.Linear):
            raise TypeError(f"LoRA target {name!r} is {type(base).__name__}, not Linear")
        _set_submodule(model, name, LoRALinear(base, lcfg.r, lcfg.alpha, gen, lcfg.init_std))
    return model


def merge_lora(model: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight and drop the adapters."""
    mods = lora_modules(model)
    if not mods:
        raise RuntimeError("no LoRA adapters to merge")
    with torch.no_grad():
        for name, mod in mods.items():
            mod.base.weight += mod.delta_weight()
            _set_submodule(model, name, mod.base)
    return model


def adapter_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        f"{name}.{k}": getattr(mod, k).detach().clone()
        for name, mod in lora_modules(model).items()
        for k in ("lora_A", "lora_B")
    }


def base_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    """State dict with adapter tensors removed and wrapped names restored, so
    it is key-compatible with an unadapted model."""
    out = {}
    for k, v in model.state_dict().items():
        if ".lora_A" in k or ".lora_B" in k:
            continue
        out[k.replace(".base.", ".")] = v
    return out


def load_adapter_state(model: nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    mods = lora_modules(model)
    expected = {f"{n}.{k}" for n in mods for k in ("lora_A", "lora_B")}
    if set(tensors) != expected:
        missing, extra = expected - set(tensors), set(tensors) - expected
        raise KeyError(f"adapter tensors mismatch; missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for key, value in tensors.items():
            name, _, attr = key.rpartition(".")
            getattr(mods[name], attr).copy_(value)
