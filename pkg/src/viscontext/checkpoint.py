"""Checkpoints: named tensors in safetensors plus a JSON manifest.

A base checkpoint directory holds ``weights.safetensors`` and
``manifest.json``. An adapter checkpoint holds ``adapter.safetensors`` and a
manifest naming the content hash of the base it was trained on. Training
snapshots add optimizer moments and the batch RNG state so a run can resume
exactly where it stopped.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .denoiser import Denoiser, DenoiserConfig
from .lora import LoraConfig, adapter_state_dict, attach_lora, base_state_dict, load_adapter_state
from .training import TrainState

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def content_hash(tensors: dict[str, torch.Tensor]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def model_hash(model: nn.Module) -> str:
    return content_hash(base_state_dict(model))


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_manifest(ckpt: Path) -> dict:
    f = ckpt / "manifest.json"
    if not f.exists():
        raise CheckpointError(f"no manifest at {f}")
    manifest = json.loads(f.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def save_base(model: Denoiser, out: str | Path, step: int, schedule: dict) -> str:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.contiguous() for k, v in base_state_dict(model).items()}
    save_file(tensors, str(out / "weights.safetensors"))
    digest = content_hash(tensors)
    _write_manifest(
        out / "manifest.json",
        {
            "format_version": FORMAT_VERSION,
            "kind": "base",
            "config": model.cfg.to_json(),
            "lora_config": None,
            "step": step,
            "schedule": schedule,
            "content_hash": digest,
        },
    )
    return digest


def load_base(path: str | Path) -> tuple[Denoiser, dict]:
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest["kind"] != "base":
        raise CheckpointError(f"{path} is not a base checkpoint")
    model = Denoiser(DenoiserConfig.from_json(manifest["config"]))
    tensors = load_file(str(path / "weights.safetensors"))
    if content_hash(tensors) != manifest["content_hash"]:
        raise CheckpointError(f"weights in {path} do not match the manifest hash")
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest


def save_adapter(model: nn.Module, out: str | Path, lcfg: LoraConfig, base_hash: str, step: int, schedule: dict) -> str:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.contiguous() for k, v in adapter_state_dict(model).items()}
    save_file(tensors, str(out / "adapter.safetensors"))
    digest = content_hash(tensors)
    _write_manifest(
        out / "manifest.json",
        {
            "format_version": FORMAT_VERSION,
            "kind": "adapter",
            "config": model.cfg.to_json(),
            "lora_config": lcfg.to_json(),
            "step": step,
            "schedule": schedule,
            "base_hash": base_hash,
            "content_hash": digest,
        },
    )
    return digest


def load_adapter(model: nn.Module, path: str | Path) -> tuple[nn.Module, dict]:
    """Attach the adapter at ``path`` to ``model`` after checking the base hash."""
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest["kind"] != "adapter":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    actual = model_hash(model)
    if actual != manifest["base_hash"]:
        raise CheckpointError(
            f"adapter expects base {manifest['base_hash'][:12]}, got {actual[:12]}"
        )
    lcfg = LoraConfig.from_json(manifest["lora_config"])
    attach_lora(model, lcfg)
    load_adapter_state(model, load_file(str(path / "adapter.safetensors")))
    model.eval()
    return model, manifest


def save_snapshot(state: TrainState, out: str | Path, extra: dict | None = None) -> None:
    """Trainable tensors, moments, step, RNG and loss history."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in state.trainable().items():
        m, v = state.moments[name]
        tensors[f"param/{name}"] = p.detach().contiguous()
        tensors[f"exp_avg/{name}"] = m.contiguous()
        tensors[f"exp_avg_sq/{name}"] = v.contiguous()
    tensors["rng_state"] = state.rng.get_state()
    tensors["loss_history"] = torch.tensor(state.loss_history, dtype=torch.float64)
    save_file(tensors, str(out / "state.safetensors"))
    _write_manifest(out / "manifest.json", {"format_version": FORMAT_VERSION, "kind": "snapshot", "step": state.step, **(extra or {})})


def load_snapshot(state: TrainState, path: str | Path) -> TrainState:
    path = Path(path)
    manifest = _read_manifest(path)
    tensors = load_file(str(path / "state.safetensors"))
    params = state.trainable()
    names = {k.split("/", 1)[1] for k in tensors if k.startswith("param/")}
    if names != set(params):
        raise CheckpointError("snapshot tensors do not match the trainable set")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(tensors[f"param/{name}"])
            state.moments[name][0].copy_(tensors[f"exp_avg/{name}"])
            state.moments[name][1].copy_(tensors[f"exp_avg_sq/{name}"])
    state.rng.set_state(tensors["rng_state"])
    state.loss_history = [float(x) for x in np.asarray(tensors["loss_history"])]
    state.step = int(manifest["step"])
    return state


def latest_snapshot(run_dir: str | Path) -> Path | None:
    snaps = sorted(Path(run_dir).glob("snapshots/step_*"), key=lambda p: int(p.name.split("_")[1]))
    return snaps[-1] if snaps else None
