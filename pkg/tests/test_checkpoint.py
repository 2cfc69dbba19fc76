import json

import pytest
import torch

from viscontext.checkpoint import (
    CheckpointError,
    content_hash,
    latest_snapshot,
    load_adapter,
    load_base,
    load_snapshot,
    model_hash,
    save_adapter,
    save_base,
    save_snapshot,
)
from viscontext.denoiser import init_denoiser
from viscontext.lora import LoraConfig, attach_lora
from viscontext.tasks import gen_colorize
from viscontext.training import TrainConfig, init_state, train

LCFG = LoraConfig(r=4, alpha=4.0)


def test_content_hash_is_order_free_and_sensitive():
    a = {"x": torch.zeros(3), "y": torch.ones(2, 2)}
    b = {"y": torch.ones(2, 2), "x": torch.zeros(3)}
    assert content_hash(a) == content_hash(b)
    assert content_hash(a) != content_hash({"x": torch.zeros(3), "y": torch.ones(4)})
    assert content_hash(a) != content_hash({"x": torch.zeros(3, dtype=torch.float64), "y": torch.ones(2, 2)})
    c = {"x": torch.zeros(3), "y": torch.ones(2, 2)}
    c["y"][0, 0] = 1.0 + 2**-20
    assert content_hash(a) != content_hash(c)


def test_base_roundtrip(tiny_model, short, tmp_path):
    digest = save_base(tiny_model, tmp_path / "base", 7, short.to_json())
    model, manifest = load_base(tmp_path / "base")
    assert manifest["step"] == 7 and manifest["content_hash"] == digest == model_hash(model)
    assert manifest["lora_config"] is None
    x = torch.randn(1, 3, 32, 32)
    assert torch.equal(model(x, 5, torch.zeros(1, 4, dtype=torch.long)), tiny_model(x, 5, torch.zeros(1, 4, dtype=torch.long)))


def test_base_tamper_detected(tiny_model, short, tmp_path):
    save_base(tiny_model, tmp_path / "base", 0, short.to_json())
    f = tmp_path / "base" / "manifest.json"
    m = json.loads(f.read_text())
    m["content_hash"] = "0" * 64
    f.write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_base(tmp_path / "base")
    m["format_version"] = 99
    f.write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="format"):
        load_base(tmp_path / "base")


def test_adapter_roundtrip_and_base_check(tiny_cfg, short, tmp_path):
    model = init_denoiser(tiny_cfg, 0)
    base_hash = model_hash(model)
    attach_lora(model, LCFG, seed=1)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.endswith("lora_B"):
                p.normal_()
    assert model_hash(model) == base_hash
    save_adapter(model, tmp_path / "ad", LCFG, base_hash, 3, short.to_json())
    manifest = json.loads((tmp_path / "ad" / "manifest.json").read_text())
    assert manifest["base_hash"] == base_hash and manifest["kind"] == "adapter"

    fresh, _ = load_adapter(init_denoiser(tiny_cfg, 0), tmp_path / "ad")
    x = torch.randn(2, 3, 32, 32)
    cond = torch.zeros(2, 4, dtype=torch.long)
    assert torch.equal(fresh(x, 9, cond), model(x, 9, cond))
    with pytest.raises(CheckpointError, match="expects base"):
        load_adapter(init_denoiser(tiny_cfg, 1), tmp_path / "ad")


def test_snapshot_resume_matches_uninterrupted(tiny_cfg, short, tmp_path):
    data = gen_colorize(0, 6).tensors()
    tcfg = TrainConfig(batch_size=2, max_steps=6, seed=4)

    full = init_denoiser(tiny_cfg, 0)
    state_full, losses_full = train(full, data, short, tcfg)

    part = init_denoiser(tiny_cfg, 0)
    half = TrainConfig(**{**tcfg.to_json(), "max_steps": 3})
    state_half, _ = train(part, data, short, half)
    save_snapshot(state_half, tmp_path / "snapshots" / "step_3")
    assert latest_snapshot(tmp_path) == tmp_path / "snapshots" / "step_3"

    resumed_model = init_denoiser(tiny_cfg, 0)
    state = load_snapshot(init_state(resumed_model, seed=123), latest_snapshot(tmp_path))
    assert state.step == 3
    state, losses = train(resumed_model, data, short, tcfg, state=state)
    assert losses == losses_full
    for (n, a), (_, b) in zip(full.state_dict().items(), resumed_model.state_dict().items()):
        assert torch.equal(a, b), n


def test_snapshot_rejects_other_trainable_set(tiny_cfg, tmp_path):
    model = init_denoiser(tiny_cfg, 0)
    save_snapshot(init_state(model, 0), tmp_path / "s")
    lora = attach_lora(init_denoiser(tiny_cfg, 0), LCFG)
    with pytest.raises(CheckpointError):
        load_snapshot(init_state(lora, 0), tmp_path / "s")


def test_latest_snapshot_numeric_order(tmp_path):
    assert latest_snapshot(tmp_path) is None
    for s in (2, 10, 9):
        (tmp_path / "snapshots" / f"step_{s}").mkdir(parents=True)
    assert latest_snapshot(tmp_path).name == "step_10"
