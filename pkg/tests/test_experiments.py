import math

import numpy as np
import pytest
import torch

from viscontext.experiments import (
    EVAL_COLUMNS,
    LAYOUT_COLUMNS,
    convergence_study,
    evaluate,
    implied_shapes,
    layout_study,
    masked_mse,
    positional_error,
    psnr_from_mse,
    read_csv,
)
from viscontext.denoiser import init_denoiser
from viscontext.lora import LoraConfig
from viscontext.sampler import SamplerConfig
from viscontext.tasks import CONTROL_BG, edge_map, gen_colorize
from viscontext.training import TrainConfig


def test_masked_mse_examples():
    truth = torch.zeros(1, 3, 4, 4)
    m = torch.zeros(1, 1, 4, 4)
    m[..., :2, :] = 1
    assert masked_mse(truth, truth, m) == 0.0
    gen = truth.clone()
    gen[..., :2, :] = 0.1
    gen[..., 2:, :] = 5.0  # outside the mask, ignored
    assert masked_mse(gen, truth, m) == pytest.approx(0.01, rel=1e-6)
    with pytest.raises(ValueError):
        masked_mse(gen, truth, torch.zeros_like(m))
    with pytest.raises(ValueError):
        masked_mse(gen[..., :3], truth, m)


def test_psnr():
    assert psnr_from_mse(0.0) == math.inf
    assert psnr_from_mse(4.0) == pytest.approx(0.0)
    assert psnr_from_mse(0.04) == pytest.approx(20.0)
    # halving the error by 10x buys 10 dB
    assert psnr_from_mse(0.001) - psnr_from_mse(0.01) == pytest.approx(10.0)


def _panel_with_square(top, left, size=8, hw=32):
    p = np.full((hw, hw, 3), CONTROL_BG, np.float32)
    p[top : top + size, left : left + size] = [0.8, -0.6, 0.2]
    return p


def test_positional_error_zero_when_shapes_land_on_edges():
    target = _panel_with_square(4, 6)
    cond = edge_map(target)
    # edges straddle the boundary, so the filled region is the square plus a 1px rim
    assert 64 <= implied_shapes(cond).sum() <= 100
    assert positional_error(target, cond) == pytest.approx(0.0, abs=1e-9)


def test_positional_error_measures_shift():
    cond = edge_map(_panel_with_square(4, 6))
    assert positional_error(_panel_with_square(4, 9), cond) == pytest.approx(3.0)
    empty = np.full((32, 32, 3), CONTROL_BG, np.float32)
    assert positional_error(empty, cond) == pytest.approx(math.hypot(32, 32))


def test_evaluate_reports_integrity(tiny_model, short):
    data = gen_colorize(0, 3, split="eval").tensors()
    r = evaluate(tiny_model, data, short, SamplerConfig("ddim", 4), "colorize")
    assert r.context_integrity and r.n_eval == 3
    assert r.masked_psnr == pytest.approx(psnr_from_mse(r.masked_mse))
    assert list(r.row()) == EVAL_COLUMNS


def _small_study(tiny_cfg, short, out):
    model = init_denoiser(tiny_cfg, 0)
    tr = gen_colorize(0, 8).tensors()
    ev = gen_colorize(0, 2, split="eval").tensors()
    return convergence_study(
        model, tr, ev, short, TrainConfig(batch_size=2, max_steps=4), SamplerConfig("ddim", 3),
        checkpoints=(0, 2, 4), lcfg=LoraConfig(r=2, alpha=2.0), task="colorize", out_dir=out,
    )


def test_convergence_study_outputs_and_determinism(tiny_cfg, short, tmp_path):
    reports, state = _small_study(tiny_cfg, short, tmp_path / "a")
    assert [r.step for r in reports] == [0, 2, 4] and state.step == 4
    # step 0 is the untouched base model: LoRA starts at identity
    base = init_denoiser(tiny_cfg, 0)
    ev = gen_colorize(0, 2, split="eval").tensors()
    r0 = evaluate(base, ev, short, SamplerConfig("ddim", 3))
    assert r0.masked_mse == pytest.approx(reports[0].masked_mse, abs=1e-6)
    rows = read_csv(tmp_path / "a" / "convergence.csv")
    assert list(rows[0]) == EVAL_COLUMNS and len(rows) == 3
    assert len(read_csv(tmp_path / "a" / "loss.csv")) == 4
    assert (tmp_path / "a" / "convergence.png").stat().st_size > 0
    _small_study(tiny_cfg, short, tmp_path / "b")
    for name in ("convergence.csv", "loss.csv", "convergence.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_layout_study_rows(tiny_cfg, short, tmp_path):
    base = init_denoiser(tiny_cfg, 0)
    rows = layout_study(
        base, short, TrainConfig(batch_size=2, max_steps=2), SamplerConfig("ddim", 2), LoraConfig(r=2, alpha=2.0),
        layouts=("1x2", "2x2"), n_train=4, n_eval=2, out_dir=tmp_path,
    )
    assert [r["layout"] for r in rows] == ["1x2", "2x2"]
    assert rows[0]["mask_area"] == rows[1]["mask_area"] == 32 * 32
    saved = read_csv(tmp_path / "layout_study.csv")
    assert list(saved[0]) == LAYOUT_COLUMNS
    assert all(float(r["positional_error"]) >= 0 for r in saved)
    # the base model passed in is never modified
    assert not any("lora" in n for n, _ in base.named_parameters())
