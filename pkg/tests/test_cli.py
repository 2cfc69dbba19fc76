import json

import numpy as np
import pytest

from viscontext.checkpoint import load_base, model_hash
from viscontext.cli import EXIT_ERROR, EXIT_GATE, RunConfig, main
from viscontext.layout import save_png
from viscontext.tasks import gen_colorize

TINY = [
    "--set", "denoiser.base_width=8", "--set", "denoiser.depth=2", "--set", "denoiser.attn_levels=[1]",
    "--set", "denoiser.cond_dim=8", "--set", "denoiser.time_dim=16", "--set", "denoiser.heads=2",
    "--set", "denoiser.groups=4", "--set", "schedule.T=20", "--set", "schedule.beta_start=0.005",
    "--set", "schedule.beta_end=0.2", "--set", "sampler.steps=3", "--set", "lora.r=2",
    "--set", "data.n_train=8", "--set", "data.n_eval=2", "--set", "data.pretrain_canvas=32",
    "--set", "pretrain.batch_size=2", "--set", "train.batch_size=2",
]


@pytest.fixture(scope="module")
def base(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--out", str(out), "--steps", "4", "--set", "pretrain.eval_every=2", *TINY]) == 0
    return out


def test_config_roundtrip_and_overrides(tmp_path):
    cfg = RunConfig()
    assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))).to_json() == cfg.to_json()
    toml = tmp_path / "c.toml"
    toml.write_text('task = "control"\n[train]\nlearning_rate = 0.002\nmax_steps = 7\n')
    from viscontext.cli import build_parser, resolve_config

    args = build_parser().parse_args(["adapt", "--base", "x", "--config", str(toml), "--steps", "3", "--seed", "5"])
    cfg = resolve_config(args)
    assert cfg.task == "control" and cfg.train.learning_rate == 0.002
    assert cfg.train.max_steps == 3 and cfg.train.seed == 5 and cfg.sampler.seed == 5


def test_gen_data(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--task", "colorize", "--n", "100", "--out", str(a)]) == 0
    assert main(["gen-data", "--task", "colorize", "--n", "100", "--out", str(b)]) == 0
    index = json.loads((a / "index.json").read_text())
    assert len(index["samples"]) == 100
    assert (a / "index.json").read_bytes() == (b / "index.json").read_bytes()


def test_unknown_task_nonzero():
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--task", "segmentation"])
    assert e.value.code != 0


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--task", "control", "--n", "1", "--out", str(blocker / "sub")]) == EXIT_ERROR


def test_pretrain_outputs_and_resume(base, tmp_path):
    assert (base / "loss.csv").exists() and (base / "config.json").exists()
    assert sorted(p.name for p in (base / "snapshots").iterdir()) == ["step_2", "step_4"]
    model, manifest = load_base(base / "base")
    assert manifest["step"] == 4
    # an identical fresh run lands on the same hash
    again = tmp_path / "again"
    assert main(["pretrain", "--out", str(again), "--steps", "4", "--set", "pretrain.eval_every=2", *TINY]) == 0
    assert load_base(again / "base")[1]["content_hash"] == manifest["content_hash"]
    # interrupted after step 2, then resumed, gives the same weights
    resumed = tmp_path / "resumed"
    assert main(["pretrain", "--out", str(resumed), "--steps", "2", "--set", "pretrain.eval_every=2", *TINY]) == 0
    assert main(["pretrain", "--out", str(resumed), "--steps", "4", "--set", "pretrain.eval_every=2", *TINY]) == 0
    assert load_base(resumed / "base")[1]["content_hash"] == manifest["content_hash"]
    assert (resumed / "loss.csv").read_bytes() == (base / "loss.csv").read_bytes()


def test_adapt_keeps_base_and_is_small(base, tmp_path):
    out = tmp_path / "ad"
    assert main(["adapt", "--base", str(base / "base"), "--task", "colorize", "--steps", "2", "--out", str(out), *TINY]) == 0
    run = json.loads((out / "run.json").read_text())
    base_hash = load_base(base / "base")[1]["content_hash"]
    assert run["inputs"]["base"] == base_hash
    assert 0 < run["trainable_fraction"] < 1
    assert json.loads((out / "adapter" / "manifest.json").read_text())["base_hash"] == base_hash
    assert model_hash(load_base(base / "base")[0]) == base_hash
    assert (out / "adapter" / "adapter.safetensors").stat().st_size < (base / "base" / "weights.safetensors").stat().st_size


def test_adapt_missing_base(tmp_path):
    assert main(["adapt", "--base", str(tmp_path / "nope"), "--task", "colorize", "--out", str(tmp_path / "o"), *TINY]) == EXIT_ERROR
    assert not (tmp_path / "o").exists()


def test_adapt_resume_rejects_other_base(base, tmp_path):
    out = tmp_path / "ad"
    assert main(["adapt", "--base", str(base / "base"), "--task", "colorize", "--steps", "2",
                 "--set", "train.eval_every=1", "--out", str(out), *TINY]) == 0
    other = tmp_path / "other"
    assert main(["pretrain", "--out", str(other), "--steps", "1", "--seed", "9", *TINY]) == 0
    assert main(["adapt", "--base", str(other / "base"), "--task", "colorize", "--steps", "3",
                 "--out", str(out), *TINY]) == EXIT_ERROR


def test_sample_writes_pngs_deterministically(base, tmp_path):
    s = gen_colorize(0, 1).samples[0]
    panel = tmp_path / "gray.png"
    save_png(s.context[0], panel)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["sample", "--base", str(base / "base"), "--task", "colorize", "--inputs", str(panel),
                   "--tokens", *s.tokens, "--out", str(out), *TINY])
        assert rc == 0
        outs.append(out)
    for f in ("canvas.png", "target.png"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_sample_panel_size_mismatch(base, tmp_path):
    save_png(np.zeros((32, 32, 3), np.float32), tmp_path / "a.png")
    save_png(np.zeros((16, 16, 3), np.float32), tmp_path / "b.png")
    rc = main(["sample", "--base", str(base / "base"), "--task", "control",
               "--inputs", str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--out", str(tmp_path / "o"), *TINY])
    assert rc == EXIT_ERROR


def test_eval_report_and_determinism(base, tmp_path):
    for name in ("a", "b"):
        assert main(["eval", "--base", str(base / "base"), "--task", "colorize", "--out", str(tmp_path / name), *TINY]) == 0
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert {"task", "step", "masked_mse", "masked_psnr", "context_integrity", "n_eval", "sampler"} == set(report)
    assert report["context_integrity"] is True and report["n_eval"] == 2
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()


def test_eval_context_failure_exit(base, tmp_path, monkeypatch):
    import viscontext.cli as cli

    def broken(model, data, sched, scfg, batch_size=16, check_every_step=False):
        return data.x0 + 1.0, False

    monkeypatch.setattr(cli, "generate_eval", broken)
    assert main(["eval", "--base", str(base / "base"), "--task", "colorize", "--out", str(tmp_path / "e"), *TINY]) == EXIT_GATE


def test_studies(base, tmp_path):
    conv = tmp_path / "conv"
    assert main(["study-convergence", "--base", str(base / "base"), "--task", "colorize", "--steps", "2",
                 "--checkpoints", "0,2", "--out", str(conv), *TINY]) == 0
    assert (conv / "convergence.csv").exists() and (conv / "convergence.png").exists()
    lay = tmp_path / "lay"
    assert main(["study-layout", "--base", str(base / "base"), "--steps", "1", "--layouts", "1x2,2x2",
                 "--out", str(lay), *TINY]) == 0
    assert "positional_error" in (lay / "layout_study.csv").read_text().splitlines()[0]


def test_default_run_dir_uses_env(base, tmp_path, monkeypatch):
    monkeypatch.setenv("VISCONTEXT_OUT", str(tmp_path / "root"))
    assert main(["gen-data", "--task", "tryon", "--n", "2", "--seed", "3"]) == 0
    assert (tmp_path / "root" / "data-tryon-s3" / "index.json").exists()
