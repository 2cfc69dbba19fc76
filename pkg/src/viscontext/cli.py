"""Command line entry point.

Every command writes into its own run directory: the resolved config as
``config.json``, a ``run.json`` with input checkpoint hashes and output
schema version, and the command's artefacts. Config files are TOML; flags
(including ``--set section.key=value``) override file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    CheckpointError,
    latest_snapshot,
    load_adapter,
    load_base,
    load_snapshot,
    model_hash,
    save_adapter,
    save_base,
    save_snapshot,
)
from .denoiser import DenoiserConfig, count_parameters, init_denoiser, trainable_fraction
from .experiments import (
    EVAL_COLUMNS,
    ContextIntegrityError,
    EvalReport,
    convergence_study,
    generate_eval,
    layout_study,
    masked_mse,
    psnr_from_mse,
    write_csv,
    write_loss_csv,
)
from .layout import TASKS, arrange, compose, extract_panel, load_png, preset_layout, save_png, shape_layout, target_mask
from .lora import LoraConfig, attach_lora
from .sampler import SamplerConfig, sample
from .schedule import schedule_from_json
from .tasks import InpaintDataset, encode_condition, generate, load_dataset, save_dataset
from .training import TrainConfig, init_state, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("viscontext")

OUT_ENV = "VISCONTEXT_OUT"
SCHEMA_VERSION = 1

EXIT_ERROR = 1
EXIT_GATE = 3


class GateFailure(RuntimeError):
    """An invariant gate (context integrity, base immutability) did not hold."""


@dataclass
class DataConfig:
    n_train: int = 512
    n_eval: int = 16
    panel_h: int = 32
    panel_w: int = 32
    pretrain_canvas: int = 64


@dataclass
class RunConfig:
    task: str = "colorize"
    layout: str | None = None
    seed: int = 0
    out_dir: str | None = None
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000, "beta_start": 0.00085, "beta_end": 0.012})
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(base_width=32, attn_levels=(1, 2)))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, max_steps=3000, eval_every=500))
    train: TrainConfig = field(default_factory=TrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(eta=1.0))
    data: DataConfig = field(default_factory=DataConfig)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "layout": self.layout,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "schedule": dict(self.schedule),
            "denoiser": self.denoiser.to_json(),
            "pretrain": self.pretrain.to_json(),
            "train": self.train.to_json(),
            "lora": self.lora.to_json(),
            "sampler": self.sampler.to_json(),
            "data": vars(self.data).copy(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        base = cls()
        return cls(
            task=d.get("task", base.task),
            layout=d.get("layout", base.layout),
            seed=int(d.get("seed", base.seed)),
            out_dir=d.get("out_dir", base.out_dir),
            schedule={**base.schedule, **d.get("schedule", {})},
            denoiser=DenoiserConfig.from_json({**base.denoiser.to_json(), **d.get("denoiser", {})}),
            pretrain=TrainConfig.from_json({**base.pretrain.to_json(), **d.get("pretrain", {})}),
            train=TrainConfig.from_json({**base.train.to_json(), **d.get("train", {})}),
            lora=LoraConfig.from_json({**base.lora.to_json(), **d.get("lora", {})}),
            sampler=SamplerConfig.from_json({**base.sampler.to_json(), **d.get("sampler", {})}),
            data=DataConfig(**{**vars(base.data), **d.get("data", {})}),
        )


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def resolve_config(args) -> RunConfig:
    """File values, then ``--set`` overrides, then dedicated flags."""
    d: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as f:
            d = tomllib.load(f)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        *path, leaf = key.strip().split(".")
        node = d
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(raw.strip())
    if getattr(args, "task", None):
        d["task"] = args.task
    if getattr(args, "layout", None):
        d["layout"] = args.layout
    if getattr(args, "out", None):
        d["out_dir"] = str(args.out)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
        for section in ("pretrain", "train", "sampler"):
            d.setdefault(section, {})["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        d.setdefault("pretrain" if args.command == "pretrain" else "train", {})["max_steps"] = args.steps
    cfg = RunConfig.from_json(d)
    if cfg.task not in TASKS:
        raise KeyError(f"unknown task {cfg.task!r}; expected one of {sorted(TASKS)}")
    return cfg


def run_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{cfg.task}-s{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _describe(out: Path, cfg: RunConfig, command: str, inputs: dict | None = None, **extra) -> None:
    _write_json(out / "config.json", cfg.to_json())
    _write_json(
        out / "run.json",
        {"command": command, "schema_version": SCHEMA_VERSION, "inputs": inputs or {}, **extra},
    )


def _task_layout(cfg: RunConfig):
    if cfg.layout:
        return shape_layout(cfg.layout, cfg.data.panel_h, cfg.data.panel_w, task=cfg.task)
    return preset_layout(cfg.task, cfg.data.panel_h, cfg.data.panel_w)


def _load_model(base: Path, adapter: Path | None):
    model, manifest = load_base(base)
    inputs = {"base": manifest["content_hash"]}
    if adapter is not None:
        model, amanifest = load_adapter(model, adapter)
        inputs["adapter"] = amanifest["content_hash"]
    model.eval()
    return model, manifest, inputs


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    panel = (cfg.data.panel_h, cfg.data.panel_w)
    ds = generate(cfg.task, cfg.seed, args.n, panel, args.split)
    out = run_dir(cfg, "data")
    save_dataset(ds, out)
    print(f"wrote {len(ds)} {cfg.task} samples to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = run_dir(cfg, "pretrain")
    sched = schedule_from_json(cfg.schedule)
    tcfg = cfg.pretrain
    model = init_denoiser(cfg.denoiser, cfg.seed)
    state = init_state(model, tcfg.seed)
    snap = latest_snapshot(out)
    if snap is not None:
        state = load_snapshot(state, snap)
        log.info("resumed from %s at step %d", snap, state.step)
    _describe(out, cfg, "pretrain")
    data = InpaintDataset(cfg.seed, canvas_hw=(cfg.data.pretrain_canvas, cfg.data.pretrain_canvas))

    def on_step(st):
        save_snapshot(st, out / "snapshots" / f"step_{st.step}")

    state, losses = train(model, data, sched, tcfg, state=state, callback=on_step)
    write_loss_csv(out / "loss.csv", losses)
    digest = save_base(model, out / "base", state.step, cfg.schedule)
    _describe(out, cfg, "pretrain", outputs={"base": digest}, parameters=count_parameters(model))
    print(f"base checkpoint {digest[:12]} after {state.step} steps in {out / 'base'}")
    return 0


def cmd_adapt(args) -> int:
    cfg = resolve_config(args)
    model, manifest, inputs = _load_model(args.base, None)
    out = run_dir(cfg, "adapt")
    sched = schedule_from_json(cfg.schedule)
    base_hash = manifest["content_hash"]
    attach_lora(model, cfg.lora, seed=cfg.train.seed)
    state = init_state(model, cfg.train.seed)
    snap = latest_snapshot(out)
    if snap is not None:
        snap_manifest = json.loads((snap / "manifest.json").read_text())
        if snap_manifest.get("base_hash") != base_hash:
            raise CheckpointError(f"snapshot {snap} was trained on a different base")
        state = load_snapshot(state, snap)
        log.info("resumed from %s at step %d", snap, state.step)
    frac = trainable_fraction(model)
    _describe(out, cfg, "adapt", inputs)
    data = generate(cfg.task, cfg.seed, cfg.data.n_train, (cfg.data.panel_h, cfg.data.panel_w)).tensors(_task_layout(cfg))

    def on_step(st):
        save_snapshot(st, out / "snapshots" / f"step_{st.step}", {"base_hash": base_hash})

    state, losses = train(model, data, sched, cfg.train, state=state, callback=on_step)
    write_loss_csv(out / "loss.csv", losses)
    if model_hash(model) != base_hash:
        raise GateFailure("base tensors changed during adaptation")
    digest = save_adapter(model, out / "adapter", cfg.lora, base_hash, state.step, cfg.schedule)
    _describe(out, cfg, "adapt", inputs, outputs={"adapter": digest}, trainable_fraction=frac)
    print(f"adapter {digest[:12]} (trainable fraction {frac:.4f}) in {out / 'adapter'}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    sched = schedule_from_json(cfg.schedule)
    panels = [load_png(p) for p in args.inputs]
    shapes = {p.shape for p in panels}
    if len(shapes) != 1:
        raise ValueError(f"panel size mismatch: {sorted(shapes)}")
    (shape,) = shapes
    if cfg.layout:
        spec = shape_layout(cfg.layout, shape[0], shape[1], task=cfg.task)
    else:
        spec = preset_layout(cfg.task, shape[0], shape[1])
    if len(panels) > len(spec.context_indices):
        raise ValueError(f"{cfg.task} takes at most {len(spec.context_indices)} context panels, got {len(panels)}")
    model, _, inputs = _load_model(args.base, args.adapter)
    out = run_dir(cfg, "sample")
    canvas = compose(arrange(spec, panels, None), spec).pixels
    x0 = torch.from_numpy(canvas).permute(2, 0, 1)[None].contiguous()
    m = torch.from_numpy(target_mask(spec)).permute(2, 0, 1)[None].contiguous()
    cond = torch.tensor([encode_condition(args.tokens or [])])
    gen = sample(model, x0, m, cond, sched, cfg.sampler)
    pixels = gen[0].permute(1, 2, 0).numpy()
    context = ~target_mask(spec)[..., 0].astype(bool)
    if not np.array_equal(pixels[context], canvas[context]):
        raise GateFailure("context changed during sampling")
    save_png(pixels, out / "canvas.png")
    (ti,) = spec.target_indices
    save_png(extract_panel(pixels, ti, spec), out / "target.png")
    _describe(out, cfg, "sample", inputs, outputs=["canvas.png", "target.png"], tokens=list(args.tokens or []))
    print(f"wrote {out / 'canvas.png'} and {out / 'target.png'}")
    return 0


def _eval_data(cfg: RunConfig, data_dir):
    if data_dir:
        ds = load_dataset(data_dir)
    else:
        ds = generate(cfg.task, cfg.seed, cfg.data.n_eval, (cfg.data.panel_h, cfg.data.panel_w), "eval")
    return ds.tensors(_task_layout(cfg) if cfg.layout else ds.layout)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    sched = schedule_from_json(cfg.schedule)
    model, manifest, inputs = _load_model(args.base, args.adapter)
    data = _eval_data(cfg, args.data)
    out = run_dir(cfg, "eval")
    gen, ok = generate_eval(model, data, sched, cfg.sampler, check_every_step=True)
    mse = masked_mse(gen, data.x0, data.mask)
    report = EvalReport(cfg.task, manifest.get("step", 0), mse, psnr_from_mse(mse), ok, len(data), cfg.sampler.to_json())
    _write_json(out / "report.json", report.to_json())
    write_csv(out / "report.csv", [report.row()], EVAL_COLUMNS)
    _describe(out, cfg, "eval", inputs, outputs=["report.json", "report.csv"])
    print(f"{cfg.task}: masked mse {mse:.6f}, psnr {report.masked_psnr:.3f} dB, context intact {ok}")
    if not ok:
        raise ContextIntegrityError("context changed during sampling")
    return 0


def cmd_study_convergence(args) -> int:
    cfg = resolve_config(args)
    sched = schedule_from_json(cfg.schedule)
    model, _, inputs = _load_model(args.base, None)
    base_hash = inputs["base"]
    out = run_dir(cfg, "convergence")
    panel = (cfg.data.panel_h, cfg.data.panel_w)
    spec = _task_layout(cfg)
    train_set = generate(cfg.task, cfg.seed, cfg.data.n_train, panel).tensors(spec)
    eval_set = generate(cfg.task, cfg.seed, cfg.data.n_eval, panel, "eval").tensors(spec)
    checkpoints = [int(c) for c in args.checkpoints.split(",")]
    _describe(out, cfg, "study-convergence", inputs)
    reports, state = convergence_study(
        model, train_set, eval_set, sched, cfg.train, cfg.sampler, checkpoints, cfg.lora, cfg.task, out
    )
    if model_hash(model) != base_hash:
        raise GateFailure("base tensors changed during adaptation")
    _describe(
        out, cfg, "study-convergence", inputs,
        outputs=["convergence.csv", "loss.csv", "convergence.png"],
        trainable_fraction=trainable_fraction(model),
    )
    for r in reports:
        print(f"step {r.step}: masked psnr {r.masked_psnr:.3f} dB")
    return 0


def cmd_study_layout(args) -> int:
    cfg = resolve_config(args)
    sched = schedule_from_json(cfg.schedule)
    model, _, inputs = _load_model(args.base, None)
    layouts = tuple(args.layouts.split(","))
    out = run_dir(cfg, "layout")
    _describe(out, cfg, "study-layout", inputs)
    rows = layout_study(
        model, sched, cfg.train, cfg.sampler, cfg.lora, layouts,
        cfg.data.n_train, cfg.data.n_eval, (cfg.data.panel_h, cfg.data.panel_w), cfg.seed, out,
    )
    _describe(out, cfg, "study-layout", inputs, outputs=["layout_study.csv", "layout_study.png"])
    for r in rows:
        print(f"{r['layout']}: psnr {float(r['masked_psnr']):.3f} dB, positional error {float(r['positional_error']):.3f} px")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viscontext", description="Masked in-context diffusion on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", type=Path, help="TOML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help=f"run directory (default: ${OUT_ENV}/<command>-<task>-s<seed>)")
        if task:
            sp.add_argument("--task", choices=TASKS)
            sp.add_argument("--layout", choices=("1x2", "2x1", "2x2", "1x3"), help="override the task preset shape")
        return sp

    sp = common(sub.add_parser("gen-data", help="write a synthetic task dataset"))
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--split", choices=("train", "eval"), default="train")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("pretrain", help="full-parameter training on generic inpainting"), task=False)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("adapt", help="LoRA-only adaptation to one task"))
    sp.add_argument("--base", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_adapt)

    sp = common(sub.add_parser("sample", help="fill the target panel given context PNGs"))
    sp.add_argument("--base", type=Path, required=True)
    sp.add_argument("--adapter", type=Path)
    sp.add_argument("--inputs", type=Path, nargs="+", required=True, help="context panels in preset order")
    sp.add_argument("--tokens", nargs="*", help="condition words")
    sp.set_defaults(func=cmd_sample)

    sp = common(sub.add_parser("eval", help="masked metrics on an eval set"))
    sp.add_argument("--base", type=Path, required=True)
    sp.add_argument("--adapter", type=Path)
    sp.add_argument("--data", type=Path, help="dataset directory from gen-data (default: generate eval split)")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("study-convergence", help="PSNR against adaptation steps"))
    sp.add_argument("--base", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--checkpoints", default="0,250,500,1000,2000")
    sp.set_defaults(func=cmd_study_convergence)

    sp = common(sub.add_parser("study-layout", help="compare layout shapes on the control task"), task=False)
    sp.add_argument("--base", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--layouts", default="1x2,2x1,2x2")
    sp.set_defaults(func=cmd_study_layout, task="control")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(int(os.environ.get("VISCONTEXT_THREADS", "1")))
    try:
        return args.func(args)
    except (GateFailure, ContextIntegrityError) as e:
        log.error("gate failed: %s", e)
        return EXIT_GATE
    except (CheckpointError, FileNotFoundError, KeyError, ValueError, FloatingPointError, OSError) as e:
        log.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
