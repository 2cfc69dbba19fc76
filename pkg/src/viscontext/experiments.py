"""Metrics, evaluation and the two studies (convergence, layout shape)."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from scipy import ndimage  # noqa: E402

from .layout import LayoutSpec, extract_panel, shape_layout  # noqa: E402
from .lora import LoraConfig, attach_lora  # noqa: E402
from .sampler import SamplerConfig, sample  # noqa: E402
from .schedule import NoiseSchedule  # noqa: E402
from .tasks import CONTROL_BG, TaskDataset, generate  # noqa: E402
from .training import TrainConfig, TrainState, smoothed, train  # noqa: E402

log = logging.getLogger(__name__)

PEAK_SQ = 4.0  # (max - min)^2 for pixels in [-1, 1]
EVAL_COLUMNS = ["step", "masked_mse", "masked_psnr", "context_integrity", "n_eval"]
LAYOUT_COLUMNS = ["layout", "rows", "cols", "mask_area", "masked_mse", "masked_psnr", "positional_error", "final_loss"]


class ContextIntegrityError(AssertionError):
    pass


def masked_mse(generated, truth, m) -> float:
    generated, truth, m = (torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a) for a in (generated, truth, m))
    if generated.shape != truth.shape:
        raise ValueError(f"shape mismatch {tuple(generated.shape)} vs {tuple(truth.shape)}")
    mask = m.bool().expand_as(generated)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask is empty")
    diff = (generated.double() - truth.double())[mask]
    return float(diff.pow(2).mean())


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(PEAK_SQ / mse)


@dataclass
class EvalReport:
    task: str
    step: int
    masked_mse: float
    masked_psnr: float
    context_integrity: bool
    n_eval: int
    sampler: dict

    def row(self) -> dict:
        return {
            "step": self.step,
            "masked_mse": f"{self.masked_mse:.8f}",
            "masked_psnr": f"{self.masked_psnr:.6f}",
            "context_integrity": str(self.context_integrity).lower(),
            "n_eval": self.n_eval,
        }

    def to_json(self) -> dict:
        return asdict(self)


def generate_eval(model, data, sched: NoiseSchedule, scfg: SamplerConfig, batch_size: int = 16, check_every_step: bool = False):
    """Sample every canvas in ``data`` (a CanvasDataset). Returns the
    generated canvases and whether context survived bit-exact."""
    outs, ok = [], True
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        x0, m, cond = data.get(idx)
        bcfg = SamplerConfig(scfg.kind, scfg.steps, scfg.eta, scfg.seed + start)

        def check(t, x, x0=x0, m=m):
            nonlocal ok
            ok &= bool(torch.equal(torch.where(m.bool(), 0.0, x), torch.where(m.bool(), 0.0, x0)))

        out = sample(model, x0, m, cond, sched, bcfg, on_step=check if check_every_step else None)
        check(0, out)
        outs.append(out)
    return torch.cat(outs), ok


def evaluate(model, data, sched, scfg: SamplerConfig, task: str = "", step: int = 0) -> EvalReport:
    gen, ok = generate_eval(model, data, sched, scfg)
    mse = masked_mse(gen, data.x0, data.mask)
    return EvalReport(task, step, mse, psnr_from_mse(mse), ok, len(data), scfg.to_json())


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -------------------------------------------------------- convergence study


def convergence_study(
    model,
    train_set,
    eval_set,
    sched: NoiseSchedule,
    tcfg: TrainConfig,
    scfg: SamplerConfig,
    checkpoints=(0, 250, 500, 1000, 2000, 5000),
    lcfg: LoraConfig | None = None,
    task: str = "",
    out_dir: str | Path | None = None,
    on_snapshot=None,
) -> tuple[list[EvalReport], TrainState]:
    """Adapt ``model`` (LoRA when ``lcfg`` is given) and evaluate the fixed
    eval set at each checkpoint step with the same sampler seed."""
    checkpoints = sorted(set(int(c) for c in checkpoints))
    if lcfg is not None:
        attach_lora(model, lcfg, seed=tcfg.seed)
    reports: list[EvalReport] = []

    def snap(state: TrainState):
        if state.step in checkpoints:
            r = evaluate(model, eval_set, sched, scfg, task, state.step)
            if not r.context_integrity:
                raise ContextIntegrityError(f"context changed during sampling at step {state.step}")
            log.info("step %d masked psnr %.3f dB", state.step, r.masked_psnr)
            reports.append(r)
            model.train()
        if on_snapshot is not None:
            on_snapshot(state)

    if 0 in checkpoints:
        r = evaluate(model, eval_set, sched, scfg, task, 0)
        if not r.context_integrity:
            raise ContextIntegrityError("context changed during sampling at step 0")
        reports.append(r)
    step_cfg = copy.copy(tcfg)
    step_cfg.max_steps = max(checkpoints)
    step_cfg.eval_every = math.gcd(*[c for c in checkpoints if c > 0]) if any(checkpoints) else 1
    state, losses = train(model, train_set, sched, step_cfg, callback=snap)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "convergence.csv", [r.row() for r in reports], EVAL_COLUMNS)
        write_loss_csv(out / "loss.csv", losses, {r.step: r.masked_mse for r in reports})
        plot_convergence(reports, losses, out / "convergence.png")
    return reports, state


def write_loss_csv(path, losses: list[float], eval_mse: dict[int, float] | None = None) -> None:
    eval_mse = eval_mse or {}
    rows = [
        {"step": i + 1, "loss": f"{v:.8f}", "masked_mse_eval": f"{eval_mse[i + 1]:.8f}" if i + 1 in eval_mse else ""}
        for i, v in enumerate(losses)
    ]
    write_csv(path, rows, ["step", "loss", "masked_mse_eval"])


def plot_convergence(reports: list[EvalReport], losses: list[float], path) -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    if losses:
        a.plot(range(1, len(losses) + 1), losses, alpha=0.3, lw=0.5)
        a.plot(range(1, len(losses) + 1), smoothed(losses, 100), lw=1.5)
    a.set_xlabel("step")
    a.set_ylabel("masked loss")
    a.set_yscale("log")
    b.plot([r.step for r in reports], [r.masked_psnr for r in reports], marker="o")
    b.set_xlabel("step")
    b.set_ylabel("masked PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ------------------------------------------------------------ layout study


def _foreground(panel: np.ndarray, bg_value: float = CONTROL_BG, tol: float = 0.25) -> np.ndarray:
    return np.abs(panel - bg_value).max(axis=-1) > tol


def implied_shapes(cond_panel: np.ndarray) -> np.ndarray:
    """Filled regions enclosed by the edge map."""
    edges = cond_panel[..., 0] > 0
    return ndimage.binary_fill_holes(edges)


def _centroids(mask: np.ndarray) -> list[np.ndarray]:
    labels, n = ndimage.label(mask)
    if n == 0:
        return []
    return [np.asarray(c) for c in ndimage.center_of_mass(mask, labels, range(1, n + 1))]


def positional_error(generated: np.ndarray, cond_panel: np.ndarray) -> float:
    """Mean distance (pixels) from each shape implied by the edge map to the
    nearest shape found in the generated panel; the panel diagonal when the
    generation contains no shape at all."""
    want = _centroids(implied_shapes(cond_panel))
    got = _centroids(_foreground(generated))
    h, w = generated.shape[:2]
    if not want:
        return 0.0
    if not got:
        return float(math.hypot(h, w))
    got_arr = np.stack(got)
    return float(np.mean([np.min(np.linalg.norm(got_arr - c, axis=1)) for c in want]))


def layout_study(
    base_model,
    sched: NoiseSchedule,
    tcfg: TrainConfig,
    scfg: SamplerConfig,
    lcfg: LoraConfig,
    layouts=("1x2", "2x1", "2x2"),
    n_train: int = 256,
    n_eval: int = 16,
    panel_dims=(32, 32),
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """One adapter per layout shape on the control task, identical budgets."""
    train_ds = generate("control", seed, n_train, panel_dims, "train")
    eval_ds = generate("control", seed, n_eval, panel_dims, "eval")
    rows = []
    for shape in layouts:
        spec = shape_layout(shape, *panel_dims)
        model = copy.deepcopy(base_model)
        attach_lora(model, lcfg, seed=tcfg.seed)
        _, losses = train(model, train_ds.tensors(spec), sched, tcfg)
        data = eval_ds.tensors(spec)
        gen, ok = generate_eval(model, data, sched, scfg)
        if not ok:
            raise ContextIntegrityError(f"context changed during sampling for layout {shape}")
        mse = masked_mse(gen, data.x0, data.mask)
        perr = _layout_positional_error(gen, eval_ds, spec)
        rows.append(
            {
                "layout": shape,
                "rows": spec.rows,
                "cols": spec.cols,
                "mask_area": int(data.mask[0].sum()),
                "masked_mse": f"{mse:.8f}",
                "masked_psnr": f"{psnr_from_mse(mse):.6f}",
                "positional_error": f"{perr:.6f}",
                "final_loss": f"{smoothed(losses, 50)[-1]:.8f}" if losses else "",
            }
        )
        log.info("layout %s: mse %.5f positional error %.3f px", shape, mse, perr)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "layout_study.csv", rows, LAYOUT_COLUMNS)
        plot_layouts(rows, out / "layout_study.png")
    return rows


def _layout_positional_error(gen: torch.Tensor, ds: TaskDataset, spec: LayoutSpec) -> float:
    (ti,) = spec.target_indices
    errs = []
    for i, canvas in enumerate(gen.permute(0, 2, 3, 1).numpy()):
        panel = extract_panel(canvas, ti, spec)
        errs.append(positional_error(panel, ds.samples[i].context[0]))
    return float(np.mean(errs))


def plot_layouts(rows: list[dict], path) -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    names = [r["layout"] for r in rows]
    a.bar(names, [float(r["masked_psnr"]) for r in rows])
    a.set_ylabel("masked PSNR (dB)")
    b.bar(names, [float(r["positional_error"]) for r in rows])
    b.set_ylabel("positional error (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def contact_sheet(canvases: np.ndarray, path, cols: int = 4) -> None:
    """Tile ``(N, H, W, C)`` canvases into one PNG with 2px gaps."""
    from .layout import save_png

    n, h, w, c = canvases.shape
    rows = -(-n // cols)
    sheet = np.full((rows * (h + 2) - 2, cols * (w + 2) - 2, c), 1.0, dtype=np.float32)
    for i, img in enumerate(canvases):
        r, k = divmod(i, cols)
        sheet[r * (h + 2) : r * (h + 2) + h, k * (w + 2) : k * (w + 2) + w] = img
    save_png(sheet, path)
