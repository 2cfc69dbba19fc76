"""Procedural toy datasets, one generator per downstream task.

Every sample is built from its own seed, derived from ``(run seed, split,
index)``, so samples can be generated in any order or in parallel. Panels are
``(h, w, 3)`` float32 arrays in ``[-1, 1]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .layout import (
    BLANK_FILL,
    LayoutSpec,
    arrange,
    compose,
    load_png,
    preset_layout,
    save_png,
    target_mask,
)

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.9, 0.15, 0.8),
    "orange": (1.0, 0.55, 0.05),
    "purple": (0.5, 0.15, 0.75),
}
SHAPES = ("circle", "square", "triangle")
SCENES = {
    "sky": (0.55, 0.75, 0.95),
    "grass": (0.35, 0.6, 0.25),
    "sand": (0.85, 0.75, 0.5),
    "night": (0.08, 0.08, 0.25),
    "dusk": (0.7, 0.4, 0.45),
    "snow": (0.95, 0.95, 0.97),
}
TRAIN_SCENES = ("sky", "grass", "sand", "night")
EVAL_SCENES = ("dusk", "snow")
TEXTURES = ("stripes", "checker", "dots", "plain")
TASK_WORDS = ("recolor", "inpaint", "control", "colorize", "subject", "tryon", "extraction", "edit")

UNK = "<unk>"
VOCAB: tuple[str, ...] = (UNK, *COLORS, *SHAPES, *SCENES, *TASK_WORDS, *TEXTURES)
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}

COND_LEN = 4
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
CONTROL_BG = 0.7
PERSON_BG = 0.6
SPLITS = {"train": 0, "eval": 1}


def encode_condition(tokens, vocab=TOKEN_IDS, length: int = COND_LEN) -> list[int]:
    """Token ids padded with 0 to ``length``; unknown tokens map to 0."""
    ids = [vocab.get(t, 0) for t in tokens][:length]
    return ids + [0] * (length - len(ids))


def decode_condition(ids, vocab: tuple[str, ...] = VOCAB) -> list[str]:
    return [vocab[i] for i in ids if i != 0]


def sample_seed(seed: int, split: str, index: int) -> int:
    """Per-sample seed. Train and eval seeds live in disjoint halves of the
    63-bit range, so the splits can never share a sample."""
    state = np.random.SeedSequence([seed, SPLITS[split], index]).generate_state(2, dtype=np.uint32)
    value = (int(state[0]) << 30) ^ int(state[1])
    return (value & ((1 << 61) - 1)) | (SPLITS[split] << 61)


def _rgb(color) -> np.ndarray:
    return np.asarray(color, dtype=np.float32) * 2.0 - 1.0


def grayscale(img: np.ndarray) -> np.ndarray:
    g = (img * LUMA).sum(axis=-1, keepdims=True, dtype=np.float32)
    return np.repeat(g, 3, axis=-1).astype(np.float32)


def shape_mask(kind: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy += 0.5
    xx += 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if kind == "square":
        return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    if kind == "triangle":
        top, bottom = cy - size, cy + size
        frac = (yy - top) / (2 * size)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * size)
    raise ValueError(f"unknown shape {kind!r}")


def edge_map(img: np.ndarray) -> np.ndarray:
    """+1 where a pixel differs from any 4-neighbour, -1 elsewhere (3 channels)."""
    diff = np.zeros(img.shape[:2], dtype=bool)
    d_y = np.any(img[1:] != img[:-1], axis=-1)
    d_x = np.any(img[:, 1:] != img[:, :-1], axis=-1)
    diff[1:] |= d_y
    diff[:-1] |= d_y
    diff[:, 1:] |= d_x
    diff[:, :-1] |= d_x
    out = np.where(diff, 1.0, -1.0).astype(np.float32)
    return np.repeat(out[:, :, None], 3, axis=-1)


def texture(kind: str, h: int, w: int, c1: np.ndarray, c2: np.ndarray, period: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        sel = ((yy + phase) // period) % 2 == 0
    elif kind == "checker":
        sel = (((yy + phase) // period) + (xx // period)) % 2 == 0
    elif kind == "dots":
        sel = ~(((yy + phase) % (2 * period) < period // 2 + 1) & ((xx % (2 * period)) < period // 2 + 1))
    else:
        sel = np.ones((h, w), dtype=bool)
    return np.where(sel[:, :, None], c1, c2).astype(np.float32)


@dataclass
class Shape:
    kind: str
    color: str
    cy: float
    cx: float
    size: float


def random_shapes(rng: np.random.Generator, h: int, w: int, n: int, colors=None) -> list[Shape]:
    scale = min(h, w)
    out = []
    for i in range(n):
        size = float(rng.uniform(0.12, 0.24) * scale)
        cy = float(rng.uniform(size, h - size))
        cx = float(rng.uniform(size, w - size))
        color = colors[i] if colors is not None else str(rng.choice(list(COLORS)))
        out.append(Shape(str(rng.choice(SHAPES)), color, cy, cx, size))
    return out


def draw_shapes(bg: np.ndarray, shapes: list[Shape]) -> np.ndarray:
    img = bg.copy()
    h, w = img.shape[:2]
    for s in shapes:
        img[shape_mask(s.kind, h, w, s.cy, s.cx, s.size)] = _rgb(COLORS[s.color])
    return img


def _const(h: int, w: int, value) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.float32), (h, w, 3)).copy()


@dataclass
class TaskSample:
    context: list[np.ndarray]
    target: np.ndarray
    tokens: list[str]
    task: str
    seed: int
    meta: dict = field(default_factory=dict)


@dataclass
class TaskDataset:
    samples: list[TaskSample]
    task: str
    layout: LayoutSpec
    split: str = "train"
    vocab: tuple[str, ...] = VOCAB

    def __len__(self):
        return len(self.samples)

    def canvas(self, i: int, layout: LayoutSpec | None = None) -> np.ndarray:
        spec = layout or self.layout
        s = self.samples[i]
        return compose(arrange(spec, s.context, s.target), spec).pixels

    def tensors(self, layout: LayoutSpec | None = None) -> "CanvasDataset":
        spec = layout or self.layout
        x0 = np.stack([self.canvas(i, spec) for i in range(len(self))])
        cond = [encode_condition(s.tokens) for s in self.samples]
        return CanvasDataset(
            torch.from_numpy(x0).permute(0, 3, 1, 2).contiguous(),
            torch.from_numpy(target_mask(spec)).permute(2, 0, 1)[None].expand(len(self), -1, -1, -1).contiguous(),
            torch.tensor(cond, dtype=torch.long),
        )


class CanvasDataset:
    """Stacked training canvases ``(N, C, H, W)`` with masks and token ids."""

    def __init__(self, x0: torch.Tensor, mask: torch.Tensor, cond: torch.Tensor):
        if not (len(x0) == len(mask) == len(cond)):
            raise ValueError("x0, mask and cond lengths differ")
        self.x0, self.mask, self.cond = x0, mask, cond

    def __len__(self):
        return len(self.x0)

    def get(self, idx: torch.Tensor):
        return self.x0[idx], self.mask[idx], self.cond[idx]


# ---------------------------------------------------------------- generators


def _check_n(n: int) -> None:
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")


def _build(task: str, make: Callable, seed: int, n: int, panel_dims, split: str) -> TaskDataset:
    _check_n(n)
    h, w = panel_dims
    samples = []
    for i in range(n):
        s = sample_seed(seed, split, i)
        samples.append(make(np.random.default_rng(s), h, w, s, split))
    return TaskDataset(samples, task, preset_layout(task, h, w), split)


def _control_sample(rng, h, w, seed, split):
    n = int(rng.integers(1, 4))
    shapes = random_shapes(rng, h, w, n)
    shapes.sort(key=lambda s: (s.cx, s.cy))
    target = draw_shapes(_const(h, w, CONTROL_BG), shapes)
    cond = edge_map(target)
    return TaskSample([cond] * 3, target, [s.color for s in shapes], "control", seed)


def _edit_sample(rng, h, w, seed, split):
    n = int(rng.integers(1, 4))
    shapes = random_shapes(rng, h, w, n)
    for s, kind in zip(shapes, rng.permutation(SHAPES)):
        s.kind = str(kind)
    source = draw_shapes(_const(h, w, CONTROL_BG), shapes)
    k = int(rng.integers(n))
    new_color = str(rng.choice([c for c in COLORS if c != shapes[k].color]))
    edited = [Shape(s.kind, new_color if i == k else s.color, s.cy, s.cx, s.size) for i, s in enumerate(shapes)]
    target = draw_shapes(_const(h, w, CONTROL_BG), edited)
    region = np.any(source != target, axis=-1)
    marked = source.copy()
    marked[region] = 1.0
    return TaskSample([marked, source, source], target, ["recolor", new_color], "edit", seed, {"edited": k})


def gen_control(seed: int, n: int, panel_dims=(32, 32), split: str = "train", variant: str = "control") -> TaskDataset:
    """Edge-map to colour scene. ``variant="edit"`` instead yields recolouring
    edits on the 2x2 edit preset."""
    if variant == "control":
        return _build("control", _control_sample, seed, n, panel_dims, split)
    if variant == "edit":
        return _build("edit", _edit_sample, seed, n, panel_dims, split)
    raise ValueError(f"unknown control variant {variant!r}")


def _colorize_sample(rng, h, w, seed, split):
    color = str(rng.choice(list(COLORS)))
    lum = float(_rgb(COLORS[color]) @ LUMA)
    while True:
        bg = float(rng.uniform(-0.8, 0.8))
        if abs(bg - lum) >= 0.25:
            break
    shapes = random_shapes(rng, h, w, int(rng.integers(1, 4)), colors=[color] * 3)
    target = draw_shapes(_const(h, w, bg), shapes)
    cond = grayscale(target)
    return TaskSample([cond] * 3, target, [color], "colorize", seed)


def gen_colorize(seed: int, n: int, panel_dims=(32, 32), split: str = "train") -> TaskDataset:
    return _build("colorize", _colorize_sample, seed, n, panel_dims, split)


def make_glyph(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray, dict]:
    """A subject: textured shape sprite plus its alpha mask."""
    size = int(round(min(h, w) * rng.uniform(0.32, 0.42)))
    kind = str(rng.choice(SHAPES))
    tex = str(rng.choice(TEXTURES[:3]))
    c1, c2 = rng.choice(list(COLORS), size=2, replace=False)
    period = int(rng.integers(2, 4))
    phase = int(rng.integers(0, period))
    alpha = shape_mask(kind, size, size, size / 2, size / 2, size / 2)
    sprite = texture(tex, size, size, _rgb(COLORS[c1]), _rgb(COLORS[c2]), period, phase)
    info = {"kind": kind, "texture": tex, "colors": [str(c1), str(c2)], "size": size, "period": period, "phase": phase}
    return sprite, alpha, info


def paste(img: np.ndarray, sprite: np.ndarray, alpha: np.ndarray, top: int, left: int) -> np.ndarray:
    out = img.copy()
    sh, sw = alpha.shape
    region = out[top : top + sh, left : left + sw]
    region[alpha] = sprite[alpha]
    return out


def _subject_sample(rng, h, w, seed, split):
    sprite, alpha, info = make_glyph(rng, h, w)
    size = info["size"]
    refs, places = [], []
    for _ in range(3):
        bg = SCENES[str(rng.choice(TRAIN_SCENES))]
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        refs.append(paste(_const(h, w, _rgb(bg)), sprite, alpha, top, left))
        places.append((top, left))
    scene = str(rng.choice(TRAIN_SCENES if split == "train" else EVAL_SCENES))
    top, left = (h - size) // 2, (w - size) // 2
    target = paste(_const(h, w, _rgb(SCENES[scene])), sprite, alpha, top, left)
    places.append((top, left))
    meta = {"glyph": info, "placements": places}
    return TaskSample(refs, target, [scene], "subject", seed, meta)


def gen_subject(seed: int, n: int, panel_dims=(32, 32), split: str = "train") -> TaskDataset:
    """Three references of one glyph; target shows it centred in the scene
    named by the token. Eval uses scene tokens never seen in training."""
    return _build("subject", _subject_sample, seed, n, panel_dims, split)


def _figure(rng, h, w):
    """Stick figure geometry: torso rectangle plus head/limb masks."""
    th, tw = int(round(h * 0.34)), int(round(w * 0.3))
    cx = w // 2 + int(rng.integers(-w // 8, w // 8 + 1))
    top = int(round(h * 0.3))
    left = cx - tw // 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    head_r = h * 0.1
    head = (yy - (top - head_r - 1)) ** 2 + (xx - cx) ** 2 <= head_r**2
    limbs = np.zeros((h, w), dtype=bool)
    arm_y = top + 2
    limbs[arm_y : arm_y + 2, max(left - w // 6, 0) : left] = True
    limbs[arm_y : arm_y + 2, left + tw : min(left + tw + w // 6, w)] = True
    leg_top = top + th
    leg_bottom = min(leg_top + int(h * 0.22), h)
    limbs[leg_top:leg_bottom, left + 1 : left + 3] = True
    limbs[leg_top:leg_bottom, left + tw - 3 : left + tw - 1] = True
    return (top, left, th, tw), head | limbs


def _garment(rng, th, tw):
    tex = str(rng.choice(TEXTURES))
    c1, c2 = rng.choice(list(COLORS), size=2, replace=False)
    period = int(rng.integers(2, 4))
    g = texture(tex, th, tw, _rgb(COLORS[c1]), _rgb(COLORS[c2]), period, int(rng.integers(0, period)))
    return g, str(c1), tex


def _dressed(h, w, rect, body, garment):
    top, left, th, tw = rect
    img = _const(h, w, PERSON_BG)
    img[body] = _rgb((0.25, 0.2, 0.2))
    img[top : top + th, left : left + tw] = garment
    return img


def _garment_panel(h, w, garment):
    th, tw = garment.shape[:2]
    gtop, gleft = (h - th) // 2, (w - tw) // 2
    panel = _const(h, w, PERSON_BG)
    panel[gtop : gtop + th, gleft : gleft + tw] = garment
    return panel, (gtop, gleft, th, tw)


def _tryon_sample(rng, h, w, seed, split):
    rect, body = _figure(rng, h, w)
    top, left, th, tw = rect
    garment, color, tex = _garment(rng, th, tw)
    target = _dressed(h, w, rect, body, garment)
    masked = target.copy()
    masked[top : top + th, left : left + tw] = BLANK_FILL
    panel, grect = _garment_panel(h, w, garment)
    meta = {"torso": list(rect), "garment_rect": list(grect), "texture": tex}
    return TaskSample([panel, masked], target, ["tryon", color], "tryon", seed, meta)


def gen_tryon(seed: int, n: int, panel_dims=(32, 32), split: str = "train") -> TaskDataset:
    """1x3 try-on: [garment, target, masked person]."""
    return _build("tryon", _tryon_sample, seed, n, panel_dims, split)


def _extraction_sample(rng, h, w, seed, split):
    rect, body = _figure(rng, h, w)
    top, left, th, tw = rect
    garment, color, tex = _garment(rng, th, tw)
    dressed = _dressed(h, w, rect, body, garment)
    target, grect = _garment_panel(h, w, garment)
    meta = {"torso": list(rect), "garment_rect": list(grect), "texture": tex}
    return TaskSample([dressed], target, ["extraction", color], "extraction", seed, meta)


def gen_extraction(seed: int, n: int, panel_dims=(32, 32), split: str = "train") -> TaskDataset:
    """1x3 garment extraction: [dressed person, target garment, blank]."""
    return _build("extraction", _extraction_sample, seed, n, panel_dims, split)


GENERATORS: dict[str, Callable[..., TaskDataset]] = {
    "control": gen_control,
    "edit": lambda seed, n, panel_dims=(32, 32), split="train": gen_control(seed, n, panel_dims, split, "edit"),
    "colorize": gen_colorize,
    "subject": gen_subject,
    "tryon": gen_tryon,
    "extraction": gen_extraction,
}


def generate(task: str, seed: int, n: int, panel_dims=(32, 32), split: str = "train") -> TaskDataset:
    if task not in GENERATORS:
        raise KeyError(f"unknown task {task!r}; expected one of {sorted(GENERATORS)}")
    return GENERATORS[task](seed, n, panel_dims, split=split)


# ------------------------------------------------------- generic pretraining


def _scene_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if rng.random() < 0.2:
        c1, c2 = rng.choice(list(COLORS), size=2, replace=False)
        period = int(rng.integers(2, 6))
        return texture(str(rng.choice(TEXTURES[:3])), h, w, _rgb(COLORS[c1]), _rgb(COLORS[c2]), period, 0)
    if rng.random() < 0.5:
        return _const(h, w, float(rng.uniform(-0.9, 0.9)))
    return _const(h, w, _rgb(SCENES[str(rng.choice(list(SCENES)))]))


def _draw_with_masks(bg: np.ndarray, shapes: list[Shape]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Paint shapes in order; also return each shape's visible pixels."""
    img = bg.copy()
    h, w = img.shape[:2]
    visible = []
    for s in shapes:
        pix = shape_mask(s.kind, h, w, s.cy, s.cx, s.size)
        for v in visible:
            v &= ~pix
        img[pix] = _rgb(COLORS[s.color])
        visible.append(pix)
    return img, visible


def inpaint_scene(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, list[Shape], list[np.ndarray]]:
    """Generic scene: plain or textured background with coloured shapes.

    About a third of scenes are self-similar: a random tile repeated across
    the canvas, so a hole can be filled from another copy.
    """
    if rng.random() < 0.35:
        th, tw = int(rng.integers(h // 4, h // 2 + 1)), int(rng.integers(w // 4, w // 2 + 1))
        shapes = random_shapes(rng, th, tw, int(rng.integers(1, 3)))
        for sh in shapes:
            sh.size *= float(rng.uniform(0.8, 1.6))
        tile, vis = _draw_with_masks(_scene_background(rng, th, tw), shapes)
        reps = (-(-h // th) + 1, -(-w // tw) + 1)
        oy, ox = int(rng.integers(0, th)), int(rng.integers(0, tw))
        img = np.tile(tile, (*reps, 1))[oy : oy + h, ox : ox + w]
        visible = [np.tile(v, reps)[oy : oy + h, ox : ox + w] for v in vis]
        return np.ascontiguousarray(img), shapes, visible
    shapes = random_shapes(rng, h, w, int(rng.integers(1, 5)))
    for sh in shapes:
        sh.size *= float(rng.uniform(0.5, 1.3))
    img, visible = _draw_with_masks(_scene_background(rng, h, w), shapes)
    return img, shapes, visible


def random_rect_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One or two free rectangles, or a whole half or quadrant of the canvas."""
    m = np.zeros((h, w), dtype=np.float32)
    if rng.random() < 0.4:
        top, left = int(rng.integers(0, 2)) * (h // 2), int(rng.integers(0, 2)) * (w // 2)
        kind = int(rng.integers(0, 3))
        if kind == 0:
            m[top : top + h // 2, left : left + w // 2] = 1.0
        elif kind == 1:
            m[top : top + h // 2] = 1.0
        else:
            m[:, left : left + w // 2] = 1.0
        return m
    for _ in range(int(rng.integers(1, 3))):
        rh = int(rng.integers(h // 8, h // 2 + 1))
        rw = int(rng.integers(w // 8, w // 2 + 1))
        top, left = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        m[top : top + rh, left : left + rw] = 1.0
    return m


def hidden_colors(shapes: list[Shape], visible: list[np.ndarray], m: np.ndarray) -> list[str]:
    """Colours of shapes mostly covered by the mask, left to right."""
    out = []
    for s, v in sorted(zip(shapes, visible), key=lambda p: p[0].cx):
        n = v.sum()
        if n and (v & (m > 0)).sum() >= 0.5 * n and s.color not in out:
            out.append(s.color)
    return out


class InpaintDataset:
    """Generic inpainting stream: random scenes with random rectangular
    target masks, generated on demand from ``(seed, index)``."""

    def __init__(self, seed: int, size: int = 100_000, canvas_hw=(64, 64)):
        self.seed, self.size, self.canvas_hw = seed, size, tuple(canvas_hw)

    def __len__(self):
        return self.size

    def item(self, i: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7, i]))
        h, w = self.canvas_hw
        img, shapes, visible = inpaint_scene(rng, h, w)
        m = random_rect_mask(rng, h, w)
        return img, m, hidden_colors(shapes, visible, m)

    def get(self, idx: torch.Tensor):
        items = [self.item(int(i)) for i in idx]
        x0 = torch.from_numpy(np.stack([a for a, _, _ in items])).permute(0, 3, 1, 2).contiguous()
        m = torch.from_numpy(np.stack([b for _, b, _ in items]))[:, None]
        cond = torch.tensor([encode_condition(t) for _, _, t in items], dtype=torch.long)
        return x0, m, cond


# --------------------------------------------------------------- persistence


def save_dataset(ds: TaskDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "panels").mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(ds.samples):
        files = []
        for j, p in enumerate(s.context):
            name = f"panels/{i:05d}_ctx{j}.png"
            save_png(p, out / name)
            files.append(name)
        tname = f"panels/{i:05d}_target.png"
        save_png(s.target, out / tname)
        index.append(
            {"index": i, "seed": s.seed, "tokens": list(s.tokens), "context": files, "target": tname, "meta": s.meta}
        )
    payload = {
        "task": ds.task,
        "layout": ds.layout.name,
        "layout_spec": ds.layout.to_json(),
        "split": ds.split,
        "vocab": list(ds.vocab),
        "samples": index,
    }
    path = out / "index.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def load_dataset(path: str | Path) -> TaskDataset:
    path = Path(path)
    root = path.parent if path.is_file() else path
    payload = json.loads((root / "index.json").read_text())
    samples = [
        TaskSample(
            [load_png(root / f) for f in e["context"]],
            load_png(root / e["target"]),
            list(e["tokens"]),
            payload["task"],
            int(e["seed"]),
            e.get("meta", {}),
        )
        for e in payload["samples"]
    ]
    return TaskDataset(samples, payload["task"], LayoutSpec.from_json(payload["layout_spec"]), payload["split"], tuple(payload["vocab"]))
