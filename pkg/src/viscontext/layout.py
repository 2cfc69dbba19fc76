"""Grid layouts: compose panels into one canvas and derive the target mask.

A canvas is an ``(H, W, C)`` float array in ``[-1, 1]``. Panels are laid out
row-major on a regular grid; each panel carries a role (``context``,
``target`` or ``blank``).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

CONTEXT = "context"
TARGET = "target"
BLANK = "blank"
ROLES = (CONTEXT, TARGET, BLANK)

BLANK_FILL = -1.0


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutSpec:
    rows: int
    cols: int
    panel_h: int
    panel_w: int
    roles: tuple[str, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(self.roles))

    @property
    def n_panels(self) -> int:
        return self.rows * self.cols

    @property
    def canvas_hw(self) -> tuple[int, int]:
        return self.rows * self.panel_h, self.cols * self.panel_w

    @property
    def target_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == TARGET]

    @property
    def context_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == CONTEXT]

    def to_json(self) -> dict:
        d = asdict(self)
        d["roles"] = list(self.roles)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayoutSpec":
        return validate_layout(
            cls(
                rows=int(d["rows"]),
                cols=int(d["cols"]),
                panel_h=int(d["panel_h"]),
                panel_w=int(d["panel_w"]),
                roles=tuple(d["roles"]),
                name=str(d.get("name", "custom")),
            )
        )


@dataclass
class Canvas:
    """Pixels of a composed grid together with the layout that produced them."""

    pixels: np.ndarray
    layout: LayoutSpec = field(repr=False)

    def __post_init__(self):
        h, w = self.layout.canvas_hw
        if self.pixels.ndim != 3 or self.pixels.shape[:2] != (h, w):
            raise LayoutError(
                f"canvas shape {self.pixels.shape} does not match layout {self.layout.name} ({h}, {w}, C)"
            )
        if not np.all(np.isfinite(self.pixels)):
            raise LayoutError("canvas contains non-finite values")


def validate_layout(spec: LayoutSpec) -> LayoutSpec:
    for attr in ("rows", "cols", "panel_h", "panel_w"):
        v = getattr(spec, attr)
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise LayoutError(f"{attr} must be a positive integer, got {v!r}")
    if len(spec.roles) != spec.n_panels:
        raise LayoutError(f"expected {spec.n_panels} roles, got {len(spec.roles)}")
    bad = [r for r in spec.roles if r not in ROLES]
    if bad:
        raise LayoutError(f"unknown roles {bad}")
    if TARGET not in spec.roles:
        raise LayoutError("layout has no target panel")
    if CONTEXT not in spec.roles:
        raise LayoutError("layout has no context panel")
    return spec


def panel_rect(spec: LayoutSpec, index: int) -> tuple[int, int, int, int]:
    """(top, left, height, width) of panel ``index`` in row-major order."""
    if not 0 <= index < spec.n_panels:
        raise IndexError(f"panel index {index} out of range for {spec.rows}x{spec.cols}")
    r, c = divmod(index, spec.cols)
    return r * spec.panel_h, c * spec.panel_w, spec.panel_h, spec.panel_w


def compose(panels: Sequence[np.ndarray | None], spec: LayoutSpec) -> Canvas:
    """Place ``panels`` on the grid. ``None`` entries (or blank roles) get the blank fill."""
    validate_layout(spec)
    if len(panels) != spec.n_panels:
        raise LayoutError(f"expected {spec.n_panels} panels, got {len(panels)}")
    channels = {p.shape[2] for p in panels if p is not None}
    if len(channels) != 1:
        raise LayoutError(f"panels must share one channel count, got {sorted(channels)}")
    (c,) = channels
    h, w = spec.canvas_hw
    out = np.full((h, w, c), BLANK_FILL, dtype=np.float32)
    for i, p in enumerate(panels):
        if p is None or spec.roles[i] == BLANK:
            continue
        if p.shape != (spec.panel_h, spec.panel_w, c):
            raise LayoutError(
                f"panel {i} has shape {p.shape}, expected {(spec.panel_h, spec.panel_w, c)}"
            )
        top, left, ph, pw = panel_rect(spec, i)
        out[top : top + ph, left : left + pw] = p
    return Canvas(out, spec)


def target_mask(spec: LayoutSpec) -> np.ndarray:
    """Binary ``(H, W, 1)`` mask, 1 on target panels and 0 elsewhere."""
    validate_layout(spec)
    h, w = spec.canvas_hw
    m = np.zeros((h, w, 1), dtype=np.float32)
    for i in spec.target_indices:
        top, left, ph, pw = panel_rect(spec, i)
        m[top : top + ph, left : left + pw] = 1.0
    return m


def extract_panel(canvas: Canvas | np.ndarray, index: int, spec: LayoutSpec | None = None) -> np.ndarray:
    if isinstance(canvas, Canvas):
        pixels, spec = canvas.pixels, canvas.layout
    else:
        pixels = canvas
        if spec is None:
            raise LayoutError("a LayoutSpec is required for raw arrays")
    top, left, ph, pw = panel_rect(spec, index)
    if pixels.shape[:2] != spec.canvas_hw:
        raise LayoutError(f"canvas shape {pixels.shape} does not match layout")
    return pixels[top : top + ph, left : left + pw].copy()


# Panel order for each preset, row-major. The control condition is replicated
# into all three context quadrants so the target has neighbours both beside
# and above it.
_PRESETS: dict[str, tuple[int, int, tuple[str, ...]]] = {
    "control": (2, 2, (CONTEXT, CONTEXT, CONTEXT, TARGET)),
    "colorize": (2, 2, (CONTEXT, CONTEXT, CONTEXT, TARGET)),
    "subject": (2, 2, (CONTEXT, CONTEXT, CONTEXT, TARGET)),
    "edit": (2, 2, (CONTEXT, CONTEXT, CONTEXT, TARGET)),
    "tryon": (1, 3, (CONTEXT, TARGET, CONTEXT)),
    "extraction": (1, 3, (CONTEXT, TARGET, BLANK)),
}

# Alternative shapes for the layout comparison: condition first, target last.
_SHAPES: dict[str, tuple[int, int, tuple[str, ...]]] = {
    "1x2": (1, 2, (CONTEXT, TARGET)),
    "2x1": (2, 1, (CONTEXT, TARGET)),
    "2x2": (2, 2, (CONTEXT, CONTEXT, CONTEXT, TARGET)),
    "1x3": (1, 3, (CONTEXT, TARGET, CONTEXT)),
}

TASKS = tuple(_PRESETS)


def preset_layout(task: str, panel_h: int = 32, panel_w: int = 32) -> LayoutSpec:
    if task not in _PRESETS:
        raise KeyError(f"unknown task {task!r}; expected one of {sorted(_PRESETS)}")
    rows, cols, roles = _PRESETS[task]
    return validate_layout(LayoutSpec(rows, cols, panel_h, panel_w, roles, name=f"{task}-{rows}x{cols}"))


def shape_layout(shape: str, panel_h: int = 32, panel_w: int = 32, task: str = "control") -> LayoutSpec:
    if shape not in _SHAPES:
        raise KeyError(f"unknown layout shape {shape!r}; expected one of {sorted(_SHAPES)}")
    rows, cols, roles = _SHAPES[shape]
    return validate_layout(LayoutSpec(rows, cols, panel_h, panel_w, roles, name=f"{task}-{shape}"))


def arrange(spec: LayoutSpec, context: Sequence[np.ndarray], target: np.ndarray | None) -> list[np.ndarray | None]:
    """Fill the layout's context slots in order from ``context`` (cycling when
    there are fewer images than slots) and its target slot with ``target``."""
    if not context:
        raise LayoutError("need at least one context panel")
    out: list[np.ndarray | None] = []
    k = 0
    for role in spec.roles:
        if role == CONTEXT:
            out.append(context[k % len(context)])
            k += 1
        elif role == TARGET:
            out.append(target)
        else:
            out.append(None)
    return out


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255] with rounding."""
    x = (np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5
    return np.rint(x).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return from_uint8(arr)


def save_layout(spec: LayoutSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))


def load_layout(path: str | Path) -> LayoutSpec:
    return LayoutSpec.from_json(json.loads(Path(path).read_text()))
