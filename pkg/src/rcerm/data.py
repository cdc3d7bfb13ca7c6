"""Synthetic multi-domain shape dataset.

Four shape classes (disk, square, triangle, cross) are rendered in four
styles that play the role of visual domains: shaded "photo", textured
"art", flat-filled outlined "cartoon", and outline-only "sketch". The
class is carried purely by geometry, so it is invariant to the style a
draw is rendered in. Everything is deterministic given the master seed,
with one RNG stream per (class, domain) cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DatasetError, FormatError
from .tensor_io import load_tensor, save_tensor

SHAPES = ("disk", "square", "triangle", "cross")
STYLES = ("photo", "art", "cartoon", "sketch")


@dataclass
class Example:
    pixels: np.ndarray
    class_label: int
    domain_label: int


@dataclass
class ShapeDraw:
    """Geometry of one rendered example: what to draw and where."""

    shape: int
    cx: float
    cy: float
    radius: float
    rotation: float


@dataclass
class SplitPlan:
    """Per-cell small-split indices; the big split is the complement."""

    holdout_domain: int
    small_frac: float
    seed: int
    small: dict[tuple[int, int], tuple[int, ...]]

    def big(self, c: int, d: int, n: int) -> tuple[int, ...]:
        chosen = set(self.small[(c, d)])
        return tuple(i for i in range(n) if i not in chosen)


@dataclass
class DomainDataset:
    cells: dict[tuple[int, int], np.ndarray]
    h: int
    w: int
    n_classes: int
    n_domains: int
    seed: int
    n_per_cell: int
    split_plan: SplitPlan | None = None

    @property
    def input_dim(self) -> int:
        return self.h * self.w

    def cell(self, c: int, d: int) -> np.ndarray:
        return self.cells[(c, d)]

    def examples(self, selector: list[tuple[int, int, tuple[int, ...]]]) -> list[Example]:
        out: list[Example] = []
        for c, d, indices in selector:
            images = self.cells[(c, d)]
            out.extend(Example(pixels=images[i], class_label=c, domain_label=d)
                       for i in indices)
        return out


def stack_examples(examples: list[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten an example list into ([M, H*W] pixels, [M] labels)."""
    x = np.stack([e.pixels.reshape(-1) for e in examples], axis=0)
    y = np.asarray([e.class_label for e in examples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# rendering


def _rotated_offsets(h: int, w: int, cx: float, cy: float, rot: float):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    cos, sin = np.cos(rot), np.sin(rot)
    return cos * dx + sin * dy, -sin * dx + cos * dy


def shape_mask(draw: ShapeDraw, h: int, w: int) -> np.ndarray:
    """Boolean inside-mask of the drawn shape on an h-by-w pixel grid."""
    dx, dy = _rotated_offsets(h, w, draw.cx, draw.cy, draw.rotation)
    r = draw.radius
    name = SHAPES[draw.shape]
    if name == "disk":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        s = 0.9 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if name == "triangle":
        # Equilateral triangle, one vertex pointing up.
        rr = 1.25 * r
        verts = [(rr * np.sin(a), -rr * np.cos(a)) for a in (0.0, 2 * np.pi / 3, 4 * np.pi / 3)]
        inside = np.ones((h, w), dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0
        return inside
    if name == "cross":
        arm = 0.45 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= 1.15 * r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= 1.15 * r))
    raise ConfigError(f"unknown shape id {draw.shape}")


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    out[0, :] = out[-1, :] = out[:, 0] = out[:, -1] = False
    return out


def _outline(mask: np.ndarray, thickness: int = 1) -> np.ndarray:
    inner = mask
    for _ in range(thickness):
        inner = _erode(inner)
    return mask & ~inner


def sample_draw(rng: np.random.Generator, shape: int, h: int, w: int) -> ShapeDraw:
    """Jittered position/scale/rotation for one example."""
    side = min(h, w)
    return ShapeDraw(
        shape=shape,
        cx=w / 2.0 + rng.uniform(-0.08, 0.08) * side,
        cy=h / 2.0 + rng.uniform(-0.08, 0.08) * side,
        radius=rng.uniform(0.27, 0.36) * side,
        rotation=rng.uniform(-0.22, 0.22),
    )


def render(draw: ShapeDraw, style: int, h: int, w: int,
           rng: np.random.Generator) -> np.ndarray:
    """Render one draw in one style; pixels in [0, 1], dark shape on light ground."""
    mask = shape_mask(draw, h, w)
    name = STYLES[style]
    img = np.empty((h, w))
    if name == "photo":
        # Filled shape with a smooth bright spot plus mild sensor-like noise.
        lx = draw.cx + rng.uniform(-0.3, 0.3) * draw.radius
        ly = draw.cy + rng.uniform(-0.3, 0.3) * draw.radius
        sigma = rng.uniform(0.8, 1.4) * draw.radius
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        shade = np.exp(-((xx - lx) ** 2 + (yy - ly) ** 2) / (2 * sigma * sigma))
        img[:] = 0.95
        img[mask] = 0.06 + 0.28 * shade[mask]
        img += rng.normal(0.0, 0.01, size=img.shape)
    elif name == "art":
        # Filled shape and background both carry a sinusoidal brush texture.
        fx, fy = rng.uniform(0.6, 1.6, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        wave = np.sin(fx * xx + fy * yy + phase)
        img[:] = 0.92 + 0.06 * wave
        img[mask] = (0.14 + 0.1 * wave)[mask]
    elif name == "cartoon":
        img[:] = 0.97
        img[mask] = 0.45
        img[_outline(mask, thickness=2)] = 0.05
    elif name == "sketch":
        img[:] = 1.0
        img[_outline(mask, thickness=1)] = 0.08
    else:
        raise ConfigError(f"unknown style id {style}")
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset construction


def generate(seed: int, n_per_cell: int = 100, h: int = 16, w: int = 16,
             n_classes: int = 4, n_domains: int = 4) -> DomainDataset:
    """Deterministic dataset with ``n_per_cell`` examples per (class, domain)."""
    if n_per_cell < 2:
        raise ConfigError(f"n_per_cell must be >= 2 (splits need one example each), got {n_per_cell}")
    if not 1 <= n_classes <= len(SHAPES):
        raise ConfigError(f"n_classes must lie in [1, {len(SHAPES)}], got {n_classes}")
    if not 1 <= n_domains <= len(STYLES):
        raise ConfigError(f"n_domains must lie in [1, {len(STYLES)}], got {n_domains}")
    if h < 8 or w < 8:
        raise ConfigError(f"images must be at least 8x8, got {h}x{w}")
    cells: dict[tuple[int, int], np.ndarray] = {}
    for c in range(n_classes):
        for d in range(n_domains):
            rng = np.random.default_rng([int(seed), c, d])
            images = np.empty((n_per_cell, h, w))
            for i in range(n_per_cell):
                draw = sample_draw(rng, c, h, w)
                images[i] = render(draw, d, h, w, rng)
            cells[(c, d)] = images
    return DomainDataset(cells=cells, h=h, w=w, n_classes=n_classes,
                         n_domains=n_domains, seed=int(seed), n_per_cell=n_per_cell)


def split(dataset: DomainDataset, holdout_domain: int, small_frac: float = 0.2,
          seed: int = 0) -> SplitPlan:
    """Disjoint big/small splits per cell, equal sizes across domains.

    The held-out domain gets its own small split so final-epoch oracle
    evaluation has something to read.
    """
    if not 0 <= holdout_domain < dataset.n_domains:
        raise ConfigError(f"holdout domain {holdout_domain} out of range [0, {dataset.n_domains})")
    if not 0.0 < small_frac < 1.0:
        raise ConfigError(f"small_frac must lie in (0,1), got {small_frac}")
    n = dataset.n_per_cell
    n_small = min(max(1, round(small_frac * n)), n - 1)
    small: dict[tuple[int, int], tuple[int, ...]] = {}
    for c in range(dataset.n_classes):
        for d in range(dataset.n_domains):
            rng = np.random.default_rng([int(seed), 7, c, d])
            chosen = rng.choice(n, size=n_small, replace=False)
            small[(c, d)] = tuple(sorted(int(i) for i in chosen))
    plan = SplitPlan(holdout_domain=holdout_domain, small_frac=float(small_frac),
                     seed=int(seed), small=small)
    dataset.split_plan = plan
    return plan


def selector_for(dataset: DomainDataset, plan: SplitPlan, which: str,
                 domains: list[int] | None = None) -> list[tuple[int, int, tuple[int, ...]]]:
    """Index selector for a named split over the given domains.

    ``which`` is one of big/small/all; ``domains`` defaults to all
    training domains for big/small and the holdout for ``all``.
    """
    n = dataset.n_per_cell
    if domains is None:
        if which == "all":
            domains = [plan.holdout_domain]
        else:
            domains = [d for d in range(dataset.n_domains) if d != plan.holdout_domain]
    out = []
    for c in range(dataset.n_classes):
        for d in domains:
            if which == "big":
                idx = plan.big(c, d, n)
            elif which == "small":
                idx = plan.small[(c, d)]
            elif which == "all":
                idx = tuple(range(n))
            else:
                raise ConfigError(f"unknown split selector {which!r}")
            out.append((c, d, idx))
    return out


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + cell_c{c}_d{d}.rct + labels.json

_MANIFEST = "manifest.json"
_LABELS = "labels.json"


def _cell_filename(c: int, d: int) -> str:
    return f"cell_c{c}_d{d}.rct"


def save_dataset(dataset: DomainDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "rcerm-dataset",
        "h": dataset.h,
        "w": dataset.w,
        "n_classes": dataset.n_classes,
        "n_domains": dataset.n_domains,
        "seed": dataset.seed,
        "n_per_cell": dataset.n_per_cell,
        "split": None,
    }
    if dataset.split_plan is not None:
        plan = dataset.split_plan
        manifest["split"] = {
            "holdout_domain": plan.holdout_domain,
            "small_frac": plan.small_frac,
            "seed": plan.seed,
            "small": {f"{c},{d}": list(v) for (c, d), v in sorted(plan.small.items())},
        }
    labels = []
    for c in range(dataset.n_classes):
        for d in range(dataset.n_domains):
            save_tensor(out / _cell_filename(c, d), dataset.cells[(c, d)])
            labels.append({"class": c, "domain": d,
                           "count": int(dataset.cells[(c, d)].shape[0]),
                           "file": _cell_filename(c, d)})
    (out / _MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / _LABELS).write_text(json.dumps({"cells": labels}, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir) -> DomainDataset:
    root = Path(in_dir)
    manifest_path = root / _MANIFEST
    if not manifest_path.is_file():
        raise FormatError(f"{root}: missing {_MANIFEST}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{manifest_path}: invalid JSON ({err})") from None
    if manifest.get("format") != "rcerm-dataset":
        raise FormatError(f"{manifest_path}: not a dataset manifest")
    h, w = int(manifest["h"]), int(manifest["w"])
    n_classes, n_domains = int(manifest["n_classes"]), int(manifest["n_domains"])
    n_per_cell = int(manifest["n_per_cell"])
    cells: dict[tuple[int, int], np.ndarray] = {}
    for c in range(n_classes):
        for d in range(n_domains):
            cell_path = root / _cell_filename(c, d)
            if not cell_path.is_file():
                raise FormatError(f"{root}: missing cell file for (class={c}, domain={d})")
            arr = load_tensor(cell_path)
            if arr.shape != (n_per_cell, h, w):
                raise FormatError(
                    f"{cell_path}: shape {arr.shape} does not match manifest "
                    f"({n_per_cell}, {h}, {w})")
            cells[(c, d)] = arr
    dataset = DomainDataset(cells=cells, h=h, w=w, n_classes=n_classes,
                            n_domains=n_domains, seed=int(manifest["seed"]),
                            n_per_cell=n_per_cell)
    split_info = manifest.get("split")
    if split_info is not None:
        small = {}
        for key, values in split_info["small"].items():
            c_str, d_str = key.split(",")
            small[(int(c_str), int(d_str))] = tuple(int(v) for v in values)
        dataset.split_plan = SplitPlan(
            holdout_domain=int(split_info["holdout_domain"]),
            small_frac=float(split_info["small_frac"]),
            seed=int(split_info["seed"]),
            small=small,
        )
    return dataset
