"""Datasets: in-memory collections, directory I/O, and a synthetic source.

A dataset is a stack of same-shape images plus optional integer labels.
On disk it is a directory with a JSON manifest listing one entry per item
({"id", "file", optional "label"}) and one rank-3 CMLT tensor per image.

The synthetic generator renders procedurally distinct classes: each class
owns a soft-edged canonical shape in a class-specific color, drawn at a
jittered position and scale over a low-contrast textured background, so
same-class items look alike without being identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

from .container import read_tensor, write_tensor
from .errors import ContractError
from .image import clamp01, require_image
from .rng import derive, generator

GOLDEN = 0.6180339887498949


@dataclass
class Dataset:
    id: str
    images: np.ndarray            # (n, H, W, C)
    labels: np.ndarray | None     # (n,) int64, or None when unlabeled

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"dataset images must be (n, H, W, C), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self),):
                raise ContractError("labels length does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def class_count(self) -> int:
        if not self.labeled:
            raise ContractError(f"dataset {self.id!r} is unlabeled")
        return int(np.unique(self.labels).size)

    def without_labels(self) -> "Dataset":
        return Dataset(id=self.id, images=self.images, labels=None)

    def classes(self) -> np.ndarray:
        if not self.labeled:
            raise ContractError(f"dataset {self.id!r} is unlabeled")
        return np.unique(self.labels)

    def subset_by_classes(self, keep, new_id: str | None = None,
                          relabel: bool = False) -> "Dataset":
        keep = np.asarray(sorted(keep))
        mask = np.isin(self.labels, keep)
        labels = self.labels[mask]
        if relabel:
            remap = {int(c): i for i, c in enumerate(keep)}
            labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
        return Dataset(id=new_id or self.id, images=self.images[mask], labels=labels)


def save_dataset(ds: Dataset, out_dir, unlabeled: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds) - 1)))
    items = []
    for i in range(len(ds)):
        name = f"img_{i:0{width}d}"
        write_tensor(out_dir / f"{name}.cmlt", ds.images[i])
        entry = {"id": name, "file": f"{name}.cmlt"}
        if ds.labeled and not unlabeled:
            entry["label"] = int(ds.labels[i])
        items.append(entry)
    manifest = {"id": ds.id, "items": items}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    images = []
    labels = []
    labeled = all("label" in item for item in manifest["items"])
    for item in manifest["items"]:
        img = read_tensor(path / item["file"])
        images.append(require_image(img, item["id"]))
        if labeled:
            labels.append(int(item["label"]))
    if not images:
        raise ContractError(f"{path}: manifest lists no items")
    return Dataset(
        id=manifest.get("id", path.name),
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64) if labeled else None,
    )


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

_SHAPE_KINDS = ("disk", "square", "triangle", "ring", "plus", "diamond")


def _shape_mask(kind: str, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Soft-edged [0, 1] mask for one canonical shape."""
    ys, xs = np.meshgrid(np.arange(size) - cy, np.arange(size) - cx, indexing="ij")
    edge = max(0.8, size / 32.0)

    def soft(signed):  # negative inside
        return 1.0 / (1.0 + np.exp(signed / edge * 4.0))

    if kind == "disk":
        return soft(np.hypot(ys, xs) - radius)
    if kind == "square":
        return soft(np.maximum(np.abs(ys), np.abs(xs)) - radius)
    if kind == "diamond":
        return soft((np.abs(ys) + np.abs(xs)) - 1.3 * radius)
    if kind == "ring":
        r = np.hypot(ys, xs)
        return soft(np.abs(r - radius) - 0.35 * radius)
    if kind == "plus":
        arm = 0.45 * radius
        bar_v = np.maximum(np.abs(xs) - arm, np.abs(ys) - radius)
        bar_h = np.maximum(np.abs(ys) - arm, np.abs(xs) - radius)
        return soft(np.minimum(bar_v, bar_h))
    if kind == "triangle":
        # upward triangle: below the apex lines and above the base
        base = ys - radius
        left = -ys - xs * 1.7 - radius * 0.6
        right = -ys + xs * 1.7 - radius * 0.6
        return soft(np.maximum(base, np.maximum(left, right)))
    raise ContractError(f"unknown shape kind {kind}")


def _smooth_noise(rng: np.random.Generator, size: int, passes: int = 2) -> np.ndarray:
    field = rng.standard_normal((size, size))
    for _ in range(passes):
        pad = np.pad(field, 1, mode="reflect")
        field = (
            pad[:-2, 1:-1] + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:] + 4 * field
        ) / 8.0
    return field


def class_template(n_classes: int, cls: int) -> tuple[str, float, float, float]:
    """(shape kind, hue, saturation, value) for a class.

    Hue, saturation, and value are all spread by low-discrepancy sequences
    so classes stay distinguishable even when an augmentation discards one
    attribute (grayscale keeps value differences, geometry keeps color).
    """
    hue = (cls * GOLDEN) % 1.0
    sat = 0.55 + 0.40 * ((cls * GOLDEN * GOLDEN + 0.37) % 1.0)
    val = 0.42 + 0.55 * ((cls * 0.7548776662466927 + 0.19) % 1.0)
    return _SHAPE_KINDS[cls % len(_SHAPE_KINDS)], hue, sat, val


def gen_synthetic_dataset(n_classes: int, per_class: int, size: int = 32,
                          channels: int = 3, seed: int = 0,
                          dataset_id: str | None = None) -> Dataset:
    """Render a labeled dataset of n_classes * per_class images."""
    if n_classes < 1 or per_class < 1 or channels not in (1, 3):
        raise ContractError(
            f"bad synthetic config: classes={n_classes} per_class={per_class} channels={channels}")
    if size < 8:
        raise ContractError(f"size {size} too small to render templates (need >= 8)")
    images = np.empty((n_classes * per_class, size, size, channels))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    idx = 0
    for cls in range(n_classes):
        kind, hue, sat, val = class_template(n_classes, cls)
        if channels == 3:
            color = hsv_to_rgb([hue, sat, val])
        else:
            color = np.array([0.15 + 0.7 * ((cls * GOLDEN * 2) % 1.0)])
        for item in range(per_class):
            rng = generator(derive(seed, "item", cls, item))
            base = 0.16 + 0.10 * rng.uniform()
            bg = base + 0.02 * _smooth_noise(rng, size)
            jitter = 0.12 * size
            cy = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
            cx = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
            radius = 0.30 * size * rng.uniform(0.85, 1.15)
            mask = _shape_mask(kind, size, cy, cx, radius)
            tint = clamp01(color + rng.uniform(-0.05, 0.05, size=color.shape))
            img = bg[:, :, None] * (1.0 - mask[:, :, None]) + mask[:, :, None] * tint
            images[idx] = clamp01(img)
            labels[idx] = cls
            idx += 1
    return Dataset(id=dataset_id or f"synthetic_{n_classes}x{per_class}", images=images,
                   labels=labels)
