"""Small synthetic dataset of colored rectangles in the manifest/label layout."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from goelan.data.manifest import format_annotation, write_image
from goelan.structures import GroundTruthObject

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
}


def draw_rectangles(size: int, objects: list[GroundTruthObject], colors: list[tuple[float, float, float]],
                    rng: np.random.Generator) -> np.ndarray:
    image = np.clip(0.45 + 0.05 * rng.standard_normal((size, size, 3)), 0, 1).astype(np.float32)
    for o in objects:
        x1, x2 = int(round((o.cx - o.w / 2) * size)), int(round((o.cx + o.w / 2) * size))
        y1, y2 = int(round((o.cy - o.h / 2) * size)), int(round((o.cy + o.h / 2) * size))
        image[y1:y2, x1:x2] = colors[o.class_id]
    return image


def random_objects(rng: np.random.Generator, size: int, n_classes: int, max_objects: int = 3,
                   min_px: int = 12, max_px: int = 36) -> list[GroundTruthObject]:
    """Non-overlapping pixel-aligned rectangles."""
    objects: list[GroundTruthObject] = []
    taken: list[tuple[int, int, int, int]] = []
    target = int(rng.integers(1, max_objects + 1))
    for _ in range(50):
        if len(objects) == target:
            break
        w, h = (int(v) for v in rng.integers(min_px, max_px + 1, size=2))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        if any(not (box[2] + 2 <= t[0] or t[2] + 2 <= box[0] or box[3] + 2 <= t[1] or t[3] + 2 <= box[1]) for t in taken):
            continue
        taken.append(box)
        cls = int(rng.integers(0, n_classes))
        objects.append(GroundTruthObject(cls, (x1 + w / 2) / size, (y1 + h / 2) / size, w / size, h / size))
    return objects


def make_synthetic_dataset(root: str | Path, n_train: int = 8, n_val: int = 2, n_test: int = 2, size: int = 64,
                           seed: int = 0, class_names: list[str] | None = None) -> Path:
    """Write images, labels and ``data.yaml`` under ``root``; returns the manifest path."""
    root = Path(root)
    names = class_names or list(COLORS)
    palette = [COLORS.get(n, tuple(np.random.default_rng(i).uniform(0, 1, 3))) for i, n in enumerate(names)]
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            objects = random_objects(rng, size, len(names))
            image = draw_rectangles(size, objects, palette, rng)
            stem = f"{split}_{i:03d}"
            write_image(root / "images" / split / f"{stem}.png", image)
            label = root / "labels" / split / f"{stem}.txt"
            label.parent.mkdir(parents=True, exist_ok=True)
            label.write_text(format_annotation(objects), encoding="utf-8")
    manifest = {
        "path": ".",
        "train": "images/train",
        "val": "images/val",
        "test": "images/test",
        "names": names,
        "imgsz": size,
    }
    path = root / "data.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return path
