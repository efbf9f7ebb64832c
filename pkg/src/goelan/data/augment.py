"""Image + box augmentations. Every transform keeps boxes consistent with pixels.

Boxes are normalized center-format; after each geometric transform they are
clipped to the image and dropped if nothing (or less than ``MIN_AREA`` of the
image) remains.
"""

from __future__ import annotations

from typing import Sequence

import cv2
import numpy as np

from goelan.config import ConfigError
from goelan.data.manifest import Sample
from goelan.structures import GroundTruthObject

MIN_AREA = 1e-4
FILL_VALUE = 114 / 255


def clip_objects(corners: Sequence[tuple[int, float, float, float, float]]) -> list[GroundTruthObject]:
    """Clip normalized corner boxes ``(cls, x1, y1, x2, y2)`` to [0, 1]; drop empties and slivers."""
    out = []
    for cls, x1, y1, x2, y2 in corners:
        x1, x2 = max(0.0, x1), min(1.0, x2)
        y1, y2 = max(0.0, y1), min(1.0, y2)
        w, h = x2 - x1, y2 - y1
        if w <= 0 or h <= 0 or w * h < MIN_AREA:
            continue
        out.append(GroundTruthObject(cls, (x1 + x2) / 2, (y1 + y2) / 2, w, h))
    return out


def _corners(o: GroundTruthObject) -> tuple[int, float, float, float, float]:
    return (o.class_id, o.cx - o.w / 2, o.cy - o.h / 2, o.cx + o.w / 2, o.cy + o.h / 2)


def flip(sample: Sample, axis: str = "horizontal") -> Sample:
    if axis == "horizontal":
        image = sample.image[:, ::-1]
        objects = [GroundTruthObject(o.class_id, 1.0 - o.cx, o.cy, o.w, o.h) for o in sample.objects]
    elif axis == "vertical":
        image = sample.image[::-1]
        objects = [GroundTruthObject(o.class_id, o.cx, 1.0 - o.cy, o.w, o.h) for o in sample.objects]
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return Sample(np.ascontiguousarray(image), objects, sample.source)


def crop(sample: Sample, region: tuple[float, float, float, float]) -> Sample:
    """Crop to the normalized region ``(x1, y1, x2, y2)``; the output keeps the crop's pixel size."""
    h, w = sample.image.shape[:2]
    px1, px2 = int(round(region[0] * w)), int(round(region[2] * w))
    py1, py2 = int(round(region[1] * h)), int(round(region[3] * h))
    px1, py1 = max(0, px1), max(0, py1)
    px2, py2 = min(w, px2), min(h, py2)
    if px2 <= px1 or py2 <= py1:
        raise ValueError(f"empty crop region {region}")
    rx1, ry1, rw, rh = px1 / w, py1 / h, (px2 - px1) / w, (py2 - py1) / h
    corners = [
        (c, (x1 - rx1) / rw, (y1 - ry1) / rh, (x2 - rx1) / rw, (y2 - ry1) / rh)
        for c, x1, y1, x2, y2 in map(_corners, sample.objects)
    ]
    image = np.ascontiguousarray(sample.image[py1:py2, px1:px2])
    return Sample(image, clip_objects(corners), sample.source)


def scale_jitter(sample: Sample, factor: float, fill: float = FILL_VALUE) -> Sample:
    """Zoom about the image center by ``factor`` keeping the output size (>1 zooms in)."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    h, w = sample.image.shape[:2]
    m = np.array([[factor, 0.0, (1 - factor) * w / 2], [0.0, factor, (1 - factor) * h / 2]], dtype=np.float64)
    image = cv2.warpAffine(sample.image, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
                           borderValue=(fill, fill, fill))
    corners = [
        (c, (x1 - 0.5) * factor + 0.5, (y1 - 0.5) * factor + 0.5, (x2 - 0.5) * factor + 0.5, (y2 - 0.5) * factor + 0.5)
        for c, x1, y1, x2, y2 in map(_corners, sample.objects)
    ]
    return Sample(image, clip_objects(corners), sample.source)


def resize(sample: Sample, size: int) -> Sample:
    """Stretch to ``size`` x ``size``; normalized boxes are unchanged."""
    if sample.image.shape[:2] == (size, size):
        return sample
    image = cv2.resize(sample.image, (size, size), interpolation=cv2.INTER_LINEAR)
    return Sample(image, list(sample.objects), sample.source)


def mosaic(samples: Sequence[Sample], out_size: int, pivot: tuple[int, int] | None = None,
           rng: np.random.Generator | None = None) -> Sample:
    """2x2 collage of four samples meeting at ``pivot`` (pixels).

    Each sample is resized to ``out_size`` and contributes the part of itself
    adjacent to the pivot: sample 0 fills the top-left quadrant with its
    bottom-right corner, sample 1 the top-right, 2 the bottom-left, 3 the bottom-right.
    """
    if len(samples) != 4:
        raise ValueError(f"mosaic needs exactly 4 samples, got {len(samples)}")
    s = out_size
    if pivot is None:
        rng = rng or np.random.default_rng()
        pivot = (int(rng.uniform(0.25, 0.75) * s), int(rng.uniform(0.25, 0.75) * s))
    xc, yc = pivot
    canvas = np.full((s, s, 3), FILL_VALUE, dtype=np.float32)
    # (source region x1, y1, x2, y2), destination offset
    layout = [
        ((s - xc, s - yc, s, s), (0, 0)),
        ((0, s - yc, s - xc, s), (xc, 0)),
        ((s - xc, 0, s, s - yc), (0, yc)),
        ((0, 0, s - xc, s - yc), (xc, yc)),
    ]
    corners = []
    for sample, ((sx1, sy1, sx2, sy2), (dx, dy)) in zip(samples, layout):
        if sx2 <= sx1 or sy2 <= sy1:
            continue
        img = resize(sample, s).image
        canvas[dy:dy + sy2 - sy1, dx:dx + sx2 - sx1] = img[sy1:sy2, sx1:sx2]
        for c, x1, y1, x2, y2 in map(_corners, sample.objects):
            x1, x2 = max(x1 * s, sx1), min(x2 * s, sx2)
            y1, y2 = max(y1 * s, sy1), min(y2 * s, sy2)
            if x2 <= x1 or y2 <= y1:
                continue
            corners.append((c, (x1 - sx1 + dx) / s, (y1 - sy1 + dy) / s, (x2 - sx1 + dx) / s, (y2 - sy1 + dy) / s))
    return Sample(canvas, clip_objects(corners), samples[0].source)


def mixup(a: Sample, b: Sample, lam: float | None = None, rng: np.random.Generator | None = None,
          beta: float = 32.0) -> Sample:
    """Blend ``lam * a + (1 - lam) * b`` with ``lam ~ Beta(beta, beta)``; objects are the union."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup needs equal image sizes, got {a.image.shape} and {b.image.shape}")
    if lam is None:
        rng = rng or np.random.default_rng()
        lam = float(rng.beta(beta, beta))
    image = (lam * a.image + (1.0 - lam) * b.image).astype(np.float32)
    return Sample(image, list(a.objects) + list(b.objects), a.source)


def gaussian_blur(sample: Sample, ksize: int = 3) -> Sample:
    return Sample(cv2.GaussianBlur(sample.image, (ksize, ksize), 0), list(sample.objects), sample.source)


def clahe(image: np.ndarray, clip_limit: float = 2.0, tile_grid: int = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on the L channel of Lab.

    Input and output are float RGB in [0, 1].
    """
    h, w = image.shape[:2]
    if tile_grid < 1 or tile_grid > min(h, w):
        raise ConfigError(f"CLAHE tile grid {tile_grid} does not fit a {h}x{w} image")
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    lab = cv2.cvtColor(u8, cv2.COLOR_RGB2LAB)
    op = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(tile_grid, tile_grid))
    lab[:, :, 0] = op.apply(lab[:, :, 0])
    out = cv2.cvtColor(lab, cv2.COLOR_LAB2RGB).astype(np.float32) / 255.0
    return out


def apply_clahe(sample: Sample, clip_limit: float = 2.0, tile_grid: int = 8) -> Sample:
    return Sample(clahe(sample.image, clip_limit, tile_grid), list(sample.objects), sample.source)
