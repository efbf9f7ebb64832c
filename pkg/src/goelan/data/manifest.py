"""Dataset manifests, annotation files and image loading."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np
import yaml

from goelan.structures import GroundTruthObject

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")

# class list of the public cataract-instrument dataset
CATARACT_CLASSES = [
    "cannula",
    "crescent blade",
    "fixation ring",
    "forceps",
    "hook",
    "keratome",
    "needle",
    "phacoprobe",
    "speculum",
    "instruments",
]
# image counts per split of that dataset (615 in total)
CATARACT_SPLIT_SIZES = {"train": 552, "val": 42, "test": 21}


class AnnotationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], RGB
    objects: list[GroundTruthObject]
    source: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[Path]]
    class_names: list[str]
    image_size: int | None = None
    source: Path | None = None
    label_files: dict[Path, Path] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.class_names:
            raise DatasetError("manifest has no class names")
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"duplicate class names in {self.class_names}")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def images(self, split: str) -> list[Path]:
        if split not in self.splits:
            raise DatasetError(f"split {split!r} not in manifest (have {sorted(self.splits)})")
        return self.splits[split]

    def label_path(self, image: Path) -> Path:
        return self.label_files.get(image) or label_path_for(image)

    def validate(self, splits: Iterable[str] | None = None) -> None:
        missing = []
        for split in splits or self.splits:
            for img in self.images(split):
                if not img.is_file():
                    missing.append(str(img))
                elif not self.label_path(img).is_file():
                    missing.append(str(self.label_path(img)))
        if missing:
            raise DatasetError("missing dataset files:\n  " + "\n  ".join(missing))

    def load(self, image: Path) -> Sample:
        label = self.label_path(image)
        objects = parse_annotation_file(label.read_text(encoding="utf-8"), self.class_count, source=str(label))
        return Sample(read_image(image), objects, str(image))


def label_path_for(image: Path) -> Path:
    """``.../images/x.png`` -> ``.../labels/x.txt``; otherwise a sibling ``x.txt``."""
    parts = list(image.parts)
    for i in range(len(parts) - 2, -1, -1):
        if parts[i] == "images":
            parts[i] = "labels"
            return Path(*parts).with_suffix(".txt")
    return image.with_suffix(".txt")


def _list_images(entry: Path) -> list[Path]:
    if entry.is_dir():
        return sorted(p for p in entry.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if entry.suffix == ".txt":
        base = entry.parent
        return [
            (base / line.strip()).resolve() if not Path(line.strip()).is_absolute() else Path(line.strip())
            for line in entry.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    return [entry]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a key-value manifest with ``train``/``val``/``test`` paths and ``names``.

    Paths are relative to ``path:`` when given, else to the manifest's folder.
    ``names`` may be a list or an index -> name mapping. A directory is read
    as its ``data.yaml``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "data.yaml"
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"manifest {path} must be a key-value mapping")
    root = Path(data.get("path") or path.parent)
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    names = data.get("names")
    if isinstance(names, dict):
        names = [names[k] for k in sorted(names)]
    if not names:
        raise DatasetError(f"manifest {path} has no 'names' list")
    splits: dict[str, list[Path]] = {}
    for split in SPLITS:
        entry = data.get(split)
        if entry is None:
            continue
        entries = entry if isinstance(entry, list) else [entry]
        images: list[Path] = []
        for e in entries:
            p = Path(e)
            images.extend(_list_images(p if p.is_absolute() else root / p))
        splits[split] = images
    return DatasetManifest(root, splits, [str(n) for n in names], data.get("imgsz"), path)


def _parse_line(line: str, lineno: int, source: str, n_fields: int) -> list[float]:
    fields = line.split()
    if len(fields) != n_fields:
        raise AnnotationError(f"{source}:{lineno}: expected {n_fields} fields, got {len(fields)}")
    try:
        values = [float(f) for f in fields]
    except ValueError:
        raise AnnotationError(f"{source}:{lineno}: non-numeric field in {line!r}") from None
    if not all(math.isfinite(v) for v in values):
        raise AnnotationError(f"{source}:{lineno}: non-finite value in {line!r}")
    return values


def _make_object(cls: float, cx: float, cy: float, w: float, h: float, lineno: int, source: str,
                 class_count: int | None) -> GroundTruthObject:
    if cls != int(cls) or cls < 0:
        raise AnnotationError(f"{source}:{lineno}: bad class id {cls}")
    if class_count is not None and cls >= class_count:
        raise AnnotationError(f"{source}:{lineno}: class id {int(cls)} >= class count {class_count}")
    if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
        raise AnnotationError(f"{source}:{lineno}: coordinates must lie in [0, 1]")
    if w <= 0 or h <= 0:
        raise AnnotationError(f"{source}:{lineno}: width and height must be positive")
    return GroundTruthObject(int(cls), cx, cy, w, h)


def parse_annotation_file(text: str, class_count: int | None = None, source: str = "<annotation>") -> list[GroundTruthObject]:
    """Parse ``class cx cy w h`` lines (normalized, whitespace separated)."""
    objects = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cls, cx, cy, w, h = _parse_line(line, lineno, source, 5)
        objects.append(_make_object(cls, cx, cy, w, h, lineno, source, class_count))
    return objects


def parse_detection_file(text: str, class_count: int | None = None, source: str = "<detections>") -> list[tuple[GroundTruthObject, float]]:
    """Parse ``class score cx cy w h`` lines as written by the ``detect`` command."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cls, score, cx, cy, w, h = _parse_line(line, lineno, source, 6)
        out.append((_make_object(cls, cx, cy, w, h, lineno, source, class_count), score))
    return out


def format_annotation(objects: Iterable[GroundTruthObject]) -> str:
    return "".join(f"{o.class_id} {o.cx:.6f} {o.cy:.6f} {o.w:.6f} {o.h:.6f}\n" for o in objects)


def read_image(path: str | Path) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise DatasetError(f"cannot read image {path}")
    return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise DatasetError(f"cannot write image {path}")
