"""Batch iteration with the training augmentation recipe.

Every sample draws from its own generator seeded by (seed, epoch, position),
so the batch stream depends on the seed only, whatever the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from goelan.config import ModelConfig
from goelan.data import augment
from goelan.data.manifest import DatasetManifest, Sample
from goelan.structures import GroundTruthObject


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, S, S) in [0, 1]
    targets: list[list[GroundTruthObject]]
    sources: list[str]

    def __len__(self) -> int:
        return len(self.targets)


def mosaic_active(cfg: ModelConfig, epoch: int) -> bool:
    """Mosaic runs for epochs [0, close_mosaic) and is disabled from then on."""
    return cfg.mosaic > 0 and epoch < cfg.close_mosaic


class DetectionDataset:
    def __init__(self, manifest: DatasetManifest, split: str, image_size: int, cache: bool = True):
        self.manifest = manifest
        self.split = split
        self.image_size = image_size
        self.paths: list[Path] = manifest.images(split)
        manifest.validate([split])
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, index: int) -> Sample:
        """Image resized to the network size, untouched otherwise."""
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        sample = augment.resize(self.manifest.load(self.paths[index]), self.image_size)
        if self._cache is not None:
            self._cache[index] = sample
        return sample

    def train_sample(self, index: int, cfg: ModelConfig, epoch: int, rng: np.random.Generator) -> Sample:
        """mosaic -> scale jitter -> flips -> mixup -> blur -> CLAHE."""
        s = self.image_size
        n = len(self)
        if mosaic_active(cfg, epoch) and rng.random() < cfg.mosaic:
            others = rng.integers(0, n, size=3)
            sample = augment.mosaic([self.load(index)] + [self.load(int(i)) for i in others], s, rng=rng)
        else:
            sample = self.load(index)
        if cfg.scale > 0:
            factor = rng.uniform(max(1e-3, 1 - cfg.scale), 1 + cfg.scale)
            sample = augment.scale_jitter(sample, factor)
        if rng.random() < cfg.fliplr:
            sample = augment.flip(sample, "horizontal")
        if rng.random() < cfg.flipud:
            sample = augment.flip(sample, "vertical")
        if rng.random() < cfg.mixup:
            other = self.load(int(rng.integers(0, n)))
            sample = augment.mixup(sample, other, rng=rng, beta=cfg.mixup_beta)
        if rng.random() < cfg.blur:
            sample = augment.gaussian_blur(sample)
        if rng.random() < cfg.clahe:
            sample = augment.apply_clahe(sample, cfg.clahe_clip_limit, cfg.clahe_tile_grid)
        return sample


def _to_tensor(samples: list[Sample], dtype: torch.dtype) -> torch.Tensor:
    arr = np.stack([np.clip(s.image, 0.0, 1.0) for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def build_pipeline(manifest: DatasetManifest, cfg: ModelConfig, split: str, epoch: int = 0,
                   seed: int | None = None, shuffle: bool | None = None, batch_size: int | None = None,
                   augment_train: bool = True, dataset: DetectionDataset | None = None) -> Iterator[Batch]:
    """Yield batches for one epoch of ``split``.

    The training split is shuffled and augmented; other splits are only
    resized. ``cfg.workers`` > 0 prepares samples on a thread pool; ordering
    and content do not depend on it.
    """
    seed = cfg.seed if seed is None else seed
    batch_size = batch_size or cfg.batch_size
    dataset = dataset or DetectionDataset(manifest, split, cfg.input_size)
    training = split == "train"
    shuffle = training if shuffle is None else shuffle
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(len(dataset))
    dtype = torch.float64 if cfg.double_precision else torch.float32

    def make(pos: int) -> Sample:
        index = int(order[pos])
        if training and augment_train:
            rng = np.random.default_rng([seed, epoch, pos])
            return dataset.train_sample(index, cfg, epoch, rng)
        return dataset.load(index)

    def batches(pool: ThreadPoolExecutor | None) -> Iterator[Batch]:
        for start in range(0, len(order), batch_size):
            positions = range(start, min(start + batch_size, len(order)))
            samples = list(pool.map(make, positions)) if pool else [make(p) for p in positions]
            yield Batch(_to_tensor(samples, dtype), [s.objects for s in samples], [s.source for s in samples])

    if cfg.workers > 0:
        with ThreadPoolExecutor(cfg.workers) as pool:
            yield from batches(pool)
    else:
        yield from batches(None)
