"""Datasets: CIFAR binary ingestion, a synthetic generator, augmentation, label subsetting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

IMAGE_SHAPE = (32, 32, 3)
PIXELS = 32 * 32 * 3

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C uint8
    labels: np.ndarray  # N int64
    labeled_mask: np.ndarray  # N bool
    num_classes: int

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.labeled_mask) != n:
            raise DatasetError(f"length mismatch: images {n}, labels {len(self.labels)}, "
                               f"mask {len(self.labeled_mask)}")

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_arrays(cls, images, labels, num_classes: Optional[int] = None) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        return cls(np.asarray(images, dtype=np.uint8), labels, np.ones(len(labels), dtype=bool), num_classes)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.labeled_mask[idx], self.num_classes)


# ---------------------------------------------------------------- CIFAR

def parse_cifar_records(buf: bytes, label_bytes: int = 1, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR binary records (label byte(s) then 3072 channel-planar pixels).

    With two label bytes (CIFAR-100: coarse, fine) the fine label is used.
    """
    record = label_bytes + PIXELS
    if len(buf) % record:
        whole = len(buf) // record
        raise DatasetError(
            f"{source}: truncated CIFAR file, {len(buf)} bytes is not a multiple of the "
            f"{record}-byte record (expected {whole * record} or {(whole + 1) * record}); "
            f"partial record starts at byte offset {whole * record}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def encode_cifar_records(images: np.ndarray, labels: np.ndarray, label_bytes: int = 1) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    planar = images.transpose(0, 3, 1, 2).reshape(len(images), PIXELS)
    lab = np.zeros((len(images), label_bytes), dtype=np.uint8)
    lab[:, -1] = labels
    return np.concatenate([lab, planar], axis=1).tobytes()


def _read_split(root: Path, names, label_bytes: int) -> Tuple[np.ndarray, np.ndarray]:
    imgs, labs = [], []
    for name in names:
        path = root / name
        if not path.exists():
            raise DatasetError(f"missing CIFAR file {path}")
        x, y = parse_cifar_records(path.read_bytes(), label_bytes, source=str(path))
        imgs.append(x)
        labs.append(y)
    return np.concatenate(imgs), np.concatenate(labs)


def load_cifar(directory) -> Tuple[Dataset, Dataset]:
    """Load CIFAR-10 (``data_batch_*.bin``) or CIFAR-100 (``train.bin``) binaries."""
    root = Path(directory)
    if (root / CIFAR100_TRAIN[0]).exists():
        label_bytes, classes, tr, te = 2, 100, CIFAR100_TRAIN, CIFAR100_TEST
    elif (root / CIFAR10_TRAIN[0]).exists():
        label_bytes, classes, tr, te = 1, 10, CIFAR10_TRAIN, CIFAR10_TEST
    else:
        raise DatasetError(f"no CIFAR binary files found in {root}")
    xtr, ytr = _read_split(root, tr, label_bytes)
    xte, yte = _read_split(root, te, label_bytes)
    return Dataset.from_arrays(xtr, ytr, classes), Dataset.from_arrays(xte, yte, classes)


def dataset_root() -> Optional[str]:
    return os.environ.get("SVDKD_DATA_ROOT")


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    blobs_per_class: int = 3
    distractors: int = 2
    position_jitter: float = 2.0
    noise_std: float = 24.0
    blob_sigma: Tuple[float, float] = (2.5, 5.0)


def _class_templates(classes: int, spec: SyntheticSpec, rng: np.random.Generator) -> list:
    templates = []
    for _ in range(classes):
        centers = rng.uniform(6, 26, size=(spec.blobs_per_class, 2))
        colors = rng.uniform(-1, 1, size=(spec.blobs_per_class, 3))
        sigmas = rng.uniform(*spec.blob_sigma, size=spec.blobs_per_class)
        templates.append((centers, colors, sigmas))
    return templates


def _render(centers, colors, sigmas, amps) -> np.ndarray:
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    img = np.zeros(IMAGE_SHAPE)
    for (cy, cx), col, s, a in zip(centers, colors, sigmas, amps):
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += a * g[:, :, None] * col[None, None, :]
    return img


def synthetic_dataset(classes: int, per_class: int, seed: int, template_seed: Optional[int] = None,
                      spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Class-conditional Gaussian-blob images, ``per_class`` samples per class.

    Each class owns a few coloured blobs at fixed positions; samples jitter
    them, add class-independent distractor blobs and pixel noise. Splits that
    share ``template_seed`` share the class definitions.
    """
    if classes < 2:
        raise DatasetError("synthetic_dataset needs at least 2 classes")
    templates = _class_templates(classes, spec, np.random.default_rng(
        seed if template_seed is None else template_seed))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    images = np.empty((classes * per_class,) + IMAGE_SHAPE, dtype=np.uint8)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    for i, c in enumerate(labels):
        centers, colors, sigmas = templates[c]
        jitter = rng.normal(0, spec.position_jitter, size=centers.shape)
        amps = rng.uniform(0.6, 1.0, size=len(centers))
        img = _render(centers + jitter, colors, sigmas, amps)
        if spec.distractors:
            d_centers = rng.uniform(4, 28, size=(spec.distractors, 2))
            d_colors = rng.uniform(-1, 1, size=(spec.distractors, 3))
            d_sigmas = rng.uniform(*spec.blob_sigma, size=spec.distractors)
            img += _render(d_centers, d_colors, d_sigmas, rng.uniform(0.6, 1.0, size=spec.distractors))
        img = 128 + 80 * img + rng.normal(0, spec.noise_std, size=img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, np.ones(len(labels), dtype=bool), classes)


def synthetic_splits(classes: int, per_class_train: int, per_class_test: int, seed: int,
                     spec: SyntheticSpec = SyntheticSpec()) -> Tuple[Dataset, Dataset]:
    train = synthetic_dataset(classes, per_class_train, seed, template_seed=seed, spec=spec)
    test = synthetic_dataset(classes, per_class_test, seed + 1_000_003, template_seed=seed, spec=spec)
    return train, test


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    enabled: bool = True
    max_shift: int = 4
    max_rotation: float = 15.0
    flip_prob: float = 0.5


def augment(batch: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random shift (edge padded), nearest-neighbour rotation and horizontal flip.

    Random draws are made for every image whatever the configuration, so the
    generator advances identically; zero magnitudes give back the input.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise DatasetError(f"augment expects an NHWC batch, got shape {batch.shape}")
    n, h, w, _ = batch.shape
    # floor of a uniform draw: integers() skips the generator when the range is empty
    shifts = np.floor(rng.random((n, 2)) * (2 * cfg.max_shift + 1)).astype(np.intp) - cfg.max_shift
    angles = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation, size=n))
    flips = rng.random(n) < cfg.flip_prob

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos, sin = np.cos(angles)[:, None, None], np.sin(angles)[:, None, None]
    dy, dx = yy[None] - cy, xx[None] - cx
    # inverse rotation of the destination grid, then undo the shift
    sy = cos * dy + sin * dx + cy - shifts[:, 0, None, None]
    sx = -sin * dy + cos * dx + cx - shifts[:, 1, None, None]
    sx = np.where(flips[:, None, None], (w - 1) - sx, sx)
    iy = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
    return batch[np.arange(n)[:, None, None], iy, ix]


def hflip(batch: np.ndarray) -> np.ndarray:
    return np.asarray(batch)[:, :, ::-1]


# ---------------------------------------------------------------- labels, batching

def subset_labels(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep labels for ``ceil(fraction * n_c)`` samples of every class ``c``."""
    if not 0 < fraction <= 1:
        raise DatasetError(f"label fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    mask = np.zeros(len(d), dtype=bool)
    for c in range(d.num_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size == 0:
            continue
        keep = math.ceil(fraction * idx.size - 1e-9)
        if keep == 0:
            raise DatasetError(f"label fraction {fraction} leaves class {c} without labels")
        mask[rng.permutation(idx)[:keep]] = True
    return Dataset(d.images, d.labels, mask, d.num_classes)


def channel_mean(d: Dataset) -> np.ndarray:
    return (d.images.reshape(-1, d.images.shape[-1]).mean(axis=0) / 255.0).astype(np.float32)


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
