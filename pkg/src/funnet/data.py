"""Datasets and the cached DCT feature pipeline."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from funnet.dct_codec import (
    FULL_SPEC,
    CompressionSpec,
    DctTensor,
    preprocess,
    read_fdt,
    rgb_to_ycbcr,
    write_fdt,
    zigzag_order,
)
from funnet.errors import DatasetError, DimensionError
from funnet.imageio import read_image

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
MAX_SYNTH_CLASSES = 8


@dataclass
class Dataset:
    """Labelled RGB images of one size, in a fixed order."""

    images: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    kind: str = "synthetic"
    split: str = "train"
    class_names: tuple[str, ...] = ()
    paths: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DimensionError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        if not self.class_names:
            self.class_names = tuple(str(k) for k in range(self.num_classes))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        paths = tuple(self.paths[i] for i in idx) if self.paths else ()
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.kind,
                       self.split, self.class_names, paths)


def load_folder_dataset(path: str | os.PathLike, split: str = "train") -> Dataset:
    """Class-named subdirectories of images; labels follow sorted class names."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels, paths = [], [], []
    for label, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{root / name}: class {name!r} has no images")
        for f in files:
            try:
                img = read_image(f)
            except (OSError, ValueError) as exc:
                raise DatasetError(f"{f}: {exc}") from exc
            if images and img.shape != images[0].shape:
                raise DatasetError(f"{f}: size {img.shape[:2]} differs from {images[0].shape[:2]}")
            if img.shape[0] % 16 or img.shape[1] % 16:
                raise DatasetError(f"{f}: size {img.shape[:2]} is not a multiple of 16")
            images.append(img)
            labels.append(label)
            paths.append(str(f))
    return Dataset(np.stack(images), np.array(labels), len(classes), "folder", split,
                   tuple(classes), tuple(paths))


def _basis_image(u: int, v: int, size: int) -> np.ndarray:
    """Every 8x8 tile holds the unnormalized DCT basis pattern (u, v)."""
    phase = np.pi * (2 * (np.arange(size) % 8) + 1) / 16
    return np.outer(np.cos(phase * u), np.cos(phase * v))


def synth_freq_dataset(n: int, num_classes: int = 4, seed: int = 0, size: int = 224,
                       split: str = "train", noise: float = 40.0) -> Dataset:
    """Grayscale images whose class is the frequency band of a hidden cosine.

    Class k draws a grid frequency (u, v) with u + v = k + 1, so its energy
    lands on zigzag diagonal k + 1. Amplitude, sign, the (u, v) choice within
    the band and the brightness vary per image and Gaussian noise is added.
    Labels cycle through the classes, so the histogram is uniform to within
    one. ``split`` selects an independent random stream for the same seed.
    """
    if not 1 <= num_classes <= MAX_SYNTH_CLASSES:
        raise DatasetError(f"num_classes must be in [1, {MAX_SYNTH_CLASSES}]")
    if size % 16:
        raise DimensionError(f"image size {size} is not a multiple of 16")
    split_id = {"train": 0, "test": 1}.get(split)
    if split_id is None:
        raise DatasetError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, split_id])
    bands = [
        [(u, k + 1 - u) for u in range(k + 2) if u < 8 and k + 1 - u < 8]
        for k in range(num_classes)
    ]
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        u, v = bands[k][rng.integers(len(bands[k]))]
        amp = rng.uniform(12.0, 40.0) * rng.choice((-1.0, 1.0))
        base = rng.uniform(96.0, 160.0)
        gray = base + amp * _basis_image(u, v, size) + rng.normal(0.0, noise, (size, size))
        images[i] = np.clip(np.rint(gray), 0, 255).astype(np.uint8)[:, :, None]
    return Dataset(images, labels, num_classes, "synthetic", split)


def band_of(index: int) -> int:
    """Zigzag diagonal (u + v) of a coefficient index within one plane."""
    u, v = zigzag_order()[index]
    return u + v


# ---------------------------------------------------------------------------
# feature cache


class FeatureCache:
    """DCT tensors keyed by a hash of image bytes and compression spec.

    With a directory the tensors are stored as FDT1 files and survive across
    runs; without one they live in memory only.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(image: np.ndarray, spec: CompressionSpec) -> str:
        h = hashlib.sha256()
        h.update(str(image.shape).encode())
        h.update(str(spec).encode())
        h.update(np.ascontiguousarray(image).tobytes())
        return h.hexdigest()

    def get(self, image: np.ndarray, spec: CompressionSpec) -> np.ndarray:
        k = self.key(image, spec)
        if k in self._memory:
            self.hits += 1
            return self._memory[k]
        path = self.directory / f"{k}.fdt" if self.directory is not None else None
        if path is not None and path.exists():
            self.hits += 1
            data = read_fdt(path).data
        else:
            self.misses += 1
            tensor = preprocess(image, spec)
            tensor = DctTensor(tensor.data.astype(np.float32), spec)
            if path is not None:
                write_fdt(path, tensor)
            data = tensor.data
        self._memory[k] = data
        return data


def dct_features(ds: Dataset, spec: CompressionSpec = FULL_SPEC,
                 cache: FeatureCache | None = None) -> np.ndarray:
    """(N, channels, H/8, W/8) float32 coefficients for every image."""
    cache = cache if cache is not None else FeatureCache()
    if len(ds) == 0:
        raise DatasetError("empty dataset")
    return np.stack([cache.get(img, spec) for img in ds.images]).astype(np.float32)


def plane_batches(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """YCbCr planes as (N, 1, H, W), (N, 1, H/2, W/2) x2 float32 arrays."""
    ys, cbs, crs = [], [], []
    for img in ds.images:
        p = rgb_to_ycbcr(img)
        ys.append(p.y)
        cbs.append(p.cb)
        crs.append(p.cr)
    return tuple(np.stack(a)[:, None].astype(np.float32) for a in (ys, cbs, crs))


def channel_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over (N, H, W), accumulated in float64."""
    f = features.astype(np.float64)
    return f.mean(axis=(0, 2, 3)), f.std(axis=(0, 2, 3))
