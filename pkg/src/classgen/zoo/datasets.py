"""Desk-scale dataset ingestion.

Three sources are supported: the built-in ``digits28`` set (scikit-learn's
handwritten digits, bilinearly upsampled from 8x8 to 28x28, so the whole
pipeline runs with no downloads), directories holding the standard
idx-ubyte binary layout, and folder-per-class image directories.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, InputShapeError

DIGIT_NAMES = ["zero", "one", "two", "three", "four",
               "five", "six", "seven", "eight", "nine"]


@dataclass
class ImageDataset:
    """Images as an (N, C, H, W) float64 array in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputShapeError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape[0] != self.images.shape[0]:
            raise InputShapeError("label count disagrees with image count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.class_names)

    def of_class(self, class_id: int) -> "ImageDataset":
        return self.subset(np.flatnonzero(self.labels == class_id))


def split_dataset(dataset: ImageDataset, holdout_fraction: float, seed: int):
    """Deterministic (train, holdout) split."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {holdout_fraction}")
    n = len(dataset)
    perm = np.random.default_rng([seed, 0x73706C]).permutation(n)
    k = int(round(n * holdout_fraction))
    return dataset.subset(perm[k:]), dataset.subset(perm[:k])


def load_digits28() -> ImageDataset:
    """Built-in handwritten-digit set upsampled to 28x28."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = torch.from_numpy(raw.images / 16.0).unsqueeze(1)
    imgs = F.interpolate(imgs, size=(28, 28), mode="bilinear", align_corners=False)
    return ImageDataset(imgs.clamp(0, 1).numpy(), raw.target, list(DIGIT_NAMES))


def _read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = struct.unpack(">i", f.read(4))[0]
        ndim = magic & 0xFF
        if magic >> 8 != 0x0008 or ndim not in (1, 3):
            raise ConfigError(f"{path}: unsupported idx magic {magic:#x}")
        dims = struct.unpack(f">{ndim}i", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ConfigError(f"{path}: truncated idx payload")
    return data.reshape(dims)


def load_idx_dir(path: str, prefix: str = "train") -> ImageDataset:
    """Load a directory in the standard MNIST binary layout."""
    img_path = os.path.join(path, f"{prefix}-images-idx3-ubyte")
    lbl_path = os.path.join(path, f"{prefix}-labels-idx1-ubyte")
    for p in (img_path, lbl_path):
        if not os.path.exists(p):
            raise ConfigError(f"missing idx file: {p}")
    images = _read_idx(img_path).astype(np.float64) / 255.0
    labels = _read_idx(lbl_path).astype(np.int64)
    return ImageDataset(images[:, None, :, :], labels, list(DIGIT_NAMES))


def load_image_folder(path: str) -> ImageDataset:
    """Folder-per-class loader; class names are the sorted subfolder names."""
    from PIL import Image

    classes = sorted(
        d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
    )
    if not classes:
        raise ConfigError(f"{path}: no class subdirectories found")
    images, labels = [], []
    for label, cls in enumerate(classes):
        cdir = os.path.join(path, cls)
        for name in sorted(os.listdir(cdir)):
            img = Image.open(os.path.join(cdir, name)).convert("L")
            images.append(np.asarray(img, dtype=np.float64)[None, :, :] / 255.0)
            labels.append(label)
    if not images:
        raise ConfigError(f"{path}: class folders contain no images")
    return ImageDataset(np.stack(images), np.array(labels), classes)


def load_dataset(name_or_path: str) -> ImageDataset:
    """Resolve a dataset by built-in name or filesystem path."""
    if name_or_path == "digits28":
        return load_digits28()
    if os.path.isdir(name_or_path):
        if os.path.exists(os.path.join(name_or_path, "train-images-idx3-ubyte")):
            return load_idx_dir(name_or_path)
        return load_image_folder(name_or_path)
    raise ConfigError(f"unknown dataset: {name_or_path}")
