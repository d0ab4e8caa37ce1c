"""Dataset readers, pixel-shift augmentation and per-channel normalization.

MNIST is read from IDX files (optionally gzipped).  CIFAR10 binary batches
and SVHN cropped-digit ``.mat`` files are supported for the color paths.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    shape: Tuple[int, int, int]  # (channels, height, width)
    num_classes: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != self.shape[0] or len(self.std) != self.shape[0]:
            raise ValueError(f"{self.name}: need one mean/std per channel")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"{self.name}: std components must be positive")


DATASETS = {
    "mnist": DatasetSpec("mnist", (1, 28, 28), 10, (0.1307,), (0.3081,)),
    "cifar10": DatasetSpec("cifar10", (3, 32, 32), 10, (0.5071, 0.4867, 0.4408), (0.2675, 0.2565, 0.2761)),
    "svhn": DatasetSpec("svhn", (3, 32, 32), 10, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


# -- IDX ---------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.GzipFile(fileobj=fh) as gz:
                return gz.read()
        return fh.read()


def load_idx(path) -> np.ndarray:
    """Parse an IDX file.

    Images (rank >= 2) come back as floats in [0, 1]; label vectors (rank 1)
    come back as int64.
    """
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    type_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if magic >> 16 != 0 or type_code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad IDX magic number 0x{magic:08X}")
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxFormatError(f"{path}: header declares {ndim} dims but the file ends early")
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    dtype = np.dtype(_IDX_TYPES[type_code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[header_len:]
    if len(payload) != expected:
        raise IdxFormatError(f"{path}: payload has {len(payload)} bytes, dims {dims} require {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if ndim == 1:
        return arr.astype(np.int64)
    if type_code == 0x08:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def _find(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def load_mnist(root, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(images N×1×28×28 in [0,1], labels N)`` for ``split`` in {train, test}."""
    prefix = {"train": "train", "test": "t10k"}[split]
    root = Path(root)
    images = load_idx(_find(root, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx(_find(root, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise IdxFormatError(f"{root}: {len(images)} images but {len(labels)} labels for split {split!r}")
    return images.reshape(len(images), 1, *images.shape[1:]), labels


def load_cifar10(root, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """CIFAR10 binary version: records of one label byte plus 3072 CHW pixel bytes."""
    root = Path(root)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images, labels = [], []
    for name in names:
        raw = np.frombuffer(_read_bytes(root / name), dtype=np.uint8)
        if raw.size % 3073:
            raise ValueError(f"{root / name}: size {raw.size} is not a multiple of the 3073-byte record")
        rec = raw.reshape(-1, 3073)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return np.concatenate(images), np.concatenate(labels)


def load_svhn(root, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """SVHN cropped digits (``{split}_32x32.mat``); label 10 denotes digit 0."""
    from scipy.io import loadmat

    mat = loadmat(os.fspath(Path(root) / f"{split}_32x32.mat"))
    images = np.transpose(mat["X"], (3, 2, 0, 1)).astype(np.float64) / 255.0
    labels = mat["y"].reshape(-1).astype(np.int64) % 10
    return images, labels


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10, "svhn": load_svhn}


def load_dataset(name: str, root, split: str) -> Tuple[np.ndarray, np.ndarray]:
    if name not in LOADERS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}")
    return LOADERS[name](root, split)


# -- subsetting, augmentation, normalization ---------------------------------

def subset_per_class(labels: np.ndarray, per_class: int, seed: int = 0) -> np.ndarray:
    """Indices of the first ``per_class`` examples of each class after a seeded shuffle.

    The returned indices are sorted, so the subset keeps file order.
    """
    order = np.random.default_rng(seed).permutation(len(labels))
    picked = []
    for c in np.unique(labels):
        members = order[labels[order] == c]
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} examples, fewer than {per_class}")
        picked.append(members[:per_class])
    return np.sort(np.concatenate(picked))


def shift_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate a C×H×W image by (dx columns, dy rows), zero-filling vacated pixels."""
    out = np.zeros_like(image)
    h, w = image.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = image[..., src_y, src_x]
    return out


def augment_shift(image: np.ndarray, max_shift: int = 4, rng: Optional[np.random.Generator] = None,
                  shift: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Random integer translation of up to ``max_shift`` pixels per axis."""
    h, w = image.shape[-2:]
    if max_shift >= min(h, w):
        raise ValueError(f"max_shift {max_shift} must be smaller than the image size {h}x{w}")
    if shift is None:
        rng = rng or np.random.default_rng()
        dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
    else:
        dx, dy = shift
    return shift_image(image, int(dx), int(dy))


def augment_batch(images: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    return np.stack([shift_image(img, int(dx), int(dy)) for img, (dx, dy) in zip(images, shifts)])


def normalize(images: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` on ...×C×H×W arrays."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3] != len(spec.mean):
        raise ValueError(f"{spec.name}: expected {len(spec.mean)} channels, got {images.shape[-3]}")
    mean = np.asarray(spec.mean)[:, None, None]
    std = np.asarray(spec.std)[:, None, None]
    return (images - mean) / std


def denormalize(images: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3] != len(spec.mean):
        raise ValueError(f"{spec.name}: expected {len(spec.mean)} channels, got {images.shape[-3]}")
    return images * np.asarray(spec.std)[:, None, None] + np.asarray(spec.mean)[:, None, None]


def iterate_batches(images: np.ndarray, labels: np.ndarray, batch_size: int,
                    rng: Optional[np.random.Generator] = None, shuffle: bool = False,
                    augment: Optional[int] = None,
                    spec: Optional[DatasetSpec] = None) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(normalized images, labels, indices)``.

    ``images`` are raw [0, 1] pixels; shift augmentation (``augment`` = max
    shift) is applied before normalization and only when requested.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(images)) if shuffle else np.arange(len(images))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = images[idx]
        if augment:
            batch = augment_batch(batch, augment, rng)
        if spec is not None:
            batch = normalize(batch, spec)
        yield batch, labels[idx], idx


def class_counts(labels: Sequence[int], num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=num_classes)
