"""MNIST / CIFAR-10 readers, a synthetic fixture, cropping and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10_000


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W], float32 in [0, 1]
    labels: np.ndarray  # [N], int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def subset(self, count: int, seed: int = 0) -> "Dataset":
        """First ``count`` samples after a seeded shuffle."""
        if count is None or count >= len(self):
            return self
        idx = np.random.default_rng(seed).permutation(len(self))[:count]
        return Dataset(self.images[idx], self.labels[idx], self.split)


@dataclass
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def decode_idx(raw: bytes, expected_magic: int, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{name}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{name}: truncated header at offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise DataFormatError(f"{name}: truncated data at offset {len(raw)}, expected {header + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    dotted = stem.replace("-idx", ".idx")
    for name in (stem, dotted):
        for suffix in ("", ".gz"):
            p = directory / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    img_stem, lab_stem = _MNIST_FILES[split]
    img_path, lab_path = _find(directory, img_stem), _find(directory, lab_stem)
    images = decode_idx(_read_bytes(img_path), IDX_IMAGES_MAGIC, str(img_path))
    labels = decode_idx(_read_bytes(lab_path), IDX_LABELS_MAGIC, str(lab_path))
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataFormatError(f"{img_path}: expected [N,28,28] images, got {images.shape}")
    return Dataset(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64), split)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def decode_cifar(raw: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{name}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].copy()


def encode_cifar(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1).tobytes()


def load_cifar10(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    images, labels = [], []
    for name in names:
        path = directory / name
        raw = path.read_bytes()
        if len(raw) != CIFAR_PER_FILE * CIFAR_RECORD:
            raise DataFormatError(f"{path}: size {len(raw)}, expected {CIFAR_PER_FILE * CIFAR_RECORD}")
        x, y = decode_cifar(raw, str(path))
        images.append(x)
        labels.append(y)
    x = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(x, np.concatenate(labels).astype(np.int64), split)


# ---------------------------------------------------------------------------
# synthetic fixture

# top-left corners of the 10 class patches on a 4x4 grid of 7x7 cells
_PATCH_CELLS = [(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 2), (3, 1), (3, 3), (0, 3), (3, 0)]


def make_synthetic(n: int, seed: int = 0) -> Dataset:
    """Balanced 10-class 1x28x28 images: one bright 7x7 patch per class plus noise."""
    if n < 10:
        raise ValueError(f"need n >= 10 samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10)
    images = rng.uniform(0.0, 0.15, size=(n, 1, 28, 28)).astype(np.float32)
    for i, c in enumerate(labels):
        r, q = _PATCH_CELLS[c]
        images[i, 0, 7 * r : 7 * r + 7, 7 * q : 7 * q + 7] = rng.uniform(0.8, 1.0)
    return Dataset(images, labels.astype(np.int64), "train")


# ---------------------------------------------------------------------------
# augmentation and batching


def random_crop(images: np.ndarray, pad: int, seed=None, offsets: np.ndarray | None = None) -> np.ndarray:
    """Zero-pad each border by ``pad`` then crop back at a random offset per image.

    ``offsets`` ([N, 2] row/column offsets in ``[0, 2*pad]``) overrides the
    random draw.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return images.copy()
    n, _, h, w = images.shape
    if offsets is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    offsets = np.asarray(offsets)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    rows = offsets[:, 0, None] + np.arange(h)  # [N, H]
    cols = offsets[:, 1, None] + np.arange(w)  # [N, W]
    idx = np.arange(n)[:, None, None, None]
    ch = np.arange(images.shape[1])[None, :, None, None]
    return padded[idx, ch, rows[:, None, :, None], cols[:, None, None, :]]


def batches(ds: Dataset, plan: BatchPlan, epoch: int = 0, crop_pad: int = 4) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; train batches are randomly cropped.

    The permutation and crop offsets depend only on ``(plan.seed, epoch)``.
    """
    if len(ds) == 0:
        raise ValueError("cannot batch an empty dataset")
    if plan.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([plan.seed, epoch])
    order = rng.permutation(len(ds)) if plan.shuffle else np.arange(len(ds))
    augment = ds.split == "train" and crop_pad > 0
    for start in range(0, len(ds), plan.batch_size):
        idx = order[start : start + plan.batch_size]
        if plan.drop_last and len(idx) < plan.batch_size:
            break
        x = ds.images[idx]
        if augment:
            x = random_crop(x, crop_pad, rng)
        yield x, ds.labels[idx]
