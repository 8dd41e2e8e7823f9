"""IDX ingestion, static binarization, splitting and synthetic corpora."""

from __future__ import annotations

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes) -> np.ndarray:
    """Images become ``(n, rows*cols)`` floats in [0, 1]; labels a uint8 vector."""
    if len(raw) < 4:
        raise IdxFormatError("truncated magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError("truncated image header", len(raw))
        n, rows, cols = struct.unpack(">III", raw[4:16])
        need = 16 + n * rows * cols
        if len(raw) < need:
            raise IdxFormatError(f"truncated pixel data: expected {need} bytes, found {len(raw)}", len(raw))
        pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
        return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    if magic == LABEL_MAGIC:
        if len(raw) < 8:
            raise IdxFormatError("truncated label header", len(raw))
        (n,) = struct.unpack(">I", raw[4:8])
        if len(raw) < 8 + n:
            raise IdxFormatError(f"truncated label data: expected {8 + n} bytes, found {len(raw)}", len(raw))
        return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()
    raise IdxFormatError(f"bad magic number 0x{magic:08x}", 0)


def load_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, images: np.ndarray, rows: int | None = None, cols: int | None = None) -> None:
    """Write ``(n, d)`` values in [0, 1] (or uint8) as an IDX image file."""
    images = np.asarray(images)
    n, d = images.shape
    if rows is None or cols is None:
        side = int(round(d**0.5))
        rows, cols = (side, side) if side * side == d else (1, d)
    if rows * cols != d:
        raise ValueError(f"{rows}x{cols} does not match row width {d}")
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def static_binarize(images: np.ndarray, seed: int) -> np.ndarray:
    """Sample every pixel once from Bernoulli(pixel value)."""
    images = np.asarray(images, dtype=np.float64)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return (rng.random(images.shape) < images).astype(np.float64)


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    binarized: bool = True
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            setattr(self, name, arr)
        widths = {a.shape[1] for a in (self.train, self.val, self.test) if a.ndim == 2 and len(a)}
        if len(widths) > 1:
            raise ValueError(f"splits disagree on dimensionality: {sorted(widths)}")
        if self.binarized:
            for a in (self.train, self.val, self.test):
                if not np.all((a == 0.0) | (a == 1.0)):
                    raise ValueError("binarized dataset contains non-binary values")

    @property
    def d(self) -> int:
        for a in (self.train, self.val, self.test):
            if a.ndim == 2:
                return a.shape[1]
        return 0

    def write_provenance(self, path) -> None:
        Path(path).write_text(json.dumps(self.provenance, indent=2, sort_keys=True))


def split(dataset: Dataset, n_train: int, n_val: int, seed: int) -> Dataset:
    """Seeded permutation of the training pool into train and validation."""
    pool = np.concatenate([dataset.train, dataset.val]) if len(dataset.val) else dataset.train
    if n_train < 0 or n_val < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_val > len(pool):
        raise ValueError(f"requested {n_train}+{n_val} examples but only {len(pool)} available")
    if n_val == 0:
        log.warning("validation split is empty")
    order = np.random.default_rng(seed).permutation(len(pool))
    train_idx = order[:n_train]
    val_idx = order[n_train : n_train + n_val]
    prov = dict(dataset.provenance)
    prov["split"] = {"n_train": n_train, "n_val": n_val, "seed": seed}
    return Dataset(pool[train_idx], pool[val_idx], dataset.test, dataset.binarized, prov)


def split_indices(n: int, n_train: int, n_val: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train : n_train + n_val]


def synthetic_mixture(n: int, d: int, clusters: int, seed: int, flip: float = 0.05):
    """Binary prototypes plus per-pixel flips; returns ``(x, labels, prototypes)``."""
    if n < 1 or d < 1 or clusters < 1:
        raise ValueError("n, d and clusters must be at least 1")
    if not 0.0 <= flip <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    prototypes = (rng.random((clusters, d)) < 0.5).astype(np.float64)
    labels = rng.integers(0, clusters, size=n)
    flips = rng.random((n, d)) < flip
    x = np.abs(prototypes[labels] - flips)
    return x, labels, prototypes


def synthetic_dataset(n: int, d: int, clusters: int, seed: int, flip: float = 0.05) -> Dataset:
    """Bernoulli prototype mixture split 60/20/20."""
    x, _, _ = synthetic_mixture(n, d, clusters, seed, flip)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    prov = {"source": "synthetic", "n": n, "d": d, "clusters": clusters, "flip": flip, "seed": seed}
    return Dataset(x[:n_train], x[n_train : n_train + n_val], x[n_train + n_val :], True, prov)


def load_idx_dataset(
    train_path,
    test_path=None,
    n_train: int | None = None,
    n_val: int = 0,
    split_seed: int = 0,
    binarize_seed: int = 0,
    n_test: int | None = None,
) -> Dataset:
    """Build a Dataset from IDX image files, binarizing non-binary pixels."""
    pool = load_idx(train_path)
    test = load_idx(test_path) if test_path is not None else np.empty((0, pool.shape[1]))
    if n_test is not None:
        test = test[:n_test]
    if pool.ndim != 2:
        raise ValueError(f"{train_path} is not an image file")
    already_binary = bool(np.all((pool == 0) | (pool == 1)) and np.all((test == 0) | (test == 1)))
    if not already_binary:
        pool = static_binarize(pool, binarize_seed)
        test = static_binarize(test, binarize_seed + 1)
    prov = {
        "source": "idx",
        "train_path": str(train_path),
        "test_path": None if test_path is None else str(test_path),
        "binarize_seed": None if already_binary else binarize_seed,
    }
    if n_train is None:
        n_train = len(pool) - n_val
    base = Dataset(pool, np.empty((0, pool.shape[1])), test, True, prov)
    return split(base, n_train, n_val, split_seed)
