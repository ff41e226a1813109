"""Datasets: IDX (MNIST layout) ingestion, synthetic generators, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if len(self.features) != len(self.targets):
            raise ContractError(f"{len(self.features)} features but {len(self.targets)} targets")
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= self.num_classes):
            raise ContractError(f"targets outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.targets[idx], self.num_classes)


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path.name}: corrupt gzip stream: {exc}", 0) from exc
    return raw


def parse_idx(raw: bytes, expect_magic: int, name: str = "idx") -> np.ndarray:
    """Parse a big-endian unsigned-byte IDX blob into an integer array."""
    if len(raw) < 4:
        raise FormatError(f"{name}: header truncated", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{name}: dimension table truncated", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise FormatError(f"{name}: payload truncated, need {count} bytes after header, "
                          f"have {len(raw) - header}", len(raw))
    if len(raw) > header + count:
        raise FormatError(f"{name}: {len(raw) - header - count} trailing bytes", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an image/label IDX pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, Path(images_path).name)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, Path(labels_path).name)
    if images.ndim != 3:
        raise FormatError(f"expected [n, rows, cols] images, got dims {images.shape}", 4)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"label {labels.max()} outside [0, {num_classes})", 8)
    feats = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Serialize a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def rows_as_sequence(images: np.ndarray) -> np.ndarray:
    """View ``[n, (1,) H, W]`` images as ``[n, T=H, W]`` sequences of rows."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ContractError(f"only single-channel images form row sequences, got {images.shape}")
        images = images[:, 0]
    if images.ndim != 3:
        raise ContractError(f"expected [n, H, W] images, got {images.shape}")
    return images


# ---------------------------------------------------------------- synthetic


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    y = np.arange(n) % classes
    rng.shuffle(y)
    return y


def synth(kind: str, n: int, dims, classes: int, seed: int = 0, **kw) -> Dataset:
    """Deterministic synthetic datasets.

    ``gaussian-classes``  class means on a sphere plus isotropic noise.
    ``separable``         linearly separable with a gap of at least ``margin``
                          (default 0.1) between the closest scores of the true and
                          any other class.
    ``token-seq``         ``[n, length]`` token ids from a vocabulary of
                          ``dims[-1]`` (default 1000); each class draws half of its
                          tokens from its own slice of the vocabulary.
    """
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    if n < classes or classes < 2:
        raise ContractError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    if not dims or any(int(d) < 1 for d in dims):
        raise ContractError(f"invalid dims {dims}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian-classes":
        d = int(np.prod(dims))
        means = rng.normal(size=(classes, d))
        means *= kw.get("separation", 3.0) / np.linalg.norm(means, axis=1, keepdims=True)
        y = _balanced_labels(n, classes, rng)
        x = means[y] + rng.normal(scale=kw.get("noise", 1.0), size=(n, d))
        return Dataset(x.reshape(n, *dims), y, classes)
    if kind == "separable":
        d = int(np.prod(dims))
        margin = kw.get("margin", 0.1)
        w = rng.normal(size=(classes, d)) / np.sqrt(d)
        quota = np.bincount(_balanced_labels(n, classes, rng), minlength=classes)
        xs, ys = [], []
        have = np.zeros(classes, dtype=int)
        while have.sum() < n:
            cand = rng.normal(size=(4 * n, d))
            scores = cand @ w.T
            top2 = np.sort(scores, axis=1)[:, -2:]
            ok = top2[:, 1] - top2[:, 0] >= margin
            for xi, yi in zip(cand[ok], scores[ok].argmax(axis=1)):
                if have[yi] < quota[yi]:
                    xs.append(xi)
                    ys.append(yi)
                    have[yi] += 1
        order = rng.permutation(n)
        x = np.array(xs)[order]
        y = np.array(ys)[order]
        return Dataset(x.reshape(n, *dims), y, classes)
    if kind == "token-seq":
        length = int(dims[0])
        vocab = int(kw.get("vocab", dims[1] if len(dims) > 1 else 1000))
        y = _balanced_labels(n, classes, rng)
        tokens = rng.integers(0, vocab, size=(n, length))
        slice_w = vocab // classes
        signal = rng.random((n, length)) < 0.5
        own = y[:, None] * slice_w + rng.integers(0, slice_w, size=(n, length))
        tokens = np.where(signal, own, tokens)
        return Dataset(tokens.astype(np.int64), y, classes)
    raise ContractError(f"unknown synthetic kind {kind!r}")


# ---------------------------------------------------------------- batching


def batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            drop_last: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffle (when ``rng`` is given) and partition into non-overlapping chunks."""
    if batch_size < 1:
        raise ContractError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.targets[idx]
