"""Datasets: CIFAR-10 binary records, per-channel standardization and synthetic sets."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from sortnet.autodiff import DTYPE
from sortnet.errors import LabelOutOfRange, TruncatedFile, ZeroVariance

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR10_CLASSES = 10
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]
DATA_DIR_ENV = "SORTNET_DATA_DIR"


@dataclass
class DatasetHandle:
    """Images plus integer labels; ``images`` is ``[N, 3, 32, 32]`` or ``[N, D]``."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelOutOfRange(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, idx) -> "DatasetHandle":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx], meta=dict(self.meta))

    def subset(self, n: int, seed: int = 0) -> "DatasetHandle":
        """``n`` samples drawn without replacement; stable for a given seed."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        out = self.take(idx)
        out.meta["subset"] = {"n": n, "seed": seed}
        return out


# -- CIFAR-10 binary format --------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Split raw records into ``uint8`` images ``[N,3,32,32]`` and labels ``[N]``."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise TruncatedFile(f"{source}: {len(raw)} bytes is not a positive multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise LabelOutOfRange(f"{source}: record {bad} has label {labels[bad]}")
    return rec[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def load_cifar10_binary(paths: str | os.PathLike | Sequence[str | os.PathLike], expected: int | None = None) -> DatasetHandle:
    """Read one or more CIFAR-10 ``.bin`` files; pixels are scaled to ``[0, 1]``."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        img, lab = parse_cifar10_bytes(Path(p).read_bytes(), str(p))
        images.append(img)
        labels.append(lab)
    raw = np.concatenate(images)
    ds = DatasetHandle(raw.astype(DTYPE) / 255.0, np.concatenate(labels), CIFAR10_CLASSES, {"source": [str(p) for p in paths]})
    if expected is not None and len(ds) != expected:
        raise TruncatedFile(f"expected {expected} records, found {len(ds)}")
    return ds


def to_cifar10_bytes(ds: DatasetHandle) -> bytes:
    """Inverse of :func:`parse_cifar10_bytes` for images in ``[0, 1]``."""
    if ds.sample_shape != IMAGE_SHAPE:
        raise ValueError(f"CIFAR records need images of shape {IMAGE_SHAPE}, got {ds.sample_shape}")
    pix = np.rint(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(ds), -1)
    rec = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1:] = pix
    return rec.tobytes()


def write_cifar10_binary(path, ds: DatasetHandle) -> Path:
    path = Path(path)
    path.write_bytes(to_cifar10_bytes(ds))
    return path


def data_root(root=None) -> Path | None:
    root = root or os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else None


def cifar10_dir(root=None) -> Path | None:
    """Directory holding the ``.bin`` batches, or None when not available."""
    base = data_root(root)
    if base is None:
        return None
    for cand in (base / "cifar-10-batches-bin", base):
        if all((cand / f).is_file() for f in TRAIN_FILES + TEST_FILES):
            return cand
    return None


def load_cifar10(root=None) -> tuple[DatasetHandle, DatasetHandle]:
    d = cifar10_dir(root)
    if d is None:
        raise FileNotFoundError(f"CIFAR-10 binaries not found; set {DATA_DIR_ENV} to the directory containing cifar-10-batches-bin")
    train = load_cifar10_binary([d / f for f in TRAIN_FILES], expected=50_000)
    test = load_cifar10_binary([d / f for f in TEST_FILES], expected=10_000)
    return train, test


# -- preprocessing -----------------------------------------------------------------


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(ds: DatasetHandle) -> ChannelStats:
    x = ds.images
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mean, std = x.mean(axis=axes), x.std(axis=axes)
    if np.any(std < 1e-8):
        raise ZeroVariance(f"channel(s) {np.flatnonzero(std < 1e-8).tolist()} have zero variance")
    return ChannelStats(mean, std)


def standardize(ds: DatasetHandle, stats: ChannelStats | None = None) -> DatasetHandle:
    """``(x - mean_c) / std_c``; pass the training split's stats when transforming test data."""
    stats = stats or channel_stats(ds)
    if np.any(stats.std < 1e-8):
        raise ZeroVariance("standardization stats contain a zero-variance channel")
    shape = (1, -1) if ds.images.ndim == 2 else (1, -1, 1, 1)
    x = (ds.images - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    meta = dict(ds.meta, standardized={"mean": stats.mean.tolist(), "std": stats.std.tolist()})
    return replace(ds, images=x, meta=meta)


def standardize_pair(train: DatasetHandle, test: DatasetHandle) -> tuple[DatasetHandle, DatasetHandle]:
    stats = channel_stats(train)
    return standardize(train, stats), standardize(test, stats)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size and flip half the batch."""
    n, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    return out


# -- synthetic data ----------------------------------------------------------------


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def make_synthetic(kind: Literal["blobs", "xor"], n: int, seed: int = 0, sigma: float = 0.5) -> DatasetHandle:
    """Two-class 2-D data.

    ``blobs`` places two isotropic Gaussians of std ``sigma`` with centres
    ``6 * sigma`` apart. ``xor`` draws points uniformly from ``[-1, 1]^2``
    and labels them by the sign of ``x * y``, kept a small margin away from
    the axes.
    """
    if n < 2:
        raise ValueError("synthetic datasets need n >= 2")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, 2, rng)
    if kind == "blobs":
        centres = np.array([[-3.0 * sigma, 0.0], [3.0 * sigma, 0.0]])
        x = centres[y] + sigma * rng.standard_normal((n, 2))
    elif kind == "xor":
        mag = rng.uniform(0.1, 1.0, (n, 2))
        sx = rng.choice([-1.0, 1.0], n)
        # class 1 lives in quadrants where the coordinates share a sign
        sy = np.where(y == 1, sx, -sx)
        x = mag * np.column_stack([sx, sy])
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected 'blobs' or 'xor'")
    return DatasetHandle(x.astype(DTYPE), y, 2, {"synthetic": kind, "n": n, "seed": seed})


def split(ds: DatasetHandle, n_test: int, seed: int = 0) -> tuple[DatasetHandle, DatasetHandle]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.take(np.sort(perm[n_test:])), ds.take(np.sort(perm[:n_test]))


def write_csv(path, ds: DatasetHandle) -> Path:
    """Flattened samples as ``label,f0,f1,...``."""
    path = Path(path)
    flat = ds.images.reshape(len(ds), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(flat.shape[1])])
        for lab, row in zip(ds.labels, flat):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
    return path


def read_csv(path, class_count: int | None = None) -> DatasetHandle:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = arr[:, 0].astype(np.int64)
    k = class_count or int(labels.max()) + 1
    return DatasetHandle(arr[:, 1:], labels, k, {"source": str(path)})


def load_dataset(name: str, subset: int | None = None, test_subset: int | None = None, seed: int = 0, root=None) -> tuple[DatasetHandle, DatasetHandle]:
    """Resolve a dataset selector (``cifar10``, ``blobs`` or ``xor``) to standardized train/test splits."""
    if name == "cifar10":
        train, test = load_cifar10(root)
        if subset:
            train = train.subset(subset, seed)
        if test_subset:
            test = test.subset(test_subset, seed)
        return standardize_pair(train, test)
    if name in ("blobs", "xor"):
        n = subset or 400
        n_test = test_subset or max(n // 4, 2)
        full = make_synthetic(name, n + n_test, seed)
        return split(full, n_test, seed)
    raise ValueError(f"unknown dataset {name!r}")


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i : i + batch_size]
