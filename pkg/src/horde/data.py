"""Datasets: MNIST IDX files, synthetic Gaussian-mixture features, P x Q batches."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


@dataclass
class Dataset:
    """Images (N, H, W, 1) in [0, 1], or raw features (N, c) in synthetic mode."""

    labels: np.ndarray
    images: np.ndarray | None = None
    features: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if (self.images is None) == (self.features is None):
            raise ValueError("exactly one of images / features must be given")
        n = len(self.data)
        if n != len(self.labels):
            raise ValueError(f"{n} samples but {len(self.labels)} labels")
        if n and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    @property
    def data(self) -> np.ndarray:
        return self.images if self.images is not None else self.features

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if self.images is not None:
            return Dataset(self.labels[idx], images=self.images[idx], split=self.split)
        return Dataset(self.labels[idx], features=self.features[idx], split=self.split)

    def class_samples(self, label: int) -> np.ndarray:
        return self.data[self.labels == label]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise TruncatedError(f"{what}: file shorter than the 4-byte magic number")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedError(f"{what}: file shorter than its {header}-byte header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedError(f"{what}: expected {size} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(labels.astype(np.int64), images=(images[..., None] / 255.0), split=split)


def idx_header(magic: int, dims) -> bytes:
    return struct.pack(f">I{len(dims)}I", magic, *dims)


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool | None = None) -> None:
    """Write images (quantized to bytes) and labels as IDX; gzip when the path ends in .gz."""
    imgs = np.rint(np.asarray(dataset.images)[..., 0] * 255.0)
    if imgs.min() < 0 or imgs.max() > 255:
        raise ValueError("pixel values outside [0, 1]")
    labels = np.asarray(dataset.labels)
    if labels.max(initial=0) > 255:
        raise ValueError("IDX labels are single bytes")
    payloads = [
        (images_path, idx_header(IMAGES_MAGIC, imgs.shape) + imgs.astype(np.uint8).tobytes()),
        (labels_path, idx_header(LABELS_MAGIC, labels.shape) + labels.astype(np.uint8).tobytes()),
    ]
    for path, blob in payloads:
        path = Path(path)
        gz = path.suffix == ".gz" if compress is None else compress
        path.write_bytes(gzip.compress(blob, mtime=0) if gz else blob)


def mnist_subset(split: str = "train") -> Dataset:
    """Bundled class-balanced MNIST subset: 6000 train / 1000 test digits."""
    prefix = {"train": "train", "test": "t10k"}[split]
    base = resources.files("horde") / "resources" / "mnist"
    with resources.as_file(base / f"{prefix}-images-idx3-ubyte.gz") as ip, \
            resources.as_file(base / f"{prefix}-labels-idx1-ubyte.gz") as lp:
        return load_idx(ip, lp, split=split)


def synth_mixture(num_classes: int, per_class: int, c: int, spread: float, seed: int) -> Dataset:
    """Features around random unit-norm class centers, rescaled into the unit ball."""
    if spread <= 0:
        raise ValueError("spread must be > 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, c))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    feats = centers[labels] + spread * rng.normal(size=(len(labels), c))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1.0)
    return Dataset(labels, features=feats, split="synthetic")


def save_features_csv(dataset: Dataset, path) -> None:
    """One row per sample: label, x_1, ..., x_c."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for lab, row in zip(dataset.labels, dataset.features):
            w.writerow([int(lab), *(repr(float(v)) for v in row)])


def load_features_csv(path) -> Dataset:
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    return Dataset(rows[:, 0].astype(np.int64), features=rows[:, 1:], split="synthetic")


def read_samples_csv(path) -> np.ndarray:
    """Sample matrix from a CSV with one sample per row (no label column)."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise ValueError(f"{path}: no samples")
    return rows


def write_samples_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in np.atleast_2d(samples)])


@dataclass(frozen=True)
class BatchSpec:
    P: int = 5
    Q: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.Q < 2:
            raise ValueError("P and Q must both be >= 2")

    @property
    def batch_size(self) -> int:
        return self.P * self.Q


def batch_indices(labels, spec: BatchSpec):
    """Endless stream of index arrays, each holding P distinct classes x Q samples.

    Within an epoch samples are drawn without replacement; the epoch ends when
    fewer than P classes still have Q unused samples.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < spec.P:
        raise ValueError(f"dataset has {len(classes)} classes, batches need P={spec.P}")
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    for c, idx in by_class.items():
        if len(idx) < spec.Q:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than Q={spec.Q}")
    rng = np.random.default_rng(spec.seed)
    while True:
        pools = {c: list(rng.permutation(idx)) for c, idx in by_class.items()}
        while True:
            eligible = [c for c, pool in pools.items() if len(pool) >= spec.Q]
            if len(eligible) < spec.P:
                break
            chosen = rng.choice(eligible, size=spec.P, replace=False)
            batch = []
            for c in chosen:
                batch.extend(pools[int(c)][: spec.Q])
                del pools[int(c)][: spec.Q]
            yield np.asarray(batch, dtype=np.int64)


def sample_batches(dataset: Dataset, spec: BatchSpec):
    """Stream of (data, labels) batches following :func:`batch_indices`."""
    for idx in batch_indices(dataset.labels, spec):
        yield dataset.data[idx], dataset.labels[idx]
