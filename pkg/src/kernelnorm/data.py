"""Datasets, preprocessing, augmentation and client partitioning."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (count, 3, H, W)
    labels: np.ndarray  # uint16 (count,)
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError("images must be (count, 3, H, W) with one label per image")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise DataError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.class_count,
                       name or self.name)


def data_dir() -> str:
    return os.environ.get("KN_DATA_DIR", os.path.expanduser("~/.cache/kernelnorm"))


# ---------------------------------------------------------------- CIFAR binary

def load_cifar_binary(path, which="cifar10") -> Dataset:
    """Parse one CIFAR binary file.

    CIFAR-10 records are 1 label byte + 3072 pixel bytes; CIFAR-100 records
    carry a coarse and a fine label byte, and the fine label is kept.
    """
    if which not in ("cifar10", "cifar100"):
        raise DataError(f"unknown CIFAR variant {which!r}")
    label_bytes = 1 if which == "cifar10" else 2
    record = label_bytes + _PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise DataError(f"{path}: bad record count (empty file)")
    if raw.size % record:
        raise DataError(f"{path}: truncated record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.uint16)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    classes = 10 if which == "cifar10" else 100
    return Dataset(images.copy(), labels, classes, which)


def _concat(parts, name):
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), parts[0].class_count, name)


def load_cifar(which="cifar10", split="train", root=None) -> Dataset:
    """Load a CIFAR split from the standard binary distribution under ``root``.

    ``root`` defaults to ``$KN_DATA_DIR``; both the extracted directory
    (``cifar-10-batches-bin`` / ``cifar-100-binary``) and ``root`` itself are searched.
    """
    root = root or data_dir()
    if which == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        sub = "cifar-10-batches-bin"
    else:
        names = ["train.bin" if split == "train" else "test.bin"]
        sub = "cifar-100-binary"
    for base in (os.path.join(root, sub), root):
        paths = [os.path.join(base, n) for n in names]
        if all(os.path.exists(p) for p in paths):
            return _concat([load_cifar_binary(p, which) for p in paths], f"{which}-{split}")
    raise FileNotFoundError(f"{which} {split} files not found under {root} (set KN_DATA_DIR)")


# ---------------------------------------------------------------- synthetic

def synth_dataset(classes=10, per_class=100, geometry=(32, 32), seed=0, noise=0.15,
                  name="synth") -> Dataset:
    """Class-separable images: each class is a fixed mixture of coloured Gaussian blobs.

    Samples are the class prototype, randomly shifted by up to two pixels, plus
    pixel noise.  Deterministic in ``seed``.
    """
    h, w = geometry
    gen = Rng(seed).stream(0x5E7)
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((classes, 3, h, w))
    for k in range(classes):
        for _ in range(3):
            cy, cx = gen.uniform(0.2, 0.8) * h, gen.uniform(0.2, 0.8) * w
            sigma = gen.uniform(0.08, 0.2) * min(h, w)
            colour = gen.uniform(-1.0, 1.0, size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            protos[k] += colour[:, None, None] * blob
    protos = 0.5 + 0.35 * protos / np.abs(protos).max(axis=(1, 2, 3), keepdims=True)
    count = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    images = np.empty((count, 3, h, w))
    for i, k in enumerate(labels):
        dy, dx = gen.integers(-2, 3, size=2)
        images[i] = np.roll(protos[k], (dy, dx), axis=(1, 2))
    images += noise * gen.standard_normal(images.shape)
    order = gen.permutation(count)
    images = np.clip(np.round(images[order] * 255), 0, 255).astype(np.uint8)
    return Dataset(images, labels[order], classes, name)


def stratified_subset(ds: Dataset, count: int, seed=0) -> np.ndarray:
    """Indices of a class-balanced subset of ``count`` samples (sorted)."""
    gen = Rng(seed).stream(0x57A7)
    labels = ds.labels.astype(np.int64)
    classes = np.unique(labels)
    quota = np.full(len(classes), count // len(classes))
    quota[: count - quota.sum()] += 1
    picked = []
    for k, q in zip(classes, quota):
        idx = np.flatnonzero(labels == k)
        if q > len(idx):
            raise DataError(f"class {k} has only {len(idx)} samples, {q} requested")
        picked.append(gen.choice(idx, size=q, replace=False))
    return np.sort(np.concatenate(picked))


def train_holdout_split(ds: Dataset, holdout: float = 0.2, seed=0):
    """Stratified split into (train, held-out) index arrays."""
    gen = Rng(seed).stream(0x401D)
    labels = ds.labels.astype(np.int64)
    train, held = [], []
    for k in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == k))
        cut = int(round(len(idx) * holdout))
        held.append(idx[:cut])
        train.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


# ---------------------------------------------------------------- preprocessing

@dataclass
class PreprocessSpec:
    mode: str = "div255"  # or "meanstd"
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD
    pad_crop: tuple[int, int] | None = None  # (pad, size)
    hflip: float = 0.0
    augment: bool = field(default=False)

    def __post_init__(self):
        if self.mode not in ("div255", "meanstd"):
            raise DataError(f"unknown preprocessing mode {self.mode!r}")
        if np.any(np.asarray(self.std) <= 0):
            raise DataError("std must be positive")

    @classmethod
    def cifar(cls, kernel_model: bool, augment=True, which="cifar10"):
        mean, std = (CIFAR10_MEAN, CIFAR10_STD) if which == "cifar10" else (CIFAR100_MEAN, CIFAR100_STD)
        return cls("div255" if kernel_model else "meanstd", mean, std,
                   (4, 32) if augment else None, 0.5 if augment else 0.0, augment)


def preprocess(images: np.ndarray, spec: PreprocessSpec, dtype=np.float32) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    if spec.mode == "meanstd":
        mean = np.asarray(spec.mean)[None, :, None, None]
        std = np.asarray(spec.std)[None, :, None, None]
        x = (x - mean) / std
    return x.astype(dtype)


def unpreprocess(x: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    """Inverse of :func:`preprocess`, back to the [0, 255] float scale."""
    x = np.asarray(x, dtype=np.float64)
    if spec.mode == "meanstd":
        x = x * np.asarray(spec.std)[None, :, None, None] + np.asarray(spec.mean)[None, :, None, None]
    return x * 255.0


def augment_batch(batch: np.ndarray, spec: PreprocessSpec, rng: Rng, keys=(), sample_ids=None):
    """Random horizontal flip and pad-then-crop, drawn independently per sample.

    Sample ``r`` uses the stream ``(*keys, sample_ids[r])``.  Returns a new array;
    labels and order are untouched by construction.
    """
    if not spec.augment or (spec.pad_crop is None and spec.hflip == 0.0):
        return batch
    n = len(batch)
    sample_ids = range(n) if sample_ids is None else sample_ids
    out = np.empty_like(batch) if spec.pad_crop is None else None
    if spec.pad_crop is not None:
        pad, size = spec.pad_crop
        padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty(batch.shape[:2] + (size, size), dtype=batch.dtype)
    for r, sid in enumerate(sample_ids):
        gen = rng.stream(*keys, sid)
        flip = gen.random() < spec.hflip
        if spec.pad_crop is not None:
            top, left = gen.integers(0, padded.shape[2] - size + 1, size=2)
            img = padded[r, :, top:top + size, left:left + size]
        else:
            img = batch[r]
        out[r] = img[:, :, ::-1] if flip else img
    return out


def crop_offsets(rng: Rng, pad: int, size: int, full: int, keys=(), sample_ids=()):
    """Offsets :func:`augment_batch` would draw (for inspection)."""
    out = []
    for sid in sample_ids:
        gen = rng.stream(*keys, sid)
        gen.random()
        out.append(tuple(int(v) for v in gen.integers(0, full + 2 * pad - size + 1, size=2)))
    return out


# ---------------------------------------------------------------- partitioning

def noniid_partition(labels, clients: int, labels_per_client: int, rng: Rng) -> list[np.ndarray]:
    """Split sample indices so each client holds exactly ``labels_per_client`` labels.

    Label slots (``clients * labels_per_client`` in total) are spread over the
    classes as evenly as possible; every class gets at least one slot, and a
    class's samples are divided evenly between the clients holding it.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    k = len(classes)
    slots = clients * labels_per_client
    if clients < 1 or labels_per_client < 1 or labels_per_client > k or slots < k:
        raise DataError(
            f"infeasible label assignment: {clients} clients x {labels_per_client} labels "
            f"for {k} classes")
    gen = rng.stream(0xFED)
    order = classes[gen.permutation(k)]
    per_class = np.full(k, slots // k)
    per_class[: slots - per_class.sum()] += 1
    if per_class.max() > clients:
        raise DataError("infeasible label assignment: a class would repeat on one client")
    # label-major slot list dealt round-robin: runs of <= clients land on distinct clients
    slot_labels = np.repeat(order, per_class)
    holders: dict[int, list[int]] = {int(c): [] for c in classes}
    for pos, lab in enumerate(slot_labels):
        holders[int(lab)].append(pos % clients)
    shards = [[] for _ in range(clients)]
    for lab, owners in holders.items():
        idx = gen.permutation(np.flatnonzero(labels == lab))
        for owner, part in zip(owners, np.array_split(idx, len(owners))):
            shards[owner].append(part)
    return [np.sort(np.concatenate(s)) if s else np.empty(0, dtype=np.int64) for s in shards]
