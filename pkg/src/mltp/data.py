"""Datasets, file formats, preprocessing, augmentation and task-pair batching."""

from __future__ import annotations

import csv
import logging
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError, InvalidInputError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def stream(seed, name, *extra):
    """Named, independent random stream derived from ``seed``."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray | None = None

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class TaskPair:
    task_i: Batch
    task_j: Batch


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y)
        if len(self.y) == 0:
            raise InvalidInputError("dataset is empty")
        if len(self.x) != len(self.y):
            raise InvalidInputError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.dtype.kind in "iu" and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def batch(self, index):
        index = np.asarray(index)
        return Batch(self.x[index], self.y[index], index)

    def astype(self, dtype):
        return Dataset(self.x.astype(dtype), self.y, self.num_classes, self.split)


# ---------------------------------------------------------------- IDX

def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise IngestionError(f"{path}: truncated file while reading {what} "
                             f"(wanted {n} bytes, got {len(buf)})")
    return buf


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        got = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))[0]
        if got != magic:
            raise IngestionError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path, "dimension sizes"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(_read_exact(fh, count, path, "data"), dtype=np.uint8)
        if fh.read(1):
            raise IngestionError(f"{path}: trailing bytes after data")
    return data.reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    """Load an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"count mismatch: {images.shape[0]} images "
                             f"but {labels.shape[0]} labels")
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.size and labels.max() >= k:
        raise IngestionError(f"{labels_path}: label {int(labels.max())} >= class count {k}")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), k, split)


def write_idx(dataset, images_path, labels_path):
    x = np.asarray(dataset.x)
    if x.ndim != 4 or x.shape[1] != 1:
        raise InvalidInputError("IDX output needs N×1×H×W images")
    pixels = np.clip(np.round(x[:, 0] * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(dataset.y, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------- CSV

def load_csv(path, num_features, num_classes, split="train"):
    """Rows of ``num_features`` reals followed by one integer label."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != num_features + 1:
                raise IngestionError(f"{path}: row {row_no} has {len(row)} cells, "
                                     f"expected {num_features + 1}")
            try:
                feats = [float(c) for c in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_no}: non-numeric cell ({exc})") from None
            if label != int(label) or not 0 <= label < num_classes:
                raise IngestionError(f"{path}: row {row_no}: label {row[-1]} outside [0, {num_classes})")
            xs.append(feats)
            ys.append(int(label))
    if not ys:
        raise IngestionError(f"{path}: no rows")
    return Dataset(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64), num_classes, split)


def write_csv(dataset, path):
    x = np.asarray(dataset.x, dtype=np.float64).reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        for feats, label in zip(x, dataset.y):
            fh.write(",".join(repr(float(v)) for v in feats) + f",{int(label)}\n")


# ---------------------------------------------------------------- synthetic

def blob_centers(classes, dim=2):
    """Class centers with unit distance between neighbours."""
    centers = np.zeros((classes, dim))
    if classes == 2:
        centers[:, 0] = [-0.5, 0.5]
    elif classes > 2:
        radius = 1.0 / (2.0 * math.sin(math.pi / classes))
        angles = 2 * math.pi * np.arange(classes) / classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def make_synth(kind, n_per_class, classes=2, noise=0.1, seed=0, split="train"):
    """Synthetic 2-D classification data.

    ``blobs``: isotropic Gaussians (std ``noise``) around unit-separated
    centers. ``spirals``: interleaved arms spanning 1.5 turns out to radius
    4.5, with Gaussian radial noise of std ``noise``.
    """
    if n_per_class < 1:
        raise InvalidInputError("n_per_class must be at least 1")
    rng = stream(seed, f"synth-{kind}")
    labels = np.repeat(np.arange(classes), n_per_class)
    if kind == "blobs":
        x = blob_centers(classes)[labels] + noise * rng.standard_normal((len(labels), 2))
    elif kind == "spirals":
        t = rng.uniform(0.0, 1.0, size=len(labels))
        theta = 3 * math.pi * t + 2 * math.pi * labels / classes
        r = 4.5 * t + noise * rng.standard_normal(len(labels))
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    else:
        raise InvalidInputError(f"unknown synthetic kind {kind!r}")
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], classes, split)


# ---------------------------------------------------------------- preprocessing

def global_stats(dataset):
    return float(np.mean(dataset.x)), float(np.std(dataset.x))


def standardize(dataset, mode="per-image", stats=None):
    """Zero-mean / unit-std normalization.

    ``per-image`` uses each sample's own statistics (std clamped to 1e-8);
    ``global`` uses ``stats=(mean, std)``, or the dataset's own when omitted.
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    if mode == "per-image":
        flat = x.reshape(len(x), -1)
        mu = flat.mean(axis=1, keepdims=True)
        sd = np.maximum(flat.std(axis=1, keepdims=True), 1e-8)
        out = ((flat - mu) / sd).reshape(x.shape)
    elif mode == "global":
        mu, sd = global_stats(dataset) if stats is None else stats
        out = (x - mu) / max(sd, 1e-8)
    else:
        raise InvalidInputError(f"unknown standardization mode {mode!r}")
    return Dataset(out.astype(dataset.x.dtype), dataset.y, dataset.num_classes, dataset.split)


@dataclass(frozen=True)
class AugmentSpec:
    pad: int = 0
    flip: bool = False
    crop: tuple | None = None

    def __post_init__(self):
        if self.pad < 0:
            raise InvalidInputError("augment pad must be non-negative")


def augment(x, spec, seed, return_offsets=False):
    """Zero-pad, flip each sample with probability 1/2, random-crop back.

    ``x`` is an ``N×C×H×W`` array; output crop size defaults to ``H×W``.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise InvalidInputError("augment needs N×C×H×W images")
    n, c, h, w = x.shape
    ch, cw = (h, w) if spec.crop is None else tuple(spec.crop)
    ph, pw = h + 2 * spec.pad, w + 2 * spec.pad
    if ch > ph or cw > pw:
        raise InvalidInputError(f"crop {ch}×{cw} larger than padded image {ph}×{pw}")
    rng = np.random.default_rng(seed)
    flips = rng.random(n) < 0.5 if spec.flip else np.zeros(n, dtype=bool)
    oy = rng.integers(0, ph - ch + 1, size=n)
    ox = rng.integers(0, pw - cw + 1, size=n)
    padded = np.pad(x, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad)))
    padded[flips] = padded[flips][..., ::-1]
    out = np.empty((n, c, ch, cw), dtype=x.dtype)
    for k in range(n):
        out[k] = padded[k, :, oy[k]:oy[k] + ch, ox[k]:ox[k] + cw]
    if return_offsets:
        return out, (oy, ox, flips)
    return out


# ---------------------------------------------------------------- batching

def epoch_batches(n, batch_size, rng, drop_last=False):
    """Index arrays covering one shuffled pass over ``n`` samples."""
    order = rng.permutation(n)
    batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


def split_task_pair(batch):
    """First half of the (already shuffled) batch is task i, second half task j."""
    n = len(batch)
    if n < 2:
        raise InvalidInputError("a task pair needs a batch of at least 2 samples")
    if n % 2:
        log.info("odd batch of %d samples; dropping the last one", n)
        n -= 1
    half = n // 2
    index = batch.index if batch.index is not None else np.arange(len(batch))
    return TaskPair(Batch(batch.x[:half], batch.y[:half], index[:half]),
                    Batch(batch.x[half:n], batch.y[half:n], index[half:n]))
