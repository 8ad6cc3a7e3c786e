"""Dataset ingestion and synthesis.

IDX files (big-endian, magics 0x00000803 / 0x00000801, optionally gzipped)
are parsed into float64 pixels scaled to [0, 1] by /255 — attack radii are
stated in raw pixel units, so no mean/std normalization is applied.

Two synthetic tasks cover desk-scale work without external downloads:
2-D Gaussian blobs, and rendered stroke digits (seven-segment glyphs with
random affine jitter, blur-ish edges and pixel noise) that stand in for
MNIST-style images when no IDX corpus is on disk.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .models import Batch
from .seeding import derive_rng
from .tensor import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_VAL_SEED = 13  # fixed 90/10 split seed


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or count mismatch."""


@dataclass
class Dataset:
    """Inputs in [0, 1], one-hot labels, immutable after construction."""

    inputs: Tensor
    labels: Tensor
    class_names: list[str]
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not isinstance(self.inputs, Tensor):
            self.inputs = Tensor(self.inputs)
        if not isinstance(self.labels, Tensor):
            self.labels = Tensor(self.labels)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        lo, hi = self.value_range
        if self.inputs.size and (self.inputs.data.min() < lo or self.inputs.data.max() > hi):
            raise ValueError(f"input values leave the declared range [{lo}, {hi}]")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            Tensor(self.inputs.data[idx]),
            Tensor(self.labels.data[idx]),
            self.class_names,
            self.value_range,
        )

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels, self.value_range)


# ---------------------------------------------------------------------------
# IDX files


def _read_all(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, count, rows, cols = struct.unpack(">iiii", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def _parse_idx_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) != 8 + count:
        raise IdxFormatError(f"{path}: expected {8 + count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair into a 10-class dataset, pixels /255."""
    images = _parse_idx_images(_read_all(images_path), images_path)
    labels = _parse_idx_labels(_read_all(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, h, w = images.shape
    inputs = images.astype(np.float64).reshape(n, 1, h, w) / 255.0
    one_hot = np.zeros((n, 10))
    one_hot[np.arange(n), labels] = 1.0
    return Dataset(Tensor(inputs), Tensor(one_hot), [str(d) for d in range(10)])


def write_idx(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path,
              compress: bool = False) -> None:
    """Write (n, h, w) uint8 images and (n,) uint8 labels as an IDX pair."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels_u8 = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    if images_u8.ndim != 3 or labels_u8.ndim != 1 or images_u8.shape[0] != labels_u8.shape[0]:
        raise ValueError("expected (n, h, w) images and (n,) labels")
    n, h, w = images_u8.shape
    img_blob = struct.pack(">iiii", IMAGE_MAGIC, n, h, w) + images_u8.tobytes()
    lbl_blob = struct.pack(">ii", LABEL_MAGIC, n) + labels_u8.tobytes()
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as f:
        f.write(img_blob)
    with opener(labels_path, "wb") as f:
        f.write(lbl_blob)


# ---------------------------------------------------------------------------
# Subsetting / splitting / batching


def subset_binary(ds: Dataset, class_a: int, class_b: int, cap_per_class: int,
                  seed: int = 0) -> Dataset:
    """Balanced two-class subset relabeled to {0, 1}, then seed-shuffled."""
    owners = ds.labels.data.argmax(axis=1)
    idx_a = np.flatnonzero(owners == class_a)
    idx_b = np.flatnonzero(owners == class_b)
    if idx_a.size == 0 or idx_b.size == 0:
        raise ValueError(f"classes {class_a}/{class_b} not both present")
    per = min(int(cap_per_class), idx_a.size, idx_b.size)
    keep = np.concatenate([idx_a[:per], idx_b[:per]])
    new_labels = np.zeros((keep.size, 2))
    new_labels[:per, 0] = 1.0
    new_labels[per:, 1] = 1.0
    order = derive_rng(seed, "subset-shuffle").permutation(keep.size)
    return Dataset(
        Tensor(ds.inputs.data[keep][order]),
        Tensor(new_labels[order]),
        [ds.class_names[class_a], ds.class_names[class_b]],
        ds.value_range,
    )


def synth_two_gaussians(n: int, separation: float, seed: int) -> Dataset:
    """Two 2-D unit-variance blobs offset by +/- separation/2 along axis 1,
    min-max scaled into [0, 1]^2."""
    if n % 2 != 0:
        raise ValueError("n must be even")
    rng = derive_rng(seed, "two-gaussians")
    half = n // 2
    pts = rng.standard_normal((n, 2))
    pts[:half, 1] -= separation / 2.0
    pts[half:, 1] += separation / 2.0
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = (pts - lo) / span
    labels = np.zeros((n, 2))
    labels[:half, 0] = 1.0
    labels[half:, 1] = 1.0
    order = rng.permutation(n)
    return Dataset(Tensor(pts[order]), Tensor(labels[order]), ["neg", "pos"])


def split_train_val(ds: Dataset, val_fraction: float = 0.1,
                    seed: int = TRAIN_VAL_SEED) -> tuple[Dataset, Dataset]:
    order = derive_rng(seed, "train-val-split").permutation(ds.n)
    n_val = int(round(val_fraction * ds.n))
    return ds.take(order[n_val:]), ds.take(order[:n_val])


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch shuffle; the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = derive_rng(seed, "shuffle", epoch).permutation(ds.n)
    for start in range(0, ds.n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(
            Tensor(ds.inputs.data[idx]),
            Tensor(ds.labels.data[idx]),
            ds.value_range,
        )


# ---------------------------------------------------------------------------
# Rendered stroke digits

# seven-segment endpoints in a unit box, y growing downward
_SEGMENTS = {
    "A": ((0.0, 0.0), (1.0, 0.0)),
    "B": ((1.0, 0.0), (1.0, 0.5)),
    "C": ((1.0, 0.5), (1.0, 1.0)),
    "D": ((0.0, 1.0), (1.0, 1.0)),
    "E": ((0.0, 0.5), (0.0, 1.0)),
    "F": ((0.0, 0.0), (0.0, 0.5)),
    "G": ((0.0, 0.5), (1.0, 0.5)),
}

_DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGECD",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}

_GRID_Y, _GRID_X = np.mgrid[0:28, 0:28].astype(np.float64)


def _render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    # centered and size-normalized like scanned-digit corpora; robustness
    # hinges on pixel-aligned stroke cores existing across instances
    cx = 13.5 + rng.uniform(-0.8, 0.8)
    cy = 13.5 + rng.uniform(-0.8, 0.8)
    sx = rng.uniform(11.5, 13.5)
    sy = rng.uniform(14.5, 16.5)
    shear = rng.uniform(-0.12, 0.12)
    thickness = rng.uniform(1.2, 1.8)
    img = np.zeros((28, 28))
    for name in _DIGIT_SEGMENTS[digit]:
        (u0, v0), (u1, v1) = _SEGMENTS[name]
        jit = rng.uniform(-0.3, 0.3, size=4)
        x0 = cx + sx * (u0 - 0.5) + shear * sy * (v0 - 0.5) + jit[0]
        y0 = cy + sy * (v0 - 0.5) + jit[1]
        x1 = cx + sx * (u1 - 0.5) + shear * sy * (v1 - 0.5) + jit[2]
        y1 = cy + sy * (v1 - 0.5) + jit[3]
        dx, dy = x1 - x0, y1 - y0
        norm_sq = dx * dx + dy * dy
        if norm_sq < 1e-12:
            continue
        t = ((_GRID_X - x0) * dx + (_GRID_Y - y0) * dy) / norm_sq
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(_GRID_X - (x0 + t * dx), _GRID_Y - (y0 + t * dy))
        # near-binary strokes like scanned digits: saturated core, crisp edge
        img = np.maximum(img, np.clip(1.6 * np.exp(-0.5 * (dist / thickness) ** 2), 0, 1))
    img *= rng.uniform(0.9, 1.0)
    img += 0.05 * rng.standard_normal((28, 28))
    return np.clip(img, 0.0, 1.0)


def synth_digits(n_per_class: int, classes=(5, 8), seed: int = 0) -> Dataset:
    """Deterministic 28x28 stroke-digit corpus, one-hot over ``classes``."""
    classes = list(classes)
    rng = derive_rng(seed, "synth-digits")
    n = n_per_class * len(classes)
    inputs = np.empty((n, 1, 28, 28))
    labels = np.zeros((n, len(classes)))
    i = 0
    for ci, digit in enumerate(classes):
        for _ in range(n_per_class):
            inputs[i, 0] = _render_digit(digit, rng)
            labels[i, ci] = 1.0
            i += 1
    order = rng.permutation(n)
    return Dataset(Tensor(inputs[order]), Tensor(labels[order]),
                   [str(c) for c in classes])
