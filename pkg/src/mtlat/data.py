"""Dataset ingestion (IDX, CIFAR binary, synthetic shapes) and seeded batching.

Images are float64 NHWC arrays with pixels in [0, 1]; labels are integer class ids.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Split":
        return Split(self.images[idx], self.labels[idx])


@dataclass
class Dataset:
    name: str
    n_classes: int
    train: Split
    test: Split

    @property
    def input_shape(self):
        return tuple(self.train.images.shape[1:])


def one_hot(labels, n_classes):
    return np.eye(n_classes, dtype=np.float64)[np.asarray(labels, dtype=np.int64)]


# --------------------------------------------------------------------------
# IDX

def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, channels=1) -> Split:
    """Read an IDX image/label file pair; grayscale is replicated when ``channels=3``."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[..., None] / 255.0
    if channels == 3:
        x = np.repeat(x, 3, axis=-1)
    elif channels != 1:
        raise ValueError("channels must be 1 or 3")
    return Split(x, labels.astype(np.int64))


# --------------------------------------------------------------------------
# CIFAR binary

def load_cifar_binary(*paths) -> Split:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixel bytes)."""
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DataError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
    if not images:
        raise DataError("no CIFAR files given")
    return Split(np.concatenate(images), np.concatenate(labels))


# --------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("square", "circle", "triangle", "cross", "ring", "diamond")
COLORS = np.array([
    [0.85, 0.20, 0.20],  # red
    [0.20, 0.75, 0.25],  # green
    [0.20, 0.30, 0.85],  # blue
    [0.85, 0.80, 0.20],  # yellow
    [0.80, 0.25, 0.80],  # magenta
    [0.20, 0.80, 0.80],  # cyan
])
MAX_SYNTH_CLASSES = len(SHAPES) * len(COLORS)


def class_combo(k):
    """(shape index, color index) of class k; consecutive classes differ in both."""
    s = k % len(SHAPES)
    c = (k + k // len(SHAPES)) % len(COLORS)
    return s, c


def _shape_mask(kind, dx, dy, r):
    # soft edge of about one pixel via a clipped signed distance
    if kind == "square":
        d = np.maximum(np.abs(dx), np.abs(dy)) - r
    elif kind == "circle":
        d = np.hypot(dx, dy) - r
    elif kind == "triangle":
        # apex up; base at dy = +r
        d = np.maximum(dy - r, (2 * np.abs(dx) - (dy + r)) / np.sqrt(5.0))
    elif kind == "cross":
        t = r / 3
        arm_h = np.maximum(np.abs(dx) - r, np.abs(dy) - t)
        arm_v = np.maximum(np.abs(dy) - r, np.abs(dx) - t)
        d = np.minimum(arm_h, arm_v)
    elif kind == "ring":
        d = np.abs(np.hypot(dx, dy) - 0.7 * r) - 0.3 * r
    elif kind == "diamond":
        d = (np.abs(dx) + np.abs(dy)) / np.sqrt(2.0) - r / np.sqrt(2.0) * 1.2
    else:
        raise ValueError(kind)
    return np.clip(0.5 - d, 0.0, 1.0)


def _render(rng, cls, size, difficulty):
    s_idx, c_idx = class_combo(cls)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.25, 0.55)
    gx, gy = rng.normal(0.0, 0.1 + 0.2 * difficulty, size=2) / size
    bg = base + gx * (xx - size / 2) + gy * (yy - size / 2)
    img = np.repeat(bg[..., None], 3, axis=-1)
    img += rng.normal(0.0, 0.05, size=3)  # background tint
    r = rng.uniform(0.22, 0.34) * size * (1 - 0.35 * difficulty)
    cx, cy = rng.uniform(r + 1, size - r - 1, size=2)
    mask = _shape_mask(SHAPES[s_idx], xx - cx, yy - cy, r)[..., None]
    color = COLORS[c_idx] + rng.normal(0.0, 0.04 + 0.12 * difficulty, size=3)
    img = img * (1 - mask) + color * mask
    if difficulty > 0:
        # distractor blob of a random color
        dr = rng.uniform(0.1, 0.2) * size
        dcx, dcy = rng.uniform(0, size, size=2)
        dmask = _shape_mask("circle", xx - dcx, yy - dcy, dr)[..., None] * difficulty
        img = img * (1 - dmask) + rng.uniform(0.1, 0.9, size=3) * dmask
    img += rng.normal(0.0, 0.02 + 0.08 * difficulty, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _synth_split(rng, n_classes, n_per_class, size, difficulty):
    labels = np.repeat(np.arange(n_classes), n_per_class)
    rng.shuffle(labels)
    images = np.stack([_render(rng, int(c), size, difficulty) for c in labels]) if len(labels) else \
        np.zeros((0, size, size, 3))
    return Split(images, labels.astype(np.int64))


def synth_dataset(seed, n_classes, n_per_class, n_test_per_class=None, difficulty=0.0, size=32) -> Dataset:
    """Colored geometric shapes; class = (shape, color) combination.

    ``n_test_per_class`` defaults to a ninth of ``n_per_class`` (a 90/10
    split). ``difficulty`` in [0, 1] shrinks the shapes and adds color jitter,
    distractors and pixel noise.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if n_classes > MAX_SYNTH_CLASSES:
        raise ValueError(f"at most {MAX_SYNTH_CLASSES} synthetic classes")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 9)
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return Dataset(
        name=f"synth-{n_classes}x{n_per_class}-d{difficulty:g}-s{seed}",
        n_classes=n_classes,
        train=_synth_split(train_rng, n_classes, n_per_class, size, difficulty),
        test=_synth_split(test_rng, n_classes, n_test_per_class, size, difficulty),
    )


# --------------------------------------------------------------------------

def make_batches(split: Split, batch_size, seed, epoch):
    """Seeded shuffled batches; the permutation depends only on (seed, epoch).

    The last, possibly partial, batch is kept.
    """
    if batch_size < 4:
        raise ValueError("batch_size must be >= 4")
    n = len(split)
    if n == 0:
        raise DataError("cannot batch an empty split")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [split.subset(perm[i:i + batch_size]) for i in range(0, n, batch_size)]
