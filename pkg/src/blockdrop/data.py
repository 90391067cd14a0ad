"""Datasets: CIFAR-10 binary batches and a synthetic shape task with planted difficulty."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

SYNTH_CLASSES = ("hbar", "vbar", "diagonal", "disk")
SYNTH_SIZE = 16


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    tags: np.ndarray | None = None  # (N,) "easy" / "hard", synthetic only

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("label outside class range")
        if self.tags is not None and len(self.tags) != len(self.labels):
            raise ValueError("tags and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        tags = None if self.tags is None else self.tags[idx]
        return Dataset(self.images[idx], self.labels[idx], self.classes, tags)

    def batches(
        self, batch_size: int, rng: np.random.Generator | None = None
    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield ``(images, labels, indices)``; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx], idx


# CIFAR-10 --------------------------------------------------------------------


def parse_cifar_records(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode concatenated 3073-byte records: label byte, then R, G, B planes of 32x32."""
    if len(buf) % CIFAR_RECORD:
        off = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(
            f"{source}: {len(buf)} bytes is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at offset {off}"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(
            f"{source}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * CIFAR_RECORD}"
        )
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory {d} does not exist")

    def read(names):
        xs, ys = [], []
        for name in names:
            path = d / name
            if not path.exists():
                raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
            x, y = parse_cifar_records(path.read_bytes(), str(path))
            xs.append(x)
            ys.append(y)
        return Dataset(np.concatenate(xs), np.concatenate(ys), 10)

    return read(CIFAR_TRAIN_FILES), read([CIFAR_TEST_FILE])


# synthetic shapes ------------------------------------------------------------------


def _template(label: int, cy: float, cx: float, size: int = SYNTH_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if label == 0:  # horizontal bar
        m = (np.abs(yy - cy) <= 1.0) & (np.abs(xx - cx) <= 5.0)
    elif label == 1:  # vertical bar
        m = (np.abs(xx - cx) <= 1.0) & (np.abs(yy - cy) <= 5.0)
    elif label == 2:  # diagonal
        m = (np.abs((yy - cy) - (xx - cx)) <= 1.0) & (np.abs(xx - cx) <= 5.0)
    else:  # disk
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= 3.5**2
    return m.astype(np.float32)


def _distractor(rng: np.random.Generator, size: int = SYNTH_SIZE) -> np.ndarray:
    """A short stroke in a random orientation at a random place."""
    img = np.zeros((size, size), np.float32)
    y, x = rng.integers(0, size, 2)
    dy, dx = [(0, 1), (1, 0), (1, 1), (1, -1)][rng.integers(4)]
    for t in range(int(rng.integers(3, 6))):
        yy, xx = y + t * dy, x + t * dx
        if 0 <= yy < size and 0 <= xx < size:
            img[yy, xx] = 1.0
    return img


def _render(label: int, hard: bool, rng: np.random.Generator) -> np.ndarray:
    c = (SYNTH_SIZE - 1) / 2.0
    if not hard:
        cy, cx = c + rng.integers(-1, 2, 2)
        img = _template(label, cy, cx)
        img = img + rng.normal(0.0, 0.05, img.shape)
    else:
        cy, cx = c + rng.integers(-3, 4, 2)
        img = _template(label, cy, cx) * rng.uniform(0.6, 1.0)
        for _ in range(int(rng.integers(2, 4))):
            img = np.maximum(img, _distractor(rng) * rng.uniform(0.5, 1.0))
        # occluding patch over part of the object
        oy = int(np.clip(cy + rng.integers(-4, 2), 0, SYNTH_SIZE - 4))
        ox = int(np.clip(cx + rng.integers(-4, 2), 0, SYNTH_SIZE - 4))
        img[oy : oy + 4, ox : ox + 4] = rng.uniform(0.0, 0.3)
        img = img + rng.normal(0.0, 0.2, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(n: int, seed: int) -> Dataset:
    """``n`` 16x16 single-channel images of four shape classes.

    Each class gets ``n / 4`` images, half of them clean ("easy") and half
    cluttered and partly occluded ("hard"). Fully determined by ``seed``.
    """
    k = len(SYNTH_CLASSES)
    if n < 2 * k or n % (2 * k):
        raise ValueError(f"n must be a positive multiple of {2 * k}, got {n}")
    rng = np.random.default_rng(seed)
    per = n // (2 * k)
    labels = np.repeat(np.arange(k), 2 * per)
    hard = np.tile(np.repeat([False, True], per), k)
    images = np.stack([_render(int(lab), bool(h), rng) for lab, h in zip(labels, hard)])
    order = rng.permutation(n)
    tags = np.where(hard, "hard", "easy")
    return Dataset(images[order][:, None], labels[order].astype(np.int64), k, tags[order])
