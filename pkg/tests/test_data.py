import struct

import numpy as np
import pytest

from blockdrop.data import (
    CIFAR_RECORD,
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    Dataset,
    FormatError,
    generate_synthetic,
    load_cifar10,
    parse_cifar_records,
)


def record(label: int, fill) -> bytes:
    """One CIFAR record; ``fill(c, y, x)`` gives the pixel byte."""
    px = bytes(fill(c, y, x) for c in range(3) for y in range(32) for x in range(32))
    return struct.pack("B", label) + px


def test_two_record_fixture():
    buf = record(3, lambda c, y, x: 255 if c == 0 else 0) + record(7, lambda c, y, x: (y * 32 + x) % 256 if c == 2 else 0)
    images, labels = parse_cifar_records(buf)
    assert labels.tolist() == [3, 7]
    assert images.shape == (2, 3, 32, 32)
    assert images[0, 0].min() == 1.0 and images[0, 1:].max() == 0.0
    assert images[1, 2, 1, 3] == np.float32(35 / 255)
    assert images[1, 2, 7, 31] == np.float32(255 / 255)  # byte 255 -> exactly 1.0


def test_truncated_file_names_offset():
    buf = record(1, lambda c, y, x: 0) * 2
    with pytest.raises(FormatError, match=f"offset {CIFAR_RECORD}"):
        parse_cifar_records(buf[:-10])


def test_bad_label_names_offset():
    buf = record(1, lambda c, y, x: 0) + record(12, lambda c, y, x: 0)
    with pytest.raises(FormatError, match=f"offset {CIFAR_RECORD}"):
        parse_cifar_records(buf)


def test_load_cifar_directory(tmp_path):
    for name in CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE]:
        (tmp_path / name).write_bytes(record(2, lambda c, y, x: 9))
    train, test = load_cifar10(tmp_path)
    assert len(train) == 5 and len(test) == 1
    assert train.tags is None
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path / "nope")


def test_synthetic_is_deterministic():
    a, b = generate_synthetic(64, seed=3), generate_synthetic(64, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tolist() == b.labels.tolist() and a.tags.tolist() == b.tags.tolist()
    assert generate_synthetic(64, seed=4).images.tobytes() != a.images.tobytes()


def test_synthetic_balance():
    d = generate_synthetic(96, seed=0)
    assert d.shape == (1, 16, 16)
    assert 0.0 <= d.images.min() and d.images.max() <= 1.0
    for c in range(4):
        m = d.labels == c
        assert m.sum() == 24
        assert (d.tags[m] == "easy").sum() == 12


def test_synthetic_size_contract():
    with pytest.raises(ValueError):
        generate_synthetic(4, seed=0)


def _softmax_regression(x, y, classes, epochs=300, lr=0.5):
    x = x.reshape(len(x), -1).astype(np.float64)
    w = np.zeros((x.shape[1], classes))
    b = np.zeros(classes)
    onehot = np.eye(classes)[y]
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * (x.T @ g + 1e-4 * w)
        b -= lr * g.sum(axis=0)
    return lambda q: (q.reshape(len(q), -1) @ w + b).argmax(axis=1)


def test_linear_classifier_separates_easy_but_not_hard():
    train, test = generate_synthetic(2048, seed=10), generate_synthetic(1024, seed=11)
    for tag, check in (("easy", lambda a: a >= 0.99), ("hard", lambda a: a < 0.90)):
        tr, te = train.subset(train.tags == tag), test.subset(test.tags == tag)
        f = _softmax_regression(tr.images, tr.labels, 4)
        acc = (f(te.images) == te.labels).mean()
        assert check(acc), f"{tag}: {acc:.3f}"


def test_dataset_validation_and_batches():
    d = generate_synthetic(16, seed=0)
    with pytest.raises(ValueError):
        Dataset(d.images, d.labels[:3], 4)
    seen = np.concatenate([idx for _, _, idx in d.batches(5, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == list(range(16))
    first = [idx.tolist() for _, _, idx in d.batches(5)]
    assert first[0] == [0, 1, 2, 3, 4]
