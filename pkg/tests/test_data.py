import struct

import numpy as np
import pytest

from mtlat.data import class_combo, load_cifar_binary, load_idx, make_batches, one_hot, synth_dataset
from mtlat.errors import DataError


def _idx_images(path, pixels):
    n, h, w = pixels.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + pixels.astype(np.uint8).tobytes())


def _idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, np.uint8).tobytes())


def test_idx_fixture(tmp_path):
    px = np.zeros((3, 28, 28), np.uint8)
    px[0, 0, 0] = 255
    _idx_images(tmp_path / "i", px)
    _idx_labels(tmp_path / "l", [0, 1, 2])
    s = load_idx(tmp_path / "i", tmp_path / "l")
    assert s.images.shape == (3, 28, 28, 1)
    assert s.images[0, 0, 0, 0] == 1.0
    assert s.labels.tolist() == [0, 1, 2]
    s3 = load_idx(tmp_path / "i", tmp_path / "l", channels=3)
    assert s3.images.shape == (3, 28, 28, 3)


def test_idx_errors(tmp_path):
    _idx_images(tmp_path / "i", np.zeros((3, 4, 4)))
    _idx_labels(tmp_path / "l", [0, 1])
    with pytest.raises(DataError):
        load_idx(tmp_path / "i", tmp_path / "l")
    (tmp_path / "bad").write_bytes(struct.pack(">II", 0x999, 3) + bytes(3))
    with pytest.raises(DataError):
        load_idx(tmp_path / "i", tmp_path / "bad")


def test_cifar_records(tmp_path):
    rec0 = bytes([3]) + bytes(3072)
    rec1 = bytes([7]) + bytes([200] * 1024) + bytes(2048)
    (tmp_path / "b").write_bytes(rec0 + rec1)
    s = load_cifar_binary(tmp_path / "b")
    assert len(s) == 2 and s.labels.tolist() == [3, 7]
    assert not s.images[0].any()
    assert np.all(s.images[1, ..., 0] == 200 / 255) and not s.images[1, ..., 1:].any()
    (tmp_path / "c").write_bytes(rec0[:-1])
    with pytest.raises(DataError):
        load_cifar_binary(tmp_path / "c")


def test_synth_deterministic_and_sized():
    a = synth_dataset(3, 4, 100)
    b = synth_dataset(3, 4, 100)
    assert len(a.train) == 400
    assert np.array_equal(a.train.images, b.train.images) and np.array_equal(a.test.labels, b.test.labels)
    assert a.train.images.min() >= 0 and a.train.images.max() <= 1
    assert not np.array_equal(synth_dataset(4, 4, 100).train.images, a.train.images)


def test_synth_classes_distinct():
    combos = {class_combo(k) for k in range(36)}
    assert len(combos) == 36


def test_one_hot():
    assert one_hot(np.array([1, 0]), 3).tolist() == [[0, 1, 0], [1, 0, 0]]


def test_batches_partition_and_order(tiny_data):
    split = tiny_data.train
    b0 = make_batches(split, 32, seed=5, epoch=0)
    again = make_batches(split, 32, seed=5, epoch=0)
    b1 = make_batches(split, 32, seed=5, epoch=1)
    assert all(np.array_equal(x.labels, y.labels) and np.array_equal(x.images, y.images)
               for x, y in zip(b0, again))
    assert sum(len(b) for b in b0) == len(split)
    flat0 = np.concatenate([b.images for b in b0]).reshape(len(split), -1)
    flat1 = np.concatenate([b.images for b in b1]).reshape(len(split), -1)
    assert not np.array_equal(flat0, flat1)
    # partition: the multiset of images equals the split
    key = lambda a: np.lexsort(a.T[::-1])  # noqa: E731
    ref = split.images.reshape(len(split), -1)
    assert np.array_equal(flat0[key(flat0)], ref[key(ref)])


def test_batches_errors(tiny_data):
    with pytest.raises(ValueError):
        make_batches(tiny_data.train, 2, 0, 0)
    with pytest.raises(DataError):
        make_batches(tiny_data.train.subset(np.array([], dtype=int)), 8, 0, 0)


@pytest.mark.slow
def test_easy_synth_is_learnable():
    from mtlat.training import TrainRecipe, train
    ds = synth_dataset(0, 4, 100)
    log = train(ds, TrainRecipe(mode="standard", epochs=10, seed=0)).log
    assert log[-1].clean_accuracy >= 95.0
