import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepcl.data import (
    CIFAR_PIXELS,
    DataFormatError,
    LabeledDataset,
    load_cifar,
    load_idx,
    load_idx_dir,
    load_pair,
    make_desk_digits,
    parse_cifar_bytes,
    split_tasks,
    subsample,
    write_cifar,
    write_idx,
)


def test_single_cifar100_record(tmp_path):
    img = np.arange(CIFAR_PIXELS) % 256
    write_cifar(tmp_path / "one.bin", img[None], np.array([42]), "cifar100", coarse=np.array([7]))
    ds = load_cifar(tmp_path / "one.bin", "cifar100", standardize=False)
    assert ds.images.shape == (1, 3, 32, 32)
    assert ds.labels[0] == 42
    assert ds.class_count == 100
    np.testing.assert_allclose(ds.images.ravel(), img / 255.0, rtol=1e-6)


def test_cifar10_record_layout():
    raw = bytes([3]) + bytes(range(256)) * 12
    images, labels = parse_cifar_bytes(raw, "cifar10")
    assert labels.tolist() == [3]
    assert images[0, 0, 0, :4].tolist() == [0, 1, 2, 3]


def test_cifar_bad_length_names_offset():
    with pytest.raises(DataFormatError, match="offset 3074"):
        parse_cifar_bytes(bytes(3074 + 10), "cifar100")


def test_pixel_mapping_endpoints(tmp_path):
    img = np.zeros(CIFAR_PIXELS)
    img[1] = 255
    write_cifar(tmp_path / "x.bin", img[None], np.array([0]), "cifar10")
    ds = load_cifar(tmp_path / "x.bin", "cifar10", standardize=False)
    assert ds.images.ravel()[0] == 0.0 and ds.images.ravel()[1] == 1.0


def test_missing_cifar_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(tmp_path, "cifar10", "train")


def test_idx_roundtrip_and_channel_repeat(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 4, 4))
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", np.arange(5))
    ds = load_idx(tmp_path / "i", tmp_path / "l", channels=3, standardize=False)
    assert ds.images.shape == (5, 3, 4, 4)
    np.testing.assert_allclose(ds.images[:, 2], imgs / 255.0, rtol=1e-6)


def test_idx_bad_magic(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 4, 4)))
    write_idx(tmp_path / "l", np.zeros(2))
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "l", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 4, 4)))
    write_idx(tmp_path / "l", np.zeros(3))
    with pytest.raises(DataFormatError, match="2 images"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_truncated_payload(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 4, 4)))
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i", tmp_path / "i")


def test_label_out_of_range():
    with pytest.raises(DataFormatError):
        LabeledDataset(np.zeros((1, 1, 2, 2), np.float32), np.array([10]), 10)


def test_test_split_reuses_train_normalisation(tmp_path):
    make_desk_digits(tmp_path, size=8)
    train, test = load_pair("idx", tmp_path)
    assert test.norm == train.norm
    assert abs(float(train.images.mean())) < 1e-4


def test_load_pair_missing_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pair("idx", tmp_path / "nope")


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    root = make_desk_digits(tmp_path_factory.mktemp("digits"))
    return load_idx_dir(root, "train", class_count=10), load_idx_dir(root, "test", class_count=10)


def test_desk_digits_shape(digits):
    train, test = digits
    assert train.images.shape[1:] == (1, 16, 16)
    assert set(np.unique(train.labels)) == set(range(10))
    assert set(np.unique(test.labels)) == set(range(10))


def test_five_tasks_of_two_classes(digits):
    stream = split_tasks(*digits, n_tasks=5, classes_per_task=2)
    assert [t.classes for t in stream.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    assert stream[1].index == 1
    assert stream.seen_mask(2).tolist() == [True] * 4 + [False] * 6


def test_too_many_classes_requested(digits):
    with pytest.raises(ValueError, match="needs 12 classes"):
        split_tasks(*digits, n_tasks=6, classes_per_task=2)


def test_task_index_out_of_range(digits):
    stream = split_tasks(*digits, n_tasks=5, classes_per_task=2)
    with pytest.raises(IndexError):
        stream[0]


@settings(max_examples=20, deadline=None)
@given(n_tasks=st.integers(1, 5), cpt=st.integers(1, 2), seed=st.integers(0, 1000), shuffle=st.booleans())
def test_split_partition_properties(digits, n_tasks, cpt, seed, shuffle):
    train, test = digits
    a = split_tasks(train, test, n_tasks, cpt, seed=seed, shuffle=shuffle)
    b = split_tasks(train, test, n_tasks, cpt, seed=seed, shuffle=shuffle)
    assert a.class_order() == b.class_order()
    order = a.class_order()
    assert len(order) == len(set(order)) == n_tasks * cpt
    for t in a.tasks:
        assert set(train.labels[t.train_idx]) == set(t.classes)
        assert set(test.labels[t.test_idx]) == set(t.classes)
    covered = np.concatenate([t.train_idx for t in a.tasks])
    assert len(covered) == len(set(covered)) == np.isin(train.labels, order).sum()


def test_subsample_deterministic_and_bounded():
    idx = np.arange(100)
    a = subsample(idx, 10, seed=3)
    assert len(a) == 10 and np.array_equal(a, subsample(idx, 10, seed=3))
    assert subsample(idx, None, 0) is idx
