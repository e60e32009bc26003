import tarfile

import numpy as np
import pytest
import torch

from gacd.data import (
    DATA_ROOT_ENV,
    SUPPORTED,
    DatasetError,
    ingest_dataset,
    synthetic_fixture,
    synthetic_transfer_fixture,
)


def write_cifar10(root, n_train=10, n_test=4, seed=0):
    rng = np.random.default_rng(seed)
    d = root / "cifar-10-batches-bin"
    d.mkdir(parents=True)
    records = {}
    for i in range(1, 6):
        rec = np.zeros((n_train // 5, 3073), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, size=len(rec))
        rec[:, 1:] = rng.integers(0, 256, size=(len(rec), 3072))
        rec.tofile(d / f"data_batch_{i}.bin")
        records[i] = rec
    test = np.zeros((n_test, 3073), dtype=np.uint8)
    test[:, 0] = np.arange(n_test) % 10
    test[:, 1:] = rng.integers(0, 256, size=(n_test, 3072))
    test.tofile(d / "test_batch.bin")
    return d, records, test


def test_cifar10_layout(tmp_path):
    _, records, test = write_cifar10(tmp_path)
    ds = ingest_dataset("cifar10", tmp_path, strict=False)
    assert ds.num_classes == 10 and len(ds.train) == 10 and len(ds.test) == 4
    first = records[1][0]
    assert ds.train.labels[0].item() == first[0]
    # channel-major 32x32 planes: red plane first
    assert ds.train.images[0, 0, 0, 1].item() == pytest.approx(first[1 + 1] / 255.0)
    assert ds.train.images[0, 1, 0, 0].item() == pytest.approx(first[1 + 1024] / 255.0)
    assert ds.train.images[0, 2, 31, 31].item() == pytest.approx(first[3072] / 255.0)
    assert 0.0 <= ds.train.images.min() and ds.train.images.max() <= 1.0
    assert ds.class_names[2] == "bird"
    assert set(ds.checksums()) == {"train", "test"}


def test_cifar10_strict_counts(tmp_path):
    write_cifar10(tmp_path)
    with pytest.raises(DatasetError, match="expected 50000"):
        ingest_dataset("cifar10", tmp_path)


def test_cifar100_layout(tmp_path):
    d = tmp_path / "cifar-100-binary"
    d.mkdir()
    rec = np.zeros((3, 3074), dtype=np.uint8)
    rec[:, 0] = [1, 2, 3]          # coarse label
    rec[:, 1] = [99, 0, 42]        # fine label
    rec[:, 2:] = 7
    rec.tofile(d / "train.bin")
    rec[:2].tofile(d / "test.bin")
    ds = ingest_dataset("cifar100", tmp_path, strict=False)
    assert ds.num_classes == 100
    assert ds.train.labels.tolist() == [99, 0, 42]
    assert ds.train.images.shape == (3, 3, 32, 32)
    assert ds.train.images[0, 0, 0, 0].item() == pytest.approx(7 / 255)


def test_stl10_column_major(tmp_path):
    d = tmp_path / "stl10_binary"
    d.mkdir()
    side = 96
    img = np.zeros((2, 3, side, side), dtype=np.uint8)  # (n, c, row, col)
    img[0, 0, 5, 60] = 200
    # stored column-major: column index varies slowest within a channel
    img.transpose(0, 1, 3, 2).tofile(d / "train_X.bin")
    np.array([1, 10], dtype=np.uint8).tofile(d / "train_y.bin")
    img[:1].transpose(0, 1, 3, 2).tofile(d / "test_X.bin")
    np.array([3], dtype=np.uint8).tofile(d / "test_y.bin")
    ds = ingest_dataset("stl10", tmp_path, strict=False)
    assert ds.train.labels.tolist() == [0, 9]
    assert ds.test.labels.tolist() == [2]
    assert ds.train.images[0, 0, 5, 60].item() == pytest.approx(200 / 255)
    assert ds.image_size == 96
    assert ds.resized(32).train.images.shape == (2, 3, 32, 32)


def test_archive_extraction(tmp_path):
    src = tmp_path / "src"
    write_cifar10(src)
    root = tmp_path / "root"
    root.mkdir()
    with tarfile.open(root / "cifar-10-binary.tar.gz", "w:gz") as tf:
        tf.add(src / "cifar-10-batches-bin", arcname="cifar-10-batches-bin")
    ds = ingest_dataset("cifar10", root, strict=False)
    assert len(ds.train) == 10


def test_corrupt_archive(tmp_path):
    (tmp_path / "cifar-10-binary.tar.gz").write_bytes(b"not a tarball")
    with pytest.raises(DatasetError, match="corrupt"):
        ingest_dataset("cifar10", tmp_path, strict=False)


def test_truncated_file(tmp_path):
    d, _, _ = write_cifar10(tmp_path)
    raw = (d / "data_batch_3.bin").read_bytes()
    (d / "data_batch_3.bin").write_bytes(raw[:-10])
    with pytest.raises(DatasetError, match="truncated"):
        ingest_dataset("cifar10", tmp_path, strict=False)


def test_missing_file_and_dir(tmp_path):
    d, _, _ = write_cifar10(tmp_path)
    (d / "test_batch.bin").unlink()
    with pytest.raises(DatasetError, match="missing"):
        ingest_dataset("cifar10", tmp_path, strict=False)
    with pytest.raises(DatasetError):
        ingest_dataset("cifar100", tmp_path / "nothing")


def test_unknown_name_lists_supported():
    with pytest.raises(DatasetError) as err:
        ingest_dataset("imagenet")
    for name in SUPPORTED:
        assert name in str(err.value)


def test_env_var_root(tmp_path, monkeypatch):
    write_cifar10(tmp_path)
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert len(ingest_dataset("cifar10", strict=False).test) == 4
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(DatasetError):
        ingest_dataset("cifar10")


def test_fixture_contract():
    ds = ingest_dataset("fixture")
    assert ds.num_classes == 2
    assert ds.train.images.shape == (512, 3, 32, 32)
    assert torch.bincount(ds.train.labels).tolist() == [256, 256]
    assert 0.0 <= ds.train.images.min() and ds.train.images.max() <= 1.0
    again = synthetic_fixture()
    assert torch.equal(ds.train.images, again.train.images)
    assert ds.checksums() == again.checksums()
    assert not torch.equal(ds.train.images[:8], ds.test.images[:8])


def test_fixture_class_count_and_transfer():
    ds = synthetic_fixture(num_classes=4, per_class=8, test_per_class=4)
    assert ds.num_classes == 4 and len(ds.train) == 32 and len(ds.test) == 16
    tr = synthetic_transfer_fixture()
    assert tr.name == "fixture2-transfer"
    assert not torch.equal(tr.train.images, synthetic_fixture().train.images)


def test_class_signal_is_learnable_by_template():
    """Nearest class mean on the training split beats chance on test."""
    ds = synthetic_fixture()
    means = torch.stack([ds.train.images[ds.train.labels == c].mean(0) for c in range(2)])
    d = ((ds.test.images[:, None] - means[None]) ** 2).flatten(2).sum(2)
    acc = (d.argmin(1) == ds.test.labels).float().mean().item()
    assert acc > 0.7


def test_batches_cover_split_once():
    ds = synthetic_fixture(per_class=10, test_per_class=2)
    seen = torch.cat([idx for _, _, idx in ds.train.batches(7, shuffle=True,
                                                           generator=torch.Generator().manual_seed(0))])
    assert sorted(seen.tolist()) == list(range(20))
