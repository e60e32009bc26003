"""Dataset ingestion: CIFAR-10/100 and STL-10 binary archives, synthetic fixtures.

Images are float32 tensors (N, 3, H, W) in [0, 1]; labels are int64.
The dataset root defaults to ``$GACD_DATA_ROOT`` when no path is given.
"""
import hashlib
import logging
import os
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "GACD_DATA_ROOT"


class DatasetError(RuntimeError):
    pass


@dataclass
class Split:
    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        return Split(self.images[index], self.labels[index])

    def batches(self, batch_size, shuffle=False, generator=None):
        """Yield ``(x, y, index)`` minibatches; index is the instance id."""
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx], idx

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()


@dataclass
class Dataset:
    name: str
    num_classes: int
    train: Split
    test: Split
    class_names: list = field(default_factory=list)

    @property
    def image_size(self):
        return self.train.images.shape[-1]

    def checksums(self):
        return {"train": self.train.checksum(), "test": self.test.checksum()}

    def resized(self, size):
        """Copy with images bilinearly resized to ``size`` x ``size``."""
        if size == self.image_size:
            return self

        def rs(split):
            imgs = F.interpolate(split.images, size=(size, size), mode="bilinear",
                                 align_corners=False).clamp(0, 1)
            return Split(imgs, split.labels)

        return Dataset(self.name, self.num_classes, rs(self.train), rs(self.test),
                       list(self.class_names))


CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]
STL10_CLASSES = ["airplane", "bird", "car", "cat", "deer",
                 "dog", "horse", "monkey", "ship", "truck"]

# name -> (archive, directory, train files, test files, header bytes, label byte, side,
#          expected train/test counts, classes)
_CIFAR_LAYOUTS = {
    "cifar10": ("cifar-10-binary.tar.gz", "cifar-10-batches-bin",
                [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"],
                1, 0, (50000, 10000), 10),
    "cifar100": ("cifar-100-binary.tar.gz", "cifar-100-binary",
                 ["train.bin"], ["test.bin"], 2, 1, (50000, 10000), 100),
}


def _resolve_dir(root, dirname, archive):
    root = Path(root)
    for cand in (root / dirname, root):
        if cand.is_dir() and any(cand.glob("*.bin")):
            return cand
    tar_path = root / archive
    if tar_path.exists():
        log.info("extracting %s", tar_path)
        try:
            with tarfile.open(tar_path) as tf:
                tf.extractall(root, filter="data")
        except (tarfile.TarError, EOFError, OSError) as exc:
            raise DatasetError(f"corrupt archive {tar_path}: {exc}") from exc
        if (root / dirname).is_dir():
            return root / dirname
    raise DatasetError(
        f"no {dirname}/ directory or {archive} under {root}; download the binary "
        f"release and place it there (or set ${DATA_ROOT_ENV})"
    )


def _read_bytes(path):
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    return np.fromfile(path, dtype=np.uint8)


def _load_cifar(name, root, strict):
    archive, dirname, train_files, test_files, header, label_at, counts, k = _CIFAR_LAYOUTS[name]
    base = _resolve_dir(root, dirname, archive)
    record = header + 3072

    def read(files, expected):
        chunks = []
        for fname in files:
            raw = _read_bytes(base / fname)
            if raw.size == 0 or raw.size % record:
                raise DatasetError(
                    f"{base / fname}: {raw.size} bytes is not a whole number of "
                    f"{record}-byte records (truncated or corrupt)")
            chunks.append(raw.reshape(-1, record))
        rows = np.concatenate(chunks)
        if strict and rows.shape[0] != expected:
            raise DatasetError(f"{name}: expected {expected} records, found {rows.shape[0]}")
        labels = rows[:, label_at].astype(np.int64)
        if labels.max() >= k:
            raise DatasetError(f"{name}: label {labels.max()} out of range for {k} classes")
        images = rows[:, header:].reshape(-1, 3, 32, 32)
        return Split(torch.from_numpy(images.astype(np.float32) / 255.0),
                     torch.from_numpy(labels))

    names = CIFAR10_CLASSES if name == "cifar10" else [str(i) for i in range(k)]
    return Dataset(name, k, read(train_files, counts[0]), read(test_files, counts[1]), names)


def _load_stl10(root, strict):
    base = _resolve_dir(root, "stl10_binary", "stl10_binary.tar.gz")
    side = 96

    def read(prefix, expected):
        x = _read_bytes(base / f"{prefix}_X.bin")
        y = _read_bytes(base / f"{prefix}_y.bin")
        per = 3 * side * side
        if x.size == 0 or x.size % per:
            raise DatasetError(f"{base}/{prefix}_X.bin is truncated or corrupt")
        n = x.size // per
        if y.size != n:
            raise DatasetError(f"{prefix}: {n} images but {y.size} labels")
        if strict and n != expected:
            raise DatasetError(f"stl10 {prefix}: expected {expected} images, found {n}")
        if y.min() < 1 or y.max() > 10:
            raise DatasetError("stl10 labels must lie in 1..10")
        # stored column-major per image: (3, W, H)
        images = x.reshape(n, 3, side, side).transpose(0, 1, 3, 2)
        return Split(torch.from_numpy(np.ascontiguousarray(images).astype(np.float32) / 255.0),
                     torch.from_numpy(y.astype(np.int64) - 1))

    return Dataset("stl10", 10, read("train", 5000), read("test", 8000), STL10_CLASSES)


def _smooth_patterns(num, gen, side=32, coarse=4):
    base = torch.randn(num, 3, coarse, coarse, generator=gen)
    up = F.interpolate(base, size=(side, side), mode="bilinear", align_corners=False)
    return up / up.flatten(1).pow(2).mean(1).sqrt().view(-1, 1, 1, 1)


def synthetic_fixture(num_classes=2, per_class=256, test_per_class=128, seed=0,
                      side=32, robust_amp=0.15, fragile_amp=0.025, noise=0.08,
                      flip_prob=0.15, pattern_seed=1234, fragile_coarse=8):
    """Noise-with-signal images; hermetic stand-in for a real dataset.

    Each class owns a coarse smooth pattern (amplitude well above 8/255, but
    swapped for another class's pattern with probability ``flip_prob``) and a
    faint finer-grained pattern (amplitude below 8/255, always faithful).
    Natural training leans on the faint pattern, which an L-inf attack
    erases; a robust model has to use the coarse one.
    """
    pgen = torch.Generator().manual_seed(pattern_seed)
    robust = _smooth_patterns(num_classes, pgen, side)
    fragile = _smooth_patterns(num_classes, pgen, side, coarse=fragile_coarse)
    gen = torch.Generator().manual_seed(seed)

    def make(count):
        labels = torch.arange(num_classes).repeat_interleave(count)
        n = labels.numel()
        shown = labels.clone()
        flip = torch.rand(n, generator=gen) < flip_prob
        if num_classes > 1:
            shift = torch.randint(1, num_classes, (n,), generator=gen)
            shown = torch.where(flip, (labels + shift) % num_classes, labels)
        amp = robust_amp * (0.7 + 0.6 * torch.rand(n, generator=gen))
        x = 0.5 + amp.view(-1, 1, 1, 1) * robust[shown] + fragile_amp * fragile[labels]
        x = x + noise * torch.randn(x.shape, generator=gen)
        return Split(x.clamp(0, 1).float(), labels)

    train = make(per_class)
    test = make(test_per_class)
    return Dataset(f"fixture{num_classes}", num_classes, train, test,
                   [f"class{i}" for i in range(num_classes)])


def synthetic_transfer_fixture(num_classes=2, per_class=256, test_per_class=128, seed=7):
    """A related task: new smooth and faint patterns, new samples."""
    ds = synthetic_fixture(num_classes, per_class, test_per_class, seed=seed, pattern_seed=4321)
    ds.name = f"fixture{num_classes}-transfer"
    return ds


SUPPORTED = ("cifar10", "cifar100", "stl10", "fixture", "fixture-transfer")


def ingest_dataset(name, path=None, strict=True, **fixture_kwargs):
    """Load a dataset by name; returns a ``Dataset`` with train/test splits.

    ``strict`` enforces the published split sizes for real datasets.
    """
    if name not in SUPPORTED:
        raise DatasetError(f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED)}")
    if name == "fixture":
        ds = synthetic_fixture(**fixture_kwargs)
    elif name == "fixture-transfer":
        ds = synthetic_transfer_fixture(**fixture_kwargs)
    else:
        root = path or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise DatasetError(f"no path given for {name} and ${DATA_ROOT_ENV} is unset")
        if name in _CIFAR_LAYOUTS:
            ds = _load_cifar(name, root, strict)
        else:
            ds = _load_stl10(root, strict)
    for split, digest in ds.checksums().items():
        log.info("%s/%s: %d samples sha256=%s", ds.name, split,
                 len(getattr(ds, split)), digest[:16])
    return ds
