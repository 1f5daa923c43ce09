"""Dataset readers (CIFAR binary, IDX), normalisation and class-incremental splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """Per-channel standardisation applied after scaling bytes to [0, 1]."""

    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, unit_images: np.ndarray) -> "Normalization":
        mean = unit_images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = unit_images.std(axis=(0, 2, 3), dtype=np.float64)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(m) for m in mean), tuple(float(s) for s in std))

    def apply(self, unit_images: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean).reshape(1, -1, 1, 1)
        s = np.asarray(self.std).reshape(1, -1, 1, 1)
        return ((unit_images - m) / s).astype(np.float32)

    def invert(self, images: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean).reshape(1, -1, 1, 1)
        s = np.asarray(self.std).reshape(1, -1, 1, 1)
        return images * s + m


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32, normalised
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"
    norm: Optional[Normalization] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels outside [0, {self.class_count})")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def _finish(raw: np.ndarray, labels: np.ndarray, class_count: int, split: str,
            norm: Optional[Normalization], standardize: bool) -> LabeledDataset:
    unit = raw.astype(np.float32) / 255.0
    if standardize:
        norm = norm or Normalization.fit(unit)
        images = norm.apply(unit)
    else:
        images, norm = unit, None
    return LabeledDataset(images, labels.astype(np.int64), class_count, split, norm)


# -- CIFAR ---------------------------------------------------------------------------------
def _cifar_record_size(variant: str) -> int:
    if variant == "cifar10":
        return 1 + CIFAR_PIXELS
    if variant == "cifar100":
        return 2 + CIFAR_PIXELS
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def parse_cifar_bytes(raw: bytes, variant: str, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    rec = _cifar_record_size(variant)
    if len(raw) == 0 or len(raw) % rec:
        off = (len(raw) // rec) * rec
        raise DataFormatError(
            f"{source}: {len(raw)} bytes is not a whole number of {rec}-byte {variant} records "
            f"(incomplete record at offset {off})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, rec - CIFAR_PIXELS - 1]  # fine label for cifar100
    images = arr[:, rec - CIFAR_PIXELS:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar(path, variant: str, split: str = "train", norm: Optional[Normalization] = None,
               standardize: bool = True) -> LabeledDataset:
    """Read CIFAR-10/100 binary files (a single file or the standard directory)."""
    path = Path(path)
    if path.is_dir():
        files = [path / f for f in CIFAR_FILES[(variant, split)]]
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing CIFAR file {f}")
        im, lab = parse_cifar_bytes(f.read_bytes(), variant, str(f))
        images.append(im)
        labels.append(lab)
    class_count = 10 if variant == "cifar10" else 100
    return _finish(np.concatenate(images), np.concatenate(labels), class_count, split, norm, standardize)


def write_cifar(path, images: np.ndarray, labels: np.ndarray, variant: str,
                coarse: Optional[np.ndarray] = None) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "cifar100":
        c = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
        rows = np.hstack([c, labels, images])
    else:
        rows = np.hstack([labels, images])
    Path(path).write_bytes(rows.tobytes())


# -- IDX -----------------------------------------------------------------------------------
def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DataFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    off = 4 + 4 * ndim
    n = int(np.prod(dims))
    if len(raw) - off != n:
        raise DataFormatError(f"{path}: expected {n} payload bytes after offset {off}, found {len(raw) - off}")
    return np.frombuffer(raw, dtype=np.uint8, offset=off).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(path_images, path_labels, channels: int = 1, split: str = "train",
             norm: Optional[Normalization] = None, standardize: bool = True,
             class_count: Optional[int] = None) -> LabeledDataset:
    """Read an IDX image/label pair; grayscale is repeated to ``channels``."""
    images = _read_idx(path_images, IDX_IMAGES_MAGIC)
    labels = _read_idx(path_labels, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{path_images} has {len(images)} images but {path_labels} has {len(labels)} labels")
    images = np.repeat(images[:, None], channels, axis=1)
    k = class_count if class_count is not None else int(labels.max()) + 1
    return _finish(images, labels, k, split, norm, standardize)


def load_idx_dir(root, split: str = "train", **kw) -> LabeledDataset:
    img, lab = IDX_FILES[split]
    root = Path(root)
    return load_idx(root / img, root / lab, split=split, **kw)


def load_pair(variant: str, root, channels: int = 1) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/test pair sharing the normalisation fitted on the training split."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if variant in ("cifar10", "cifar100"):
        train = load_cifar(root, variant, "train")
        test = load_cifar(root, variant, "test", norm=train.norm)
    elif variant == "idx":
        train = load_idx_dir(root, "train", channels=channels, class_count=10)
        test = load_idx_dir(root, "test", channels=channels, norm=train.norm, class_count=10)
    else:
        raise ValueError(f"unknown dataset variant {variant!r}")
    return train, test


def make_desk_digits(out_dir, size: int = 16, test_fraction: float = 0.25, seed: int = 0) -> Path:
    """Write scikit-learn's bundled 8x8 digits as upsampled IDX files.

    Stand-in for a 10-class grayscale benchmark that needs no download.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = d.images  # values 0..16
    if size != imgs.shape[1]:
        imgs = np.stack([zoom(im, size / im.shape[0], order=1) for im in imgs])
    imgs = np.clip(np.rint(imgs * (255.0 / 16.0)), 0, 255).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        take = rng.permutation(idx)[: int(round(test_fraction * len(idx)))]
        test_mask[take] = True
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, m in (("train", ~test_mask), ("test", test_mask)):
        img_name, lab_name = IDX_FILES[split]
        write_idx(out / img_name, imgs[m])
        write_idx(out / lab_name, labels[m])
    return out


# -- task streams ------------------------------------------------------------------------
@dataclass(frozen=True)
class Task:
    index: int  # 1-based
    classes: tuple
    train_idx: np.ndarray = field(repr=False)
    test_idx: np.ndarray = field(repr=False)


@dataclass
class TaskStream:
    tasks: list[Task]
    class_to_task: dict[int, int]
    train: LabeledDataset
    test: LabeledDataset

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, n: int) -> Task:
        """1-based task lookup."""
        if not 1 <= n <= len(self.tasks):
            raise IndexError(f"task {n} outside 1..{len(self.tasks)}")
        return self.tasks[n - 1]

    @property
    def num_classes(self) -> int:
        return self.train.class_count

    def class_order(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]

    def seen_mask(self, n: int) -> np.ndarray:
        """Boolean mask over output units for classes of tasks 1..n."""
        mask = np.zeros(self.num_classes, dtype=bool)
        for t in self.tasks[:n]:
            mask[list(t.classes)] = True
        return mask


def split_tasks(train: LabeledDataset, test: LabeledDataset, n_tasks: int, classes_per_task: int,
                seed: int = 0, shuffle: bool = False) -> TaskStream:
    """Partition classes into ``n_tasks`` disjoint blocks of ``classes_per_task``."""
    need = n_tasks * classes_per_task
    if n_tasks < 1 or classes_per_task < 1:
        raise ValueError("task count and classes per task must be positive")
    if need > train.class_count:
        raise ValueError(f"{n_tasks} tasks x {classes_per_task} classes needs {need} classes, "
                         f"dataset has {train.class_count}")
    order = np.arange(train.class_count)
    if shuffle:
        order = np.random.default_rng(seed).permutation(train.class_count)
    order = order[:need]
    tasks, c2t = [], {}
    for t in range(n_tasks):
        cls = tuple(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task])
        for c in cls:
            c2t[c] = t + 1
        tasks.append(Task(
            index=t + 1, classes=cls,
            train_idx=np.flatnonzero(np.isin(train.labels, cls)),
            test_idx=np.flatnonzero(np.isin(test.labels, cls)),
        ))
    return TaskStream(tasks, c2t, train, test)


def subsample(indices: np.ndarray, limit: Optional[int], seed: int) -> np.ndarray:
    if limit is None or len(indices) <= limit:
        return indices
    return np.sort(np.random.default_rng(seed).choice(indices, size=limit, replace=False))


def images_of(ds: LabeledDataset, idx: Sequence[int]) -> np.ndarray:
    return ds.images[np.asarray(idx)]
