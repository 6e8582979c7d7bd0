"""Datasets: MNIST in IDX format and a synthetic Gaussian task."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray            # (n, d), standardized
    targets: np.ndarray           # (n, n_classes), one-hot
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.targets.argmax(axis=1)

    def subset(self, n: int | None) -> Dataset:
        if n is None or n >= len(self):
            return self
        return Dataset(self.inputs[:n], self.targets[:n], self.feature_mean, self.feature_std)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into an array."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(path, 0, f"expected a 4-byte header, file has {len(raw)} bytes")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    got = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype != _UBYTE or ndim == 0:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}")
    if magic is not None and got != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(path, 4, f"expected {head} header bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxFormatError(path, min(len(raw), expected),
                             f"expected {expected} bytes for dims {dims}, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def standardize(x: np.ndarray, mean=None, std=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center every feature, then apply one common scale so E|x|^2 = input dim.

    A single scale rather than per-feature ones: MNIST has pixels that are
    almost constant on a small training subset, and dividing by their tiny
    std blows up held-out data.  The theory only needs zero mean and unit
    average variance.  Statistics are estimated from ``x`` unless given.
    """
    if mean is None:
        mean = x.mean(axis=0)
        rms = float(np.sqrt(((x - mean) ** 2).mean()))
        if rms == 0.0:
            raise ValueError("every feature is constant")
        std = np.full(x.shape[1], rms)
    return (x - mean) / std, mean, std


def load_idx(images_path, labels_path, subset: int | None = None, n_classes: int = 10,
             stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Load an IDX image/label pair as a standardized, one-hot Dataset.

    Pixels are scaled to [0, 1], then standardized (see :func:`standardize`)
    with ``stats`` (mean, std) if given, otherwise with statistics of the
    selected subset.  Pass the training set's stats when loading a test set.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, 0, "label file must be one-dimensional")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    if labels.size and labels.max() >= n_classes:
        raise ValueError(f"label {labels.max()} outside 0..{n_classes - 1}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    mean, std = stats if stats is not None else (None, None)
    x, mean, std = standardize(x, mean, std)
    return Dataset(x, one_hot(labels.astype(np.int64), n_classes), mean, std)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory}: no {stem} or {stem}.gz")


def load_mnist(directory, n_train: int | None = None, n_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory of (possibly gzipped) IDX files."""
    directory = Path(directory)
    tr_img, tr_lab = (_find(directory, s) for s in MNIST_FILES["train"])
    te_img, te_lab = (_find(directory, s) for s in MNIST_FILES["test"])
    train = load_idx(tr_img, tr_lab, n_train)
    test = load_idx(te_img, te_lab, n_test, stats=(train.feature_mean, train.feature_std))
    return train, test


def synthetic_gaussian(n: int, input_dim: int, n_classes: int, seed: int) -> Dataset:
    """i.i.d. N(0, 1) inputs labelled by a fixed random linear classifier."""
    if n < n_classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((input_dim, n_classes))
    x = rng.standard_normal((n, input_dim))
    labels = (x @ teacher).argmax(axis=1)
    return Dataset(x, one_hot(labels, n_classes), np.zeros(input_dim), np.ones(input_dim))


def synthetic_split(n_train: int, n_test: int, input_dim: int, n_classes: int,
                    seed: int) -> tuple[Dataset, Dataset]:
    """Train/test sets sharing one labelling function."""
    full = synthetic_gaussian(n_train + n_test, input_dim, n_classes, seed)
    cut = lambda a, b: Dataset(full.inputs[a:b], full.targets[a:b], full.feature_mean, full.feature_std)
    return cut(0, n_train), cut(n_train, n_train + n_test)
