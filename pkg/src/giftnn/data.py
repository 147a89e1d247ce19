"""Dataset ingestion: IDX-format digit images, synthetic tasks, splits, batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Architecture, RngStream, forward_deterministic, Params

DATA_DIR_ENV = "GIFTNN_DATA_DIR"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Row-aligned inputs (n, d0) and targets (n, dL); one-hot rows for classification."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str = ""
    normalization: str = ""
    split: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"row mismatch: {self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset must be nonempty")
        if not (np.isfinite(self.inputs).all() and np.isfinite(self.targets).all()):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        rest = f.read()
    raw = head + rest
    if head == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _unpack_header(buf: bytes, fmt: str, path) -> tuple:
    need = struct.calcsize(fmt)
    if len(buf) < need:
        raise IdxTruncatedError(f"{path}: truncated header at byte {len(buf)}, need {need}")
    return struct.unpack_from(fmt, buf, 0)


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files (plain or gzipped).

    Returns (images uint8 (n, 28, 28), labels uint8 (n,)). Wrong magic numbers,
    truncation, and image/label count mismatch raise distinct errors.
    """
    img_buf = _read_bytes(images_path)
    magic, count, rows, cols = _unpack_header(img_buf, ">iiii", images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: image magic 0x{magic:08x}, want 0x{IDX_IMAGE_MAGIC:08x}")
    if (rows, cols) != (28, 28):
        raise IdxError(f"{images_path}: image dims {rows}x{cols}, want 28x28")
    need = 16 + count * rows * cols
    if len(img_buf) < need:
        raise IdxTruncatedError(
            f"{images_path}: truncated at byte {len(img_buf)}, need {need} for {count} images"
        )
    images = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = images.reshape(count, rows, cols)

    lab_buf = _read_bytes(labels_path)
    magic, lab_count = _unpack_header(lab_buf, ">ii", labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: label magic 0x{magic:08x}, want 0x{IDX_LABEL_MAGIC:08x}")
    need = 8 + lab_count
    if len(lab_buf) < need:
        raise IdxTruncatedError(
            f"{labels_path}: truncated at byte {len(lab_buf)}, need {need} for {lab_count} labels"
        )
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=lab_count, offset=8)
    if lab_count != count:
        raise IdxCountMismatchError(f"{count} images but {lab_count} labels")
    return images, labels


def to_dataset(images, labels, one_hot: int = 10, name: str = "mnist", split: str = "") -> Dataset:
    """Pixels scaled to [0, 1], labels one-hot of length `one_hot`."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= one_hot:
        raise ValueError(f"label {int(labels.max())} out of range for {one_hot} classes")
    inputs = images.reshape(images.shape[0], -1).astype(float) / 255.0
    targets = np.zeros((labels.shape[0], one_hot))
    targets[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return Dataset(inputs, targets, name=name, normalization="pixels/255", split=split)


_MNIST_FILES = {
    (True, "images"): ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    (True, "labels"): ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    (False, "images"): ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    (False, "labels"): ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_idx_file(data_dir, names):
    tried = []
    for name in names:
        for candidate in (name, name + ".gz"):
            path = os.path.join(data_dir, candidate)
            tried.append(path)
            if os.path.exists(path):
                return path
    raise FileNotFoundError("no IDX file found; tried: " + ", ".join(tried))


def resolve_data_dir(data_dir=None) -> str:
    d = data_dir or os.environ.get(DATA_DIR_ENV)
    if not d:
        raise FileNotFoundError(
            f"no data directory: pass --data-dir or set {DATA_DIR_ENV}"
        )
    return d


def load_mnist(data_dir=None, train: bool = True) -> Dataset:
    """Load the digit dataset from IDX files under data_dir (or $GIFTNN_DATA_DIR)."""
    d = resolve_data_dir(data_dir)
    images_path = _find_idx_file(d, _MNIST_FILES[(train, "images")])
    labels_path = _find_idx_file(d, _MNIST_FILES[(train, "labels")])
    images, labels = load_idx(images_path, labels_path)
    return to_dataset(images, labels, split="train" if train else "test")


def synthetic_linear(V, sigma_x: float, n: int, rng: RngStream) -> Dataset:
    """x ~ N(0, sigma_x^2 I) per component, y = V x (noiseless linear targets)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not sigma_x > 0:
        raise ValueError("sigma_x must be positive")
    V = np.atleast_2d(np.asarray(V, dtype=float))
    gen = rng.generator(0)
    X = sigma_x * gen.standard_normal((n, V.shape[1]))
    Y = X @ V.T
    return Dataset(X, Y, name="synthetic_linear", normalization="none")


def synthetic_teacher(arch: Architecture, n: int, sigma_x: float, rng: RngStream) -> Dataset:
    """x ~ N(0, sigma_x^2 I), y = teacher(x) for a fixed random noise-free teacher net."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator(0)
    dims = arch.layer_dims
    ws, bs = [], []
    for l in range(arch.n_layers):
        a = 1.0 / np.sqrt(dims[l])
        ws.append(gen.uniform(-a, a, (dims[l + 1], dims[l])))
        bs.append(np.zeros(dims[l + 1]))
    teacher = Params(arch, ws, bs)
    X = sigma_x * gen.standard_normal((n, dims[0]))
    Y = forward_deterministic(teacher, X)
    return Dataset(X, Y, name="synthetic_teacher", normalization="none")


def subset(ds: Dataset, n: int, rng: RngStream) -> Dataset:
    """Seed-selected subset of n rows, without replacement."""
    if n > len(ds):
        raise ValueError(f"subset of {n} from {len(ds)} rows")
    idx = rng.generator(0).choice(len(ds), size=n, replace=False)
    return Dataset(ds.inputs[idx], ds.targets[idx], name=ds.name, normalization=ds.normalization, split=ds.split)


def train_test_split(ds: Dataset, n_test: int, rng: RngStream):
    """Disjoint-by-index split; permutation fixed by the stream."""
    if not 0 < n_test < len(ds):
        raise ValueError(f"n_test must be in (0, {len(ds)})")
    perm = rng.generator(0).permutation(len(ds))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    mk = lambda idx, split: Dataset(
        ds.inputs[idx], ds.targets[idx], name=ds.name, normalization=ds.normalization, split=split
    )
    return mk(train_idx, "train"), mk(test_idx, "test")


def epoch_batches(n: int, batch_size: int, rng: RngStream, epoch: int):
    """Index batches covering each of 0..n-1 exactly once, in a seed-determined order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.generator(epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
