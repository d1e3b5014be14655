"""MNIST ingestion and domain-incremental task streams.

Images are column-batched float64 in [0, 1], shape (pixels, samples).
Streams share one base dataset; each task stores its transform (pixel
permutation, rotation map, or digit-pair subset) and materializes
batches on access, so long streams do not multiply memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "IdxFormatError",
    "Task",
    "TaskStream",
    "MNIST_FILES",
    "load_idx",
    "load_mnist_dir",
    "rotate_image",
    "build_stream",
    "batches",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

BENCHMARKS = ("permuted", "rotated", "binary_split")


class IdxFormatError(ValueError):
    """Malformed IDX container."""


def _read_be32(data: bytes, offset: int, path) -> int:
    if offset + 4 > len(data):
        raise IdxFormatError(f"{path}: truncated header at byte {offset}")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label file pair.

    Returns (x, y): x is (rows*cols, count) float64 scaled to [0, 1] by
    /255, y is (count,) int64. Raises IdxFormatError (with the offending
    byte offset) on bad magic numbers or truncation.
    """
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, images_path)
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0")
    count = _read_be32(raw, 4, images_path)
    rows = _read_be32(raw, 8, images_path)
    cols = _read_be32(raw, 12, images_path)
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IdxFormatError(
            f"{images_path}: truncated pixel data at byte {len(raw)} "
            f"(expected {expected} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    x = pixels.reshape(count, rows * cols).T.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, labels_path)
    if magic != LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad label magic 0x{magic:08x} at byte 0")
    n_labels = _read_be32(raw, 4, labels_path)
    if len(raw) < 8 + n_labels:
        raise IdxFormatError(
            f"{labels_path}: truncated label data at byte {len(raw)} "
            f"(expected {8 + n_labels} bytes)")
    y = np.frombuffer(raw, dtype=np.uint8, count=n_labels, offset=8
                      ).astype(np.int64)
    if n_labels != count:
        raise IdxFormatError(
            f"{labels_path}: {n_labels} labels for {count} images")
    return x, y


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve_idx(directory: Path, name: str) -> Path:
    """Accept both raw and gzipped canonical files; gunzip on the fly."""
    raw = directory / name
    if raw.exists():
        return raw
    gz = directory / (name + ".gz")
    if gz.exists():
        import gzip
        import shutil
        with gzip.open(gz, "rb") as src, open(raw, "wb") as dst:
            shutil.copyfileobj(src, dst)
        return raw
    raise FileNotFoundError(f"missing {raw} (and {gz})")


def load_mnist_dir(data_dir):
    """Load the four canonical MNIST files from a directory.

    Returns (train, test) where each is an (x, y) pair as in load_idx.
    """
    directory = Path(data_dir)
    out = {}
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        out[split] = load_idx(_resolve_idx(directory, img_name),
                              _resolve_idx(directory, lbl_name))
    return out["train"], out["test"]


def _rotation_map(angle_deg: float, side: int):
    """Bilinear resampling map for rotation about the image center.

    Returns (idx, w): flat source indices (side*side, 4) and weights
    summing to at most 1 per pixel (out-of-bounds neighbors read as 0).
    Positive angles match np.rot90's direction at 90 degrees.
    """
    theta = np.radians(angle_deg)
    c = (side - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dr = rr.ravel() - c
    dc = cc.ravel() - c
    src_r = np.cos(theta) * dr + np.sin(theta) * dc + c
    src_c = -np.sin(theta) * dr + np.cos(theta) * dc + c
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    idx = np.zeros((side * side, 4), dtype=np.int64)
    w = np.zeros((side * side, 4))
    for k, (ro, co, wk) in enumerate([
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c0 + 1, (1 - fr) * fc),
        (r0 + 1, c0, fr * (1 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ]):
        inside = (ro >= 0) & (ro < side) & (co >= 0) & (co < side)
        idx[:, k] = np.where(inside, ro * side + co, 0)
        w[:, k] = np.where(inside, wk, 0.0)
    return idx, w


def _apply_rotation(x_cols: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = w[:, 0, None] * x_cols[idx[:, 0]]
    for k in range(1, 4):
        out += w[:, k, None] * x_cols[idx[:, k]]
    return np.clip(out, 0.0, 1.0)


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate one (side, side) image about its center, bilinear with zero
    padding, output clamped to [0, 1]."""
    if not np.isfinite(angle_deg):
        raise ValueError(f"angle must be finite, got {angle_deg}")
    side = img.shape[0]
    if img.shape != (side, side):
        raise ValueError(f"expected square image, got {img.shape}")
    idx, w = _rotation_map(angle_deg, side)
    return _apply_rotation(img.reshape(side * side, 1), idx, w).reshape(side, side)


@dataclass
class Task:
    """One task of a stream. Data access goes through the stored transform
    so batches materialize lazily against the shared base arrays; the
    training split of the active task can be materialized once to make
    per-batch access a plain column slice."""
    index: int
    kind: str                         # identity | permute | rotate | subset
    train_x: np.ndarray               # base (pixels, n) before transform
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    permutation: np.ndarray | None = None
    angle_deg: float | None = None
    digits: tuple | None = None
    cache_test: bool = False
    _rot_map: tuple | None = field(default=None, repr=False)
    _test_cache: tuple | None = field(default=None, repr=False)
    _train_cache: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_train(self) -> int:
        return self.train_y.size

    @property
    def n_test(self) -> int:
        return self.test_y.size

    def _cols(self, base: np.ndarray, sel) -> np.ndarray:
        if self.kind == "permute":
            return base[np.ix_(self.permutation, sel)].astype(
                np.float64, copy=False)
        cols = base[:, sel].astype(np.float64)
        if self.kind == "rotate":
            idx, w = self._rot_map
            return _apply_rotation(cols, idx, w)
        return cols

    def materialize_train(self, dtype=np.float64) -> None:
        """Cache the fully transformed training split (released by
        release_train); one task at a time keeps memory bounded. Stored
        column-major so shuffled batch slices copy contiguous columns."""
        if self._train_cache is None or self._train_cache.dtype != dtype:
            self._train_cache = np.asfortranarray(
                self._cols(self.train_x, np.arange(self.n_train)), dtype=dtype)

    def release_train(self) -> None:
        self._train_cache = None

    def train_cols(self, sel) -> tuple[np.ndarray, np.ndarray]:
        if self._train_cache is not None:
            return self._train_cache[:, sel], self.train_y[sel]
        return self._cols(self.train_x, sel), self.train_y[sel]

    def train_xy(self):
        return self.train_cols(np.arange(self.n_train))

    def test_xy(self):
        if not self.cache_test:
            sel = np.arange(self.n_test)
            return self._cols(self.test_x, sel), self.test_y[sel]
        if self._test_cache is None:
            sel = np.arange(self.n_test)
            self._test_cache = (self._cols(self.test_x, sel), self.test_y[sel])
        return self._test_cache


@dataclass
class TaskStream:
    benchmark: str
    label_space_size: int
    seed: int
    tasks: list[Task]

    def __len__(self) -> int:
        return len(self.tasks)


def build_stream(benchmark: str, n_tasks: int, seed: int,
                 train, test) -> TaskStream:
    """Assemble a domain-incremental stream from one loaded dataset.

    permuted: task 0 is the identity, later tasks get fresh seeded pixel
    permutations shared by train and test. rotated: task t rotates by
    20*t degrees. binary_split: task t holds digits (2t, 2t+1) relabeled
    to {0, 1}; at most 5 tasks.
    """
    if benchmark not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {benchmark!r}")
    if n_tasks < 1:
        raise ValueError(f"need at least one task, got {n_tasks}")
    cache_test = n_tasks <= 16  # re-materialize on the fly for long streams
    train_x, train_y = train
    test_x, test_y = test
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    tasks = []

    if benchmark == "permuted":
        n_pix = train_x.shape[0]
        for t in range(n_tasks):
            if t == 0:
                tasks.append(Task(t, "identity", train_x, train_y,
                                  test_x, test_y, cache_test=cache_test))
            else:
                rng = np.random.default_rng(np.random.SeedSequence([seed, t]))
                perm = rng.permutation(n_pix)
                tasks.append(Task(t, "permute", train_x, train_y,
                                  test_x, test_y, permutation=perm,
                                  cache_test=cache_test))
        return TaskStream(benchmark, n_classes, seed, tasks)

    if benchmark == "rotated":
        side = int(round(np.sqrt(train_x.shape[0])))
        if side * side != train_x.shape[0]:
            raise ValueError("rotated benchmark needs square images")
        for t in range(n_tasks):
            angle = 20.0 * t
            if t == 0:
                tasks.append(Task(t, "identity", train_x, train_y,
                                  test_x, test_y, angle_deg=0.0,
                                  cache_test=cache_test))
            else:
                tasks.append(Task(t, "rotate", train_x, train_y,
                                  test_x, test_y, angle_deg=angle,
                                  _rot_map=_rotation_map(angle, side),
                                  cache_test=cache_test))
        return TaskStream(benchmark, n_classes, seed, tasks)

    # binary_split
    if n_tasks > 5:
        raise ValueError(
            f"binary_split supports at most 5 tasks, got {n_tasks}")
    for t in range(n_tasks):
        digits = (2 * t, 2 * t + 1)
        tr_sel = np.flatnonzero(np.isin(train_y, digits))
        te_sel = np.flatnonzero(np.isin(test_y, digits))
        tasks.append(Task(
            t, "identity",
            np.ascontiguousarray(train_x[:, tr_sel]),
            (train_y[tr_sel] % 2).astype(np.int64),
            np.ascontiguousarray(test_x[:, te_sel]),
            (test_y[te_sel] % 2).astype(np.int64),
            digits=digits, cache_test=cache_test))
    return TaskStream(benchmark, 2, seed, tasks)


def batches(task: Task, batch_size: int, epoch_seed=None):
    """Yield (x, y) minibatches covering the task's training data once.

    With an epoch_seed the sample order is a seeded shuffle; the final
    partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(task.n_train)
    if epoch_seed is not None:
        np.random.default_rng(epoch_seed).shuffle(order)
    for start in range(0, order.size, batch_size):
        sel = order[start:start + batch_size]
        yield task.train_cols(sel)
