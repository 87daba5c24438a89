"""Datasets, synthetic blobs, CSV/IDX loading, splits, partitions and batching.

Labels are 0-based integers in ``[0, n_classes)``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

PARTITION_MODES = ("uniform", "stratified")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise DataError(f"{self.name}: features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{self.name}: {x.shape[0]} feature rows but labels shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            raise DataError(f"{self.name}: labels must be integers")
        y = y.astype(np.int64)
        if self.n_classes < 1:
            raise DataError(f"{self.name}: n_classes must be >= 1")
        bad = (y < 0) | (y >= self.n_classes)
        if bad.any():
            i = int(np.argmax(bad))
            raise DataError(f"{self.name}: label {y[i]} at row {i} outside [0, {self.n_classes - 1}]")
        if not np.all(np.isfinite(x)):
            raise DataError(f"{self.name}: features contain NaN or Inf")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.features[indices], self.labels[indices], self.n_classes, name or self.name)


# ------------------------------------------------------------------ partition


@dataclass
class Partition:
    """Fixed assignment of every training sample to one of ``K`` subsets.

    ``extras[k]`` holds samples from other subsets lent to subset ``k`` when an
    overlap fraction is configured; the base assignment stays disjoint.
    """

    assignment: np.ndarray
    K: int
    seed: int
    mode: str = "uniform"
    extras: list = field(default_factory=list)

    def base_indices(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def subset_indices(self, k) -> np.ndarray:
        base = self.base_indices(k)
        if self.extras and len(self.extras[k]):
            return np.sort(np.concatenate([base, self.extras[k]]))
        return base

    def sizes(self) -> list:
        return [int((self.assignment == k).sum()) for k in range(self.K)]


def partition(data, K, seed, mode="uniform", overlap=0.0) -> Partition:
    """Shuffle under ``seed`` and deal samples round-robin into ``K`` subsets.

    In stratified mode each class is dealt separately, continuing the
    round-robin where the previous class stopped, so both per-class and total
    subset sizes differ by at most one.
    """
    N = len(data)
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if K > N:
        raise ConfigurationError(f"cannot split {N} samples into K={K} subsets")
    if mode not in PARTITION_MODES:
        raise ConfigurationError(f"partition mode must be one of {PARTITION_MODES}, got {mode!r}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigurationError(f"overlap must lie in [0, 1), got {overlap}")
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 101])
    assignment = np.empty(N, dtype=np.int64)
    if mode == "uniform":
        order = rng.permutation(N)
        assignment[order] = np.arange(N) % K
    else:
        offset = 0
        for c in range(data.n_classes):
            members = np.flatnonzero(data.labels == c)
            members = members[rng.permutation(len(members))]
            assignment[members] = (offset + np.arange(len(members))) % K
            offset = (offset + len(members)) % K
    extras = []
    if overlap > 0 and K > 1:
        for k in range(K):
            outside = np.flatnonzero(assignment != k)
            n_extra = min(len(outside), int(round(overlap * (assignment == k).sum())))
            extras.append(np.sort(rng.choice(outside, size=n_extra, replace=False)))
    return Partition(assignment, K, seed, mode, extras)


def full_data_subsets(N, K) -> list:
    """Every student sees the whole training set (sub-set learning switched off)."""
    return [np.arange(N) for _ in range(K)]


def holdout_split(data: Dataset, fraction, seed):
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"holdout fraction must lie in (0, 1), got {fraction}")
    N = len(data)
    n_hold = int(round(fraction * N))
    perm = np.random.default_rng([seed, 202]).permutation(N)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return data.subset(train, f"{data.name}-train"), data.subset(hold, f"{data.name}-holdout")


def batches(indices, batch_size, seed, epoch, stream=0) -> list:
    """Shuffle ``indices`` with a generator keyed by ``(seed, epoch, stream)``
    and cut into batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ConfigurationError("cannot batch an empty subset")
    order = indices[np.random.default_rng([seed, epoch, stream, 303]).permutation(indices.size)]
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


# ----------------------------------------------------------------- synthetic


def blob_means(n_classes, dim, radius):
    """Class centres: scaled basis vectors when ``n_classes <= dim``, else a circle."""
    means = np.zeros((n_classes, dim))
    if n_classes <= dim:
        means[np.arange(n_classes), np.arange(n_classes)] = radius
    else:
        if dim < 2:
            raise ConfigurationError("need dim >= 2 to place more classes than dimensions")
        angle = 2 * np.pi * np.arange(n_classes) / n_classes
        means[:, 0] = radius * np.cos(angle)
        means[:, 1] = radius * np.sin(angle)
    return means


def synth_blobs(n_per_class, n_classes, dim, spread, seed, radius=3.5, name="blobs") -> Dataset:
    """Isotropic Gaussian clusters (std ``spread``) around fixed class centres.

    Centres depend only on ``(n_classes, dim, radius)``, so sets drawn with
    different seeds share one underlying distribution.
    """
    if min(n_per_class, n_classes, dim) < 1:
        raise ConfigurationError("n_per_class, n_classes and dim must all be >= 1")
    if not spread > 0:
        raise ConfigurationError(f"spread must be > 0, got {spread}")
    rng = np.random.default_rng(seed)
    means = blob_means(n_classes, dim, radius)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], n_classes, name)


# ------------------------------------------------------------------- loaders


def load_csv(path, label_column="label", n_classes=None, name=None) -> Dataset:
    """Read a header-row CSV; every column except the label column is a feature.

    ``label_column`` is a header name or a 0-based column position.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", 1) from None
        if isinstance(label_column, int) or str(label_column).isdigit():
            col = int(label_column)
            if not 0 <= col < len(header):
                raise ParseError(f"label column {col} out of range for {len(header)} columns", 1)
        else:
            if label_column not in header:
                raise ParseError(f"label column {label_column!r} not in header {header}", 1)
            col = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", lineno)
            values = []
            for j, cell in enumerate(row):
                if j == col:
                    try:
                        labels.append(int(cell))
                    except ValueError:
                        raise ParseError(f"label {cell!r} is not an integer", lineno, header[j]) from None
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", lineno, header[j]) from None
            feats.append(values)
    if not labels:
        raise ParseError("no data rows", 2)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        i = int(np.argmax(labels < 0))
        raise DataError(f"label {labels[i]} on line {i + 2} is negative")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    elif labels.max() >= n_classes:
        i = int(np.argmax(labels >= n_classes))
        raise DataError(f"label {labels[i]} on line {i + 2} outside [0, {n_classes - 1}]")
    return Dataset(np.asarray(feats, dtype=np.float64).reshape(len(labels), -1), labels, n_classes,
                   name or path.stem)


def save_csv(data: Dataset, path, label_column="label"):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(data.dim)] + [label_column])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expected_magic):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header at byte 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: magic number 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{path}: truncated dimension header, need {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) != need:
        raise ParseError(f"{path}: payload ends at byte {len(raw)}, dimensions {dims} require {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None, name=None) -> Dataset:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    elif labels.size and labels.max() >= n_classes:
        i = int(np.argmax(labels >= n_classes))
        raise DataError(f"label {labels[i]} at byte {8 + i} outside [0, {n_classes - 1}]")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels, n_classes, name or Path(images_path).stem)


def save_idx(images, labels, images_path, labels_path):
    """Write uint8 arrays as an IDX image/label pair (images are N x rows x cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())
