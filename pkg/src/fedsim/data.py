"""Datasets, synthetic data generation, and client partition schemes.

A partition maps a dataset onto ``M`` clients as disjoint index sets whose
union covers every example.  Three schemes are provided:

* ``iid`` — a seeded random permutation split into near-equal shards,
* ``dirichlet`` — per class, client proportions drawn from Dirichlet(alpha)
  and the class's examples assigned multinomially,
* ``shards`` — each client holds a fixed fraction of the classes; the
  class-to-client assignment is balanced so every class is held somewhere.

Each shard owns a persistent seeded mini-batch stream (shuffled epoch
cycling), so a single-client federation consumes batches exactly like a
centralized loop with the same seed.
"""

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .seeding import derive_rng

__all__ = [
    "Dataset",
    "PartitionScheme",
    "PartitionSpec",
    "ClientShard",
    "load_csv",
    "save_csv",
    "gen_synthetic",
    "partition_iid",
    "partition_dirichlet",
    "partition_shards",
    "partition",
    "write_manifest",
    "read_manifest",
]


@dataclass
class Dataset:
    """Feature matrix plus integer labels in [0, class_count)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if len(self.labels) == 0:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)


def load_csv(path) -> Dataset:
    """Read a dataset from CSV with header ``f0,...,fD,label``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if not header or header[-1] != "label":
            raise DataError(f"{path}: last header column must be 'label'")
        n_features = len(header) - 1
        if n_features < 1:
            raise DataError(f"{path}: no feature columns")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_features + 1:
                raise DataError(f"{path}:{lineno}: expected {n_features + 1} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric feature: {exc}") from None
            try:
                labels.append(int(row[-1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer label {row[-1]!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return Dataset(np.asarray(rows), labels, int(labels.max()) + 1)


def save_csv(dataset: Dataset, path) -> None:
    """Write a dataset in the ``load_csv`` format (lossless float round-trip)."""
    feats = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for row, label in zip(feats, dataset.labels):
            writer.writerow([repr(v) for v in row] + [int(label)])


def gen_synthetic(class_count, dims, n_per_class, class_separation, seed) -> Dataset:
    """Gaussian blobs with unit covariance, class means on a scaled circle.

    For ``dims >= 2`` the means sit evenly on a circle of radius
    ``class_separation`` in the first two dimensions; for ``dims == 1`` they
    sit on a 1-d lattice with that spacing.  Deterministic per seed.
    """
    if class_count < 2:
        raise DataError(f"need at least 2 classes, got {class_count}")
    if dims < 1 or n_per_class < 1:
        raise DataError("dims and n_per_class must be positive")
    rng = derive_rng(seed, "synthetic")
    means = np.zeros((class_count, dims))
    if dims == 1:
        means[:, 0] = class_separation * (np.arange(class_count) - (class_count - 1) / 2.0)
    else:
        angles = 2.0 * np.pi * np.arange(class_count) / class_count
        means[:, 0] = class_separation * np.cos(angles)
        means[:, 1] = class_separation * np.sin(angles)
    features = np.concatenate(
        [rng.normal(size=(n_per_class, dims)) + means[k] for k in range(class_count)]
    )
    labels = np.repeat(np.arange(class_count, dtype=np.int64), n_per_class)
    return Dataset(features, labels, class_count)


class PartitionScheme(enum.Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"
    SHARDS = "shards"


@dataclass
class PartitionSpec:
    scheme: PartitionScheme
    client_count: int
    seed: int
    alpha: float = 0.3  # dirichlet concentration
    class_fraction: float = 0.2  # shards: fraction of classes per client

    def __post_init__(self):
        if self.client_count < 1:
            raise DataError(f"client_count must be >= 1, got {self.client_count}")
        if self.scheme is PartitionScheme.DIRICHLET and self.alpha <= 0:
            raise DataError(f"dirichlet alpha must be > 0, got {self.alpha}")
        if self.scheme is PartitionScheme.SHARDS and not 0.0 < self.class_fraction <= 1.0:
            raise DataError(f"class_fraction must lie in (0, 1], got {self.class_fraction}")


@dataclass
class ClientShard:
    """One client's slice of the dataset plus its private batch stream.

    ``indices`` is kept sorted; batch order comes entirely from the shard's
    own derived RNG.  The stream persists across rounds: when fewer than a
    full batch remain in the current shuffled pass, a fresh pass begins (the
    remainder is dropped).  A batch size of at least the shard size yields the
    whole shard.
    """

    client_id: int
    dataset: Dataset
    indices: np.ndarray
    seed: int
    momentum: object = None  # persisted velocity buffer for maintained local momentum
    _rng: np.random.Generator = field(default=None, repr=False)
    _order: np.ndarray = field(default=None, repr=False)
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        self.indices = np.sort(np.asarray(self.indices, dtype=np.int64))
        if len(self.indices) == 0:
            raise DataError(f"client {self.client_id}: empty shard")

    def __len__(self):
        return len(self.indices)

    def next_batch(self, batch_size: int) -> np.ndarray:
        """Dataset indices of the next mini-batch."""
        if batch_size >= len(self.indices):
            return self.indices.copy()
        if self._rng is None:
            self._rng = derive_rng(self.seed, "batch", self.client_id)
            self._order = self.indices[self._rng.permutation(len(self.indices))]
        if self._cursor + batch_size > len(self._order):
            self._order = self.indices[self._rng.permutation(len(self.indices))]
            self._cursor = 0
        batch = self._order[self._cursor : self._cursor + batch_size]
        self._cursor += batch_size
        return batch

    def take(self, batch_indices):
        ds = self.dataset
        return ds.features[batch_indices], ds.labels[batch_indices]

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.dataset.labels[self.indices], minlength=self.dataset.class_count)


def _make_shards(dataset, per_client_indices, seed):
    return [
        ClientShard(m, dataset, idx, seed)
        for m, idx in enumerate(per_client_indices)
    ]


def partition_iid(dataset: Dataset, client_count: int, seed: int):
    """Random permutation split into near-equal shards (sizes differ by <= 1)."""
    n = len(dataset)
    if client_count > n:
        raise DataError(f"cannot split {n} examples across {client_count} clients")
    rng = derive_rng(seed, "partition-iid")
    perm = rng.permutation(n)
    return _make_shards(dataset, np.array_split(perm, client_count), seed)


def partition_dirichlet(dataset: Dataset, client_count: int, alpha: float, seed: int):
    """Label-skewed split: per class, client proportions ~ Dirichlet(alpha).

    Degenerate draws leaving a client empty are repaired by moving one example
    at a time from the currently largest shard.
    """
    if alpha <= 0:
        raise DataError(f"dirichlet alpha must be > 0, got {alpha}")
    n = len(dataset)
    if client_count > n:
        raise DataError(f"cannot split {n} examples across {client_count} clients")
    rng = derive_rng(seed, "partition-dirichlet")
    buckets = [[] for _ in range(client_count)]
    for k in range(dataset.class_count):
        class_idx = np.flatnonzero(dataset.labels == k)
        if len(class_idx) == 0:
            continue
        class_idx = rng.permutation(class_idx)
        proportions = rng.dirichlet(np.full(client_count, alpha))
        counts = rng.multinomial(len(class_idx), proportions)
        offsets = np.cumsum(counts)[:-1]
        for m, part in enumerate(np.split(class_idx, offsets)):
            buckets[m].extend(part.tolist())
    # repair empty shards
    sizes = [len(b) for b in buckets]
    while min(sizes) == 0:
        src = int(np.argmax(sizes))
        dst = sizes.index(0)
        buckets[dst].append(buckets[src].pop())
        sizes = [len(b) for b in buckets]
    return _make_shards(dataset, [np.asarray(b, dtype=np.int64) for b in buckets], seed)


def partition_shards(dataset: Dataset, client_count: int, class_fraction: float, seed: int):
    """Assign each client exactly ceil(class_fraction * K) classes.

    Classes are dealt greedily to the clients holding the fewest copies so
    far (random tie-breaks), which guarantees every class is held by at least
    one client whenever M * classes_per_client >= K.  Each class's examples
    are then split near-equally among its holders.
    """
    if not 0.0 < class_fraction <= 1.0:
        raise DataError(f"class_fraction must lie in (0, 1], got {class_fraction}")
    k = dataset.class_count
    classes_per_client = math.ceil(class_fraction * k)
    if client_count * classes_per_client < k:
        raise DataError(
            f"infeasible shards assignment: {client_count} clients x "
            f"{classes_per_client} classes < {k} classes"
        )
    rng = derive_rng(seed, "partition-shards")
    hold_count = np.zeros(k, dtype=np.int64)
    holders = [[] for _ in range(k)]  # class -> client ids
    for m in range(client_count):
        priority = rng.permutation(k)
        ranked = sorted(range(k), key=lambda c: (hold_count[c], priority[c]))
        for c in ranked[:classes_per_client]:
            hold_count[c] += 1
            holders[c].append(m)
    buckets = [[] for _ in range(client_count)]
    for c in range(k):
        class_idx = np.flatnonzero(dataset.labels == c)
        owners = holders[c]
        if len(class_idx) < len(owners):
            raise DataError(
                f"class {c} has {len(class_idx)} examples for {len(owners)} holders"
            )
        class_idx = rng.permutation(class_idx)
        for owner, part in zip(owners, np.array_split(class_idx, len(owners))):
            buckets[owner].extend(part.tolist())
    return _make_shards(dataset, [np.asarray(b, dtype=np.int64) for b in buckets], seed)


def partition(dataset: Dataset, spec: PartitionSpec):
    """Dispatch on the partition scheme."""
    if spec.scheme is PartitionScheme.IID:
        return partition_iid(dataset, spec.client_count, spec.seed)
    if spec.scheme is PartitionScheme.DIRICHLET:
        return partition_dirichlet(dataset, spec.client_count, spec.alpha, spec.seed)
    return partition_shards(dataset, spec.client_count, spec.class_fraction, spec.seed)


def write_manifest(shards, path) -> None:
    """Reproducibility audit: CSV rows ``client_id,example_index``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "example_index"])
        for shard in shards:
            for idx in shard.indices:
                writer.writerow([shard.client_id, int(idx)])


def read_manifest(path):
    """Inverse of write_manifest: {client_id: sorted index array}."""
    assignment = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["client_id", "example_index"]:
            raise DataError(f"{path}: not a partition manifest")
        for lineno, row in enumerate(reader, start=2):
            try:
                cid, idx = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed row") from None
            assignment.setdefault(cid, []).append(idx)
    return {cid: np.asarray(sorted(v), dtype=np.int64) for cid, v in assignment.items()}
