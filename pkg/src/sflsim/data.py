"""Datasets, label-skew partitioning, batch-size allocation, and sampling.

Two skew schemes are provided. Quantity skew splits every class into
near-equal shards and deals a fixed number of shards to each client, so a
client sees at most that many distinct classes. Dirichlet skew draws a
per-client class-proportion vector and divides each class's samples across
clients according to the (per-class renormalized) proportions.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataFormatError
from .losses import LabelDistribution

Array = np.ndarray

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Feature matrix (rows = samples) with integer labels in [0, M)."""

    features: Array
    labels: Array
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if (counts == 0).any():
            missing = int(np.flatnonzero(counts == 0)[0])
            raise ValueError(f"class {missing} has no samples")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Partition:
    """Disjoint per-client index lists into a parent dataset."""

    client_indices: list[Array]
    scheme: dict
    seed: int | None = None

    def __post_init__(self) -> None:
        self.client_indices = [
            np.asarray(ix, dtype=np.int64) for ix in self.client_indices
        ]
        seen: set[int] = set()
        for k, ix in enumerate(self.client_indices):
            if ix.size == 0:
                raise ValueError(f"client {k} received no samples")
            if ix.min() < 0:
                raise ValueError("negative sample index")
            as_set = set(int(i) for i in ix)
            if len(as_set) != ix.size or seen & as_set:
                raise ValueError("client index lists overlap")
            seen |= as_set

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> dict[int, int]:
        return {k: ix.size for k, ix in enumerate(self.client_indices)}

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "seed": self.seed,
                "clients": {str(k): ix.tolist() for k, ix in enumerate(self.client_indices)},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> Partition:
        raw = json.loads(text)
        clients = raw["clients"]
        indices = [np.asarray(clients[str(k)]) for k in range(len(clients))]
        return cls(client_indices=indices, scheme=raw["scheme"], seed=raw.get("seed"))


@dataclass
class BatchPlan:
    """Per-participant minibatch sizes summing exactly to the global size."""

    sizes: dict[int, int]
    total: int

    def __post_init__(self) -> None:
        if sum(self.sizes.values()) != self.total:
            raise ValueError("per-client sizes must sum to the global batch size")
        if any(b < 1 for b in self.sizes.values()):
            raise ValueError("every participant needs at least one sample")

    @property
    def participants(self) -> list[int]:
        return sorted(self.sizes)


def synth_dataset(
    num_classes: int,
    dim: int,
    n_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Gaussian blobs with unit noise, one mean per class.

    For dim >= num_classes the means sit on scaled one-hot axes (mutually
    orthogonal); otherwise they are random unit directions.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if n_per_class < 1:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    if dim >= num_classes:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = class_separation
    else:
        raw = rng.normal(size=(num_classes, dim))
        means = class_separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    features = np.repeat(means, n_per_class, axis=0) + rng.normal(
        size=(num_classes * n_per_class, dim)
    )
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(features=features, labels=labels, num_classes=num_classes)


def load_dataset(
    path: str,
    fmt: str = "csv-labeled",
    labels_path: str | None = None,
    num_classes: int | None = None,
) -> Dataset:
    if fmt == "csv-labeled":
        return _load_csv(path, num_classes)
    if fmt == "idx-pair":
        if labels_path is None:
            raise ConfigError("idx-pair format needs a labels file")
        return _load_idx_pair(path, labels_path, num_classes)
    raise ConfigError(f"unknown dataset format {fmt!r}")


def _load_csv(path: str, num_classes: int | None) -> Dataset:
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        if len(header) < 2 or header[-1] != "label":
            raise DataFormatError(f"{path}: header must end with a 'label' column")
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {width + 1} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row[:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if label < 0:
                raise DataFormatError(f"{path}: line {lineno}: negative label")
            labels.append(label)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    label_arr = np.asarray(labels, dtype=np.int64)
    m = num_classes if num_classes is not None else int(label_arr.max()) + 1
    if label_arr.max() >= m:
        raise DataFormatError(
            f"{path}: label {int(label_arr.max())} out of range for {m} classes"
        )
    try:
        return Dataset(features=np.asarray(rows), labels=label_arr, num_classes=m)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def save_dataset_csv(dataset: Dataset, path: str) -> None:
    """Write the CSV form; float repr round-trips values bit-exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


_IDX_DTYPE_UBYTE = 0x08


def _read_idx(path: str) -> Array:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated idx header")
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", blob[:4])
    if zero1 != 0 or zero2 != 0:
        raise DataFormatError(f"{path}: bad idx magic at offset 0")
    if dtype != _IDX_DTYPE_UBYTE:
        raise DataFormatError(f"{path}: unsupported idx dtype 0x{dtype:02x}")
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise DataFormatError(f"{path}: truncated idx dimensions")
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    expected = int(np.prod(dims)) if dims else 0
    body = np.frombuffer(blob, dtype=np.uint8, offset=header_end)
    if body.size != expected:
        raise DataFormatError(
            f"{path}: payload has {body.size} bytes at offset {header_end}, expected {expected}"
        )
    return body.reshape(dims)


def _load_idx_pair(
    features_path: str, labels_path: str, num_classes: int | None
) -> Dataset:
    pixels = _read_idx(features_path)
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be 1-D")
    if pixels.ndim < 2:
        raise DataFormatError(f"{features_path}: features need at least 2 dims")
    if pixels.shape[0] != labels.shape[0]:
        raise DataFormatError("feature/label sample counts differ")
    flat = pixels.reshape(pixels.shape[0], -1).astype(np.float64) / 255.0
    label_arr = labels.astype(np.int64)
    m = num_classes if num_classes is not None else int(label_arr.max()) + 1
    if label_arr.max() >= m:
        raise DataFormatError(
            f"{labels_path}: label {int(label_arr.max())} out of range for {m} classes"
        )
    try:
        return Dataset(features=flat, labels=label_arr, num_classes=m)
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None


def partition_quantity_skew(
    dataset: Dataset, num_clients: int, alpha: int, seed: int
) -> Partition:
    """Deal class shards so each client holds at most alpha classes.

    Every class is split into ceil(K * alpha / M) near-equal shards; a
    random selection of K * alpha shards is dealt round-robin so every
    client receives exactly alpha shards.
    """
    m = dataset.num_classes
    if not 1 <= alpha <= m:
        raise ValueError(f"alpha must lie in [1, {m}]")
    if num_clients < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    shards_per_class = -(-num_clients * alpha // m)  # ceil
    pool: list[Array] = []
    for c in range(m):
        class_idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        pool.extend(np.array_split(class_idx, shards_per_class))
    order = rng.permutation(len(pool))
    assigned: list[list[Array]] = [[] for _ in range(num_clients)]
    for i in range(num_clients * alpha):
        assigned[i % num_clients].append(pool[order[i]])
    client_indices = []
    for k, shards in enumerate(assigned):
        merged = np.sort(np.concatenate(shards)) if shards else np.zeros(0, dtype=np.int64)
        if merged.size == 0:
            raise ConfigError(
                f"client {k} drew only empty shards; dataset too small for "
                f"K={num_clients}, alpha={alpha}"
            )
        client_indices.append(merged)
    return Partition(
        client_indices=client_indices,
        scheme={"kind": "quantity", "alpha": alpha},
        seed=seed,
    )


def partition_dirichlet_skew(
    dataset: Dataset,
    num_clients: int,
    beta: float,
    seed: int,
    max_retries: int = 100,
) -> Partition:
    """Split each class across clients by Dirichlet-drawn proportions.

    Per-class proportions are renormalized over clients, converted to
    sample counts by largest-remainder rounding, and draws leaving any
    client empty are retried (bounded).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if num_clients < 1:
        raise ValueError("need at least one client")
    m = dataset.num_classes
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        proportions = rng.dirichlet(np.full(m, beta), size=num_clients)  # (K, M)
        buckets: list[list[Array]] = [[] for _ in range(num_clients)]
        for c in range(m):
            class_idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            counts = _largest_remainder(proportions[:, c], class_idx.size)
            start = 0
            for k, cnt in enumerate(counts):
                if cnt:
                    buckets[k].append(class_idx[start : start + cnt])
                start += cnt
        if all(b for b in buckets):
            if attempt:
                log.info("dirichlet partition succeeded after %d redraws", attempt)
            return Partition(
                client_indices=[np.sort(np.concatenate(b)) for b in buckets],
                scheme={"kind": "dirichlet", "beta": beta},
                seed=seed,
            )
    raise ConfigError(
        f"dirichlet partition left a client empty {max_retries} times; "
        f"raise beta or the dataset size"
    )


def _largest_remainder(weights: Array, total: int) -> Array:
    """Integer counts proportional to weights, summing exactly to total."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    ideal = w * total
    counts = np.floor(ideal).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # ties broken toward the lower index for determinism
        order = np.lexsort((np.arange(w.size), -(ideal - counts)))
        counts[order[:short]] += 1
    return counts


def allocate_minibatch_sizes(
    local_sizes: Mapping[int, int], batch_size: int
) -> BatchPlan:
    """Split the global batch across participants in proportion to data size.

    Largest-remainder rounding keeps the sum exact; every participant gets
    at least one sample (stolen from the largest-surplus clients when the
    proportional share rounds to zero).
    """
    ids = sorted(local_sizes)
    if not ids:
        raise ValueError("no participants")
    if any(local_sizes[k] < 1 for k in ids):
        raise ValueError("local data sizes must be positive")
    if batch_size < len(ids):
        raise ValueError(
            f"batch size {batch_size} cannot cover {len(ids)} participants"
        )
    sizes = np.array([local_sizes[k] for k in ids], dtype=np.float64)
    ideal = sizes * batch_size / sizes.sum()
    counts = np.floor(ideal).astype(np.int64)
    short = batch_size - int(counts.sum())
    if short:
        order = np.lexsort((np.arange(len(ids)), -(ideal - counts)))
        counts[order[:short]] += 1
    while (counts == 0).any():
        needy = int(np.flatnonzero(counts == 0)[0])
        surplus = np.where(counts >= 2, counts - ideal, -np.inf)
        donor = int(np.argmax(surplus))
        counts[donor] -= 1
        counts[needy] += 1
    return BatchPlan(
        sizes={k: int(c) for k, c in zip(ids, counts)}, total=batch_size
    )


def estimate_label_distribution(labels: Array, num_classes: int) -> LabelDistribution:
    """Empirical class frequencies with the raw counts retained."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot estimate a distribution from no labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return LabelDistribution.from_counts(np.bincount(labels, minlength=num_classes))


class MinibatchSampler:
    """Epoch-shuffled without-replacement sampler over a fixed index set.

    Each epoch is a fresh permutation of the indices; draws continue into
    the next epoch when the current one runs out, so every index appears
    exactly once per epoch.
    """

    def __init__(self, indices: Array, rng: np.random.Generator):
        self._indices = np.asarray(indices, dtype=np.int64)
        if self._indices.size == 0:
            raise ValueError("sampler needs a non-empty index set")
        self._rng = rng
        self._order = rng.permutation(self._indices)
        self._pos = 0

    @property
    def size(self) -> int:
        return self._indices.size

    def draw(self, count: int) -> Array:
        if count < 1:
            raise ValueError("draw count must be positive")
        if count > self._indices.size:
            raise ValueError(
                f"cannot draw {count} samples without replacement from "
                f"{self._indices.size}"
            )
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            take = min(count - filled, self._order.size - self._pos)
            out[filled : filled + take] = self._order[self._pos : self._pos + take]
            self._pos += take
            filled += take
            if self._pos == self._order.size:
                self._order = self._rng.permutation(self._indices)
                self._pos = 0
        return out


def sample_minibatch(
    dataset: Dataset, sampler: MinibatchSampler, count: int
) -> tuple[Array, Array]:
    idx = sampler.draw(count)
    return dataset.features[idx], dataset.labels[idx]
