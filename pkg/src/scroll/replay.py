"""Bounded replay buffers with moment-matching exemplar selection.

The buffer keeps a class-balanced subset of the stream under a fixed
total capacity. Four strategies are supported:

* ``exemplar`` -- greedy moment matching: per class, samples are ordered
  by how well the mean of the selected prefix tracks the running mean of
  everything observed for that class; the stored set is a prefix of that
  ordering. When whole classes arrive in single batches the final
  contents are independent of class order.
* ``reservoir`` -- uniform reservoir sampling per class.
* ``nearest`` / ``outlier`` -- keep the samples closest to / furthest
  from the class running mean.
"""

from __future__ import annotations

import csv
import hashlib
import json

import numpy as np

from ._binio import Reader, Writer
from ._seeding import seeded_rng
from .errors import ConfigError, FormatError

STRATEGIES = ("exemplar", "reservoir", "nearest", "outlier")

BUFFER_MAGIC = b"SCBF"
BUFFER_VERSION = 1


class RunningClassMean:
    """Exact streaming mean of every sample observed per class."""

    def __init__(self):
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, int] = {}

    def add_batch(self, vectors: np.ndarray, labels: np.ndarray) -> None:
        for y in np.unique(labels):
            mask = labels == y
            y = int(y)
            if y in self._sums:
                self._sums[y] = self._sums[y] + vectors[mask].sum(axis=0)
                self._counts[y] += int(mask.sum())
            else:
                self._sums[y] = vectors[mask].sum(axis=0)
                self._counts[y] = int(mask.sum())

    def mean(self, y: int) -> np.ndarray:
        return self._sums[y] / self._counts[y]

    def count(self, y: int) -> int:
        return self._counts.get(y, 0)

    def classes(self) -> list[int]:
        return sorted(self._sums)

    def copy(self) -> "RunningClassMean":
        out = RunningClassMean()
        out._sums = {y: s.copy() for y, s in self._sums.items()}
        out._counts = dict(self._counts)
        return out


def herding_order(candidates, target_mean) -> list[int]:
    """Greedy moment-matching order over a candidate pool.

    At each step the candidate whose inclusion brings the mean of the
    selected set closest (Euclidean) to ``target_mean`` is appended; ties
    go to the smallest candidate index. Returns a permutation of
    ``range(len(candidates))``.
    """
    pool = np.asarray(candidates, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ConfigError("herding needs a non-empty 2-d candidate pool")
    target = np.asarray(target_mean, dtype=np.float64)
    n = pool.shape[0]
    remaining = np.arange(n)
    chosen_sum = np.zeros(pool.shape[1])
    order: list[int] = []
    for step in range(1, n + 1):
        trial_means = (chosen_sum + pool[remaining]) / step
        dists = np.linalg.norm(target - trial_means, axis=1)
        pick = remaining[int(np.argmin(dists))]
        order.append(int(pick))
        chosen_sum += pool[pick]
        remaining = remaining[remaining != pick]
    return order


class _ClassStore:
    """Stored rows for one class, kept in selection order."""

    __slots__ = ("indices", "vectors")

    def __init__(self):
        self.indices: list[int] = []
        self.vectors: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.indices)

    def truncate(self, quota: int) -> None:
        del self.indices[quota:]
        del self.vectors[quota:]

    def replace(self, indices: list[int], vectors: list[np.ndarray]) -> None:
        self.indices = indices
        self.vectors = vectors

    def copy(self) -> "_ClassStore":
        out = _ClassStore()
        out.indices = list(self.indices)
        out.vectors = [v.copy() for v in self.vectors]
        return out


class ReplayBuffer:
    """Fixed-capacity, class-balanced sample store.

    Capacity is split evenly over the classes observed so far: with C
    classes each gets ``capacity // C`` slots and the lowest
    ``capacity % C`` class ids get one extra, so per-class counts never
    differ by more than one. When new classes push an existing class over
    its shrunken quota, the tail of its selection order is dropped. If
    more classes appear than there are slots, the classes left without a
    slot are recorded in ``warnings`` and hold nothing.
    """

    def __init__(self, capacity: int, strategy: str = "exemplar", seed: int = 0):
        if capacity < 0:
            raise ConfigError(f"capacity must be >= 0, got {capacity}")
        if strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown buffer strategy {strategy!r}, expected one of {STRATEGIES}"
            )
        self.capacity = int(capacity)
        self.strategy = strategy
        self.seed = int(seed)
        self.stats = RunningClassMean()
        self.warnings: list[str] = []
        self._warned: set[int] = set()
        self._stores: dict[int, _ClassStore] = {}
        self._reservoir_seen: dict[int, int] = {}
        self._rng = seeded_rng(seed, 77)

    # -- content views -------------------------------------------------

    def total_stored(self) -> int:
        return sum(len(s) for s in self._stores.values())

    def per_class_counts(self) -> dict[int, int]:
        return {y: len(s) for y, s in sorted(self._stores.items()) if len(s) > 0}

    def stored_indices(self, y: int) -> list[int]:
        return list(self._stores[y].indices) if y in self._stores else []

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored rows as (vectors, labels), classes in ascending order."""
        vecs: list[np.ndarray] = []
        labs: list[int] = []
        for y in sorted(self._stores):
            store = self._stores[y]
            vecs.extend(store.vectors)
            labs.extend([y] * len(store))
        if not vecs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.array(vecs), np.array(labs, dtype=np.int64)

    def content_digest(self) -> str:
        """Stable fingerprint of which samples are stored, for provenance."""
        h = hashlib.sha256()
        for y in sorted(self._stores):
            h.update(str(y).encode())
            h.update(np.array(self._stores[y].indices, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def moment_distances(self, table) -> dict[int, float]:
        """Per class: distance between the stored mean and the table's class mean.

        Classes with nothing stored are absent from the result.
        """
        out: dict[int, float] = {}
        for y in sorted(self._stores):
            store = self._stores[y]
            if not store.vectors:
                continue
            stored_mean = np.mean(store.vectors, axis=0)
            class_mean = table.vectors[table.labels == y].mean(axis=0)
            out[y] = float(np.linalg.norm(stored_mean - class_mean))
        return out

    # -- updates ---------------------------------------------------------

    def _quotas(self) -> dict[int, int]:
        classes = self.stats.classes()
        if not classes:
            return {}
        base, extra = divmod(self.capacity, len(classes))
        return {y: base + (1 if rank < extra else 0) for rank, y in enumerate(classes)}

    def update(self, vectors, labels, indices) -> "ReplayBuffer":
        """Fold one stream batch into the buffer.

        ``vectors`` are the batch rows, ``labels`` their class ids and
        ``indices`` their original dataset positions.
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if vectors.ndim != 2 or not (len(vectors) == len(labels) == len(indices)):
            raise ConfigError("batch arrays disagree in length")
        self.stats.add_batch(vectors, labels)
        quotas = self._quotas()
        arrivals = {int(y): np.flatnonzero(labels == y) for y in np.unique(labels)}
        touched = set(arrivals) | set(self._stores)
        for y in sorted(touched):
            quota = quotas.get(y, 0)
            if quota == 0:
                if self.stats.count(y) > 0 and y not in self._warned:
                    self._warned.add(y)
                    self.warnings.append(
                        f"class {y} exceeds the capacity budget and holds no samples"
                    )
                if y in self._stores:
                    self._stores[y].truncate(0)
                continue
            store = self._stores.setdefault(y, _ClassStore())
            rows = arrivals.get(y)
            if rows is None:
                new_idx: list[int] = []
                new_vec: list[np.ndarray] = []
            else:
                new_idx = [int(i) for i in indices[rows]]
                new_vec = [vectors[i].copy() for i in rows]
            if self.strategy == "exemplar":
                self._update_exemplar(store, y, new_idx, new_vec, quota)
            elif self.strategy == "reservoir":
                self._update_reservoir(store, y, new_idx, new_vec, quota)
            else:
                self._update_by_distance(store, y, new_idx, new_vec, quota)
        return self

    def _pooled(self, store: _ClassStore, new_idx, new_vec):
        # Pool ordered by original dataset index, so tie-breaking inside the
        # selection rules cannot depend on arrival order.
        pairs = sorted(
            zip(store.indices + new_idx, store.vectors + new_vec), key=lambda p: p[0]
        )
        idx = [p[0] for p in pairs]
        vec = [p[1] for p in pairs]
        return idx, vec

    def _update_exemplar(self, store, y, new_idx, new_vec, quota) -> None:
        if not new_idx:
            store.truncate(quota)
            return
        idx, vec = self._pooled(store, new_idx, new_vec)
        order = herding_order(np.array(vec), self.stats.mean(y))
        keep = order[:quota]
        store.replace([idx[i] for i in keep], [vec[i] for i in keep])

    def _update_reservoir(self, store, y, new_idx, new_vec, quota) -> None:
        seen = self._reservoir_seen.get(y, 0)
        for i, v in zip(new_idx, new_vec):
            seen += 1
            if len(store) < quota:
                store.indices.append(i)
                store.vectors.append(v)
            else:
                j = int(self._rng.integers(0, seen))
                if j < quota and quota > 0:
                    store.indices[j] = i
                    store.vectors[j] = v
        self._reservoir_seen[y] = seen
        while len(store) > quota:
            j = int(self._rng.integers(0, len(store)))
            store.indices.pop(j)
            store.vectors.pop(j)

    def _update_by_distance(self, store, y, new_idx, new_vec, quota) -> None:
        idx, vec = self._pooled(store, new_idx, new_vec)
        if not idx:
            return
        dists = np.linalg.norm(np.array(vec) - self.stats.mean(y), axis=1)
        if self.strategy == "outlier":
            dists = -dists
        ranked = np.lexsort((np.array(idx), dists))[:quota]
        ranked = sorted(int(i) for i in ranked)
        store.replace([idx[i] for i in ranked], [vec[i] for i in ranked])

    def copy(self) -> "ReplayBuffer":
        out = ReplayBuffer(self.capacity, self.strategy, self.seed)
        out.stats = self.stats.copy()
        out.warnings = list(self.warnings)
        out._warned = set(self._warned)
        out._stores = {y: s.copy() for y, s in self._stores.items()}
        out._reservoir_seen = dict(self._reservoir_seen)
        out._rng = np.random.default_rng()
        out._rng.bit_generator.state = self._rng.bit_generator.state
        return out


def save_buffer(buf: ReplayBuffer, path) -> None:
    """Write a buffer checkpoint (magic ``SCBF``) with full restore state."""
    w = Writer()
    w.raw(BUFFER_MAGIC)
    classes = buf.stats.classes()
    w.pack(
        "HBQqI",
        BUFFER_VERSION,
        STRATEGIES.index(buf.strategy),
        buf.capacity,
        buf.seed,
        len(classes),
    )
    dim = 0
    for y in classes:
        if y in buf._stores and buf._stores[y].vectors:
            dim = buf._stores[y].vectors[0].shape[0]
            break
    w.pack("I", dim)
    for y in classes:
        store = buf._stores.get(y, _ClassStore())
        w.pack("IIQQ", y, len(store), buf.stats.count(y), buf._reservoir_seen.get(y, 0))
        w.array(buf.stats._sums[y], "<f8")
        w.array(np.array(store.indices, dtype=np.int64), "<i8")
        for v in store.vectors:
            w.array(v, "<f8")
    rng_state = json.dumps(buf._rng.bit_generator.state, sort_keys=True).encode()
    w.pack("I", len(rng_state))
    w.raw(rng_state)
    warn_blob = json.dumps(buf.warnings).encode()
    w.pack("I", len(warn_blob))
    w.raw(warn_blob)
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_buffer(path) -> ReplayBuffer:
    """Read back a checkpoint written by :func:`save_buffer`."""
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(BUFFER_MAGIC)
    version, strategy_tag, capacity, seed, n_classes = r.unpack("HBQqI", "buffer header")
    if version != BUFFER_VERSION:
        raise FormatError(f"unsupported buffer version {version}")
    if strategy_tag >= len(STRATEGIES):
        raise FormatError(f"unknown strategy tag {strategy_tag}")
    (dim,) = r.unpack("I", "vector dimension")
    buf = ReplayBuffer(int(capacity), STRATEGIES[strategy_tag], int(seed))
    for _ in range(n_classes):
        y, stored, seen, reservoir_seen = r.unpack("IIQQ", "class header")
        y = int(y)
        buf.stats._sums[y] = r.array("<f8", dim, "class sum").copy()
        buf.stats._counts[y] = int(seen)
        if reservoir_seen:
            buf._reservoir_seen[y] = int(reservoir_seen)
        store = _ClassStore()
        store.indices = [int(i) for i in r.array("<i8", stored, "stored indices")]
        store.vectors = [r.array("<f8", dim, "stored row").copy() for _ in range(stored)]
        buf._stores[y] = store
    (rng_len,) = r.unpack("I", "rng state length")
    buf._rng.bit_generator.state = json.loads(r.take(rng_len, "rng state"))
    (warn_len,) = r.unpack("I", "warnings length")
    buf.warnings = json.loads(r.take(warn_len, "warnings"))
    r.expect_end()
    return buf


def write_moment_csv(records, path) -> None:
    """Emit moment-distance sweep rows as ``class,strategy,seed,distance``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "strategy", "seed", "distance"])
        for rec in records:
            writer.writerow(
                [rec["class"], rec["strategy"], rec["seed"], repr(float(rec["distance"]))]
            )
