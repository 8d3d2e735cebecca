"""Online classifiers with order-independent sufficient statistics.

Two stage-one learners are provided. :class:`NccState` keeps one running
mean per class and classifies by nearest prototype. :class:`RidgeState`
accumulates the feature second-moment matrix and per-class feature sums,
from which a one-vs-all ridge head is solved on demand. Both states are
plain sums over the observed samples, so the final predictor depends only
on the multiset of data seen, never on arrival order or batching, and
updating one class never touches another class's statistics.
"""

from __future__ import annotations

import numpy as np
from numpy.linalg import LinAlgError as _NumpyLinAlgError
from scipy.linalg import cho_factor, cho_solve

from ._binio import Reader, Writer
from .errors import (
    ClassIdError,
    ConfigError,
    DataError,
    FormatError,
    LinAlgFailure,
    NoClassError,
    ShapeError,
)

STATE_MAGIC = b"SCST"
STATE_VERSION = 1
_KIND_NCC = 0
_KIND_RIDGE = 1


def _check_vector(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise ShapeError(f"expected a vector of shape ({dim},), got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("vector contains non-finite values")
    return x


def _check_matrix(xs, dim: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != dim:
        raise ShapeError(f"expected rows of dimension {dim}, got shape {xs.shape}")
    if not np.isfinite(xs).all():
        raise DataError("vectors contain non-finite values")
    return xs


def _check_labels(ys, class_count: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.int64)
    if ys.ndim != 1:
        raise ShapeError(f"labels must be 1-d, got shape {ys.shape}")
    if ys.size and (ys.min() < 0 or ys.max() >= class_count):
        bad = int(ys[(ys < 0) | (ys >= class_count)][0])
        raise ClassIdError(f"class id {bad} outside [0, {class_count})")
    return ys


class LinearHead:
    """A dense one-vs-all classifier: scores(x) = W x + b, predict = argmax.

    Ties resolve to the smallest class id.
    """

    def __init__(self, weights, biases):
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        biases = np.ascontiguousarray(biases, dtype=np.float64)
        if weights.ndim != 2:
            raise ShapeError(f"weights must be 2-d, got shape {weights.shape}")
        if biases.shape != (weights.shape[0],):
            raise ShapeError(
                f"biases shape {biases.shape} does not match {weights.shape[0]} classes"
            )
        if not (np.isfinite(weights).all() and np.isfinite(biases).all()):
            raise DataError("head parameters contain non-finite values")
        self.weights = weights
        self.biases = biases

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        single = xs.ndim == 1
        if single:
            xs = xs[None, :]
        if xs.ndim != 2 or xs.shape[1] != self.dim:
            raise ShapeError(
                f"queries of dimension {self.dim} required, got shape {xs.shape}"
            )
        out = xs @ self.weights.T + self.biases
        return out[0] if single else out

    def predict(self, x) -> int:
        return int(np.argmax(self.scores(x)))

    def predict_batch(self, xs) -> np.ndarray:
        return np.argmax(self.scores(xs), axis=1).astype(np.int64)

    def copy(self) -> "LinearHead":
        return LinearHead(self.weights.copy(), self.biases.copy())


class NccState:
    """Per-class running-mean prototypes for nearest-centroid classification.

    ``prototypes[y]`` is the exact mean of every class-``y`` vector seen so
    far (the zero vector while the class is unseen) and ``counts[y]`` is
    how many such vectors there were.
    """

    def __init__(self, class_count: int, dim: int):
        if class_count < 1 or dim < 1:
            raise ConfigError("class_count and dim must be >= 1")
        self.prototypes = np.zeros((class_count, dim))
        self.counts = np.zeros(class_count, dtype=np.int64)

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def update(self, x, y: int) -> "NccState":
        """Fold one sample into its class prototype; other rows are untouched."""
        x = _check_vector(x, self.dim)
        y = int(y)
        if not 0 <= y < self.class_count:
            raise ClassIdError(f"class id {y} outside [0, {self.class_count})")
        n = self.counts[y]
        self.prototypes[y] = (n * self.prototypes[y] + x) / (n + 1)
        self.counts[y] = n + 1
        return self

    def update_batch(self, xs, ys) -> "NccState":
        xs = _check_matrix(xs, self.dim)
        ys = _check_labels(ys, self.class_count)
        if xs.shape[0] != ys.shape[0]:
            raise ShapeError("vectors and labels disagree in length")
        for y in np.unique(ys):
            mask = ys == y
            m = int(mask.sum())
            n = self.counts[y]
            self.prototypes[y] = (n * self.prototypes[y] + xs[mask].sum(axis=0)) / (n + m)
            self.counts[y] = n + m
        return self

    def _distances(self, xs: np.ndarray) -> np.ndarray:
        # (n, K) squared distances; unseen classes masked to +inf.
        diffs = xs[:, None, :] - self.prototypes[None, :, :]
        d2 = np.sum(diffs * diffs, axis=-1)
        d2[:, self.counts == 0] = np.inf
        return d2

    def predict(self, x) -> int:
        """Nearest seen prototype by squared distance; ties to smallest id."""
        return int(self.predict_batch(_check_vector(x, self.dim)[None, :])[0])

    def predict_batch(self, xs) -> np.ndarray:
        xs = _check_matrix(xs, self.dim)
        if not (self.counts > 0).any():
            raise NoClassError("no class has been observed yet")
        return np.argmin(self._distances(xs), axis=1).astype(np.int64)

    def to_linear_head(self) -> LinearHead:
        """Rewrite the nearest-prototype rule as a linear layer.

        For unit-norm queries, argmin_y ||x - c_y||^2 equals
        argmax_y (x . c_y - ||c_y||^2 / 2), so the head uses each prototype
        as its weight row with bias -||c_y||^2 / 2. Unseen classes get a
        zero row and zero bias.
        """
        weights = self.prototypes.copy()
        biases = -0.5 * np.einsum("ij,ij->i", weights, weights)
        return LinearHead(weights, biases)

    def copy(self) -> "NccState":
        out = NccState(self.class_count, self.dim)
        out.prototypes = self.prototypes.copy()
        out.counts = self.counts.copy()
        return out


class RidgeState:
    """Streaming sufficient statistics for one-vs-all ridge regression.

    ``cov`` is the sum of outer products of every observed vector,
    ``class_sums[z]`` the sum of class-``z`` vectors, and ``seen`` the
    total sample count. The regularizer ``lam`` corresponds to a squared
    penalty on the weights under a sample-averaged data loss, so the
    solve scales it by ``seen``.
    """

    def __init__(self, class_count: int, dim: int, lam: float = 1.0):
        if class_count < 1 or dim < 1:
            raise ConfigError("class_count and dim must be >= 1")
        if not lam > 0:
            raise ConfigError(f"lam must be positive, got {lam}")
        self.cov = np.zeros((dim, dim))
        self.class_sums = np.zeros((class_count, dim))
        self.lam = float(lam)
        self.seen = 0

    @property
    def class_count(self) -> int:
        return self.class_sums.shape[0]

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def update(self, x, y: int) -> "RidgeState":
        """Accumulate one sample: cov gains x x^T, row y gains x."""
        x = _check_vector(x, self.dim)
        y = int(y)
        if not 0 <= y < self.class_count:
            raise ClassIdError(f"class id {y} outside [0, {self.class_count})")
        self.cov += np.outer(x, x)
        self.class_sums[y] += x
        self.seen += 1
        return self

    def update_batch(self, xs, ys) -> "RidgeState":
        xs = _check_matrix(xs, self.dim)
        ys = _check_labels(ys, self.class_count)
        if xs.shape[0] != ys.shape[0]:
            raise ShapeError("vectors and labels disagree in length")
        self.cov += xs.T @ xs
        np.add.at(self.class_sums, ys, xs)
        self.seen += xs.shape[0]
        return self

    def solve(self) -> LinearHead:
        """Solve (cov + lam * seen * I) w_z = class_sums[z] for every class.

        Uses a Cholesky factorization of the symmetric positive-definite
        system; classes with no samples come out as exact zero rows.
        Biases are zero.
        """
        k, d = self.class_count, self.dim
        if self.seen == 0:
            return LinearHead(np.zeros((k, d)), np.zeros(k))
        system = self.cov + (self.lam * self.seen) * np.eye(d)
        try:
            factor = cho_factor(system, lower=True, check_finite=False)
            weights_t = cho_solve(factor, self.class_sums.T, check_finite=False)
        except _NumpyLinAlgError as exc:
            raise LinAlgFailure(f"ridge system could not be factorized: {exc}") from exc
        return LinearHead(np.ascontiguousarray(weights_t.T), np.zeros(k))

    def copy(self) -> "RidgeState":
        out = RidgeState(self.class_count, self.dim, self.lam)
        out.cov = self.cov.copy()
        out.class_sums = self.class_sums.copy()
        out.seen = self.seen
        return out


def save_state(state: NccState | RidgeState, path) -> None:
    """Write a classifier state checkpoint (magic ``SCST``, float64 payload)."""
    w = Writer()
    w.raw(STATE_MAGIC)
    if isinstance(state, NccState):
        w.pack("HBII", STATE_VERSION, _KIND_NCC, state.class_count, state.dim)
        w.array(state.prototypes, "<f8")
        w.array(state.counts.astype(np.float64), "<f8")
    elif isinstance(state, RidgeState):
        w.pack("HBII", STATE_VERSION, _KIND_RIDGE, state.class_count, state.dim)
        w.pack("dd", state.lam, float(state.seen))
        w.array(state.cov, "<f8")
        w.array(state.class_sums, "<f8")
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(state).__name__}")
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_state(path) -> NccState | RidgeState:
    """Read back a checkpoint written by :func:`save_state`."""
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.expect_magic(STATE_MAGIC)
    version, kind, k, d = r.unpack("HBII", "state header")
    if version != STATE_VERSION:
        raise FormatError(f"unsupported state version {version}")
    if kind == _KIND_NCC:
        state = NccState(k, d)
        state.prototypes = r.array("<f8", k * d, "prototypes").reshape(k, d).copy()
        state.counts = r.array("<f8", k, "counts").astype(np.int64)
        r.expect_end()
        return state
    if kind == _KIND_RIDGE:
        lam, seen = r.unpack("dd", "ridge scalars")
        state = RidgeState(k, d, lam)
        state.cov = r.array("<f8", d * d, "second-moment matrix").reshape(d, d).copy()
        state.class_sums = r.array("<f8", k * d, "class sums").reshape(k, d).copy()
        state.seen = int(seen)
        r.expect_end()
        return state
    raise FormatError(f"unknown state kind tag {kind}")
