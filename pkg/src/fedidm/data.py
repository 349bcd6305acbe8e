"""Synthetic datasets, Dirichlet client partitions and label-preserving transforms."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Rng


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f"incompatible shapes X{X.shape} y{y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)


@dataclass(frozen=True)
class Partition:
    client_shards: tuple[np.ndarray, ...]
    concentration: float

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)


@dataclass(frozen=True)
class AugmentedPair:
    s1: np.ndarray
    s2: np.ndarray


@dataclass(frozen=True)
class AugmentConfig:
    sigma: float = 0.05
    p_mask: float = 0.1


def class_means(n_classes: int, input_dim: int, separation: float, rng: Rng) -> np.ndarray:
    """Class centres with pairwise distance at least ``separation``.

    With enough dimensions the centres sit on a randomly rotated scaled simplex
    corner (all pairwise distances exactly ``separation``); otherwise they are
    rejection-sampled in a box.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_classes <= input_dim:
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, input_dim)))
        return (separation / np.sqrt(2.0)) * q[:, :n_classes].T
    half = separation * n_classes
    means: list[np.ndarray] = []
    while len(means) < n_classes:
        cand = rng.uniform(-half, half, size=input_dim)
        if all(np.linalg.norm(cand - m) >= separation for m in means):
            means.append(cand)
    return np.array(means)


def gen_blobs(n_classes: int, input_dim: int, n_per_class: int, separation: float, rng: Rng,
              std: float = 1.0, means: np.ndarray | None = None) -> Dataset:
    """Balanced isotropic Gaussian blobs, ``n_per_class`` points per class."""
    if means is None:
        means = class_means(n_classes, input_dim, separation, rng)
    X = np.concatenate([means[k] + std * rng.standard_normal((n_per_class, input_dim))
                        for k in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(X, y, n_classes)


def train_test_blobs(n_classes: int, input_dim: int, n_train: int, n_test: int,
                     separation: float, rng: Rng, std: float = 1.0) -> tuple[Dataset, Dataset]:
    means = class_means(n_classes, input_dim, separation, rng)
    train = gen_blobs(n_classes, input_dim, n_train, separation, rng, std, means)
    test = gen_blobs(n_classes, input_dim, n_test, separation, rng, std, means)
    return train, test


def dirichlet_partition(ds: Dataset, n_clients: int, concentration: float, rng: Rng) -> Partition:
    """Split indices across clients; per-class proportions ~ Dirichlet(concentration).

    Empty shards are repaired by moving one point from the currently largest shard.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > len(ds):
        raise ValueError(f"cannot give {n_clients} clients a point each from {len(ds)} points")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for k in range(ds.n_classes):
        idx = np.flatnonzero(ds.y == k)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(n_clients, float(concentration)))
        cuts = np.floor(np.cumsum(props) * idx.size).astype(np.int64)[:-1]
        for c, part in enumerate(np.split(idx, cuts)):
            shards[c].extend(int(i) for i in part)
    for c in range(n_clients):
        if not shards[c]:
            donor = max(range(n_clients), key=lambda j: (len(shards[j]), -j))
            shards[c].append(shards[donor].pop())
    return Partition(tuple(np.array(sorted(s), dtype=np.int64) for s in shards), float(concentration))


def augment(x, rng: Rng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Gaussian coordinate jitter followed by random coordinate masking.

    Accepts a single vector or a batch (rows). Masking zeroes each coordinate
    independently with probability ``p_mask``.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x + cfg.sigma * rng.standard_normal(x.shape) if cfg.sigma > 0 else x.copy()
    if cfg.p_mask > 0:
        out = np.where(rng.random(x.shape) < cfg.p_mask, 0.0, out)
    return out


def augment_pair(x, rng: Rng, cfg: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    return AugmentedPair(augment(x, rng, cfg), augment(x, rng, cfg))


def mixup(s_i, s_j, y_i, y_j, rng: Rng | None = None, alpha: float = 0.75,
          rho: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Convex blend of two points and their soft labels with rho ~ Beta(alpha, alpha).

    ``y_i`` and ``y_j`` may each be a single simplex vector or a pair of views;
    a pair ``(y1, y2)`` is averaged first.
    """
    if rho is None:
        if rng is None:
            raise ValueError("need an rng or an explicit rho")
        rho = float(rng.beta(alpha, alpha))
    y_i = _avg_views(y_i)
    y_j = _avg_views(y_j)
    s_m = rho * np.asarray(s_i, dtype=np.float64) + (1.0 - rho) * np.asarray(s_j, dtype=np.float64)
    return s_m, rho * y_i + (1.0 - rho) * y_j


def _avg_views(y) -> np.ndarray:
    if isinstance(y, tuple):
        return 0.5 * (np.asarray(y[0], dtype=np.float64) + np.asarray(y[1], dtype=np.float64))
    return np.asarray(y, dtype=np.float64)


def save_csv(ds: Dataset, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Header line ``dim,K``, then rows ``x_0..x_{dim-1},label[,extra...]``."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([ds.input_dim, ds.n_classes, *extra.keys()])
        for i in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.X[i]] + [int(ds.y[i])]
                       + [int(col[i]) for col in extra.values()])


def load_csv(path: str | Path) -> tuple[Dataset, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    dim, k, *extra_names = rows[0]
    dim, k = int(dim), int(k)
    body = rows[1:]
    X = np.array([[float(v) for v in r[:dim]] for r in body]).reshape(len(body), dim)
    y = np.array([int(r[dim]) for r in body], dtype=np.int64)
    extra = {name: np.array([int(r[dim + 1 + j]) for r in body], dtype=np.int64)
             for j, name in enumerate(extra_names)}
    return Dataset(X, y, k), extra
