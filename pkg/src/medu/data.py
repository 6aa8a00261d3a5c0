"""Synthetic and small real datasets for the desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import stream


@dataclass
class Dataset:
    """Feature matrix ``x`` (n, d) and integer labels ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2:
            raise ConfigError(f"features must be 2-d, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ConfigError(f"label shape {self.y.shape} does not match {self.x.shape[0]} examples")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass
class Task:
    """A classification task plus an edge-case region used by the backdoor."""

    train: Dataset
    test: Dataset
    n_classes: int
    edge_train: Dataset | None = None
    edge_test: Dataset | None = None
    edge_center: np.ndarray | None = None
    edge_radius: float = 0.0
    meta: dict = field(default_factory=dict)


def make_blobs_task(
    seed: int,
    n_classes: int = 4,
    dim: int = 20,
    n_train: int = 2000,
    n_test: int = 1000,
    separation: float = 3.0,
    noise: float = 1.0,
    edge_class: int = 0,
    edge_offset: float = 12.0,
    edge_spread: float = 0.4,
    n_edge_train: int = 200,
    n_edge_test: int = 200,
) -> Task:
    """Gaussian blobs with a small satellite cluster of ``edge_class``.

    Class centres sit at ``separation`` times random unit vectors.  The
    satellite lies ``edge_offset`` from the edge-class centre along a
    direction orthogonal to every class centre, so it is closest to
    ``edge_class`` while clean data carries no signal along that direction.
    When ``dim`` leaves no orthogonal room it points away from the data
    mean instead.  Satellite examples carry their true label ``edge_class``; the
    backdoor relabels them.
    """
    if n_classes < 2 or dim < 1:
        raise ConfigError("blobs need at least 2 classes and 1 feature")
    rng = stream(seed, "data", 0)
    centers = rng.standard_normal((n_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(n, r):
        y = r.integers(0, n_classes, size=n)
        x = centers[y] + noise * r.standard_normal((n, dim))
        return Dataset(x, y)

    train = draw(n_train, stream(seed, "data", 1))
    test = draw(n_test, stream(seed, "data", 2))

    q, _ = np.linalg.qr(centers.T)
    direction = rng.standard_normal(dim)
    direction -= q @ (q.T @ direction)
    if np.linalg.norm(direction) < 1e-9:
        direction = centers[edge_class] - centers.mean(axis=0)
    direction /= np.linalg.norm(direction)
    edge_center = centers[edge_class] + edge_offset * direction

    def draw_edge(n, r):
        x = edge_center + edge_spread * r.standard_normal((n, dim))
        return Dataset(x, np.full(n, edge_class))

    edge_train = draw_edge(n_edge_train, stream(seed, "data", 3))
    edge_test = draw_edge(n_edge_test, stream(seed, "data", 4))
    radius = edge_spread * (np.sqrt(dim) + 4.0)
    return Task(train, test, n_classes, edge_train, edge_test, edge_center, float(radius),
                meta={"kind": "blobs", "centers": centers})


def load_digits_task(seed: int, n_train: int | None = None, test_fraction: float = 0.3) -> Task:
    """8x8 handwritten digits (scikit-learn copy), pixels scaled to [0, 1].

    Stands in for an MNIST subset.  The backdoor uses the plain class rule
    (every 7 is relabeled), so no edge region is attached.
    """
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover
        raise ConfigError("the digits task needs scikit-learn (pip install .[digits])") from exc
    bunch = load_digits()
    x = bunch.data / 16.0
    y = bunch.target
    perm = stream(seed, "data", 0).permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if n_train is not None:
        train_idx = train_idx[:n_train]
    return Task(Dataset(x[train_idx], y[train_idx]), Dataset(x[test_idx], y[test_idx]), 10,
                meta={"kind": "digits"})
