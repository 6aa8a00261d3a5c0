"""Edge-case backdoor on one client and the accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .model import ModelSpec, predict


@dataclass
class BackdoorSpec:
    """Examples of ``source`` class (optionally only those within ``radius``
    of ``center``) are relabeled ``target``; ``fraction`` of them are poisoned.
    """

    source: int
    target: int
    fraction: float = 1.0
    center: np.ndarray | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.source == self.target:
            raise ConfigError("backdoor target must differ from the source class")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"poison fraction must be in (0, 1], got {self.fraction}")
        if (self.center is None) != (self.radius is None):
            raise ConfigError("give both center and radius for a region selector, or neither")

    def matches(self, data: Dataset) -> np.ndarray:
        mask = data.y == self.source
        if self.center is not None:
            mask &= np.linalg.norm(data.x - np.asarray(self.center), axis=1) < self.radius
        return mask


def inject_backdoor(client: Dataset, spec: BackdoorSpec, rng: np.random.Generator,
                    holdout: Dataset | None = None, holdout_fraction: float = 0.2):
    """Relabel matching examples of ``client``; return (poisoned, trigger set).

    The trigger set holds matching examples not used for training, labeled
    with the backdoor target.  They come from ``holdout`` when given,
    otherwise ``holdout_fraction`` of the client's matching examples are
    moved out of the training data.
    """
    mask = spec.matches(client)
    if not mask.any():
        raise ConfigError("client holds no example matching the backdoor selector")
    x = client.x.copy()
    y = client.y.copy()
    idx = np.flatnonzero(mask)
    if holdout is None:
        n_hold = int(round(holdout_fraction * idx.size))
        if n_hold < 1 or n_hold >= idx.size:
            raise ConfigError("not enough matching examples to split off a trigger set")
        perm = rng.permutation(idx)
        held, idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
        trig_x = client.x[held]
        keep = np.ones(len(client), dtype=bool)
        keep[held] = False
    else:
        hm = spec.matches(holdout)
        if not hm.any():
            raise ConfigError("holdout set holds no matching example")
        trig_x = holdout.x[hm]
        keep = np.ones(len(client), dtype=bool)
    n_poison = int(round(spec.fraction * idx.size))
    chosen = idx if n_poison == idx.size else np.sort(rng.choice(idx, size=n_poison, replace=False))
    y[chosen] = spec.target
    poisoned = Dataset(x[keep], y[keep])
    trigger = Dataset(trig_x, np.full(trig_x.shape[0], spec.target))
    return poisoned, trigger


def evaluate(spec: ModelSpec, params: np.ndarray, test: Dataset) -> float:
    """Fraction of correct argmax predictions."""
    if len(test) == 0:
        raise ConfigError("empty test set")
    return float(np.mean(predict(spec, params, test.x) == test.y))


def backdoor_accuracy(spec: ModelSpec, params: np.ndarray, trigger: Dataset) -> float:
    """Fraction of trigger inputs classified as the backdoor target."""
    if len(trigger) == 0:
        raise ConfigError("empty trigger set")
    return float(np.mean(predict(spec, params, trigger.x) == trigger.y))
