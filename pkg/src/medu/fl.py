"""FedAvg simulation, train-from-scratch retraining and checkpoint files.

User ids are 1-based (``1..U``) everywhere they cross an API boundary;
arrays of per-user rows are indexed by ``id - 1``.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, EmptyClientError, MeduError, StoreFormatError
from .model import ModelSpec, check_params, init_params, local_update
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    """``constant``: eta_t = c.  ``decaying``: eta_t = a / (t + b0)."""

    kind: str = "constant"
    c: float = 0.05
    a: float = 1.0
    b0: float = 10.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.c > 0:
                raise ConfigError(f"constant learning rate must be positive, got {self.c}")
        elif self.kind == "decaying":
            if not (self.a > 0 and self.b0 > 0):
                raise ConfigError(f"decaying schedule needs a > 0 and b0 > 0, got a={self.a}, b0={self.b0}")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, t: int) -> float:
        if t < 0:
            raise ConfigError(f"round index must be >= 0, got {t}")
        if self.kind == "constant":
            return float(self.c)
        return self.a / (t + self.b0)

    def values(self, T: int) -> np.ndarray:
        """eta_0 .. eta_T."""
        return np.array([self(t) for t in range(T + 1)], dtype=np.float64)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "c": self.c}
        return {"kind": "decaying", "a": self.a, "b0": self.b0}

    @classmethod
    def from_dict(cls, d: dict) -> "LRSchedule":
        return cls(**d)


@dataclass
class FLConfig:
    U: int
    T: int
    model: ModelSpec
    schedule: LRSchedule = field(default_factory=LRSchedule)
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    unlearn_user: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.U < 2:
            raise ConfigError(f"need at least 2 users, got U={self.U}")
        if self.T < 0:
            raise ConfigError(f"final round index must be >= 0, got T={self.T}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.unlearn_user is not None and not 1 <= self.unlearn_user <= self.U:
            raise ConfigError(f"unlearn_user must be in [1, {self.U}], got {self.unlearn_user}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class RoundGradients:
    """Effective gradients of round ``t``: row i belongs to user ``users[i]``."""

    t: int
    eta: float
    users: np.ndarray
    grads: np.ndarray

    def mean(self) -> np.ndarray:
        acc = np.zeros(self.grads.shape[1])
        for row in self.grads:
            acc += row
        return acc / self.grads.shape[0]


# ----------------------------------------------------------------------
# partitioning
# ----------------------------------------------------------------------


def partition_indices(labels: np.ndarray, U: int, concentration: float, rng: np.random.Generator):
    """Dirichlet label split.  Returns U sorted index arrays covering ``labels``.

    For each class the shuffled indices are cut by a Dirichlet(concentration)
    proportion vector.  A client left empty receives one example taken from
    the currently largest client, repeated until every client is non-empty.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ConfigError("cannot partition an empty dataset")
    if n < U:
        raise ConfigError(f"dataset has {n} examples, fewer than U={U} clients")
    if not concentration > 0:
        raise ConfigError(f"Dirichlet concentration must be positive, got {concentration}")
    buckets = [[] for _ in range(U)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(U, float(concentration)))
        cuts = np.rint(np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for u, part in enumerate(np.split(idx, cuts)):
            buckets[u].extend(part.tolist())
    for u in range(U):
        while not buckets[u]:
            donor = max(range(U), key=lambda k: len(buckets[k]))
            buckets[u].append(buckets[donor].pop())
            log.debug("partition repair: moved one example from client %d to %d", donor + 1, u + 1)
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def partition_dirichlet(dataset: Dataset, U: int, concentration: float, rng: np.random.Generator):
    return [dataset.subset(idx) for idx in partition_indices(dataset.y, U, concentration, rng)]


# ----------------------------------------------------------------------
# rounds
# ----------------------------------------------------------------------


def fl_round(spec: ModelSpec, w_t: np.ndarray, clients, eta: float, t: int, seed: int,
             epochs: int = 1, batch_size: int = 16, exclude: int | None = None, workers: int = 1,
             participants=None):
    """One FedAvg round over every client except ``exclude``.

    ``participants`` restricts the round to the listed user ids.  Returns
    ``(w_next, RoundGradients)`` with ``w_next = w_t - eta * mean(gradients)``,
    the mean taken as an index-ascending sum divided by the number of
    participants.
    """
    pool = range(1, len(clients) + 1) if participants is None else sorted(participants)
    ids = [u for u in pool if u != exclude]
    if not ids:
        raise ConfigError(f"round {t} has no participating client")
    for u in ids:
        if len(clients[u - 1]) == 0:
            raise EmptyClientError(f"client {u} has no data in round {t}")

    def job(u):
        return local_update(spec, w_t, clients[u - 1], eta, epochs, batch_size, stream(seed, "local", t, u))[1]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            grads = list(executor.map(job, ids))
    else:
        grads = [job(u) for u in ids]
    rg = RoundGradients(t, float(eta), np.asarray(ids, dtype=np.int64), np.vstack(grads))
    return w_t - eta * rg.mean(), rg


@dataclass
class FLResult:
    w0: np.ndarray
    w_final: np.ndarray
    trajectory: list | None = None


class MemorySink:
    """Keeps every RoundGradients in memory."""

    def __init__(self):
        self.rounds = []

    def append(self, rg: RoundGradients):
        self.rounds.append(rg)

    def close(self):
        pass


def _run(config: FLConfig, clients, sinks, exclude, w0, keep_trajectory):
    if len(clients) != config.U:
        raise ConfigError(f"got {len(clients)} client datasets for U={config.U}")
    spec = config.model
    w = init_params(spec, config.seed) if w0 is None else check_params(spec, w0).copy()
    start = w.copy()
    traj = [w.copy()] if keep_trajectory else None
    for t in range(config.T + 1):
        eta = config.schedule(t)
        w, rg = fl_round(spec, w, clients, eta, t, config.seed, config.epochs, config.batch_size,
                         exclude=exclude, workers=config.workers)
        for sink in sinks:
            try:
                sink.append(rg)
            except MeduError:
                raise
            except Exception as exc:
                raise MeduError(f"history sink failed at round {t}; store holds rounds 0..{t - 1}: {exc}") from exc
        if traj is not None:
            traj.append(w.copy())
    for sink in sinks:
        sink.close()
    return FLResult(start, w, traj)


def run_fl(config: FLConfig, clients, sinks=(), w0=None, keep_trajectory=False) -> FLResult:
    """FedAvg for rounds 0..T, forwarding each round's gradients to every sink."""
    return _run(config, clients, list(sinks), None, w0, keep_trajectory)


def run_retrain(config: FLConfig, clients, exclude: int | None = None, sinks=(), w0=None,
                keep_trajectory=False) -> FLResult:
    """Same loop as :func:`run_fl` with client ``exclude`` left out of every round.

    Starts from the same initial model and reuses the per-(t, u) local
    streams, so only the exclusion differs from the federated run.
    """
    exclude = config.unlearn_user if exclude is None else exclude
    if exclude is None:
        raise ConfigError("retraining needs a user to exclude")
    if not 1 <= exclude <= config.U:
        raise ConfigError(f"excluded user must be in [1, {config.U}], got {exclude}")
    return _run(config, clients, list(sinks), exclude, w0, keep_trajectory)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

CKPT_MAGIC = b"MEDUCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sHQ")


def checkpoint_bytes(params: np.ndarray) -> bytes:
    params = np.asarray(params, dtype="<f8")
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.size) + params.tobytes()


def parse_checkpoint(buf: bytes) -> np.ndarray:
    if len(buf) < _CKPT_HEAD.size:
        raise StoreFormatError("checkpoint shorter than its header")
    magic, version, m = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise StoreFormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise StoreFormatError(f"unsupported checkpoint version {version}")
    need = _CKPT_HEAD.size + 8 * m
    if len(buf) != need:
        raise StoreFormatError(f"checkpoint holds {len(buf)} bytes, header implies {need}")
    return np.frombuffer(buf, dtype="<f8", offset=_CKPT_HEAD.size, count=m).astype(np.float64)


def save_checkpoint(path, params: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
