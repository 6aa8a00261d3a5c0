"""Small differentiable models with hand-written gradients.

Parameters live in one flat float64 vector.  For every dense layer the
weight matrix of shape (fan_in, fan_out) comes first in row-major order,
followed by its bias.  Prediction is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, EmptyClientError
from .rng import stream

KINDS = ("linear", "logistic", "mlp", "quadratic")


@dataclass(frozen=True)
class ModelSpec:
    """Model family and layer widths.

    ``widths`` lists input width, hidden widths and output width.  The
    ``quadratic`` kind has loss ½‖w‖² independent of data; it is a test
    fixture whose gradient is known in closed form, with ``widths=(M,)``.
    """

    kind: str
    widths: tuple
    activation: str = "relu"
    loss: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.kind == "quadratic":
            if len(self.widths) != 1:
                raise ConfigError("quadratic model takes widths=(M,)")
        elif self.kind == "mlp":
            if len(self.widths) < 3:
                raise ConfigError("mlp needs at least one hidden layer")
        elif len(self.widths) != 2:
            raise ConfigError(f"{self.kind} model takes widths=(inputs, outputs)")
        if self.kind == "logistic" and self.widths[-1] < 2:
            raise ConfigError("logistic model needs at least 2 output classes")
        loss = self.loss or {"linear": "squared-error", "quadratic": "quadratic"}.get(self.kind, "cross-entropy")
        if loss not in ("squared-error", "cross-entropy", "quadratic"):
            raise ConfigError(f"unknown loss {loss!r}")
        if self.kind == "logistic" and loss != "cross-entropy":
            raise ConfigError("logistic model uses cross-entropy")
        object.__setattr__(self, "loss", loss)

    @property
    def n_params(self) -> int:
        if self.kind == "quadratic":
            return self.widths[0]
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    def layers(self, params: np.ndarray):
        """Split a flat vector into [(W, b), ...] views."""
        out = []
        pos = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = params[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, params[pos:pos + b]))
            pos += b
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths), "activation": self.activation, "loss": self.loss}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["kind"], tuple(d["widths"]), d.get("activation", "relu"), d.get("loss"))


def check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ConfigError(f"parameter vector has shape {params.shape}, model expects ({spec.n_params},)")
    if not np.all(np.isfinite(params)):
        raise ConfigError("parameter vector contains NaN or Inf")
    return params


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = stream(seed, "init")
    if spec.kind == "quadratic":
        return rng.uniform(-1.0, 1.0, size=spec.n_params)
    parts = []
    for a, b in zip(spec.widths[:-1], spec.widths[1:]):
        lim = 1.0 / np.sqrt(a)
        parts.append(rng.uniform(-lim, lim, size=a * b))
        parts.append(rng.uniform(-lim, lim, size=b))
    return np.concatenate(parts)


def _targets(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    k = spec.n_outputs
    if k == 1:
        return y.astype(np.float64)[:, None]
    return np.eye(k)[y]


def _check_batch(spec: ModelSpec, batch: Dataset):
    if len(batch) == 0:
        raise EmptyClientError("empty batch")
    if batch.dim != spec.n_inputs:
        raise ConfigError(f"batch has {batch.dim} features, model expects {spec.n_inputs}")
    if spec.loss == "cross-entropy" and (batch.y.min() < 0 or batch.y.max() >= spec.n_outputs):
        raise ConfigError(f"labels must lie in [0, {spec.n_outputs})")


def forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Output scores (logits for cross-entropy models)."""
    h = x
    layers = spec.layers(params)
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def loss_and_gradient(spec: ModelSpec, params: np.ndarray, batch: Dataset):
    """Mean loss over ``batch`` and its gradient with respect to ``params``."""
    params = np.asarray(params, dtype=np.float64)
    if spec.kind == "quadratic":
        return 0.5 * float(params @ params), params.copy()
    _check_batch(spec, batch)
    n = len(batch)
    layers = spec.layers(params)
    acts = [batch.x]
    pre = []
    h = batch.x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    out = acts[-1]

    if spec.loss == "cross-entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        loss = -float(logp[np.arange(n), batch.y].mean())
        delta = np.exp(logp)
        delta[np.arange(n), batch.y] -= 1.0
    else:
        resid = out - _targets(spec, batch.y)
        loss = 0.5 * float((resid * resid).sum(axis=1).mean())
        delta = resid
    delta = delta / n

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return loss, np.concatenate(flat)


def loss_value(spec: ModelSpec, params: np.ndarray, batch: Dataset) -> float:
    return loss_and_gradient(spec, params, batch)[0]


def finite_diff_gradient(spec: ModelSpec, params: np.ndarray, batch: Dataset, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time.  Test oracle only."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    params = np.array(params, dtype=np.float64)
    out = np.empty_like(params)
    for j in range(params.size):
        old = params[j]
        params[j] = old + epsilon
        up = loss_value(spec, params, batch)
        params[j] = old - epsilon
        down = loss_value(spec, params, batch)
        params[j] = old
        out[j] = (up - down) / (2.0 * epsilon)
    return out


def local_update(spec: ModelSpec, params: np.ndarray, data: Dataset, eta: float, epochs: int,
                 batch_size: int, rng: np.random.Generator):
    """Run ``epochs`` of minibatch SGD and return (new_params, effective_gradient).

    The effective gradient is ``(params - sgd_result) / eta`` and the
    returned model is recomputed as ``params - eta * effective_gradient``,
    so that identity holds exactly for whatever the caller aggregates.
    """
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    if epochs < 1 or batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if len(data) == 0:
        raise EmptyClientError("client has no data")
    params = np.asarray(params, dtype=np.float64)
    w = params.copy()
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            _, g = loss_and_gradient(spec, w, data.subset(order[lo:lo + batch_size]))
            w -= eta * g
    eff = (params - w) / eta
    return params - eta * eff, eff


def predict(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Class predictions; argmax ties go to the lowest class index."""
    out = forward(spec, params, np.asarray(x, dtype=np.float64))
    if out.shape[1] == 1:
        return np.rint(out[:, 0]).astype(np.int64)
    return np.argmax(out, axis=1)
