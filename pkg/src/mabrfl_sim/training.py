"""From-scratch softmax models and the client-side local training step.

A model is a tanh MLP with a softmax output; with no hidden layers it is
multinomial logistic regression. Parameters travel as one flat vector so
that updates can be handed straight to the aggregators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .linalg import RngStream


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.num_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class ModelParams:
    arch: Architecture
    flat: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        flat = np.array(self.flat, dtype=np.float64).reshape(-1)
        if flat.size != self.arch.num_params:
            raise ValueError(f"expected {self.arch.num_params} params, got {flat.size}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) per layer; weights are (fan_in, fan_out) views."""
        return unflatten(self.arch, self.flat)

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, flat)


@dataclass(frozen=True)
class LocalTrainConfig:
    local_epochs: int = 3
    batch_size: int = 32
    sgd_step: float = 0.1

    def __post_init__(self) -> None:
        if self.local_epochs < 1 or self.batch_size < 1 or self.sgd_step < 0:
            raise ValueError("local training settings must be positive")


def unflatten(arch: Architecture, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    sizes = arch.layer_sizes
    out, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.reshape(-1), b.reshape(-1)]) for w, b in layers])


def init_params(arch: Architecture, rng: RngStream | None = None) -> ModelParams:
    """Zero init for logistic regression, scaled Gaussian weights otherwise."""
    if not arch.hidden or rng is None:
        return ModelParams(arch, np.zeros(arch.num_params))
    layers = []
    sizes = arch.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        layers.append((rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), np.zeros(fan_out)))
    return ModelParams(arch, flatten(layers))


def _check(params: ModelParams, x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected inputs of dim {params.arch.input_dim}, got {x.shape}")
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("batch must be nonempty with one label per row")


def _forward(layers, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    logits = h @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return acts, log_probs


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    layers = params.layers()
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
    w, b = layers[-1]
    return h @ w + b


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, x), axis=1)


def accuracy(params: ModelParams, ds: Dataset) -> float:
    """Correct predictions divided by the number of samples."""
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    return float(np.count_nonzero(predict(params, ds.features) == ds.labels)) / len(ds)


def forward_loss(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check(params, x, y)
    _, log_probs = _forward(params.layers(), x)
    return float(-log_probs[np.arange(y.size), y].mean())


def backward(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of ``forward_loss`` as a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check(params, x, y)
    layers = params.layers()
    acts, log_probs = _forward(layers, x)

    delta = np.exp(log_probs)
    delta[np.arange(y.size), y] -= 1.0
    delta /= y.size

    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    return flatten(grads[::-1])


def local_update(
    global_params: ModelParams,
    shard: Dataset,
    cfg: LocalTrainConfig,
    rng: RngStream,
) -> np.ndarray:
    """Run mini-batch SGD on ``shard`` from the global model.

    Returns the trained-minus-global parameter difference.
    """
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    arch = global_params.arch
    w = np.array(global_params.flat)
    n = len(shard)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad = backward(ModelParams(arch, w), shard.features[idx], shard.labels[idx])
            w -= cfg.sgd_step * grad
    return w - global_params.flat
