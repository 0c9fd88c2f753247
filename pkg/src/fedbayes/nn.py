"""Dense feed-forward network with hand-written backpropagation.

Parameters travel as :class:`ModelParams`, an ordered list of named 2-D
float64 arrays (``dense_k.weight`` of shape ``(fan_in, fan_out)`` followed by
``dense_k.bias`` of shape ``(1, fan_out)``).  Hidden layers use ReLU, the
output layer is linear and the loss is softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from fedbayes.datasets import Dataset


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    if out.ndim != 2:
        raise ValueError(f"layer tensors must be 2-D, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelParams:
    """Ordered, immutable collection of named layer tensors."""

    layers: tuple[tuple[str, np.ndarray], ...]
    architecture: tuple[int, ...]

    def __post_init__(self) -> None:
        layers = tuple((str(name), _frozen(t)) for name, t in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "architecture", tuple(int(a) for a in self.architecture))
        arch = self.architecture
        if len(arch) < 2:
            raise ValueError("architecture needs at least an input and an output size")
        if len(layers) != 2 * (len(arch) - 1):
            raise ValueError(
                f"architecture {arch} expects {2 * (len(arch) - 1)} tensors, got {len(layers)}"
            )
        for k, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
            (wname, w), (bname, b) = layers[2 * k], layers[2 * k + 1]
            if w.shape != (fan_in, fan_out):
                raise ValueError(f"{wname}: expected shape {(fan_in, fan_out)}, got {w.shape}")
            if b.shape != (1, fan_out):
                raise ValueError(f"{bname}: expected shape {(1, fan_out)}, got {b.shape}")

    @classmethod
    def from_arrays(cls, architecture: Sequence[int], arrays: Sequence[np.ndarray]) -> ModelParams:
        names = layer_names(architecture)
        if len(arrays) != len(names):
            raise ValueError(f"expected {len(names)} arrays, got {len(arrays)}")
        return cls(tuple(zip(names, arrays)), tuple(architecture))

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layers]

    @property
    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.layers]

    @property
    def n_params(self) -> int:
        return sum(t.size for _, t in self.layers)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def replace(self, arrays: Sequence[np.ndarray]) -> ModelParams:
        """Same names and architecture, new tensors."""
        return ModelParams.from_arrays(self.architecture, arrays)

    def same_layout(self, other: ModelParams) -> bool:
        return self.architecture == other.architecture and all(
            n1 == n2 and t1.shape == t2.shape
            for (n1, t1), (n2, t2) in zip(self.layers, other.layers)
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def equals(self, other: ModelParams) -> bool:
        """Bitwise equality of names, shapes and values."""
        return self.same_layout(other) and all(
            np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )


def layer_names(architecture: Sequence[int]) -> list[str]:
    names = []
    for k in range(len(architecture) - 1):
        names += [f"dense_{k}.weight", f"dense_{k}.bias"]
    return names


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


def init_params(architecture: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for fan_in, fan_out in zip(architecture[:-1], architecture[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        arrays.append(np.zeros((1, fan_out)))
    return ModelParams.from_arrays(architecture, arrays)


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.architecture[0]:
        raise ValueError(
            f"batch shape {batch.shape} does not match input dimension {params.architecture[0]}"
        )
    return batch


def _forward_cache(tensors: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    activations = [x]
    a = x
    n_layers = len(tensors) // 2
    for k in range(n_layers):
        z = a @ tensors[2 * k] + tensors[2 * k + 1]
        a = np.maximum(z, 0.0) if k < n_layers - 1 else z
        activations.append(a)
    return a, activations


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits, one row per input row."""
    logits, _ = _forward_cache(params.tensors, _check_batch(params, batch))
    return logits


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -float(log_p[np.arange(n), labels].mean())
    return loss, np.exp(log_p)


def loss_and_grads(
    params: ModelParams, features: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient for every tensor."""
    x = _check_batch(params, features)
    return _raw_loss_and_grads(params.tensors, x, np.asarray(labels, dtype=np.int64))


def _check_data(data: Dataset, params: ModelParams) -> None:
    if data.n == 0:
        raise ValueError("dataset is empty")
    if data.class_count > params.architecture[-1]:
        raise ValueError(
            f"dataset has {data.class_count} classes but the model outputs {params.architecture[-1]}"
        )


def train_local(params: ModelParams, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch SGD on softmax cross-entropy; returns new parameters.

    Epoch ``e`` shuffles with a generator seeded by ``cfg.seed + e``, so the
    result depends only on the arguments.
    """
    _check_data(data, params)
    tensors = [t.copy() for t in params.tensors]
    x, y = data.features, data.labels
    n = data.n
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(cfg.seed + epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = _raw_loss_and_grads(tensors, x[idx], y[idx])
            for t, g in zip(tensors, grads):
                t -= lr * g
    return params.replace(tensors)


def _raw_loss_and_grads(
    tensors: list[np.ndarray], x: np.ndarray, labels: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    logits, acts = _forward_cache(tensors, x)
    loss, probs = _softmax_xent(logits, labels)
    n = x.shape[0]
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: list[np.ndarray] = [np.empty(0)] * len(tensors)
    for k in reversed(range(len(tensors) // 2)):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0, keepdims=True)
        if k > 0:
            delta = (delta @ tensors[2 * k].T) * (acts[k] > 0)
    return loss, grads


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(forward(params, features), axis=1)


def evaluate(params: ModelParams, data: Dataset) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on ``data``."""
    _check_data(data, params)
    logits = forward(params, data.features)
    loss, _ = _softmax_xent(logits, data.labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return accuracy, loss


def gradient_check(
    params: ModelParams, data: Dataset, epsilon: float = 1e-5, zero_tol: float = 1e-9
) -> float:
    """Worst relative error between backprop and central differences.

    Entries where both gradients are below ``zero_tol`` in magnitude count
    as exact (relative error 0).
    """
    x, y = data.features, data.labels
    _, analytic = loss_and_grads(params, x, y)
    tensors = [t.copy() for t in params.tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus, _ = _softmax_xent(_forward_cache(tensors, x)[0], y)
            flat[i] = orig - epsilon
            minus, _ = _softmax_xent(_forward_cache(tensors, x)[0], y)
            flat[i] = orig
            numeric = (plus - minus) / (2 * epsilon)
            scale = max(abs(numeric), abs(gflat[i]))
            if scale <= zero_tol:
                continue
            worst = max(worst, abs(numeric - gflat[i]) / scale)
    return worst
