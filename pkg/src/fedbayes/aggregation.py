"""Server-side aggregation: FedBayes, FedAvg and adaptive server optimizers.

FedBayes scores every (client, layer) pair against the prior global layer.
The prior layer's mean and population standard deviation define a normal
distribution; the client's weights and the prior's weights are pushed
through its CDF and the mean absolute difference is the layer's "CDF gap".
The gap is turned into a weight with ``clamp(1 - penalty * gap, 0, 1)`` and
each layer is the weight-normalised sum of client layers.  Reported example
counts are never read.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from fedbayes.nn import ModelParams

STRATEGIES = ("fedavg", "fedbayes", "fedadagrad", "fedadam", "fedyogi")
ADAPTIVE_STRATEGIES = ("fedadagrad", "fedadam", "fedyogi")

PENALTY_FACTOR = 100.0
SIGMA_FLOOR = 1e-6
WEIGHT_SUM_FLOOR = 1e-12


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ModelParams
    reported_examples: int

    def __post_init__(self) -> None:
        if self.reported_examples < 1:
            raise ValueError(f"reported_examples must be >= 1, got {self.reported_examples}")


@dataclass(frozen=True)
class LayerStats:
    mean: float
    stddev: float

    def floored(self, floor: float = SIGMA_FLOOR) -> LayerStats:
        return LayerStats(self.mean, max(self.stddev, floor))


@dataclass(frozen=True)
class AdjustedProbability:
    raw_cdf_gap: float
    penalized: float


def normal_cdf(x, mean: float = 0.0, stddev: float = 1.0):
    """Normal CDF, elementwise over ``x``."""
    if not stddev > 0:
        raise ValueError(f"stddev must be > 0, got {stddev}")
    z = (np.asarray(x, dtype=np.float64) - mean) / stddev
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def layer_stats(prior_layer: np.ndarray) -> LayerStats:
    """Mean and population standard deviation over every element."""
    flat = np.asarray(prior_layer, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("cannot compute statistics of an empty layer")
    return LayerStats(float(flat.mean()), float(flat.std()))


def penalize(raw_cdf_gap: float, penalty: float = PENALTY_FACTOR) -> float:
    return min(1.0, max(0.0, 1.0 - penalty * raw_cdf_gap))


def client_layer_probability(
    client_layer: np.ndarray,
    prior_layer: np.ndarray,
    stats: LayerStats,
    penalty: float = PENALTY_FACTOR,
) -> AdjustedProbability:
    client_layer = np.asarray(client_layer, dtype=np.float64)
    prior_layer = np.asarray(prior_layer, dtype=np.float64)
    if client_layer.shape != prior_layer.shape:
        raise ValueError(f"shape mismatch: client {client_layer.shape} vs prior {prior_layer.shape}")
    gaps = np.abs(
        normal_cdf(prior_layer, stats.mean, stats.stddev)
        - normal_cdf(client_layer, stats.mean, stats.stddev)
    )
    gap = float(gaps.mean())
    return AdjustedProbability(gap, penalize(gap, penalty))


def _check_updates(updates: Sequence[ClientUpdate], reference: ModelParams | None = None) -> None:
    if not updates:
        raise ValueError("no client updates to aggregate")
    reference = reference or updates[0].params
    for u in updates:
        if not u.params.same_layout(reference):
            raise ValueError(f"client {u.client_id} parameters do not match the model layout")


def fedbayes_probabilities(
    prior: ModelParams,
    updates: Sequence[ClientUpdate],
    penalty: float = PENALTY_FACTOR,
) -> np.ndarray:
    """Penalized weights, shape ``(n_clients, n_layers)``."""
    _check_updates(updates, prior)
    probs = np.empty((len(updates), len(prior)))
    for j, prior_layer in enumerate(prior.tensors):
        stats = layer_stats(prior_layer).floored()
        for i, u in enumerate(updates):
            probs[i, j] = client_layer_probability(
                u.params.tensors[j], prior_layer, stats, penalty
            ).penalized
    return probs


def elementwise_probabilities(
    prior: ModelParams,
    updates: Sequence[ClientUpdate],
    penalty: float = PENALTY_FACTOR,
) -> list[np.ndarray]:
    """Per-element penalized weights, one ``(n_clients, *layer.shape)`` array per layer.

    Same CDF gap as :func:`fedbayes_probabilities` but without the mean over
    the layer, so each weight is scored on its own.
    """
    _check_updates(updates, prior)
    out = []
    for j, prior_layer in enumerate(prior.tensors):
        stats = layer_stats(prior_layer).floored()
        prior_cdf = normal_cdf(prior_layer, stats.mean, stats.stddev)
        gaps = np.stack([
            np.abs(prior_cdf - normal_cdf(u.params.tensors[j], stats.mean, stats.stddev))
            for u in updates
        ])
        out.append(np.clip(1.0 - penalty * gaps, 0.0, 1.0))
    return out


def fedbayes_aggregate(
    prior: ModelParams,
    updates: Sequence[ClientUpdate],
    penalty: float = PENALTY_FACTOR,
    probabilities: np.ndarray | list[np.ndarray] | None = None,
    granularity: str = "layer",
) -> ModelParams:
    """Probability-weighted average per layer; suppressed layers keep the prior.

    ``granularity="element"`` weights every tensor entry separately and falls
    back to the prior entry wherever all clients are suppressed.
    """
    if granularity not in ("layer", "element"):
        raise ValueError(f"granularity must be 'layer' or 'element', got {granularity!r}")
    if probabilities is None:
        if granularity == "layer":
            probabilities = fedbayes_probabilities(prior, updates, penalty)
        else:
            probabilities = elementwise_probabilities(prior, updates, penalty)
    out = []
    for j, prior_layer in enumerate(prior.tensors):
        if granularity == "element":
            weights = probabilities[j]
            stacked = np.stack([u.params.tensors[j] for u in updates])
            total = weights.sum(axis=0)
            suppressed = total < WEIGHT_SUM_FLOOR
            mixed = (stacked * weights).sum(axis=0) / np.where(suppressed, 1.0, total)
            out.append(np.where(suppressed, prior_layer, mixed))
            continue
        weights = probabilities[:, j]
        total = weights.sum()
        if total < WEIGHT_SUM_FLOOR:
            out.append(prior_layer)
            continue
        acc = np.zeros_like(prior_layer)
        for w, u in zip(weights, updates):
            if w > 0:
                acc += u.params.tensors[j] * w
        out.append(acc / total)
    return prior.replace(out)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Mean weighted by reported example counts."""
    _check_updates(updates)
    counts = np.array([u.reported_examples for u in updates], dtype=np.float64)
    weights = counts / counts.sum()
    out = []
    for j, ref in enumerate(updates[0].params.tensors):
        acc = np.zeros_like(ref)
        for w, u in zip(weights, updates):
            acc += w * u.params.tensors[j]
        out.append(acc)
    return updates[0].params.replace(out)


@dataclass(frozen=True)
class ServerOptState:
    """Moment accumulators and hyperparameters of an adaptive server optimizer.

    ``m`` and ``v`` start as ``None`` and are zero-filled on the first step.
    """

    strategy: str
    eta: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    m: tuple[np.ndarray, ...] | None = field(default=None, repr=False)
    v: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


def server_opt_step(
    state: ServerOptState, global_params: ModelParams, updates: Sequence[ClientUpdate]
) -> tuple[ModelParams, ServerOptState]:
    if state.strategy not in ADAPTIVE_STRATEGIES:
        raise ValueError(
            f"server_opt_step handles {ADAPTIVE_STRATEGIES}, not {state.strategy!r}"
        )
    _check_updates(updates, global_params)
    avg = fedavg_aggregate(updates)
    m_prev = state.m or tuple(np.zeros_like(t) for t in global_params.tensors)
    v_prev = state.v or tuple(np.zeros_like(t) for t in global_params.tensors)
    new_m, new_v, new_params = [], [], []
    for g, a, m, v in zip(global_params.tensors, avg.tensors, m_prev, v_prev):
        delta = a - g
        d2 = delta * delta
        m = state.beta1 * m + (1.0 - state.beta1) * delta
        if state.strategy == "fedadagrad":
            v = v + d2
        elif state.strategy == "fedadam":
            v = state.beta2 * v + (1.0 - state.beta2) * d2
        else:
            v = v - (1.0 - state.beta2) * d2 * np.sign(v - d2)
        new_m.append(m)
        new_v.append(v)
        new_params.append(g + state.eta * m / (np.sqrt(np.maximum(v, 0.0)) + state.tau))
    return global_params.replace(new_params), dataclasses.replace(
        state, m=tuple(new_m), v=tuple(new_v)
    )
