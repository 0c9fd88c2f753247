"""Round-based federation: pretrain, broadcast, local training, aggregation.

Client ids are zero-based; client 0 is the one the stock attack scenarios
poison.  Partition 0 is reserved for pretraining and partition ``i + 1``
belongs to client ``i``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fedbayes import attacks
from fedbayes.aggregation import (
    ADAPTIVE_STRATEGIES,
    STRATEGIES,
    ClientUpdate,
    ServerOptState,
    elementwise_probabilities,
    fedavg_aggregate,
    fedbayes_aggregate,
    fedbayes_probabilities,
    server_opt_step,
)
from fedbayes.attacks import AttackSpec
from fedbayes.datasets import Dataset
from fedbayes.nn import ModelParams, TrainConfig, evaluate, init_params, predict, train_local

log = logging.getLogger(__name__)

# Seed-derivation id for the pretraining run; never a real client id.
PRETRAIN_ID = 2**32 - 1


def derive_seed(master_seed: int, client_id: int, round_idx: int) -> int:
    """Mix (master, client, round) into a 63-bit seed via numpy's SeedSequence."""
    state = np.random.SeedSequence([master_seed, client_id, round_idx]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    local_epochs: int = 5
    client_count: int = 8
    strategy: str = "fedbayes"
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    attack_assignments: Mapping[int, AttackSpec] = field(default_factory=dict)
    master_seed: int = 0
    pretrain_epochs: int = 10
    pretrain_target_accuracy: float | None = None
    pretrain_learning_rate: float | None = None
    hidden_sizes: tuple[int, ...] = (64,)
    server_lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    penalty: float = 100.0
    granularity: str = "element"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.client_count < 1:
            raise ValueError(f"client_count must be >= 1, got {self.client_count}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        for cid in self.attack_assignments:
            if not 0 <= cid < self.client_count:
                raise ValueError(f"attack assigned to client {cid}, but client_count={self.client_count}")
        if self.pretrain_epochs < 1:
            raise ValueError(f"pretrain_epochs must be >= 1, got {self.pretrain_epochs}")
        if self.pretrain_target_accuracy is not None and not 0 <= self.pretrain_target_accuracy <= 1:
            raise ValueError("pretrain_target_accuracy must be in [0, 1]")
        if self.granularity not in ("layer", "element"):
            raise ValueError(f"granularity must be 'layer' or 'element', got {self.granularity!r}")
        object.__setattr__(self, "attack_assignments", dict(self.attack_assignments))

    def architecture(self, input_dim: int, class_count: int) -> tuple[int, ...]:
        return (input_dim, *self.hidden_sizes, class_count)

    def attack_for(self, client_id: int) -> AttackSpec:
        return self.attack_assignments.get(client_id, attacks.BENIGN)

    def server_state(self) -> ServerOptState:
        return ServerOptState(self.strategy, self.server_lr, self.beta1, self.beta2, self.tau)


@dataclass
class MetricsRecord:
    round: int
    strategy: str
    clean_accuracy: float
    clean_loss: float
    triggered_accuracy: float | None = None
    attack_success_rate: float | None = None
    per_client_accuracy: list[float] = field(default_factory=list)
    # FedBayes only: penalized weight per (client, layer); not part of the CSV.
    client_weights: np.ndarray | None = field(default=None, repr=False)


def pretrain(subset0: Dataset, test: Dataset, cfg: FederationConfig) -> ModelParams:
    """Train the initial global model on the reserved partition.

    Stops after ``pretrain_epochs`` or as soon as clean test accuracy reaches
    ``pretrain_target_accuracy``.  When a target is set but never reached the
    best epoch is returned with a warning.
    """
    if subset0.n == 0:
        raise ValueError("pretraining partition is empty")
    arch = cfg.architecture(subset0.dim, subset0.class_count)
    seed = derive_seed(cfg.master_seed, PRETRAIN_ID, 0)
    params = init_params(arch, seed)
    lr = cfg.pretrain_learning_rate or cfg.train_cfg.learning_rate
    target = cfg.pretrain_target_accuracy
    best, best_acc = params, -1.0
    acc = 0.0
    for epoch in range(cfg.pretrain_epochs):
        step = TrainConfig(1, cfg.train_cfg.batch_size, lr, seed + epoch)
        params = train_local(params, subset0, step)
        if target is None:
            continue
        acc, _ = evaluate(params, test)
        if acc > best_acc:
            best, best_acc = params, acc
        if acc >= target:
            log.info("pretrain reached %.4f after %d epochs", acc, epoch + 1)
            return params
    if target is None:
        acc, _ = evaluate(params, test)
        log.info("pretrain finished %d epochs at accuracy %.4f", cfg.pretrain_epochs, acc)
        return params
    log.warning(
        "pretrain target %.3f not reached in %d epochs; best accuracy %.4f",
        target, cfg.pretrain_epochs, best_acc,
    )
    return best


def _local_update(
    global_params: ModelParams, client_id: int, data: Dataset, spec: AttackSpec,
    cfg: FederationConfig, round_idx: int,
) -> ClientUpdate:
    train_cfg = TrainConfig(
        cfg.local_epochs, cfg.train_cfg.batch_size, cfg.train_cfg.learning_rate,
        derive_seed(cfg.master_seed, client_id, round_idx),
    )
    update = ClientUpdate(client_id, train_local(global_params, data, train_cfg), data.n)
    if spec.weight_multiplier != 1.0:
        update = attacks.inflate_report(update, spec.weight_multiplier)
    return update


def train_clients(
    global_params: ModelParams,
    clients: Sequence[tuple[Dataset, AttackSpec]],
    cfg: FederationConfig,
    round_idx: int,
) -> list[ClientUpdate]:
    """Local training for every client; result is ordered by client id."""
    jobs = [(cid, data, spec) for cid, (data, spec) in enumerate(clients)]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            futures = [
                pool.submit(_local_update, global_params, cid, d, s, cfg, round_idx)
                for cid, d, s in jobs
            ]
            return [f.result() for f in futures]
    return [_local_update(global_params, cid, d, s, cfg, round_idx) for cid, d, s in jobs]


def aggregate(
    global_params: ModelParams,
    updates: Sequence[ClientUpdate],
    state: ServerOptState,
    cfg: FederationConfig,
) -> tuple[ModelParams, ServerOptState, np.ndarray | None]:
    """Apply the configured strategy; the third item holds FedBayes weights."""
    updates = sorted(updates, key=lambda u: u.client_id)
    if cfg.strategy == "fedbayes":
        if cfg.granularity == "element":
            probs = elementwise_probabilities(global_params, updates, cfg.penalty)
            summary = np.array([[p[i].mean() for p in probs] for i in range(len(updates))])
        else:
            probs = fedbayes_probabilities(global_params, updates, cfg.penalty)
            summary = probs
        new_params = fedbayes_aggregate(
            global_params, updates, probabilities=probs, granularity=cfg.granularity
        )
        return new_params, state, summary
    if cfg.strategy == "fedavg":
        return fedavg_aggregate(updates), state, None
    if cfg.strategy in ADAPTIVE_STRATEGIES:
        new_params, new_state = server_opt_step(state, global_params, updates)
        return new_params, new_state, None
    raise ValueError(f"unknown strategy {cfg.strategy!r}")


def run_round(
    global_params: ModelParams,
    clients: Sequence[tuple[Dataset, AttackSpec]],
    state: ServerOptState,
    cfg: FederationConfig,
    round_idx: int,
) -> tuple[ModelParams, ServerOptState]:
    """One broadcast/train/aggregate cycle over already-poisoned client data."""
    updates = train_clients(global_params, clients, cfg, round_idx)
    new_params, new_state, _ = aggregate(global_params, updates, state, cfg)
    return new_params, new_state


def _backdoor_spec(cfg: FederationConfig) -> AttackSpec | None:
    for cid in sorted(cfg.attack_assignments):
        spec = cfg.attack_assignments[cid]
        if spec.kind == "backdoor":
            return spec
    return None


def attack_success_rate(
    params: ModelParams, triggered_test: Dataset, spec: AttackSpec
) -> float | None:
    """Fraction of trigger-stamped test rows predicted as the target label.

    Rows whose true label already is the target are left out, so a clean
    model scores near 0 rather than near the target class frequency.
    """
    assert spec.trigger is not None
    pixels = spec.trigger.flat_indices(triggered_test.image_height, triggered_test.image_width)
    stamped = np.all(triggered_test.features[:, pixels] == spec.trigger.value, axis=1)
    stamped &= triggered_test.labels != spec.target_label
    if not stamped.any():
        return None
    preds = predict(params, triggered_test.features[stamped])
    return float(np.mean(preds == spec.target_label))


def _record(
    round_idx: int, params: ModelParams, cfg: FederationConfig, clean_test: Dataset,
    triggered_test: Dataset | None, per_client: list[float], weights: np.ndarray | None = None,
) -> MetricsRecord:
    acc, loss = evaluate(params, clean_test)
    rec = MetricsRecord(round_idx, cfg.strategy, acc, loss, per_client_accuracy=per_client,
                        client_weights=weights)
    if triggered_test is not None:
        rec.triggered_accuracy, _ = evaluate(params, triggered_test)
        spec = _backdoor_spec(cfg)
        if spec is not None:
            rec.attack_success_rate = attack_success_rate(params, triggered_test, spec)
    return rec


def poison_clients(
    partitions: Sequence[Dataset], cfg: FederationConfig
) -> list[tuple[Dataset, AttackSpec]]:
    """Apply each client's attack once; partition 0 is skipped (pretraining)."""
    clients = []
    for cid in range(cfg.client_count):
        spec = cfg.attack_for(cid)
        clients.append((attacks.apply_attack(partitions[cid + 1], spec), spec))
    return clients


def run_experiment(
    cfg: FederationConfig,
    partitions: Sequence[Dataset],
    clean_test: Dataset,
    triggered_test: Dataset | None = None,
    initial_params: ModelParams | None = None,
) -> list[MetricsRecord]:
    """Pretrain, then ``cfg.rounds`` rounds; returns records for rounds 0..R.

    Round 0 describes the pretrained model (every client holds it, so its
    per-client accuracies all equal the global one).  ``initial_params``
    skips pretraining, which lets several strategies share one pretrained
    model.
    """
    if len(partitions) != cfg.client_count + 1:
        raise ValueError(
            f"expected {cfg.client_count + 1} partitions (pretrain + clients), got {len(partitions)}"
        )
    if _backdoor_spec(cfg) is not None and triggered_test is None:
        raise ValueError("a backdoor attack is configured but no triggered test set was given")
    params = initial_params if initial_params is not None else pretrain(partitions[0], clean_test, cfg)
    clients = poison_clients(partitions, cfg)
    state = cfg.server_state()
    first = _record(0, params, cfg, clean_test, triggered_test, [])
    first.per_client_accuracy = [first.clean_accuracy] * cfg.client_count
    records = [first]
    for r in range(1, cfg.rounds + 1):
        updates = train_clients(params, clients, cfg, r)
        per_client = [evaluate(u.params, clean_test)[0] for u in updates]
        params, state, weights = aggregate(params, updates, state, cfg)
        rec = _record(r, params, cfg, clean_test, triggered_test, per_client, weights)
        log.info(
            "round %d %s acc=%.4f loss=%.4f asr=%s",
            r, cfg.strategy, rec.clean_accuracy, rec.clean_loss, rec.attack_success_rate,
        )
        records.append(rec)
    return records
