"""Synchronous federated training with data-proportional weighted averaging.

Each round the global model is cloned to the selected clients, every client
trains locally, and the server forms the new global parameters as
``sum_k (n_k / n) * w_k`` over participants. The aggregation side only ever
sees parameter sets and sample counts.

Determinism: a client's shuffles depend on (federation seed, client id,
absolute epoch index) and aggregation runs in ascending client id order with a
float64 accumulator, so the result does not depend on how client work is
scheduled.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .data import Dataset
from .model import ModelGraph, ModelSpec, build_model, forward_batch, train_epochs
from .numerics import OptimizerState

__all__ = [
    "AggregationError",
    "AggregationShapeError",
    "WeightSumError",
    "FedConfig",
    "ClientState",
    "ClientUpdate",
    "RoundReport",
    "FederationState",
    "FederationResult",
    "client_seed",
    "compute_scaling_weights",
    "clone_global",
    "client_local_update",
    "aggregate_fedavg",
    "aggregate_deltas",
    "select_clients",
    "run_round",
    "run_federation",
    "init_federation",
]


class AggregationError(ValueError):
    pass


class AggregationShapeError(AggregationError):
    pass


class WeightSumError(AggregationError):
    pass


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 30
    clients: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 0.001
    sample_clients: int | None = None   # None: every client, every round
    seed: int = 0
    workers: int = 1
    count_mode: str = "samples"         # or "batches": ceil(n/batch) * batch
    aggregation: str = "weights"        # or "deltas"

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be >= 0")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.sample_clients is not None and not 1 <= self.sample_clients <= self.clients:
            raise ValueError(f"sample_clients must be in [1, {self.clients}], got {self.sample_clients}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.count_mode not in ("samples", "batches"):
            raise ValueError(f"count_mode must be 'samples' or 'batches', got {self.count_mode!r}")
        if self.aggregation not in ("weights", "deltas"):
            raise ValueError(f"aggregation must be 'weights' or 'deltas', got {self.aggregation!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


def client_seed(seed: int, client_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(client_id)]).generate_state(1)[0])


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    optimizer: OptimizerState
    seed: int
    model: ModelGraph | None = None

    @property
    def n_samples(self) -> int:
        return len(self.data)

    def count(self, mode: str = "samples", batch_size: int = 32) -> int:
        if mode == "batches":
            return math.ceil(self.n_samples / batch_size) * batch_size
        return self.n_samples


@dataclass
class ClientUpdate:
    client_id: int
    n_samples: int
    params: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]
    loss: float
    accuracy: float


@dataclass
class RoundReport:
    round: int
    client_ids: list[int]
    counts: list[int]
    weights: list[float]
    local_loss: list[float]
    local_accuracy: list[float]
    val_accuracy: float | None = None
    val_macro_f1: float | None = None

    def records(self) -> list[dict]:
        return [{"round": self.round, "client_id": cid, "n_k": n, "weight": w,
                 "local_loss": loss, "local_acc": acc, "global_val_acc": self.val_accuracy}
                for cid, n, w, loss, acc in zip(self.client_ids, self.counts, self.weights,
                                                self.local_loss, self.local_accuracy)]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


@dataclass
class FederationState:
    round: int
    global_model: ModelGraph
    clients: list[ClientState]
    history: list[RoundReport] = field(default_factory=list)


@dataclass
class FederationResult:
    global_model: ModelGraph
    history: list[RoundReport]
    state: FederationState

    def history_jsonl(self) -> str:
        return "".join(r.to_jsonl() for r in self.history)


# ---------------------------------------------------------------------------
# protocol pieces


def compute_scaling_weights(counts: Sequence[int]) -> np.ndarray:
    """``n_k / sum(n)`` for the participating clients."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise AggregationError("no clients selected")
    if (counts < 1).any():
        raise AggregationError(f"every client needs at least one sample, got {counts.tolist()}")
    return counts / counts.sum()


def clone_global(global_model: ModelGraph, n_clients: int) -> list[ModelGraph]:
    if n_clients < 1:
        raise ValueError(f"need at least one client, got {n_clients}")
    return [global_model.clone() for _ in range(n_clients)]


def client_local_update(client: ClientState, global_model: ModelGraph, epochs: int,
                        batch_size: int, round_index: int = 0) -> ClientUpdate:
    """Train the client's clone for ``epochs`` and report weights and delta.

    Epoch numbering continues across rounds (``round_index * epochs`` onward)
    so a client's shuffle sequence matches one uninterrupted run.
    """
    if client.model is None:
        client.model = global_model.clone()
    model, hist = train_epochs(client.model, client.data, client.optimizer, epochs,
                               batch_size, client.seed, start_epoch=round_index * epochs)
    params = {k: v.copy() for k, v in model.params.items()}
    delta = {k: params[k].astype(np.float64) - global_model.params[k].astype(np.float64)
             for k in params}
    loss = hist.loss[-1] if hist.loss else float("nan")
    acc = hist.accuracy[-1] if hist.accuracy else float("nan")
    return ClientUpdate(client.client_id, client.n_samples, params, delta, loss, acc)


def _check_weights(updates: Sequence[Mapping[str, np.ndarray]], weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if len(updates) == 0 or len(updates) != len(weights):
        raise AggregationError(f"{len(updates)} updates for {len(weights)} weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise WeightSumError(f"aggregation weights sum to {weights.sum()!r}, not 1")
    ref = updates[0]
    for k, u in enumerate(updates[1:], start=1):
        if list(u) != list(ref):
            raise AggregationShapeError(f"update {k} has different parameter names")
        for name, arr in u.items():
            if np.shape(arr) != np.shape(ref[name]):
                raise AggregationShapeError(
                    f"update {k}: {name} has shape {np.shape(arr)}, expected {np.shape(ref[name])}")
    return weights


def aggregate_fedavg(updates: Sequence[Mapping[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    """Weighted average of parameter sets, summed in list order in float64
    and stored as float32."""
    weights = _check_weights(updates, weights)
    out = {}
    for name in updates[0]:
        acc = np.zeros(np.shape(updates[0][name]), dtype=np.float64)
        for w, u in zip(weights, updates):
            acc += w * np.asarray(u[name], dtype=np.float64)
        out[name] = acc.astype(np.float32)
    return out


def aggregate_deltas(global_params: Mapping[str, np.ndarray],
                     deltas: Sequence[Mapping[str, np.ndarray]], weights) -> dict[str, np.ndarray]:
    """``w + sum_k weight_k * delta_k``; equals :func:`aggregate_fedavg` on the
    full weights up to float rounding."""
    weights = _check_weights(deltas, weights)
    out = {}
    for name, base in global_params.items():
        acc = np.asarray(base, dtype=np.float64).copy()
        for w, d in zip(weights, deltas):
            acc += w * np.asarray(d[name], dtype=np.float64)
        out[name] = acc.astype(np.float32)
    return out


def select_clients(n_clients: int, m: int | None, seed: int, round_index: int) -> list[int]:
    if m is None or m == n_clients:
        return list(range(n_clients))
    rng = np.random.default_rng([int(seed), int(round_index), 1])
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def _evaluate(model: ModelGraph, val: Dataset | None) -> tuple[float | None, float | None]:
    if val is None or len(val) == 0:
        return None, None
    preds = np.argmax(forward_batch(model, val.images), axis=1)
    cm = metrics.confusion_matrix(preds, val.labels, model.spec.class_count)
    rep = metrics.classification_report(cm)
    return rep.accuracy, rep.macro_f1


def run_round(state: FederationState, config: FedConfig,
              val: Dataset | None = None) -> RoundReport:
    """One synchronous round; advances ``state`` in place."""
    t = state.round
    selected = select_clients(len(state.clients), config.sample_clients, config.seed, t)
    clients = [state.clients[i] for i in selected]
    for client, clone in zip(clients, clone_global(state.global_model, len(clients))):
        client.model = clone

    def work(client):
        return client_local_update(client, state.global_model, config.local_epochs,
                                   config.batch_size, round_index=t)

    if config.workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(config.workers) as ex:
            updates = list(ex.map(work, clients))
    else:
        updates = [work(c) for c in clients]

    counts = [c.count(config.count_mode, config.batch_size) for c in clients]
    weights = compute_scaling_weights(counts)
    if config.aggregation == "deltas":
        new = aggregate_deltas(state.global_model.params, [u.delta for u in updates], weights)
    else:
        new = aggregate_fedavg([u.params for u in updates], weights)
    model = state.global_model.clone()
    model.set_params(new)
    state.global_model = model
    state.round = t + 1
    acc, f1 = _evaluate(model, val)
    report = RoundReport(t + 1, selected, counts, weights.tolist(),
                         [u.loss for u in updates], [u.accuracy for u in updates], acc, f1)
    state.history.append(report)
    return report


def init_federation(spec: ModelSpec, client_data: Sequence[Dataset],
                    config: FedConfig) -> FederationState:
    if len(client_data) != config.clients:
        raise ValueError(f"config expects {config.clients} clients, got {len(client_data)} datasets")
    for k, d in enumerate(client_data):
        if len(d) == 0:
            raise ValueError(f"client {k} has no data")
    clients = [ClientState(k, d, OptimizerState(config.optimizer, lr=config.lr),
                           client_seed(config.seed, k))
               for k, d in enumerate(client_data)]
    return FederationState(0, build_model(spec), clients)


def run_federation(spec: ModelSpec, client_data: Sequence[Dataset], config: FedConfig,
                   val: Dataset | None = None) -> FederationResult:
    """Build a fresh global model from ``spec`` and run ``config.rounds`` rounds."""
    state = init_federation(spec, client_data, config)
    for _ in range(config.rounds):
        run_round(state, config, val)
    return FederationResult(state.global_model, state.history, state)
