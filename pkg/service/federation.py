"""
Federated averaging and its baselines

FedAvg rounds sample a fraction of the clients, train each selected client
from the same global snapshot and average the returned tensors weighted by
the clients' example counts. Centralized training pools every client and
the local baseline trains each client alone.

Client Adam moments follow one of three policies:

    shared      clients start from the global moments, which are averaged
                with the weights (the default)
    persistent  each client keeps its own moments between the rounds it
                takes part in
    reset       every local update starts from zero moments
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from service.models import (
    AdamState,
    ClientDataset,
    ConfigBase,
    DataValidationError,
    HyperParams,
    ModelParams,
    ParamGradients,
    PatientRecord,
    Task,
    TensorBundle,
    Vocabulary,
    init_params,
    split_cohort,
    transfer_for_finetune,
)
from service.training import (
    MlmDataset,
    NextVisitDataset,
    TrainLog,
    build_dataset,
    derive_rng,
    evaluate_average_precision,
    run_epoch,
    train_mlm,
    train_nextvisit,
    validation_metric,
)

logger = logging.getLogger("flask.app")

ROUND_LOG_COLUMNS = ["round", "client_id", "n_examples", "local_loss", "global_val_metric"]

SHARED_OPTIMIZER = "shared"
PERSISTENT_OPTIMIZER = "persistent"
RESET_OPTIMIZER = "reset"
CLIENT_OPTIMIZERS = (SHARED_OPTIMIZER, PERSISTENT_OPTIMIZER, RESET_OPTIMIZER)


######################################################################
#  F E D E R A T I O N   C O N F I G
######################################################################
@dataclass(frozen=True)
class FederationConfig(ConfigBase):
    """Round loop settings for one training phase"""

    client_fraction: float = 0.1
    rounds: int = 20
    local_epochs: int = 1
    task: Task = Task.NEXT_VISIT
    hyper: HyperParams = field(default_factory=HyperParams)
    seed: int = 0
    workers: int = 1
    client_optimizer: str = SHARED_OPTIMIZER
    epochs: Optional[int] = None

    def __post_init__(self):
        self._require(0 < self.client_fraction <= 1, "client_fraction must lie in (0, 1]")
        self._require(self.rounds >= 1, "rounds must be at least 1")
        self._require(self.local_epochs >= 1, "local_epochs must be at least 1")
        self._require(self.workers >= 1, "workers must be at least 1")
        self._require(self.client_optimizer in CLIENT_OPTIMIZERS, f"client_optimizer must be one of {list(CLIENT_OPTIMIZERS)}")
        self._require(self.epochs is None or (isinstance(self.epochs, int) and self.epochs >= 1), "epochs must be null or at least 1")
        self._require(self.task in (Task.MLM, Task.NEXT_VISIT, "MLM", "NEXT_VISIT"), f"unknown task {self.task}")
        object.__setattr__(self, "task", Task(self.task))

    @property
    def total_epochs(self) -> int:
        """Epoch budget of the centralized and local regimes, rounds * local_epochs unless set"""
        return self.epochs or self.rounds * self.local_epochs

    def serialize(self) -> dict:
        data = super().serialize()
        data["task"] = self.task.value
        return data

    @classmethod
    def deserialize(cls, data: dict):
        if isinstance(data, dict) and isinstance(data.get("hyper"), dict):
            data = {**data, "hyper": HyperParams.deserialize(data["hyper"])}
        return super().deserialize(data)


######################################################################
#  C L I E N T S
######################################################################
class FederatedClient:
    """A center's task dataset"""

    def __init__(self, center_id: str, dataset):
        self.center_id = center_id
        self.dataset = dataset

    def __repr__(self):
        return f"<FederatedClient {self.center_id} examples=[{self.num_examples}]>"

    @property
    def num_examples(self) -> int:
        """Training-example count for the client's task"""
        return len(self.dataset)


def make_clients(shards: Sequence[ClientDataset], task: Task, vocab: Vocabulary, max_len: int) -> list[FederatedClient]:
    """Task datasets for every shard; shards without examples for the task are left out"""
    clients = [FederatedClient(shard.center_id, build_dataset(task, shard.patients, vocab, max_len)) for shard in shards]
    empty = [client.center_id for client in clients if not client.num_examples]
    if empty:
        logger.warning("Clients without %s examples left out: %s", Task(task).value, empty)
    return [client for client in clients if client.num_examples]


@dataclass
class ClientUpdate:
    """Parameters and optimizer state returned by a client after its local epochs"""

    params: ModelParams
    num_examples: int
    client_id: str
    local_loss: float = float("nan")
    state: Optional[AdamState] = None


@dataclass
class RoundLog:
    """What happened in one round"""

    round_index: int
    selected: list[str]
    local_losses: dict[str, float]
    num_examples: dict[str, int]
    val_metric: float

    def rows(self) -> list[tuple]:
        """One CSV row per selected client"""
        return [
            (self.round_index, client_id, self.num_examples[client_id], self.local_losses[client_id], self.val_metric)
            for client_id in self.selected
        ]


def write_round_logs(logs: Sequence[RoundLog], path: str) -> None:
    """Writes the round logs as CSV"""
    pd.DataFrame([row for log in logs for row in log.rows()], columns=ROUND_LOG_COLUMNS).to_csv(path, index=False)


######################################################################
#  R O U N D   O P E R A T I O N S
######################################################################
def select_clients(client_ids: Sequence[str], client_fraction: float, rng: np.random.Generator) -> list[str]:
    """Samples max(1, round(C*K)) clients without replacement, returned in sorted order"""
    ids = sorted(client_ids)
    if not ids:
        raise DataValidationError("no clients to select from")
    if not 0 < client_fraction <= 1:
        raise ValueError(f"client_fraction must lie in (0, 1], got {client_fraction}")
    size = min(len(ids), max(1, math.floor(client_fraction * len(ids) + 0.5)))
    return sorted(str(client_id) for client_id in rng.choice(ids, size=size, replace=False))


def local_update(
    global_params: ModelParams,
    client: FederatedClient,
    config: FederationConfig,
    round_index: int = 1,
    state: AdamState = None,
) -> ClientUpdate:
    """Runs E local epochs from the global snapshot, starting Adam from state or from zero moments"""
    if not client.num_examples:
        raise DataValidationError(f"client {client.center_id} has no training examples")
    params = global_params
    state = state or AdamState.zeros_like(params)
    loss = float("nan")
    for epoch in range(1, config.local_epochs + 1):
        rng = derive_rng(config.seed, "local", round_index, client.center_id, epoch)
        params, state, loss = run_epoch(params, state, client.dataset, config.hyper, rng)
    logger.debug("Round %d client %s: loss=%.4f", round_index, client.center_id, loss)
    return ClientUpdate(params=params, num_examples=client.num_examples, client_id=client.center_id, local_loss=loss, state=state)


def _checked(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise DataValidationError("nothing to aggregate")
    # a fixed summation order makes the result independent of arrival order
    updates = sorted(updates, key=lambda update: update.client_id)
    reference = updates[0].params
    for update in updates:
        if update.num_examples <= 0:
            raise DataValidationError(f"client {update.client_id} reported {update.num_examples} examples")
        if set(update.params) != set(reference):
            raise DataValidationError(f"client {update.client_id} sent a different tensor set")
        for name, value in reference.items():
            if update.params[name].shape != value.shape:
                raise DataValidationError(
                    f"tensor '{name}' from client {update.client_id} has shape {update.params[name].shape}, expected {value.shape}"
                )
    return updates


def _weighted_mean(bundles: Sequence[TensorBundle], counts: Sequence[int], kind: type) -> TensorBundle:
    total = float(sum(counts))
    reference = bundles[0]
    tensors = {}
    for name, value in reference.items():
        weighted = np.zeros(value.shape, dtype=np.float64)
        for bundle, count in zip(bundles, counts):
            weighted += count * bundle[name].astype(np.float64)
        tensors[name] = (weighted / total).astype(value.dtype)
    return kind(reference.hyper, tensors)


def aggregate(updates: Sequence[ClientUpdate]) -> ModelParams:
    """Every entry becomes sum_k n_k * w_k / sum_k n_k, accumulated in float64"""
    updates = _checked(updates)
    return _weighted_mean([update.params for update in updates], [update.num_examples for update in updates], ModelParams)


def aggregate_states(updates: Sequence[ClientUpdate]) -> AdamState:
    """Example-weighted mean of the clients' Adam moments; the step counter is the largest one"""
    updates = _checked(updates)
    if any(update.state is None for update in updates):
        raise DataValidationError("every update must carry its optimizer state")
    counts = [update.num_examples for update in updates]
    return AdamState(
        _weighted_mean([update.state.first for update in updates], counts, ParamGradients),
        _weighted_mean([update.state.second for update in updates], counts, ParamGradients),
        max(update.state.step for update in updates),
    )


def _train_selected(
    global_params: ModelParams,
    clients: list[FederatedClient],
    config: FederationConfig,
    round_index: int,
    states: dict[str, Optional[AdamState]],
):
    def train(client):
        return local_update(global_params, client, config, round_index, states.get(client.center_id))

    if config.workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(train, clients))
    return [train(client) for client in clients]


######################################################################
#  R E G I M E S
######################################################################
def run_fedavg(
    clients: Sequence[FederatedClient], config: FederationConfig, val, init: ModelParams = None
) -> tuple[ModelParams, list[RoundLog]]:
    """R rounds of FedAvg; returns the global params of the best validation round"""
    active = {client.center_id: client for client in clients if client.num_examples}
    if not active:
        raise DataValidationError("no client has training examples")
    global_params = ModelParams(config.hyper, (init or init_params(config.hyper, config.seed)).tensors)
    global_params.validate()
    # optimizer moments live for one run only
    global_state = AdamState.zeros_like(global_params)
    client_states: dict[str, AdamState] = {}

    logs, best, best_metric = [], None, None
    for round_index in range(1, config.rounds + 1):
        selected = select_clients(list(active), config.client_fraction, derive_rng(config.seed, "select", round_index))
        if config.client_optimizer == SHARED_OPTIMIZER:
            starts = {client_id: global_state for client_id in selected}
        elif config.client_optimizer == PERSISTENT_OPTIMIZER:
            starts = {client_id: client_states.get(client_id) for client_id in selected}
        else:
            starts = {}
        updates = _train_selected(global_params, [active[client_id] for client_id in selected], config, round_index, starts)
        global_params = aggregate(updates)
        if config.client_optimizer == SHARED_OPTIMIZER:
            global_state = aggregate_states(updates)
        elif config.client_optimizer == PERSISTENT_OPTIMIZER:
            client_states.update({update.client_id: update.state for update in updates})
        metric = validation_metric(global_params, val, config.seed)
        logs.append(
            RoundLog(
                round_index=round_index,
                selected=selected,
                local_losses={update.client_id: update.local_loss for update in updates},
                num_examples={update.client_id: update.num_examples for update in updates},
                val_metric=metric,
            )
        )
        logger.info("%s round %d: clients=%s val=%.4f", config.task.value, round_index, selected, metric)
        if best_metric is None or metric > best_metric:
            best, best_metric = global_params, metric
    logger.info("%s FedAvg selected round %d of %d", config.task.value, 1 + [log.val_metric for log in logs].index(best_metric), config.rounds)
    return best, logs


def pool_clients(shards: Sequence[ClientDataset]) -> list[PatientRecord]:
    """Every patient of every shard, in shard order"""
    return [patient for shard in shards for patient in shard.patients]


def run_centralized(train, val, config: FederationConfig, init: ModelParams = None) -> tuple[ModelParams, TrainLog]:
    """Trains on pooled data for rounds * local_epochs epochs"""
    if config.task == Task.MLM:
        return train_mlm(train, val, config.hyper, config.total_epochs, config.seed, init=init)
    return train_nextvisit(train, val, init or init_params(config.hyper, config.seed), config.hyper, config.total_epochs, config.seed)


@dataclass
class LocalBaselineResult:
    """Per-client models and scores of the local-only regime"""

    params: dict[str, ModelParams]
    scores: dict[str, float]
    num_examples: dict[str, int]
    skipped: dict[str, str]
    weighted_ap: float


def weighted_average_precision(scores: dict[str, float], num_examples: dict[str, int]) -> float:
    """sum_k n_k * AP_k / sum_k n_k"""
    if not scores:
        raise DataValidationError("no client could be evaluated")
    total = sum(num_examples[client_id] for client_id in scores)
    return sum(num_examples[client_id] * ap for client_id, ap in scores.items()) / total


def _train_one_local(
    shard: ClientDataset,
    test_patients: Sequence[PatientRecord],
    config: FederationConfig,
    vocab: Vocabulary,
    val_fraction: float,
    mlm_epochs: int,
):
    hyper, seed = config.hyper, config.seed
    if len(shard) < 2:
        return None, "fewer than 2 training patients"
    train_patients, val_patients = split_cohort(shard.patients, 1.0 - val_fraction, seed)
    train = NextVisitDataset(train_patients, vocab, hyper.max_len)
    test = NextVisitDataset(test_patients, vocab, hyper.max_len)
    if not len(train):
        return None, "no next-visit training examples"
    if not len(test):
        return None, "no next-visit test examples"
    val = NextVisitDataset(val_patients, vocab, hyper.max_len)
    if not len(val):
        logger.warning("Client %s has no next-visit validation examples, selecting on training examples", shard.center_id)
        val = train

    init = init_params(hyper, seed)
    if mlm_epochs:
        pretrained, _ = train_mlm(
            MlmDataset(train_patients, vocab, hyper.max_len), MlmDataset(val_patients, vocab, hyper.max_len), hyper, mlm_epochs, seed
        )
        init = transfer_for_finetune(pretrained, seed)
    params, _ = train_nextvisit(train, val, init, hyper, config.total_epochs, seed)
    return (params, evaluate_average_precision(params, test, seed).value, len(train)), None


def run_local_baseline(
    shards: Sequence[ClientDataset],
    config: FederationConfig,
    test_sets: dict[str, Sequence[PatientRecord]],
    vocab: Vocabulary,
    val_fraction: float = 0.1,
    mlm_epochs: int = 0,
) -> LocalBaselineResult:
    """
    Trains and evaluates every client on its own data

    mlm_epochs > 0 pretrains each client with local MLM before fine-tuning.
    Clients that cannot be trained or evaluated are skipped and reported.
    """
    config = replace(config, task=Task.NEXT_VISIT)
    result = LocalBaselineResult(params={}, scores={}, num_examples={}, skipped={}, weighted_ap=float("nan"))
    for shard in shards:
        outcome, reason = _train_one_local(shard, test_sets.get(shard.center_id, []), config, vocab, val_fraction, mlm_epochs)
        if outcome is None:
            logger.warning("Local baseline skipped client %s: %s", shard.center_id, reason)
            result.skipped[shard.center_id] = reason
            continue
        params, ap, count = outcome
        result.params[shard.center_id] = params
        result.scores[shard.center_id] = ap
        result.num_examples[shard.center_id] = count
        logger.info("Local client %s: AP=%.4f on %d training examples", shard.center_id, ap, count)
    result.weighted_ap = weighted_average_precision(result.scores, result.num_examples)
    return result
