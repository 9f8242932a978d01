"""
Training tasks

Masked-language-model pretraining, next-visit fine-tuning and their
evaluation metrics. Every loop is a single writer over (params, AdamState)
and draws all randomness from generators derived from the run seed.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from service.models import (
    DataValidationError,
    FIRST_DISEASE_ID,
    MASK_ID,
    AdamState,
    HyperParams,
    ModelParams,
    PatientRecord,
    SequenceBatch,
    Task,
    Vocabulary,
    adam_step,
    backward,
    encode_history,
    forward,
    init_params,
    make_nextvisit_example,
    sigmoid,
)

logger = logging.getLogger("flask.app")

MASK_SHARE = 0.8
RANDOM_SHARE = 0.1

RngSchedule = Callable[[int], np.random.Generator]


######################################################################
#  R A N D O M N E S S
######################################################################
def _entropy(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator determined only by the seed and the keys, e.g. derive_rng(7, "local", 3, "C02", 1)"""
    return np.random.default_rng(np.random.SeedSequence([_entropy(seed)] + [_entropy(key) for key in keys]))


def epoch_schedule(seed: int) -> RngSchedule:
    """Default schedule of centralized training: epoch e draws from (seed, "epoch", e)"""
    return lambda epoch: derive_rng(seed, "epoch", epoch)


######################################################################
#  D A T A S E T S
######################################################################
class MlmDataset:
    """Full histories of a set of patients, encoded once"""

    task = Task.MLM

    def __init__(self, patients: Sequence[PatientRecord], vocab: Vocabulary, max_len: int):
        self.patient_ids = [patient.patient_id for patient in patients]
        sequences = [encode_history(patient, patient.num_visits, vocab, max_len) for patient in patients]
        self.batch = SequenceBatch.from_sequences(sequences) if sequences else None
        self.truncated = sum(sequence.truncated for sequence in sequences)

    def __len__(self):
        return len(self.patient_ids)

    def __repr__(self):
        return f"<MlmDataset sequences=[{len(self)}] truncated=[{self.truncated}]>"

    def batches(self, rng: np.random.Generator, hyper: HyperParams) -> Iterator[tuple[SequenceBatch, np.ndarray]]:
        """Shuffled, masked mini-batches and their (N, 3) targets"""
        order = rng.permutation(len(self))
        for start in range(0, len(order), hyper.batch_size):
            masked = mask_batch(self.batch.take(order[start : start + hyper.batch_size]).trimmed(), hyper.mask_prob, rng, hyper.vocab_size)
            yield masked.batch, masked.targets


class NextVisitDataset:
    """
    Every (history, next visit) example of the patients with two or more visits

    Training draws one pivot per patient per epoch; evaluation uses one
    fixed pivot per patient.
    """

    task = Task.NEXT_VISIT

    def __init__(self, patients: Sequence[PatientRecord], vocab: Vocabulary, max_len: int):
        eligible = [patient for patient in patients if patient.num_visits >= 2]
        self.patient_ids = [patient.patient_id for patient in eligible]
        examples = [
            make_nextvisit_example(patient, pivot, vocab, max_len)
            for patient in eligible
            for pivot in range(1, patient.num_visits)
        ]
        self.counts = np.array([patient.num_visits - 1 for patient in eligible], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64) if eligible else self.counts
        self.batch = SequenceBatch.from_sequences([example.input for example in examples]) if examples else None
        self.labels = np.array([example.labels for example in examples], dtype=np.int64)
        self.num_groups = vocab.num_groups

    def __len__(self):
        return len(self.patient_ids)

    def __repr__(self):
        return f"<NextVisitDataset patients=[{len(self)}] pivots=[{int(self.counts.sum())}]>"

    @property
    def num_pivots(self) -> int:
        """Number of distinct (patient, pivot) examples"""
        return int(self.counts.sum())

    def sample(self, rng: np.random.Generator) -> tuple[SequenceBatch, np.ndarray]:
        """One example per patient with a uniformly drawn pivot"""
        rows = self.offsets + rng.integers(0, self.counts)
        return self.batch.take(rows), self.labels[rows]

    def fixed_examples(self, seed: int) -> tuple[SequenceBatch, np.ndarray]:
        """One example per patient with a pivot fixed by the seed"""
        return self.sample(derive_rng(seed, "eval-pivots"))

    def batches(self, rng: np.random.Generator, hyper: HyperParams) -> Iterator[tuple[SequenceBatch, np.ndarray]]:
        """Resampled pivots, shuffled into mini-batches with their multi-hot labels"""
        batch, labels = self.sample(rng)
        order = rng.permutation(len(self))
        for start in range(0, len(order), hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            yield batch.take(rows).trimmed(), labels[rows]


def build_dataset(task: Task, patients: Sequence[PatientRecord], vocab: Vocabulary, max_len: int):
    """Dataset of the given task over a set of patients"""
    if Task(task) == Task.MLM:
        return MlmDataset(patients, vocab, max_len)
    return NextVisitDataset(patients, vocab, max_len)


######################################################################
#  M A S K I N G
######################################################################
@dataclass(frozen=True)
class MaskedBatch:
    """A batch with corrupted tokens and the (sequence, position, original token) targets"""

    batch: SequenceBatch
    targets: np.ndarray


def mask_batch(batch: SequenceBatch, mask_prob: float, rng: np.random.Generator, vocab_size: int) -> MaskedBatch:
    """
    Selects disease tokens with probability mask_prob and corrupts them

    Selected tokens become MASK (80%), a random disease token (10%) or stay
    unchanged (10%). An empty selection is redrawn once, then one disease
    position is forced.
    """
    if not 0 <= mask_prob < 1:
        raise ValueError(f"mask_prob must lie in [0, 1), got {mask_prob}")
    tokens = batch.token_ids
    disease = tokens >= FIRST_DISEASE_ID
    if not disease.any():
        raise DataValidationError("batch has no disease tokens to mask")

    selected = disease & (rng.random(tokens.shape) < mask_prob)
    if not selected.any():
        selected = disease & (rng.random(tokens.shape) < mask_prob)
    if not selected.any():
        candidates = np.argwhere(disease)
        selected = np.zeros_like(disease)
        selected[tuple(candidates[rng.integers(len(candidates))])] = True

    rows, cols = np.nonzero(selected)
    originals = tokens[rows, cols]
    roll = rng.random(len(rows))
    to_mask = roll < MASK_SHARE
    to_random = (roll >= MASK_SHARE) & (roll < MASK_SHARE + RANDOM_SHARE)

    corrupted = tokens.copy()
    corrupted[rows[to_mask], cols[to_mask]] = MASK_ID
    corrupted[rows[to_random], cols[to_random]] = rng.integers(FIRST_DISEASE_ID, vocab_size, size=int(to_random.sum()))
    return MaskedBatch(batch=batch.with_tokens(corrupted), targets=np.stack([rows, cols, originals], axis=1))


######################################################################
#  M E T R I C S
######################################################################
def mlm_precision(params: ModelParams, dataset: MlmDataset, mask_prob: float, eval_seed: int) -> float:
    """Fraction of masked positions where the MLM argmax recovers the original token"""
    if not len(dataset):
        raise DataValidationError("cannot evaluate an empty dataset")
    rng = np.random.default_rng(eval_seed)
    size = params.hyper.batch_size
    correct = total = 0
    for start in range(0, len(dataset), size):
        masked = mask_batch(dataset.batch.take(np.arange(start, min(start + size, len(dataset)))).trimmed(), mask_prob, rng, params.hyper.vocab_size)
        logits = forward(params, masked.batch, Task.MLM)
        rows, cols, originals = masked.targets.T
        correct += int((logits[rows, cols].argmax(axis=-1) == originals).sum())
        total += len(originals)
    return correct / total


def average_precision(scores, relevance) -> float:
    """
    Micro average precision

    Items are ranked by descending score, ties by ascending index, and
    AP = (1/#positives) * sum of precision@k over the ranks k of the positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    relevance = np.asarray(relevance).ravel()
    if scores.shape != relevance.shape or not len(scores):
        raise DataValidationError(f"scores {scores.shape} and relevance {relevance.shape} must be equal and non-empty")
    if not np.isin(relevance, (0, 1)).all():
        raise DataValidationError("relevance must be 0 or 1")
    if not np.isfinite(scores).all():
        raise DataValidationError("scores must be finite")
    positives = int(relevance.sum())
    if positives == 0:
        raise DataValidationError("undefined AP")

    ranked = relevance[np.argsort(-scores, kind="stable")]
    precision_at_k = np.cumsum(ranked) / np.arange(1, len(ranked) + 1)
    return float(precision_at_k[ranked == 1].sum() / positives)


@dataclass
class EvaluationResult:
    """A single evaluation metric"""

    metric: str
    value: float
    n_examples: int

    def serialize(self) -> dict:
        """Serializes an EvaluationResult into a dictionary"""
        return {"metric": self.metric, "value": self.value, "n_examples": self.n_examples}


def evaluate_average_precision(params: ModelParams, dataset: NextVisitDataset, seed: int) -> EvaluationResult:
    """Micro AP of the next-visit head over the flattened (example, group) pairs"""
    if not len(dataset):
        raise DataValidationError("no next-visit examples to evaluate")
    batch, labels = dataset.fixed_examples(seed)
    size = params.hyper.batch_size
    scores = np.concatenate(
        [
            sigmoid(forward(params, batch.take(np.arange(start, min(start + size, len(batch)))).trimmed(), Task.NEXT_VISIT))
            for start in range(0, len(batch), size)
        ]
    )
    return EvaluationResult("average_precision", average_precision(scores, labels), len(batch))


def validation_metric(params: ModelParams, dataset, seed: int) -> float:
    """The model-selection metric of the dataset's task"""
    if dataset.task == Task.MLM:
        return mlm_precision(params, dataset, params.hyper.mask_prob, seed)
    return evaluate_average_precision(params, dataset, seed).value


######################################################################
#  T R A I N   L O G
######################################################################
@dataclass
class EpochRecord:
    """Loss and validation metric after one epoch"""

    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainLog:
    """Per-epoch records of a training run, epochs numbered from 1"""

    task: Task
    records: list[EpochRecord] = field(default_factory=list)
    baseline_metric: Optional[float] = None

    @property
    def selected_epoch(self) -> Optional[int]:
        """Epoch of the best validation metric, the first on ties"""
        if not self.records:
            return None
        return self.records[int(np.argmax([record.val_metric for record in self.records]))].epoch

    @property
    def selected_metric(self) -> Optional[float]:
        """Validation metric of the selected epoch"""
        if not self.records:
            return None
        return self.records[self.selected_epoch - 1].val_metric

    def to_frame(self) -> pd.DataFrame:
        """Records as a DataFrame with columns epoch, train_loss, val_metric"""
        return pd.DataFrame(
            [(record.epoch, record.train_loss, record.val_metric) for record in self.records],
            columns=["epoch", "train_loss", "val_metric"],
        )

    def to_csv(self, path: str) -> None:
        """Writes the records as CSV"""
        self.to_frame().to_csv(path, index=False)


######################################################################
#  T R A I N I N G   L O O P S
######################################################################
def run_epoch(
    params: ModelParams, state: AdamState, dataset, hyper: HyperParams, rng: np.random.Generator
) -> tuple[ModelParams, AdamState, float]:
    """One pass over a dataset; returns the new params, the new state and the mean batch loss"""
    if not len(dataset):
        raise DataValidationError("cannot train on an empty dataset")
    losses, sizes = [], []
    for batch, targets in dataset.batches(rng, hyper):
        loss, grads = backward(params, batch, dataset.task, targets)
        params, state = adam_step(params, grads, state, hyper)
        losses.append(loss)
        sizes.append(len(batch))
    return params, state, float(np.average(losses, weights=sizes))


def _train(
    train,
    val,
    init: ModelParams,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    rng_schedule: Optional[RngSchedule],
) -> tuple[ModelParams, TrainLog]:
    if epochs < 1:
        raise ValueError(f"epochs must be at least 1, got {epochs}")
    schedule = rng_schedule or epoch_schedule(seed)
    params = ModelParams(hyper, init.tensors)
    params.validate()
    state = AdamState.zeros_like(params)
    log = TrainLog(task=train.task, baseline_metric=validation_metric(params, val, seed))
    logger.info("%s training: %d epochs on %d examples, untrained val=%.4f", train.task.value, epochs, len(train), log.baseline_metric)

    best, best_metric = None, None
    for epoch in range(1, epochs + 1):
        params, state, loss = run_epoch(params, state, train, hyper, schedule(epoch))
        metric = validation_metric(params, val, seed)
        log.records.append(EpochRecord(epoch, loss, metric))
        logger.info("%s epoch %d: loss=%.4f val=%.4f", train.task.value, epoch, loss, metric)
        if best_metric is None or metric > best_metric:
            best, best_metric = params, metric
    logger.info("%s selected epoch %d (val=%.4f)", train.task.value, log.selected_epoch, best_metric)
    return best, log


def train_mlm(
    train: MlmDataset,
    val: MlmDataset,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    init: ModelParams = None,
    rng_schedule: RngSchedule = None,
) -> tuple[ModelParams, TrainLog]:
    """Pretrains with masked language modeling and keeps the best-precision epoch"""
    return _train(train, val, init or init_params(hyper, seed), hyper, epochs, seed, rng_schedule)


def train_nextvisit(
    train: NextVisitDataset,
    val: NextVisitDataset,
    init: ModelParams,
    hyper: HyperParams,
    epochs: int,
    seed: int,
    rng_schedule: RngSchedule = None,
) -> tuple[ModelParams, TrainLog]:
    """Fine-tunes every tensor on next-visit prediction and keeps the best-AP epoch"""
    return _train(train, val, init, hyper, epochs, seed, rng_schedule)
