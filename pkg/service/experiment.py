"""
Experiment grid

A run crosses regimes (FL, CENTRALIZED, LOCAL), pretraining conditions and
min-visit thresholds, repeats every cell for each seed and reports the
next-visit average precision with normal-approximation 95% intervals.

Run directory layout (under FEDSEQ_RUN_DIR/<run_id>):

    run.json            {"run_id": ..., "config": {...}}
    metrics.csv         one measurement row per (cell, seed)
    summary.csv         mean and ci95 per cell
    cohort_stats.csv    cohort sizes per (seed, threshold)
    pretrain/...        MLM checkpoints and logs
    cells/...           next-visit checkpoints and logs
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from service import config as service_config
from service.federation import (
    SHARED_OPTIMIZER,
    FederationConfig,
    make_clients,
    pool_clients,
    run_centralized,
    run_fedavg,
    run_local_baseline,
    write_round_logs,
)
from service.models import (
    CohortData,
    ConfigBase,
    ConfigError,
    DataValidationError,
    HyperParams,
    ModelParams,
    Partition,
    PatientRecord,
    SynthConfig,
    Task,
    Vocabulary,
    build_vocabulary,
    filter_min_visits,
    generate_cohort,
    identity_group_table,
    init_params,
    load_checkpoint,
    load_dataset,
    partition_cohort,
    save_checkpoint,
    split_cohort,
    transfer_for_finetune,
)
from service.training import EvaluationResult, MlmDataset, NextVisitDataset, evaluate_average_precision

logger = logging.getLogger("flask.app")

METRIC_NAME = "average_precision"
TEST_SPLIT = "test"
STATUS_OK = "ok"
STATUS_FAILED = "failed"
CI_Z = 1.96

RUN_FILE = "run.json"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
COHORT_STATS_FILE = "cohort_stats.csv"
MLM_CHECKPOINT = "mlm.ckpt"
NEXT_VISIT_CHECKPOINT = "next_visit.ckpt"

HYPER_FIELDS = (
    "hidden",
    "layers",
    "heads",
    "ffn_dim",
    "max_len",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "mask_prob",
    "dropout",
)


class Regime(str, Enum):
    """Where the next-visit model is trained"""

    FL = "FL"
    CENTRALIZED = "CENTRALIZED"
    LOCAL = "LOCAL"


class Pretraining(str, Enum):
    """Where the MLM initialization comes from"""

    FL_MLM = "FL_MLM"
    CENTRAL_MLM = "CENTRAL_MLM"
    LOCAL_MLM = "LOCAL_MLM"
    NONE = "NONE"


CONFIGURABLE_PRETRAINING = (Pretraining.FL_MLM.value, Pretraining.CENTRAL_MLM.value, Pretraining.NONE.value)
BENCHMARK_CHRONIC_RATE = 0.5
MATCHED_PRETRAINING = {
    Regime.FL: Pretraining.FL_MLM,
    Regime.CENTRALIZED: Pretraining.CENTRAL_MLM,
    Regime.LOCAL: Pretraining.LOCAL_MLM,
}


def benchmark_synth() -> SynthConfig:
    """Generator settings of the default synthetic benchmark; config files override single keys"""
    return SynthConfig(chronic_rate=BENCHMARK_CHRONIC_RATE)


def _int_list(values) -> bool:
    return isinstance(values, (list, tuple)) and bool(values) and all(isinstance(value, int) for value in values)


######################################################################
#  E X P E R I M E N T   C O N F I G
######################################################################
@dataclass(frozen=True)
class ExperimentConfig(ConfigBase):
    """Every knob of an experiment; the JSON config file carries exactly these keys"""

    data_dir: Optional[str] = None
    synth: SynthConfig = field(default_factory=benchmark_synth)
    thresholds: list = field(default_factory=lambda: [1, 3, 5, 15])
    regimes: list = field(default_factory=lambda: ["FL", "CENTRALIZED", "LOCAL"])
    pretraining: list = field(default_factory=lambda: ["FL_MLM"])
    pairing: str = "matched"
    mlm_min_visits: Optional[list] = field(default_factory=lambda: [1])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    hidden: int = 32
    layers: int = 1
    heads: int = 2
    ffn_dim: int = 64
    max_len: int = 32
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    mask_prob: float = 0.15
    dropout: float = 0.0
    client_fraction: float = 0.5
    rounds: int = 40
    mlm_rounds: int = 20
    local_epochs: int = 2
    # epoch budgets of the pooled and local regimes; null falls back to the matching rounds * local_epochs
    epochs: Optional[int] = 20
    mlm_epochs: Optional[int] = 10
    workers: int = 1
    client_optimizer: str = SHARED_OPTIMIZER

    def __post_init__(self):
        self._require(isinstance(self.synth, SynthConfig), "synth must be an object of generator settings")
        self._require(_int_list(self.thresholds) and min(self.thresholds) >= 1, "thresholds must be a list of integers >= 1")
        self._require(list(self.thresholds) == sorted(set(self.thresholds)), "thresholds must be sorted ascending")
        self._require(_int_list(self.seeds) and min(self.seeds) >= 0, "seeds must be a list of non-negative integers")
        self._require(
            isinstance(self.regimes, (list, tuple)) and self.regimes and set(self.regimes) <= {r.value for r in Regime},
            f"regimes must be a non-empty subset of {[r.value for r in Regime]}",
        )
        self._require(
            isinstance(self.pretraining, (list, tuple))
            and self.pretraining
            and set(self.pretraining) <= set(CONFIGURABLE_PRETRAINING),
            f"pretraining must be a non-empty subset of {list(CONFIGURABLE_PRETRAINING)}",
        )
        self._require(self.pairing in ("matched", "grid"), "pairing must be 'matched' or 'grid'")
        self._require(
            self.mlm_min_visits is None or (_int_list(self.mlm_min_visits) and min(self.mlm_min_visits) >= 1),
            "mlm_min_visits must be null or a list of integers >= 1",
        )
        self._require(0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)")
        self._require(0 < self.val_fraction < 1, "val_fraction must lie in (0, 1)")
        self._require(isinstance(self.mlm_rounds, int) and self.mlm_rounds >= 1, "mlm_rounds must be at least 1")
        self._require(
            self.mlm_epochs is None or (isinstance(self.mlm_epochs, int) and self.mlm_epochs >= 1), "mlm_epochs must be null or at least 1"
        )
        self._require(self.data_dir is None or isinstance(self.data_dir, str), "data_dir must be a path or null")
        # builds and so validates the model and federation settings
        self.federation(Task.NEXT_VISIT, HyperParams(**self.hyper_fields()), 0)

    @property
    def pretraining_epochs(self) -> int:
        """Epoch budget of pooled and local MLM, mlm_rounds * local_epochs unless set"""
        return self.mlm_epochs or self.mlm_rounds * self.local_epochs

    def hyper_fields(self) -> dict:
        """The HyperParams fields set by this config"""
        return {name: getattr(self, name) for name in HYPER_FIELDS}

    def hyper_for(self, vocab: Vocabulary) -> HyperParams:
        """HyperParams sized for a vocabulary"""
        return HyperParams.for_vocabulary(vocab, **self.hyper_fields())

    def federation(self, task: Task, hyper: HyperParams, seed: int, rounds: int = None, epochs: int = None) -> FederationConfig:
        """Round loop settings of one training phase; epochs defaults to the next-visit budget"""
        return FederationConfig(
            client_fraction=self.client_fraction,
            rounds=rounds or self.rounds,
            local_epochs=self.local_epochs,
            task=task,
            hyper=hyper,
            seed=seed,
            workers=self.workers,
            client_optimizer=self.client_optimizer,
            epochs=epochs or self.epochs,
        )

    @classmethod
    def deserialize(cls, data: dict):
        if isinstance(data, dict) and isinstance(data.get("synth"), dict):
            data = {**data, "synth": SynthConfig.deserialize({**benchmark_synth().serialize(), **data["synth"]})}
        return super().deserialize(data)


def load_config(path: str) -> ExperimentConfig:
    """Reads a config file; a stored run.json is accepted too"""
    try:
        with open(path, "r", encoding="utf-8") as stream:
            data = json.load(stream)
    except OSError as error:
        raise ConfigError(f"cannot read config {path}: {error.strerror}") from error
    except json.JSONDecodeError as error:
        raise ConfigError(f"config {path} is not valid JSON: {error}") from error
    if isinstance(data, dict) and set(data) == {"run_id", "config"}:
        data = data["config"]
    return ExperimentConfig.deserialize(data)


def compute_run_id(config: ExperimentConfig) -> str:
    """First 12 hex digits of the SHA-256 of the canonical config JSON"""
    canonical = json.dumps(config.serialize(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


######################################################################
#  C E L L S
######################################################################
@dataclass(frozen=True)
class Condition:
    """A regime with its pretraining source"""

    regime: Regime
    pretraining: Pretraining
    mlm_threshold: Optional[int] = None

    @property
    def label(self) -> str:
        """Pretraining label as reported, e.g. FL_MLM@3"""
        if self.mlm_threshold is None:
            return self.pretraining.value
        return f"{self.pretraining.value}@{self.mlm_threshold}"


def grid_conditions(config: ExperimentConfig) -> list[Condition]:
    """Regime and pretraining combinations in report order"""
    pretrained = [Pretraining(value) for value in config.pretraining if value != Pretraining.NONE.value]
    mlm_thresholds = config.mlm_min_visits or [None]
    conditions = []
    for regime in (Regime(value) for value in config.regimes):
        if config.pairing == "matched":
            chosen = [MATCHED_PRETRAINING[regime]] if pretrained else []
        else:
            chosen = [Pretraining.LOCAL_MLM if regime == Regime.LOCAL else value for value in pretrained]
        for pretraining in dict.fromkeys(chosen):
            # local pretraining always runs on the client's own fine-tuning patients
            for mlm_threshold in [None] if pretraining == Pretraining.LOCAL_MLM else mlm_thresholds:
                conditions.append(Condition(regime, pretraining, mlm_threshold))
        if Pretraining.NONE.value in config.pretraining:
            conditions.append(Condition(regime, Pretraining.NONE))
    return conditions


@dataclass
class MeasurementRow:
    """One metric of one cell for one seed"""

    run_id: str
    regime: str
    pretraining: str
    min_visits: int
    seed: int
    split: str = TEST_SPLIT
    metric_name: str = METRIC_NAME
    value: float = float("nan")
    n_examples: int = 0
    status: str = STATUS_OK
    error: str = ""

    def serialize(self) -> dict:
        """Serializes a MeasurementRow into a dictionary"""
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


METRIC_COLUMNS = [
    "run_id",
    "regime",
    "pretraining",
    "min_visits",
    "seed",
    "split",
    "metric_name",
    "value",
    "n_examples",
    "status",
    "error",
]
SUMMARY_COLUMNS = ["regime", "pretraining", "min_visits", "metric_name", "n_seeds", "mean", "ci95_low", "ci95_high"]
GROUP_KEYS = ["regime", "pretraining", "min_visits", "metric_name"]


@dataclass
class SummaryRow:
    """Mean and 95% interval of a cell across seeds; single-seed cells have no interval"""

    regime: str
    pretraining: str
    min_visits: int
    metric_name: str
    n_seeds: int
    mean: float
    ci95_low: Optional[float] = None
    ci95_high: Optional[float] = None

    def serialize(self) -> dict:
        """Serializes a SummaryRow into a dictionary"""
        return {name: getattr(self, name) for name in SUMMARY_COLUMNS}


def summarize(rows: list[MeasurementRow]) -> list[SummaryRow]:
    """Mean +/- 1.96 * s / sqrt(n) per (regime, pretraining, min_visits, metric) over successful rows"""
    frame = pd.DataFrame([row.serialize() for row in rows if row.status == STATUS_OK], columns=METRIC_COLUMNS)
    if frame.empty:
        return []
    stats = frame.groupby(GROUP_KEYS, sort=True)["value"].agg(n_seeds="count", mean="mean", std="std").reset_index()
    summary = []
    for record in stats.itertuples(index=False):
        count = int(record.n_seeds)
        low = high = None
        if count > 1:
            half_width = CI_Z * float(record.std) / math.sqrt(count)
            low, high = float(record.mean) - half_width, float(record.mean) + half_width
        summary.append(
            SummaryRow(
                regime=record.regime,
                pretraining=record.pretraining,
                min_visits=int(record.min_visits),
                metric_name=record.metric_name,
                n_seeds=count,
                mean=float(record.mean),
                ci95_low=low,
                ci95_high=high,
            )
        )
    return summary


@dataclass
class MetricsReport:
    """Measurement rows and their summary"""

    run_id: str
    rows: list[MeasurementRow] = field(default_factory=list)
    summary: list[SummaryRow] = field(default_factory=list)

    @property
    def failed(self) -> list[MeasurementRow]:
        """Rows of cells that could not be completed"""
        return [row for row in self.rows if row.status != STATUS_OK]

    def metrics_frame(self) -> pd.DataFrame:
        """Measurement rows as a DataFrame"""
        return pd.DataFrame([row.serialize() for row in self.rows], columns=METRIC_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        """Summary rows as a DataFrame"""
        return pd.DataFrame([row.serialize() for row in self.summary], columns=SUMMARY_COLUMNS)

    def write(self, run_dir: str) -> None:
        """Writes metrics.csv and summary.csv"""
        os.makedirs(run_dir, exist_ok=True)
        self.metrics_frame().to_csv(os.path.join(run_dir, METRICS_FILE), index=False)
        self.summary_frame().to_csv(os.path.join(run_dir, SUMMARY_FILE), index=False)

    @classmethod
    def read(cls, run_dir: str) -> "MetricsReport":
        """Reads a report back from a run directory"""
        path = os.path.join(run_dir, METRICS_FILE)
        if not os.path.exists(path):
            raise DataValidationError(f"{path}: no metrics in run directory")
        metrics = pd.read_csv(
            path,
            float_precision="round_trip",
            keep_default_na=False,
            na_values=[""],
            dtype={"run_id": str, "regime": str, "pretraining": str, "error": str},
        )
        rows = []
        for record in metrics.to_dict("records"):
            record["error"] = "" if pd.isna(record["error"]) else str(record["error"])
            record["min_visits"], record["seed"], record["n_examples"] = (
                int(record["min_visits"]),
                int(record["seed"]),
                int(record["n_examples"]),
            )
            rows.append(MeasurementRow(**record))
        summary_path = os.path.join(run_dir, SUMMARY_FILE)
        summary = []
        if os.path.exists(summary_path):
            frame = pd.read_csv(summary_path, float_precision="round_trip", dtype={"regime": str, "pretraining": str})
            for record in frame.to_dict("records"):
                record["ci95_low"] = None if pd.isna(record["ci95_low"]) else record["ci95_low"]
                record["ci95_high"] = None if pd.isna(record["ci95_high"]) else record["ci95_high"]
                record["min_visits"], record["n_seeds"] = int(record["min_visits"]), int(record["n_seeds"])
                summary.append(SummaryRow(**record))
        run_id = rows[0].run_id if rows else os.path.basename(os.path.normpath(run_dir))
        return cls(run_id=run_id, rows=rows, summary=summary)


######################################################################
#  D A T A   P R E P A R A T I O N
######################################################################
def prepare_data(config: ExperimentConfig) -> CohortData:
    """Reads the configured data directory or generates the synthetic cohort once"""
    if config.data_dir:
        return load_dataset(config.data_dir)
    cohort, transfers = generate_cohort(config.synth)
    return CohortData(cohort=cohort, transfers=transfers, group_table=identity_group_table(config.synth.group_labels()))


@dataclass
class ThresholdData:
    """The patients of one (seed, min-visit threshold) pair and their center shards"""

    threshold: int
    train: list[PatientRecord]
    fit: list[PatientRecord]
    val: list[PatientRecord]
    test: list[PatientRecord]
    train_partition: Partition
    fit_partition: Partition
    test_partition: Partition

    def stats(self, seed: int) -> dict:
        """Cohort sizes for cohort_stats.csv"""
        patients = self.train + self.test
        return {
            "seed": seed,
            "min_visits": self.threshold,
            "patients": len(patients),
            "train_patients": len(self.train),
            "test_patients": len(self.test),
            "visits": sum(patient.num_visits for patient in patients),
            "next_visit_patients": sum(patient.num_visits >= 2 for patient in patients),
        }


def prepare_threshold(
    data: CohortData, train: list[PatientRecord], test: list[PatientRecord], threshold: int, config: ExperimentConfig, seed: int
) -> ThresholdData:
    """Filters both splits at a threshold, carves the validation set and partitions by care unit"""
    train_t = filter_min_visits(train, threshold)
    test_t = filter_min_visits(test, threshold)
    fit, val = split_cohort(train_t, 1.0 - config.val_fraction, seed)
    return ThresholdData(
        threshold=threshold,
        train=train_t,
        fit=fit,
        val=val,
        test=test_t,
        train_partition=partition_cohort(train_t, data.transfers),
        fit_partition=partition_cohort(fit, data.transfers),
        test_partition=partition_cohort(test_t, data.transfers),
    )


######################################################################
#  E X P E R I M E N T   R U N N E R
######################################################################
class ExperimentRunner:
    """Runs every cell of an experiment and persists its artifacts"""

    def __init__(self, config: ExperimentConfig, run_root: str = None):
        self.config = config
        self.run_id = compute_run_id(config)
        self.run_dir = os.path.join(run_root or service_config.run_root(), self.run_id)
        self.data: Optional[CohortData] = None
        self.vocab: Optional[Vocabulary] = None
        self.hyper: Optional[HyperParams] = None
        self._splits = {}
        self._thresholds = {}
        self._pretrained = {}

    def __repr__(self):
        return f"<ExperimentRunner {self.run_id} dir={self.run_dir}>"

    def load(self) -> None:
        """Reads or generates the cohort and sizes the model for its vocabulary"""
        self.data = prepare_data(self.config)
        self.vocab = build_vocabulary(self.data.cohort, service_config.AGE_BUCKETS, service_config.BASE_YEAR, service_config.YEAR_BUCKETS)
        self.hyper = self.config.hyper_for(self.vocab)

    def run(self) -> MetricsReport:
        """Runs all cells, writes the report and returns it"""
        os.makedirs(self.run_dir, exist_ok=True)
        with open(os.path.join(self.run_dir, RUN_FILE), "w", encoding="utf-8") as stream:
            json.dump({"run_id": self.run_id, "config": self.config.serialize()}, stream, indent=2, sort_keys=True)
        logger.info("Experiment %s writing to %s", self.run_id, self.run_dir)

        self.load()
        report = MetricsReport(run_id=self.run_id)
        stats = []
        conditions = grid_conditions(self.config)
        for seed in self.config.seeds:
            for threshold in self.config.thresholds:
                try:
                    stats.append(self.threshold_data(seed, threshold).stats(seed))
                except Exception as error:  # pylint: disable=broad-except
                    logger.error("Cohort preparation failed for seed %s threshold %s: %s", seed, threshold, error)
                for condition in conditions:
                    report.rows.append(self.run_cell(condition, seed, threshold))

        report.summary = summarize(report.rows)
        report.write(self.run_dir)
        pd.DataFrame(stats).to_csv(os.path.join(self.run_dir, COHORT_STATS_FILE), index=False)
        logger.info("Experiment %s finished: %d rows, %d failed", self.run_id, len(report.rows), len(report.failed))
        return report

    def run_cell(self, condition: Condition, seed: int, threshold: int) -> MeasurementRow:
        """Runs one cell; any error becomes a failure row"""
        row = MeasurementRow(
            run_id=self.run_id,
            regime=condition.regime.value,
            pretraining=condition.label,
            min_visits=threshold,
            seed=seed,
        )
        logger.info("Cell %s/%s t=%d seed=%d started", row.regime, row.pretraining, threshold, seed)
        try:
            row.value, row.n_examples = self._run_regime(condition, seed, threshold)
        except Exception as error:  # pylint: disable=broad-except
            logger.exception("Cell %s/%s t=%d seed=%d failed", row.regime, row.pretraining, threshold, seed)
            row.status, row.error = STATUS_FAILED, f"{type(error).__name__}: {error}"
            return row
        logger.info("Cell %s/%s t=%d seed=%d: AP=%.4f", row.regime, row.pretraining, threshold, seed, row.value)
        return row

    ##################################################
    # Data
    ##################################################
    def _split(self, seed: int):
        if seed not in self._splits:
            self._splits[seed] = split_cohort(self.data.cohort, self.config.train_fraction, seed)
        return self._splits[seed]

    def threshold_data(self, seed: int, threshold: int) -> ThresholdData:
        key = (seed, threshold)
        if key not in self._thresholds:
            train, test = self._split(seed)
            self._thresholds[key] = prepare_threshold(self.data, train, test, threshold, self.config, seed)
        return self._thresholds[key]

    def _cell_dir(self, condition: Condition, seed: int, threshold: int) -> str:
        path = os.path.join(self.run_dir, "cells", f"seed{seed}", f"t{threshold}", f"{condition.regime.value}-{condition.label}")
        os.makedirs(path, exist_ok=True)
        return path

    ##################################################
    # Pretraining
    ##################################################
    def pretrained_checkpoint(self, pretraining: Pretraining, seed: int, mlm_threshold: int) -> str:
        """Path of the MLM checkpoint of a condition, trained on first use"""
        key = (pretraining, seed, mlm_threshold)
        if key not in self._pretrained:
            out_dir = os.path.join(self.run_dir, "pretrain", f"seed{seed}", f"{pretraining.value}@{mlm_threshold}")
            try:
                self._pretrained[key] = self.pretrain(pretraining, seed, mlm_threshold, out_dir)
            except Exception as error:
                self._pretrained[key] = error
                raise
        outcome = self._pretrained[key]
        if isinstance(outcome, Exception):
            raise DataValidationError(f"{pretraining.value} pretraining at t={mlm_threshold} failed earlier: {outcome}")
        return outcome

    def pretrain(self, pretraining: Pretraining, seed: int, mlm_threshold: int, out_dir: str) -> str:
        """Trains MLM with FedAvg (FL_MLM) or on pooled data (CENTRAL_MLM); returns the checkpoint path"""
        if pretraining not in (Pretraining.FL_MLM, Pretraining.CENTRAL_MLM):
            raise DataValidationError(f"{pretraining.value} is not a shared pretraining condition")
        data = self.threshold_data(seed, mlm_threshold)
        os.makedirs(out_dir, exist_ok=True)
        federation = self.config.federation(Task.MLM, self.hyper, seed, rounds=self.config.mlm_rounds, epochs=self.config.pretraining_epochs)
        val = MlmDataset(data.val, self.vocab, self.hyper.max_len)
        if pretraining == Pretraining.FL_MLM:
            clients = make_clients(data.fit_partition.clients, Task.MLM, self.vocab, self.hyper.max_len)
            params, logs = run_fedavg(clients, federation, val)
            write_round_logs(logs, os.path.join(out_dir, "rounds.csv"))
        else:
            train = MlmDataset(pool_clients(data.fit_partition.clients), self.vocab, self.hyper.max_len)
            params, log = run_centralized(train, val, federation)
            log.to_csv(os.path.join(out_dir, "train_log.csv"))
        path = os.path.join(out_dir, MLM_CHECKPOINT)
        save_checkpoint(params, path)
        return path

    def _init_for(self, condition: Condition, seed: int, threshold: int) -> ModelParams:
        if condition.pretraining in (Pretraining.NONE, Pretraining.LOCAL_MLM):
            return init_params(self.hyper, seed)
        mlm_threshold = condition.mlm_threshold or threshold
        pretrained = load_checkpoint(self.pretrained_checkpoint(condition.pretraining, seed, mlm_threshold), self.hyper)
        return transfer_for_finetune(pretrained, seed)

    ##################################################
    # Regimes
    ##################################################
    def fine_tune(
        self, regime: Regime, seed: int, threshold: int, init: ModelParams, out_dir: str
    ) -> tuple[ModelParams, EvaluationResult]:
        """Next-visit training under FL or CENTRALIZED, then AP on the held-out test patients"""
        data = self.threshold_data(seed, threshold)
        os.makedirs(out_dir, exist_ok=True)
        federation = self.config.federation(Task.NEXT_VISIT, self.hyper, seed)
        val = NextVisitDataset(data.val, self.vocab, self.hyper.max_len)
        if Regime(regime) == Regime.FL:
            clients = make_clients(data.fit_partition.clients, Task.NEXT_VISIT, self.vocab, self.hyper.max_len)
            params, logs = run_fedavg(clients, federation, val, init=init)
            write_round_logs(logs, os.path.join(out_dir, "rounds.csv"))
        elif Regime(regime) == Regime.CENTRALIZED:
            train = NextVisitDataset(pool_clients(data.fit_partition.clients), self.vocab, self.hyper.max_len)
            params, log = run_centralized(train, val, federation, init=init)
            log.to_csv(os.path.join(out_dir, "train_log.csv"))
        else:
            raise DataValidationError(f"regime {regime} does not produce a single model")
        save_checkpoint(params, os.path.join(out_dir, NEXT_VISIT_CHECKPOINT))
        return params, self.evaluate(params, seed, threshold)

    def evaluate(self, params: ModelParams, seed: int, threshold: int) -> EvaluationResult:
        """AP of a next-visit model on the test patients of a (seed, threshold) pair"""
        data = self.threshold_data(seed, threshold)
        test = NextVisitDataset(pool_clients(data.test_partition.clients), self.vocab, self.hyper.max_len)
        return evaluate_average_precision(params, test, seed)

    def _run_local(self, condition: Condition, seed: int, threshold: int, out_dir: str) -> tuple[float, int]:
        data = self.threshold_data(seed, threshold)
        mlm_epochs = self.config.pretraining_epochs if condition.pretraining == Pretraining.LOCAL_MLM else 0
        result = run_local_baseline(
            data.train_partition.clients,
            self.config.federation(Task.NEXT_VISIT, self.hyper, seed),
            {shard.center_id: shard.patients for shard in data.test_partition.clients},
            self.vocab,
            val_fraction=self.config.val_fraction,
            mlm_epochs=mlm_epochs,
        )
        for center_id, params in result.params.items():
            save_checkpoint(params, os.path.join(out_dir, f"{center_id}.ckpt"))
        pd.DataFrame(
            [(center_id, result.num_examples[center_id], ap) for center_id, ap in result.scores.items()]
            + [(center_id, 0, np.nan) for center_id in result.skipped],
            columns=["client_id", "n_examples", "average_precision"],
        ).to_csv(os.path.join(out_dir, "local_scores.csv"), index=False)
        return result.weighted_ap, sum(result.num_examples.values())

    def _run_regime(self, condition: Condition, seed: int, threshold: int) -> tuple[float, int]:
        cell_dir = self._cell_dir(condition, seed, threshold)
        if condition.regime == Regime.LOCAL:
            return self._run_local(condition, seed, threshold, cell_dir)
        _, result = self.fine_tune(condition.regime, seed, threshold, self._init_for(condition, seed, threshold), cell_dir)
        return result.value, result.n_examples


######################################################################
#  E N T R Y   P O I N T S
######################################################################
def run_experiment(config: ExperimentConfig, run_root: str = None) -> MetricsReport:
    """Runs the configured grid and persists it under run_root/<run_id>"""
    return ExperimentRunner(config, run_root).run()


def compare_pretraining(config: ExperimentConfig, run_root: str = None) -> MetricsReport:
    """FL fine-tuning from every configured pretraining condition"""
    conditions = set(config.pretraining)
    if Pretraining.NONE.value not in conditions or len(conditions) < 2:
        raise ConfigError("pretraining comparison needs NONE and at least one pretrained condition")
    return run_experiment(replace(config, regimes=[Regime.FL.value], pairing="grid"), run_root)
