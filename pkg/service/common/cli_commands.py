######################################################################
# Copyright 2016, 2024 John J. Rofrano. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
######################################################################
"""
Flask CLI Command Extensions

Exit codes: 0 success, 1 configuration or data error, 2 some cells failed
"""
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace

import click
from flask import current_app as app  # Import Flask application

from service import config
from service.common import status
from service.experiment import (
    ExperimentConfig,
    ExperimentRunner,
    MetricsReport,
    Pretraining,
    Regime,
    compare_pretraining,
    load_config,
    prepare_data,
    run_experiment,
    summarize,
)
from service.models import (
    CohortData,
    ConfigError,
    DataValidationError,
    heterogeneity_report,
    init_params,
    load_checkpoint,
    load_dataset,
    partition_cohort,
    transfer_for_finetune,
    write_dataset,
)


@contextmanager
def handled_errors():
    """Turns configuration and data errors into exit code 1"""
    try:
        yield
    except ConfigError as error:
        app.logger.error("Configuration error: %s", error)
        click.echo(f"Configuration error: {error}", err=True)
        sys.exit(status.EXIT_CONFIG_ERROR)
    except DataValidationError as error:
        app.logger.error("Data error: %s", error)
        click.echo(f"Data error: {error}", err=True)
        sys.exit(status.EXIT_CONFIG_ERROR)


def read_config(config_path: str) -> ExperimentConfig:
    """The experiment config at config_path, defaults when no path is given"""
    return load_config(config_path) if config_path else ExperimentConfig()


def prepared_runner(config_path: str) -> ExperimentRunner:
    """A runner with its cohort loaded"""
    runner = ExperimentRunner(read_config(config_path))
    runner.load()
    return runner


def echo_json(data) -> None:
    """Prints a JSON document"""
    click.echo(json.dumps(data, indent=2, sort_keys=True))


config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Experiment config JSON (or a run.json)"
)
seed_option = click.option("--seed", type=int, default=None, help="Experiment seed (default: the first configured seed)")
threshold_option = click.option(
    "--threshold", type=int, default=None, help="Min-visit threshold (default: the first configured threshold)"
)


######################################################################
# Generate a synthetic cohort
# Usage:
#   flask synth --out data/ [--config cfg.json] [--patients 500] [--seed 3]
######################################################################
@app.cli.command("synth")
@config_option
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Directory for the CSV files")
@click.option("--patients", type=int, default=None, help="Override synth.num_patients")
@click.option("--centers", type=int, default=None, help="Override synth.num_centers")
@click.option("--alpha", type=float, default=None, help="Override synth.heterogeneity_alpha")
@click.option("--seed", type=int, default=None, help="Override synth.seed")
def synth(config_path, out_dir, patients, centers, alpha, seed):
    """Writes a synthetic cohort as visits.csv, groups.csv and transfers.csv"""
    with handled_errors():
        settings = read_config(config_path).synth
        overrides = {"num_patients": patients, "num_centers": centers, "heterogeneity_alpha": alpha, "seed": seed}
        settings = replace(settings, **{key: value for key, value in overrides.items() if value is not None})
        data = prepare_data(ExperimentConfig(synth=settings))
        write_dataset(out_dir, data)
        click.echo(f"Wrote {len(data.cohort)} patients and {len(data.transfers)} transfers to {out_dir}")


######################################################################
# Partition a cohort by care unit
# Usage:
#   flask partition --data data/
######################################################################
@app.cli.command("partition")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False), help="Data directory")
def partition(data_dir):
    """Prints patients per center and the pairwise heterogeneity of the centers"""
    with handled_errors():
        data: CohortData = load_dataset(data_dir)
        result = partition_cohort(data.cohort, data.transfers)
        document = {"centers": result.summary(), "excluded": len(result.excluded), "heterogeneity": None}
        if len(result.clients) >= 2:
            document["heterogeneity"] = heterogeneity_report(result.clients).serialize()
        else:
            app.logger.warning("Heterogeneity needs at least 2 centers, found %d", len(result.clients))
        echo_json(document)


######################################################################
# Pretrain with masked language modeling
# Usage:
#   flask train-mlm --config cfg.json --regime FL --out mlm/
######################################################################
@app.cli.command("train-mlm")
@config_option
@click.option("--regime", type=click.Choice([Regime.FL.value, Regime.CENTRALIZED.value]), default=Regime.FL.value)
@seed_option
@threshold_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory")
def train_mlm(config_path, regime, seed, threshold, out_dir):
    """Trains the MLM with FedAvg or on pooled data and writes its checkpoint"""
    with handled_errors():
        runner = prepared_runner(config_path)
        seed = runner.config.seeds[0] if seed is None else seed
        threshold = runner.config.thresholds[0] if threshold is None else threshold
        pretraining = Pretraining.FL_MLM if regime == Regime.FL.value else Pretraining.CENTRAL_MLM
        out_dir = out_dir or os.path.join(runner.run_dir, "manual", f"{pretraining.value}-seed{seed}-t{threshold}")
        path = runner.pretrain(pretraining, seed, threshold, out_dir)
        click.echo(path)


######################################################################
# Fine-tune on next-visit prediction
# Usage:
#   flask train-next --config cfg.json --regime FL --init mlm/mlm.ckpt --out next/
######################################################################
@app.cli.command("train-next")
@config_option
@click.option("--regime", type=click.Choice([Regime.FL.value, Regime.CENTRALIZED.value]), default=Regime.FL.value)
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Pretrained MLM checkpoint")
@seed_option
@threshold_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory")
def train_next(config_path, regime, init_path, seed, threshold, out_dir):
    """Fine-tunes next-visit prediction, writes the checkpoint and prints the test AP"""
    with handled_errors():
        runner = prepared_runner(config_path)
        seed = runner.config.seeds[0] if seed is None else seed
        threshold = runner.config.thresholds[0] if threshold is None else threshold
        if init_path:
            init = transfer_for_finetune(load_checkpoint(init_path, runner.hyper), seed)
        else:
            init = init_params(runner.hyper, seed)
        out_dir = out_dir or os.path.join(runner.run_dir, "manual", f"{regime}-seed{seed}-t{threshold}")
        _, result = runner.fine_tune(Regime(regime), seed, threshold, init, out_dir)
        echo_json(result.serialize())


######################################################################
# Evaluate a next-visit checkpoint
# Usage:
#   flask eval --config cfg.json --checkpoint next/next_visit.ckpt
######################################################################
@app.cli.command("eval")
@config_option
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True, dir_okay=False))
@seed_option
@threshold_option
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Also write the result JSON here")
def evaluate(config_path, checkpoint_path, seed, threshold, out_path):
    """Prints {metric, value, n_examples} for the test patients of a seed and threshold"""
    with handled_errors():
        runner = prepared_runner(config_path)
        seed = runner.config.seeds[0] if seed is None else seed
        threshold = runner.config.thresholds[0] if threshold is None else threshold
        result = runner.evaluate(load_checkpoint(checkpoint_path, runner.hyper), seed, threshold)
        if out_path:
            with open(out_path, "w", encoding="utf-8") as stream:
                json.dump(result.serialize(), stream, indent=2, sort_keys=True)
        echo_json(result.serialize())


######################################################################
# Run the experiment grid
# Usage:
#   flask experiment --config cfg.json [--compare-pretraining]
######################################################################
@app.cli.command("experiment")
@config_option
@click.option("--compare-pretraining", "compare_flag", is_flag=True, help="FL fine-tuning from every pretraining condition")
@click.option("--run-dir", "run_root", type=click.Path(file_okay=False), default=None, help="Override FEDSEQ_RUN_DIR")
def experiment(config_path, compare_flag, run_root):
    """Runs every cell, writes metrics.csv, summary.csv and cohort_stats.csv"""
    with handled_errors():
        settings = read_config(config_path)
        root = run_root or config.run_root()
        report = compare_pretraining(settings, root) if compare_flag else run_experiment(settings, root)
    click.echo(f"Run {report.run_id}: {len(report.rows)} rows, {len(report.failed)} failed")
    click.echo(report.summary_frame().to_string(index=False))
    if report.failed:
        sys.exit(status.EXIT_PARTIAL_FAILURE)


######################################################################
# Print the summary of a stored run
# Usage:
#   flask report <run_id or run directory>
######################################################################
@app.cli.command("report")
@click.argument("run")
def report(run):
    """Recomputes the summary from metrics.csv and prints it"""
    with handled_errors():
        run_dir = run if os.path.isdir(run) else os.path.join(config.run_root(), run)
        stored = MetricsReport.read(run_dir)
        recomputed = summarize(stored.rows)
        if stored.summary and stored.summary != recomputed:
            raise DataValidationError(f"summary.csv of {run_dir} does not match its metrics.csv")
        stored.summary = recomputed
    click.echo(f"Run {stored.run_id}: {len(stored.rows)} rows, {len(stored.failed)} failed")
    click.echo(stored.summary_frame().to_string(index=False))
