"""
Test cases for the experiment grid
"""

import json
import logging
import os
import tempfile
from unittest import TestCase, skipUnless
from unittest.mock import patch
import numpy as np
from service.experiment import (
    METRIC_COLUMNS,
    STATUS_FAILED,
    STATUS_OK,
    ExperimentConfig,
    ExperimentRunner,
    MeasurementRow,
    MetricsReport,
    Pretraining,
    compare_pretraining,
    compute_run_id,
    grid_conditions,
    load_config,
    run_experiment,
    summarize,
)
from service.federation import select_clients
from service.models import ConfigError, HyperParams, Task, init_params, load_checkpoint
from wsgi import app
from tests.factories import SLOW_TESTS, TINY_EXPERIMENT


def tiny_config(**overrides):
    """A config small enough to run every regime in seconds"""
    return ExperimentConfig.deserialize({**TINY_EXPERIMENT, **overrides})


def row(regime, value, seed, status=STATUS_OK, pretraining="NONE", min_visits=1):
    """A measurement row"""
    return MeasurementRow("abc123abc123", regime, pretraining, min_visits, seed, value=value, n_examples=10, status=status)


######################################################################
#  S U M M A R Y   T E S T   C A S E S
######################################################################
class TestSummarize(TestCase):
    """Test Cases for summarize"""

    def test_two_seeds(self):
        """It should report the mean and a normal-approximation interval"""
        summary = summarize([row("FL", 0.4, 0), row("FL", 0.6, 1)])
        self.assertEqual(len(summary), 1)
        cell = summary[0]
        self.assertAlmostEqual(cell.mean, 0.5, places=12)
        self.assertEqual(cell.n_seeds, 2)
        self.assertAlmostEqual(cell.ci95_high - cell.mean, 0.196, places=3)
        self.assertAlmostEqual(cell.mean - cell.ci95_low, 0.196, places=3)

    def test_single_seed(self):
        """It should leave the interval empty for a single seed"""
        cell = summarize([row("FL", 0.5, 0)])[0]
        self.assertEqual(cell.mean, 0.5)
        self.assertIsNone(cell.ci95_low)
        self.assertIsNone(cell.ci95_high)

    def test_identical_values(self):
        """It should give a zero-width interval for identical values"""
        cell = summarize([row("FL", 0.3, seed) for seed in range(3)])[0]
        self.assertAlmostEqual(cell.ci95_low, cell.ci95_high, places=12)

    def test_cells_and_failures(self):
        """It should summarize each cell separately and skip failed rows"""
        rows = [
            row("FL", 0.4, 0),
            row("FL", float("nan"), 1, status=STATUS_FAILED),
            row("LOCAL", 0.2, 0),
            row("LOCAL", 0.3, 0, min_visits=3),
        ]
        summary = summarize(rows)
        self.assertEqual([(cell.regime, cell.min_visits) for cell in summary], [("FL", 1), ("LOCAL", 1), ("LOCAL", 3)])
        self.assertEqual(summary[0].n_seeds, 1)
        self.assertEqual(summarize([row("FL", 0.1, 0, status=STATUS_FAILED)]), [])

    def test_report_round_trip(self):
        """It should read back a written report and re-summarize it exactly"""
        rows = [row("FL", 0.41234567891, 0), row("FL", 0.6, 1), row("CENTRALIZED", float("nan"), 0, status=STATUS_FAILED)]
        rows[2].error = "DataValidationError: undefined AP"
        report = MetricsReport("abc123abc123", rows, summarize(rows))
        with tempfile.TemporaryDirectory() as tmp:
            report.write(tmp)
            stored = MetricsReport.read(tmp)
        self.assertEqual(stored.run_id, "abc123abc123")
        self.assertEqual(stored.summary, report.summary)
        self.assertEqual(summarize(stored.rows), stored.summary)
        self.assertEqual(stored.rows[0].value, 0.41234567891)
        self.assertEqual(stored.failed[0].error, "DataValidationError: undefined AP")
        self.assertEqual(list(report.metrics_frame().columns), METRIC_COLUMNS)

    def test_read_without_metrics(self):
        """It should reject a directory without metrics"""
        with tempfile.TemporaryDirectory() as tmp:
            self.assertRaises(Exception, MetricsReport.read, tmp)


######################################################################
#  C O N F I G   T E S T   C A S E S
######################################################################
class TestExperimentConfig(TestCase):
    """Test Cases for ExperimentConfig and the condition grid"""

    def test_defaults(self):
        """It should default to the full grid"""
        settings = ExperimentConfig()
        self.assertEqual(settings.thresholds, [1, 3, 5, 15])
        self.assertEqual(len(settings.seeds), 5)
        self.assertEqual(settings.pairing, "matched")
        self.assertEqual(settings.mlm_min_visits, [1])
        self.assertEqual(settings.synth.chronic_rate, 0.5)
        self.assertEqual(ExperimentConfig.deserialize({"synth": {"num_patients": 50}}).synth.chronic_rate, 0.5)
        self.assertEqual(ExperimentConfig.deserialize({"synth": {"chronic_rate": 0.0}}).synth.chronic_rate, 0.0)
        self.assertEqual(settings.client_optimizer, "shared")
        self.assertEqual(settings.pretraining_epochs, 10)
        federation = settings.federation(Task.NEXT_VISIT, HyperParams(**settings.hyper_fields()), 0)
        self.assertEqual((federation.rounds, federation.local_epochs, federation.total_epochs), (40, 2, 20))
        self.assertEqual(len(select_clients(settings.synth.center_ids(), federation.client_fraction, np.random.default_rng(0))), 4)

    def test_epoch_fallbacks(self):
        """It should fall back to rounds times local epochs when no epoch budget is set"""
        settings = ExperimentConfig(epochs=None, mlm_epochs=None, rounds=5, mlm_rounds=3, local_epochs=2)
        self.assertEqual(settings.pretraining_epochs, 6)
        self.assertEqual(settings.federation(Task.NEXT_VISIT, HyperParams(**settings.hyper_fields()), 0).total_epochs, 10)
        mlm = settings.federation(Task.MLM, HyperParams(**settings.hyper_fields()), 0, epochs=settings.pretraining_epochs)
        self.assertEqual(mlm.total_epochs, 6)
        self.assertRaises(ConfigError, ExperimentConfig, mlm_epochs=0)
        self.assertRaises(ConfigError, ExperimentConfig, epochs=0)
        self.assertRaises(ConfigError, ExperimentConfig, client_optimizer="private")

    def test_validation(self):
        """It should reject invalid configurations"""
        self.assertRaises(ConfigError, ExperimentConfig.deserialize, {"unknown": 1})
        self.assertRaises(ConfigError, ExperimentConfig, thresholds=[3, 1])
        self.assertRaises(ConfigError, ExperimentConfig, thresholds=[])
        self.assertRaises(ConfigError, ExperimentConfig, seeds=[])
        self.assertRaises(ConfigError, ExperimentConfig, regimes=["SOLO"])
        self.assertRaises(ConfigError, ExperimentConfig, pretraining=["LOCAL_MLM"])
        self.assertRaises(ConfigError, ExperimentConfig, pairing="diagonal")
        self.assertRaises(ConfigError, ExperimentConfig, hidden=10, heads=4)
        self.assertRaises(ConfigError, ExperimentConfig, client_fraction=0.0)
        self.assertRaises(ConfigError, ExperimentConfig.deserialize, {"synth": {"num_patients": 0}})

    def test_run_id(self):
        """It should derive a stable 12-digit id from the configuration"""
        run_id = compute_run_id(tiny_config())
        self.assertEqual(len(run_id), 12)
        self.assertEqual(run_id, compute_run_id(tiny_config()))
        self.assertNotEqual(run_id, compute_run_id(tiny_config(seeds=[1])))

    def test_load_config(self):
        """It should read a config file or a stored run.json"""
        settings = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            plain = os.path.join(tmp, "config.json")
            with open(plain, "w", encoding="utf-8") as stream:
                json.dump(TINY_EXPERIMENT, stream)
            stored = os.path.join(tmp, "run.json")
            with open(stored, "w", encoding="utf-8") as stream:
                json.dump({"run_id": compute_run_id(settings), "config": settings.serialize()}, stream)
            broken = os.path.join(tmp, "broken.json")
            with open(broken, "w", encoding="utf-8") as stream:
                stream.write("{not json")
            self.assertEqual(load_config(plain), settings)
            self.assertEqual(load_config(stored), settings)
            self.assertRaises(ConfigError, load_config, broken)
            self.assertRaises(ConfigError, load_config, os.path.join(tmp, "missing.json"))

    def test_matched_conditions(self):
        """It should pair each regime with its own pretraining"""
        labels = [(c.regime.value, c.label) for c in grid_conditions(ExperimentConfig())]
        self.assertEqual(labels, [("FL", "FL_MLM@1"), ("CENTRALIZED", "CENTRAL_MLM@1"), ("LOCAL", "LOCAL_MLM")])

    def test_five_configurations(self):
        """It should cross pretraining sources with MLM thresholds"""
        settings = ExperimentConfig(
            regimes=["FL"], pretraining=["FL_MLM", "CENTRAL_MLM", "NONE"], pairing="grid", mlm_min_visits=[1, 3]
        )
        labels = [condition.label for condition in grid_conditions(settings)]
        self.assertEqual(labels, ["FL_MLM@1", "FL_MLM@3", "CENTRAL_MLM@1", "CENTRAL_MLM@3", "NONE"])

    def test_grid_local(self):
        """It should use local pretraining for the local regime"""
        settings = ExperimentConfig(regimes=["LOCAL"], pretraining=["FL_MLM", "NONE"], pairing="grid", mlm_min_visits=[3])
        conditions = grid_conditions(settings)
        self.assertEqual([c.pretraining for c in conditions], [Pretraining.LOCAL_MLM, Pretraining.NONE])
        self.assertEqual(conditions[0].label, "LOCAL_MLM")


######################################################################
#  R U N N E R   T E S T   C A S E S
######################################################################
class TestExperimentRunner(TestCase):
    """Test Cases for run_experiment and compare_pretraining"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.logger.setLevel(logging.CRITICAL)
        app.app_context().push()

    def setUp(self):
        """This runs before each test"""
        self.tmp = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        self.root = self.tmp.name

    def tearDown(self):
        """This runs after each test"""
        self.tmp.cleanup()

    def test_single_cell(self):
        """It should produce one measurement row and one summary row"""
        report = run_experiment(tiny_config(), self.root)
        self.assertEqual(len(report.rows), 1)
        self.assertEqual(len(report.summary), 1)
        measurement = report.rows[0]
        self.assertEqual(measurement.status, STATUS_OK, measurement.error)
        self.assertEqual((measurement.regime, measurement.pretraining, measurement.min_visits), ("CENTRALIZED", "NONE", 1))
        self.assertTrue(0.0 <= measurement.value <= 1.0)
        run_dir = os.path.join(self.root, report.run_id)
        for name in ("run.json", "metrics.csv", "summary.csv", "cohort_stats.csv"):
            self.assertTrue(os.path.exists(os.path.join(run_dir, name)), name)
        self.assertTrue(os.path.exists(os.path.join(run_dir, "cells", "seed0", "t1", "CENTRALIZED-NONE", "next_visit.ckpt")))

    def test_rerun_is_identical(self):
        """It should reproduce the same report for the same config"""
        first = run_experiment(tiny_config(), os.path.join(self.root, "a"))
        second = run_experiment(tiny_config(), os.path.join(self.root, "b"))
        self.assertEqual(first.rows, second.rows)
        self.assertEqual(first.summary, second.summary)

    def test_every_regime(self):
        """It should run the matched FL, centralized and local cells"""
        report = run_experiment(tiny_config(regimes=["FL", "CENTRALIZED", "LOCAL"], pretraining=["FL_MLM"]), self.root)
        self.assertEqual([(r.regime, r.pretraining) for r in report.rows], [
            ("FL", "FL_MLM@1"), ("CENTRALIZED", "CENTRAL_MLM@1"), ("LOCAL", "LOCAL_MLM")
        ])
        self.assertEqual(report.failed, [], [r.error for r in report.failed])
        pretrain_dir = os.path.join(self.root, report.run_id, "pretrain", "seed0")
        self.assertTrue(os.path.exists(os.path.join(pretrain_dir, "FL_MLM@1", "mlm.ckpt")))
        self.assertTrue(os.path.exists(os.path.join(pretrain_dir, "CENTRAL_MLM@1", "mlm.ckpt")))

    def test_failure_isolation(self):
        """It should record a failed cell and keep going"""
        real = ExperimentRunner._run_regime  # pylint: disable=protected-access

        def flaky(runner, condition, seed, threshold):
            if condition.regime.value == "LOCAL":
                raise RuntimeError("local shard exploded")
            return real(runner, condition, seed, threshold)

        with patch.object(ExperimentRunner, "_run_regime", autospec=True, side_effect=flaky):
            report = run_experiment(tiny_config(regimes=["CENTRALIZED", "LOCAL"]), self.root)
        self.assertEqual([r.status for r in report.rows], [STATUS_OK, STATUS_FAILED])
        self.assertIn("local shard exploded", report.rows[1].error)
        self.assertTrue(np.isnan(report.rows[1].value))
        self.assertEqual([cell.regime for cell in report.summary], ["CENTRALIZED"])
        stored = MetricsReport.read(os.path.join(self.root, report.run_id))
        self.assertEqual(len(stored.failed), 1)

    def test_compare_pretraining(self):
        """It should fine-tune FL models from pretrained and random starts"""
        settings = tiny_config(regimes=["CENTRALIZED"], pretraining=["FL_MLM", "NONE"])
        report = compare_pretraining(settings, self.root)
        self.assertEqual([(r.regime, r.pretraining) for r in report.rows], [("FL", "FL_MLM@1"), ("FL", "NONE")])
        self.assertEqual(report.failed, [], [r.error for r in report.failed])
        runner = ExperimentRunner(settings)
        runner.load()
        checkpoint = os.path.join(self.root, report.run_id, "pretrain", "seed0", "FL_MLM@1", "mlm.ckpt")
        pretrained = load_checkpoint(checkpoint, runner.hyper)
        self.assertFalse(np.array_equal(pretrained["embed.token"], init_params(runner.hyper, 0)["embed.token"]))
        self.assertFalse(os.path.exists(os.path.join(self.root, report.run_id, "pretrain", "seed0", "NONE@1")))

    def test_compare_needs_baseline(self):
        """It should require the NONE condition and a pretrained one"""
        self.assertRaises(ConfigError, compare_pretraining, tiny_config(pretraining=["FL_MLM"]), self.root)
        self.assertRaises(ConfigError, compare_pretraining, tiny_config(pretraining=["NONE"]), self.root)

    def test_threshold_monotone(self):
        """It should never grow the cohort as the threshold rises"""
        runner = ExperimentRunner(tiny_config(thresholds=[1, 2, 3]), self.root)
        runner.load()
        sizes = [runner.threshold_data(0, threshold).stats(0)["patients"] for threshold in (1, 2, 3)]
        self.assertEqual(sizes, sorted(sizes, reverse=True))
        self.assertEqual(sizes[0], 80)


######################################################################
#  B E N C H M A R K   T E S T   C A S E S
######################################################################
def cell_mean(report, regime, threshold, pretraining=None):
    """Mean over seeds of one summary cell"""
    cells = [
        cell
        for cell in report.summary
        if cell.regime == regime and cell.min_visits == threshold and (pretraining is None or cell.pretraining == pretraining)
    ]
    if len(cells) != 1:
        raise AssertionError(f"expected one {regime} cell at t={threshold}, found {len(cells)}")
    return cells[0].mean


@skipUnless(SLOW_TESTS, "set FEDSEQ_SLOW_TESTS to run the default benchmark")
class TestBenchmark(TestCase):
    """Directional results on the default synthetic benchmark over five seeds"""

    @classmethod
    def setUpClass(cls):
        """Runs the matched regimes at thresholds 3 and 5 once"""
        app.logger.setLevel(logging.CRITICAL)
        app.app_context().push()
        cls.tmp = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        cls.report = run_experiment(ExperimentConfig(thresholds=[3, 5]), cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        """Runs once after the entire test suite"""
        cls.tmp.cleanup()

    def test_no_failed_cells(self):
        """It should complete every cell of every seed"""
        self.assertEqual(self.report.failed, [], [r.error for r in self.report.failed])
        self.assertTrue(all(cell.n_seeds == 5 for cell in self.report.summary))

    def test_federated_beats_local(self):
        """It should score FL at least 2 AP points above the local models"""
        for threshold in (3, 5):
            federated = cell_mean(self.report, "FL", threshold)
            local = cell_mean(self.report, "LOCAL", threshold)
            self.assertGreaterEqual(federated - local, 0.02, f"t={threshold}: FL {federated:.4f} LOCAL {local:.4f}")

    def test_federated_near_centralized(self):
        """It should keep FL within 2 AP points of centralized training"""
        for threshold in (3, 5):
            federated = cell_mean(self.report, "FL", threshold)
            central = cell_mean(self.report, "CENTRALIZED", threshold)
            self.assertLessEqual(central - federated, 0.02, f"t={threshold}: CENTRALIZED {central:.4f} FL {federated:.4f}")

    def test_pretraining_helps(self):
        """It should fine-tune FL from a federated MLM at least half a point above random init"""
        with tempfile.TemporaryDirectory() as tmp:
            report = compare_pretraining(ExperimentConfig(thresholds=[3], pretraining=["FL_MLM", "NONE"]), tmp)
        pretrained = cell_mean(report, "FL", 3, "FL_MLM@1")
        baseline = cell_mean(report, "FL", 3, "NONE")
        self.assertGreaterEqual(pretrained - baseline, 0.005, f"FL_MLM@1 {pretrained:.4f} NONE {baseline:.4f}")
