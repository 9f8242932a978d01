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
CLI Command Extensions for Flask
"""

# pylint: disable=duplicate-code
import json
import logging
import os
import tempfile
from unittest import TestCase
from unittest.mock import patch
from click.testing import CliRunner

from wsgi import app
from service.common import status
from service.common.cli_commands import (
    evaluate,
    experiment,
    partition,
    report,
    synth,
    train_mlm,
    train_next,
)  # noqa: E402
from service.experiment import STATUS_FAILED, MeasurementRow, MetricsReport, summarize
from service.models import HyperParams, init_params, save_checkpoint
from tests.factories import TINY_EXPERIMENT


class TestFlaskCLI(TestCase):
    """Flask CLI Command Tests"""

    @classmethod
    def setUpClass(cls):
        """This runs once before the entire test suite"""
        app.logger.setLevel(logging.CRITICAL)
        app.app_context().push()

    def setUp(self):
        self.runner = CliRunner()
        self.tmp = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        self.config_path = self.write_config(TINY_EXPERIMENT)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        """A path inside the scratch directory"""
        return os.path.join(self.tmp.name, *parts)

    def write_config(self, data, name="config.json"):
        """Writes a config file and returns its path"""
        with open(self.path(name), "w", encoding="utf-8") as stream:
            json.dump(data, stream)
        return self.path(name)

    def invoke(self, command, args):
        """Runs a command the way `flask <command>` would"""
        with patch.dict(os.environ, {"FLASK_APP": "wsgi:app", "FEDSEQ_RUN_DIR": self.path("runs")}):
            return self.runner.invoke(command, args)

    ######################################################################
    #  D A T A   C O M M A N D S
    ######################################################################

    def test_synth_and_partition(self):
        """It should write a synthetic cohort and partition it by center"""
        data_dir = self.path("data")
        result = self.invoke(synth, ["--out", data_dir, "--patients", "30", "--centers", "2", "--seed", "5"])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("Wrote 30 patients", result.output)
        for name in ("visits.csv", "groups.csv", "transfers.csv"):
            self.assertTrue(os.path.exists(os.path.join(data_dir, name)))

        result = self.invoke(partition, ["--data", data_dir])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        document = json.loads(result.output)
        self.assertEqual(sum(document["centers"].values()) + document["excluded"], 30)
        self.assertEqual(sorted(document["centers"]), list(document["centers"]))

    def test_synth_bad_override(self):
        """It should exit with 1 on an invalid generator setting"""
        result = self.invoke(synth, ["--out", self.path("data"), "--patients", "0"])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    def test_partition_missing_files(self):
        """It should exit with 1 when the data directory has no cohort"""
        os.makedirs(self.path("empty"))
        result = self.invoke(partition, ["--data", self.path("empty")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    ######################################################################
    #  T R A I N I N G   C O M M A N D S
    ######################################################################

    def test_train_and_evaluate(self):
        """It should pretrain, fine-tune and evaluate through the commands"""
        result = self.invoke(train_mlm, ["--config", self.config_path, "--regime", "CENTRALIZED", "--out", self.path("mlm")])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        checkpoint = result.output.strip().splitlines()[-1]
        self.assertTrue(os.path.exists(checkpoint))

        result = self.invoke(
            train_next,
            ["--config", self.config_path, "--regime", "FL", "--init", checkpoint, "--out", self.path("next")],
        )
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        trained = json.loads(result.output)
        self.assertEqual(trained["metric"], "average_precision")

        result = self.invoke(
            evaluate,
            ["--config", self.config_path, "--checkpoint", self.path("next", "next_visit.ckpt"), "--out", self.path("eval.json")],
        )
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertEqual(json.loads(result.output), trained)
        with open(self.path("eval.json"), "r", encoding="utf-8") as stream:
            self.assertEqual(json.load(stream), trained)

    def test_evaluate_wrong_shape(self):
        """It should exit with 1 for a checkpoint of another model size"""
        save_checkpoint(init_params(HyperParams(hidden=16, heads=2), 0), self.path("other.ckpt"))
        result = self.invoke(evaluate, ["--config", self.config_path, "--checkpoint", self.path("other.ckpt")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    ######################################################################
    #  E X P E R I M E N T   C O M M A N D S
    ######################################################################

    def test_experiment_and_report(self):
        """It should run the grid and report it back"""
        run_root = self.path("runs")
        result = self.invoke(experiment, ["--config", self.config_path, "--run-dir", run_root])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("1 rows, 0 failed", result.output)
        run_id = os.listdir(run_root)[0]

        result = self.invoke(report, [os.path.join(run_root, run_id)])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)
        self.assertIn("CENTRALIZED", result.output)
        # a bare run id resolves under FEDSEQ_RUN_DIR
        result = self.invoke(report, [run_id])
        self.assertEqual(result.exit_code, status.EXIT_OK, result.output)

    def test_report_tampered_summary(self):
        """It should exit with 1 when summary.csv disagrees with metrics.csv"""
        rows = [MeasurementRow("abcdefabcdef", "FL", "NONE", 1, seed, value=0.1 * (seed + 1), n_examples=4) for seed in range(2)]
        summary = summarize(rows)
        summary[0].mean = 0.9
        MetricsReport("abcdefabcdef", rows, summary).write(self.path("run"))
        result = self.invoke(report, [self.path("run")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    def test_report_unknown_run(self):
        """It should exit with 1 for a run that does not exist"""
        result = self.invoke(report, ["0123456789ab"])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    def test_experiment_bad_config(self):
        """It should exit with 1 on an invalid config"""
        path = self.write_config({**TINY_EXPERIMENT, "thresholds": [3, 1]}, "bad.json")
        result = self.invoke(experiment, ["--config", path, "--run-dir", self.path("runs")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)
        path = self.write_config({**TINY_EXPERIMENT, "learning_rates": [1e-3]}, "typo.json")
        result = self.invoke(experiment, ["--config", path, "--run-dir", self.path("runs")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    def test_compare_needs_baseline(self):
        """It should exit with 1 when the comparison has no NONE condition"""
        path = self.write_config({**TINY_EXPERIMENT, "pretraining": ["FL_MLM"]}, "compare.json")
        result = self.invoke(experiment, ["--config", path, "--compare-pretraining", "--run-dir", self.path("runs")])
        self.assertEqual(result.exit_code, status.EXIT_CONFIG_ERROR)

    @patch("service.common.cli_commands.run_experiment")
    def test_experiment_partial_failure(self, run_mock):
        """It should exit with 2 when some cells failed"""
        rows = [
            MeasurementRow("abcdefabcdef", "FL", "NONE", 1, 0, value=0.3, n_examples=4),
            MeasurementRow("abcdefabcdef", "LOCAL", "NONE", 1, 0, status=STATUS_FAILED, error="DataValidationError: no data"),
        ]
        run_mock.return_value = MetricsReport("abcdefabcdef", rows, summarize(rows))
        result = self.invoke(experiment, ["--config", self.config_path, "--run-dir", self.path("runs")])
        self.assertEqual(result.exit_code, status.EXIT_PARTIAL_FAILURE)
        self.assertIn("1 failed", result.output)
        run_mock.assert_called_once()
