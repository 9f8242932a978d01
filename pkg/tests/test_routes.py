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
Run Report API Service Test Suite
"""

# pylint: disable=duplicate-code
import json
import os
import logging
import tempfile
from unittest import TestCase
from unittest.mock import patch
from wsgi import app
from service.common import status
from service.experiment import (
    STATUS_FAILED,
    ExperimentConfig,
    MeasurementRow,
    MetricsReport,
    compute_run_id,
    summarize,
)
from service.run_store import RunStore
from tests.factories import TINY_EXPERIMENT

BASE_URL = "/api/runs"


######################################################################
#  T E S T   C A S E S
######################################################################
class TestRunService(TestCase):
    """REST API Server Tests"""

    @classmethod
    def setUpClass(cls):
        """Run once before all tests"""
        app.config["TESTING"] = True
        app.config["DEBUG"] = False
        app.logger.setLevel(logging.CRITICAL)
        app.app_context().push()

    def setUp(self):
        """Runs before each test"""
        self.client = app.test_client()
        self.tmp = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        self.env = patch.dict(os.environ, {"FEDSEQ_RUN_DIR": self.tmp.name})
        self.env.start()

    def tearDown(self):
        """This runs after each test"""
        self.env.stop()
        self.tmp.cleanup()

    ######################################################################
    #  H E L P E R   M E T H O D S
    ######################################################################

    def _write_run(self, with_metrics=True):
        """Stores a run with two FL seeds and one failed LOCAL cell"""
        settings = ExperimentConfig.deserialize(TINY_EXPERIMENT)
        run_id = compute_run_id(settings)
        run_dir = os.path.join(self.tmp.name, run_id)
        os.makedirs(run_dir)
        with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as stream:
            json.dump({"run_id": run_id, "config": settings.serialize()}, stream)
        if with_metrics:
            rows = [
                MeasurementRow(run_id, "FL", "FL_MLM", 1, 0, value=0.4, n_examples=20),
                MeasurementRow(run_id, "FL", "FL_MLM", 1, 1, value=0.6, n_examples=20),
                MeasurementRow(run_id, "FL", "FL_MLM", 3, 0, value=0.5, n_examples=12),
                MeasurementRow(run_id, "LOCAL", "LOCAL_MLM", 1, 0, status=STATUS_FAILED, error="DataValidationError: no data"),
            ]
            MetricsReport(run_id, rows, summarize(rows)).write(run_dir)
        return run_id

    ######################################################################
    #  P L A C E   T E S T   C A S E S   H E R E
    ######################################################################

    def test_index(self):
        """It should call the home page"""
        resp = self.client.get("/")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual(data["runs"], BASE_URL)
        self.assertEqual(data["docs"], "/apidocs")

    def test_health(self):
        """It should be healthy"""
        resp = self.client.get("/health")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual(data["status"], 200)
        self.assertEqual(data["message"], "Healthy")

    def test_list_empty(self):
        """It should list no runs for an empty run directory"""
        resp = self.client.get(BASE_URL)
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        self.assertEqual(resp.get_json(), [])

    def test_list_runs(self):
        """It should list stored runs and skip other directories"""
        run_id = self._write_run()
        os.makedirs(os.path.join(self.tmp.name, "scratch"))
        resp = self.client.get(BASE_URL)
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual(len(data), 1)
        self.assertEqual(data[0]["run_id"], run_id)
        self.assertTrue(data[0]["completed"])
        self.assertEqual(data[0]["rows"], 4)
        self.assertEqual(data[0]["failed"], 1)

    def test_get_run(self):
        """It should get a single run with its config"""
        run_id = self._write_run()
        resp = self.client.get(f"{BASE_URL}/{run_id}")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual(data["config"]["thresholds"], [1])
        self.assertEqual(data["config"]["synth"]["num_patients"], 80)

    def test_get_incomplete_run(self):
        """It should report a run without metrics as not completed"""
        run_id = self._write_run(with_metrics=False)
        resp = self.client.get(f"{BASE_URL}/{run_id}")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        self.assertFalse(resp.get_json()["completed"])
        resp = self.client.get(f"{BASE_URL}/{run_id}/metrics")
        self.assertEqual(resp.status_code, status.HTTP_400_BAD_REQUEST)

    def test_get_run_not_found(self):
        """It should not get a run that is not stored"""
        resp = self.client.get(f"{BASE_URL}/0123456789ab")
        self.assertEqual(resp.status_code, status.HTTP_404_NOT_FOUND)
        resp = self.client.get(f"{BASE_URL}/..")
        self.assertEqual(resp.status_code, status.HTTP_404_NOT_FOUND)
        resp = self.client.get(f"{BASE_URL}/not-a-run/summary")
        self.assertEqual(resp.status_code, status.HTTP_404_NOT_FOUND)

    def test_metrics(self):
        """It should return every measurement row with null for failed values"""
        run_id = self._write_run()
        resp = self.client.get(f"{BASE_URL}/{run_id}/metrics")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual(len(data), 4)
        self.assertEqual(data[0]["value"], 0.4)
        self.assertIsNone(data[3]["value"])
        self.assertEqual(data[3]["status"], "failed")
        self.assertIn("no data", data[3]["error"])

    def test_metrics_filters(self):
        """It should filter measurement rows by the query arguments"""
        run_id = self._write_run()
        resp = self.client.get(f"{BASE_URL}/{run_id}/metrics", query_string={"regime": "FL", "min_visits": 1})
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        self.assertEqual([row["seed"] for row in resp.get_json()], [0, 1])
        resp = self.client.get(f"{BASE_URL}/{run_id}/metrics", query_string={"pretraining": "LOCAL_MLM"})
        self.assertEqual(len(resp.get_json()), 1)
        resp = self.client.get(f"{BASE_URL}/{run_id}/metrics", query_string={"regime": "CENTRALIZED"})
        self.assertEqual(resp.get_json(), [])

    def test_metrics_not_found(self):
        """It should not return metrics of an unknown run"""
        resp = self.client.get(f"{BASE_URL}/0123456789ab/metrics")
        self.assertEqual(resp.status_code, status.HTTP_404_NOT_FOUND)

    def test_summary(self):
        """It should return the mean and interval per cell"""
        run_id = self._write_run()
        resp = self.client.get(f"{BASE_URL}/{run_id}/summary")
        self.assertEqual(resp.status_code, status.HTTP_200_OK)
        data = resp.get_json()
        self.assertEqual([(row["regime"], row["min_visits"]) for row in data], [("FL", 1), ("FL", 3)])
        self.assertAlmostEqual(data[0]["mean"], 0.5)
        self.assertAlmostEqual(data[0]["ci95_high"] - data[0]["mean"], 0.196, places=3)
        self.assertEqual(data[1]["n_seeds"], 1)
        self.assertIsNone(data[1]["ci95_low"])

    def test_method_not_allowed(self):
        """It should not allow changing runs"""
        resp = self.client.post(BASE_URL, json={})
        self.assertEqual(resp.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)
        resp = self.client.delete(f"{BASE_URL}/0123456789ab")
        self.assertEqual(resp.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)


######################################################################
#  R U N   S T O R E   T E S T   C A S E S
######################################################################
class TestRunStore(TestCase):
    """Test Cases for RunStore"""

    def test_missing_root(self):
        """It should find nothing under a root that does not exist"""
        store = RunStore(os.path.join(tempfile.gettempdir(), "fedseq-no-such-root"))
        self.assertEqual(store.all(), [])
        self.assertIsNone(store.find("0123456789ab"))
        self.assertIsNone(store.metrics("0123456789ab"))
        self.assertIsNone(store.summary("0123456789ab"))

    def test_rejects_bad_ids(self):
        """It should reject ids that are not 12 hex digits"""
        with tempfile.TemporaryDirectory() as tmp:
            os.makedirs(os.path.join(tmp, "ABCDEF"))
            with open(os.path.join(tmp, "ABCDEF", "run.json"), "w", encoding="utf-8") as stream:
                stream.write("{}")
            store = RunStore(tmp)
            self.assertIsNone(store.find("ABCDEF"))
            self.assertIsNone(store.report("../x"))
            self.assertEqual(store.all(), [])
