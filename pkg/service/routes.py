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
Experiment Run Service

This service implements a read-only REST API over the experiment runs
stored under FEDSEQ_RUN_DIR

"""

from flask import jsonify, abort
from flask import current_app as app  # Import Flask application
from flask_restx import Api, Resource, fields, reqparse

from service import config
from service.common import status  # HTTP Status Codes
from service.run_store import RunStore


######################################################################
# Run Report Service with Swagger
# Paths:
# GET /health - Health check
# GET /api/runs - Returns a list of all experiment runs
# GET /api/runs/{run_id} - Returns the run with a given id
# GET /api/runs/{run_id}/metrics - Returns the measurement rows of a run
# GET /api/runs/{run_id}/summary - Returns the summary rows of a run
######################################################################

######################################################################
# Configure Swagger before initializing it
######################################################################
api = Api(
    app,
    version="1.0.0",
    title="Federated Sequence Model Runs",
    description="Read-only access to experiment configurations, measurements and summaries.",
    default="runs",
    default_label="Experiment run reports",
    doc="/apidocs",
    prefix="/api",
)


######################################################################
# GET HEALTH CHECK
######################################################################
@app.route("/health")
def health_check():
    """Health check endpoint: Let them know our heart is still beating"""
    return jsonify(status=200, message="Healthy"), status.HTTP_200_OK


######################################################################
# GET INDEX
######################################################################
@app.route("/")
def index():
    """Root URL response"""
    return (
        jsonify(name="Federated Sequence Model Runs", version="1.0.0", runs="/api/runs", docs="/apidocs"),
        status.HTTP_200_OK,
    )


# Define the models so that the docs reflect what is returned
run_model = api.model(
    "Run",
    {
        "run_id": fields.String(readOnly=True, description="First 12 hex digits of the config hash"),
        "config": fields.Raw(description="The experiment configuration snapshot"),
        "completed": fields.Boolean(description="Whether metrics.csv has been written"),
        "rows": fields.Integer(description="Number of measurement rows"),
        "failed": fields.Integer(description="Number of failed cells"),
    },
)

metric_model = api.model(
    "Measurement",
    {
        "run_id": fields.String(description="The run identifier"),
        "regime": fields.String(description="FL, CENTRALIZED or LOCAL"),
        "pretraining": fields.String(description="Pretraining condition, e.g. FL_MLM or FL_MLM@3"),
        "min_visits": fields.Integer(description="Minimum-visit threshold"),
        "seed": fields.Integer(description="Experiment seed"),
        "split": fields.String(description="Evaluation split"),
        "metric_name": fields.String(description="Metric name"),
        "value": fields.Float(description="Metric value, null for failed cells"),
        "n_examples": fields.Integer(description="Examples behind the value"),
        "status": fields.String(description="ok or failed"),
        "error": fields.String(description="Failure message"),
    },
)

summary_model = api.model(
    "Summary",
    {
        "regime": fields.String(description="FL, CENTRALIZED or LOCAL"),
        "pretraining": fields.String(description="Pretraining condition"),
        "min_visits": fields.Integer(description="Minimum-visit threshold"),
        "metric_name": fields.String(description="Metric name"),
        "n_seeds": fields.Integer(description="Number of seeds in the cell"),
        "mean": fields.Float(description="Mean across seeds"),
        "ci95_low": fields.Float(description="Lower 95% bound, null for a single seed"),
        "ci95_high": fields.Float(description="Upper 95% bound, null for a single seed"),
    },
)

# query string arguments
metric_args = reqparse.RequestParser()
metric_args.add_argument("regime", type=str, location="args", required=False, help="Filter by regime")
metric_args.add_argument("pretraining", type=str, location="args", required=False, help="Filter by pretraining condition")
metric_args.add_argument("min_visits", type=int, location="args", required=False, help="Filter by min-visit threshold")


def run_store() -> RunStore:
    """Store over the current run root"""
    return RunStore(config.run_root())


def not_found_run(run_id: str):
    """Aborts with 404 for an unknown run"""
    abort(status.HTTP_404_NOT_FOUND, f"Run with id '{run_id}' could not be found.")


######################################################################
#  PATH: /runs
######################################################################
@api.route("/runs", strict_slashes=False)
class RunCollection(Resource):
    """Handles all interactions with collections of Runs"""

    # ------------------------------------------------------------------
    # LIST ALL RUNS
    # ------------------------------------------------------------------
    @api.doc("list_runs")
    @api.marshal_list_with(run_model)
    def get(self):
        """Returns all of the Runs"""
        app.logger.info("Request for run list")
        runs = [run.serialize() for run in run_store().all()]
        app.logger.info("Returning %d runs", len(runs))
        return runs, status.HTTP_200_OK


######################################################################
#  PATH: /runs/{run_id}
######################################################################
@api.route("/runs/<string:run_id>")
@api.param("run_id", "The Run identifier")
class RunResource(Resource):
    """Handles a single Run"""

    @api.doc("get_runs")
    @api.response(404, "Run not found")
    @api.marshal_with(run_model)
    def get(self, run_id):
        """
        Retrieve a single Run

        This endpoint will return a Run based on its id
        """
        app.logger.info("Request for run with id: %s", run_id)
        run = run_store().find(run_id)
        if not run:
            not_found_run(run_id)
        return run.serialize(), status.HTTP_200_OK


######################################################################
#  PATH: /runs/{run_id}/metrics
######################################################################
@api.route("/runs/<string:run_id>/metrics")
@api.param("run_id", "The Run identifier")
class RunMetrics(Resource):
    """Measurement rows of a Run"""

    @api.doc("list_metrics")
    @api.response(404, "Run not found")
    @api.expect(metric_args, validate=True)
    @api.marshal_list_with(metric_model)
    def get(self, run_id):
        """Returns the measurement rows of a Run, filtered by the query arguments"""
        args = metric_args.parse_args()
        app.logger.info("Request for metrics of run %s with filters %s", run_id, args)
        rows = run_store().metrics(run_id, args["regime"], args["pretraining"], args["min_visits"])
        if rows is None:
            not_found_run(run_id)
        return rows, status.HTTP_200_OK


######################################################################
#  PATH: /runs/{run_id}/summary
######################################################################
@api.route("/runs/<string:run_id>/summary")
@api.param("run_id", "The Run identifier")
class RunSummary(Resource):
    """Summary rows of a Run"""

    @api.doc("list_summary")
    @api.response(404, "Run not found")
    @api.marshal_list_with(summary_model)
    def get(self, run_id):
        """Returns the per-cell means and confidence intervals of a Run"""
        app.logger.info("Request for summary of run %s", run_id)
        rows = run_store().summary(run_id)
        if rows is None:
            not_found_run(run_id)
        return rows, status.HTTP_200_OK
