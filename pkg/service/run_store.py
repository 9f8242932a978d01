"""
Read-only access to experiment run directories

Every directory under the run root that holds a run.json is a run.
"""

import json
import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Optional

from service.experiment import RUN_FILE, MetricsReport
from service.models import DataValidationError

logger = logging.getLogger("flask.app")

RUN_ID_PATTERN = re.compile(r"^[0-9a-f]{12}$")


def _clean(value):
    """NaN becomes None so that rows serialize to valid JSON"""
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


@dataclass
class RunInfo:
    """Identity, configuration and completion state of one run"""

    run_id: str
    path: str
    config: dict
    completed: bool
    rows: int = 0
    failed: int = 0

    def serialize(self) -> dict:
        """Serializes a RunInfo into a dictionary"""
        return {
            "run_id": self.run_id,
            "config": self.config,
            "completed": self.completed,
            "rows": self.rows,
            "failed": self.failed,
        }


class RunStore:
    """Finds runs and their reports under a root directory"""

    def __init__(self, root: str):
        self.root = root

    def __repr__(self):
        return f"<RunStore root={self.root}>"

    def _path(self, run_id: str) -> Optional[str]:
        if not RUN_ID_PATTERN.match(run_id or ""):
            return None
        path = os.path.join(self.root, run_id)
        return path if os.path.isfile(os.path.join(path, RUN_FILE)) else None

    def _info(self, run_id: str, path: str) -> RunInfo:
        try:
            with open(os.path.join(path, RUN_FILE), "r", encoding="utf-8") as stream:
                snapshot = json.load(stream)
        except (OSError, json.JSONDecodeError) as error:
            raise DataValidationError(f"run {run_id} has an unreadable {RUN_FILE}") from error
        info = RunInfo(run_id=run_id, path=path, config=snapshot.get("config", {}), completed=False)
        try:
            report = MetricsReport.read(path)
        except DataValidationError:
            return info
        info.completed, info.rows, info.failed = True, len(report.rows), len(report.failed)
        return info

    def all(self) -> list[RunInfo]:
        """Every run under the root, ordered by run id"""
        if not os.path.isdir(self.root):
            return []
        runs = []
        for run_id in sorted(os.listdir(self.root)):
            path = self._path(run_id)
            if path:
                runs.append(self._info(run_id, path))
        logger.debug("Found %d runs under %s", len(runs), self.root)
        return runs

    def find(self, run_id: str) -> Optional[RunInfo]:
        """A run by id, None when there is no such run"""
        path = self._path(run_id)
        return self._info(run_id, path) if path else None

    def report(self, run_id: str) -> Optional[MetricsReport]:
        """The stored report of a run, None when the run does not exist"""
        path = self._path(run_id)
        return MetricsReport.read(path) if path else None

    def metrics(self, run_id: str, regime: str = None, pretraining: str = None, min_visits: int = None) -> Optional[list[dict]]:
        """Measurement rows of a run, optionally filtered"""
        report = self.report(run_id)
        if report is None:
            return None
        rows = [row.serialize() for row in report.rows]
        if regime:
            rows = [row for row in rows if row["regime"] == regime]
        if pretraining:
            rows = [row for row in rows if row["pretraining"] == pretraining]
        if min_visits is not None:
            rows = [row for row in rows if row["min_visits"] == min_visits]
        return [{key: _clean(value) for key, value in row.items()} for row in rows]

    def summary(self, run_id: str) -> Optional[list[dict]]:
        """Summary rows of a run"""
        report = self.report(run_id)
        if report is None:
            return None
        return [{key: _clean(value) for key, value in row.serialize().items()} for row in report.summary]
