"""
CSV ingestion and emission

visits.csv     patient_id, admit_time_hours, age_years, calendar_year, raw_code
groups.csv     raw_code, group
transfers.csv  patient_id, care_unit, duration_hours

Synthetic and real data both flow through these readers. Malformed rows
are rejected with their line numbers (the header is line 1).
"""

import logging
import os
from collections import defaultdict
from dataclasses import dataclass

import pandas as pd

from .base import DataValidationError
from .centers import TransferRecord
from .patient import PatientRecord, Visit, map_code_to_group

logger = logging.getLogger("flask.app")

VISITS_FILE = "visits.csv"
GROUPS_FILE = "groups.csv"
TRANSFERS_FILE = "transfers.csv"

VISIT_COLUMNS = ["patient_id", "admit_time_hours", "age_years", "calendar_year", "raw_code"]
GROUP_COLUMNS = ["raw_code", "group"]
TRANSFER_COLUMNS = ["patient_id", "care_unit", "duration_hours"]

MAX_REPORTED_ERRORS = 20


@dataclass
class CohortData:
    """Everything read from one data directory"""

    cohort: list[PatientRecord]
    transfers: list[TransferRecord]
    group_table: dict[str, str]


######################################################################
#  R E A D E R S
######################################################################
def _read_frame(path: str, columns: list[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataValidationError(f"{path}: file not found")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise DataValidationError(f"{path}: missing columns {missing}")
    return frame[columns]


def _raise_row_errors(path: str, errors: list[str]) -> None:
    if errors:
        logger.error("Rejected %d malformed row(s) in %s", len(errors), path)
        shown = "; ".join(errors[:MAX_REPORTED_ERRORS])
        more = f" (and {len(errors) - MAX_REPORTED_ERRORS} more)" if len(errors) > MAX_REPORTED_ERRORS else ""
        raise DataValidationError(f"{path}: malformed rows: {shown}{more}")


def read_group_table(path: str) -> dict[str, str]:
    """Reads the raw code to group table"""
    frame = _read_frame(path, GROUP_COLUMNS)
    table, errors = {}, []
    for line, (raw_code, group) in enumerate(frame.itertuples(index=False, name=None), start=2):
        raw_code, group = raw_code.strip(), group.strip()
        if not raw_code or not group:
            errors.append(f"line {line}: empty raw_code or group")
        elif table.get(raw_code, group) != group:
            errors.append(f"line {line}: conflicting group for {raw_code}")
        else:
            table[raw_code] = group
    _raise_row_errors(path, errors)
    if not table:
        raise DataValidationError(f"{path}: group table is empty")
    return table


def read_visits(path: str, group_table: dict[str, str]) -> list[PatientRecord]:
    """Reads diagnosis rows and assembles one PatientRecord per patient"""
    frame = _read_frame(path, VISIT_COLUMNS)
    visits = defaultdict(dict)
    errors = []
    for line, row in enumerate(frame.itertuples(index=False, name=None), start=2):
        patient_id, admit_time, age, year, raw_code = (value.strip() for value in row)
        try:
            admit_time, age, year = int(admit_time), int(age), int(year)
        except ValueError:
            errors.append(f"line {line}: non-integer time, age or year")
            continue
        if not patient_id or not raw_code:
            errors.append(f"line {line}: empty patient_id or raw_code")
            continue
        if age < 0:
            errors.append(f"line {line}: negative age")
            continue
        entry = visits[patient_id].setdefault(admit_time, {"age": age, "year": year, "groups": []})
        if (entry["age"], entry["year"]) != (age, year):
            errors.append(f"line {line}: age/year disagree with the visit's earlier rows")
            continue
        entry["groups"].append(map_code_to_group(raw_code, group_table))
    _raise_row_errors(path, errors)

    cohort = []
    for patient_id, by_time in visits.items():
        records = [Visit(tuple(entry["groups"]), admit_time, entry["age"], entry["year"]) for admit_time, entry in by_time.items()]
        cohort.append(PatientRecord(patient_id, tuple(records)))
    logger.info("Read %d patients from %s", len(cohort), path)
    return cohort


def read_transfers(path: str) -> list[TransferRecord]:
    """Reads care-unit stays"""
    frame = _read_frame(path, TRANSFER_COLUMNS)
    transfers, errors = [], []
    for line, (patient_id, care_unit, duration) in enumerate(frame.itertuples(index=False, name=None), start=2):
        try:
            transfers.append(TransferRecord(patient_id.strip(), care_unit.strip(), float(duration)))
        except ValueError:
            errors.append(f"line {line}: duration is not a number")
        except DataValidationError:
            errors.append(f"line {line}: duration must be positive")
    _raise_row_errors(path, errors)
    return transfers


def load_dataset(data_dir: str) -> CohortData:
    """Reads visits, groups and transfers from a data directory"""
    group_table = read_group_table(os.path.join(data_dir, GROUPS_FILE))
    return CohortData(
        cohort=read_visits(os.path.join(data_dir, VISITS_FILE), group_table),
        transfers=read_transfers(os.path.join(data_dir, TRANSFERS_FILE)),
        group_table=group_table,
    )


######################################################################
#  W R I T E R S
######################################################################
def write_dataset(data_dir: str, data: CohortData) -> None:
    """Writes a cohort in the ingestion schema"""
    os.makedirs(data_dir, exist_ok=True)
    rows = [
        (patient.patient_id, visit.admit_time, visit.age_years, visit.calendar_year, group)
        for patient in data.cohort
        for visit in patient.visits
        for group in visit.diagnoses
    ]
    pd.DataFrame(rows, columns=VISIT_COLUMNS).to_csv(os.path.join(data_dir, VISITS_FILE), index=False)
    pd.DataFrame(sorted(data.group_table.items()), columns=GROUP_COLUMNS).to_csv(
        os.path.join(data_dir, GROUPS_FILE), index=False
    )
    pd.DataFrame(
        [(t.patient_id, t.care_unit, repr(t.duration_hours)) for t in data.transfers], columns=TRANSFER_COLUMNS
    ).to_csv(os.path.join(data_dir, TRANSFERS_FILE), index=False)
    logger.info("Wrote %d patients to %s", len(data.cohort), data_dir)
