"""
Models for Patient histories

Visits, patient records and the cohort-level operations
(code grouping, visit-count filtering and the train/test split)
"""

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .base import DataValidationError

logger = logging.getLogger("flask.app")

UNK_GROUP = "UNK_GROUP"


######################################################################
#  G R O U P E D   C O D E
######################################################################
@dataclass(frozen=True)
class GroupedCode:
    """A raw diagnosis code together with its aggregated group"""

    raw_code: str
    group: str

    def __post_init__(self):
        if not self.raw_code:
            raise DataValidationError("Invalid GroupedCode: empty raw code")


def map_code_to_group(raw_code: str, group_table: Mapping[str, str]) -> str:
    """Returns the group of a raw code, or UNK_GROUP when the table has no entry"""
    if not group_table:
        raise DataValidationError("group table is empty")
    return group_table.get(raw_code, UNK_GROUP)


######################################################################
#  V I S I T
######################################################################
@dataclass(frozen=True)
class Visit:
    """
    Class that represents one admission: its diagnosis groups,
    admission time (hours since epoch), age and calendar year
    """

    diagnoses: tuple[str, ...]
    admit_time: int
    age_years: int
    calendar_year: int

    def __post_init__(self):
        # a visit's diagnoses form a set; keep first occurrences in order
        unique = tuple(dict.fromkeys(self.diagnoses))
        if not unique:
            raise DataValidationError("Invalid Visit: no diagnoses")
        if self.age_years < 0:
            raise DataValidationError(f"Invalid Visit: negative age {self.age_years}")
        object.__setattr__(self, "diagnoses", unique)

    def __repr__(self):
        return f"<Visit t={self.admit_time} age={self.age_years} dx={list(self.diagnoses)}>"


######################################################################
#  P A T I E N T   R E C O R D
######################################################################
@dataclass(frozen=True)
class PatientRecord:
    """A patient's visits in admission order"""

    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        visits = tuple(sorted(self.visits, key=lambda visit: visit.admit_time))
        if not visits:
            raise DataValidationError(f"Invalid PatientRecord {self.patient_id}: no visits")
        for before, after in zip(visits, visits[1:]):
            if after.age_years < before.age_years:
                raise DataValidationError(
                    f"Invalid PatientRecord {self.patient_id}: age decreases at t={after.admit_time}"
                )
        object.__setattr__(self, "visits", visits)

    def __repr__(self):
        return f"<PatientRecord {self.patient_id} visits=[{len(self.visits)}]>"

    @property
    def num_visits(self) -> int:
        """Number of visits n"""
        return len(self.visits)

    def groups(self) -> set[str]:
        """Every diagnosis group that appears in the history"""
        return {group for visit in self.visits for group in visit.diagnoses}


######################################################################
#  C O H O R T   O P E R A T I O N S
######################################################################
def filter_min_visits(cohort: Sequence[PatientRecord], threshold: int) -> list[PatientRecord]:
    """Keeps the patients with at least `threshold` visits, preserving order"""
    if threshold < 1:
        raise ValueError(f"min-visit threshold must be >= 1, got {threshold}")
    kept = [patient for patient in cohort if patient.num_visits >= threshold]
    logger.info("Min-visit filter t=%s kept %d of %d patients", threshold, len(kept), len(cohort))
    return kept


def split_cohort(
    cohort: Sequence[PatientRecord], train_fraction: float, seed: int
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Splits a cohort by patient into disjoint train and test parts

    The train part has round(train_fraction * n) patients (half-up, clamped so
    that neither part is empty) and both parts keep the cohort's order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    size = len(cohort)
    if size < 2:
        raise DataValidationError(f"cannot split a cohort of {size} patient(s)")
    n_train = min(max(int(math.floor(train_fraction * size + 0.5)), 1), size - 1)
    order = np.random.default_rng(seed).permutation(size)
    train_index = set(order[:n_train].tolist())
    train = [patient for index, patient in enumerate(cohort) if index in train_index]
    test = [patient for index, patient in enumerate(cohort) if index not in train_index]
    return train, test
