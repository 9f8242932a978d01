"""
Models for care-unit centers

Each patient is assigned to the care unit where the cumulative stay is
longest; the cohort then splits into one client shard per unit.
"""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .base import DataValidationError
from .patient import PatientRecord

logger = logging.getLogger("flask.app")


######################################################################
#  T R A N S F E R   R E C O R D
######################################################################
@dataclass(frozen=True)
class TransferRecord:
    """One stay of a patient in a care unit"""

    patient_id: str
    care_unit: str
    duration_hours: float

    def __post_init__(self):
        if not self.duration_hours > 0:
            raise DataValidationError(
                f"Invalid TransferRecord for {self.patient_id}: duration must be positive, got {self.duration_hours}"
            )


@dataclass
class ClientDataset:
    """A center's local shard of patients"""

    center_id: str
    patients: list[PatientRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.patients)

    def __repr__(self):
        return f"<ClientDataset {self.center_id} patients=[{len(self.patients)}]>"


@dataclass
class Partition:
    """Client shards keyed by unit plus the patients that could not be placed"""

    clients: list[ClientDataset]
    excluded: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, int]:
        """Patient count per center"""
        return {client.center_id: len(client) for client in self.clients}

    def center_of(self) -> dict[str, str]:
        """Map from patient id to center id"""
        return {patient.patient_id: client.center_id for client in self.clients for patient in client.patients}


######################################################################
#  A S S I G N M E N T
######################################################################
def assign_center(transfers: Sequence[TransferRecord]) -> str:
    """Returns the unit with the longest summed stay, ties to the smallest unit id"""
    if not transfers:
        raise DataValidationError("patient has no transfers")
    stays = defaultdict(list)
    for transfer in transfers:
        stays[transfer.care_unit].append(transfer.duration_hours)
    # fsum is exactly rounded, so record order cannot flip a near-tie
    totals = {unit: math.fsum(durations) for unit, durations in stays.items()}
    return min(totals, key=lambda unit: (-totals[unit], unit))


def partition_cohort(cohort: Sequence[PatientRecord], transfers: Sequence[TransferRecord]) -> Partition:
    """Splits a cohort into one ClientDataset per assigned care unit"""
    by_patient = defaultdict(list)
    for transfer in transfers:
        by_patient[transfer.patient_id].append(transfer)

    shards = defaultdict(list)
    excluded = []
    for patient in cohort:
        records = by_patient.get(patient.patient_id)
        if not records:
            excluded.append(patient.patient_id)
            continue
        shards[assign_center(records)].append(patient)

    if excluded:
        logger.warning("Excluded %d patient(s) without transfers: %s", len(excluded), excluded[:10])
    partition = Partition(
        clients=[ClientDataset(center_id, shards[center_id]) for center_id in sorted(shards)],
        excluded=excluded,
    )
    logger.info("Partitioned %d patients into %d centers", len(cohort) - len(excluded), len(partition.clients))
    return partition
