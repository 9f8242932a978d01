"""
Models for synthetic cohorts

Seeded generator of patient histories and care-unit transfers with
per-center Dirichlet label skew, chronic groups that recur across a
patient's visits, and a report of how far the resulting
center distributions drift apart.
"""

import itertools
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from service import config
from .base import ConfigBase, DataValidationError
from .centers import ClientDataset, TransferRecord
from .patient import PatientRecord, Visit

logger = logging.getLogger("flask.app")

HOURS_PER_YEAR = 8766
FIRST_YEAR = config.BASE_YEAR + 8
STAY_HOURS = (24.0, 48.0)


######################################################################
#  S Y N T H   C O N F I G
######################################################################
@dataclass(frozen=True)
class SynthConfig(ConfigBase):
    """Knobs of the synthetic cohort generator"""

    num_patients: int = 2000
    num_centers: int = 8
    num_groups: int = 50
    mean_visits: float = 4.0
    max_dx_per_visit: int = 4
    heterogeneity_alpha: float = 0.1
    home_stay_bias: float = 3.0
    # groups a patient carries for life, drawn from all groups whatever the home center
    chronic_groups: int = 2
    chronic_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self._require(self.num_patients > 0, "num_patients must be positive")
        self._require(self.num_centers > 0, "num_centers must be positive")
        self._require(self.num_groups >= 2, "num_groups must be at least 2")
        self._require(self.mean_visits > 1, "mean_visits must exceed 1")
        self._require(self.max_dx_per_visit > 0, "max_dx_per_visit must be positive")
        self._require(self.heterogeneity_alpha > 0, "heterogeneity_alpha must be positive")
        self._require(self.home_stay_bias >= 1, "home_stay_bias must be at least 1")
        self._require(self.chronic_groups >= 0, "chronic_groups must not be negative")
        self._require(0 <= self.chronic_rate < 1, "chronic_rate must lie in [0, 1)")

    def group_labels(self) -> list[str]:
        """Labels of the synthetic diagnosis groups"""
        return [f"G{index:03d}" for index in range(self.num_groups)]

    def center_ids(self) -> list[str]:
        """Ids of the synthetic care units"""
        return [f"C{index:02d}" for index in range(self.num_centers)]


def identity_group_table(groups: Sequence[str]) -> dict[str, str]:
    """Group table that maps every label onto itself"""
    return {group: group for group in groups}


######################################################################
#  G E N E R A T I O N
######################################################################
def _visit_groups(synth: SynthConfig, rng: np.random.Generator, weights: np.ndarray, support: int, chronic: np.ndarray) -> np.ndarray:
    """Recurring chronic groups first, the rest of the visit drawn from the home center"""
    size = int(rng.integers(1, synth.max_dx_per_visit + 1))
    kept = chronic[rng.random(len(chronic)) < synth.chronic_rate][:size] if len(chronic) else chronic
    if not len(kept):
        return rng.choice(synth.num_groups, size=min(size, support), replace=False, p=weights)
    rest = weights.copy()
    rest[kept] = 0.0
    size = min(size - len(kept), int((rest > 0).sum()))
    if size <= 0:
        return kept
    return np.concatenate([kept, rng.choice(synth.num_groups, size=size, replace=False, p=rest / rest.sum())])


def generate_cohort(synth: SynthConfig) -> tuple[list[PatientRecord], list[TransferRecord]]:
    """Generates patients and transfers; the RNG stream order defines the output"""
    rng = np.random.default_rng(synth.seed)
    groups = synth.group_labels()
    centers = synth.center_ids()
    theta = rng.dirichlet(np.full(synth.num_groups, synth.heterogeneity_alpha), size=synth.num_centers)
    support = (theta > 0).sum(axis=1)
    num_chronic = min(synth.chronic_groups, synth.num_groups) if synth.chronic_rate > 0 else 0

    cohort, transfers = [], []
    for index in range(synth.num_patients):
        patient_id = f"P{index:06d}"
        home = int(rng.integers(synth.num_centers))
        num_visits = int(rng.geometric(1.0 / synth.mean_visits))
        chronic = rng.choice(synth.num_groups, size=num_chronic, replace=False) if num_chronic else np.empty(0, dtype=np.int64)

        age = int(rng.integers(18, 91))
        year = FIRST_YEAR + int(rng.integers(0, 5))
        admit_time = (year - 1970) * HOURS_PER_YEAR + int(rng.integers(0, 4000))
        visits = []
        for visit_index in range(num_visits):
            if visit_index:
                step = int(rng.integers(0, 3))
                age += step
                year += step
                admit_time += step * HOURS_PER_YEAR + int(rng.integers(24, 720))
            picked = _visit_groups(synth, rng, theta[home], int(support[home]), chronic)
            visits.append(Visit(tuple(groups[k] for k in picked), admit_time, age, year))
        cohort.append(PatientRecord(patient_id, tuple(visits)))

        units = [home] + [int(unit) for unit in rng.integers(synth.num_centers, size=int(rng.integers(0, 3)))]
        durations = rng.uniform(*STAY_HOURS, size=len(units))
        for unit, duration in zip(units, durations):
            bias = synth.home_stay_bias if unit == home else 1.0
            transfers.append(TransferRecord(patient_id, centers[unit], float(duration * bias)))

    logger.info(
        "Generated %d patients (%d visits) over %d centers, alpha=%s",
        len(cohort),
        sum(patient.num_visits for patient in cohort),
        synth.num_centers,
        synth.heterogeneity_alpha,
    )
    return cohort, transfers


######################################################################
#  H E T E R O G E N E I T Y
######################################################################
@dataclass
class HeterogeneityReport:
    """Pairwise total-variation distances between client group distributions"""

    pairs: dict[tuple[str, str], float]
    mean: float
    skipped: list[str]

    def serialize(self) -> dict:
        """Serializes the report into a dictionary"""
        return {
            "pairs": [{"a": a, "b": b, "tv": tv} for (a, b), tv in self.pairs.items()],
            "mean": self.mean,
            "skipped": self.skipped,
        }


def group_frequencies(client: ClientDataset) -> Counter:
    """Occurrence counts of each group across a shard's visits"""
    return Counter(group for patient in client.patients for visit in patient.visits for group in visit.diagnoses)


def heterogeneity_report(clients: Sequence[ClientDataset]) -> HeterogeneityReport:
    """TV(c, c') = 1/2 * sum_g |p_c(g) - p_c'(g)| for every pair of non-empty clients"""
    if len(clients) < 2:
        raise DataValidationError(f"heterogeneity needs at least 2 clients, got {len(clients)}")
    counts, skipped = {}, []
    for client in clients:
        frequency = group_frequencies(client)
        if not frequency:
            logger.warning("Skipping empty client shard %s", client.center_id)
            skipped.append(client.center_id)
            continue
        counts[client.center_id] = frequency
    if len(counts) < 2:
        raise DataValidationError("heterogeneity needs at least 2 non-empty clients")

    labels = sorted(set().union(*counts.values()))
    distributions = {}
    for center_id, frequency in counts.items():
        vector = np.array([frequency[label] for label in labels], dtype=np.float64)
        distributions[center_id] = vector / vector.sum()

    pairs = {
        (a, b): float(0.5 * np.abs(distributions[a] - distributions[b]).sum())
        for a, b in itertools.combinations(sorted(distributions), 2)
    }
    return HeterogeneityReport(pairs=pairs, mean=float(np.mean(list(pairs.values()))), skipped=skipped)
