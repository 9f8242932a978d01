"""
Models for model-ready sequences

A patient history is flattened into parallel lanes:

    [CLS] v1 tokens [SEP] v2 tokens [SEP] ... vj tokens [SEP] [PAD] ...

Segments alternate per visit, positions restart at every visit and the
oldest visits are dropped first when the layout does not fit.
"""

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .base import DataValidationError
from .patient import PatientRecord
from .vocabulary import CLS_ID, PAD_ID, SEP_ID, Vocabulary

logger = logging.getLogger("flask.app")

LANES = ("token_ids", "age_ids", "year_ids", "segment_ids", "position_ids", "attention_mask")


######################################################################
#  I N P U T   S E Q U E N C E
######################################################################
@dataclass(frozen=True)
class InputSequence:
    """One encoded history, every lane of the same length L"""

    token_ids: tuple[int, ...]
    age_ids: tuple[int, ...]
    year_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    truncated: bool = False
    dropped_visits: int = 0

    def __post_init__(self):
        lengths = {len(getattr(self, lane)) for lane in LANES}
        if len(lengths) != 1:
            raise DataValidationError(f"Invalid InputSequence: lane lengths differ {sorted(lengths)}")

    @property
    def length(self) -> int:
        """Lane length L"""
        return len(self.token_ids)


@dataclass(frozen=True)
class NextVisitExample:
    """History through visit j and the multi-hot groups of visit j+1"""

    input: InputSequence
    labels: tuple[int, ...]
    pivot_j: int


######################################################################
#  S E Q U E N C E   B A T C H
######################################################################
@dataclass(frozen=True)
class SequenceBatch:
    """A stack of InputSequences, each lane a (B, L) integer array"""

    token_ids: np.ndarray
    age_ids: np.ndarray
    year_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray

    @classmethod
    def from_sequences(cls, sequences: Sequence[InputSequence]) -> "SequenceBatch":
        """Stacks encoded sequences into arrays"""
        if not sequences:
            raise DataValidationError("cannot batch zero sequences")
        return cls(**{lane: np.array([getattr(seq, lane) for seq in sequences], dtype=np.int64) for lane in LANES})

    def __len__(self):
        return self.token_ids.shape[0]

    @property
    def max_len(self) -> int:
        """Lane length L"""
        return self.token_ids.shape[1]

    def take(self, indices) -> "SequenceBatch":
        """Rows of the batch in the given order"""
        return SequenceBatch(**{lane: getattr(self, lane)[indices] for lane in LANES})

    def with_tokens(self, token_ids: np.ndarray) -> "SequenceBatch":
        """Same batch with a replaced token lane"""
        return replace(self, token_ids=token_ids)

    def trimmed(self) -> "SequenceBatch":
        """Same batch without the trailing columns that are padding in every row"""
        columns = np.flatnonzero(self.attention_mask.any(axis=0))
        used = int(columns[-1]) + 1 if len(columns) else 1
        if used == self.max_len:
            return self
        return SequenceBatch(**{lane: getattr(self, lane)[:, :used] for lane in LANES})


######################################################################
#  E N C O D I N G
######################################################################
def encode_history(patient: PatientRecord, upto_visit: int, vocab: Vocabulary, max_len: int) -> InputSequence:
    """Encodes visits 1..upto_visit of a patient into an InputSequence of length max_len"""
    if max_len < 3:
        raise ValueError(f"sequence length must be >= 3, got {max_len}")
    if not 1 <= upto_visit <= patient.num_visits:
        raise ValueError(f"visit index {upto_visit} out of range 1..{patient.num_visits} for {patient.patient_id}")

    history = list(patient.visits[:upto_visit])
    token_lists = [[vocab.token_id(group) for group in visit.diagnoses] for visit in history]

    dropped = 0
    while len(history) > 1 and 1 + sum(len(ids) + 1 for ids in token_lists) > max_len:
        history.pop(0)
        token_lists.pop(0)
        dropped += 1
    truncated = dropped > 0
    if len(token_lists[0]) + 2 > max_len:
        token_lists[0] = token_lists[0][: max_len - 2]
        truncated = True
    if truncated:
        logger.debug("Truncated %s: dropped %d visit(s)", patient.patient_id, dropped)

    first = history[0]
    tokens, ages, years = [CLS_ID], [vocab.age_id(first.age_years)], [vocab.year_id(first.calendar_year)]
    segments, positions = [0], [0]
    for index, (visit, ids) in enumerate(zip(history, token_lists)):
        age_id, year_id = vocab.age_id(visit.age_years), vocab.year_id(visit.calendar_year)
        for offset, token_id in enumerate(ids + [SEP_ID]):
            tokens.append(token_id)
            ages.append(age_id)
            years.append(year_id)
            segments.append(index % 2)
            positions.append(offset)

    used = len(tokens)
    padding = [0] * (max_len - used)
    return InputSequence(
        token_ids=tuple(tokens + [PAD_ID] * (max_len - used)),
        age_ids=tuple(ages + padding),
        year_ids=tuple(years + padding),
        segment_ids=tuple(segments + padding),
        position_ids=tuple(positions + padding),
        attention_mask=tuple([1] * used + padding),
        truncated=truncated,
        dropped_visits=dropped,
    )


def make_nextvisit_example(patient: PatientRecord, pivot_j: int, vocab: Vocabulary, max_len: int) -> NextVisitExample:
    """Builds the example that predicts visit j+1 from visits 1..j"""
    if patient.num_visits < 2:
        raise DataValidationError("patient has no next visit")
    if not 1 <= pivot_j <= patient.num_visits - 1:
        raise ValueError(f"pivot {pivot_j} out of range 1..{patient.num_visits - 1} for {patient.patient_id}")
    labels = [0] * vocab.num_groups
    for group in patient.visits[pivot_j].diagnoses:
        index = vocab.label_index(group)
        if index is not None:
            labels[index] = 1
    if not any(labels):
        raise DataValidationError(f"visit {pivot_j + 1} of {patient.patient_id} has no known diagnosis group")
    return NextVisitExample(
        input=encode_history(patient, pivot_j, vocab, max_len),
        labels=tuple(labels),
        pivot_j=pivot_j,
    )
