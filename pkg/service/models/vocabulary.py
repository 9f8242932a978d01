"""
Models for the token space

The vocabulary maps special tokens and diagnosis groups to contiguous ids
and owns the bucketing of the age and calendar-year lanes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from service import config
from .base import DataValidationError
from .patient import PatientRecord

logger = logging.getLogger("flask.app")

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
FIRST_DISEASE_ID = len(SPECIAL_TOKENS)


######################################################################
#  V O C A B U L A R Y
######################################################################
@dataclass(frozen=True)
class Vocabulary:
    """
    Class that represents the token space

    Special tokens take ids 0..4, disease groups take ids 5.. in sorted
    label order.
    """

    groups: tuple[str, ...]
    age_buckets: int = config.AGE_BUCKETS
    base_year: int = config.BASE_YEAR
    year_buckets: int = config.YEAR_BUCKETS
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups = tuple(sorted(set(self.groups)))
        clash = set(groups) & set(SPECIAL_TOKENS)
        if clash:
            raise DataValidationError(f"Invalid Vocabulary: group labels clash with special tokens {sorted(clash)}")
        if self.age_buckets < 1 or self.year_buckets < 1:
            raise DataValidationError("Invalid Vocabulary: bucket counts must be positive")
        object.__setattr__(self, "groups", groups)
        tokens = SPECIAL_TOKENS + groups
        object.__setattr__(self, "token_to_id", {token: index for index, token in enumerate(tokens)})

    def __repr__(self):
        return f"<Vocabulary V=[{self.size}] G=[{self.num_groups}]>"

    @property
    def size(self) -> int:
        """Number of tokens V"""
        return len(self.token_to_id)

    @property
    def num_groups(self) -> int:
        """Number of disease groups G"""
        return len(self.groups)

    def token_id(self, label: str) -> int:
        """Id of a group label, UNK when the label is unknown"""
        return self.token_to_id.get(label, UNK_ID)

    def token(self, token_id: int) -> str:
        """Label of a token id"""
        if token_id < FIRST_DISEASE_ID:
            return SPECIAL_TOKENS[token_id]
        return self.groups[token_id - FIRST_DISEASE_ID]

    def label_index(self, label: str) -> Optional[int]:
        """Position of a group in the G-way label space"""
        token_id = self.token_to_id.get(label)
        if token_id is None or token_id < FIRST_DISEASE_ID:
            return None
        return token_id - FIRST_DISEASE_ID

    def age_id(self, age_years: int) -> int:
        """Bucket index of an age, one bucket per year"""
        return min(max(int(age_years), 0), self.age_buckets - 1)

    def year_id(self, calendar_year: int) -> int:
        """Bucket index of a calendar year, offset from base_year"""
        return min(max(int(calendar_year) - self.base_year, 0), self.year_buckets - 1)

    def serialize(self) -> dict:
        """Serializes a Vocabulary into a dictionary"""
        return {
            "groups": list(self.groups),
            "age_buckets": self.age_buckets,
            "base_year": self.base_year,
            "year_buckets": self.year_buckets,
        }

    @classmethod
    def deserialize(cls, data: dict) -> "Vocabulary":
        """Deserializes a Vocabulary from a dictionary"""
        try:
            return cls(
                groups=tuple(data["groups"]),
                age_buckets=int(data["age_buckets"]),
                base_year=int(data["base_year"]),
                year_buckets=int(data["year_buckets"]),
            )
        except KeyError as error:
            raise DataValidationError("Invalid Vocabulary: missing " + error.args[0]) from error
        except TypeError as error:
            raise DataValidationError("Invalid Vocabulary: bad data " + str(error)) from error


def build_vocabulary(
    cohort: Sequence[PatientRecord],
    age_buckets: int = config.AGE_BUCKETS,
    base_year: int = config.BASE_YEAR,
    year_buckets: int = config.YEAR_BUCKETS,
) -> Vocabulary:
    """Builds the vocabulary of every group label seen in the cohort"""
    if not cohort:
        raise DataValidationError("empty cohort")
    groups = set()
    for patient in cohort:
        groups |= patient.groups()
    vocab = Vocabulary(tuple(groups), age_buckets, base_year, year_buckets)
    logger.info("Built vocabulary with %d groups (V=%d)", vocab.num_groups, vocab.size)
    return vocab
