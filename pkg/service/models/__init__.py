"""
Models for fedseq

Patient records, vocabulary, encoded sequences, care-unit partitions,
synthetic cohorts and the transformer with its optimizer and checkpoints
are all stored in this package
"""

from .base import CheckpointError, ConfigBase, ConfigError, DataValidationError
from .patient import UNK_GROUP, GroupedCode, PatientRecord, Visit, filter_min_visits, map_code_to_group, split_cohort
from .vocabulary import (
    CLS_ID,
    FIRST_DISEASE_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    build_vocabulary,
)
from .sequence import InputSequence, NextVisitExample, SequenceBatch, encode_history, make_nextvisit_example
from .centers import ClientDataset, Partition, TransferRecord, assign_center, partition_cohort
from .synth import HeterogeneityReport, SynthConfig, generate_cohort, heterogeneity_report, identity_group_table
from .ingestion import CohortData, load_dataset, write_dataset
from .behrt import HyperParams, ModelParams, ParamGradients, Task, TensorBundle, canonical_shapes, init_params, transfer_for_finetune
from .network import backward, forward, mlm_loss, nextvisit_loss, sigmoid
from .optimizer import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
