"""
Global Configuration for Application
"""
import os
import logging

# Root directory for experiment runs (re-read at call time, see run_root())
RUN_DIR = os.getenv("FEDSEQ_RUN_DIR", "runs")

# Bucketing of the age and calendar-year input lanes
AGE_BUCKETS = int(os.getenv("FEDSEQ_AGE_BUCKETS", "121"))
BASE_YEAR = int(os.getenv("FEDSEQ_BASE_YEAR", "2000"))
YEAR_BUCKETS = int(os.getenv("FEDSEQ_YEAR_BUCKETS", "50"))

LOGGING_LEVEL = getattr(logging, os.getenv("LOGGING_LEVEL", "INFO").upper(), logging.INFO)


def run_root() -> str:
    """Returns the output root, letting the environment override the startup value"""
    return os.getenv("FEDSEQ_RUN_DIR", RUN_DIR)
