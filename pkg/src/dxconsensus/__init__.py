"""Multi-model consensus diagnosis over psychiatrist-patient transcripts."""

from .catalog import Catalog, DsmCode, MalformedCode, UnknownCode, default_catalog, extract_codes
from .consensus import (
    ConsensusOutcome,
    DecisionStatus,
    ModelPrediction,
    decide_adjudicated,
    decide_deterministic,
    parse_prediction,
    tally,
)

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "ConsensusOutcome",
    "DecisionStatus",
    "DsmCode",
    "MalformedCode",
    "ModelPrediction",
    "UnknownCode",
    "decide_adjudicated",
    "decide_deterministic",
    "default_catalog",
    "extract_codes",
    "parse_prediction",
    "tally",
]
