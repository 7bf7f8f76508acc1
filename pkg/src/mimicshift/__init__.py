"""Distribution-shifting poisoning attacks on online DDoS filters, and the filters."""

from .attack import MimicModel, MimicShift, build_score_matrix, binarize, make_shift_schedule
from .experiment import ExperimentConfig, ExperimentResult, run_experiment
from .filters import (IterativeClassifierFilter, NOnlyFilter, NOverDFilter, NormalModel,
                      decide, make_interval_schedule, reject_mask, run_online)
from .markov import (PUBLISHED_PROFILES, MarkovParams, ShiftProfile, empirical_transition,
                     sample_class_sequences, stationary_distribution)
from .metrics import Confusion, compute_metrics, confusion, emit_report, rate_curve
from .traffic import (SKEW_PRESETS, FeatureClassGrouper, RequestCorpus, Vocabulary,
                      ingest_csv, synth_normal_corpus, write_csv)

__version__ = "0.1.0"

__all__ = [
    "Confusion", "ExperimentConfig", "ExperimentResult", "FeatureClassGrouper",
    "IterativeClassifierFilter", "MarkovParams", "MimicModel", "MimicShift", "NOnlyFilter",
    "NOverDFilter", "NormalModel", "PUBLISHED_PROFILES", "RequestCorpus", "SKEW_PRESETS",
    "ShiftProfile", "Vocabulary", "binarize", "build_score_matrix", "compute_metrics",
    "confusion", "decide", "emit_report", "empirical_transition", "ingest_csv",
    "make_interval_schedule", "make_shift_schedule", "rate_curve", "reject_mask",
    "run_experiment", "run_online", "sample_class_sequences", "stationary_distribution",
    "synth_normal_corpus", "write_csv",
]
