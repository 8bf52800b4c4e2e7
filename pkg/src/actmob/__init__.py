"""Activity-based next-trip prediction from transit smart-card sequences."""

from .types import (
    NULL_LOCATION,
    ActivityRecord,
    ActivitySequence,
    DataError,
    DaySequence,
    LocationVocab,
    TripRecord,
    UserHistory,
)
from .schema import Feature, FeatureSchema, build_schema, synthetic_schema
from .iohmm import (
    EMConfig,
    EMReport,
    ForwardBackwardResult,
    IOHMMParams,
    e_step,
    emission_logdensity,
    fit,
    forward_backward,
    initial_prob,
    transition_prob,
)
from .pipeline import derive_activities, segment_days, split_train_test
from .prediction import PredictionResult, next_state_posterior, predict_duration, predict_location
from .selection import SilhouetteSelection, cluster_contexts, select_state_count, silhouette
from .synth import SyntheticScenario, default_scenario, synthesize
from .baselines import fit_lr, fit_mc, predict_lr, predict_mc
from .evaluation import PredictionRow, aggregate_report, infer_home, score_user
from .interpret import PatternReport, coefficient_table, gibbs_sample, pattern_report

__version__ = "0.1.0"

__all__ = [
    "NULL_LOCATION",
    "ActivityRecord",
    "ActivitySequence",
    "DataError",
    "DaySequence",
    "LocationVocab",
    "TripRecord",
    "UserHistory",
    "Feature",
    "FeatureSchema",
    "build_schema",
    "synthetic_schema",
    "EMConfig",
    "EMReport",
    "ForwardBackwardResult",
    "IOHMMParams",
    "e_step",
    "emission_logdensity",
    "fit",
    "forward_backward",
    "initial_prob",
    "transition_prob",
    "derive_activities",
    "segment_days",
    "split_train_test",
    "PredictionResult",
    "next_state_posterior",
    "predict_duration",
    "predict_location",
    "SilhouetteSelection",
    "cluster_contexts",
    "select_state_count",
    "silhouette",
    "SyntheticScenario",
    "default_scenario",
    "synthesize",
    "fit_lr",
    "fit_mc",
    "predict_lr",
    "predict_mc",
    "PredictionRow",
    "aggregate_report",
    "infer_home",
    "score_user",
    "PatternReport",
    "coefficient_table",
    "gibbs_sample",
    "pattern_report",
]
