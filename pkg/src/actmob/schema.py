"""Context feature schema: definition, construction, and encoding.

A schema is an ordered list of feature definitions. Each feature expands
to one or more columns of the context vector z_t. The first feature is
always an intercept fixed to 1.0. Schemas are frozen before any model
fitting; z-scoring constants for historical features are computed on
training data only and baked into the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Sequence

import numpy as np

from .types import NULL_LOCATION, ActivitySequence, DataError

KINDS = ("intercept", "binary", "real", "onehot")

# Value sources understood by the encoder. "rainy" and "holiday" read the
# calendar, "day_of_week" reads the day id (ISO date), the rest are
# derived from the activity position within the day or from training
# history statistics.
SOURCES = (
    "const",
    "rainy",
    "holiday",
    "day_of_week",
    "prev_end_time",
    "activity_index",
    "start_location",
    "hist_trips_per_day",
    "hist_mean_duration_at_index",
)

_WEEKDAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")
DOW_REFERENCE = "sat"  # dropped one-hot category

OTHER_LOCATION = "__other__"  # bucket for start locations outside the top-K


@dataclass(frozen=True)
class Feature:
    """One named feature definition.

    categories lists the one-hot columns (reference category dropped);
    mean/scale are z-scoring constants applied to "real" features.
    """

    name: str
    kind: str
    source: str
    categories: tuple[str, ...] = ()
    mean: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DataError(f"unknown feature kind {self.kind!r}")
        if self.source not in SOURCES:
            raise DataError(f"unknown feature source {self.source!r}")
        if self.kind == "onehot" and len(self.categories) == 0:
            raise DataError(f"one-hot feature {self.name!r} needs categories")
        if self.scale <= 0.0:
            raise DataError(f"feature {self.name!r} scale must be positive")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "onehot" else 1


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered, frozen feature list defining the context vector layout."""

    features: tuple[Feature, ...]
    _offsets: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if not self.features or self.features[0].kind != "intercept":
            raise DataError("the first feature must be the intercept")
        offsets, pos = {}, 0
        for f in self.features:
            offsets[f.name] = pos
            pos += f.width
        object.__setattr__(self, "_offsets", offsets)

    @property
    def dim(self) -> int:
        return sum(f.width for f in self.features)

    def column_names(self) -> tuple[str, ...]:
        cols: list[str] = []
        for f in self.features:
            if f.kind == "onehot":
                cols.extend(f"{f.name}={c}" for c in f.categories)
            else:
                cols.append(f.name)
        return tuple(cols)

    def offset(self, name: str) -> int:
        return self._offsets[name]

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)


@dataclass(frozen=True)
class ContextInputs:
    """Raw ingredients encoded into one context vector."""

    rainy: float = 0.0
    holiday: float = 0.0
    weekday: int | None = None  # 0=Monday .. 6=Sunday
    prev_end_time: float = 0.0  # hours since day start
    activity_index: int = 1  # 1-based position within the day
    start_location: str = NULL_LOCATION
    hist_trips_per_day: float = 0.0
    hist_mean_duration_at_index: float = 0.0


def weekday_from_day_id(day: str) -> int | None:
    """Weekday index from an ISO date day id; None when unparsable."""
    try:
        return date.fromisoformat(day).weekday()
    except ValueError:
        return None


def encode_context(schema: FeatureSchema, inputs: ContextInputs) -> np.ndarray:
    """Encode one context vector; pure in (schema, inputs)."""
    z = np.zeros(schema.dim)
    pos = 0
    for f in schema.features:
        if f.kind == "intercept":
            z[pos] = 1.0
        elif f.source == "rainy":
            z[pos] = float(inputs.rainy)
        elif f.source == "holiday":
            z[pos] = float(inputs.holiday)
        elif f.source == "day_of_week":
            if inputs.weekday is not None:
                name = _WEEKDAY_NAMES[inputs.weekday]
                if name in f.categories:
                    z[pos + f.categories.index(name)] = 1.0
        elif f.source == "prev_end_time":
            z[pos] = inputs.prev_end_time / 24.0
        elif f.source == "activity_index":
            z[pos] = float(inputs.activity_index)
        elif f.source == "start_location":
            loc = inputs.start_location
            if loc != NULL_LOCATION:
                cat = loc if loc in f.categories else OTHER_LOCATION
                if cat in f.categories:
                    z[pos + f.categories.index(cat)] = 1.0
        elif f.source == "hist_trips_per_day":
            z[pos] = (inputs.hist_trips_per_day - f.mean) / f.scale
        elif f.source == "hist_mean_duration_at_index":
            z[pos] = (inputs.hist_mean_duration_at_index - f.mean) / f.scale
        pos += f.width
    return z


# --- history statistics used by the "hist_*" sources -------------------------

@dataclass(frozen=True)
class HistoryStats:
    """Per-user training statistics feeding the historical features."""

    trips_per_day: float
    mean_duration_by_index: tuple[float, ...]
    mean_duration_overall: float

    def duration_at(self, index: int) -> float:
        """Mean training duration of the index-th activity (1-based)."""
        if 1 <= index <= len(self.mean_duration_by_index):
            return self.mean_duration_by_index[index - 1]
        return self.mean_duration_overall


def compute_history_stats(sequences: Iterable[ActivitySequence]) -> HistoryStats:
    seqs = list(sequences)
    if not seqs:
        raise DataError("history statistics need at least one sequence")
    trips_per_day = float(np.mean([len(s) for s in seqs]))
    max_t = max(len(s) for s in seqs)
    by_index = []
    for t in range(max_t):
        vals = [s.activities[t].duration for s in seqs if len(s) > t]
        by_index.append(float(np.mean(vals)))
    overall = float(np.mean([a.duration for s in seqs for a in s.activities]))
    return HistoryStats(trips_per_day, tuple(by_index), overall)


# --- default schema construction ---------------------------------------------

def dow_feature() -> Feature:
    cats = tuple(n for n in _WEEKDAY_NAMES if n != DOW_REFERENCE)
    return Feature("day_of_week", "onehot", "day_of_week", categories=cats)


def base_features(include_calendar: bool = True, include_dow: bool = True) -> list[Feature]:
    feats = [Feature("intercept", "intercept", "const")]
    if include_calendar:
        feats.append(Feature("rainy", "binary", "rainy"))
        if include_dow:
            feats.append(dow_feature())
        feats.append(Feature("public_holiday", "binary", "holiday"))
    feats.append(Feature("prev_end_time", "real", "prev_end_time"))
    feats.append(Feature("activity_index", "real", "activity_index"))
    return feats


def build_schema(
    train_sequences: Sequence[ActivitySequence],
    top_k_start_locations: int = 10,
) -> FeatureSchema:
    """Default ingest schema, with constants frozen from training data.

    Features: intercept; rainy; day-of-week dummies (reference Saturday);
    public holiday; previous trip end time /24; activity index; one-hot of
    the start location over the top-K training start locations plus an
    "other" bucket (NULL is the dropped reference); z-scored mean trips
    per active day; z-scored historical mean duration at the activity's
    index.
    """
    if not train_sequences:
        raise DataError("cannot build a schema from an empty training set")
    feats = base_features()

    counts: dict[str, int] = {}
    for seq in train_sequences:
        for act in seq.activities:
            if act.start_location != NULL_LOCATION:
                counts[act.start_location] = counts.get(act.start_location, 0) + 1
    top = sorted(counts, key=lambda s: (-counts[s], s))[:top_k_start_locations]
    feats.append(
        Feature(
            "start_location",
            "onehot",
            "start_location",
            categories=tuple(sorted(top)) + (OTHER_LOCATION,),
        )
    )

    per_day = [float(len(s)) for s in train_sequences]
    mu_tpd = float(np.mean(per_day))
    sd_tpd = float(np.std(per_day))
    durations = [a.duration for s in train_sequences for a in s.activities]
    mu_dur = float(np.mean(durations))
    sd_dur = float(np.std(durations))
    feats.append(
        Feature(
            "hist_trips_per_day",
            "real",
            "hist_trips_per_day",
            mean=mu_tpd,
            scale=sd_tpd if sd_tpd > 0 else 1.0,
        )
    )
    feats.append(
        Feature(
            "hist_mean_duration_at_index",
            "real",
            "hist_mean_duration_at_index",
            mean=mu_dur,
            scale=sd_dur if sd_dur > 0 else 1.0,
        )
    )
    return FeatureSchema(tuple(feats))


def synthetic_schema(include_calendar: bool = True, include_dow: bool = False) -> FeatureSchema:
    """Compact schema for synthetic scenarios (no per-user history terms).

    Day-of-week dummies are off by default to keep generated corpora
    well-conditioned for per-user estimation at a few hundred days.
    """
    return FeatureSchema(tuple(base_features(include_calendar, include_dow)))


# --- serialization ------------------------------------------------------------

def schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "features": [
            {
                "name": f.name,
                "kind": f.kind,
                "source": f.source,
                "categories": list(f.categories),
                "mean": f.mean,
                "scale": f.scale,
            }
            for f in schema.features
        ]
    }


def schema_from_dict(d: dict) -> FeatureSchema:
    feats = tuple(
        Feature(
            name=f["name"],
            kind=f["kind"],
            source=f["source"],
            categories=tuple(f.get("categories", ())),
            mean=float(f.get("mean", 0.0)),
            scale=float(f.get("scale", 1.0)),
        )
        for f in d["features"]
    )
    return FeatureSchema(feats)
