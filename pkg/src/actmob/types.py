"""Core domain types shared across the package.

Time convention: all clock times are real hours since the 4:00 AM day
boundary (so 0.0 means 4:00 AM local time and a day spans [0, 24)).
Durations are real hours. User and day identifiers are opaque strings;
nothing in the library parses them except the default feature schema,
which reads day-of-week from ISO dates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Reserved start-location token for the first activity of a day ("no
# previous destination"). Must never collide with a real station id.
NULL_LOCATION = "__null__"

DAY_START_HOUR = 4.0  # days run 4:00 AM -> 4:00 AM
HOURS_PER_DAY = 24.0


class DataError(ValueError):
    """Raised when an input record violates a structural invariant."""


def _check_station(station: str, name: str) -> None:
    if not station:
        raise DataError(f"{name} must be a non-empty station id")
    if station == NULL_LOCATION:
        raise DataError(f"{name} must not be the reserved token {NULL_LOCATION!r}")


@dataclass(frozen=True)
class TripRecord:
    """One tap-in/tap-out trip within a day.

    Attributes:
        origin: boarding station.
        destination: alighting station.
        start_time: boarding time, hours since the 4:00 AM day start.
        end_time: alighting time, hours since day start. May equal 24.0
            only when the trip crossed the day boundary and was clipped.
        end_clipped: True when the recorded alight time fell past the
            4:00 AM boundary and end_time was clipped to 24.0.
    """

    origin: str
    destination: str
    start_time: float
    end_time: float
    end_clipped: bool = False

    def __post_init__(self) -> None:
        _check_station(self.origin, "origin")
        _check_station(self.destination, "destination")
        if not (0.0 <= self.start_time < HOURS_PER_DAY):
            raise DataError(f"trip start_time {self.start_time} outside [0, 24)")
        if not (self.start_time <= self.end_time <= HOURS_PER_DAY):
            raise DataError(
                f"trip end_time {self.end_time} outside [{self.start_time}, 24]"
            )


@dataclass(frozen=True)
class DaySequence:
    """Ordered trips of one user on one active day."""

    user: str
    day: str
    trips: tuple[TripRecord, ...]

    def __post_init__(self) -> None:
        if len(self.trips) == 0:
            raise DataError("a DaySequence needs at least one trip")
        for prev, cur in zip(self.trips, self.trips[1:]):
            if cur.start_time < prev.end_time:
                raise DataError(
                    f"day {self.day}: trip boarding at {cur.start_time} starts "
                    f"before the previous trip ends at {prev.end_time}"
                )

    def __len__(self) -> int:
        return len(self.trips)


@dataclass(frozen=True)
class ActivityRecord:
    """One hidden activity between consecutive trips.

    start_location is NULL_LOCATION exactly for the first activity of a
    day; start_time is the previous trip's end time (0.0 for the first).
    """

    start_location: str
    end_location: str
    duration: float
    start_time: float

    def __post_init__(self) -> None:
        _check_station(self.end_location, "end_location")
        if not self.start_location:
            raise DataError("start_location must be non-empty")
        if self.duration < 0.0:
            raise DataError(f"negative activity duration {self.duration}")
        if not (0.0 <= self.start_time <= HOURS_PER_DAY):
            raise DataError(f"activity start_time {self.start_time} outside [0, 24]")


@dataclass(frozen=True)
class ActivitySequence:
    """Activities of one user-day plus their context vectors.

    contexts is a read-only (T, D) float array aligned with activities,
    or None before context building.
    """

    user: str
    day: str
    activities: tuple[ActivityRecord, ...]
    contexts: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.activities) == 0:
            raise DataError("a sequence needs at least one activity")
        first = self.activities[0]
        if first.start_location != NULL_LOCATION:
            raise DataError("first activity must start at NULL_LOCATION")
        for act in self.activities[1:]:
            if act.start_location == NULL_LOCATION:
                raise DataError("only the first activity may start at NULL_LOCATION")
        if self.contexts is not None:
            ctx = np.asarray(self.contexts, dtype=float)
            if ctx.ndim != 2 or ctx.shape[0] != len(self.activities):
                raise DataError(
                    f"contexts shape {ctx.shape} does not match T={len(self.activities)}"
                )
            if not np.all(np.isfinite(ctx)):
                raise DataError("contexts must be finite")
            ctx.flags.writeable = False
            object.__setattr__(self, "contexts", ctx)

    def __len__(self) -> int:
        return len(self.activities)

    @property
    def durations(self) -> np.ndarray:
        return np.array([a.duration for a in self.activities])

    @property
    def end_locations(self) -> tuple[str, ...]:
        return tuple(a.end_location for a in self.activities)

    def with_contexts(self, contexts: np.ndarray) -> "ActivitySequence":
        return ActivitySequence(self.user, self.day, self.activities, contexts)


@dataclass(frozen=True)
class LocationVocab:
    """Ordered station vocabulary of one user (lexicographic order)."""

    stations: tuple[str, ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.stations)) != len(self.stations):
            raise DataError("vocab stations must be unique")
        for s in self.stations:
            _check_station(s, "vocab station")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.stations)})

    @classmethod
    def from_sequences(cls, sequences: Iterable[ActivitySequence]) -> "LocationVocab":
        seen: set[str] = set()
        for seq in sequences:
            for act in seq.activities:
                seen.add(act.end_location)
                if act.start_location != NULL_LOCATION:
                    seen.add(act.start_location)
        return cls(tuple(sorted(seen)))

    def index_of(self, station: str) -> int:
        try:
            return self._index[station]
        except KeyError:
            raise DataError(f"station {station!r} not in vocabulary") from None

    def __contains__(self, station: str) -> bool:
        return station in self._index

    def __len__(self) -> int:
        return len(self.stations)


@dataclass(frozen=True)
class UserHistory:
    """All activity sequences of one user, with vocab and feature schema."""

    user: str
    sequences: tuple[ActivitySequence, ...]
    vocab: LocationVocab
    schema: "FeatureSchema | None" = None

    def __post_init__(self) -> None:
        if len(self.sequences) == 0:
            raise DataError("a UserHistory needs at least one sequence")
        for seq in self.sequences:
            if seq.user != self.user:
                raise DataError(f"sequence user {seq.user!r} != {self.user!r}")
            for act in seq.activities:
                if act.end_location not in self.vocab:
                    raise DataError(f"end location {act.end_location!r} not in vocab")
                if act.start_location != NULL_LOCATION and act.start_location not in self.vocab:
                    raise DataError(f"start location {act.start_location!r} not in vocab")

    @property
    def n_days(self) -> int:
        return len(self.sequences)

    @property
    def n_activities(self) -> int:
        return sum(len(s) for s in self.sequences)

    def day_ids(self) -> tuple[str, ...]:
        return tuple(s.day for s in self.sequences)

    def subset(self, days: Sequence[str]) -> "UserHistory":
        """History restricted to the given days (order preserved)."""
        wanted = set(days)
        seqs = tuple(s for s in self.sequences if s.day in wanted)
        return UserHistory(self.user, seqs, self.vocab, self.schema)


# --- JSON round-trip helpers -------------------------------------------------

def activity_to_dict(act: ActivityRecord) -> dict:
    return {
        "p": act.start_location,
        "q": act.end_location,
        "r": act.duration,
        "y_prev": act.start_time,
    }


def activity_from_dict(d: dict) -> ActivityRecord:
    return ActivityRecord(d["p"], d["q"], float(d["r"]), float(d["y_prev"]))


def sequence_to_dict(seq: ActivitySequence) -> dict:
    out = {
        "day": seq.day,
        "activities": [activity_to_dict(a) for a in seq.activities],
    }
    if seq.contexts is not None:
        out["contexts"] = [[float(v) for v in row] for row in seq.contexts]
    return out


def sequence_from_dict(user: str, d: dict) -> ActivitySequence:
    contexts = d.get("contexts")
    return ActivitySequence(
        user=user,
        day=d["day"],
        activities=tuple(activity_from_dict(a) for a in d["activities"]),
        contexts=np.asarray(contexts, dtype=float) if contexts is not None else None,
    )


def history_to_json(history: UserHistory, splits: dict[str, str] | None = None) -> str:
    """Serialize a UserHistory to the corpus JSON document.

    splits optionally maps day id -> "train"/"test"; days absent from the
    map carry no split label.
    """
    from .schema import schema_to_dict  # local import to avoid a cycle

    seqs = []
    for seq in history.sequences:
        d = sequence_to_dict(seq)
        if splits and seq.day in splits:
            d["split"] = splits[seq.day]
        seqs.append(d)
    doc = {
        "format_version": 1,
        "user": history.user,
        "vocab": list(history.vocab.stations),
        "schema": schema_to_dict(history.schema) if history.schema is not None else None,
        "sequences": seqs,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def history_from_json(text: str) -> tuple[UserHistory, dict[str, str]]:
    """Parse a corpus JSON document; returns (history, split labels)."""
    from .schema import schema_from_dict

    doc = json.loads(text)
    if doc.get("format_version") != 1:
        raise DataError(f"unsupported corpus format_version {doc.get('format_version')!r}")
    user = doc["user"]
    seqs = tuple(sequence_from_dict(user, d) for d in doc["sequences"])
    splits = {d["day"]: d["split"] for d in doc["sequences"] if "split" in d}
    vocab = LocationVocab(tuple(doc["vocab"]))
    schema = schema_from_dict(doc["schema"]) if doc.get("schema") is not None else None
    return UserHistory(user, seqs, vocab, schema), splits
