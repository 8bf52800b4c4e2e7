"""Raw tap ingestion and activity-sequence derivation.

Turns tap-in/tap-out transaction records into per-day trip sequences,
derives the hidden-activity observations between consecutive trips, and
attaches context vectors. Days run from 4:00 AM to 4:00 AM of the next
calendar day; a trip belongs to the day containing its board timestamp.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .seeding import derive_seed
from .schema import (
    ContextInputs,
    FeatureSchema,
    HistoryStats,
    build_schema,
    compute_history_stats,
    encode_context,
    weekday_from_day_id,
)
from .types import (
    DAY_START_HOUR,
    HOURS_PER_DAY,
    NULL_LOCATION,
    ActivityRecord,
    ActivitySequence,
    DataError,
    DaySequence,
    LocationVocab,
    TripRecord,
    UserHistory,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawTapRecord:
    """One raw smart-card transaction pair (absolute wall-clock times)."""

    user: str
    board_station: str
    alight_station: str
    board_time: datetime
    alight_time: datetime

    def __post_init__(self) -> None:
        if self.alight_time <= self.board_time:
            raise DataError(
                f"user {self.user}: alight {self.alight_time} not after board {self.board_time}"
            )


@dataclass
class CalendarData:
    """Per-date rainy / public-holiday flags (ISO date keyed)."""

    flags: dict[str, tuple[int, int]] = field(default_factory=dict)
    missing_dates: set[str] = field(default_factory=set)

    def lookup(self, day: str) -> tuple[int, int]:
        if day in self.flags:
            return self.flags[day]
        if day not in self.missing_dates:
            self.missing_dates.add(day)
            log.warning("calendar has no entry for %s; assuming rainy=0, holiday=0", day)
        return (0, 0)


@dataclass
class IngestReport:
    """Counters accumulated while ingesting raw records."""

    n_rows: int = 0
    n_malformed: int = 0
    n_rejected_overlap: int = 0
    n_clipped: int = 0
    n_users: int = 0
    n_days: int = 0
    n_trips: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _day_anchor(ts: datetime) -> tuple[str, datetime]:
    """Day id and 4:00 AM anchor of the day containing ts."""
    shifted = ts - timedelta(hours=DAY_START_HOUR)
    day = shifted.date()
    anchor = datetime(day.year, day.month, day.day, int(DAY_START_HOUR), tzinfo=ts.tzinfo)
    return day.isoformat(), anchor


def segment_days(
    taps: Sequence[RawTapRecord], user: str, report: IngestReport | None = None
) -> list[DaySequence]:
    """Partition one user's taps into per-day trip sequences.

    Taps are sorted by board time. A record boarding before the previous
    record alights is rejected with a diagnostic. Trips crossing the
    4:00 AM boundary stay in the boarding day with their end time clipped
    to 24.0 and flagged.
    """
    report = report if report is not None else IngestReport()
    for t in taps:
        if t.user != user:
            raise DataError(f"tap for user {t.user!r} passed to segment_days({user!r})")
    ordered = sorted(taps, key=lambda t: (t.board_time, t.alight_time))

    accepted: list[RawTapRecord] = []
    last_alight: datetime | None = None
    for tap in ordered:
        if last_alight is not None and tap.board_time < last_alight:
            report.n_rejected_overlap += 1
            log.warning(
                "user %s: rejecting trip boarding %s before previous alight %s",
                user, tap.board_time, last_alight,
            )
            continue
        accepted.append(tap)
        last_alight = tap.alight_time

    by_day: dict[str, list[TripRecord]] = {}
    for tap in accepted:
        day, anchor = _day_anchor(tap.board_time)
        start = (tap.board_time - anchor).total_seconds() / 3600.0
        end = (tap.alight_time - anchor).total_seconds() / 3600.0
        clipped = end > HOURS_PER_DAY
        if clipped:
            end = HOURS_PER_DAY
            report.n_clipped += 1
        by_day.setdefault(day, []).append(
            TripRecord(tap.board_station, tap.alight_station, start, end, clipped)
        )

    days = [DaySequence(user, day, tuple(trips)) for day, trips in sorted(by_day.items())]
    report.n_days += len(days)
    report.n_trips += sum(len(d) for d in days)
    return days


def derive_activities(day: DaySequence) -> ActivitySequence:
    """Hidden-activity observations of one day.

    Activity t ends where trip t boards (q_t = o_t), starts where trip
    t-1 alighted (p_t = d_{t-1}, NULL for t=1), and lasts from the
    previous alight to the current board (r_t = x_t - y_{t-1}, with
    y_0 = 0.0). The interval after the last trip is excluded.
    """
    acts = []
    prev_dest = NULL_LOCATION
    prev_end = 0.0
    for trip in day.trips:
        duration = trip.start_time - prev_end
        if duration < 0.0:
            raise DataError(
                f"day {day.day}: negative activity duration {duration} at trip "
                f"boarding {trip.start_time}"
            )
        acts.append(ActivityRecord(prev_dest, trip.origin, duration, prev_end))
        prev_dest = trip.destination
        prev_end = trip.end_time
    return ActivitySequence(day.user, day.day, tuple(acts))


def build_context(
    t: int,
    day: DaySequence,
    calendar: CalendarData,
    stats: HistoryStats,
    schema: FeatureSchema,
) -> np.ndarray:
    """Context vector z_t for the t-th activity (1-based) of a day."""
    if not (1 <= t <= len(day)):
        raise DataError(f"activity index {t} outside day of length {len(day)}")
    acts = derive_activities(day)
    act = acts.activities[t - 1]
    rainy, holiday = calendar.lookup(day.day)
    inputs = ContextInputs(
        rainy=rainy,
        holiday=holiday,
        weekday=weekday_from_day_id(day.day),
        prev_end_time=act.start_time,
        activity_index=t,
        start_location=act.start_location,
        hist_trips_per_day=stats.trips_per_day,
        hist_mean_duration_at_index=stats.duration_at(t),
    )
    return encode_context(schema, inputs)


def attach_contexts(
    days: Sequence[DaySequence],
    calendar: CalendarData,
    stats: HistoryStats,
    schema: FeatureSchema,
) -> list[ActivitySequence]:
    out = []
    for day in days:
        seq = derive_activities(day)
        ctx = np.stack([build_context(t, day, calendar, stats, schema) for t in range(1, len(day) + 1)])
        out.append(seq.with_contexts(ctx))
    return out


def split_train_test(
    history: UserHistory, test_fraction: float, seed: int
) -> tuple[UserHistory, UserHistory]:
    """Whole-day train/test split; |test| = round(fraction * days), >= 1."""
    if not (0.0 < test_fraction < 1.0):
        raise DataError(f"test_fraction {test_fraction} outside (0, 1)")
    if history.n_days < 2:
        raise DataError("need at least 2 active days to split")
    n = history.n_days
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = tuple(s for i, s in enumerate(history.sequences) if i not in test_idx)
    test = tuple(s for i, s in enumerate(history.sequences) if i in test_idx)
    return (
        UserHistory(history.user, train, history.vocab, history.schema),
        UserHistory(history.user, test, history.vocab, history.schema),
    )


def build_user_history(
    days: Sequence[DaySequence],
    calendar: CalendarData,
    test_fraction: float,
    seed: int,
    top_k_start_locations: int = 10,
) -> tuple[UserHistory, dict[str, str]]:
    """Full per-user derivation: activities, schema, contexts, split labels.

    The schema (top-K start locations and z-scoring constants) and the
    history statistics feeding the hist_* features come from the training
    days only, so nothing about the test days leaks into the features.
    The vocabulary covers every station the user ever visited.
    """
    if not days:
        raise DataError("no days for user")
    user = days[0].user
    raw_seqs = [derive_activities(d) for d in days]
    vocab = LocationVocab.from_sequences(raw_seqs)
    bare = UserHistory(user, tuple(raw_seqs), vocab)

    if len(days) >= 2:
        train_bare, test_bare = split_train_test(bare, test_fraction, seed)
        train_days = set(train_bare.day_ids())
    else:
        train_days = {days[0].day}
    splits = {d.day: ("train" if d.day in train_days else "test") for d in days}

    train_seqs = [s for s in raw_seqs if s.day in train_days]
    schema = build_schema(train_seqs, top_k_start_locations)
    stats = compute_history_stats(train_seqs)
    with_ctx = attach_contexts(days, calendar, stats, schema)
    return UserHistory(user, tuple(with_ctx), vocab, schema), splits


# --- CSV interfaces ------------------------------------------------------------

TRIP_HEADER = ["user_id", "board_station", "alight_station", "board_time", "alight_time"]
CALENDAR_HEADER = ["date", "rainy", "public_holiday"]


def parse_trips_csv(path, report: IngestReport | None = None) -> dict[str, list[RawTapRecord]]:
    """Read the trip CSV; malformed rows are skipped and counted."""
    report = report if report is not None else IngestReport()
    by_user: dict[str, list[RawTapRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != TRIP_HEADER:
            raise DataError(f"trip CSV header must be {','.join(TRIP_HEADER)}")
        for row in reader:
            report.n_rows += 1
            try:
                rec = RawTapRecord(
                    user=row["user_id"].strip(),
                    board_station=row["board_station"].strip(),
                    alight_station=row["alight_station"].strip(),
                    board_time=datetime.fromisoformat(row["board_time"].strip()),
                    alight_time=datetime.fromisoformat(row["alight_time"].strip()),
                )
                if not rec.user:
                    raise DataError("empty user id")
            except (DataError, ValueError, AttributeError, KeyError) as exc:
                report.n_malformed += 1
                log.warning("skipping malformed trip row %d: %s", report.n_rows, exc)
                continue
            by_user.setdefault(rec.user, []).append(rec)
    report.n_users = len(by_user)
    return by_user


def parse_calendar_csv(path) -> CalendarData:
    cal = CalendarData()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != CALENDAR_HEADER:
            raise DataError(f"calendar CSV header must be {','.join(CALENDAR_HEADER)}")
        for row in reader:
            cal.flags[row["date"].strip()] = (
                int(row["rainy"]),
                int(row["public_holiday"]),
            )
    return cal


def ingest(
    trips_path,
    calendar_path=None,
    test_fraction: float = 0.2,
    seed: int = 0,
    top_k_start_locations: int = 10,
) -> tuple[list[UserHistory], dict[str, dict[str, str]], IngestReport]:
    """Trip CSV (+ optional calendar CSV) -> per-user histories with contexts."""
    report = IngestReport()
    by_user = parse_trips_csv(trips_path, report)
    calendar = parse_calendar_csv(calendar_path) if calendar_path else CalendarData()
    histories, splits = [], {}
    for user in sorted(by_user):
        days = segment_days(by_user[user], user, report)
        if not days:
            continue
        hist, user_splits = build_user_history(
            days, calendar, test_fraction, derive_seed(seed, "split", user),
            top_k_start_locations,
        )
        histories.append(hist)
        splits[user] = user_splits
    return histories, splits, report
