"""Synthetic corpus generation from a known ground-truth model.

The generator runs the model forward: per user-day it draws exogenous
context ingredients (rain, holiday, weekday from a rolling calendar),
samples the hidden state chain through the initial/transition logits,
and emits (end location, duration) pairs from the emission model.
Trip endpoints and a short trip duration are invented around each
activity so the resulting days round-trip exactly through the activity
derivation used for real data. Ground-truth state labels are returned
for recovery tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .iohmm import IOHMMParams, initial_prob, transition_prob
from .optim import softmax_rows
from .pipeline import derive_activities
from .schema import ContextInputs, encode_context, synthetic_schema
from .types import (
    HOURS_PER_DAY,
    NULL_LOCATION,
    DataError,
    DaySequence,
    LocationVocab,
    TripRecord,
    UserHistory,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticScenario:
    """Ground-truth model plus corpus-shape settings."""

    params: IOHMMParams
    n_users: int
    days_per_user: int
    seed: int
    rain_prob: float = 0.3
    holiday_prob: float = 0.05
    min_trips: int = 2
    max_trips: int = 3
    trip_duration_range: tuple[float, float] = (0.3, 0.9)
    start_date: str = "2024-01-01"
    max_day_attempts: int = 100

    def __post_init__(self) -> None:
        if self.n_users < 1 or self.days_per_user < 1:
            raise DataError("scenario needs at least one user and one day")
        if not (0.0 <= self.rain_prob <= 1.0 and 0.0 <= self.holiday_prob <= 1.0):
            raise DataError("scenario probabilities must lie in [0, 1]")
        if not (1 <= self.min_trips <= self.max_trips):
            raise DataError("trip count range invalid")
        lo, hi = self.trip_duration_range
        if not (0.0 < lo <= hi):
            raise DataError("trip duration range invalid")


@dataclass
class SynthResult:
    """Generated corpus plus the hidden labels that produced it."""

    histories: list[UserHistory]
    days: dict[str, list[DaySequence]]
    labels: dict[tuple[str, str], tuple[int, ...]]
    n_duration_resamples: int = 0
    n_truncated_days: int = 0
    splits: dict[str, dict[str, str]] = field(default_factory=dict)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, len(probs) - 1))


def synthesize(scenario: SyntheticScenario) -> SynthResult:
    """Generate per-user histories; deterministic under the scenario seed."""
    params = scenario.params
    schema = params.schema
    vocab = params.vocab
    base_day = date.fromisoformat(scenario.start_date)
    result = SynthResult([], {}, {})

    seed_seq = np.random.SeedSequence(scenario.seed)
    user_seeds = seed_seq.spawn(scenario.n_users)
    for u in range(scenario.n_users):
        user = f"u{u:04d}"
        rng = np.random.default_rng(user_seeds[u])
        day_seqs: list[DaySequence] = []
        sequences = []
        for v in range(scenario.days_per_user):
            day_id = (base_day + timedelta(days=v)).isoformat()
            day, ctx, labels = _sample_day(scenario, rng, user, day_id, result)
            day_seqs.append(day)
            seq = derive_activities(day).with_contexts(ctx)
            sequences.append(seq)
            result.labels[(user, day_id)] = labels
        result.days[user] = day_seqs
        result.histories.append(UserHistory(user, tuple(sequences), vocab, schema))
    if result.n_duration_resamples:
        log.info("rejected %d negative duration draws", result.n_duration_resamples)
    if result.n_truncated_days:
        log.info("truncated %d days at the 24 h boundary", result.n_truncated_days)
    return result


def _sample_day(
    scenario: SyntheticScenario,
    rng: np.random.Generator,
    user: str,
    day_id: str,
    result: SynthResult,
) -> tuple[DaySequence, np.ndarray, tuple[int, ...]]:
    params = scenario.params
    vocab = params.vocab
    weekday = date.fromisoformat(day_id).weekday()
    lo, hi = scenario.trip_duration_range
    for _ in range(scenario.max_day_attempts):
        rainy = float(rng.random() < scenario.rain_prob)
        holiday = float(rng.random() < scenario.holiday_prob)
        n_target = int(rng.integers(scenario.min_trips, scenario.max_trips + 1))

        trips: list[TripRecord] = []
        contexts: list[np.ndarray] = []
        labels: list[int] = []
        y_prev, p, state = 0.0, NULL_LOCATION, -1
        truncated = False
        for t in range(1, n_target + 1):
            z = encode_context(
                params.schema,
                ContextInputs(
                    rainy=rainy, holiday=holiday, weekday=weekday,
                    prev_end_time=y_prev, activity_index=t, start_location=p,
                ),
            )
            if t == 1:
                state = _sample_categorical(rng, initial_prob(z, params))
            else:
                state = _sample_categorical(rng, transition_prob(state, z, params))
            mu = float(params.theta_emr[state] @ z)
            r = rng.normal(mu, params.sigma[state])
            while r < 0.0:
                result.n_duration_resamples += 1
                r = rng.normal(mu, params.sigma[state])
            q = vocab.stations[_sample_categorical(rng, softmax_rows(params.theta_emq[state] @ z))]
            x = y_prev + r
            trip_dur = rng.uniform(lo, hi)
            y = x + trip_dur
            if x >= HOURS_PER_DAY or y > HOURS_PER_DAY:
                truncated = True
                break
            d = vocab.stations[int(rng.integers(len(vocab)))]
            trips.append(TripRecord(q, d, x, y))
            contexts.append(z)
            labels.append(state)
            y_prev, p = y, d
        if truncated:
            result.n_truncated_days += 1
        if trips:
            day = DaySequence(user, day_id, tuple(trips))
            return day, np.stack(contexts), tuple(labels)
    raise DataError(
        f"scenario produced no feasible day for {user} {day_id} after "
        f"{scenario.max_day_attempts} attempts"
    )


def default_scenario(
    n_users: int = 50,
    days_per_user: int = 200,
    seed: int = 0,
    n_stations: int = 6,
) -> SyntheticScenario:
    """Three-state scenario with strongly state-dependent dynamics.

    States cycle 0 -> 1 -> 2 -> 0 with context-modulated transition
    logits; durations separate around 1.8 / 4.8 / 8.2 hours and each
    state concentrates its end locations on its own pair of stations.
    """
    stations = tuple(f"S{i}" for i in range(n_stations))
    vocab = LocationVocab(stations)
    schema = synthetic_schema(include_dow=False)
    D = schema.dim
    i_rainy = schema.offset("rainy")
    i_holiday = schema.offset("public_holiday")
    i_yprev = schema.offset("prev_end_time")

    theta_in = np.zeros((3, D))
    theta_in[1, 0], theta_in[1, i_rainy] = 0.6, 0.5
    theta_in[2, 0], theta_in[2, i_holiday] = -0.5, 1.0

    raw_tr = np.zeros((3, 3, D))
    for i in range(3):
        raw_tr[i, (i + 1) % 3, 0] = 2.2
        raw_tr[i, (i + 2) % 3, i_rainy] = 0.6
        raw_tr[i, (i + 1) % 3, i_holiday] = -0.8
    theta_tr = raw_tr - raw_tr[:, 0:1, :]

    raw_emq = np.zeros((3, n_stations, D))
    for i in range(3):
        raw_emq[i, (2 * i) % n_stations, 0] = 2.0
        raw_emq[i, (2 * i + 1) % n_stations, 0] = 1.6
        raw_emq[i, (2 * i + 1) % n_stations, i_rainy] = 0.7
    theta_emq = raw_emq - raw_emq[:, 0:1, :]

    theta_emr = np.zeros((3, D))
    theta_emr[:, 0] = (1.8, 4.8, 8.2)
    theta_emr[:, i_rainy] = (0.35, 0.3, 0.4)
    theta_emr[:, i_holiday] = (0.5, -0.4, -0.3)
    theta_emr[:, i_yprev] = (0.4, -0.5, 0.3)

    params = IOHMMParams(
        theta_in=theta_in, theta_tr=theta_tr, theta_emq=theta_emq,
        theta_emr=theta_emr, sigma=np.full(3, 0.5), vocab=vocab, schema=schema,
    )
    return SyntheticScenario(
        params=params, n_users=n_users, days_per_user=days_per_user, seed=seed,
        min_trips=2, max_trips=4,
    )
