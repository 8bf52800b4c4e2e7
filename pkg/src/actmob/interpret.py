"""Latent activity pattern extraction and coefficient inspection.

Patterns come from ancestral sampling of the fitted model over the
user's observed context history (the contexts are replayed, which
bootstraps their empirical distribution): repeat N times, for every
history day sample the state chain and its emissions, then build
conditional histograms from the samples. States keep anonymous indices;
semantic labels are left to a human reading the distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .iohmm import IOHMMParams
from .optim import softmax_rows
from .types import NULL_LOCATION, DataError, UserHistory

HIST_BIN_HOURS = 0.5
N_BINS = 48  # [0, 24) in 0.5 h steps


@dataclass
class DaySamples:
    """Sampled chains for one history day: arrays shaped (n_samples, T)."""

    day: str
    labels: np.ndarray
    durations: np.ndarray
    locations: np.ndarray  # vocab indices


@dataclass
class SampledCorpus:
    days: list[DaySamples]
    n_states: int
    n_samples: int
    seed: int


@dataclass
class PatternReport:
    """Conditional distributions of each hidden state.

    Histograms use 0.5 h bins over [0, 24); sampled durations outside
    that range are counted in duration_out_of_range and excluded from
    the normalized histogram. start_location_pmf column 0 is the NULL
    start (first activity of a day), followed by the vocabulary order.
    """

    duration_hist: np.ndarray  # (N, 48)
    duration_out_of_range: np.ndarray  # (N,)
    end_location_pmf: np.ndarray  # (N, L)
    start_time_hist: np.ndarray  # (N, 48)
    start_location_pmf: np.ndarray  # (N, L+1)
    transition_matrix: np.ndarray  # (N, N)
    state_counts: np.ndarray  # (N,) total sampled activities per state
    empty_states: tuple[int, ...]
    n_samples: int
    seed: int
    stations: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "bin_hours": HIST_BIN_HOURS,
                "duration_hist": self.duration_hist.tolist(),
                "duration_out_of_range": self.duration_out_of_range.tolist(),
                "end_location_pmf": self.end_location_pmf.tolist(),
                "start_time_hist": self.start_time_hist.tolist(),
                "start_location_pmf": self.start_location_pmf.tolist(),
                "start_location_labels": [NULL_LOCATION, *self.stations],
                "transition_matrix": self.transition_matrix.tolist(),
                "state_counts": self.state_counts.tolist(),
                "empty_states": list(self.empty_states),
                "n_samples": self.n_samples,
                "seed": self.seed,
                "stations": list(self.stations),
            },
            indent=1, sort_keys=True,
        )


def _rows_categorical(rng: np.random.Generator, prob_rows: np.ndarray) -> np.ndarray:
    """One categorical draw per row of prob_rows."""
    cum = np.cumsum(prob_rows, axis=1)
    u = rng.random(prob_rows.shape[0])
    return np.minimum((cum < u[:, None]).sum(axis=1), prob_rows.shape[1] - 1)


def gibbs_sample(
    history: UserHistory, params: IOHMMParams, n_samples: int, seed: int = 0
) -> SampledCorpus:
    """Ancestral chain sampling repeated n_samples times over all days.

    The repetitions are vectorized; draws are deterministic under the
    seed (states, then durations, then locations, per day position).
    """
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    if history.schema is None or history.schema.dim != params.dim:
        raise DataError("history schema does not match the model")
    rng = np.random.default_rng(seed)
    N = params.n_states
    out = []
    for seq in history.sequences:
        if seq.contexts is None:
            raise DataError(f"sequence {seq.day} has no contexts")
        T = len(seq)
        labels = np.empty((n_samples, T), dtype=np.int64)
        durations = np.empty((n_samples, T))
        locations = np.empty((n_samples, T), dtype=np.int64)
        for t in range(T):
            z = seq.contexts[t]
            if t == 0:
                pi = softmax_rows(params.theta_in @ z)
                labels[:, 0] = _rows_categorical(rng, np.tile(pi, (n_samples, 1)))
            else:
                trans = softmax_rows(np.einsum("ijd,d->ij", params.theta_tr, z))
                labels[:, t] = _rows_categorical(rng, trans[labels[:, t - 1]])
            lab = labels[:, t]
            mu = params.theta_emr @ z
            durations[:, t] = rng.normal(mu[lab], params.sigma[lab])
            loc_pmf = softmax_rows(np.einsum("ild,d->il", params.theta_emq, z))
            locations[:, t] = _rows_categorical(rng, loc_pmf[lab])
        out.append(DaySamples(seq.day, labels, durations, locations))
    return SampledCorpus(out, N, n_samples, seed)


def pattern_report(
    samples: SampledCorpus, history: UserHistory, truncate_durations: bool = False
) -> PatternReport:
    """Conditional histograms and pmfs counted over the sampled sequences."""
    N = samples.n_states
    L = len(history.vocab)
    dur_hist = np.zeros((N, N_BINS))
    dur_oor = np.zeros(N)
    end_loc = np.zeros((N, L))
    start_time = np.zeros((N, N_BINS))
    start_loc = np.zeros((N, L + 1))
    trans = np.zeros((N, N))
    state_counts = np.zeros(N)

    by_day = {s.day: s for s in (history.sequences)}
    for day in samples.days:
        seq = by_day[day.day]
        labels, durations, locations = day.labels, day.durations, day.locations
        if truncate_durations:
            durations = np.maximum(durations, 0.0)
        for t in range(labels.shape[1]):
            lab = labels[:, t]
            state_counts += np.bincount(lab, minlength=N)
            r = durations[:, t]
            in_range = (r >= 0.0) & (r < 24.0)
            bins = np.minimum((r[in_range] / HIST_BIN_HOURS).astype(int), N_BINS - 1)
            np.add.at(dur_hist, (lab[in_range], bins), 1.0)
            np.add.at(dur_oor, lab[~in_range], 1.0)
            np.add.at(end_loc, (lab, locations[:, t]), 1.0)

            act = seq.activities[t]
            y_bin = min(int(act.start_time / HIST_BIN_HOURS), N_BINS - 1)
            np.add.at(start_time, (lab, np.full(len(lab), y_bin)), 1.0)
            p_idx = 0 if act.start_location == NULL_LOCATION \
                else history.vocab.index_of(act.start_location) + 1
            np.add.at(start_loc, (lab, np.full(len(lab), p_idx)), 1.0)
            if t > 0:
                np.add.at(trans, (labels[:, t - 1], lab), 1.0)

    empty = tuple(int(i) for i in np.where(state_counts == 0)[0])

    def _norm(mat: np.ndarray) -> np.ndarray:
        sums = mat.sum(axis=1, keepdims=True)
        return np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)

    return PatternReport(
        duration_hist=_norm(dur_hist),
        duration_out_of_range=dur_oor,
        end_location_pmf=_norm(end_loc),
        start_time_hist=_norm(start_time),
        start_location_pmf=_norm(start_loc),
        transition_matrix=_norm(trans),
        state_counts=state_counts,
        empty_states=empty,
        n_samples=samples.n_samples,
        seed=samples.seed,
        stations=history.vocab.stations,
    )


def coefficient_table(
    params: IOHMMParams, feature_names: tuple[str, ...] | None = None
) -> dict[int, dict[str, float]]:
    """Duration-mean coefficients keyed by state and feature column name.

    feature_names restricts the columns (defaults to every schema
    column), mirroring the usual published table of per-state effects.
    """
    cols = params.schema.column_names()
    wanted = feature_names if feature_names is not None else cols
    missing = [w for w in wanted if w not in cols]
    if missing:
        raise DataError(f"unknown feature columns: {missing}")
    table: dict[int, dict[str, float]] = {}
    for i in range(params.n_states):
        table[i] = {w: float(params.theta_emr[i, cols.index(w)]) for w in wanted}
    return table


def format_coefficient_table(
    table: dict[int, dict[str, float]], state_labels: dict[int, str] | None = None
) -> str:
    """Plain-text state x feature table."""
    if not table:
        return ""
    cols = list(next(iter(table.values())).keys())
    labels = {i: (state_labels or {}).get(i, f"state {i}") for i in table}
    width = max(12, *(len(c) + 2 for c in cols), *(len(v) + 2 for v in labels.values()))
    lines = ["".join(s.ljust(width) for s in ["", *cols])]
    for i, row in table.items():
        cells = [f"{row[c]:.3f}" for c in cols]
        lines.append("".join(s.ljust(width) for s in [labels[i], *cells]))
    return "\n".join(lines)
