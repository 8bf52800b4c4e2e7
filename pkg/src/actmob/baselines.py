"""Lower-bound benchmark models.

Durations: one ordinary least-squares regression per user on the same
context features the sequence model sees. Locations: a first-order
Markov chain over (previous destination -> next origin) bigrams with
additive smoothing, plus a separate smoothed distribution for the first
trip of a day.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .types import NULL_LOCATION, DataError, LocationVocab, UserHistory


@dataclass(frozen=True)
class LinearRegressionBaseline:
    """Pooled per-user duration regression."""

    intercept: float
    coef: np.ndarray  # aligned with the schema columns after the intercept
    residual_variance: float

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "residual_variance": self.residual_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearRegressionBaseline":
        return cls(float(d["intercept"]), np.asarray(d["coef"], dtype=float),
                   float(d["residual_variance"]))


def _ols(Z: np.ndarray, y: np.ndarray) -> LinearRegressionBaseline:
    if Z.shape[0] == 0:
        raise DataError("no training activities")
    beta, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    if rank < Z.shape[1]:  # rank-deficient design: tiny ridge rescue
        beta = np.linalg.solve(Z.T @ Z + 1e-6 * np.eye(Z.shape[1]), Z.T @ y)
    resid = y - Z @ beta
    return LinearRegressionBaseline(
        intercept=float(beta[0]),
        coef=np.asarray(beta[1:]),
        residual_variance=float(np.mean(resid**2)),
    )


def fit_lr(train: UserHistory) -> LinearRegressionBaseline:
    """OLS over all (z_t, r_t) pairs pooled across days."""
    seqs = [s for s in train.sequences if s.contexts is not None]
    if not seqs:
        raise DataError("no training activities with contexts")
    Z = np.concatenate([s.contexts for s in seqs])
    y = np.concatenate([s.durations for s in seqs])
    return _ols(Z, y)


def predict_lr(model: LinearRegressionBaseline, z: np.ndarray) -> float:
    """Linear mean; z is the full context vector (intercept column first)."""
    return float(model.intercept + model.coef @ np.asarray(z, dtype=float)[1:])


@dataclass(frozen=True)
class PerIndexLRBaseline:
    """Optional variant: one regression per activity index, pooled fallback."""

    pooled: LinearRegressionBaseline
    by_index: dict[int, LinearRegressionBaseline]

    def predict(self, step: int, z: np.ndarray) -> float:
        model = self.by_index.get(step, self.pooled)
        return predict_lr(model, z)


def fit_lr_per_index(train: UserHistory) -> PerIndexLRBaseline:
    pooled = fit_lr(train)
    by_index: dict[int, LinearRegressionBaseline] = {}
    max_t = max(len(s) for s in train.sequences)
    for t in range(1, max_t + 1):
        seqs = [s for s in train.sequences if len(s) >= t and s.contexts is not None]
        if len(seqs) < 2:
            continue
        Z = np.stack([s.contexts[t - 1] for s in seqs])
        y = np.array([s.activities[t - 1].duration for s in seqs])
        by_index[t] = _ols(Z, y)
    return PerIndexLRBaseline(pooled, by_index)


@dataclass
class MarkovChainBaseline:
    """Smoothed first-order location model."""

    first_counts: dict[str, int]
    bigram_counts: dict[str, dict[str, int]]
    n_days: int
    alpha: float
    vocab: LocationVocab

    def to_json(self) -> str:
        return json.dumps(
            {
                "first_counts": dict(sorted(self.first_counts.items())),
                "bigram_counts": {
                    k: dict(sorted(v.items())) for k, v in sorted(self.bigram_counts.items())
                },
                "n_days": self.n_days,
                "alpha": self.alpha,
                "vocab": list(self.vocab.stations),
            },
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MarkovChainBaseline":
        d = json.loads(text)
        return cls(
            first_counts={k: int(v) for k, v in d["first_counts"].items()},
            bigram_counts={k: {k2: int(v2) for k2, v2 in v.items()}
                           for k, v in d["bigram_counts"].items()},
            n_days=int(d["n_days"]),
            alpha=float(d["alpha"]),
            vocab=LocationVocab(tuple(d["vocab"])),
        )


def fit_mc(train: UserHistory, alpha: float = 1.0) -> MarkovChainBaseline:
    """Count first-trip origins and within-day (prev dest, next origin) bigrams."""
    if alpha <= 0.0:
        raise DataError("smoothing alpha must be positive")
    first: dict[str, int] = {}
    bigrams: dict[str, dict[str, int]] = {}
    for seq in train.sequences:
        q1 = seq.activities[0].end_location
        first[q1] = first.get(q1, 0) + 1
        for act in seq.activities[1:]:
            prev = act.start_location
            row = bigrams.setdefault(prev, {})
            row[act.end_location] = row.get(act.end_location, 0) + 1
    return MarkovChainBaseline(first, bigrams, train.n_days, alpha, train.vocab)


def predict_mc(
    model: MarkovChainBaseline, prev_destination: str | None
) -> tuple[np.ndarray, bool]:
    """Smoothed location distribution over the vocabulary.

    prev_destination None selects the first-activity distribution. An
    unknown previous destination falls back to the first-activity
    distribution and sets the warning flag.
    """
    L = len(model.vocab)
    fallback = False
    if prev_destination is not None and (
        prev_destination == NULL_LOCATION or prev_destination not in model.vocab
    ):
        fallback = True
        prev_destination = None
    if prev_destination is None:
        counts = np.array([model.first_counts.get(s, 0) for s in model.vocab.stations], dtype=float)
        probs = (counts + model.alpha / L) / (model.n_days + model.alpha)
    else:
        row = model.bigram_counts.get(prev_destination, {})
        counts = np.array([row.get(s, 0) for s in model.vocab.stations], dtype=float)
        probs = (counts + model.alpha / L) / (counts.sum() + model.alpha)
    return probs, fallback
