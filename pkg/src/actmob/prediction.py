"""Next-activity duration and end-location prediction.

Given today's observed prefix, the posterior over the next hidden state
is obtained by a single-modality forward recursion (only the observed
modality's emission term enters, matching the model's conditional-
independence step) propagated one step through the transition logits.
The duration prediction is the mean of the resulting Gaussian mixture;
the location prediction is the argmax of the mixed location pmf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .iohmm import (
    IOHMMParams,
    duration_logpdf,
    initial_prob,
    location_logpmf,
    transition_matrix,
)
from .optim import softmax_rows
from .types import ActivitySequence, DataError

Modality = Literal["duration", "location", "joint"]


@dataclass(frozen=True)
class PredictionResult:
    """Outputs of one next-activity prediction.

    Duration fields are None for location-only predictions and vice
    versa. mixture holds per-state (weight, mean, sigma) triples;
    location_probs is aligned with the model vocabulary.
    """

    state_posterior: np.ndarray
    duration: float | None = None
    duration_clamped: float | None = None
    mixture: tuple[tuple[float, float, float], ...] | None = None
    location_probs: np.ndarray | None = None
    location: str | None = None
    top_k: tuple[str, ...] | None = None


def _emission_weights(
    value, modality: Modality, z: np.ndarray, params: IOHMMParams
) -> np.ndarray:
    """Per-state emission log-terms for one observed step of one modality."""
    if modality == "duration":
        return duration_logpdf(float(value), z, params)
    if modality == "location":
        qi = params.vocab.index_of(value)
        return location_logpmf(z, params)[:, qi]
    q, r = value
    qi = params.vocab.index_of(q)
    return location_logpmf(z, params)[:, qi] + duration_logpdf(float(r), z, params)


def next_state_posterior(
    prefix: Sequence, modality: Modality, contexts: np.ndarray, params: IOHMMParams
) -> np.ndarray:
    """P(A_{t+1} | observed prefix of one modality, z_{1:t+1}).

    prefix holds t observed values (durations, locations, or (q, r)
    pairs for the joint variant); contexts holds the t+1 context rows.
    An empty prefix yields the initial state probability at z_1.
    """
    contexts = np.asarray(contexts, dtype=float)
    t = len(prefix)
    if contexts.ndim != 2 or contexts.shape[0] != t + 1:
        raise DataError(f"need {t + 1} context rows, got {contexts.shape}")
    f = initial_prob(contexts[0], params)
    for s in range(t):
        logw = _emission_weights(prefix[s], modality, contexts[s], params)
        w = np.exp(logw - logw.max())
        f = f * w
        total = f.sum()
        if total <= 0.0:
            raise DataError(f"prefix step {s + 1} has vanishing probability")
        f = f / total
        f = transition_matrix(contexts[s + 1], params).T @ f
    return f / f.sum()


def predict_duration(
    durations: Sequence[float], contexts: np.ndarray, params: IOHMMParams,
    modality: Modality = "duration",
) -> PredictionResult:
    """Posterior Gaussian mixture over the next duration; mean as point."""
    post = next_state_posterior(durations, modality, contexts, params)
    z_next = np.asarray(contexts, dtype=float)[-1]
    means = params.theta_emr @ z_next
    point = float(post @ means)
    mixture = tuple(
        (float(post[i]), float(means[i]), float(params.sigma[i]))
        for i in range(params.n_states)
    )
    return PredictionResult(
        state_posterior=post,
        duration=point,
        duration_clamped=max(point, 0.0),
        mixture=mixture,
    )


def rank_locations(probs: np.ndarray) -> np.ndarray:
    """Indices sorted by descending probability, ties by vocab order."""
    return np.lexsort((np.arange(len(probs)), -probs))


def predict_location(
    locations: Sequence[str], contexts: np.ndarray, params: IOHMMParams,
    k: int = 5, modality: Modality = "location",
) -> PredictionResult:
    """Posterior-mixed location pmf; argmax as point, top-k by probability."""
    post = next_state_posterior(locations, modality, contexts, params)
    z_next = np.asarray(contexts, dtype=float)[-1]
    pmf = post @ softmax_rows(np.einsum("ild,d->il", params.theta_emq, z_next))
    order = rank_locations(pmf)
    k = min(k, len(pmf))
    top = tuple(params.vocab.stations[i] for i in order[:k])
    return PredictionResult(
        state_posterior=post,
        location_probs=pmf,
        location=params.vocab.stations[int(order[0])],
        top_k=top,
    )


def predict_sequence(
    seq: ActivitySequence, params: IOHMMParams, k: int = 5,
    full_information: bool = False,
) -> list[tuple[PredictionResult, PredictionResult]]:
    """Step-by-step predictions over one observed day.

    For each position t the prediction uses only the prefix before t, so
    truncating the future can never change earlier outputs. With
    full_information=True both predictions condition on the joint
    (location, duration) prefix instead of the single observed modality.
    """
    if seq.contexts is None:
        raise DataError("sequence has no contexts")
    out = []
    durations = [a.duration for a in seq.activities]
    locations = [a.end_location for a in seq.activities]
    for t in range(len(seq)):
        ctx = seq.contexts[: t + 1]
        if full_information:
            joint = list(zip(locations[:t], durations[:t]))
            dur = predict_duration(joint, ctx, params, modality="joint")
            loc = predict_location(joint, ctx, params, k, modality="joint")
        else:
            dur = predict_duration(durations[:t], ctx, params)
            loc = predict_location(locations[:t], ctx, params, k)
        out.append((dur, loc))
    return out
