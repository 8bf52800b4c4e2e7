"""Per-user state-count selection by silhouette score of context clusterings.

Context vectors are standardized and clustered with k-means for each
candidate count m; the chosen count maximizes the silhouette coefficient
(first maximum on ties).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .types import DataError, UserHistory

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = (3, 4, 5, 6, 7)


@dataclass
class SilhouetteSelection:
    """Outcome of one user's state-count search."""

    candidates: tuple[int, ...]
    scores: dict[int, float]
    chosen: int
    a_values: np.ndarray | None = None  # per-point intra-cluster distance, chosen m
    b_values: np.ndarray | None = None  # per-point nearest-other-cluster distance
    fallback: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "candidates": list(self.candidates),
                "scores": {str(m): self.scores[m] for m in sorted(self.scores)},
                "chosen": self.chosen,
                "fallback": self.fallback,
                "warnings": self.warnings,
            },
            indent=1,
            sort_keys=True,
        )


def _kmeans_once(
    points: np.ndarray, m: int, rng: np.random.Generator, max_iter: int = 100
) -> tuple[np.ndarray, float]:
    n = points.shape[0]
    # k-means++ style init: squared-distance-weighted draws
    centers = np.empty((m, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[_weighted_draw(rng, d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = dist.argmin(axis=1)
        for j in range(m):
            mask = new_labels == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:  # re-seed an empty cluster at the farthest point
                far = dist.min(axis=1).argmax()
                centers[j] = points[far]
                new_labels[far] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    sse = float(np.sum((points - centers[labels]) ** 2))
    return labels, sse


def _weighted_draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, len(probs) - 1))


def cluster_contexts(
    points: np.ndarray, m: int, seed: int, n_restarts: int = 10
) -> np.ndarray:
    """k-means labels (Euclidean, best SSE over restarts under seed)."""
    points = np.asarray(points, dtype=float)
    if m < 1:
        raise DataError("m must be >= 1")
    n_distinct = np.unique(points, axis=0).shape[0]
    if n_distinct < m:
        raise DataError(f"only {n_distinct} distinct points for m={m} clusters")
    if m == 1:
        return np.zeros(points.shape[0], dtype=int)
    rng = np.random.default_rng(seed)
    best_labels, best_sse = None, np.inf
    for _ in range(n_restarts):
        labels, sse = _kmeans_once(points, m, rng)
        if sse < best_sse:
            best_labels, best_sse = labels, sse
    return best_labels


def silhouette_details(
    points: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Silhouette score plus per-point (a, b) diagnostics.

    a(i) is the mean distance to the other members of i's cluster
    (singletons contribute s(i) = 0); b(i) is the smallest mean distance
    to any other cluster. The 0/0 case is defined as 0.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise DataError("silhouette needs at least 2 clusters")
    n = points.shape[0]
    dist = np.sqrt(np.maximum(
        np.sum(points**2, axis=1)[:, None]
        + np.sum(points**2, axis=1)[None, :]
        - 2.0 * points @ points.T,
        0.0,
    ))
    a = np.zeros(n)
    b = np.full(n, np.inf)
    sizes = {c: int(np.sum(labels == c)) for c in uniq}
    for c in uniq:
        mask = labels == c
        within = dist[np.ix_(mask, mask)]
        if sizes[c] > 1:
            a[mask] = within.sum(axis=1) / (sizes[c] - 1)
        for c2 in uniq:
            if c2 == c:
                continue
            other = dist[np.ix_(mask, labels == c2)].mean(axis=1)
            b[mask] = np.minimum(b[mask], other)
    s = np.zeros(n)
    denom = np.maximum(a, b)
    ok = denom > 0.0
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    for c in uniq:  # singleton convention: s(i) = 0
        if sizes[c] == 1:
            s[labels == c] = 0.0
    return float(np.mean(s)), a, b


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    return silhouette_details(points, labels)[0]


def standardize(points: np.ndarray) -> np.ndarray:
    mu = points.mean(axis=0)
    sd = points.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    return (points - mu) / sd


def select_state_count(
    history: UserHistory,
    candidates: tuple[int, ...] = DEFAULT_CANDIDATES,
    seed: int = 0,
) -> SilhouetteSelection:
    """Choose the hidden-state count maximizing the silhouette score.

    Falls back to min(candidates) with a warning when the pooled context
    set is too small (or too degenerate) to score any candidate.
    """
    if not candidates:
        raise DataError("candidate set is empty")
    cands = tuple(sorted(candidates))
    pooled = np.concatenate([s.contexts for s in history.sequences if s.contexts is not None]) \
        if any(s.contexts is not None for s in history.sequences) else np.zeros((0, 1))
    sel = SilhouetteSelection(candidates=cands, scores={}, chosen=min(cands))
    if pooled.shape[0] < max(cands) + 1:
        sel.fallback = True
        sel.warnings.append(
            f"only {pooled.shape[0]} context vectors; need > {max(cands)}; "
            f"falling back to N = {min(cands)}"
        )
        return sel

    pts = standardize(pooled)
    best_m, best_sc = None, -np.inf
    for m in cands:
        try:
            labels = cluster_contexts(pts, m, seed)
            sc, a, b = silhouette_details(pts, labels)
        except DataError as exc:
            sel.warnings.append(f"m={m}: {exc}")
            continue
        sel.scores[m] = sc
        if sc > best_sc:
            best_m, best_sc = m, sc
            sel.a_values, sel.b_values = a, b
    if best_m is None:
        sel.fallback = True
        sel.warnings.append(f"no candidate could be scored; falling back to N = {min(cands)}")
        sel.chosen = min(cands)
    else:
        sel.chosen = best_m
    return sel
