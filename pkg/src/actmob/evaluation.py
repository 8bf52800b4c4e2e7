"""Scoring of held-out predictions and corpus-level analysis.

Duration predictions are scored by R^2 on the test set (sum of squares
about the test-set mean), location predictions by exact-match accuracy
and by the rank of the truth in the predicted ordering. Metrics are
reported separately for first activities (step 1), middle activities
(step >= 2), and all activities. A linear regression of per-user scores
on travel-behavior covariates quantifies what drives predictability.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .types import DataError, UserHistory

ERROR_BIN_HOURS = 0.5
N_ERROR_BINS = 48  # |error| in [0, 24); larger errors fall in the overflow slot

STRATA = ("first", "middle", "overall")


@dataclass(frozen=True)
class PredictionRow:
    """One scored prediction (one activity of one test day)."""

    user: str
    day: str
    step: int  # 1-based activity index
    pred_duration: float
    true_duration: float
    pred_location: str
    true_location: str
    rank_of_truth: int


@dataclass
class UserScore:
    user: str
    n_rows: int
    r2: dict[str, float | None]
    accuracy: dict[str, float | None]
    error_hist: np.ndarray  # (N_ERROR_BINS + 1,) counts, last is overflow
    rank_cdf: np.ndarray  # cumulative P(rank <= k), k = 1..max rank
    zero_variance_strata: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "user": self.user,
            "n_rows": self.n_rows,
            "r2": self.r2,
            "accuracy": self.accuracy,
            "error_hist": self.error_hist.tolist(),
            "rank_cdf": self.rank_cdf.tolist(),
            "zero_variance_strata": list(self.zero_variance_strata),
        }


def _stratum_rows(rows: list[PredictionRow], stratum: str) -> list[PredictionRow]:
    if stratum == "first":
        return [r for r in rows if r.step == 1]
    if stratum == "middle":
        return [r for r in rows if r.step >= 2]
    return list(rows)


def r_squared(pred: np.ndarray, truth: np.ndarray) -> float | None:
    """1 - SSE/SST with SST about the truth mean; None when SST is zero."""
    sst = float(np.sum((truth - truth.mean()) ** 2))
    if sst == 0.0:
        return None
    sse = float(np.sum((truth - pred) ** 2))
    return 1.0 - sse / sst


def score_user(rows: list[PredictionRow]) -> UserScore:
    """Per-user metrics over aligned prediction/truth rows."""
    if not rows:
        raise DataError("no prediction rows to score")
    user = rows[0].user
    r2: dict[str, float | None] = {}
    acc: dict[str, float | None] = {}
    zero_var = []
    for stratum in STRATA:
        sub = _stratum_rows(rows, stratum)
        if not sub:
            r2[stratum] = None
            acc[stratum] = None
            continue
        pred = np.array([r.pred_duration for r in sub])
        truth = np.array([r.true_duration for r in sub])
        r2[stratum] = r_squared(pred, truth)
        if r2[stratum] is None:
            zero_var.append(stratum)
        acc[stratum] = float(np.mean([r.pred_location == r.true_location for r in sub]))

    errors = np.abs([r.pred_duration - r.true_duration for r in rows])
    hist = np.zeros(N_ERROR_BINS + 1)
    idx = np.minimum((errors / ERROR_BIN_HOURS).astype(int), N_ERROR_BINS)
    np.add.at(hist, idx, 1.0)

    ranks = np.array([r.rank_of_truth for r in rows])
    max_rank = int(ranks.max())
    cdf = np.array([np.mean(ranks <= k) for k in range(1, max_rank + 1)])
    return UserScore(
        user=user, n_rows=len(rows), r2=r2, accuracy=acc,
        error_hist=hist, rank_cdf=cdf, zero_variance_strata=tuple(zero_var),
    )


def infer_home(history: UserHistory) -> str:
    """Most frequent first-trip origin; ties broken by vocabulary order."""
    counts: dict[str, int] = {}
    for seq in history.sequences:
        q1 = seq.activities[0].end_location
        counts[q1] = counts.get(q1, 0) + 1
    best = max(counts.values())
    for station in history.vocab.stations:
        if counts.get(station, 0) == best:
            return station
    raise DataError("no first-trip origins found")  # unreachable for valid histories


@dataclass
class PredictabilityRegression:
    """OLS of a per-user score on travel covariates, classical t p-values."""

    variables: tuple[str, ...]
    estimates: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    r_squared: float
    n_obs: int
    dropped: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "estimates": self.estimates.tolist(),
            "std_errors": self.std_errors.tolist(),
            "t_values": self.t_values.tolist(),
            "p_values": self.p_values.tolist(),
            "r_squared": self.r_squared,
            "n_obs": self.n_obs,
            "dropped": list(self.dropped),
        }


def predictability_regression(
    X: np.ndarray, y: np.ndarray, names: tuple[str, ...]
) -> PredictabilityRegression:
    """OLS with intercept and homoskedastic standard errors.

    X holds the covariates (no intercept column); rank-deficient columns
    are dropped left to right with a record of their names.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if len(names) != p:
        raise DataError("names must match covariate columns")
    if n < p + 2:
        raise DataError(f"need at least {p + 2} users, got {n}")

    keep: list[int] = []
    dropped: list[str] = []
    full = np.column_stack([np.ones(n), X])
    current = full[:, :1]
    for j in range(1, p + 1):
        trial = np.column_stack([current, full[:, j]])
        if np.linalg.matrix_rank(trial) > np.linalg.matrix_rank(current):
            current = trial
            keep.append(j - 1)
        else:
            dropped.append(names[j - 1])
    design = np.column_stack([np.ones(n), X[:, keep]])
    kept_names = ("intercept", *(names[j] for j in keep))

    beta, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    dof = n - design.shape[1]
    if dof <= 0:
        raise DataError("no residual degrees of freedom")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(design.T @ design)
    se = np.sqrt(np.diag(cov))
    t_vals = beta / se
    p_vals = 2.0 * sps.t.sf(np.abs(t_vals), dof)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 0.0
    return PredictabilityRegression(
        variables=kept_names, estimates=beta, std_errors=se,
        t_values=t_vals, p_values=p_vals, r_squared=r2, n_obs=n,
        dropped=tuple(dropped),
    )


def travel_covariates(history: UserHistory) -> dict[str, float]:
    """Per-user travel frequency/regularity covariates."""
    trips = np.array([len(s) for s in history.sequences], dtype=float)
    first_departures = np.array(
        [s.activities[0].duration for s in history.sequences]
    )  # first boarding time equals the first activity duration (day starts at 0)
    return {
        "days_with_travel": float(history.n_days),
        "mean_trips_per_day": float(trips.mean()),
        "std_trips_per_day": float(trips.std()),
        "std_first_departure_time": float(first_departures.std()),
    }


def build_covariate_matrix(
    histories: list[UserHistory],
    metadata: dict[str, dict[str, str]] | None = None,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Stack per-user covariates; card type and home region come from the
    optional metadata map (user -> {card_type, home_region})."""
    base_names = ("days_with_travel", "mean_trips_per_day", "std_trips_per_day",
                  "std_first_departure_time")
    card_types: list[str] = []
    regions: list[str] = []
    if metadata:
        card_types = sorted({m.get("card_type", "") for m in metadata.values()} - {""})
        regions = sorted({m.get("home_region", "") for m in metadata.values()} - {""})
        regions = regions[1:]  # first region is the reference category
    names = base_names + tuple(f"card_type={c}" for c in card_types) \
        + tuple(f"home_region={r}" for r in regions)
    rows = []
    for h in histories:
        cov = travel_covariates(h)
        row = [cov[k] for k in base_names]
        meta = (metadata or {}).get(h.user, {})
        row.extend(1.0 if meta.get("card_type") == c else 0.0 for c in card_types)
        row.extend(1.0 if meta.get("home_region") == r else 0.0 for r in regions)
        rows.append(row)
    return np.asarray(rows, dtype=float), names


def aggregate_report(scores: list[UserScore]) -> dict:
    """Corpus-level metric summary plus plot-ready histogram data."""
    if not scores:
        raise DataError("no user scores to aggregate")

    def _summary(values: list[float]) -> dict:
        arr = np.array(values)
        return {
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "q25": float(np.quantile(arr, 0.25)),
            "q75": float(np.quantile(arr, 0.75)),
            "n": int(arr.size),
        }

    report: dict = {"n_users": len(scores), "r2": {}, "accuracy": {}}
    for stratum in STRATA:
        r2_vals = [s.r2[stratum] for s in scores if s.r2.get(stratum) is not None]
        acc_vals = [s.accuracy[stratum] for s in scores if s.accuracy.get(stratum) is not None]
        report["r2"][stratum] = _summary(r2_vals) if r2_vals else None
        report["accuracy"][stratum] = _summary(acc_vals) if acc_vals else None

    hist = np.sum([s.error_hist for s in scores], axis=0)
    total = hist.sum()
    report["error_hist"] = {
        "bin_hours": ERROR_BIN_HOURS,
        "counts": hist.tolist(),
        "density": (hist / total).tolist() if total > 0 else hist.tolist(),
    }
    max_k = max(len(s.rank_cdf) for s in scores)
    cdf = np.zeros(max_k)
    for s in scores:
        padded = np.pad(s.rank_cdf, (0, max_k - len(s.rank_cdf)), constant_values=1.0)
        cdf += padded
    report["rank_cdf"] = (cdf / len(scores)).tolist()
    return report


# --- prediction CSV interface -----------------------------------------------------

PREDICTIONS_HEADER = [
    "user_id", "day", "step", "pred_duration_h", "true_duration_h",
    "pred_location", "true_location", "rank_of_truth",
]


def write_predictions_csv(path, rows: list[PredictionRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for r in rows:
            writer.writerow([
                r.user, r.day, r.step, repr(r.pred_duration), repr(r.true_duration),
                r.pred_location, r.true_location, r.rank_of_truth,
            ])


def read_predictions_csv(path) -> list[PredictionRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != PREDICTIONS_HEADER:
            raise DataError(f"predictions CSV header must be {','.join(PREDICTIONS_HEADER)}")
        for row in reader:
            rows.append(PredictionRow(
                user=row["user_id"], day=row["day"], step=int(row["step"]),
                pred_duration=float(row["pred_duration_h"]),
                true_duration=float(row["true_duration_h"]),
                pred_location=row["pred_location"], true_location=row["true_location"],
                rank_of_truth=int(row["rank_of_truth"]),
            ))
    return rows


def read_metadata_csv(path) -> dict[str, dict[str, str]]:
    """user_id,card_type,home_region rows -> per-user metadata map."""
    meta: dict[str, dict[str, str]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["user_id", "card_type", "home_region"]
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != expected:
            raise DataError(f"metadata CSV header must be {','.join(expected)}")
        for row in reader:
            meta[row["user_id"]] = {
                "card_type": row["card_type"].strip(),
                "home_region": row["home_region"].strip(),
            }
    return meta
