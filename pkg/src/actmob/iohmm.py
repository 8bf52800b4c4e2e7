"""Input-output hidden Markov model with mixed discrete/continuous emissions.

Per user, the model has N hidden activity states. Initial and transition
probabilities are softmax linear functions of the context vector; the
emission density factorizes into a softmax linear model over end
locations and a Gaussian over durations whose mean is linear in the
context. Training is expectation-maximization with a scaled
forward-backward E-step and three independent weighted-MLE blocks in the
M-step. The M-step accepts a candidate block only when it improves its
expected-log-likelihood component, so the observed-data log-likelihood
never decreases across iterations.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .optim import (
    fit_weighted_logit,
    gaussian_objective,
    log_softmax_rows,
    softmax_rows,
    weighted_ridge_regression,
)
from .schema import FeatureSchema, schema_from_dict, schema_to_dict
from .types import ActivitySequence, DataError, LocationVocab, UserHistory

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """Raised when scaling cannot rescue an all-zero probability step."""


@dataclass(frozen=True)
class EMConfig:
    """Estimation settings (all declared defaults, overridable)."""

    max_iter: int = 100
    tol: float = 1e-6  # relative log-likelihood improvement threshold
    restarts: int = 3
    ridge_logit: float = 1e-3
    ridge_duration: float = 1e-6
    sigma_min: float = 0.1  # hours
    init_scale: float = 0.1  # stddev of the N(0, 0.01) coefficient draws
    sigma_init: float = 1.0
    solver_grad_tol: float = 1e-8
    solver_max_iter: int = 200


@dataclass(frozen=True)
class IOHMMParams:
    """All coefficient blocks of one user model.

    Shapes: theta_in (N, D); theta_tr (N, N, D) indexed [source,
    destination, feature]; theta_emq (N, L, D); theta_emr (N, D);
    sigma (N,). The first destination/location/state row of every softmax
    block is pinned to zero for identifiability.
    """

    theta_in: np.ndarray
    theta_tr: np.ndarray
    theta_emq: np.ndarray
    theta_emr: np.ndarray
    sigma: np.ndarray
    vocab: LocationVocab
    schema: FeatureSchema

    def __post_init__(self) -> None:
        n, d = self.theta_in.shape
        l = len(self.vocab)
        if self.schema.dim != d:
            raise DataError(f"schema dim {self.schema.dim} != parameter dim {d}")
        if self.theta_tr.shape != (n, n, d):
            raise DataError(f"theta_tr shape {self.theta_tr.shape} != {(n, n, d)}")
        if self.theta_emq.shape != (n, l, d):
            raise DataError(f"theta_emq shape {self.theta_emq.shape} != {(n, l, d)}")
        if self.theta_emr.shape != (n, d):
            raise DataError(f"theta_emr shape {self.theta_emr.shape} != {(n, d)}")
        if self.sigma.shape != (n,):
            raise DataError(f"sigma shape {self.sigma.shape} != {(n,)}")
        for arr, name in (
            (self.theta_in, "theta_in"), (self.theta_tr, "theta_tr"),
            (self.theta_emq, "theta_emq"), (self.theta_emr, "theta_emr"),
            (self.sigma, "sigma"),
        ):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite entries")
            arr.flags.writeable = False
        if np.any(self.sigma <= 0.0):
            raise DataError("sigma entries must be positive")
        if np.any(self.theta_in[0] != 0.0) or np.any(self.theta_tr[:, 0, :] != 0.0) \
                or np.any(self.theta_emq[:, 0, :] != 0.0):
            raise DataError("reference rows of the softmax blocks must be zero")

    @property
    def n_states(self) -> int:
        return self.theta_in.shape[0]

    @property
    def dim(self) -> int:
        return self.theta_in.shape[1]


@dataclass(frozen=True)
class ForwardBackwardResult:
    """Posterior summaries of one sequence under fixed parameters."""

    log_likelihood: float
    gamma: np.ndarray  # (T, N)
    xi: np.ndarray  # (T-1, N, N), slab t-2 holds the step into position t
    log_scale: np.ndarray  # (T,) per-step scaling, summing to log_likelihood


@dataclass
class EMReport:
    """Per-iteration trace of one EM run."""

    log_likelihoods: list[float] = field(default_factory=list)
    q_values: list[float] = field(default_factory=list)
    n_iterations: int = 0
    converged: bool = False
    restart_log_likelihoods: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "log_likelihoods": self.log_likelihoods,
            "q_values": self.q_values,
            "n_iterations": self.n_iterations,
            "converged": self.converged,
            "restart_log_likelihoods": self.restart_log_likelihoods,
        }


# --- probability functions -----------------------------------------------------

def initial_prob(z: np.ndarray, params: IOHMMParams) -> np.ndarray:
    """P(A_1 = . | z); softmax of theta_in . z."""
    return softmax_rows(params.theta_in @ z)


def transition_matrix(z: np.ndarray, params: IOHMMParams) -> np.ndarray:
    """Row i holds P(A_t = . | A_{t-1} = i, z)."""
    return softmax_rows(np.einsum("ijd,d->ij", params.theta_tr, z))


def transition_prob(i: int, z: np.ndarray, params: IOHMMParams) -> np.ndarray:
    return softmax_rows(params.theta_tr[i] @ z)


def location_logpmf(z: np.ndarray, params: IOHMMParams) -> np.ndarray:
    """(N, L) log P(q = l | A = i, z) for all states and locations."""
    return log_softmax_rows(np.einsum("ild,d->il", params.theta_emq, z))


def duration_logpdf(r: float, z: np.ndarray, params: IOHMMParams) -> np.ndarray:
    """(N,) log Normal(r; theta_emr_i . z, sigma_i^2)."""
    mu = params.theta_emr @ z
    return -0.5 * np.log(2.0 * np.pi) - np.log(params.sigma) - (r - mu) ** 2 / (
        2.0 * params.sigma**2
    )


def emission_logdensity(
    q: str, r: float, i: int, z: np.ndarray, params: IOHMMParams
) -> float:
    """log of the joint emission density (location pmf times duration pdf)."""
    if not np.isfinite(r):
        raise DataError(f"duration {r} is not finite")
    qi = params.vocab.index_of(q)
    return float(location_logpmf(z, params)[i, qi] + duration_logpdf(r, z, params)[i])


# --- batched sequence computations ----------------------------------------------

@dataclass
class _SeqArrays:
    """Stacked observations of sequences sharing one length."""

    T: int
    idx: list[int]  # positions in the original sequence list
    ctx: np.ndarray  # (K, T, D)
    q: np.ndarray  # (K, T) vocab indices
    r: np.ndarray  # (K, T)


def _group_sequences(seqs: Sequence[ActivitySequence], vocab: LocationVocab) -> list[_SeqArrays]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        if s.contexts is None:
            raise DataError(f"sequence {s.day} has no contexts")
        groups.setdefault(len(s), []).append(i)
    out = []
    for T, idx in sorted(groups.items()):
        ctx = np.stack([seqs[i].contexts for i in idx])
        q = np.array([[vocab.index_of(a.end_location) for a in seqs[i].activities] for i in idx])
        r = np.array([[a.duration for a in seqs[i].activities] for i in idx])
        out.append(_SeqArrays(T, idx, ctx, q, r))
    return out


def _emission_logdensities(batch: _SeqArrays, params: IOHMMParams) -> np.ndarray:
    """(K, T, N) joint log emission densities."""
    loc = log_softmax_rows(np.einsum("ild,ktd->ktil", params.theta_emq, batch.ctx))
    K, T = batch.q.shape
    loc_obs = loc[np.arange(K)[:, None], np.arange(T)[None, :], :, batch.q]  # (K, T, N)
    mu = np.einsum("id,ktd->kti", params.theta_emr, batch.ctx)
    dur = (
        -0.5 * np.log(2.0 * np.pi)
        - np.log(params.sigma)[None, None, :]
        - (batch.r[:, :, None] - mu) ** 2 / (2.0 * params.sigma**2)[None, None, :]
    )
    return loc_obs + dur


def _forward_backward_batch(
    batch: _SeqArrays, params: IOHMMParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Scaled forward-backward over one same-length batch.

    Returns (log_likelihood (K,), gamma (K, T, N), xi (K, T-1, N, N),
    log_scale (K, T)). Emission densities are max-shifted per step before
    scaling so long sequences and extreme densities cannot underflow.
    """
    K, T = batch.q.shape
    N = params.n_states
    logdelta = _emission_logdensities(batch, params)  # (K, T, N)
    shift = logdelta.max(axis=2)  # (K, T)
    if not np.all(np.isfinite(shift)):
        k, t = np.argwhere(~np.isfinite(shift))[0]
        raise NumericalError(
            f"all emission densities vanished at step {t + 1} of sequence index {batch.idx[k]}"
        )
    dtil = np.exp(logdelta - shift[:, :, None])  # (K, T, N), max 1 per step

    pi = softmax_rows(batch.ctx[:, 0, :] @ params.theta_in.T)  # (K, N)
    phi = softmax_rows(np.einsum("ijd,ktd->ktij", params.theta_tr, batch.ctx))  # (K,T,N,N)

    alpha = np.empty((K, T, N))
    scale = np.empty((K, T))
    a = pi * dtil[:, 0, :]
    scale[:, 0] = a.sum(axis=1)
    if np.any(scale[:, 0] <= 0.0):
        k = int(np.argwhere(scale[:, 0] <= 0.0)[0][0])
        raise NumericalError(f"forward step 1 of sequence index {batch.idx[k]} summed to zero")
    alpha[:, 0, :] = a / scale[:, 0, None]
    for t in range(1, T):
        a = dtil[:, t, :] * np.einsum("ki,kij->kj", alpha[:, t - 1, :], phi[:, t, :, :])
        scale[:, t] = a.sum(axis=1)
        if np.any(scale[:, t] <= 0.0):
            k = int(np.argwhere(scale[:, t] <= 0.0)[0][0])
            raise NumericalError(
                f"forward step {t + 1} of sequence index {batch.idx[k]} summed to zero"
            )
        alpha[:, t, :] = a / scale[:, t, None]

    beta = np.empty((K, T, N))
    beta[:, T - 1, :] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t, :] = np.einsum(
            "kij,kj->ki", phi[:, t + 1, :, :], dtil[:, t + 1, :] * beta[:, t + 1, :]
        ) / scale[:, t + 1, None]

    gamma = alpha * beta
    xi = (
        alpha[:, :-1, :, None]
        * phi[:, 1:, :, :]
        * (dtil[:, 1:, :] * beta[:, 1:, :])[:, :, None, :]
        / scale[:, 1:, None, None]
    )
    log_scale = np.log(scale) + shift
    return log_scale.sum(axis=1), gamma, xi, log_scale


def forward_backward(seq: ActivitySequence, params: IOHMMParams) -> ForwardBackwardResult:
    """Posterior state (gamma) and transition (xi) probabilities of one
    sequence, plus its observed-data log-likelihood."""
    batch = _group_sequences([seq], params.vocab)[0]
    ll, gamma, xi, log_scale = _forward_backward_batch(batch, params)
    return ForwardBackwardResult(float(ll[0]), gamma[0], xi[0], log_scale[0])


def e_step(
    seqs: Sequence[ActivitySequence], params: IOHMMParams
) -> tuple[list[ForwardBackwardResult], float]:
    """Forward-backward over every sequence; total log-likelihood is the sum."""
    results: list[ForwardBackwardResult | None] = [None] * len(seqs)
    total = 0.0
    for batch in _group_sequences(seqs, params.vocab):
        ll, gamma, xi, log_scale = _forward_backward_batch(batch, params)
        total += float(ll.sum())
        for k, i in enumerate(batch.idx):
            results[i] = ForwardBackwardResult(float(ll[k]), gamma[k], xi[k], log_scale[k])
    return results, total  # type: ignore[return-value]


# --- M-step ---------------------------------------------------------------------

def _logit_loglik(theta: np.ndarray, Z: np.ndarray, W: np.ndarray) -> float:
    """Unpenalized weighted softmax log-likelihood (the Q component)."""
    if Z.shape[0] == 0:
        return 0.0
    return float(np.sum(W * log_softmax_rows(Z @ theta.T)))


def _gaussian_loglik(
    theta: np.ndarray, sigma: float, Z: np.ndarray, w: np.ndarray, r: np.ndarray
) -> float:
    if Z.shape[0] == 0:
        return 0.0
    value, _, _ = gaussian_objective(theta, sigma, Z, w, r, ridge=0.0)
    return value


@dataclass
class _MStepData:
    """Design matrices shared by every M-step of one fit."""

    Z_first: np.ndarray  # (S, D)
    Z_trans: np.ndarray  # (M, D) contexts at t >= 2
    Z_all: np.ndarray  # (n, D)
    q_all: np.ndarray  # (n,)
    r_all: np.ndarray  # (n,)

    @classmethod
    def from_sequences(cls, seqs: Sequence[ActivitySequence], vocab: LocationVocab):
        Z_first = np.stack([s.contexts[0] for s in seqs])
        trans = [s.contexts[1:] for s in seqs if len(s) > 1]
        D = Z_first.shape[1]
        Z_trans = np.concatenate(trans) if trans else np.zeros((0, D))
        Z_all = np.concatenate([s.contexts for s in seqs])
        q_all = np.array([vocab.index_of(a.end_location) for s in seqs for a in s.activities])
        r_all = np.array([a.duration for s in seqs for a in s.activities])
        return cls(Z_first, Z_trans, Z_all, q_all, r_all)


def m_step(
    data: _MStepData,
    results: Sequence[ForwardBackwardResult],
    params: IOHMMParams,
    config: EMConfig,
) -> tuple[IOHMMParams, float]:
    """One maximization pass over the three independent blocks.

    Every block solve is warm-started from the incoming parameters and a
    candidate is kept only if it does not lower the block's expected
    log-likelihood, which preserves the EM ascent property even though
    the inner solves optimize ridge-penalized objectives.
    Returns the new parameters and the total Q value they attain.
    """
    N, D = params.n_states, params.dim
    L = len(params.vocab)
    W_first = np.stack([res.gamma[0] for res in results])  # (S, N)
    xi_rows = [res.xi.reshape(-1, N, N) for res in results if res.xi.shape[0] > 0]
    Xi = np.concatenate(xi_rows) if xi_rows else np.zeros((0, N, N))
    G = np.concatenate([res.gamma for res in results])  # (n, N)

    q_total = 0.0

    cand = fit_weighted_logit(
        data.Z_first, W_first, params.theta_in, config.ridge_logit,
        config.solver_grad_tol, config.solver_max_iter,
    )
    if _logit_loglik(cand, data.Z_first, W_first) >= _logit_loglik(
        params.theta_in, data.Z_first, W_first
    ):
        theta_in = cand
    else:
        theta_in = params.theta_in
    q_total += _logit_loglik(theta_in, data.Z_first, W_first)

    theta_tr = np.array(params.theta_tr)
    for i in range(N):
        W = Xi[:, i, :]
        cand = fit_weighted_logit(
            data.Z_trans, W, params.theta_tr[i], config.ridge_logit,
            config.solver_grad_tol, config.solver_max_iter,
        )
        if _logit_loglik(cand, data.Z_trans, W) >= _logit_loglik(
            params.theta_tr[i], data.Z_trans, W
        ):
            theta_tr[i] = cand
        q_total += _logit_loglik(theta_tr[i], data.Z_trans, W)

    theta_emq = np.array(params.theta_emq)
    theta_emr = np.array(params.theta_emr)
    sigma = np.array(params.sigma)
    n = data.Z_all.shape[0]
    for i in range(N):
        w = G[:, i]
        W_loc = np.zeros((n, L))
        W_loc[np.arange(n), data.q_all] = w
        cand = fit_weighted_logit(
            data.Z_all, W_loc, params.theta_emq[i], config.ridge_logit,
            config.solver_grad_tol, config.solver_max_iter,
        )
        if _logit_loglik(cand, data.Z_all, W_loc) >= _logit_loglik(
            params.theta_emq[i], data.Z_all, W_loc
        ):
            theta_emq[i] = cand
        q_total += _logit_loglik(theta_emq[i], data.Z_all, W_loc)

        sw = float(w.sum())
        theta_cand = weighted_ridge_regression(data.Z_all, w, data.r_all, config.ridge_duration)
        if sw > 0.0:
            resid = data.r_all - data.Z_all @ theta_cand
            sigma_cand = float(np.sqrt(max(np.sum(w * resid**2) / sw, config.sigma_min**2)))
        else:
            sigma_cand = float(params.sigma[i])
        if _gaussian_loglik(theta_cand, sigma_cand, data.Z_all, w, data.r_all) >= \
                _gaussian_loglik(params.theta_emr[i], float(params.sigma[i]), data.Z_all, w, data.r_all):
            theta_emr[i] = theta_cand
            sigma[i] = sigma_cand
        q_total += _gaussian_loglik(theta_emr[i], float(sigma[i]), data.Z_all, w, data.r_all)

    new = IOHMMParams(
        theta_in=theta_in, theta_tr=theta_tr, theta_emq=theta_emq,
        theta_emr=theta_emr, sigma=sigma, vocab=params.vocab, schema=params.schema,
    )
    return new, q_total


# --- EM driver ------------------------------------------------------------------

def random_init(
    n_states: int,
    vocab: LocationVocab,
    schema: FeatureSchema,
    rng: np.random.Generator,
    config: EMConfig = EMConfig(),
) -> IOHMMParams:
    """Coefficients drawn from N(0, init_scale^2), reference rows zeroed."""
    D, L = schema.dim, len(vocab)
    theta_in = rng.normal(0.0, config.init_scale, (n_states, D))
    theta_in[0] = 0.0
    theta_tr = rng.normal(0.0, config.init_scale, (n_states, n_states, D))
    theta_tr[:, 0, :] = 0.0
    theta_emq = rng.normal(0.0, config.init_scale, (n_states, L, D))
    theta_emq[:, 0, :] = 0.0
    theta_emr = rng.normal(0.0, config.init_scale, (n_states, D))
    sigma = np.full(n_states, config.sigma_init)
    return IOHMMParams(theta_in, theta_tr, theta_emq, theta_emr, sigma, vocab, schema)


def _run_em(
    seqs: Sequence[ActivitySequence],
    params: IOHMMParams,
    config: EMConfig,
) -> tuple[IOHMMParams, EMReport]:
    data = _MStepData.from_sequences(seqs, params.vocab)
    report = EMReport()
    prev_ll = -np.inf
    for it in range(config.max_iter):
        results, ll = e_step(seqs, params)
        report.log_likelihoods.append(ll)
        if ll < prev_ll - 1e-8:
            log.warning("log-likelihood decreased at iteration %d: %s -> %s", it, prev_ll, ll)
        if it > 0 and (ll - prev_ll) < config.tol * abs(prev_ll):
            report.converged = True
            break
        params, q_val = m_step(data, results, params, config)
        report.q_values.append(q_val)
        prev_ll = ll
        report.n_iterations = it + 1
    else:
        _, ll = e_step(seqs, params)
        report.log_likelihoods.append(ll)
    return params, report


def fit(
    history: UserHistory | Sequence[ActivitySequence],
    n_states: int,
    config: EMConfig = EMConfig(),
    seed: int = 0,
) -> tuple[IOHMMParams, EMReport]:
    """EM training with random restarts; returns the best-likelihood run.

    Accepts a UserHistory (vocab and schema taken from it) or a plain
    sequence list from a history whose sequences carry contexts.
    """
    if isinstance(history, UserHistory):
        seqs: Sequence[ActivitySequence] = history.sequences
        vocab, schema = history.vocab, history.schema
    else:
        raise DataError("fit expects a UserHistory")
    if schema is None:
        raise DataError("history has no feature schema; build contexts first")
    if n_states < 1:
        raise DataError("n_states must be >= 1")
    if len(seqs) == 0:
        raise DataError("training data is empty")

    best: tuple[IOHMMParams, EMReport] | None = None
    restart_lls = []
    rng = np.random.default_rng(seed)
    for _ in range(config.restarts):
        params0 = random_init(n_states, vocab, schema, rng, config)
        try:
            params, report = _run_em(seqs, params0, config)
        except NumericalError as exc:
            log.warning("restart aborted: %s", exc)
            continue
        final_ll = report.log_likelihoods[-1]
        restart_lls.append(final_ll)
        if best is None or final_ll > best[1].log_likelihoods[-1]:
            best = (params, report)
    if best is None:
        raise NumericalError("all EM restarts failed")
    best[1].restart_log_likelihoods = restart_lls
    return best


# --- utilities -------------------------------------------------------------------

def permute_states(params: IOHMMParams, perm: Sequence[int]) -> IOHMMParams:
    """Consistently relabel hidden states; all probabilities are preserved.

    Softmax blocks are re-pinned by subtracting the new reference row,
    which leaves every softmax output unchanged.
    """
    p = np.asarray(perm)
    theta_in = params.theta_in[p]
    theta_in = theta_in - theta_in[0:1]
    theta_tr = params.theta_tr[p][:, p, :]
    theta_tr = theta_tr - theta_tr[:, 0:1, :]
    return IOHMMParams(
        theta_in=theta_in,
        theta_tr=theta_tr,
        theta_emq=np.array(params.theta_emq[p]),
        theta_emr=np.array(params.theta_emr[p]),
        sigma=np.array(params.sigma[p]),
        vocab=params.vocab,
        schema=params.schema,
    )


def params_to_json(params: IOHMMParams, extra: dict | None = None) -> str:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "n_states": params.n_states,
        "dim": params.dim,
        "vocab": list(params.vocab.stations),
        "schema": schema_to_dict(params.schema),
        "theta_in": params.theta_in.tolist(),
        "theta_tr": params.theta_tr.tolist(),
        "theta_emq": params.theta_emq.tolist(),
        "theta_emr": params.theta_emr.tolist(),
        "sigma": params.sigma.tolist(),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True)


def params_from_json(text: str) -> tuple[IOHMMParams, dict]:
    doc = json.loads(text)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model format_version {doc.get('format_version')!r}")
    params = IOHMMParams(
        theta_in=np.asarray(doc["theta_in"], dtype=float),
        theta_tr=np.asarray(doc["theta_tr"], dtype=float),
        theta_emq=np.asarray(doc["theta_emq"], dtype=float),
        theta_emr=np.asarray(doc["theta_emr"], dtype=float),
        sigma=np.asarray(doc["sigma"], dtype=float),
        vocab=LocationVocab(tuple(doc["vocab"])),
        schema=schema_from_dict(doc["schema"]),
    )
    extra = {k: v for k, v in doc.items() if k not in {
        "format_version", "n_states", "dim", "vocab", "schema",
        "theta_in", "theta_tr", "theta_emq", "theta_emr", "sigma",
    }}
    return params, extra
