"""Weighted maximum-likelihood solvers used by the M-step.

The initial/transition/location probability functions are softmax
linear models fitted by weighted multinomial logistic regression with an
L2 ridge; the duration model is a weighted ridge regression. The first
class row of every logit block is pinned to zero for identifiability,
so only rows 1..C-1 are free parameters.

The logit solver is full-batch Newton ascent with backtracking line
search; the penalized objective is strictly concave, so the method
reaches the unique optimum and never leaves the warm start behind.
Objective/gradient pairs are exposed separately from the solver so they
can be checked against finite differences.
"""

from __future__ import annotations

import numpy as np


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shift-stabilized."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logit_objective(
    theta_free: np.ndarray, Z: np.ndarray, W: np.ndarray, ridge: float
) -> tuple[float, np.ndarray]:
    """Penalized weighted log-likelihood of a pinned softmax model.

    theta_free: (C-1, D) free class rows (class 0 pinned to zero).
    Z: (n, D) features. W: (n, C) non-negative weights.
    Returns (value, gradient) with the gradient shaped like theta_free.
    """
    n, D = Z.shape
    theta = np.vstack([np.zeros((1, D)), theta_free])
    logp = log_softmax_rows(Z @ theta.T)  # (n, C)
    value = float(np.sum(W * logp)) - ridge * float(np.sum(theta_free**2))

    p = np.exp(logp)
    row_mass = W.sum(axis=1)  # total weight per sample
    resid = W - row_mass[:, None] * p  # (n, C)
    grad = resid[:, 1:].T @ Z - 2.0 * ridge * theta_free
    return value, grad


def _logit_hessian(
    theta_free: np.ndarray, Z: np.ndarray, W: np.ndarray, ridge: float
) -> np.ndarray:
    """Hessian of the penalized objective on the free rows, flattened."""
    n, D = Z.shape
    C = W.shape[1]
    theta = np.vstack([np.zeros((1, D)), theta_free])
    p = softmax_rows(Z @ theta.T)  # (n, C)
    row_mass = W.sum(axis=1)

    wp = row_mass[:, None] * p  # (n, C)
    diag = np.einsum("nc,ni,nj->cij", wp, Z, Z)  # (C, D, D)
    A = (np.sqrt(row_mass)[:, None] * p)[:, :, None] * Z[:, None, :]  # (n, C, D)
    A = A.reshape(n, C * D)
    cross = (A.T @ A).reshape(C, D, C, D)

    F = C - 1
    H = np.zeros((F, D, F, D))
    for c in range(F):
        H[c, :, c, :] -= diag[c + 1]
    H += cross[1:, :, 1:, :]
    H = H.reshape(F * D, F * D)
    H -= 2.0 * ridge * np.eye(F * D)
    return H


def fit_weighted_logit(
    Z: np.ndarray,
    W: np.ndarray,
    theta_init: np.ndarray,
    ridge: float,
    grad_tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Maximize the penalized weighted logit likelihood from a warm start.

    Newton steps (gradient-direction fallback) with Armijo backtracking;
    stops on the gradient sup-norm or the iteration cap. Returns the full
    (C, D) block with row 0 zeroed.
    """
    C, D = theta_init.shape
    if C == 1:
        return np.zeros((1, D))
    x = np.array(theta_init[1:], dtype=float)
    value, grad = logit_objective(x, Z, W, ridge)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) <= grad_tol:
            break
        H = _logit_hessian(x, Z, W, ridge)
        try:
            step = np.linalg.solve(-H, grad.ravel()).reshape(x.shape)
        except np.linalg.LinAlgError:
            step = grad / (2.0 * ridge + 1.0)
        slope = float(np.sum(grad * step))
        if slope <= 0.0:  # not an ascent direction; fall back to the gradient
            step = grad
            slope = float(np.sum(grad * grad))
            if slope == 0.0:
                break
        t = 1.0
        for _ in range(60):
            cand_value, cand_grad = logit_objective(x + t * step, Z, W, ridge)
            if cand_value >= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:  # line search exhausted; no usable ascent remains
            break
        x = x + t * step
        value, grad = cand_value, cand_grad
    return np.vstack([np.zeros((1, D)), x])


def weighted_ridge_regression(
    Z: np.ndarray, w: np.ndarray, y: np.ndarray, ridge: float
) -> np.ndarray:
    """argmin_theta sum_n w_n (y_n - theta.z_n)^2 + ridge ||theta||^2."""
    ZW = Z * w[:, None]
    A = Z.T @ ZW + ridge * np.eye(Z.shape[1])
    b = ZW.T @ y
    return np.linalg.solve(A, b)


def gaussian_objective(
    theta: np.ndarray,
    sigma: float,
    Z: np.ndarray,
    w: np.ndarray,
    y: np.ndarray,
    ridge: float,
) -> tuple[float, np.ndarray, float]:
    """Penalized weighted Gaussian log-likelihood and its gradients.

    Returns (value, d/dtheta, d/dsigma) for
    sum_n w_n log N(y_n; theta.z_n, sigma^2) - ridge ||theta||^2.
    """
    resid = y - Z @ theta
    value = float(
        np.sum(w * (-0.5 * np.log(2.0 * np.pi) - np.log(sigma) - resid**2 / (2.0 * sigma**2)))
    ) - ridge * float(np.sum(theta**2))
    dtheta = (Z.T @ (w * resid)) / sigma**2 - 2.0 * ridge * theta
    dsigma = float(np.sum(w * (resid**2 / sigma**3 - 1.0 / sigma)))
    return value, dtheta, dsigma
