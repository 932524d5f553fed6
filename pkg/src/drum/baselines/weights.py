"""Covariate-shift importance weights: kernel mean matching and a domain classifier."""

from __future__ import annotations

import logging
import warnings

import numpy as np

from ..errors import InputError, SolverError
from .models import WeightVector

log = logging.getLogger(__name__)

CLASSIFIER_CLIP = 100.0


def ess(w: np.ndarray) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    top = float(w.max()) if w.size else 0.0
    if top == 0:
        raise InputError("effective sample size of all-zero weights is undefined")
    w = w / top  # scale-free; avoids underflow of tiny weights
    return float(np.sum(w)) ** 2 / float(np.sum(w * w))


# -- kernel mean matching ----------------------------------------------------------


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def median_bandwidth(X: np.ndarray, max_rows: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance (on a fixed subsample when large)."""
    if len(X) > max_rows:
        X = X[np.random.default_rng(seed).choice(len(X), max_rows, replace=False)]
    d = np.sqrt(_sq_dists(X, X)[np.triu_indices(len(X), k=1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def gaussian_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-_sq_dists(A, B) / (2.0 * sigma * sigma))


def project_box_sum(v: np.ndarray, upper: float, lo_sum: float, hi_sum: float) -> np.ndarray:
    """Euclidean projection onto ``{0 <= w <= upper, lo_sum <= sum(w) <= hi_sum}``.

    The projection is ``clip(v - tau, 0, upper)`` with ``tau = 0`` when the
    clipped vector already satisfies the sum constraint and otherwise the
    shift that puts the sum on the violated bound (found by bisection; the
    sum is monotone in ``tau``).
    """
    w = np.clip(v, 0.0, upper)
    s = w.sum()
    if lo_sum <= s <= hi_sum:
        return w
    target = hi_sum if s > hi_sum else lo_sum
    a, b = v.min() - upper, v.max()
    for _ in range(200):
        tau = 0.5 * (a + b)
        if np.clip(v - tau, 0.0, upper).sum() > target:
            a = tau
        else:
            b = tau
        if b - a <= 1e-15 * (1 + abs(a) + abs(b)):
            break
    return np.clip(v - 0.5 * (a + b), 0.0, upper)


def kmm_solve(
    K: np.ndarray,
    kappa: np.ndarray,
    upper: float,
    lo_sum: float,
    hi_sum: float,
    tol: float = 1e-4,
    max_iter: int = 20_000,
) -> tuple[np.ndarray, float, int]:
    """Accelerated projected gradient for ``min 0.5 w'Kw - kappa'w`` over the box-sum set.

    Converged when the projected-gradient residual
    ``max|w - P(w - (Kw - kappa) / Lip)| * Lip`` falls below ``tol``.
    Returns ``(w, residual, iterations)``.
    """
    m = len(kappa)
    lip = float(np.linalg.eigvalsh(K)[-1]) if m <= 400 else _power_norm(K)
    lip = max(lip, 1e-12)
    w = project_box_sum(np.ones(m), upper, lo_sum, hi_sum)
    y, t = w.copy(), 1.0
    resid = np.inf
    for it in range(1, max_iter + 1):
        grad = K @ y - kappa
        w_next = project_box_sum(y - grad / lip, upper, lo_sum, hi_sum)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # restart momentum when the objective goes up
        if (w_next - w) @ (K @ w_next - kappa) > 0:
            y, t = w_next.copy(), 1.0
        else:
            y = w_next + ((t - 1.0) / t_next) * (w_next - w)
            t = t_next
        w = w_next
        if it % 10 == 0 or it == max_iter:
            g = K @ w - kappa
            resid = float(np.max(np.abs(w - project_box_sum(w - g / lip, upper, lo_sum, hi_sum))) * lip)
            if resid <= tol:
                return w, resid, it
    raise SolverError(f"kernel mean matching did not converge in {max_iter} iterations", residual=resid)


def _power_norm(K: np.ndarray, iters: int = 100) -> float:
    v = np.ones(len(K)) / np.sqrt(len(K))
    lam = 0.0
    for _ in range(iters):
        u = K @ v
        lam_new = float(np.linalg.norm(u))
        v = u / lam_new
        if abs(lam_new - lam) <= 1e-10 * lam_new:
            break
        lam = lam_new
    return lam_new * (1 + 1e-6)


def kmm_weights(
    source_X: np.ndarray,
    target_X: np.ndarray,
    bandwidth: float | None = None,
    B_cap: float = 1000.0,
    eps: float | None = None,
    tol: float = 1e-4,
    max_iter: int = 20_000,
) -> WeightVector:
    """Kernel mean matching weights for the source rows.

    Solves ``min 0.5 w'Kw - kappa'w`` subject to ``0 <= w <= B_cap`` and
    ``|sum(w) - m| <= m * eps`` with a Gaussian kernel; ``eps`` defaults to
    ``(sqrt(m) - 1) / sqrt(m)`` and the bandwidth to the median pairwise
    distance of the pooled sample. The solver works on the objective divided
    by ``m``, so ``tol`` bounds the KKT residual of the per-row objective.
    """
    Xs = np.asarray(source_X, dtype=np.float64)
    Xt = np.asarray(target_X, dtype=np.float64)
    if len(Xs) == 0 or len(Xt) == 0:
        raise InputError("kernel mean matching needs non-empty source and target sets")
    m, nt = len(Xs), len(Xt)
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([Xs, Xt]))
    if eps is None:
        eps = (np.sqrt(m) - 1.0) / np.sqrt(m)
    K = gaussian_kernel(Xs, Xs, bandwidth)
    kappa = (m / nt) * gaussian_kernel(Xs, Xt, bandwidth).sum(axis=1)
    # solve the per-row scaled problem (same minimizer) so the KKT tolerance is size independent
    w, resid, iters = kmm_solve(K / m, kappa / m, B_cap, m * (1 - eps), m * (1 + eps), tol, max_iter)
    info = {"bandwidth": bandwidth, "eps": eps, "B_cap": B_cap, "kkt_residual": resid, "iterations": iters}
    return WeightVector(w, ess(w), "kmm", info)


def kmm_objective(K: np.ndarray, kappa: np.ndarray, w: np.ndarray) -> float:
    return float(0.5 * w @ K @ w - kappa @ w)


# -- domain classifier -----------------------------------------------------------------


def fit_logistic(Z: np.ndarray, labels: np.ndarray, ridge: float = 1e-8, max_iter: int = 100, tol: float = 1e-10):
    """Newton (IRLS) logistic regression with an intercept.

    Returns ``(coef, intercept, separated)`` where ``separated`` flags
    (quasi-)complete separation: the coefficients kept growing or the fitted
    probabilities reproduce the labels to within 1e-6.
    """
    n, d = Z.shape
    D = np.hstack([np.ones((n, 1)), Z])
    beta = np.zeros(d + 1)
    separated = False
    for _ in range(max_iter):
        eta = D @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        W = np.maximum(p * (1 - p), 1e-12)
        grad = D.T @ (labels - p) - ridge * beta
        H = (D * W[:, None]).T @ D + ridge * np.eye(d + 1)
        step = np.linalg.solve(H, grad)
        beta = beta + step
        if np.linalg.norm(beta) > 1e4:
            separated = True
            break
        if np.max(np.abs(step)) < tol:
            break
    p = 1.0 / (1.0 + np.exp(-(D @ beta)))
    if np.max(np.abs(p - labels)) < 1e-6:
        separated = True
    return beta[1:], beta[0], separated


def classifier_weights(source_X: np.ndarray, target_X: np.ndarray) -> WeightVector:
    """Weights ``p(target|x) / p(source|x)`` from a logistic domain classifier, rescaled to mean 1."""
    Xs = np.asarray(source_X, dtype=np.float64)
    Xt = np.asarray(target_X, dtype=np.float64)
    if len(Xs) == 0 or len(Xt) == 0:
        raise InputError("domain classifier needs non-empty source and target sets")
    Z = np.vstack([Xs, Xt])
    labels = np.concatenate([np.zeros(len(Xs)), np.ones(len(Xt))])
    coef, intercept, separated = fit_logistic(Z, labels)
    if separated:
        warnings.warn("source and target are (nearly) separable; weights clipped at 100", RuntimeWarning)
    logit = Xs @ coef + intercept
    w = np.exp(np.clip(logit, -700, 700))
    w = w / w.mean()
    w = np.minimum(w, CLASSIFIER_CLIP)
    info = {"coef": coef.tolist(), "intercept": float(intercept), "separated": separated}
    return WeightVector(w, ess(w), "classifier", info)
