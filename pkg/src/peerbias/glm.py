"""Ridge-penalized logistic regression by damped Newton (IRLS).

The objective is the unnormalized one

    f(beta) = lam/2 * ||slopes||^2 - sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]

with ``p_i = expit(beta_0 + x_i . slopes)``. The intercept is never penalized.
Design matrices passed in never contain an intercept column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, DegenerateDataError
from .kernels import masked_nll_rows

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 100
JITTER = 1e-10
SEPARABLE_FALLBACK_LAMBDA = 1e-8
FLAT_DECREASE = 1e-11
# |eta| beyond this means a fitted probability within ~1e-13 of 0 or 1
SATURATED_ETA = 30.0


def add_intercept(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _penalty(d: int, lam: float) -> np.ndarray:
    pen = np.full(d, float(lam))
    pen[0] = 0.0
    return pen


def penalized_objective(beta, X, y, lam: float) -> float:
    Xa = add_intercept(X)
    eta = Xa @ beta
    nll = np.sum(np.logaddexp(0.0, eta) - y * eta)
    return float(nll + 0.5 * lam * np.dot(beta[1:], beta[1:]))


def penalized_gradient(beta, X, y, lam: float) -> np.ndarray:
    Xa = add_intercept(X)
    p = expit(Xa @ beta)
    return Xa.T @ (p - y) + _penalty(len(beta), lam) * beta


def penalized_hessian(beta, X, y, lam: float) -> np.ndarray:
    Xa = add_intercept(X)
    p = expit(Xa @ beta)
    w = p * (1.0 - p)
    return (Xa.T * w) @ Xa + np.diag(_penalty(len(beta), lam))


@dataclass
class GlmFit:
    coefficients: np.ndarray  # (intercept, slopes...)
    covariance: np.ndarray
    lam: float
    objective: float
    converged: bool
    n_iter: int = 0
    jittered: bool = False
    flags: list[str] = field(default_factory=list)

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def to_json(self) -> dict:
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "lambda": float(self.lam),
            "objective": float(self.objective),
            "converged": bool(self.converged),
        }


def _solve_psd(H: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        c = np.linalg.cholesky(H)
        jittered = False
    except np.linalg.LinAlgError:
        c = np.linalg.cholesky(H + JITTER * max(1.0, np.abs(H).max()) * np.eye(len(H)))
        jittered = True
    z = np.linalg.solve(c, g)
    return np.linalg.solve(c.T, z), jittered


def fit_logistic(X, y, lam: float = 0.0, start=None, max_iter: int = MAX_ITER,
                 tol: float = GRAD_TOL) -> GlmFit:
    """Minimize the ridge-penalized negative log-likelihood by Newton's method.

    Parameters
    ----------
    X : (n, k) array
        Features, no intercept column.
    y : (n,) array of {0, 1}
    lam : float
        Ridge weight on the slopes, on the unnormalized (sum) loss scale.
    start : optional (k + 1,) array
        Warm start.

    Returns
    -------
    GlmFit
        ``covariance`` is the inverse penalized Hessian at the solution, i.e.
        the inverse observed information when ``lam == 0``.

    Raises
    ------
    ConvergenceError
        If ``lam == 0`` and the iterations do not converge (typically
        separable data), or the objective becomes non-finite.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y row counts differ")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Xa = add_intercept(X)
    d = Xa.shape[1]
    pen = _penalty(d, lam)
    beta = np.zeros(d) if start is None else np.array(start, dtype=float)

    def obj(b):
        eta = Xa @ b
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta) + 0.5 * np.dot(pen * b, b))

    f = obj(beta)
    jittered = False
    converged = False
    n_iter = 0
    for _ in range(max_iter):
        p = expit(Xa @ beta)
        g = Xa.T @ (p - y) + pen * beta
        if np.max(np.abs(g)) <= tol:
            converged = True
            break
        H = (Xa.T * (p * (1.0 - p))) @ Xa + np.diag(pen)
        step, jit = _solve_psd(H, g)
        jittered |= jit
        gd = float(g @ step)
        if gd <= FLAT_DECREASE * max(1.0, abs(f)):
            # predicted decrease is below objective resolution: line search
            # cannot discriminate, and a pure Newton step is safe this close
            beta = beta - step
            f = obj(beta)
            n_iter += 1
            continue
        t = 1.0
        for _ in range(50):
            cand = beta - t * step
            fc = obj(cand)
            if np.isfinite(fc) and fc <= f - 1e-4 * t * gd:
                break
            t *= 0.5
        if not np.isfinite(fc):
            raise ConvergenceError("non-finite objective in logistic fit")
        if fc > f:
            break  # no descent left at floating point resolution
        beta, f = cand, fc
        n_iter += 1
    if not converged:
        g = Xa.T @ (expit(Xa @ beta) - y) + pen * beta
        converged = bool(np.max(np.abs(g)) <= tol)
    if not converged and lam == 0:
        raise ConvergenceError(
            f"unpenalized logistic fit did not converge in {max_iter} iterations "
            "(data may be separable)")
    if lam == 0 and np.max(np.abs(Xa @ beta)) > SATURATED_ETA:
        # under separation the gradient vanishes while the slopes diverge
        raise ConvergenceError("unpenalized logistic fit diverges (data are separable)")

    p = expit(Xa @ beta)
    H = (Xa.T * (p * (1.0 - p))) @ Xa + np.diag(pen)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)
        jittered = True
    cov = 0.5 * (cov + cov.T)
    flags = ["jittered"] if jittered else []
    return GlmFit(beta, cov, float(lam), f, converged, n_iter, jittered, flags)


def fit_unpenalized(X, y) -> GlmFit:
    """Unregularized fit, falling back to a vanishing ridge under separation."""
    try:
        return fit_logistic(X, y, 0.0)
    except ConvergenceError:
        fit = fit_logistic(X, y, SEPARABLE_FALLBACK_LAMBDA)
        fit.flags.append("separable-fallback")
        return fit


def _batch_objective(Bc, Xa, y, M, pen):
    eta = Bc @ Xa.T
    return masked_nll_rows(eta, y, M) + 0.5 * np.sum(pen * Bc * Bc, axis=1)


def fit_logistic_batch(X, y, masks, lam: float, start=None, max_iter: int = MAX_ITER,
                       tol: float = GRAD_TOL) -> np.ndarray:
    """Fit many row-subsets of one data set at once.

    ``masks`` is a (P, n) 0/1 array selecting the rows of each fit. Returns the
    (P, k + 1) coefficient matrix; each row minimizes the same objective as
    :func:`fit_logistic` restricted to its rows.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    M = np.asarray(masks, dtype=float)
    Xa = add_intercept(X)
    P, d = M.shape[0], Xa.shape[1]
    pen = _penalty(d, lam)
    outer = (Xa[:, :, None] * Xa[:, None, :]).reshape(len(Xa), d * d)
    B = np.zeros((P, d)) if start is None else np.tile(np.asarray(start, float), (P, 1))

    f = _batch_objective(B, Xa, y, M, pen)
    active = np.ones(P, dtype=bool)
    for _ in range(max_iter):
        eta = B @ Xa.T
        p = expit(eta)
        G = (M * (p - y)) @ Xa + pen * B
        active = np.max(np.abs(G), axis=1) > tol
        if not active.any():
            break
        W = M * p * (1.0 - p)
        H = (W[active] @ outer).reshape(-1, d, d) + np.diag(pen)
        H += JITTER * np.eye(d)
        step = np.linalg.solve(H, G[active][:, :, None])[:, :, 0]
        Ba, fa = B[active], f[active]
        t = np.ones(len(Ba))
        gd = np.sum(G[active] * step, axis=1)
        flat = gd <= FLAT_DECREASE * np.maximum(1.0, np.abs(fa))
        for _ in range(40):
            cand = Ba - t[:, None] * step
            fc = _batch_objective(cand, Xa, y, M[active], pen)
            bad = ~(fc <= fa - 1e-4 * t * gd) & ~flat
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        keep = (fc <= fa) | flat
        Ba = np.where(keep[:, None], cand, Ba)
        fa = np.where(keep, fc, fa)
        B[active], f[active] = Ba, fa
    if not np.all(np.isfinite(B)):
        raise ConvergenceError("non-finite coefficients in batched logistic fit")
    return B


def predict_prob(fit, x) -> np.ndarray | float:
    """Class-1 probability ``expit(intercept + slopes . x)``.

    ``fit`` may be a :class:`GlmFit` or a raw coefficient vector.
    """
    beta = fit.coefficients if isinstance(fit, GlmFit) else np.asarray(fit, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(beta) - 1:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match {len(beta) - 1} slopes")
    out = expit(beta[0] + x @ beta[1:])
    return float(out) if np.ndim(out) == 0 else out


def lambda_halfway(X, y) -> float:
    """Ridge weight halfway along the standard regularization path.

    ``lam_max = max_j |xs_j . (y - ybar)| / n`` over standardized non-constant
    columns, ``lam_min = 1e-4 * lam_max``, and the midpoint is returned. This
    lives on the mean-loss scale; multiply by ``n`` for :func:`fit_logistic`.
    A design with no varying column yields the fallback ``1.0``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if y.min(initial=1) == y.max(initial=0) or len(y) == 0:
        raise DegenerateDataError("lambda_halfway needs both classes")
    n = len(y)
    sd = X.std(axis=0)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
    if not ok.any():
        return 1.0
    Xs = (X[:, ok] - X[:, ok].mean(axis=0)) / sd[ok]
    lam_max = float(np.max(np.abs(Xs.T @ (y - y.mean()))) / n)
    if lam_max <= 0:
        return 1.0
    lam_min = 1e-4 * lam_max
    return 0.5 * (lam_min + lam_max)


def t_squared(a: GlmFit, b: GlmFit) -> float:
    """Compatibility statistic (ba - bb)' (cov_a + cov_b)^-1 (ba - bb)."""
    if len(a.coefficients) != len(b.coefficients):
        raise ValueError("coefficient dimensions differ")
    diff = a.coefficients - b.coefficients
    S = a.covariance + b.covariance
    try:
        c = np.linalg.cholesky(S)
        z = np.linalg.solve(c, diff)
        return float(z @ z)
    except np.linalg.LinAlgError:
        log.debug("singular combined covariance in T^2; using pseudo-inverse")
        return float(max(diff @ np.linalg.pinv(S) @ diff, 0.0))
