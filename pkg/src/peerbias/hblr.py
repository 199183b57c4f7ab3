"""Hierarchical Bayesian logistic regression by Metropolis-within-Gibbs.

Model, for subsets s = 1..N with coefficient vectors (intercept first):

    y_si ~ Bernoulli(expit(x_si . beta_s))
    beta_s ~ N(delta, V_beta)
    delta ~ N(delta_bar, a_delta^-1 I)
    V_beta ~ InverseWishart(nu, V)

Each sweep updates every beta_s by a random-walk Metropolis step with
proposal ``beta + scale_s * chol(V_beta) z``, then draws delta and V_beta from
their conjugate conditionals. Proposal scales adapt during burn-in toward a
0.3 acceptance rate and are frozen afterwards.

The sweep itself is compiled with numba. Each chain draws its randomness
from its own generator in fixed-size blocks, so a chain's output depends
only on its data, prior and seed, never on which other chains run with it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import FitError, NumericError
from .glm import add_intercept, fit_logistic
from .kernels import softplus

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.3
ADAPT_EVERY = 50
BLOCK = 256
MAX_PD_RETRIES = 10


@dataclass(frozen=True)
class HierPrior:
    delta_bar: np.ndarray
    a_delta: float
    nu: float
    V: np.ndarray

    def __post_init__(self):
        d = len(self.delta_bar)
        if not self.a_delta > 0:
            raise ValueError("a_delta must be positive")
        if self.nu < d:
            raise ValueError("nu must be at least the coefficient dimension")
        if np.shape(self.V) != (d, d):
            raise ValueError("V must be dim x dim")

    @property
    def dim(self) -> int:
        return len(self.delta_bar)

    @classmethod
    def default(cls, dim: int, a_delta: float = 0.01, nu: float | None = None) -> "HierPrior":
        """delta_bar = 0, nu = (#predictors) + 3, V = nu * I.

        ``dim`` counts the intercept, so the number of predictors is dim - 1.
        """
        nu = dim + 2 if nu is None else nu
        return cls(np.zeros(dim), a_delta, float(nu), nu * np.eye(dim))


@dataclass(frozen=True)
class McmcSchedule:
    draws: int = 20_000
    thin: int = 5
    burnin: int = 10_000
    step_scale: float | None = None  # initial; None -> 2.38 / sqrt(dim)
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if self.draws <= self.burnin:
            raise ValueError("draws must exceed burnin")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def kept(self) -> int:
        return (self.draws - self.burnin) // self.thin

    @classmethod
    def paper(cls, seed: int = 0) -> "McmcSchedule":
        return cls(draws=400_000, thin=5, burnin=200_000, seed=seed)


@dataclass
class HierPosterior:
    beta_draws: np.ndarray | None  # (kept, N, dim); None when not retained
    delta_draws: np.ndarray  # (kept, dim)
    vbeta_draws: np.ndarray  # (kept, dim, dim)
    accept_rates: np.ndarray  # (N,)
    step_scales: np.ndarray  # (N,)
    flags: list[str] = field(default_factory=list)
    beta_means: np.ndarray | None = None

    @property
    def beta_mean(self) -> np.ndarray:
        if self.beta_draws is None:
            return self.beta_means
        return self.beta_draws.mean(axis=0)

    @property
    def delta_mean(self) -> np.ndarray:
        return self.delta_draws.mean(axis=0)

    @property
    def vbeta_mean(self) -> np.ndarray:
        return self.vbeta_draws.mean(axis=0)

    def summary(self) -> dict:
        r = lambda a: np.round(np.asarray(a, float), 6).tolist()  # noqa: E731
        return {
            "posteriorMeanDelta": r(self.delta_mean),
            "posteriorMeanVBeta": r(self.vbeta_mean),
            "perSubsetBeta": r(self.beta_mean),
            "acceptRates": r(self.accept_rates),
            "diagnostics": diagnostics(self),
        }


# -- compiled linear algebra -------------------------------------------------
#
# Small dense helpers written as loops: at the sizes used here (a dozen
# coefficients) call and allocation overhead dominates library routines.

@njit(cache=True)
def _chol(A, L):
    """Lower Cholesky factor of ``A`` into ``L``; False if not positive definite."""
    n = A.shape[0]
    for j in range(n):
        for i in range(j):
            L[i, j] = 0.0
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    return True


@njit(cache=True)
def _tri_inv(L, M):
    """Inverse of lower-triangular ``L`` into ``M``."""
    n = L.shape[0]
    for j in range(n):
        for i in range(j):
            M[i, j] = 0.0
        M[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * M[k, j]
            M[i, j] = s / L[i, i]


@njit(cache=True)
def _lower_lower(A, B, out):
    """``out = A @ B`` for lower-triangular ``A`` and ``B``."""
    n = A.shape[0]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(j, i + 1):
                s += A[i, k] * B[k, j]
            out[i, j] = s


@njit(cache=True)
def _gram(A, out):
    """``out = A @ A.T``."""
    n, m = A.shape
    for i in range(n):
        for j in range(i + 1):
            s = 0.0
            for k in range(m):
                s += A[i, k] * A[j, k]
            out[i, j] = s
            out[j, i] = s


@njit(cache=True)
def _gram_t(A, out):
    """``out = A.T @ A``."""
    m, n = A.shape
    for i in range(n):
        for j in range(i + 1):
            s = 0.0
            for k in range(m):
                s += A[k, i] * A[k, j]
            out[i, j] = s
            out[j, i] = s


@njit(cache=True)
def _iw_core(scale, chi2, wn, V, W, L, work):
    """Inverse-Wishart draw from Bartlett variates.

    With ``scale = Ls Ls'`` and Bartlett factor ``A``, ``W = (Ls^-T A)(Ls^-T A)'``
    is Wishart with scale ``scale^-1``; ``V = W^-1 = (Ls A^-T)(Ls A^-T)'``.
    Writes ``V``, ``W = V^-1`` and ``L = chol(V)``. Returns the number of
    jitter retries used, or -1 if every attempt failed.
    """
    d = scale.shape[0]
    Ls, Li, A, Ai, T = work[0], work[1], work[2], work[3], work[4]
    tr = 0.0
    for i in range(d):
        tr += scale[i, i]
    for i in range(d):
        for j in range(d):
            A[i, j] = 0.0
        A[i, i] = np.sqrt(chi2[i])
        for j in range(i):
            A[i, j] = wn[i, j]
    _tri_inv(A, Ai)
    for attempt in range(MAX_PD_RETRIES):
        jit = 0.0 if attempt == 0 else 1e-10 * 10.0 ** attempt * tr / d
        for i in range(d):
            for j in range(d):
                T[i, j] = scale[i, j]
            T[i, i] += jit
        if not _chol(T, Ls):
            continue
        _tri_inv(Ls, Li)
        # T = Li' A  -> W = T T'
        for i in range(d):
            for j in range(d):
                s = 0.0
                for k in range(max(i, j), d):
                    s += Li[k, i] * A[k, j]
                T[i, j] = s
        _gram(T, W)
        # T = Ls Ai' -> V = T T'
        for i in range(d):
            for j in range(d):
                s = 0.0
                for k in range(min(i, j) + 1):
                    s += Ls[i, k] * Ai[j, k]
                T[i, j] = s
        _gram(T, V)
        if not _chol(V, L):
            continue
        return attempt
    return -1


@njit(cache=True)
def _delta_core(bsum, n_sub, W, delta_bar, a_delta, dn, out, work):
    """delta ~ N(m, P^-1) with P = n W + a I and m = P^-1 (W bsum + a delta_bar).

    Uses ``P = Lp Lp'``: ``delta = Lp^-T (Lp^-1 rhs + dn)``. Returns False if
    ``P`` is not positive definite.
    """
    d = W.shape[0]
    P, Lp, Li = work[0], work[1], work[2]
    for i in range(d):
        for j in range(d):
            P[i, j] = n_sub * W[i, j]
        P[i, i] += a_delta
    if not _chol(P, Lp):
        return False
    _tri_inv(Lp, Li)
    rhs = np.empty(d)
    for i in range(d):
        s = a_delta * delta_bar[i]
        for j in range(d):
            s += W[i, j] * bsum[j]
        rhs[i] = s
    z = np.empty(d)
    for i in range(d):
        s = dn[i]
        for k in range(i + 1):
            s += Li[i, k] * rhs[k]
        z[i] = s
    for i in range(d):
        s = 0.0
        for k in range(i, d):
            s += Li[k, i] * z[k]
        out[i] = s
    return True


# -- conditional draws ------------------------------------------------------

def _work(d: int, k: int = 5) -> np.ndarray:
    return np.zeros((k, d, d))


def invwishart_draw(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-Wishart(df, scale) matrix via the Bartlett decomposition."""
    scale = np.ascontiguousarray(scale, dtype=float)
    d = scale.shape[0]
    chi2 = rng.chisquare(df - np.arange(d))
    wn = rng.standard_normal((d, d))
    V, W, L = np.empty((d, d)), np.empty((d, d)), np.empty((d, d))
    if _iw_core(scale, chi2, wn, V, W, L, _work(d)) < 0:
        raise FitError("could not draw a positive definite V_beta")
    return V


def delta_conditional(betas: np.ndarray, vbeta: np.ndarray, prior: HierPrior):
    """Mean and covariance of delta given the subset coefficients and V_beta.

    S = (N V_beta^-1 + a_delta I)^-1 and m = S (V_beta^-1 sum_s beta_s + a_delta delta_bar).
    """
    betas = np.asarray(betas, float).reshape(-1, prior.dim)
    d = prior.dim
    vinv = np.linalg.inv(vbeta)
    prec = len(betas) * vinv + prior.a_delta * np.eye(d)
    try:
        S = np.linalg.inv(prec)
    except np.linalg.LinAlgError:
        raise FitError("singular delta conditional precision") from None
    S = 0.5 * (S + S.T)
    m = S @ (vinv @ betas.sum(axis=0) + prior.a_delta * prior.delta_bar)
    return m, S


def gibbs_delta(betas: np.ndarray, vbeta: np.ndarray, prior: HierPrior,
                rng: np.random.Generator) -> np.ndarray:
    """Draw delta from its Normal full conditional (see :func:`delta_conditional`)."""
    betas = np.asarray(betas, float).reshape(-1, prior.dim)
    d = prior.dim
    W = np.linalg.inv(vbeta)
    W = np.ascontiguousarray(0.5 * (W + W.T))
    out = np.empty(d)
    ok = _delta_core(betas.sum(axis=0), float(len(betas)), W, np.asarray(prior.delta_bar, float),
                     float(prior.a_delta), rng.standard_normal(d), out, _work(d, 3))
    if not ok:
        raise FitError("singular delta conditional precision")
    return out


def vbeta_conditional(betas: np.ndarray, delta: np.ndarray, prior: HierPrior):
    betas = np.asarray(betas, float).reshape(-1, prior.dim)
    r = betas - delta
    return prior.nu + len(betas), prior.V + r.T @ r


def gibbs_vbeta(betas: np.ndarray, delta: np.ndarray, prior: HierPrior,
                rng: np.random.Generator) -> np.ndarray:
    """Draw V_beta ~ IW(nu + N, V + sum_s (beta_s - delta)(beta_s - delta)')."""
    df, scale = vbeta_conditional(betas, delta, prior)
    return invwishart_draw(df, scale, rng)


def log_target(X: np.ndarray, y: np.ndarray, beta: np.ndarray, delta: np.ndarray,
               vbeta: np.ndarray) -> float:
    """Log-likelihood of one subset plus its N(delta, V_beta) prior (up to a constant).

    ``X`` includes the intercept column.
    """
    eta = X @ beta
    r = beta - delta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * r @ np.linalg.solve(vbeta, r))


def rw_step_beta(X, y, beta_cur, delta, vbeta, step_scale: float, rng: np.random.Generator,
                 z: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """One random-walk Metropolis update of a subset's coefficients.

    ``X`` includes the intercept column. ``z`` overrides the standard normal
    innovation (used to probe the accept rule deterministically).
    """
    L = np.linalg.cholesky(vbeta)
    z = rng.standard_normal(len(beta_cur)) if z is None else np.asarray(z, float)
    prop = beta_cur + step_scale * (L @ z)
    log_ratio = log_target(X, y, prop, delta, vbeta) - log_target(X, y, beta_cur, delta, vbeta)
    if np.log(rng.random()) < log_ratio:
        return prop, True
    return np.array(beta_cur, copy=True), False


# -- compiled sweep ---------------------------------------------------------
#
# The sweep runs over one chain at a time. Randomness is drawn in numpy
# blocks from the chain's own generator, so a chain's output depends only on
# its data, prior and seed.

@njit(cache=True)
def _subset_loglik(X, y, lo, hi, b):
    d = X.shape[1]
    ll = 0.0
    for r in range(lo, hi):
        eta = 0.0
        for j in range(d):
            eta += X[r, j] * b[j]
        ll += y[r] * eta - softplus(eta)
    return ll


@njit(cache=True)
def _quad(r, Q):
    d = r.shape[0]
    s = 0.0
    for i in range(d):
        t = 0.0
        for j in range(d):
            t += Q[i, j] * r[j]
        s += r[i] * t
    return s


@njit(cache=True)
def _run_block(X, y, off, beta, ll_cur, delta, V, W, L, log_scale, acc_window, acc_post,
               beta_sum, counters, t0, nsteps, Z, U, DN, CHI, WN,
               delta_bar, a_delta, V0, burnin, thin, kept, adapt,
               out_delta, out_v, out_beta, keep_beta):
    """Advance one chain by ``nsteps`` sweeps. ``counters`` = [rounds, k]. Returns -1 on PD failure."""
    S, d = beta.shape
    prop = np.empty(d)
    rc = np.empty(d)
    rp = np.empty(d)
    bsum = np.empty(d)
    scale = np.empty((d, d))
    work = np.zeros((5, d, d))
    for step in range(nsteps):
        t = t0 + step
        # beta_s | delta, V_beta
        for s in range(S):
            sc = np.exp(log_scale[s])
            for i in range(d):
                acc = 0.0
                for j in range(i + 1):
                    acc += L[i, j] * Z[step, s, j]
                prop[i] = beta[s, i] + sc * acc
                rc[i] = beta[s, i] - delta[i]
                rp[i] = prop[i] - delta[i]
            llp = _subset_loglik(X, y, off[s], off[s + 1], prop)
            log_ratio = (llp - ll_cur[s]) - 0.5 * (_quad(rp, W) - _quad(rc, W))
            accepted = np.log(U[step, s]) < log_ratio
            if accepted:
                for i in range(d):
                    beta[s, i] = prop[i]
                ll_cur[s] = llp
            if t < burnin:
                acc_window[s] += accepted
            else:
                acc_post[s] += accepted
        # delta | beta, V_beta
        for i in range(d):
            bsum[i] = 0.0
            for s in range(S):
                bsum[i] += beta[s, i]
        if not _delta_core(bsum, float(S), W, delta_bar, a_delta, DN[step], delta, work):
            return -1
        # V_beta | beta, delta
        for i in range(d):
            for j in range(i + 1):
                v = V0[i, j]
                for s in range(S):
                    v += (beta[s, i] - delta[i]) * (beta[s, j] - delta[j])
                scale[i, j] = v
                scale[j, i] = v
        if _iw_core(scale, CHI[step], WN[step], V, W, L, work) < 0:
            return -1
        if t < burnin:
            if adapt and (t + 1) % ADAPT_EVERY == 0:
                counters[0] += 1
                gain = max(0.2, 1.0 / np.sqrt(counters[0]))
                for s in range(S):
                    log_scale[s] += gain * (acc_window[s] / ADAPT_EVERY - TARGET_ACCEPT) * 2.0
                    acc_window[s] = 0.0
        else:
            k = counters[1]
            if (t - burnin + 1) % thin == 0 and k < kept:
                out_delta[k] = delta
                out_v[k] = V
                if keep_beta:
                    out_beta[k] = beta
                beta_sum += beta
                counters[1] = k + 1
    return 0


def _initial_beta(Xs, ys, dim):
    if len(ys) and 0 < np.sum(ys) < len(ys):
        try:
            return fit_logistic(Xs, ys, 1.0).coefficients
        except NumericError:  # a poor start only costs burn-in
            pass
    return np.zeros(dim)


def _run_chain(problem, prior: HierPrior, sch: McmcSchedule, keep_beta_draws: bool) -> HierPosterior:
    d = prior.dim
    S = len(problem)
    sizes = [len(ys) for _, ys in problem]
    off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    X = np.zeros((off[-1], d))
    y = np.zeros(off[-1])
    for s, (Xs, ys) in enumerate(problem):
        if sizes[s]:
            X[off[s]:off[s + 1]] = add_intercept(Xs)
            y[off[s]:off[s + 1]] = ys
    beta = np.array([_initial_beta(Xs, ys, d) for Xs, ys in problem], dtype=float).reshape(S, d)
    ll_cur = np.array([_subset_loglik(X, y, off[s], off[s + 1], beta[s]) for s in range(S)])
    delta = beta.mean(axis=0)
    V, W, L = np.eye(d), np.eye(d), np.eye(d)
    scale0 = sch.step_scale if sch.step_scale is not None else 2.38 / np.sqrt(d)
    log_scale = np.full(S, np.log(scale0))
    acc_window = np.zeros(S)
    acc_post = np.zeros(S)
    beta_sum = np.zeros((S, d))
    counters = np.zeros(2, dtype=np.int64)
    kept = sch.kept
    out_delta = np.empty((kept, d))
    out_v = np.empty((kept, d, d))
    out_beta = np.empty((kept, S, d) if keep_beta_draws else (1, S, d))
    rng = np.random.default_rng(sch.seed)
    df_post = prior.nu + S
    V0 = np.asarray(prior.V, float)
    dbar = np.asarray(prior.delta_bar, float)
    for t0 in range(0, sch.draws, BLOCK):
        n = min(BLOCK, sch.draws - t0)
        Z = rng.standard_normal((BLOCK, S, d))
        U = rng.random((BLOCK, S))
        DN = rng.standard_normal((BLOCK, d))
        CHI = rng.chisquare(df_post - np.arange(d), size=(BLOCK, d))
        WN = rng.standard_normal((BLOCK, d, d))
        status = _run_block(X, y, off, beta, ll_cur, delta, V, W, L, log_scale, acc_window, acc_post,
                            beta_sum, counters, t0, n, Z, U, DN, CHI, WN,
                            dbar, float(prior.a_delta), V0, sch.burnin, sch.thin, kept, sch.adapt,
                            out_delta, out_v, out_beta, keep_beta_draws)
        if status < 0:
            raise FitError("could not draw a positive definite V_beta")
    n_post = sch.draws - sch.burnin
    return HierPosterior(
        out_beta if keep_beta_draws else None, out_delta, out_v,
        acc_post / n_post, np.exp(log_scale), beta_means=beta_sum / kept,
    )


def sample_hier_many(problems, prior: HierPrior, schedules, keep_beta_draws: bool = True) -> list[HierPosterior]:
    """Run one independent chain per problem.

    Parameters
    ----------
    problems : list of list of (X, y)
        Each problem is a list of subsets sharing a feature dimension. ``X``
        excludes the intercept.
    prior : HierPrior
        Shared by all chains; ``prior.dim`` is the number of predictors + 1.
    schedules : McmcSchedule or list of McmcSchedule
        One per problem, or one for all.
    keep_beta_draws : bool
        When false only the running posterior means of the subset
        coefficients are kept, which saves memory for large batches.
    """
    if isinstance(schedules, McmcSchedule):
        schedules = [schedules] * len(problems)
    if len(schedules) != len(problems):
        raise ValueError("need one schedule per problem")
    d = prior.dim
    for p in problems:
        if not p:
            raise ValueError("every problem needs at least one subset")
        for Xs, _ in p:
            if len(Xs) and np.shape(Xs)[1] != d - 1:
                raise ValueError(f"subset has {np.shape(Xs)[1]} predictors, prior expects {d - 1}")
    return [_run_chain(list(p), prior, sch, keep_beta_draws) for p, sch in zip(problems, schedules)]


def sample_hier(subsets, prior: HierPrior, schedule: McmcSchedule = McmcSchedule()) -> HierPosterior:
    """Posterior draws for one hierarchical logistic regression.

    ``subsets`` is a list of ``(X, y)`` pairs; ``X`` has no intercept column.
    Subsets may be empty (zero rows), in which case they contribute only
    through the hierarchy.
    """
    return sample_hier_many([list(subsets)], prior, [schedule])[0]


# -- diagnostics ------------------------------------------------------------

def split_rhat(chain: np.ndarray) -> float:
    """Potential scale reduction from the two halves of a single chain."""
    chain = np.asarray(chain, float)
    n = len(chain) // 2
    halves = np.stack([chain[:n], chain[n:2 * n]])
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return float("nan") if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def effective_sample_size(chain: np.ndarray) -> float:
    """Autocorrelation ESS with Geyer's initial positive sequence truncation."""
    x = np.asarray(chain, float)
    n = len(x)
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return float("nan")
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    tau = max(tau, 1.0 / n)
    return float(n / tau)


def diagnostics(post: HierPosterior) -> dict:
    """Split-chain R-hat and ESS for delta and the diagonal of V_beta.

    Constant traces yield ``degenerate`` entries instead of numbers.
    """
    if len(post.delta_draws) < 100:
        raise ValueError("diagnostics need at least 100 retained draws")
    out = {"rhat": {}, "ess": {}, "degenerate": []}
    series = {f"delta[{i}]": post.delta_draws[:, i] for i in range(post.delta_draws.shape[1])}
    for i in range(post.vbeta_draws.shape[1]):
        series[f"vbeta[{i},{i}]"] = post.vbeta_draws[:, i, i]
    for name, s in series.items():
        if np.ptp(s) == 0:
            out["degenerate"].append(name)
            continue
        out["rhat"][name] = round(split_rhat(s), 6)
        out["ess"][name] = round(effective_sample_size(s), 3)
    vals = list(out["rhat"].values())
    out["max_rhat"] = max(vals) if vals else None
    out["min_ess"] = min(out["ess"].values()) if out["ess"] else None
    return out
