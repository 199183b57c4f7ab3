"""Two-dimensional latent space model of friendship formation.

    P(A_ij = 1) = expit(gamma0 + gamma_x * dX_ij - |xi_i - xi_j|)

``dX`` is the Euclidean distance between z-scored demographics. Coordinates
get an isotropic Gaussian prior and are fitted by MAP estimation with L-BFGS,
best of several seeded random restarts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from numba import njit
from scipy.optimize import minimize
from scipy.special import expit

from .errors import DegenerateDataError, FitError
from .features import UserFeatures
from .graphcore import Graph
from .kernels import softplus

DIM = 2


@dataclass(frozen=True)
class EmbedConfig:
    prior_variance: float = 4.0
    max_iters: int = 2000
    tolerance: float = 1e-6
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class LatentEmbedding:
    coords: dict[int, tuple[float, float]]
    gamma0: float
    gamma_x: float
    log_posterior: float = float("nan")
    iterations: int = 0
    dim: int = DIM

    def matrix(self, order) -> np.ndarray:
        return np.array([self.coords[n] for n in order], dtype=float).reshape(-1, DIM)


def edge_prob(gamma0: float, gamma_x: float, dx, dxi):
    """Friendship probability from covariate distance ``dx`` and latent distance ``dxi``."""
    return expit(gamma0 + gamma_x * np.asarray(dx, float) - np.asarray(dxi, float))


def covariate_distances(order, feats: Mapping[int, UserFeatures] | None) -> np.ndarray:
    n = len(order)
    if feats is None:
        return np.zeros((n, n))
    Z = np.array([feats[v].demographics() for v in order], dtype=float)
    sd = Z.std(axis=0)
    Z = (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return _pairwise(Z)


def _pairwise(P: np.ndarray) -> np.ndarray:
    # direct differences: the Gram-matrix shortcut loses precision for close points
    diff = P[:, None, :] - P[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


@njit(cache=True)
def _pair_objective(g0, gx, xi, A, DX, grad):
    """Log-likelihood over pairs i < j; writes its gradient into ``grad``."""
    n = xi.shape[0]
    ll = 0.0
    for k in range(grad.shape[0]):
        grad[k] = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d0 = xi[i, 0] - xi[j, 0]
            d1 = xi[i, 1] - xi[j, 1]
            dist = math.sqrt(d0 * d0 + d1 * d1)
            eta = g0 + gx * DX[i, j] - dist
            sp = softplus(eta)
            ll += A[i, j] * eta - sp
            r = A[i, j] - math.exp(eta - sp)
            grad[0] += r
            grad[1] += r * DX[i, j]
            if dist > 0:
                w = r / dist
                grad[2 + 2 * i] -= w * d0
                grad[3 + 2 * i] -= w * d1
                grad[2 + 2 * j] += w * d0
                grad[3 + 2 * j] += w * d1
    return ll


class _Problem:
    """Dense pair matrices for one graph; evaluates objective and gradient."""

    def __init__(self, g: Graph, feats, prior_variance: float):
        self.order = sorted(g.nodes)
        n = len(self.order)
        idx = {v: i for i, v in enumerate(self.order)}
        A = np.zeros((n, n))
        for u, v in g.edges:
            A[idx[u], idx[v]] = A[idx[v], idx[u]] = 1.0
        self.A = A
        self.DX = covariate_distances(self.order, feats)
        self.inv_var = 0.0 if math.isinf(prior_variance) else 1.0 / prior_variance
        self.n = n

    def unpack(self, theta):
        return theta[0], theta[1], theta[2:].reshape(self.n, DIM)

    def value(self, theta) -> float:
        return self.value_and_grad(theta)[0]

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        xi = np.ascontiguousarray(theta[2:].reshape(self.n, DIM))
        grad = np.empty(len(theta))
        ll = _pair_objective(float(theta[0]), float(theta[1]), xi, self.A, self.DX, grad)
        grad[2:] -= self.inv_var * xi.ravel()
        return float(ll - 0.5 * self.inv_var * np.sum(xi * xi)), grad


def log_posterior(g: Graph, feats: Mapping[int, UserFeatures] | None, e: LatentEmbedding,
                  cfg: EmbedConfig | None = None, prior_variance: float | None = None) -> float:
    """Bernoulli log-likelihood over all node pairs plus the Gaussian coordinate prior."""
    if prior_variance is None:
        prior_variance = (cfg or EmbedConfig()).prior_variance
    prob = _Problem(g, feats, prior_variance)
    theta = np.concatenate(([e.gamma0, e.gamma_x], e.matrix(prob.order).ravel()))
    return prob.value(theta)


def log_posterior_grad(g: Graph, feats, e: LatentEmbedding, prior_variance: float = 4.0):
    """Objective and analytic gradient w.r.t. ``(gamma0, gamma_x, xi.ravel())``."""
    prob = _Problem(g, feats, prior_variance)
    theta = np.concatenate(([e.gamma0, e.gamma_x], e.matrix(prob.order).ravel()))
    return prob.value_and_grad(theta)


def initial_embedding(g: Graph, rng: np.random.Generator) -> LatentEmbedding:
    order = sorted(g.nodes)
    n = len(order)
    pairs = n * (n - 1) / 2
    dens = min(max(len(g.edges), 0.5) / pairs, 1 - 0.5 / pairs)
    xi = rng.standard_normal((n, DIM))
    # latent distance between two N(0, I) points averages sqrt(pi)
    g0 = math.log(dens / (1 - dens)) + math.sqrt(math.pi)
    return LatentEmbedding({v: (float(a), float(b)) for v, (a, b) in zip(order, xi)}, g0, 0.0)


def _maximize(prob: _Problem, theta: np.ndarray, cfg: EmbedConfig):
    def neg(x):
        f, g = prob.value_and_grad(x)
        return -f, -g
    res = minimize(neg, theta, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iters, "ftol": cfg.tolerance * 1e-3, "gtol": 1e-6})
    return res.x, -float(res.fun), int(res.nit)


def fit_embedding(g: Graph, feats: Mapping[int, UserFeatures] | None = None,
                  cfg: EmbedConfig = EmbedConfig()) -> LatentEmbedding:
    """MAP latent coordinates; best of ``cfg.restarts`` seeded random starts."""
    if len(g.nodes) < 3:
        raise DegenerateDataError("latent space fit needs at least 3 nodes")
    prob = _Problem(g, feats, cfg.prior_variance)
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(max(1, cfg.restarts)):
        init = initial_embedding(g, rng)
        theta0 = np.concatenate(([init.gamma0, init.gamma_x], init.matrix(prob.order).ravel()))
        theta, f, it = _maximize(prob, theta0, cfg)
        if not np.isfinite(f):
            raise FitError("non-finite latent space objective")
        if best is None or f > best[1]:
            best = (theta, f, it)
    theta, f, it = best
    g0, gx, xi = prob.unpack(theta)
    coords = {v: (float(a), float(b)) for v, (a, b) in zip(prob.order, xi)}
    return LatentEmbedding(coords, float(g0), float(gx), float(f), int(it))


def write_embedding(e: LatentEmbedding, csv_path: str | Path, json_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "xi1", "xi2"])
        for v in sorted(e.coords):
            a, b = e.coords[v]
            w.writerow([v, f"{a:.6g}", f"{b:.6g}"])
    with open(json_path, "w") as fh:
        json.dump({"gamma0": float(f"{e.gamma0:.6g}"), "gammaX": float(f"{e.gamma_x:.6g}"),
                   "logPosterior": float(f"{e.log_posterior:.6g}"),
                   "iterations": e.iterations}, fh, indent=1, sort_keys=True)


def read_coords(csv_path: str | Path) -> dict[int, tuple[float, float]]:
    with open(csv_path, newline="") as fh:
        return {int(r["id"]): (float(r["xi1"]), float(r["xi2"])) for r in csv.DictReader(fh)}
