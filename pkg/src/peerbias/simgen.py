"""Synthetic populations and response regeneration from planted coefficients.

The population generator draws latent positions from a Gaussian mixture,
links users with the latent space edge model, and lets the same positions
drive game activity and installs, so latent homophily is real and known.

The simulation side copies a snowball's fitted coefficients, plants the peer
coefficient and a pair of homophily coefficients, and redraws installs as
independent Bernoulli responses.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import DegenerateDataError, SchemaError
from .features import (ACTIVITY_DAYS, DesignRow, FeatureSchema, UserFeatures, design_matrix,
                       read_activity_csv, read_users_csv, write_activity_csv, write_users_csv)
from .glm import add_intercept, fit_logistic
from .graphcore import Graph, read_edge_list, write_edge_list

log = logging.getLogger(__name__)

SCENARIO_GRID: tuple[tuple[float, float], ...] = (
    (2, 2), (2, -2), (-2, -2), (0, 0), (0, 1), (2, -1), (2, 0), (2, 1), (-2, 0),
)
PEER_COEF = 2.0
GENERATING_LAMBDA = 1.0


def parse_pair(text: str) -> tuple[float, float]:
    """Parse ``"(a,b)"`` or ``"a,b"`` into a scenario pair."""
    parts = text.strip().strip("()").split(",")
    if len(parts) != 2:
        raise ValueError(f"not a coefficient pair: {text!r}")
    return float(parts[0]), float(parts[1])


@dataclass(frozen=True)
class GeneratingCoeffs:
    base: np.ndarray  # intercept first
    peer_index: int  # positions in ``base``
    homophily_indices: tuple[int, ...]

    def __post_init__(self):
        if self.base[self.peer_index] != PEER_COEF:
            raise SchemaError("peer coefficient must be planted")


def make_generating_coeffs(beta_true, pair, schema: FeatureSchema) -> GeneratingCoeffs:
    """Copy ``beta_true``, then set the peer slot to 2 and the homophily slots to ``pair``.

    ``beta_true`` is a coefficient vector (intercept first) for the full
    schema with homophily columns included.
    """
    beta = np.array(beta_true, dtype=float)
    cols = schema.active_columns("global")
    if len(beta) != len(cols) + 1:
        raise SchemaError(f"coefficient length {len(beta)} does not match schema width {len(cols)} + 1")
    h = tuple(1 + i for i in schema.homophily_indices("global"))
    if len(h) != len(pair):
        raise SchemaError(f"schema has {len(h)} homophily slots, pair has {len(pair)}")
    p = 1 + schema.peer_index("global")
    beta[p] = PEER_COEF
    beta[list(h)] = [float(v) for v in pair]
    return GeneratingCoeffs(beta, p, h)


def simulate_responses(rows, g: GeneratingCoeffs, seed) -> np.ndarray:
    """Independent Bernoulli(expit(x . beta)) installs, one per row.

    ``rows`` is a sequence of :class:`DesignRow` or a feature matrix without
    an intercept column.
    """
    X = design_matrix(rows)[0] if len(rows) and isinstance(rows[0], DesignRow) else np.asarray(rows, float)
    if X.size == 0:
        return np.zeros(0, dtype=int)
    if X.shape[1] + 1 != len(g.base):
        raise SchemaError(f"design width {X.shape[1]} does not match {len(g.base) - 1} slopes")
    p = expit(add_intercept(X) @ g.base)
    rng = np.random.default_rng(seed)
    return (rng.random(len(p)) < p).astype(int)


def fit_generating_per_snowball(X, y) -> np.ndarray:
    """Unit-ridge coefficients of one snowball on its ground-truth design."""
    y = np.asarray(y)
    if y.min(initial=1) == y.max(initial=0):
        raise DegenerateDataError("generating fit needs both classes")
    return fit_logistic(X, y, GENERATING_LAMBDA).coefficients


# -- population generator ---------------------------------------------------

@dataclass(frozen=True)
class PopulationConfig:
    n_users: int = 10_000
    n_clusters: int = 4
    cluster_radius: float = 3.0  # centres sit on a circle of this radius
    cluster_spread: float = 1.0
    mean_degree: float = 7.0
    gamma0: float | None = None  # None -> calibrated to mean_degree
    gamma_x: float = -0.5
    female_rate: float = 0.55
    age_mean: float = 24.0
    age_sd: float = 4.0
    age_cluster_shift: float = 2.0
    photos_mean: float = 2.6
    comments_mean: float = 2.6
    n_games: int = 3
    activity_base: float = -2.5
    activity_weight: float = 1.0
    install_rate: float = 0.2
    install_peer_weight: float = 2.0
    install_coord_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 10:
            raise ValueError("n_users must be at least 10")
        if not 0 < self.female_rate < 1 or not 0 < self.install_rate < 1:
            raise ValueError("rates must lie in (0, 1)")
        if self.n_clusters < 1 or self.n_games < 1:
            raise ValueError("need at least one cluster and one game")
        if self.mean_degree <= 0 or self.cluster_spread <= 0 or self.age_sd <= 0:
            raise ValueError("mean_degree, cluster_spread and age_sd must be positive")


@dataclass
class Population:
    graph: Graph
    users: dict[int, UserFeatures]
    coords: dict[int, tuple[float, float]]
    activity: dict[int, frozenset[int]]  # games active on during days 1-6
    events: list[tuple[int, int, int]]  # (id, game, day)
    installs: dict[int, int]  # day-7 response
    gamma0: float
    config: PopulationConfig

    @property
    def games(self) -> list[int]:
        return list(range(self.config.n_games))


def _zscore(Z):
    sd = Z.std(axis=0)
    return (Z - Z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def _edge_logits_rows(i0, i1, xi, dz, gamma_x):
    dxi = np.sqrt(((xi[i0:i1, None, :] - xi[None, :, :]) ** 2).sum(-1))
    dx = np.sqrt(((dz[i0:i1, None, :] - dz[None, :, :]) ** 2).sum(-1))
    return gamma_x * dx - dxi


def _calibrate_gamma0(xi, dz, gamma_x, mean_degree, rng) -> float:
    n = len(xi)
    m = min(200_000, n * (n - 1) // 2)
    i = rng.integers(0, n, m)
    j = rng.integers(0, n - 1, m)
    j = j + (j >= i)
    base = gamma_x * np.linalg.norm(dz[i] - dz[j], axis=1) - np.linalg.norm(xi[i] - xi[j], axis=1)
    target = mean_degree / (n - 1)
    f = lambda g0: float(np.mean(expit(g0 + base))) - target  # noqa: E731
    if f(-60.0) > 0 or f(60.0) < 0:
        raise DegenerateDataError("cannot calibrate edge intercept to the target degree")
    return brentq(f, -60.0, 60.0, xtol=1e-10)


def generate_population(cfg: PopulationConfig) -> Population:
    """Draw a synthetic population; deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_users
    k = cfg.n_clusters
    angles = 2 * np.pi * np.arange(k) / k
    centres = cfg.cluster_radius * np.c_[np.cos(angles), np.sin(angles)] if k > 1 else np.zeros((1, 2))
    label = rng.integers(0, k, n)
    xi = centres[label] + cfg.cluster_spread * rng.standard_normal((n, 2))

    gender = (rng.random(n) < cfg.female_rate).astype(int)
    shift = np.linspace(-1, 1, k)[label] * cfg.age_cluster_shift if k > 1 else np.zeros(n)
    age = np.clip(cfg.age_mean + shift + cfg.age_sd * rng.standard_normal(n), 13.0, None)
    photos = np.clip(cfg.photos_mean + 0.6 * rng.standard_normal(n), 0.0, None)
    comments = np.clip(cfg.comments_mean + 0.9 * rng.standard_normal(n), 0.0, None)
    users = {i: UserFeatures(i, int(gender[i]), float(age[i]), float(photos[i]), float(comments[i]))
             for i in range(n)}
    dz = _zscore(np.c_[gender, age, photos, comments].astype(float))

    g0 = cfg.gamma0 if cfg.gamma0 is not None else _calibrate_gamma0(xi, dz, cfg.gamma_x, cfg.mean_degree, rng)
    edges = []
    block = 256
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        P = expit(g0 + _edge_logits_rows(i0, i1, xi, dz, cfg.gamma_x))
        U = rng.random(P.shape)
        hit = U < P
        rows, cols = np.nonzero(hit)
        rows = rows + i0
        keep = cols > rows
        edges.extend(zip(rows[keep].tolist(), cols[keep].tolist()))
    graph = Graph.from_edges(edges, nodes=range(n))
    mean_deg = 2 * len(edges) / n
    if mean_deg < 1:
        log.warning("population mean degree %.3f is below 1", mean_deg)

    # games: each has a direction in latent space along which activity rises
    game_dir = rng.standard_normal((cfg.n_games, 2))
    game_dir /= np.linalg.norm(game_dir, axis=1, keepdims=True)
    logits = cfg.activity_base + cfg.activity_weight * xi @ game_dir.T  # (n, games)
    days = len(ACTIVITY_DAYS)
    draws = rng.random((n, cfg.n_games, days)) < expit(logits)[:, :, None]
    events = [(int(u), int(gm), int(ACTIVITY_DAYS[d])) for u, gm, d in zip(*np.nonzero(draws))]
    act_any = draws.any(axis=2)
    activity = {u: frozenset(np.nonzero(act_any[u])[0].tolist()) for u in range(n) if act_any[u].any()}

    # day-7 installs of a target game: peer exposure plus latent position
    peer = np.zeros(n)
    for u in range(n):
        nb = graph.neighbors(u)
        if nb:
            peer[u] = max(np.mean([act_any[v, gm] for v in nb]) for gm in range(cfg.n_games))
    install_dir = rng.standard_normal(2)
    install_dir /= np.linalg.norm(install_dir)
    lin = cfg.install_peer_weight * peer + cfg.install_coord_weight * (xi @ install_dir)
    c0 = brentq(lambda c: float(np.mean(expit(c + lin))) - cfg.install_rate, -60.0, 60.0, xtol=1e-10)
    installs = (rng.random(n) < expit(c0 + lin)).astype(int)

    return Population(
        graph, users, {i: (float(xi[i, 0]), float(xi[i, 1])) for i in range(n)},
        activity, events, {i: int(installs[i]) for i in range(n)}, float(g0), cfg,
    )


# -- bundle I/O -------------------------------------------------------------

def write_population(pop: Population, out_dir: str | Path, manifest_extra: Mapping | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edge_list(pop.graph, out / "edges.txt")
    write_users_csv(pop.users, out / "users.csv")
    with open(out / "coords_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "xi1", "xi2"])
        for i in sorted(pop.coords):
            a, b = pop.coords[i]
            w.writerow([i, f"{a:.6g}", f"{b:.6g}"])
    write_activity_csv(pop.events, out / "activity.csv")
    with open(out / "installs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "install"])
        for i in sorted(pop.installs):
            w.writerow([i, pop.installs[i]])
    doc = {"config": asdict(pop.config), "gamma0": float(f"{pop.gamma0:.6g}"),
           "seed": pop.config.seed, "nEdges": len(pop.graph.edges)}
    if manifest_extra:
        doc.update(manifest_extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_population(in_dir: str | Path) -> Population:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        doc = json.load(fh)
    cfg = PopulationConfig(**doc["config"])
    users = read_users_csv(src / "users.csv")
    graph = read_edge_list(src / "edges.txt")
    graph = Graph.from_edges(graph.edges, nodes=set(graph.nodes) | set(users))
    with open(src / "coords_truth.csv", newline="") as fh:
        coords = {int(r["id"]): (float(r["xi1"]), float(r["xi2"])) for r in csv.DictReader(fh)}
    activity = read_activity_csv(src / "activity.csv")
    with open(src / "activity.csv", newline="") as fh:
        events = [(int(r["id"]), int(r["game"]), int(r["day"])) for r in csv.DictReader(fh)]
    with open(src / "installs.csv", newline="") as fh:
        installs = {int(r["id"]): int(r["install"]) for r in csv.DictReader(fh)}
    return Population(graph, users, coords, activity, events, installs, float(doc["gamma0"]), cfg)


def scenario_label(pair: Sequence[float]) -> str:
    a, b = pair
    return f"({a:g},{b:g})"


def expected_degree(pop: Population) -> float:
    return 2 * len(pop.graph.edges) / max(1, len(pop.graph.nodes))


def within_between_density(pop: Population, labels: Mapping[int, int]) -> tuple[float, float]:
    """Edge density inside and across the given groups."""
    nodes = sorted(pop.graph.nodes)
    lab = np.array([labels[v] for v in nodes])
    counts = np.bincount(lab)
    within_pairs = float(np.sum(counts * (counts - 1) / 2))
    total_pairs = len(nodes) * (len(nodes) - 1) / 2
    within_edges = sum(1 for u, v in pop.graph.edges if labels[u] == labels[v])
    between_edges = len(pop.graph.edges) - within_edges
    between_pairs = total_pairs - within_pairs
    return (within_edges / within_pairs if within_pairs else math.nan,
            between_edges / between_pairs if between_pairs else math.nan)
