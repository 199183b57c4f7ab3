"""End-to-end stages: sampling, proxies, designs, simulation sweeps and bias records.

Every stage takes explicit seeds derived from one global seed with
:func:`derive_seed`, so stages can be rerun independently and results do not
depend on execution order or worker count.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .agglo import AggloParams, SubsetData, cluster_subsets, ridge_fit
from .biasstat import (BiasReport, UndefinedEffectError, crossval, make_report, make_splits, peer_effect,
                       welch_t)
from .community import community_columns, detect_communities
from .embed import EmbedConfig, fit_embedding
from .errors import DegenerateDataError
from .features import DEFAULT_COLUMNS, FeatureSchema, attach_peer, build_design, design_matrix
from .graphcore import Graph, Snowball, extract_snowball, filter_snowballs, make_snowball
from .hblr import HierPrior, McmcSchedule, sample_hier_many
from .simgen import (SCENARIO_GRID, Population, PopulationConfig, fit_generating_per_snowball,
                     make_generating_coeffs, scenario_label, simulate_responses)

log = logging.getLogger(__name__)

VARIANT_PROXY = {"true": "global", "naive": "none", "latent": "local", "comm": "community"}
HIER_VARIANTS = ("true", "naive", "latent", "comm")
# localized coordinates change with cluster membership, so the clustered
# model is only compared with community membership
AGGLO_VARIANTS = ("true", "naive", "comm")
MODEL_VARIANTS = {"hier": HIER_VARIANTS, "agglo": AGGLO_VARIANTS}
MODEL_PROXIES = {"hier": ("latent", "comm"), "agglo": ("comm",)}


def derive_seed(global_seed: int, stage: str, *index) -> int:
    """Child seed from ``(global_seed, stage, index...)`` via SHA-256."""
    key = "|".join([str(int(global_seed)), stage, *(str(i) for i in index)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class ScaleConfig:
    name: str = "desk"
    n_samples: int = 12
    snowballs_per_sample: int = 10
    size_min: int = 30
    size_max: int = 150
    min_active_frac: float = 0.15
    mcmc_draws: int = 20_000
    mcmc_thin: int = 5
    mcmc_burnin: int = 10_000
    n_partitions: int = 100
    cv_splits: int = 50
    cv_frac: float = 0.1
    cv_samples: int = 4
    embed_restarts: int = 2
    population: PopulationConfig = field(default_factory=PopulationConfig)

    @classmethod
    def preset(cls, name: str) -> "ScaleConfig":
        if name == "desk":
            return cls()
        if name == "smoke":
            # whole pipeline in well under a minute; for trying the CLI and for tests
            return cls(name="smoke", n_samples=2, snowballs_per_sample=3, size_min=15, size_max=80,
                       mcmc_draws=1500, mcmc_thin=5, mcmc_burnin=500, n_partitions=10, cv_splits=5,
                       cv_samples=1, embed_restarts=1, population=PopulationConfig(n_users=1000))
        if name == "paper":
            return cls(name="paper", size_max=1000, mcmc_draws=400_000, mcmc_burnin=200_000,
                       embed_restarts=5, population=PopulationConfig(n_users=20_000))
        raise ValueError(f"unknown scale {name!r}")

    def schedule(self, seed: int) -> McmcSchedule:
        return McmcSchedule(self.mcmc_draws, self.mcmc_thin, self.mcmc_burnin, seed=seed)


# -- sampling ---------------------------------------------------------------

def sample_snowballs(pop: Population, scale: ScaleConfig, seed: int) -> list[list[Snowball]]:
    """Draw samples of snowballs seeded at installers.

    A candidate is kept when its two-hop snowball size is in range, at least
    the configured fraction of members has nonzero peer influence, and it has
    at least two installers and two non-installers. Each seed is used at most
    once overall; snowballs in a sample may share members.
    """
    rng = np.random.default_rng(seed)
    installers = sorted(u for u, v in pop.installs.items() if v)
    order = [installers[i] for i in rng.permutation(len(installers))]
    cache: dict[int, Snowball | None] = {}

    def candidate(c: int) -> Snowball | None:
        if c not in cache:
            cache[c] = None
            members = extract_snowball(pop.graph, c, 2)
            if scale.size_min <= len(members) <= scale.size_max:
                s = attach_peer(make_snowball(pop.graph, c, pop.installs), pop.activity, pop.games)
                ones = sum(s.installs.values())
                if filter_snowballs([s], scale.min_active_frac) and min(ones, s.size - ones) >= 2:
                    cache[c] = s
        return cache[c]

    used: set[int] = set()
    samples = []
    for _ in range(scale.n_samples):
        sample: list[Snowball] = []
        for c in order:
            if len(sample) == scale.snowballs_per_sample:
                break
            if c in used:
                continue
            s = candidate(c)
            if s is None:
                continue
            sample.append(s)
            used.add(c)
        if len(sample) < scale.snowballs_per_sample:
            raise DegenerateDataError(
                f"ran out of seed candidates after {len(samples)} full samples")
        samples.append(sample)
    return samples


def snowball_graph(s: Snowball) -> Graph:
    return Graph.from_edges(s.edges, nodes=s.members)


# -- proxies ----------------------------------------------------------------

def global_coords(pop: Population, sample: Sequence[Snowball], mode: str = "generator",
                  cfg: EmbedConfig | None = None) -> dict[int, tuple[float, float]]:
    """Ground-truth coordinates: the generator's, or a refit on the sample's union graph."""
    members = sorted({m for s in sample for m in s.members})
    if mode == "generator":
        return {m: pop.coords[m] for m in members}
    if mode == "refit":
        e = fit_embedding(pop.graph.subgraph(members), pop.users, cfg or EmbedConfig())
        return e.coords
    raise ValueError(f"unknown ground-truth mode {mode!r}")


def local_coords(pop: Population, s: Snowball, cfg: EmbedConfig) -> dict[int, tuple[float, float]]:
    return fit_embedding(snowball_graph(s), pop.users, cfg).coords


def _local_job(args):
    pop, s, cfg = args
    return local_coords(pop, s, cfg)


def community_proxy(s: Snowball) -> dict[int, tuple[float, ...]]:
    return community_columns(detect_communities(snowball_graph(s)), 2)


@dataclass
class SampleProxies:
    global_: dict[int, tuple[float, float]]
    local: list[dict[int, tuple[float, float]]]  # per snowball
    community: list[dict[int, tuple[float, ...]]]


def compute_proxies(pop: Population, samples: Sequence[Sequence[Snowball]], scale: ScaleConfig,
                    global_seed: int, truth: str = "generator", workers: int = 1) -> list[SampleProxies]:
    jobs = []
    for i, sample in enumerate(samples):
        for s in sample:
            cfg = EmbedConfig(restarts=scale.embed_restarts, seed=derive_seed(global_seed, "embed-local", i, s.id))
            jobs.append((pop, s, cfg))
    local = map_jobs(_local_job, jobs, workers)
    out = []
    k = 0
    for i, sample in enumerate(samples):
        gcfg = EmbedConfig(restarts=scale.embed_restarts, seed=derive_seed(global_seed, "embed-global", i))
        loc = local[k:k + len(sample)]
        k += len(sample)
        out.append(SampleProxies(global_coords(pop, sample, truth, gcfg), loc,
                                 [community_proxy(s) for s in sample]))
    return out


def map_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# -- designs ----------------------------------------------------------------

@dataclass
class SampleDesigns:
    """Standardized design matrices per variant for one sample's snowballs."""
    snowball_ids: list[int]
    X: dict[str, list[np.ndarray]]
    y: list[np.ndarray]  # observed installs
    schema: FeatureSchema

    def peer_index(self, variant: str) -> int:
        return self.schema.peer_index(VARIANT_PROXY[variant])


def build_sample_designs(pop: Population, sample: Sequence[Snowball], proxies: SampleProxies,
                         schema: FeatureSchema = FeatureSchema(DEFAULT_COLUMNS)) -> SampleDesigns:
    """Design matrices for every variant.

    Demographic and friend-derived columns are z-scored with moments pooled
    over the sample. Peer influence stays on its natural 0-1 scale so its
    coefficient keeps its meaning. Latent coordinates are only defined up to
    translation, so they are centred on their pooled mean but not rescaled;
    community indicators are left as they are.
    """
    X: dict[str, list[np.ndarray]] = {}
    y = None
    for variant, proxy in VARIANT_PROXY.items():
        mats, ys = [], []
        for j, s in enumerate(sample):
            pv = {"global": proxies.global_, "local": proxies.local[j],
                  "community": proxies.community[j], "none": None}[proxy]
            Xs, ys_ = design_matrix(build_design(s, schema, proxy, pv, pop.users))
            mats.append(Xs)
            ys.append(ys_.astype(float))
        cols = schema.active_columns(proxy)
        skip = {schema.peer_column, *schema.homophily_columns}
        idx = [i for i, c in enumerate(cols) if c not in skip]
        X[variant] = _standardize(mats, idx)
        if proxy in ("global", "local"):
            X[variant] = _center(X[variant], list(schema.homophily_indices(proxy)))
        y = ys
    return SampleDesigns([s.id for s in sample], X, y, schema)


def _center(mats, idx):
    mu = np.vstack(mats)[:, idx].mean(axis=0)
    out = []
    for m in mats:
        m = m.copy()
        m[:, idx] -= mu
        out.append(m)
    return out


def _standardize(mats, idx):
    pooled = np.vstack(mats)
    mu = pooled[:, idx].mean(axis=0)
    sd = pooled[:, idx].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = []
    for m in mats:
        m = m.copy()
        m[:, idx] = (m[:, idx] - mu) / sd
        out.append(m)
    return out


# -- model fits -------------------------------------------------------------

def hier_fit_many(problems: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]], seeds: Sequence[int],
                  scale: ScaleConfig) -> list[np.ndarray]:
    """Posterior-mean subset coefficients for many independent problems of one width."""
    if not problems:
        return []
    dim = problems[0][0][0].shape[1] + 1
    prior = HierPrior.default(dim)
    posts = sample_hier_many(problems, prior, [scale.schedule(s) for s in seeds], keep_beta_draws=False)
    return [p.beta_mean for p in posts]


def agglo_fit(units: Sequence[tuple[np.ndarray, np.ndarray]], ids: Sequence[int], seed: int,
              scale: ScaleConfig) -> tuple[list[np.ndarray], list[list[int]]]:
    """Cluster the snowballs; each adopts its cluster's ridge coefficients.

    When the pooled responses lack two rows of a class nothing can be fit;
    every snowball then gets NaN coefficients and its bias is undefined.
    """
    subsets = [SubsetData(X, y, (i,)) for (X, y), i in zip(units, ids)]
    try:
        res = cluster_subsets(subsets, AggloParams(n_partitions=scale.n_partitions), seed)
    except DegenerateDataError as exc:
        log.warning("clustered fit skipped: %s", exc)
        dim = units[0][0].shape[1] + 1
        return [np.full(dim, np.nan) for _ in ids], []
    return [res.coefficients_for(i) for i in ids], res.clusters


def _agglo_job(args):
    units, ids, seed, scale = args
    return agglo_fit(units, ids, seed, scale)


def generating_betas(model: str, d: SampleDesigns, seed: int, scale: ScaleConfig) -> list[np.ndarray]:
    """Coefficients fitted on the ground-truth design with observed installs."""
    units = list(zip(d.X["true"], d.y))
    if model == "hier":
        return hier_fit_many([units], [seed], scale)[0]
    if model == "agglo":
        return [fit_generating_per_snowball(X, y) for X, y in units]
    raise ValueError(f"unknown model {model!r}")


# -- effects and bias -------------------------------------------------------

def effect_or_none(beta, X, peer_index) -> float | None:
    if not np.all(np.isfinite(beta)):
        return None
    try:
        return peer_effect(beta, X, peer_index)
    except UndefinedEffectError:
        return None


def bias_reports(model: str, d: SampleDesigns, betas: Mapping[str, Sequence[np.ndarray]],
                 sample: int, scenario: str) -> list[BiasReport]:
    out = []
    for j, sid in enumerate(d.snowball_ids):
        pi = {v: effect_or_none(betas[v][j], d.X[v][j], d.peer_index(v)) for v in betas}
        out.append(make_report(sid, pi, MODEL_PROXIES[model], sample=sample,
                               scenario=scenario, model=model))
    return out


@dataclass
class SweepResult:
    reports: list[BiasReport]
    responses: dict  # (model, scenario_idx, sample) -> list of y arrays
    coefficients: dict  # (model, scenario_idx, sample, variant) -> list of beta
    clusters: dict  # (scenario_idx, sample, variant) -> clusters
    generating: dict  # (model, sample) -> list of beta


def simulate_sweep(designs: Sequence[SampleDesigns], scenarios: Sequence[int], global_seed: int,
                   scale: ScaleConfig, models: Sequence[str] = ("hier", "agglo"),
                   workers: int = 1) -> SweepResult:
    """Regenerate installs for each scenario and sample, refit every variant, record biases."""
    responses, coefs, clusters, gen = {}, {}, {}, {}
    for model in models:
        for i, d in enumerate(designs):
            gen[model, i] = generating_betas(model, d, derive_seed(global_seed, "generate", model, i), scale)
            for k in scenarios:
                pair = SCENARIO_GRID[k]
                ys = []
                for j, X in enumerate(d.X["true"]):
                    g = make_generating_coeffs(gen[model, i][j], pair, d.schema)
                    ys.append(simulate_responses(X, g, derive_seed(global_seed, "simulate", model, k, i, j))
                              .astype(float))
                responses[model, k, i] = ys

    if "hier" in models:
        for v in HIER_VARIANTS:
            keys = [(k, i) for k in scenarios for i in range(len(designs))]
            problems = [list(zip(designs[i].X[v], responses["hier", k, i])) for k, i in keys]
            seeds = [derive_seed(global_seed, "hier", v, k, i) for k, i in keys]
            for (k, i), b in zip(keys, hier_fit_many(problems, seeds, scale)):
                coefs["hier", k, i, v] = list(b)

    if "agglo" in models:
        keys = [(k, i, v) for k in scenarios for i in range(len(designs)) for v in AGGLO_VARIANTS]
        jobs = [(list(zip(designs[i].X[v], responses["agglo", k, i])), designs[i].snowball_ids,
                 derive_seed(global_seed, "agglo", v, k, i), scale) for k, i, v in keys]
        for (k, i, v), (b, cl) in zip(keys, map_jobs(_agglo_job, jobs, workers)):
            coefs["agglo", k, i, v] = b
            clusters[k, i, v] = cl

    reports = []
    for model in models:
        for k in scenarios:
            for i, d in enumerate(designs):
                betas = {v: coefs[model, k, i, v] for v in MODEL_VARIANTS[model]}
                reports.extend(bias_reports(model, d, betas, i, scenario_label(SCENARIO_GRID[k])))
    return SweepResult(reports, responses, coefs, clusters, gen)


def observed_fits(designs: Sequence[SampleDesigns], model: str, variants: Sequence[str], global_seed: int,
                  scale: ScaleConfig, workers: int = 1) -> dict:
    """Fit each variant on observed installs; ``(sample, variant) -> betas``."""
    out = {}
    if model == "hier":
        for v in variants:
            problems = [list(zip(d.X[v], d.y)) for d in designs]
            seeds = [derive_seed(global_seed, "observed-hier", v, i) for i in range(len(designs))]
            for i, b in enumerate(hier_fit_many(problems, seeds, scale)):
                out[i, v] = list(b)
    elif model == "agglo":
        keys = [(i, v) for i in range(len(designs)) for v in variants]
        jobs = [(list(zip(designs[i].X[v], designs[i].y)), designs[i].snowball_ids,
                 derive_seed(global_seed, "observed-agglo", v, i), scale) for i, v in keys]
        for key, (b, _) in zip(keys, map_jobs(_agglo_job, jobs, workers)):
            out[key] = b
    else:
        raise ValueError(f"unknown model {model!r}")
    return out


def observed_reports(designs: Sequence[SampleDesigns], model: str, fits: Mapping) -> list[BiasReport]:
    reps = []
    for i, d in enumerate(designs):
        betas = {v: fits[i, v] for v in MODEL_VARIANTS[model] if (i, v) in fits}
        if set(betas) != set(MODEL_VARIANTS[model]):
            continue
        reps.extend(bias_reports(model, d, betas, i, "observed"))
    return reps


def with_population(scale: ScaleConfig, **changes) -> ScaleConfig:
    return replace(scale, population=replace(scale.population, **changes))


# -- cross-validation -------------------------------------------------------

@dataclass
class CrossvalResult:
    sample: int
    hier_scores: np.ndarray  # per split
    agglo_scores: np.ndarray
    clusters: list[list[int]]

    @property
    def hier_median(self) -> float:
        return float(np.nanmedian(self.hier_scores))

    @property
    def agglo_median(self) -> float:
        return float(np.nanmedian(self.agglo_scores))

    def welch(self) -> tuple[float, float, float]:
        a = self.hier_scores[~np.isnan(self.hier_scores)]
        b = self.agglo_scores[~np.isnan(self.agglo_scores)]
        return welch_t(a, b)


def crossval_sample(d: SampleDesigns, sample: int, global_seed: int, scale: ScaleConfig,
                    variant: str = "true") -> CrossvalResult:
    """Score both models on the same 90/10 splits of one sample.

    The hierarchical model is refit on every split. Agglomerative clusters
    come from one full-data run; per split only the cluster coefficients are
    refit, and the held-out rows of a cluster are those of its members.
    """
    units = list(zip(d.X[variant], d.y))
    splits = make_splits([len(y) for _, y in units], scale.cv_splits, scale.cv_frac,
                         derive_seed(global_seed, "cv-splits", sample))

    def hier_refit(trains):
        seeds = [derive_seed(global_seed, "cv-hier", sample, k) for k in range(len(trains))]
        return hier_fit_many(trains, seeds, scale)

    _, hier_scores = crossval(units, hier_refit, splits=splits)

    _, clusters = agglo_fit(units, d.snowball_ids, derive_seed(global_seed, "cv-agglo", sample), scale)
    pos = {sid: j for j, sid in enumerate(d.snowball_ids)}
    c_units, c_splits = [], [[] for _ in splits]
    for ids in clusters:
        js = [pos[i] for i in ids]
        offs = np.cumsum([0] + [len(units[j][1]) for j in js])
        c_units.append((np.vstack([units[j][0] for j in js]), np.concatenate([units[j][1] for j in js])))
        for k, held in enumerate(splits):
            c_splits[k].append(np.concatenate([held[j] + offs[n] for n, j in enumerate(js)]))

    def agglo_refit(trains):
        return [[ridge_fit(SubsetData(X, y, (0,))).coefficients for X, y in train] for train in trains]

    _, agglo_scores = crossval(c_units, agglo_refit, splits=c_splits)
    return CrossvalResult(sample, hier_scores, agglo_scores, clusters)
