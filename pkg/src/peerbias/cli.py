"""Command-line driver.

Each subcommand is one pipeline stage. A stage reads the artifacts of earlier
stages from the run directory, writes its own into a fresh directory next to
the final location and renames it into place only on success, so a failed
stage leaves nothing behind. Every stage directory has a ``manifest.json``
recording the command, configuration, global seed and package version.

Layout of a run directory::

    population/                 gen
    snowballs/                  snowball
    embed/global, embed/local/  embed --scope
    communities/                communities
    fit/<model>/<variant>/      fit
    simulate/scenario_*/        simulate
    bias/ signtest/ crossval/   bias, signtest, crossval
    report/                     report

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .biasstat import (BiasReport, histogram, improvement_counts, read_bias_csv, sign_test,
                       write_bias_csv, write_histogram_csv)
from .community import Partition, community_columns, detect_communities, write_partition
from .embed import EmbedConfig, fit_embedding, read_coords, write_embedding
from .errors import DataError, NumericError, PeerBiasError
from .graphcore import Snowball
from .pipeline import (MODEL_PROXIES, MODEL_VARIANTS, VARIANT_PROXY,
                       SampleProxies, ScaleConfig, map_jobs, agglo_fit, bias_reports, build_sample_designs,
                       crossval_sample, derive_seed, global_coords, hier_fit_many, sample_snowballs,
                       simulate_sweep, snowball_graph)
from .simgen import SCENARIO_GRID, generate_population, parse_pair, read_population, scenario_label, write_population

log = logging.getLogger("peerbias")

ENV_OUT = "PEERBIAS_OUT"
DEFAULT_OUT = "peerbias-run"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
PROXY_VARIANT = {p: v for v, p in VARIANT_PROXY.items()}
CV_ALPHA = 0.01
HIST_EDGES = [float(x) for x in range(-300, 301, 25)]
SCALES = ("desk", "paper", "smoke")


class MissingArtifactError(DataError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))


@dataclass
class RunConfig:
    command: str
    out: Path
    seed: int = 0
    scale: str = "desk"
    workers: int = 1
    truth: str = "generator"
    params: dict = field(default_factory=dict)

    @property
    def scale_config(self) -> ScaleConfig:
        sc = ScaleConfig.preset(self.scale)
        return replace(sc, population=replace(sc.population, seed=self.seed))

    def manifest(self, **extra) -> dict:
        # the output root and worker count do not affect results, so they are
        # left out to keep manifests identical across machines
        doc = {"command": self.command, "seed": self.seed, "version": __version__,
               "config": {"scale": self.scale, "truth": self.truth, **self.params,
                          "scaleConfig": _jsonable(asdict(self.scale_config))}}
        doc.update(extra)
        return doc


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float):
        return float(f"{x:.6g}")
    return x


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _exact(x: float) -> str:
    # coefficients are read back by later stages, so they keep full precision
    return repr(float(x))


def write_json(doc, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


@contextmanager
def stage_dir(final: Path):
    """Directory that replaces ``final`` only if the block succeeds."""
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def finish(d: Path, cfg: RunConfig, **extra) -> None:
    files = sorted(str(p.relative_to(d)) for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")
    write_json(cfg.manifest(artifacts=files, **extra), d / "manifest.json")


def require(run: Path, *parts: str) -> None:
    missing = [p for p in parts if not (run / p / "manifest.json").exists()]
    if missing:
        raise MissingArtifactError(missing)


# -- loading earlier stages -------------------------------------------------

def load_samples(run: Path) -> list[list[Snowball]]:
    require(run, "snowballs")
    with open(run / "snowballs" / "manifest.json") as fh:
        n = json.load(fh)["numSamples"]
    out = []
    for i in range(n):
        with open(run / "snowballs" / f"sample_{i:02d}.json") as fh:
            out.append([Snowball.from_json(doc) for doc in json.load(fh)])
    return out


def load_proxies(run: Path, samples) -> list[SampleProxies]:
    require(run, "embed/global", "embed/local", "communities")
    out = []
    for i, sample in enumerate(samples):
        glob = read_coords(run / "embed" / "global" / f"sample_{i:02d}.csv")
        local = [read_coords(run / "embed" / "local" / f"sample_{i:02d}" / f"snowball_{s.id}.csv") for s in sample]
        comm = []
        for s in sample:
            with open(run / "communities" / f"sample_{i:02d}" / f"snowball_{s.id}.csv", newline="") as fh:
                membership = {int(r["id"]): int(r["community"]) for r in csv.DictReader(fh)}
            comm.append(community_columns(Partition(membership, float("nan")), 2))
        out.append(SampleProxies(glob, local, comm))
    return out


def load_designs(run: Path):
    require(run, "population")
    pop = read_population(run / "population")
    samples = load_samples(run)
    proxies = load_proxies(run, samples)
    return [build_sample_designs(pop, s, p) for s, p in zip(samples, proxies)]


def write_coefficients(rows, path: Path) -> None:
    """Rows of ``(model, scenario, sample, snowball, variant, beta)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scenario", "sample", "snowball", "variant", "index", "value"])
        for model, scen, i, sid, v, beta in rows:
            for j, b in enumerate(beta):
                w.writerow([model, scen, i, sid, v, j, _exact(b)])


def read_coefficients(path: Path) -> dict:
    """``(model, scenario, sample, variant) -> {snowball: beta}``."""
    acc: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["model"], r["scenario"], int(r["sample"]), r["variant"])
            acc.setdefault(key, {}).setdefault(int(r["snowball"]), []).append((int(r["index"]), float(r["value"])))
    return {k: {sid: np.array([v for _, v in sorted(vals)]) for sid, vals in d.items()} for k, d in acc.items()}


# -- stages -----------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> None:
    pop = generate_population(cfg.scale_config.population)
    with stage_dir(cfg.out / "population") as d:
        write_population(pop, d)
        # the bundle manifest keeps the population config under "config", as
        # the bundle reader expects; the run settings sit beside it
        with open(d / "manifest.json") as fh:
            bundle = json.load(fh)
        run = cfg.manifest()
        files = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
        write_json({**bundle, "command": run["command"], "version": run["version"], "run": run["config"],
                    "artifacts": files}, d / "manifest.json")


def cmd_snowball(cfg: RunConfig) -> None:
    require(cfg.out, "population")
    pop = read_population(cfg.out / "population")
    samples = sample_snowballs(pop, cfg.scale_config, derive_seed(cfg.seed, "snowball"))
    with stage_dir(cfg.out / "snowballs") as d:
        rows = []
        for i, sample in enumerate(samples):
            with open(d / f"sample_{i:02d}.json", "w") as fh:
                json.dump([s.to_json() for s in sample], fh, separators=(",", ":"))
            rows += [[i, s.id, s.size, sum(s.installs.values())] for s in sample]
        with open(d / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "snowball", "size", "installs"])
            w.writerows(rows)
        finish(d, cfg, numSamples=len(samples))


def _local_embed_job(args):
    s, users, cfg = args
    return fit_embedding(snowball_graph(s), users, cfg)


def cmd_embed(cfg: RunConfig) -> None:
    scope = cfg.params["scope"]
    require(cfg.out, "population")
    pop = read_population(cfg.out / "population")
    samples = load_samples(cfg.out)
    sc = cfg.scale_config
    with stage_dir(cfg.out / "embed" / scope) as d:
        if scope == "global":
            for i, sample in enumerate(samples):
                ecfg = EmbedConfig(restarts=sc.embed_restarts, seed=derive_seed(cfg.seed, "embed-global", i))
                coords = global_coords(pop, sample, cfg.truth, ecfg)
                with open(d / f"sample_{i:02d}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["id", "xi1", "xi2"])
                    for m in sorted(coords):
                        w.writerow([m, _fmt(coords[m][0]), _fmt(coords[m][1])])
        else:
            jobs, where = [], []
            for i, sample in enumerate(samples):
                (d / f"sample_{i:02d}").mkdir()
                for s in sample:
                    ecfg = EmbedConfig(restarts=sc.embed_restarts, seed=derive_seed(cfg.seed, "embed-local", i, s.id))
                    jobs.append((s, pop.users, ecfg))
                    where.append(d / f"sample_{i:02d}" / f"snowball_{s.id}")
            for e, base in zip(map_jobs(_local_embed_job, jobs, cfg.workers), where):
                write_embedding(e, base.with_suffix(".csv"), base.with_suffix(".json"))
        finish(d, cfg)


def cmd_communities(cfg: RunConfig) -> None:
    samples = load_samples(cfg.out)
    with stage_dir(cfg.out / "communities") as d:
        for i, sample in enumerate(samples):
            (d / f"sample_{i:02d}").mkdir()
            for s in sample:
                base = d / f"sample_{i:02d}" / f"snowball_{s.id}"
                write_partition(detect_communities(snowball_graph(s)), base.with_suffix(".csv"),
                                base.with_suffix(".json"))
        finish(d, cfg)


def cmd_fit(cfg: RunConfig) -> None:
    model = cfg.params["model"]
    proxies = cfg.params["proxy"]
    variants = MODEL_VARIANTS[model] if proxies == "all" else (PROXY_VARIANT[proxies],)
    bad = [v for v in variants if v not in MODEL_VARIANTS[model]]
    if bad:
        raise DataError(f"model {model} does not use proxy {VARIANT_PROXY[bad[0]]}")
    designs = load_designs(cfg.out)
    sc = cfg.scale_config
    for v in variants:
        units = [list(zip(d.X[v], d.y)) for d in designs]
        clusters = {}
        if model == "hier":
            seeds = [derive_seed(cfg.seed, "observed-hier", v, i) for i in range(len(designs))]
            betas = hier_fit_many(units, seeds, sc)
        else:
            betas = []
            for i, (u, d) in enumerate(zip(units, designs)):
                b, cl = agglo_fit(u, d.snowball_ids, derive_seed(cfg.seed, "observed-agglo", v, i), sc)
                betas.append(b)
                clusters[i] = cl
        with stage_dir(cfg.out / "fit" / model / v) as out:
            rows = [(model, "observed", i, sid, v, b)
                    for i, d in enumerate(designs) for sid, b in zip(d.snowball_ids, betas[i])]
            write_coefficients(rows, out / "coefficients.csv")
            if clusters:
                write_json({f"sample_{i:02d}": c for i, c in clusters.items()}, out / "clusters.json")
            finish(out, replace(cfg, params={"model": model, "proxy": VARIANT_PROXY[v]}),
                   variant=v, columns=designs[0].schema.active_columns(VARIANT_PROXY[v]))


def _scenario_dir(k: int) -> str:
    a, b = SCENARIO_GRID[k]
    return f"scenario_{a:g}_{b:g}"


def cmd_simulate(cfg: RunConfig) -> None:
    which = cfg.params["scenario"]
    if which == "all":
        scen = list(range(len(SCENARIO_GRID)))
    else:
        pair = parse_pair(which)
        matches = [k for k, p in enumerate(SCENARIO_GRID) if tuple(p) == tuple(pair)]
        if not matches:
            raise DataError(f"scenario {which} is not in the grid")
        scen = matches
    models = ("hier", "agglo") if cfg.params["model"] == "both" else (cfg.params["model"],)
    designs = load_designs(cfg.out)
    res = simulate_sweep(designs, scen, cfg.seed, cfg.scale_config, models, cfg.workers)
    with stage_dir(cfg.out / "simulate") as d:
        gen_rows = [(m, "generating", i, sid, "true", b) for (m, i), bs in sorted(res.generating.items())
                    for sid, b in zip(designs[i].snowball_ids, bs)]
        write_coefficients(gen_rows, d / "generating.csv")
        for k in scen:
            sd = d / _scenario_dir(k)
            sd.mkdir()
            label = scenario_label(SCENARIO_GRID[k])
            rows = []
            for (m, kk, i, v), bs in sorted(res.coefficients.items()):
                if kk == k:
                    rows += [(m, label, i, sid, v, b) for sid, b in zip(designs[i].snowball_ids, bs)]
            write_coefficients(rows, sd / "coefficients.csv")
            with open(sd / "responses.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["model", "sample", "snowball", "row", "install"])
                for m in models:
                    for i, dz in enumerate(designs):
                        for sid, y in zip(dz.snowball_ids, res.responses[m, k, i]):
                            w.writerows([m, i, sid, r, int(v)] for r, v in enumerate(y))
            if "agglo" in models:
                write_json({f"sample_{i:02d}/{v}": c for (kk, i, v), c in sorted(res.clusters.items()) if kk == k},
                           sd / "clusters.json")
        finish(d, cfg, scenarios=[scenario_label(SCENARIO_GRID[k]) for k in scen], models=list(models))


def _reports_from(coefs: dict, designs, scenario: str) -> list[BiasReport]:
    reps = []
    for model in ("hier", "agglo"):
        for i, d in enumerate(designs):
            betas = {}
            for v in MODEL_VARIANTS[model]:
                got = coefs.get((model, scenario, i, v))
                if got is None:
                    break
                betas[v] = [got[sid] for sid in d.snowball_ids]
            else:
                reps += bias_reports(model, d, betas, i, scenario)
    return reps


def cmd_bias(cfg: RunConfig) -> None:
    run = cfg.out
    have_sim = (run / "simulate" / "manifest.json").exists()
    fits = {m: [v for v in MODEL_VARIANTS[m] if (run / "fit" / m / v / "manifest.json").exists()]
            for m in ("hier", "agglo")}
    have_obs = any(len(fits[m]) == len(MODEL_VARIANTS[m]) for m in fits)
    if not have_sim and not have_obs:
        raise MissingArtifactError(["simulate", "fit/<model>/<variant> (all variants of one model)"])
    designs = load_designs(run)
    with stage_dir(run / "bias") as d:
        counts = {}
        if have_sim:
            with open(run / "simulate" / "manifest.json") as fh:
                labels = json.load(fh)["scenarios"]
            sim = []
            for label in labels:
                k = [scenario_label(p) for p in SCENARIO_GRID].index(label)
                coefs = read_coefficients(run / "simulate" / _scenario_dir(k) / "coefficients.csv")
                sim += _reports_from(coefs, designs, label)
            write_bias_csv(sim, d / "bias_simulated.csv")
            counts["simulated"] = len(sim)
        if have_obs:
            coefs = {}
            for m, vs in fits.items():
                if len(vs) == len(MODEL_VARIANTS[m]):
                    for v in vs:
                        coefs.update(read_coefficients(run / "fit" / m / v / "coefficients.csv"))
            obs = _reports_from(coefs, designs, "observed")
            write_bias_csv(obs, d / "bias_observed.csv")
            counts["observed"] = len(obs)
        finish(d, cfg, records=counts)


def _grouped(reports: Sequence[BiasReport]):
    """``(model, scenario) -> list of per-sample report lists`` in sample order."""
    out: dict = {}
    for r in reports:
        out.setdefault((r.model, r.scenario), {}).setdefault(r.sample, []).append(r)
    return {k: [v[i] for i in sorted(v)] for k, v in out.items()}


def _load_bias(run: Path) -> dict[str, list[BiasReport]]:
    require(run, "bias")
    out = {}
    for kind in ("simulated", "observed"):
        p = run / "bias" / f"bias_{kind}.csv"
        if p.exists():
            out[kind] = read_bias_csv(p)
    return out


def sign_tests(reports: Sequence[BiasReport], num_scenarios: int) -> list[dict]:
    out = []
    for (model, scen), samples in sorted(_grouped(reports).items(), key=lambda kv: _scenario_key(kv[0])):
        for proxy in MODEL_PROXIES[model]:
            flags, (k, n) = improvement_counts(samples, proxy)
            res = sign_test(flags, 0.05, num_scenarios)
            out.append({"model": model, "proxy": proxy, "scenario": scen, "improved": f"{k}/{n}",
                        **res.to_json()})
    return out


def _scenario_key(key):
    model, scen = key
    labels = [scenario_label(p) for p in SCENARIO_GRID]
    return (model != "hier", labels.index(scen) if scen in labels else -1)


def cmd_signtest(cfg: RunConfig) -> None:
    bias = _load_bias(cfg.out)
    doc = {}
    if "simulated" in bias:
        doc["simulated"] = sign_tests(bias["simulated"], len(SCENARIO_GRID))
    if "observed" in bias:
        doc["observed"] = sign_tests(bias["observed"], 1)
    with stage_dir(cfg.out / "signtest") as d:
        write_json(doc, d / "signtest.json")
        finish(d, cfg)


def cmd_crossval(cfg: RunConfig) -> None:
    designs = load_designs(cfg.out)
    sc = cfg.scale_config
    n = min(sc.cv_samples, len(designs))
    results = [crossval_sample(designs[i], i, cfg.seed, sc) for i in range(n)]
    with stage_dir(cfg.out / "crossval") as d:
        with open(d / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "split", "model", "score"])
            for r in results:
                for model, scores in (("hier", r.hier_scores), ("agglo", r.agglo_scores)):
                    w.writerows([r.sample, k, model, "" if np.isnan(s) else _fmt(s)] for k, s in enumerate(scores))
        doc = []
        for r in results:
            t, df, p = r.welch()
            doc.append({"sample": r.sample, "medianHier": float(_fmt(r.hier_median)),
                        "medianAgglo": float(_fmt(r.agglo_median)), "t": float(_fmt(t)), "df": float(_fmt(df)),
                        "p": float(_fmt(p)), "significant": bool(p <= CV_ALPHA), "clusters": r.clusters})
        write_json({"criticalLevel": CV_ALPHA, "samples": doc}, d / "crossval.json")
        finish(d, cfg)


def _median_abs(reports, variant, proxy) -> float | None:
    vals = [abs(r.bias[variant]) for r in reports if r.included and proxy in r.bias]
    return float(_fmt(float(np.median(vals)))) if vals else None


def summarize(bias: dict[str, list[BiasReport]]) -> dict:
    """Improvement ratios and median unsigned biases per model and proxy."""
    table = {}
    for model, proxies in MODEL_PROXIES.items():
        for proxy in proxies:
            row = {}
            for kind, reps in bias.items():
                mine = [r for r in reps if r.model == model]
                by_sample: dict = {}
                for r in mine:
                    by_sample.setdefault((r.scenario, r.sample), []).append(r)
                _, (k, n) = improvement_counts([by_sample[key] for key in sorted(by_sample)], proxy)
                excluded = sum(1 for r in mine if not r.included)
                row[kind] = {"improvementRatio": f"{k}/{n}", "records": len(mine), "excluded": excluded,
                             "medianAbsBiasProxy": _median_abs(mine, proxy, proxy),
                             "medianAbsBiasNaive": _median_abs(mine, "naive", proxy)}
            table[f"{model}+{proxy}"] = row
    return table


def cmd_report(cfg: RunConfig) -> None:
    bias = _load_bias(cfg.out)
    doc = {"table": summarize(bias)}
    if "simulated" in bias:
        doc["signTests"] = {"simulated": sign_tests(bias["simulated"], len(SCENARIO_GRID))}
    if "observed" in bias:
        doc.setdefault("signTests", {})["observed"] = sign_tests(bias["observed"], 1)
    cv = cfg.out / "crossval" / "crossval.json"
    if cv.exists():
        with open(cv) as fh:
            doc["crossval"] = json.load(fh)
    with stage_dir(cfg.out / "report") as d:
        write_json(doc, d / "summary.json")
        for kind, reps in bias.items():
            vals = {m: np.clip([r.bias["naive"] for r in reps if r.model == m and "naive" in r.bias],
                               HIST_EDGES[0], HIST_EDGES[-1]) for m in ("hier", "agglo")}
            write_histogram_csv(histogram(vals["hier"], vals["agglo"], HIST_EDGES), d / f"histogram_{kind}.csv")
        finish(d, cfg)
    print(format_table(doc["table"]))


def format_table(table: dict) -> str:
    lines = [f"{'model+proxy':<14} {'kind':<10} {'improved':>10} {'|bias| proxy (naive)':>24}"]
    for key, row in table.items():
        for kind, r in row.items():
            med = f"{r['medianAbsBiasProxy']} ({r['medianAbsBiasNaive']})"
            lines.append(f"{key:<14} {kind:<10} {r['improvementRatio']:>10} {med:>24}")
    return "\n".join(lines)


COMMANDS = {"gen": cmd_gen, "snowball": cmd_snowball, "embed": cmd_embed, "communities": cmd_communities,
            "fit": cmd_fit, "simulate": cmd_simulate, "bias": cmd_bias, "signtest": cmd_signtest,
            "crossval": cmd_crossval, "report": cmd_report}


# -- argument handling ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with a [peerbias] section; flags override it")
    common.add_argument("--out", type=Path, help=f"run directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--scale", choices=SCALES, help="size and schedule preset (default desk)")
    common.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    common.add_argument("--truth", choices=("generator", "refit"),
                        help="ground-truth coordinates: generator positions or a refit on the sample graph")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="peerbias", description="Peer-influence bias simulation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic population")
    sub.add_parser("snowball", parents=[common], help="draw samples of snowballs")
    e = sub.add_parser("embed", parents=[common], help="latent coordinates")
    e.add_argument("--scope", choices=("global", "local"), required=True)
    sub.add_parser("communities", parents=[common], help="greedy modularity partitions per snowball")
    f = sub.add_parser("fit", parents=[common], help="fit a model on observed installs")
    f.add_argument("--model", choices=("hier", "agglo"), required=True)
    f.add_argument("--proxy", choices=("none", "global", "local", "community", "all"), required=True)
    s = sub.add_parser("simulate", parents=[common], help="regenerate installs and refit per scenario")
    s.add_argument("--scenario", default="all", help='"all" or a homophily pair such as "(2,-2)"')
    s.add_argument("--model", choices=("hier", "agglo", "both"), default="both")
    sub.add_parser("bias", parents=[common], help="bias records from simulated and observed fits")
    sub.add_parser("signtest", parents=[common], help="sign tests on bias records")
    sub.add_parser("crossval", parents=[common], help="90/10 cross-validation of both models")
    sub.add_parser("report", parents=[common], help="summary JSON and histograms")
    return p


def read_config_file(path: Path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DataError(f"cannot read config file {path}")
    if "peerbias" not in cp:
        raise DataError(f"{path}: missing [peerbias] section")
    sec = cp["peerbias"]
    unknown = set(sec) - {"out", "seed", "scale", "workers", "truth"}
    if unknown:
        raise DataError(f"{path}: unknown keys {sorted(unknown)}")
    return dict(sec)


def make_config(args: argparse.Namespace) -> RunConfig:
    file = read_config_file(args.config) if args.config else {}

    def pick(name, default, conv=str):
        v = getattr(args, name)
        if v is not None:
            return v
        return conv(file[name]) if name in file else default

    out = pick("out", Path(os.environ.get(ENV_OUT, DEFAULT_OUT)), Path)
    cfg = RunConfig(args.command, out, pick("seed", 0, int), pick("scale", "desk"),
                    pick("workers", os.cpu_count() or 1, int), pick("truth", "generator"))
    if cfg.scale not in SCALES or cfg.truth not in ("generator", "refit"):
        raise DataError("invalid scale or truth value in config file")
    if cfg.workers < 1:
        raise DataError("workers must be at least 1")
    params = {k: getattr(args, k) for k in ("scope", "model", "proxy", "scenario") if hasattr(args, k)}
    return replace(cfg, params=params)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg)
    except NumericError as e:
        print(f"peerbias {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PeerBiasError, FileNotFoundError, ValueError) as e:
        print(f"peerbias {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
