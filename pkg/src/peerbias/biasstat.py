"""Peer-influence effects, bias percentages, sign tests and cross-validation scores."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .errors import DegenerateDataError
from .glm import add_intercept

VARIANTS = ("naive", "true", "latent", "comm")
PROXY_VARIANTS = ("latent", "comm")


class UndefinedEffectError(DegenerateDataError):
    """No member with nonzero peer influence, or a zero reference effect."""


def member_effects(beta, X, peer_index: int) -> np.ndarray:
    """Percent effect per member with nonzero peer value.

    ``(p - p|peer=0) / |p| * 100`` where ``p = expit(beta . [1, x])``.
    """
    X = np.asarray(X, float)
    beta = np.asarray(beta, float)
    keep = X[:, peer_index] != 0
    Xk = X[keep]
    if len(Xk) == 0:
        return np.zeros(0)
    Xa = add_intercept(Xk)
    p = expit(Xa @ beta)
    X0 = Xa.copy()
    X0[:, peer_index + 1] = 0.0
    p0 = expit(X0 @ beta)
    return (p - p0) / np.abs(p) * 100.0


def peer_effect(beta, X, peer_index: int) -> float:
    """Median percent of install probability attributable to peer influence."""
    eff = member_effects(beta, X, peer_index)
    if len(eff) == 0:
        raise UndefinedEffectError("no member with nonzero peer influence")
    return float(np.median(eff))


def bias_percent(peer_inf_variant: float, peer_inf_true: float) -> float:
    if peer_inf_true == 0:
        raise UndefinedEffectError("reference peer effect is zero")
    return (peer_inf_variant - peer_inf_true) / abs(peer_inf_true) * 100.0


@dataclass
class BiasReport:
    snowball_id: int
    sample: int = 0
    scenario: str = ""
    model: str = ""
    peer_inf: dict[str, float] = field(default_factory=dict)
    bias: dict[str, float] = field(default_factory=dict)
    improved: dict[str, bool] = field(default_factory=dict)
    excluded: str = ""  # reason when the bias is undefined

    @property
    def included(self) -> bool:
        return not self.excluded


def make_report(snowball_id: int, peer_inf: Mapping[str, float | None], proxies: Sequence[str],
                **meta) -> BiasReport:
    """Biases of every variant against ``true`` plus strict improvement flags."""
    r = BiasReport(snowball_id, **meta)
    r.peer_inf = {k: v for k, v in peer_inf.items() if v is not None}
    missing = [v for v in ("true", "naive", *proxies) if peer_inf.get(v) is None]
    if missing:
        r.excluded = "undefined-effect"
        return r
    if peer_inf["true"] == 0:
        r.excluded = "zero-true-effect"
        return r
    for v in ("naive", "true", *proxies):
        r.bias[v] = bias_percent(peer_inf[v], peer_inf["true"])
    for v in proxies:
        r.improved[v] = abs(r.bias[v]) < abs(r.bias["naive"])
    return r


def improvement_counts(samples: Sequence[Sequence[BiasReport]], proxy: str):
    """Per-sample majority flags and the pooled ``(improved, included)`` totals.

    A sample has a majority when strictly more than half of its included
    snowballs improve (six or more out of ten).
    """
    flags = []
    improved = total = 0
    for reps in samples:
        inc = [r for r in reps if r.included and proxy in r.improved]
        k = sum(1 for r in inc if r.improved[proxy])
        flags.append(len(inc) > 0 and 2 * k > len(inc))
        improved += k
        total += len(inc)
    return flags, (improved, total)


def binomial_tail_exact(n: int, k: int, p: Fraction | float = Fraction(1, 2)) -> Fraction:
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    p = Fraction(p)
    q = 1 - p
    return sum((Fraction(math.comb(n, i)) * p ** i * q ** (n - i) for i in range(k, n + 1)), Fraction(0))


def binomial_tail(n: int, k: int, p: float = 0.5) -> float:
    """P(Binom(n, p) >= k), summed exactly in rationals."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    return float(binomial_tail_exact(n, k, Fraction(p)))


@dataclass(frozen=True)
class SampleTestResult:
    per_sample_majority: tuple[bool, ...]
    count_majorities: int
    p_value: float
    critical_level: float
    bonferroni_divisor: int
    significant: bool

    def to_json(self) -> dict:
        return {
            "perSampleMajority": list(self.per_sample_majority),
            "countMajorities": self.count_majorities,
            "pValue": float(f"{self.p_value:.6g}"),
            "criticalLevel": float(f"{self.critical_level:.6g}"),
            "bonferroniDivisor": self.bonferroni_divisor,
            "significant": self.significant,
        }


def sign_test(per_sample_majority: Sequence[bool], alpha: float = 0.05,
              num_scenarios: int = 1) -> SampleTestResult:
    flags = tuple(bool(f) for f in per_sample_majority)
    if not flags:
        raise ValueError("sign test needs at least one sample")
    k = sum(flags)
    p = binomial_tail(len(flags), k, 0.5)
    level = alpha / num_scenarios
    return SampleTestResult(flags, k, p, level, num_scenarios, p <= level)


def welch_t(a, b) -> tuple[float, float, float]:
    """Unpooled two-sample t statistic, Satterthwaite df and two-sided p."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        if diff == 0:
            raise DegenerateDataError("both samples have zero variance")
        raise DegenerateDataError("zero variance with different means")
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return float(t), float(df), float(min(p, 1.0))


def median_gap_percent(p_train, p_test) -> float:
    """``|median(p_train) - median(p_test)| / median(p_train) * 100``."""
    mt = float(np.median(p_train))
    if mt == 0:
        raise UndefinedEffectError("training median probability is zero")
    return abs(mt - float(np.median(p_test))) / mt * 100.0


def crossval(units: Sequence[tuple[np.ndarray, np.ndarray]],
             refit: Callable[[list[list[tuple[np.ndarray, np.ndarray]]]], Sequence[Sequence[np.ndarray]]],
             n_splits: int = 50, frac: float = 0.1, seed=0,
             splits: Sequence[Sequence[np.ndarray]] | None = None):
    """Train/test median-probability gap of a refitted model.

    Parameters
    ----------
    units : list of (X, y)
        Snowballs (or clusters). A split holds out ``frac`` of each unit's rows.
    refit : callable
        Receives the training sets of all splits at once, ``train[k][u]`` being
        the ``(X, y)`` pair of unit ``u`` in split ``k``, and returns one
        coefficient vector per split and unit. Batching lets a sampler run
        all splits together.
    splits : optional
        Precomputed held-out index arrays, ``splits[k][u]`` for split ``k``
        and unit ``u`` (so two models can share the same splits).

    Returns
    -------
    median_score : float
        Median over splits of the per-split median over units.
    per_split : ndarray
        The per-split scores (NaN where no unit had a defined gap).
    """
    if splits is None:
        splits = make_splits([len(y) for _, y in units], n_splits, frac, seed)
    trains, tests = [], []
    for held in splits:
        train, test = [], []
        for (X, y), out in zip(units, held):
            m = np.ones(len(y), dtype=bool)
            m[out] = False
            train.append((X[m], y[m]))
            test.append(X[~m])
        trains.append(train)
        tests.append(test)
    betas_all = refit(trains)
    scores = []
    for train, test, betas in zip(trains, tests, betas_all):
        gaps = []
        for (Xtr, _), Xte, b in zip(train, test, betas):
            p_tr = expit(add_intercept(Xtr) @ b)
            p_te = expit(add_intercept(Xte) @ b)
            try:
                gaps.append(median_gap_percent(p_tr, p_te))
            except UndefinedEffectError:
                continue
        scores.append(float(np.median(gaps)) if gaps else math.nan)
    per = np.array(scores)
    if np.all(np.isnan(per)):
        raise UndefinedEffectError("no split produced a defined score")
    return float(np.nanmedian(per)), per


def make_splits(sizes: Sequence[int], n_splits: int = 50, frac: float = 0.1, seed=0):
    """Held-out index arrays per split and unit; every side keeps >= 1 row."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_splits):
        held = []
        for n in sizes:
            if n < 2:
                raise DegenerateDataError("a unit needs at least two rows to split")
            k = min(n - 1, max(1, int(round(frac * n))))
            held.append(np.sort(rng.permutation(n)[:k]))
        out.append(held)
    return out


# -- serialization ----------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def write_bias_csv(reports: Sequence[BiasReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scenario", "sample", "snowball", "variant", "peerInf", "bias", "improved", "excluded"])
        for r in reports:
            for v in VARIANTS:
                if v not in r.peer_inf and not (r.excluded and v == "true"):
                    continue
                imp = "" if v not in r.improved else int(r.improved[v])
                w.writerow([r.model, r.scenario, r.sample, r.snowball_id, v,
                            _fmt(r.peer_inf.get(v)), _fmt(r.bias.get(v)), imp, r.excluded])


def read_bias_csv(path: str | Path) -> list[BiasReport]:
    reps: dict[tuple, BiasReport] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], row["scenario"], int(row["sample"]), int(row["snowball"]))
            r = reps.setdefault(key, BiasReport(key[3], key[2], key[1], key[0], excluded=row["excluded"]))
            v = row["variant"]
            if row["peerInf"]:
                r.peer_inf[v] = float(row["peerInf"])
            if row["bias"]:
                r.bias[v] = float(row["bias"])
            if row["improved"] != "":
                r.improved[v] = bool(int(row["improved"]))
    return list(reps.values())


def histogram(values_a, values_b, bins: Sequence[float]):
    """Counts of two bias collections over shared bin edges."""
    ca, _ = np.histogram(np.asarray(values_a, float), bins=bins)
    cb, _ = np.histogram(np.asarray(values_b, float), bins=bins)
    return [(float(bins[i]), float(bins[i + 1]), int(ca[i]), int(cb[i])) for i in range(len(bins) - 1)]


def write_histogram_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["binLow", "binHigh", "countHier", "countAgglo"])
        for lo, hi, a, b in rows:
            w.writerow([_fmt(lo), _fmt(hi), a, b])
