"""Per-user features: peer influence, friend-derived extended features, design rows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NotFoundError, ParseError, SchemaError
from .graphcore import Snowball, structure_stats

DEMOGRAPHICS = ("gender", "age", "photos_log", "comments_log")
PROXIES = ("none", "global", "local", "community")
ACTIVITY_DAYS = range(1, 7)


@dataclass(frozen=True)
class UserFeatures:
    id: int
    gender: int  # female = 1
    age: float
    photos_log: float
    comments_log: float

    def __post_init__(self):
        if not self.age > 0:
            raise ValueError(f"user {self.id}: age must be positive")
        if not (math.isfinite(self.photos_log) and math.isfinite(self.comments_log)):
            raise ValueError(f"user {self.id}: log counts must be finite")

    def demographics(self) -> tuple[float, float, float, float]:
        return (float(self.gender), float(self.age), self.photos_log, self.comments_log)


def read_users_csv(path: str | Path) -> dict[int, UserFeatures]:
    users = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"id", *DEMOGRAPHICS}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ParseError(f"users csv needs columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                u = UserFeatures(
                    int(row["id"]), int(row["gender"]), float(row["age"]),
                    float(row["photos_log"]), float(row["comments_log"]),
                )
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            users[u.id] = u
    return users


def write_users_csv(users: Mapping[int, UserFeatures], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *DEMOGRAPHICS])
        for uid in sorted(users):
            u = users[uid]
            w.writerow([u.id, u.gender, f"{u.age:.6g}", f"{u.photos_log:.6g}", f"{u.comments_log:.6g}"])


def read_activity_csv(path: str | Path) -> dict[int, frozenset[int]]:
    """Games each user was active on during days 1-6 (``id,game,day,active``)."""
    active: dict[int, set[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                uid, game, day, flag = (int(row[k]) for k in ("id", "game", "day", "active"))
            except (KeyError, TypeError, ValueError):
                raise ParseError("malformed activity row", lineno) from None
            if flag and day in ACTIVITY_DAYS:
                active.setdefault(uid, set()).add(game)
    return {k: frozenset(v) for k, v in active.items()}


def write_activity_csv(records: Iterable[tuple[int, int, int]], path: str | Path) -> None:
    """Write ``(id, game, day)`` activity events; only active rows are stored."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "game", "day", "active"])
        for uid, game, day in records:
            w.writerow([uid, game, day, 1])


# -- peer influence ---------------------------------------------------------

def peer_fractions(
    user: int,
    s: Snowball,
    activity: Mapping[int, Iterable[int]],
    games: Sequence[int],
    friends: Mapping[int, Sequence[int]] | None = None,
) -> tuple[float, ...]:
    """Per game, the fraction of ``user``'s in-snowball friends active on it."""
    friends = s.friends() if friends is None else friends
    fr = friends[user]
    if not fr:
        return tuple(0.0 for _ in games)
    out = []
    for g in games:
        n_active = sum(1 for f in fr if g in activity.get(f, ()))
        out.append(n_active / len(fr))
    return tuple(out)


def attach_peer(s: Snowball, activity: Mapping[int, Iterable[int]], games: Sequence[int]) -> Snowball:
    friends = s.friends()
    raw = {m: peer_fractions(m, s, activity, games, friends) for m in s.members}
    return replace(s, peer_raw=raw)


def peer_influence(
    user: int,
    s: Snowball,
    activity: Mapping[int, Iterable[int]] | None = None,
    games: Sequence[int] | None = None,
) -> float:
    """Aggregated peer influence: the maximum per-game friend fraction.

    With ``activity`` the fractions are recomputed from the snowball's induced
    friendships; otherwise the stored ``peer_raw`` fractions are used.
    """
    if user not in s.installs:
        raise NotFoundError(f"user {user} not in snowball {s.id}")
    if activity is None:
        return s.aggregated_peer(user)
    if games is None:
        games = sorted({g for acts in activity.values() for g in acts})
    fr = peer_fractions(user, s, activity, games)
    return max(fr, default=0.0)


# -- extended features ------------------------------------------------------

@dataclass(frozen=True)
class ExtendedFeatures:
    fm_gender: float
    fm_age: float
    fm_photos_log: float
    fm_comments_log: float
    distance: float
    distance_flagged: bool
    snowball_size: int
    snowball_density: float
    components: int


def _friend_distance(user: UserFeatures, friend_feats: np.ndarray) -> tuple[float, bool]:
    if friend_feats.shape[0] < 2:
        return 0.0, True
    mean = friend_feats.mean(axis=0)
    sd = friend_feats.std(axis=0, ddof=1)
    diff = np.abs(np.asarray(user.demographics()) - mean)
    ok = sd > 0
    # zero-sd features (all friends identical) carry no scale; they are skipped
    return float(np.sum(diff[ok] / sd[ok])), False


def extended_features(
    user: int,
    s: Snowball,
    feats: Mapping[int, UserFeatures],
    friends: Mapping[int, Sequence[int]] | None = None,
    stats=None,
) -> ExtendedFeatures:
    """Friend means, distance from friends, and snowball structure for one member.

    Distance is the sum over the four demographics of
    ``|user - mean(friends)| / sd(friends)`` with the sample sd. Fewer than two
    friends leaves the sd undefined: distance is 0 and ``distance_flagged`` set.
    """
    friends = s.friends() if friends is None else friends
    stats = structure_stats(s) if stats is None else stats
    try:
        me = feats[user]
        ff = np.array([feats[f].demographics() for f in friends[user]], dtype=float).reshape(-1, 4)
    except KeyError as exc:
        raise NotFoundError(f"missing features for user {exc.args[0]}") from None
    means = ff.mean(axis=0) if len(ff) else np.asarray(me.demographics())
    dist, flagged = _friend_distance(me, ff)
    return ExtendedFeatures(
        *(float(x) for x in means), dist, flagged,
        stats.size, stats.density, stats.components_excluding_seed,
    )


# -- design assembly --------------------------------------------------------

DEFAULT_COLUMNS = (
    "peer", "gender", "age", "photos_log", "comments_log",
    "fm_gender", "fm_age", "fm_photos_log", "fm_comments_log", "distance",
    "homophily_1", "homophily_2",
)

_METADATA_COLUMNS = ("snowball_size", "snowball_density", "components")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered regression columns; the intercept is left to the solvers."""

    columns: tuple[str, ...] = DEFAULT_COLUMNS
    peer_column: str = "peer"
    homophily_columns: tuple[str, ...] = ("homophily_1", "homophily_2")

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise SchemaError("column names must be unique")
        if self.columns.count(self.peer_column) != 1:
            raise SchemaError("peer column must appear exactly once")
        for c in self.homophily_columns:
            if c not in self.columns:
                raise SchemaError(f"homophily column {c!r} not in schema")
        known = {"peer", *DEMOGRAPHICS, "fm_gender", "fm_age", "fm_photos_log",
                 "fm_comments_log", "distance", *_METADATA_COLUMNS}
        for c in self.columns:
            if c not in known and c not in self.homophily_columns:
                raise SchemaError(f"unknown column {c!r}")

    def active_columns(self, proxy: str) -> tuple[str, ...]:
        if proxy == "none":
            return tuple(c for c in self.columns if c not in self.homophily_columns)
        return self.columns

    def peer_index(self, proxy: str = "global") -> int:
        return self.active_columns(proxy).index(self.peer_column)

    def homophily_indices(self, proxy: str = "global") -> tuple[int, ...]:
        cols = self.active_columns(proxy)
        return tuple(cols.index(c) for c in self.homophily_columns if c in cols)

    def width(self, proxy: str) -> int:
        return len(self.active_columns(proxy))


@dataclass(frozen=True)
class DesignRow:
    user_id: int
    values: tuple[float, ...]
    response: int


def build_design(
    s: Snowball,
    schema: FeatureSchema,
    proxy: str,
    proxy_values: Mapping[int, Sequence[float]] | None,
    users: Mapping[int, UserFeatures],
) -> list[DesignRow]:
    """Design rows for every member in member order.

    Homophily columns are filled from ``proxy_values`` (latent coordinates or
    community indicators) and dropped entirely when ``proxy == "none"``.
    """
    if proxy not in PROXIES:
        raise SchemaError(f"unknown proxy {proxy!r}")
    cols = schema.active_columns(proxy)
    n_h = len(schema.homophily_columns)
    friends = s.friends()
    stats = structure_stats(s)
    rows = []
    for m in s.members:
        ext = extended_features(m, s, users, friends, stats)
        u = users[m]
        base = {
            "peer": s.aggregated_peer(m),
            "gender": float(u.gender), "age": u.age,
            "photos_log": u.photos_log, "comments_log": u.comments_log,
            "fm_gender": ext.fm_gender, "fm_age": ext.fm_age,
            "fm_photos_log": ext.fm_photos_log, "fm_comments_log": ext.fm_comments_log,
            "distance": ext.distance,
            "snowball_size": float(ext.snowball_size),
            "snowball_density": ext.snowball_density,
            "components": float(ext.components),
        }
        if proxy != "none":
            if proxy_values is None or m not in proxy_values:
                raise NotFoundError(f"no {proxy} proxy value for member {m} of snowball {s.id}")
            pv = tuple(float(x) for x in proxy_values[m])
            if len(pv) != n_h:
                raise SchemaError(f"proxy for member {m} has width {len(pv)}, schema expects {n_h}")
            base.update(zip(schema.homophily_columns, pv))
        vals = tuple(float(base[c]) for c in cols)
        rows.append(DesignRow(m, vals, int(s.installs[m])))
    return rows


def design_matrix(rows: Sequence[DesignRow]) -> tuple[np.ndarray, np.ndarray]:
    if not rows:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    X = np.array([r.values for r in rows], dtype=float)
    y = np.array([r.response for r in rows], dtype=int)
    return X, y


def zscore_columns(mats: Sequence[np.ndarray], columns: Sequence[int]) -> list[np.ndarray]:
    """Z-score ``columns`` using moments pooled over all matrices.

    Constant columns are centred but not scaled.
    """
    pooled = np.vstack(mats)
    out = [m.copy() for m in mats]
    for j in columns:
        mu = pooled[:, j].mean()
        sd = pooled[:, j].std()
        for m in out:
            m[:, j] = (m[:, j] - mu) / (sd if sd > 0 else 1.0)
    return out
