"""Instability-driven agglomerative clustering of data subsets.

Subsets are merged greedily while tracking a binary tree, then the tree is
walked top down: a node is split when one of its children is more stable than
the node itself and accepted otherwise. Each accepted cluster gets a ridge
logistic fit that its member subsets share.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateDataError
from .features import DesignRow, design_matrix
from .glm import GlmFit, add_intercept, fit_logistic, fit_logistic_batch, fit_unpenalized, lambda_halfway, t_squared

log = logging.getLogger(__name__)

MIN_PER_CLASS = 2


@dataclass(frozen=True)
class SubsetData:
    X: np.ndarray
    y: np.ndarray
    origin_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.y) == 0:
            raise ValueError("subset must be nonempty")
        if np.shape(self.X)[0] != len(self.y):
            raise ValueError("X and y row counts differ")

    @classmethod
    def from_rows(cls, rows: Sequence[DesignRow], origin_id: int) -> "SubsetData":
        X, y = design_matrix(rows)
        return cls(X, y.astype(float), (origin_id,))

    @property
    def n(self) -> int:
        return len(self.y)

    def class_counts(self) -> tuple[int, int]:
        ones = int(np.sum(self.y))
        return self.n - ones, ones

    def is_valid(self) -> bool:
        return min(self.class_counts()) >= MIN_PER_CLASS

    def union(self, other: "SubsetData") -> "SubsetData":
        return SubsetData(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]),
                          self.origin_ids + other.origin_ids)


def union_all(subsets: Sequence[SubsetData]) -> SubsetData:
    out = subsets[0]
    for s in subsets[1:]:
        out = out.union(s)
    return out


@dataclass(frozen=True)
class AggloParams:
    n_partitions: int = 100
    held_out_frac: float = 0.1
    max_retries: int = 100


def ridge_fit(s: SubsetData) -> GlmFit:
    """Ridge fit at the halfway penalty (converted to the summed-loss scale)."""
    lam = lambda_halfway(s.X, s.y)
    return fit_logistic(s.X, s.y, s.n * lam)


def node_rng(seed: int, origin_ids) -> np.random.Generator:
    """Generator keyed on the seed and the member set, independent of merge order."""
    return np.random.default_rng([int(seed), *sorted(int(i) for i in origin_ids)])


def instability(s: SubsetData, n_partitions: int = 100, held_out_frac: float = 0.1,
                seed=0, max_retries: int = 100) -> float:
    """Mean absolute shift of held-out class-1 probabilities under resampling.

    For each random split, a ridge model is refit on the held-in rows and its
    probabilities on the held-out rows are compared with those of the model
    fit on all rows. The penalty comes from :func:`lambda_halfway` on the full
    subset and is applied on the mean-loss scale for both fits.

    ``seed`` may be an int, a sequence of ints or a ``numpy`` Generator.
    """
    if min(s.class_counts()) < MIN_PER_CLASS:
        raise DegenerateDataError(f"instability needs >= {MIN_PER_CLASS} rows of each class")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = s.n
    n_out = max(1, int(math.ceil(held_out_frac * n)))
    if n_out >= n:
        raise DegenerateDataError("held-out fraction leaves no training rows")
    lam = lambda_halfway(s.X, s.y)
    full = fit_logistic(s.X, s.y, n * lam)
    p_full = expit(add_intercept(s.X) @ full.coefficients)

    held_out = np.zeros((n_partitions, n), dtype=bool)
    pending = np.arange(n_partitions)
    for _ in range(max_retries):
        # a random n_out-subset per pending partition; redraw those whose
        # training rows lost a class
        out = np.argsort(rng.random((len(pending), n)), axis=1)[:, :n_out]
        held_out[pending] = False
        held_out[pending[:, None], out] = True
        ones_in = (~held_out[pending]) @ s.y
        pending = pending[(ones_in == 0) | (ones_in == n - n_out)]
        if len(pending) == 0:
            break
    else:
        raise DegenerateDataError("could not form a split retaining both classes")
    masks = (~held_out).astype(float)
    B = fit_logistic_batch(s.X, s.y, masks, (n - n_out) * lam, start=full.coefficients)
    P = expit(B @ add_intercept(s.X).T)
    diffs = np.abs(P - p_full) * held_out
    val = float(np.mean(diffs.sum(axis=1) / n_out))
    return min(max(val, 0.0), 1.0)


def ensure_min_classes(subsets: Sequence[SubsetData]) -> list[SubsetData]:
    """Merge class-deficient subsets into their nearest neighbour by T^2.

    The first deficient subset (in input order) is merged into the subset
    whose unpenalized fit has the smallest T^2 against its own; ties go to the
    earlier subset. The merged subset takes the neighbour's position. Repeats
    until every subset has enough rows of each class.
    """
    out = list(subsets)
    if not out:
        raise ValueError("no subsets")
    pooled = union_all(out)
    if min(pooled.class_counts()) < MIN_PER_CLASS:
        raise DegenerateDataError("pooled data lack the minimum rows per class")
    fits: dict[tuple[int, ...], GlmFit] = {}

    def fit_of(s: SubsetData) -> GlmFit:
        if s.origin_ids not in fits:
            fits[s.origin_ids] = fit_unpenalized(s.X, s.y)
        return fits[s.origin_ids]

    while True:
        bad = next((i for i, s in enumerate(out) if not s.is_valid()), None)
        if bad is None:
            return out
        fb = fit_of(out[bad])
        best, best_t = None, math.inf
        for j, s in enumerate(out):
            if j == bad:
                continue
            t = t_squared(fb, fit_of(s))
            if t < best_t:
                best, best_t = j, t
        if best is None:
            best = 0 if bad else 1  # all T^2 infinite; fall back to a neighbour
        log.info("merging deficient subset %s into %s (T2=%.4g)",
                 out[bad].origin_ids, out[best].origin_ids, best_t)
        merged = out[best].union(out[bad])
        out[best] = merged
        del out[bad]


@dataclass
class TreeNode:
    index: int
    members: tuple[int, ...]  # indices into the validated subset list
    children: tuple[int, int] | None = None
    instability: float = float("nan")


@dataclass
class ClusterResult:
    subsets: list[SubsetData]
    clusters: list[list[int]]  # origin ids per accepted cluster
    fits: list[GlmFit]
    instabilities: list[float]
    tree: list[TreeNode]
    accepted_nodes: list[int] = field(default_factory=list)

    @property
    def root(self) -> int:
        return len(self.tree) - 1

    def newick(self) -> str:
        def rec(i):
            node = self.tree[i]
            if node.children is None:
                return "+".join(str(o) for o in self.subsets[node.members[0]].origin_ids)
            a, b = node.children
            return f"({rec(a)},{rec(b)})"
        return rec(self.root) + ";"

    def coefficients_for(self, origin_id: int) -> np.ndarray:
        for ids, f in zip(self.clusters, self.fits):
            if origin_id in ids:
                return f.coefficients
        raise KeyError(origin_id)

    def to_json(self) -> dict:
        return {
            "clusters": self.clusters,
            "coefficients": [[float(f"{c:.6g}") for c in f.coefficients] for f in self.fits],
            "instabilities": [float(f"{v:.6g}") for v in self.instabilities],
            "treeNewick": self.newick(),
        }


def cluster_subsets(subsets: Sequence[SubsetData], params: AggloParams = AggloParams(),
                    seed: int = 0) -> ClusterResult:
    """Merge all subsets into one tree, then split top down.

    Merge step: join the pair minimizing
    ``instab(a | b) - min(instab(a), instab(b))`` (ties: lowest node indices).
    Split step: an internal node is expanded when the smaller of its
    children's instabilities is below its own, otherwise it is accepted.
    Leaves are accepted as they are reached.
    """
    base = ensure_min_classes(subsets)
    memo: dict[frozenset, float] = {}

    def data_of(members) -> SubsetData:
        return union_all([base[i] for i in sorted(members)])

    def instab(members) -> float:
        key = frozenset(members)
        if key not in memo:
            d = data_of(members)
            memo[key] = instability(d, params.n_partitions, params.held_out_frac,
                                    node_rng(seed, d.origin_ids), params.max_retries)
        return memo[key]

    tree = [TreeNode(i, (i,)) for i in range(len(base))]
    for node in tree:
        node.instability = instab(node.members)
    active = list(range(len(base)))
    while len(active) > 1:
        best = None
        for x in range(len(active)):
            for z in range(x + 1, len(active)):
                a, b = tree[active[x]], tree[active[z]]
                gain = instab(a.members + b.members) - min(a.instability, b.instability)
                if best is None or gain < best[0]:
                    best = (gain, active[x], active[z])
        _, i, j = best
        members = tuple(sorted(tree[i].members + tree[j].members))
        node = TreeNode(len(tree), members, (i, j), instab(members))
        tree.append(node)
        active = [k for k in active if k not in (i, j)] + [node.index]

    accepted = []
    queue = [len(tree) - 1]
    while queue:
        k = queue.pop(0)
        node = tree[k]
        if node.children is None:
            accepted.append(k)
            continue
        a, b = node.children
        if min(tree[a].instability, tree[b].instability) < node.instability:
            queue.extend([a, b])
        else:
            accepted.append(k)
    accepted.sort(key=lambda k: min(tree[k].members))

    clusters, fits, inst = [], [], []
    for k in accepted:
        d = data_of(tree[k].members)
        clusters.append(sorted(d.origin_ids))
        fits.append(ridge_fit(d))
        inst.append(tree[k].instability)
    return ClusterResult(base, clusters, fits, inst, tree, accepted)
