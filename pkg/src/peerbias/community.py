"""Greedy (Newman fast) modularity maximization and proxy column encoding.

Modularity is accumulated on integer numerators and divided once, so two
evaluations of the same partition agree bit for bit regardless of how the
communities are enumerated.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import DegenerateDataError
from .graphcore import Graph


def _modularity_numerator(g: Graph, membership: Mapping[int, int]) -> tuple[int, int]:
    inside = Counter()
    degree = Counter()
    for u, v in g.edges:
        cu, cv = membership[u], membership[v]
        degree[cu] += 1
        degree[cv] += 1
        if cu == cv:
            inside[cu] += 1
    m = len(g.edges)
    num = sum(4 * m * inside[c] - degree[c] ** 2 for c in degree)
    return num, 4 * m * m


def modularity(g: Graph, membership: Mapping[int, int]) -> float:
    """Q = sum_c (e_cc - a_c^2) for a node -> label mapping."""
    if not g.edges:
        raise DegenerateDataError("modularity is undefined on an edgeless graph")
    missing = g.nodes - membership.keys()
    if missing:
        raise ValueError(f"unlabelled nodes: {sorted(missing)[:5]}")
    num, den = _modularity_numerator(g, membership)
    return num / den


@dataclass(frozen=True)
class Partition:
    membership: dict[int, int]
    modularity: float

    @property
    def n_communities(self) -> int:
        return len(set(self.membership.values()))

    def sizes(self) -> list[int]:
        c = Counter(self.membership.values())
        return [c[k] for k in range(self.n_communities)]

    def communities(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_communities)]
        for node in sorted(self.membership):
            out[self.membership[node]].append(node)
        return out


def _relabel(membership: Mapping[int, int]) -> dict[int, int]:
    # labels ordered by each community's smallest node id
    order: dict[int, int] = {}
    for node in sorted(membership):
        order.setdefault(membership[node], len(order))
    return {n: order[c] for n, c in membership.items()}


def make_partition(g: Graph, membership: Mapping[int, int]) -> Partition:
    lab = _relabel(membership)
    return Partition(lab, modularity(g, lab))


@dataclass(frozen=True)
class MergeStep:
    kept: int
    absorbed: int
    delta_q: float


def greedy_merges(g: Graph) -> tuple[dict[int, int], list[MergeStep]]:
    """Run the agglomeration and return the final labels plus every merge.

    Each node starts as its own community (indexed by sorted id). At every
    step the adjacent pair with the largest modularity gain is merged; ties go
    to the lexicographically smallest ``(label_a, label_b)``. Merging stops
    when no pair has a strictly positive gain.
    """
    if not g.edges:
        raise DegenerateDataError("community detection needs at least one edge")
    nodes = sorted(g.nodes)
    index = {n: i for i, n in enumerate(nodes)}
    m = len(g.edges)
    between: dict[int, dict[int, int]] = defaultdict(dict)
    deg = [0] * len(nodes)
    for u, v in g.edges:
        i, j = index[u], index[v]
        between[i][j] = between[i].get(j, 0) + 1
        between[j][i] = between[j].get(i, 0) + 1
        deg[i] += 1
        deg[j] += 1
    owner = list(range(len(nodes)))
    members = {i: [i] for i in range(len(nodes))}
    steps: list[MergeStep] = []
    den = 4 * m * m
    while True:
        best = None
        for i, nbrs in between.items():
            for j, e in nbrs.items():
                if j <= i:
                    continue
                # gain * 4m^2 = 4m * E_ij - 2 * D_i * D_j
                gain = 4 * m * e - 2 * deg[i] * deg[j]
                if best is None or gain > best[0] or (gain == best[0] and (i, j) < best[1:]):
                    best = (gain, i, j)
        if best is None or best[0] <= 0:
            break
        gain, i, j = best
        for k, e in between.pop(j).items():
            del between[k][j]
            if k == i:
                continue
            between[i][k] = between[i].get(k, 0) + e
            between[k][i] = between[k].get(i, 0) + e
        deg[i] += deg[j]
        deg[j] = 0
        for n in members.pop(j):
            owner[n] = i
            members[i].append(n)
        steps.append(MergeStep(i, j, gain / den))
    return {n: owner[index[n]] for n in nodes}, steps


def detect_communities(g: Graph) -> Partition:
    labels, _ = greedy_merges(g)
    return make_partition(g, labels)


def community_columns(p: Partition, k: int = 2) -> dict[int, tuple[float, ...]]:
    """Indicator columns for the ``k`` largest communities (ties: lower label)."""
    if not p.membership:
        raise ValueError("empty partition")
    sizes = Counter(p.membership.values())
    top = sorted(sizes, key=lambda c: (-sizes[c], c))[:k]
    slot = {c: i for i, c in enumerate(top)}
    out = {}
    for node, c in p.membership.items():
        vec = [0.0] * k
        if c in slot:
            vec[slot[c]] = 1.0
        out[node] = tuple(vec)
    return out


def write_partition(p: Partition, csv_path: str | Path, json_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "community"])
        for node in sorted(p.membership):
            w.writerow([node, p.membership[node]])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"Q": float(f"{p.modularity:.6g}"), "numCommunities": p.n_communities,
                       "sizes": p.sizes()}, fh, indent=1, sort_keys=True)


def read_partition(csv_path: str | Path) -> dict[int, int]:
    with open(csv_path, newline="") as fh:
        return {int(r["id"]): int(r["community"]) for r in csv.DictReader(fh)}
