"""Undirected social graphs, snowball (ego-ball) samples and their structure."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import NotFoundError, ParseError

log = logging.getLogger(__name__)

Edge = tuple[int, int]


def _norm_edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on opaque integer ids.

    Edges are stored once as ``(min, max)`` pairs. ``self_loops_dropped`` is
    bookkeeping from ingestion and does not take part in equality.
    """

    nodes: frozenset[int]
    edges: frozenset[Edge]
    self_loops_dropped: int = field(default=0, compare=False)
    _adj: dict[int, frozenset[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: dict[int, set[int]] = {n: set() for n in self.nodes}
        for u, v in self.edges:
            if u == v:
                raise ValueError(f"self-loop on {u}")
            if u > v:
                raise ValueError(f"edge {(u, v)} not normalised")
            if u not in adj or v not in adj:
                raise ValueError(f"edge {(u, v)} has an endpoint outside the node set")
            adj[u].add(v)
            adj[v].add(u)
        object.__setattr__(self, "_adj", {n: frozenset(s) for n, s in adj.items()})

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]], nodes: Iterable[int] = ()) -> "Graph":
        node_set = set(nodes)
        edge_set = set()
        loops = 0
        for u, v in edges:
            u, v = int(u), int(v)
            node_set.update((u, v))
            if u == v:
                loops += 1
                continue
            edge_set.add(_norm_edge(u, v))
        return cls(frozenset(node_set), frozenset(edge_set), loops)

    def neighbors(self, node: int) -> frozenset[int]:
        try:
            return self._adj[node]
        except KeyError:
            raise NotFoundError(f"node {node} not in graph") from None

    def degree(self, node: int) -> int:
        return len(self.neighbors(node))

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adj.get(u, ())

    def subgraph(self, members: Iterable[int]) -> "Graph":
        keep = frozenset(members)
        missing = keep - self.nodes
        if missing:
            raise NotFoundError(f"nodes {sorted(missing)[:5]} not in graph")
        edges = frozenset(
            _norm_edge(u, v) for u in keep for v in self._adj[u] if v in keep
        )
        return Graph(keep, edges)

    def __len__(self) -> int:
        return len(self.nodes)


def load_edge_list(lines: Iterable[str]) -> Graph:
    """Parse ``u v`` lines into a deduplicated undirected graph.

    Blank lines and ``#`` comments are skipped. Self-loops keep their node but
    drop the edge; the number dropped is logged and kept on the result.
    """
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ParseError(f"expected two ids, got {len(tokens)} tokens", lineno)
        try:
            pairs.append((int(tokens[0]), int(tokens[1])))
        except ValueError:
            raise ParseError(f"non-integer id in {line!r}", lineno) from None
    g = Graph.from_edges(pairs)
    if g.self_loops_dropped:
        log.warning("dropped %d self-loop(s) from edge list", g.self_loops_dropped)
    return g


def read_edge_list(path: str | Path) -> Graph:
    with open(path) as fh:
        return load_edge_list(fh)


def write_edge_list(g: Graph, path: str | Path) -> None:
    with open(path, "w") as fh:
        for u, v in sorted(g.edges):
            fh.write(f"{u} {v}\n")


def extract_snowball(g: Graph, seed: int, radius: int = 2) -> list[int]:
    """Members of the BFS ball of ``radius`` hops around ``seed``.

    The returned order is the canonical member order used downstream: seed
    first, then by hop distance, ties by id.
    """
    if seed not in g.nodes:
        raise NotFoundError(f"seed {seed} not in graph")
    if radius not in (1, 2):
        raise ValueError("radius must be 1 or 2")
    dist = {seed: 0}
    queue = deque([seed])
    while queue:
        u = queue.popleft()
        if dist[u] == radius:
            continue
        for v in g.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return sorted(dist, key=lambda n: (dist[n], n))


@dataclass(frozen=True)
class Snowball:
    """Seed plus its 2-hop ball, with day-7 installs and per-game peer fractions."""

    seed: int
    members: tuple[int, ...]
    edges: tuple[Edge, ...]
    installs: Mapping[int, int]
    peer_raw: Mapping[int, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.seed not in self.members:
            raise ValueError("seed must be a member")
        missing = [m for m in self.members if m not in self.installs]
        if missing:
            raise ValueError(f"installs missing for members {missing[:5]}")

    @property
    def id(self) -> int:
        return self.seed

    @property
    def size(self) -> int:
        return len(self.members)

    def friends(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {m: [] for m in self.members}
        for u, v in self.edges:
            out[u].append(v)
            out[v].append(u)
        return out

    def aggregated_peer(self, member: int) -> float:
        fracs = self.peer_raw.get(member, ())
        return max(fracs) if len(fracs) else 0.0

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "members": list(self.members),
            "edges": [list(e) for e in self.edges],
            "installs": {str(k): int(self.installs[k]) for k in self.members},
            "peer": {str(k): list(self.peer_raw.get(k, ())) for k in self.members},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Snowball":
        return cls(
            seed=int(doc["seed"]),
            members=tuple(int(m) for m in doc["members"]),
            edges=tuple(_norm_edge(int(u), int(v)) for u, v in doc["edges"]),
            installs={int(k): int(v) for k, v in doc["installs"].items()},
            peer_raw={int(k): tuple(float(x) for x in v) for k, v in doc.get("peer", {}).items()},
        )


def make_snowball(
    g: Graph,
    seed: int,
    installs: Mapping[int, int],
    peer_raw: Mapping[int, Sequence[float]] | None = None,
    radius: int = 2,
) -> Snowball:
    members = extract_snowball(g, seed, radius)
    member_set = set(members)
    edges = tuple(sorted(e for e in g.subgraph(member_set).edges))
    peer = {m: tuple(peer_raw[m]) for m in members if peer_raw and m in peer_raw}
    return Snowball(seed, tuple(members), edges, {m: int(installs[m]) for m in members}, peer)


def save_snowball(s: Snowball, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(s.to_json(), fh, separators=(",", ":"))


def load_snowball(path: str | Path) -> Snowball:
    with open(path) as fh:
        return Snowball.from_json(json.load(fh))


@dataclass(frozen=True)
class StructureStats:
    size: int
    density: float
    components_excluding_seed: int


def _count_components(nodes: Iterable[int], edges: Iterable[Edge]) -> int:
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
    return sum(1 for n in parent if find(n) == n)


def structure_stats(s: Snowball) -> StructureStats:
    n = s.size
    density = len(s.edges) / (n * (n - 1) / 2) if n >= 2 else 0.0
    # components ignore the seed and every edge touching it
    rest = [m for m in s.members if m != s.seed]
    rest_edges = [e for e in s.edges if s.seed not in e]
    return StructureStats(n, density, _count_components(rest, rest_edges))


def filter_snowballs(balls: Sequence[Snowball], min_frac: float = 0.15) -> list[Snowball]:
    """Keep snowballs where at least ``min_frac`` of members have nonzero peer influence."""
    kept = []
    for s in balls:
        active = sum(1 for m in s.members if s.aggregated_peer(m) > 0)
        # tolerance keeps 3/20 on the accepting side of 0.15
        if active >= min_frac * s.size - 1e-9:
            kept.append(s)
    return kept
