"""Social network model, valid-buyer subgraph and spanning-tree machinery.

Node identifiers are opaque strings. Every iteration that could affect an
outcome walks nodes in lexicographic order so runs are reproducible.
"""
from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import yaml

NodeId = str

DEFAULT_TREE_CAP = 10**6


class GraphFormatError(ValueError):
    """The graph/profile document is malformed."""


class TreeCountExceeded(ValueError):
    """Exact enumeration refused because the graph has too many spanning trees."""

    def __init__(self, count: int, cap: int):
        super().__init__(
            f"graph has {count} spanning trees, above the cap of {cap}; "
            "use monte_carlo mode (sampled trees) instead"
        )
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class BuyerProfile:
    """True type of one node: valuation and neighbour set."""

    id: NodeId
    valuation: float
    neighbors: frozenset[NodeId]

    def __post_init__(self):
        if not self.valuation >= 0:
            raise ValueError(f"valuation of {self.id!r} must be >= 0, got {self.valuation}")
        if self.id in self.neighbors:
            raise ValueError(f"{self.id!r} lists itself as a neighbour")


@dataclass(frozen=True)
class ReportedProfile:
    """What every buyer reveals: a bid and the neighbours it invites."""

    seller: NodeId
    seller_neighbors: frozenset[NodeId]
    bids: Mapping[NodeId, float]
    invited: Mapping[NodeId, frozenset[NodeId]]

    def with_report(self, buyer: NodeId, bid: float | None = None,
                    invited: Iterable[NodeId] | None = None) -> "ReportedProfile":
        bids = dict(self.bids)
        inv = dict(self.invited)
        if bid is not None:
            bids[buyer] = float(bid)
        if invited is not None:
            inv[buyer] = frozenset(invited)
        return ReportedProfile(self.seller, self.seller_neighbors, bids, inv)


@dataclass(frozen=True)
class Network:
    """A true instance: the seller, the seller's neighbours and every buyer's type.

    The social graph is undirected; one-sided neighbour listings in the
    input are symmetrised on construction.
    """

    seller: NodeId
    buyers: Mapping[NodeId, BuyerProfile]

    @property
    def seller_neighbors(self) -> frozenset[NodeId]:
        return frozenset(b for b, p in self.buyers.items() if self.seller in p.neighbors)

    @property
    def valuations(self) -> dict[NodeId, float]:
        return {b: p.valuation for b, p in self.buyers.items()}

    def neighbors(self, node: NodeId) -> frozenset[NodeId]:
        if node == self.seller:
            return self.seller_neighbors
        return self.buyers[node].neighbors

    def truthful(self) -> ReportedProfile:
        return ReportedProfile(
            seller=self.seller,
            seller_neighbors=self.seller_neighbors,
            bids={b: p.valuation for b, p in self.buyers.items()},
            invited={b: p.neighbors for b, p in self.buyers.items()},
        )

    def with_valuations(self, valuations: Mapping[NodeId, float]) -> "Network":
        buyers = {b: BuyerProfile(b, float(valuations.get(b, p.valuation)), p.neighbors)
                  for b, p in self.buyers.items()}
        return Network(self.seller, buyers)

    @classmethod
    def from_edges(cls, seller: NodeId, valuations: Mapping[NodeId, float],
                   edges: Iterable[tuple[NodeId, NodeId]]) -> "Network":
        adj: dict[NodeId, set[NodeId]] = {b: set() for b in valuations}
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop on {u!r}")
            for x, y in ((u, v), (v, u)):
                if x != seller:
                    if x not in adj:
                        raise ValueError(f"edge endpoint {x!r} has no valuation")
                    adj[x].add(y)
        buyers = {b: BuyerProfile(b, float(valuations[b]), frozenset(adj[b])) for b in sorted(valuations)}
        return cls(seller, buyers)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Network":
        try:
            seller = str(doc["seller"])
            rows = doc["buyers"]
        except (KeyError, TypeError) as exc:
            raise GraphFormatError(f"missing field: {exc}") from None
        valuations: dict[NodeId, float] = {}
        edges: list[tuple[NodeId, NodeId]] = []
        for row in rows or []:
            try:
                bid = str(row["id"])
                val = float(row.get("valuation", 0.0))
            except (KeyError, TypeError, ValueError) as exc:
                raise GraphFormatError(f"bad buyer row {row!r}: {exc}") from None
            if bid == seller:
                raise GraphFormatError("the seller cannot also be a buyer")
            if bid in valuations:
                raise GraphFormatError(f"duplicate buyer {bid!r}")
            if val < 0:
                raise GraphFormatError(f"negative valuation for {bid!r}")
            valuations[bid] = val
            edges.extend((bid, str(n)) for n in row.get("neighbors", []) or [])
        edges.extend((seller, str(n)) for n in doc.get("seller_neighbors", []) or [])
        known = set(valuations) | {seller}
        for u, v in edges:
            if v not in known:
                raise GraphFormatError(f"{u!r} lists unknown neighbour {v!r}")
            if u == v:
                raise GraphFormatError(f"{u!r} lists itself as a neighbour")
        return cls.from_edges(seller, valuations, edges)

    def to_dict(self) -> dict:
        return {
            "seller": self.seller,
            "buyers": [
                {"id": b, "valuation": p.valuation, "neighbors": sorted(p.neighbors)}
                for b, p in sorted(self.buyers.items())
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise GraphFormatError(f"{path}: {exc}") from None
        if not isinstance(doc, Mapping):
            raise GraphFormatError(f"{path}: expected a mapping at top level")
        return cls.from_dict(doc)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


NAMED_GRAPHS = ("instance_a", "instance_b", "grid13")


def load_named(name: str) -> Network:
    """Load one of the example graphs shipped with the package."""
    if name not in NAMED_GRAPHS:
        raise KeyError(f"unknown graph {name!r}; choose from {', '.join(NAMED_GRAPHS)}")
    text = resources.files("sra").joinpath("graphs", f"{name}.yaml").read_text()
    return Network.from_dict(yaml.safe_load(text))


def load_graph(source: str | Path) -> Network:
    """Accept either a shipped graph name or a path to a graph file."""
    if isinstance(source, str) and source in NAMED_GRAPHS:
        return load_named(source)
    return Network.load(source)


# ---------------------------------------------------------------------------
# Valid-buyer subgraph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidSubgraph:
    seller: NodeId
    adj: Mapping[NodeId, frozenset[NodeId]]
    bids: Mapping[NodeId, float]

    @property
    def nodes(self) -> frozenset[NodeId]:
        return frozenset(self.adj)

    @property
    def buyers(self) -> list[NodeId]:
        return sorted(n for n in self.adj if n != self.seller)

    @property
    def edges(self) -> list[tuple[NodeId, NodeId]]:
        return sorted((u, v) for u in self.adj for v in self.adj[u] if u < v)

    def has_edge(self, u: NodeId, v: NodeId) -> bool:
        return v in self.adj.get(u, ())

    def depths(self) -> dict[NodeId, int]:
        return bfs_depths(self.adj, self.seller)


def bfs_depths(adj: Mapping[NodeId, Iterable[NodeId]], root: NodeId) -> dict[NodeId, int]:
    depth = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in depth:
                depth[v] = depth[u] + 1
                queue.append(v)
    return depth


def build_valid_subgraph(reported: ReportedProfile) -> ValidSubgraph:
    """Seller's connected component of the graph built from reported links.

    An edge {i, j} exists as soon as either endpoint lists the other.
    """
    adj: dict[NodeId, set[NodeId]] = {reported.seller: set()}
    for b in reported.bids:
        adj.setdefault(b, set())
    reporters = {reported.seller: reported.seller_neighbors, **reported.invited}
    for i, listed in reporters.items():
        for j in listed:
            if j == i or j not in adj:
                continue
            adj[i].add(j)
            adj[j].add(i)
    reach = bfs_depths(adj, reported.seller)
    valid = {n: frozenset(v for v in adj[n] if v in reach) for n in sorted(reach)}
    bids = {n: float(reported.bids[n]) for n in valid if n != reported.seller}
    return ValidSubgraph(reported.seller, valid, bids)


def v1st(bids: Mapping[NodeId, float], nodes: Iterable[NodeId]) -> float:
    """Highest reported bid in ``nodes`` (0 for an empty set)."""
    return max((bids[n] for n in nodes), default=0.0)


def highest_bidders(g: ValidSubgraph) -> list[NodeId]:
    if not g.bids:
        return []
    top = max(g.bids.values())
    return sorted(b for b, v in g.bids.items() if v == top)


# ---------------------------------------------------------------------------
# Spanning trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpanningTree:
    root: NodeId
    parent: Mapping[NodeId, NodeId]
    _children: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    @property
    def nodes(self) -> list[NodeId]:
        return sorted([self.root, *self.parent])

    @property
    def edges(self) -> list[tuple[NodeId, NodeId]]:
        return sorted(tuple(sorted(e)) for e in self.parent.items())

    def children(self) -> dict[NodeId, list[NodeId]]:
        if self._children is None:
            ch: dict[NodeId, list[NodeId]] = {n: [] for n in self.nodes}
            for c, p in sorted(self.parent.items()):
                ch[p].append(c)
            object.__setattr__(self, "_children", ch)
        return self._children

    def path_to(self, node: NodeId) -> list[NodeId]:
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
            if len(path) > len(self.parent) + 1:
                raise ValueError("parent map contains a cycle")
        return path[::-1]

    def subtree(self, node: NodeId) -> set[NodeId]:
        return _subtree(self.children(), node)

    def is_spanning_tree_of(self, g: ValidSubgraph) -> bool:
        if set(self.nodes) != set(g.nodes) or self.root != g.seller:
            return False
        if not all(g.has_edge(c, p) for c, p in self.parent.items()):
            return False
        try:
            for n in self.parent:
                self.path_to(n)
        except (ValueError, KeyError):
            return False
        return True

    @classmethod
    def from_edges(cls, root: NodeId, edges: Iterable[tuple[NodeId, NodeId]]) -> "SpanningTree":
        adj: dict[NodeId, list[NodeId]] = {}
        for u, v in edges:
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
        parent: dict[NodeId, NodeId] = {}
        seen = {root}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj.get(u, ())):
                if v not in seen:
                    seen.add(v)
                    parent[v] = u
                    queue.append(v)
        return cls(root, dict(sorted(parent.items())))


def _subtree(children: Mapping[NodeId, Iterable[NodeId]], node: NodeId) -> set[NodeId]:
    out = {node}
    stack = [node]
    while stack:
        for c in children.get(stack.pop(), ()):
            out.add(c)
            stack.append(c)
    return out


def laplacian(g: ValidSubgraph) -> tuple[list[NodeId], np.ndarray]:
    order = sorted(g.nodes)
    idx = {n: k for k, n in enumerate(order)}
    lap = np.zeros((len(order), len(order)))
    for u in order:
        lap[idx[u], idx[u]] = len(g.adj[u])
        for v in g.adj[u]:
            lap[idx[u], idx[v]] = -1.0
    return order, lap


def count_spanning_trees(g: ValidSubgraph) -> int:
    """Number of spanning trees via the matrix-tree theorem."""
    order, lap = laplacian(g)
    if len(order) <= 1:
        return 1
    k = order.index(g.seller)
    minor = np.delete(np.delete(lap, k, axis=0), k, axis=1)
    return int(round(float(np.linalg.det(minor))))


def enumerate_spanning_trees(g: ValidSubgraph, cap: int = DEFAULT_TREE_CAP) -> Iterator[SpanningTree]:
    """Yield every spanning tree of ``g`` exactly once.

    Include/exclude recursion over the sorted edge list; an edge may only be
    excluded when the remaining edges still connect the graph.
    """
    count = count_spanning_trees(g)
    if count > cap:
        raise TreeCountExceeded(count, cap)
    nodes = sorted(g.nodes)
    if len(nodes) == 1:
        yield SpanningTree(g.seller, {})
        return
    edges = g.edges
    need = len(nodes) - 1

    def find(uf, x):
        while uf[x] != x:
            uf[x] = uf[uf[x]]
            x = uf[x]
        return x

    def connected_with(chosen, rest) -> bool:
        uf = {n: n for n in nodes}
        comps = len(nodes)
        for u, v in (*chosen, *rest):
            ru, rv = find(uf, u), find(uf, v)
            if ru != rv:
                uf[ru] = rv
                comps -= 1
                if comps == 1:
                    return True
        return comps == 1

    def rec(k: int, chosen: list, uf: dict):
        if len(chosen) == need:
            yield SpanningTree.from_edges(g.seller, chosen)
            return
        if len(edges) - k < need - len(chosen):
            return
        u, v = edges[k]
        ru, rv = find(uf, u), find(uf, v)
        if ru != rv:
            uf2 = dict(uf)
            uf2[ru] = rv
            chosen.append((u, v))
            yield from rec(k + 1, chosen, uf2)
            chosen.pop()
        if connected_with(chosen, edges[k + 1:]):
            yield from rec(k + 1, chosen, uf)

    yield from rec(0, [], {n: n for n in nodes})


def sample_spanning_tree(g: ValidSubgraph, rng: random.Random) -> SpanningTree:
    """Uniform random spanning tree (Wilson's loop-erased random walks)."""
    nodes = sorted(g.nodes)
    nbrs = {n: sorted(g.adj[n]) for n in nodes}
    in_tree = {g.seller}
    parent: dict[NodeId, NodeId] = {}
    for start in nodes:
        u = start
        nxt: dict[NodeId, NodeId] = {}
        while u not in in_tree:
            nxt[u] = rng.choice(nbrs[u])
            u = nxt[u]
        u = start
        while u not in in_tree:
            in_tree.add(u)
            parent[u] = nxt[u]
            u = nxt[u]
    return SpanningTree(g.seller, dict(sorted(parent.items())))


# ---------------------------------------------------------------------------
# Diffusion paths
# ---------------------------------------------------------------------------

def is_diffusion_path(path: Sequence[NodeId], g: ValidSubgraph) -> bool:
    return not any(g.has_edge(path[i], path[j])
                   for i in range(len(path)) for j in range(i + 2, len(path)))


def transform_to_diffusion_path(path: Sequence[NodeId], g: ValidSubgraph) -> list[NodeId]:
    """Splice back-edges into ``path`` until no back-edge remains.

    Each step takes the back-edge {h_i, h_j} with the smallest i and, among
    those, the largest j, and drops h_{i+1} .. h_{j-1}.
    """
    path = list(path)
    while True:
        for i in range(len(path)):
            far = next((j for j in range(len(path) - 1, i + 1, -1) if g.has_edge(path[i], path[j])), None)
            if far is not None:
                path = path[:i + 1] + path[far:]
                break
        else:
            return path


def excluded_sets(tree: SpanningTree, path: Sequence[NodeId], g: ValidSubgraph) -> list[set[NodeId]]:
    """T_{-h_j} for every j = 1..len(path)-1, returned in order.

    Host h_k pulls all its neighbours that are not earlier hosts directly
    under herself; T_{-h_{k+1}} then adds h_k and every branch of h_k other
    than h_{k+1} to T_{-h_k}.
    """
    parent = dict(tree.parent)
    out: list[set[NodeId]] = []
    acc: set[NodeId] = set()
    for k in range(len(path) - 1):
        host, nxt = path[k], path[k + 1]
        hosts = set(path[:k + 1])
        for n in g.adj[host]:
            if n not in hosts:
                parent[n] = host
        if host != g.seller:
            acc.add(host)
        children: dict[NodeId, list[NodeId]] = {}
        for c, p in parent.items():
            children.setdefault(p, []).append(c)
        if nxt not in children.get(host, ()):
            raise ValueError(f"{nxt!r} is not adjacent to {host!r}; not a diffusion path")
        for c in children.get(host, ()):
            if c != nxt:
                acc |= _subtree(children, c)
        out.append(set(acc))
    return out


def excluded_set(tree: SpanningTree, path: Sequence[NodeId], j: int, g: ValidSubgraph) -> set[NodeId]:
    if not 1 <= j <= len(path) - 1:
        raise IndexError(f"path index {j} outside 1..{len(path) - 1}")
    return excluded_sets(tree, path[:j + 1], g)[j - 1]
