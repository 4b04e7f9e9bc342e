"""Centralized reduction of the resale auction.

Every spanning tree of the valid subgraph is resold along the diffusion
path to the highest bidder; allocations and payments are averaged over the
trees. Two tree distributions are supported:

* ``uniform``: every spanning tree counts once.
* ``invitation``: a tree is a choice of one inviter per buyer, weighted by
  the product of 1/|inviters|. This is the distribution the distributed
  auction's random parent draw induces.
"""
from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Iterator, Literal, Mapping

from . import engine
from .network import (DEFAULT_TREE_CAP, Network, NodeId, ReportedProfile, SpanningTree,
                      TreeCountExceeded, ValidSubgraph, build_valid_subgraph,
                      count_spanning_trees, enumerate_spanning_trees, excluded_sets,
                      highest_bidders, sample_spanning_tree, transform_to_diffusion_path, v1st)

Distribution = Literal["uniform", "invitation"]
DISTRIBUTION_ALIASES = {"uniform": "uniform", "uniform_trees": "uniform",
                        "invitation": "invitation", "invitation_weighted": "invitation"}


def canonical_distribution(name: str) -> Distribution:
    try:
        return DISTRIBUTION_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown tree distribution {name!r}; choose from {sorted(DISTRIBUTION_ALIASES)}") from None
Mode = Literal["exact", "monte_carlo"]

DEFAULT_TREE_SAMPLES = 1000


@dataclass(frozen=True)
class TreeOutcome:
    tree: SpanningTree
    path: tuple[NodeId, ...]
    winner: NodeId
    payments: Mapping[NodeId, float]
    revenue: float

    def same_as(self, other: "TreeOutcome") -> bool:
        keys = set(self.payments) | set(other.payments)
        return (self.winner == other.winner and self.revenue == other.revenue
                and all(self.payments.get(k, 0.0) == other.payments.get(k, 0.0) for k in keys))


@dataclass
class OutcomeSummary:
    """Expected allocation and payment per buyer for one mechanism."""

    mechanism: str
    allocation: dict[NodeId, float]
    payment: dict[NodeId, float]
    valuations: dict[NodeId, float]
    revenue: float
    count: int
    mode: str = "exact"
    extra: dict = field(default_factory=dict)

    def utility(self, buyer: NodeId) -> float:
        return self.allocation.get(buyer, 0.0) * self.valuations.get(buyer, 0.0) - self.payment.get(buyer, 0.0)

    @property
    def utilities(self) -> dict[NodeId, float]:
        return {b: self.utility(b) for b in sorted(self.valuations)}

    def to_table(self) -> str:
        rows = [f"# mechanism={self.mechanism} mode={self.mode} count={self.count} revenue={self.revenue!r}",
                "id\tpi\texpected_payment\texpected_utility"]
        for b in sorted(self.valuations):
            rows.append(f"{b}\t{self.allocation.get(b, 0.0)!r}\t{self.payment.get(b, 0.0)!r}\t{self.utility(b)!r}")
        return "\n".join(rows) + "\n"


def empty_summary(mechanism: str, valuations: Mapping[NodeId, float], mode: str = "exact") -> OutcomeSummary:
    zeros = {b: 0.0 for b in sorted(valuations)}
    return OutcomeSummary(mechanism, dict(zeros), dict(zeros), dict(valuations), 0.0, 0, mode)


# ---------------------------------------------------------------------------
# Per-tree evaluation
# ---------------------------------------------------------------------------

def closed_form_tree_outcome(tree: SpanningTree, g: ValidSubgraph, z: NodeId | None = None) -> TreeOutcome:
    """Allocation and payments on one tree straight from the excluded sets.

    The winner is the first path node whose bid is the highest among the
    buyers left once the next path node's branch is removed; that node pays the
    highest bid without its own branch, and every earlier path node pays the
    (non-positive) difference of consecutive thresholds.
    """
    if z is None:
        z = highest_bidders(g)[0]
    path = transform_to_diffusion_path(tree.path_to(z), g)
    sets = excluded_sets(tree, path, g)
    thresholds = [v1st(g.bids, s) for s in sets]
    top = v1st(g.bids, g.buyers)
    l = len(path) - 1
    w = l
    for j in range(1, l + 1):
        nxt = thresholds[j] if j < l else top
        if g.bids[path[j]] == nxt:
            w = j
            break
    payments = {b: 0.0 for b in g.buyers}
    payments[path[w]] = thresholds[w - 1]
    for j in range(1, w):
        payments[path[j]] = thresholds[j - 1] - thresholds[j]
    return TreeOutcome(tree, tuple(path), path[w], payments, thresholds[0])


def engine_tree_outcome(tree: SpanningTree, g: ValidSubgraph, z: NodeId | None = None) -> TreeOutcome:
    """Run the resale stage of the distributed engine with ``tree`` as the aggregation forest.

    Hosts notify every graph neighbour; ties in a local auction go to the
    branch holding ``z``.
    """
    if z is None:
        z = highest_bidders(g)[0]
    forest = engine.AggregationForest(
        g.seller, dict(g.bids), {c: frozenset([p]) for c, p in tree.parent.items()})
    invitees = {n: sorted(g.adj[n]) for n in g.nodes}

    def toward_z(host, tied, f):
        for j in tied:
            if z in f.subtree(j):
                return j
        return tied[0]

    trace = engine.run_stage3_allocation(forest, invitees, engine.ScriptedChooser(), tie_break=toward_z)
    payments = {b: trace.payments.get(b, 0.0) for b in g.buyers}
    return TreeOutcome(tree, tuple(trace.path), trace.winner, payments, trace.revenue)


EVALUATORS = {"engine": engine_tree_outcome, "closed_form": closed_form_tree_outcome}


# ---------------------------------------------------------------------------
# Tree distributions
# ---------------------------------------------------------------------------

def invitation_inviters(g: ValidSubgraph) -> dict[NodeId, list[NodeId]]:
    """Neighbours one BFS level closer to the seller, per buyer."""
    depth = g.depths()
    return {b: sorted(n for n in g.adj[b] if depth[n] == depth[b] - 1) for b in g.buyers}


def count_invitation_trees(g: ValidSubgraph) -> int:
    return math.prod(len(v) for v in invitation_inviters(g).values())


def enumerate_invitation_trees(g: ValidSubgraph, cap: int = DEFAULT_TREE_CAP
                               ) -> Iterator[tuple[float, SpanningTree]]:
    inv = invitation_inviters(g)
    count = math.prod(len(v) for v in inv.values())
    if count > cap:
        raise TreeCountExceeded(count, cap)
    buyers = sorted(inv)
    weight = 1.0 / count
    for combo in itertools.product(*(inv[b] for b in buyers)):
        yield weight, SpanningTree(g.seller, dict(zip(buyers, combo)))


def sample_invitation_tree(g: ValidSubgraph, rng: random.Random,
                           inv: Mapping[NodeId, list[NodeId]] | None = None) -> SpanningTree:
    inv = inv or invitation_inviters(g)
    return SpanningTree(g.seller, {b: rng.choice(inv[b]) for b in sorted(inv)})


def tree_count(g: ValidSubgraph, distribution: Distribution = "uniform") -> int:
    if canonical_distribution(distribution) == "uniform":
        return count_spanning_trees(g)
    return count_invitation_trees(g)


def weighted_trees(g: ValidSubgraph, distribution: Distribution, mode: Mode, samples: int,
                   rng: random.Random, cap: int) -> Iterator[tuple[float, SpanningTree]]:
    if mode == "exact":
        if distribution == "uniform":
            n = count_spanning_trees(g)
            for t in enumerate_spanning_trees(g, cap):
                yield 1.0 / n, t
        else:
            yield from enumerate_invitation_trees(g, cap)
        return
    inv = invitation_inviters(g)
    for _ in range(samples):
        if distribution == "uniform":
            yield 1.0 / samples, sample_spanning_tree(g, rng)
        else:
            yield 1.0 / samples, sample_invitation_tree(g, rng, inv)


# ---------------------------------------------------------------------------
# The mechanism
# ---------------------------------------------------------------------------

def _as_reported(instance: Network | ReportedProfile) -> tuple[ReportedProfile, dict[NodeId, float]]:
    if isinstance(instance, Network):
        return instance.truthful(), instance.valuations
    return instance, dict(instance.bids)


def crm_run(instance: Network | ReportedProfile, mode: Mode = "exact", samples: int = DEFAULT_TREE_SAMPLES,
            seed: int = 0, distribution: Distribution = "uniform", cap: int = DEFAULT_TREE_CAP,
            evaluator: str = "engine") -> OutcomeSummary:
    """Expected outcome over spanning trees.

    In exact mode a tie for the highest bid is closed by averaging over all
    tied bidders; in Monte-Carlo mode each sampled tree draws its own.
    Utilities use true valuations when a :class:`Network` is given, reported
    bids otherwise.
    """
    distribution = canonical_distribution(distribution)
    reported, valuations = _as_reported(instance)
    g = build_valid_subgraph(reported)
    if not g.buyers:
        return empty_summary("crm", valuations, mode)
    evaluate = EVALUATORS[evaluator]
    rng = random.Random(seed)
    tops = highest_bidders(g)
    alloc = {b: 0.0 for b in valuations}
    pay = {b: 0.0 for b in valuations}
    revenue = 0.0
    n = 0
    for weight, tree in weighted_trees(g, distribution, mode, samples, rng, cap):
        n += 1
        zs = tops if mode == "exact" else [tops[rng.randrange(len(tops))] if len(tops) > 1 else tops[0]]
        for z in zs:
            out = evaluate(tree, g, z)
            w = weight / len(zs)
            alloc[out.winner] += w
            for b, p in out.payments.items():
                pay[b] += w * p
            revenue += w * out.revenue
    return OutcomeSummary("crm", alloc, pay, dict(valuations), revenue, n, mode,
                          {"distribution": distribution})


# ---------------------------------------------------------------------------
# Equivalence with the distributed auction
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    trees_checked: int
    tree_mismatches: list[tuple[SpanningTree, TreeOutcome, TreeOutcome]]
    sra_samples: int
    distribution_rows: list[dict]
    divergence: float

    @property
    def per_tree_ok(self) -> bool:
        return not self.tree_mismatches

    @property
    def distribution_ok(self) -> bool:
        return all(r["ok"] for r in self.distribution_rows)

    @property
    def ok(self) -> bool:
        return self.per_tree_ok and self.distribution_ok

    def to_text(self) -> str:
        lines = [f"trees_checked={self.trees_checked} mismatches={len(self.tree_mismatches)}",
                 f"sra_samples={self.sra_samples} uniform_vs_invitation_divergence={self.divergence!r}"]
        for r in self.distribution_rows:
            lines.append("{buyer}\t{quantity}\tsra={sra!r}\tse={se!r}\tcrm={crm!r}\t{verdict}".format(
                verdict="ok" if r["ok"] else "MISMATCH", **r))
        return "\n".join(lines) + "\n"


def per_tree_mismatches(g: ValidSubgraph, cap: int = DEFAULT_TREE_CAP):
    """Trees on which the closed form and the engine disagree (any tie-break choice of z)."""
    bad = []
    n = 0
    for tree in enumerate_spanning_trees(g, cap):
        for z in highest_bidders(g):
            n += 1
            a = closed_form_tree_outcome(tree, g, z)
            b = engine_tree_outcome(tree, g, z)
            if not a.same_as(b):
                bad.append((tree, a, b))
    return n, bad


def sra_monte_carlo(network: Network, samples: int, seed: int = 0) -> dict[str, dict[NodeId, list[float]]]:
    """Per-seed allocation/payment vectors of the intended distributed auction."""
    alloc = {b: [] for b in network.buyers}
    pay = {b: [] for b in network.buyers}
    for s in range(samples):
        tr = engine.run_sra(network, seed=seed * 1_000_003 + s)
        for b in network.buyers:
            alloc[b].append(1.0 if tr.winner == b else 0.0)
            pay[b].append(tr.payments.get(b, 0.0))
    return {"pi": alloc, "p": pay}


def mean_se(xs: list[float]) -> tuple[float, float]:
    n = len(xs)
    m = math.fsum(xs) / n
    if n < 2:
        return m, 0.0
    var = math.fsum((x - m) ** 2 for x in xs) / (n - 1)
    return m, math.sqrt(var / n)


def summary_divergence(a: OutcomeSummary, b: OutcomeSummary) -> float:
    keys = sorted(set(a.allocation) | set(b.allocation))
    return max([abs(a.allocation.get(k, 0.0) - b.allocation.get(k, 0.0)) for k in keys]
               + [abs(a.payment.get(k, 0.0) - b.payment.get(k, 0.0)) for k in keys]
               + [abs(a.revenue - b.revenue)])


def crm_equivalence_check(network: Network, samples: int = 10_000, seed: int = 0,
                          cap: int = DEFAULT_TREE_CAP, z_sigma: float = 3.0,
                          float_floor: float = 1e-12) -> EquivalenceReport:
    """Check the reduction three ways.

    (a) closed form == engine on every spanning tree, exactly;
    (b) distributed-auction Monte Carlo vs invitation-weighted CRM, per buyer,
        within ``z_sigma`` standard errors;
    (c) the gap between the uniform and invitation-weighted summaries.
    """
    g = build_valid_subgraph(network.truthful())
    n_trees, bad = per_tree_mismatches(g, cap)
    weighted = crm_run(network, distribution="invitation", cap=cap)
    uniform = crm_run(network, distribution="uniform", cap=cap)
    mc = sra_monte_carlo(network, samples, seed)
    rows = []
    for b in sorted(network.buyers):
        for q, est, target in (("pi", mc["pi"][b], weighted.allocation[b]),
                               ("p", mc["p"][b], weighted.payment[b])):
            m, se = mean_se(est)
            rows.append({"buyer": b, "quantity": q, "sra": m, "se": se, "crm": target,
                         "ok": abs(m - target) <= z_sigma * se + float_floor})
    return EquivalenceReport(n_trees, bad, samples, rows, summary_divergence(uniform, weighted))


def sra_summary(network: Network, strategies=None, mode: Mode = "exact", samples: int = DEFAULT_TREE_SAMPLES,
                seed: int = 0, limit: int = 100_000) -> OutcomeSummary:
    """Expected outcome of the distributed auction.

    Exact mode weighs every random branch (parent draws and tie-breaks) by
    its probability; Monte-Carlo mode averages ``samples`` seeded runs.
    """
    alloc = {b: 0.0 for b in network.buyers}
    pay = {b: 0.0 for b in network.buyers}
    revenue = 0.0
    if mode == "exact":
        runs = list(engine.sra_realizations(network, strategies, limit=limit))
    else:
        runs = [(1.0 / samples, engine.run_sra(network, strategies, seed=seed * 1_000_003 + s))
                for s in range(samples)]
    for prob, tr in runs:
        if tr.winner is not None:
            alloc[tr.winner] += prob
        for b, p in tr.payments.items():
            pay[b] += prob * p
        revenue += prob * tr.revenue
    return OutcomeSummary("sra", alloc, pay, network.valuations, revenue, len(runs), mode)
