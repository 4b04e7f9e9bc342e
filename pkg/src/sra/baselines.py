"""Comparison mechanisms: IDM and second-price among the seller's neighbours."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Mapping

from .crm import OutcomeSummary, _as_reported, empty_summary
from .network import Network, NodeId, ReportedProfile, ValidSubgraph, build_valid_subgraph, highest_bidders, v1st


@dataclass(frozen=True)
class CriticalSequence:
    """Cut vertices between the seller and ``target``, nearest to the seller first."""

    target: NodeId
    nodes: tuple[NodeId, ...]
    dominated: Mapping[NodeId, frozenset[NodeId]]


def _reachable_without(g: ValidSubgraph, removed: NodeId) -> set[NodeId]:
    seen = {g.seller}
    queue = deque([g.seller])
    while queue:
        u = queue.popleft()
        for v in g.adj[u]:
            if v != removed and v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def dominated_sets(g: ValidSubgraph) -> dict[NodeId, frozenset[NodeId]]:
    """For each buyer d, the buyers cut off from the seller once d is removed (d included)."""
    everyone = set(g.buyers)
    return {d: frozenset(everyone - _reachable_without(g, d)) for d in g.buyers}


def critical_sequence(g: ValidSubgraph, target: NodeId,
                      dominated: Mapping[NodeId, frozenset[NodeId]] | None = None) -> CriticalSequence:
    dominated = dominated if dominated is not None else dominated_sets(g)
    crit = [d for d in g.buyers if target in dominated[d]]
    crit.sort(key=lambda d: (-len(dominated[d]), d))
    return CriticalSequence(target, tuple(crit), {d: dominated[d] for d in crit})


def idm_outcome(g: ValidSubgraph, z: NodeId, dominated=None) -> tuple[NodeId, dict[NodeId, float]]:
    """Winner and payments of IDM for top bidder ``z``."""
    seq = critical_sequence(g, z, dominated)
    everyone = set(g.buyers)
    d = seq.nodes
    without = [v1st(g.bids, everyone - seq.dominated[x]) for x in d]
    k = len(d)
    w = k - 1
    for m in range(k):
        nxt = without[m + 1] if m + 1 < k else v1st(g.bids, everyone)
        if g.bids[d[m]] == nxt:
            w = m
            break
    payments = {b: 0.0 for b in g.buyers}
    payments[d[w]] = without[w]
    for i in range(w):
        payments[d[i]] = without[i] - without[i + 1]
    return d[w], payments


def idm_run(instance: Network | ReportedProfile, seed: int = 0) -> OutcomeSummary:
    """Information Diffusion Mechanism; a tie for the top bid is averaged over the tied bidders.

    ``seed`` is accepted for interface parity; the tie closure is deterministic.
    """
    reported, valuations = _as_reported(instance)
    g = build_valid_subgraph(reported)
    if not g.buyers:
        return empty_summary("idm", valuations)
    dom = dominated_sets(g)
    tops = highest_bidders(g)
    alloc = {b: 0.0 for b in valuations}
    pay = {b: 0.0 for b in valuations}
    revenue = 0.0
    for z in tops:
        winner, payments = idm_outcome(g, z, dom)
        alloc[winner] += 1.0 / len(tops)
        for b, p in payments.items():
            pay[b] += p / len(tops)
            revenue += p / len(tops)
    crit = sorted({d for z in tops for d in critical_sequence(g, z, dom).nodes})
    return OutcomeSummary("idm", alloc, pay, dict(valuations), revenue, len(tops), "exact",
                          {"critical": crit})


def vcg_neighbors(instance: Network | ReportedProfile) -> OutcomeSummary:
    """Second-price auction among the seller's neighbours only; no diffusion."""
    reported, valuations = _as_reported(instance)
    bids = {b: reported.bids[b] for b in sorted(reported.seller_neighbors)}
    if not bids:
        return empty_summary("vcg", valuations)
    ranked = sorted(bids.values(), reverse=True)
    price = ranked[1] if len(ranked) > 1 else 0.0
    tops = sorted(b for b, v in bids.items() if v == ranked[0])
    alloc = {b: 0.0 for b in valuations}
    pay = {b: 0.0 for b in valuations}
    for b in tops:
        alloc[b] = 1.0 / len(tops)
        pay[b] = price / len(tops)
    return OutcomeSummary("vcg", alloc, pay, dict(valuations), price, 1, "exact")
