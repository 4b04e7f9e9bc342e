"""Sequential resale auction: diffusion, aggregation and resale stages.

Every agent acts through a :class:`Strategy` made of three actions: what
it reveals (bid and invited neighbours), what it computes from the bids
it receives, and which inviters it passes the result to. Randomness is
drawn through a *chooser* so a run can be replayed with a seed or walked
exhaustively over every random branch (:func:`enumerate_realizations`).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Iterable, Iterator, Mapping, Optional, Protocol, Sequence

from .network import BuyerProfile, Network, NodeId, ReportedProfile


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class Chooser(Protocol):
    def choice(self, options: Sequence, key: tuple): ...


class SeededChooser:
    """Independent stream per (seed, key).

    Keys name the agent and the decision, so a deviation by one agent never
    shifts the draws of the others.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed

    def choice(self, options: Sequence, key: tuple):
        if len(options) == 1:
            return options[0]
        rng = random.Random("|".join(map(str, (self.seed, *key))))
        return options[rng.randrange(len(options))]


class ScriptedChooser:
    """Plays a fixed list of branch indices, then index 0; records every branch point."""

    def __init__(self, script: Sequence[int] = ()):
        self.script = list(script)
        self.trace: list[tuple[int, int]] = []

    def choice(self, options: Sequence, key: tuple):
        if len(options) == 1:
            return options[0]
        pos = len(self.trace)
        idx = self.script[pos] if pos < len(self.script) else 0
        self.trace.append((len(options), idx))
        return options[idx]


class TooManyRealizations(RuntimeError):
    pass


def enumerate_realizations(run: Callable[[Chooser], object], limit: int | None = None
                           ) -> Iterator[tuple[float, object]]:
    """Yield ``(probability, run(chooser))`` for every random branch of ``run``.

    Each choice among k options is uniform, so a leaf's probability is the
    product of 1/k over its branch points. ``run`` must be deterministic
    given the choices it receives.
    """
    stack: list[tuple[int, ...]] = [()]
    seen = 0
    while stack:
        script = stack.pop()
        chooser = ScriptedChooser(script)
        result = run(chooser)
        prob = 1.0
        for n, _ in chooser.trace:
            prob /= n
        taken = [i for _, i in chooser.trace]
        for pos in range(len(script), len(chooser.trace)):
            n = chooser.trace[pos][0]
            for alt in range(n - 1, 0, -1):
                stack.append(tuple(taken[:pos]) + (alt,))
        seen += 1
        if limit is not None and seen > limit:
            raise TooManyRealizations(f"more than {limit} random realizations")
        yield prob, result


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

def truthful_reveal(profile: BuyerProfile) -> tuple[float, frozenset[NodeId]]:
    return profile.valuation, profile.neighbors


def aggregate_max(received: Sequence[float], own_bid: float) -> float:
    return max([*received, own_bid])


def pass_one_random_inviter(agent: NodeId, bid: float, inviters: Sequence[NodeId],
                            chooser: Chooser) -> frozenset[NodeId]:
    if not inviters:
        return frozenset()
    return frozenset([chooser.choice(list(inviters), ("parent", agent))])


def _same_reserve(reserve: float) -> float:
    return reserve


@dataclass(frozen=True)
class Strategy:
    """One agent's behaviour: reveal (t), pass (q) and compute (f)."""

    reveal: Callable[[BuyerProfile], tuple[float, Iterable[NodeId]]] = truthful_reveal
    pass_to: Callable[[NodeId, float, Sequence[NodeId], Chooser], Iterable[NodeId]] = pass_one_random_inviter
    compute: Callable[[Sequence[float], float], float] = aggregate_max
    claim_reserve: Callable[[float], float] = _same_reserve
    name: str = "intended"


INTENDED = Strategy()


def reveal_all(network: Network, strategies: Mapping[NodeId, Strategy] | None = None) -> ReportedProfile:
    strategies = strategies or {}
    bids, invited = {}, {}
    for b, prof in network.buyers.items():
        bid, inv = strategies.get(b, INTENDED).reveal(prof)
        inv = frozenset(inv)
        if not inv <= prof.neighbors:
            raise ValueError(f"{b!r} invites non-neighbours {sorted(inv - prof.neighbors)}")
        if bid < 0:
            raise ValueError(f"{b!r} reveals a negative bid")
        bids[b], invited[b] = float(bid), inv
    return ReportedProfile(network.seller, network.seller_neighbors, bids, invited)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

class LedgerVerificationError(RuntimeError):
    """A host claimed a purchasing price that the ledger does not back."""


@dataclass(frozen=True)
class LedgerRecord:
    index: int
    host: NodeId
    winner: NodeId
    price: float


class Ledger:
    """Append-only record of every resale."""

    def __init__(self, seller: NodeId):
        self.seller = seller
        self._records: list[LedgerRecord] = []

    @property
    def records(self) -> tuple[LedgerRecord, ...]:
        return tuple(self._records)

    def append(self, host: NodeId, winner: NodeId, price: float) -> LedgerRecord:
        rec = LedgerRecord(len(self._records), host, winner, price)
        self._records.append(rec)
        return rec

    def purchase_price(self, node: NodeId) -> Optional[float]:
        if node == self.seller:
            return 0.0
        for rec in reversed(self._records):
            if rec.winner == node:
                return rec.price
        return None

    def verify(self, host: NodeId, claimed: float) -> None:
        expected = self.purchase_price(host)
        if expected is None or claimed != expected:
            raise LedgerVerificationError(
                f"manipulation detected: {host!r} claims reserve {claimed!r}, "
                f"ledger shows {expected!r}")


# ---------------------------------------------------------------------------
# Stage 1: top-down diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionGraph:
    seller: NodeId
    depth: Mapping[NodeId, int]
    inviters: Mapping[NodeId, tuple[NodeId, ...]]
    invitees: Mapping[NodeId, tuple[NodeId, ...]]
    bids: Mapping[NodeId, float]

    @property
    def buyers(self) -> list[NodeId]:
        return sorted(n for n in self.depth if n != self.seller)


def run_stage1_diffusion(reported: ReportedProfile) -> DiffusionGraph:
    """Synchronous rounds from the seller.

    ``i`` becomes an inviter of ``j`` iff ``i`` lists ``j`` and ``j`` is first
    informed in the round right after ``i``. Links between buyers informed in
    the same round carry no invitation.
    """
    seller = reported.seller
    invited = {seller: reported.seller_neighbors, **reported.invited}
    depth = {seller: 0}
    inviters: dict[NodeId, list[NodeId]] = {}
    frontier = [seller]
    t = 0
    while frontier:
        fresh: dict[NodeId, list[NodeId]] = {}
        for i in sorted(frontier):
            for j in sorted(invited.get(i, ())):
                if j in depth or j not in reported.bids:
                    continue
                fresh.setdefault(j, []).append(i)
        t += 1
        for j, inv in fresh.items():
            depth[j] = t
            inviters[j] = sorted(inv)
        frontier = list(fresh)
    invitees: dict[NodeId, list[NodeId]] = {n: [] for n in depth}
    for j, inv in inviters.items():
        for i in inv:
            invitees[i].append(j)
    return DiffusionGraph(
        seller=seller,
        depth=dict(sorted(depth.items())),
        inviters={j: tuple(v) for j, v in sorted(inviters.items())},
        invitees={i: tuple(sorted(v)) for i, v in sorted(invitees.items())},
        bids={b: reported.bids[b] for b in sorted(inviters)},
    )


# ---------------------------------------------------------------------------
# Stage 2: bottom-up aggregation
# ---------------------------------------------------------------------------

@dataclass
class AggregationForest:
    """Chosen parents and aggregated bids; mutated by Stage-3 reattachment.

    ``parents[i]`` is the set of nodes ``i`` reports its aggregated bid to;
    intended play makes it a singleton, so the structure is a tree rooted
    at the seller. Deviant passing turns it into a DAG or orphans a branch.
    """

    seller: NodeId
    bids: dict[NodeId, float]
    parents: dict[NodeId, frozenset[NodeId]]
    strategies: Mapping[NodeId, Strategy] = field(default_factory=dict)
    agg: dict[NodeId, float] = field(default_factory=dict)

    def children(self) -> dict[NodeId, list[NodeId]]:
        ch: dict[NodeId, list[NodeId]] = {n: [] for n in (self.seller, *self.bids)}
        for c in sorted(self.parents):
            for p in sorted(self.parents[c]):
                ch[p].append(c)
        return ch

    def subtree(self, node: NodeId) -> set[NodeId]:
        ch = self.children()
        out, stack = {node}, [node]
        while stack:
            for c in ch[stack.pop()]:
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def recompute(self) -> None:
        """Re-run every agent's compute action bottom-up."""
        ch = self.children()
        ts = TopologicalSorter({n: ch[n] for n in sorted(self.bids)})
        try:
            order = list(ts.static_order())
        except CycleError as exc:
            raise ValueError(f"aggregation structure has a cycle: {exc.args[1]}") from None
        agg: dict[NodeId, float] = {}
        for n in order:
            if n == self.seller:
                continue
            f = self.strategies.get(n, INTENDED).compute
            agg[n] = f([agg[c] for c in ch[n]], self.bids[n])
        self.agg = agg


def run_stage2_aggregation(dg: DiffusionGraph, strategies: Mapping[NodeId, Strategy] | None,
                           chooser: Chooser) -> AggregationForest:
    strategies = strategies or {}
    for j, inv in dg.inviters.items():
        if any(dg.depth[i] >= dg.depth[j] for i in inv):
            raise ValueError(f"inviter graph has a cycle through {j!r}")
    order = sorted(dg.buyers, key=lambda b: (-dg.depth[b], b))
    received: dict[NodeId, list[float]] = {n: [] for n in dg.depth}
    parents: dict[NodeId, frozenset[NodeId]] = {}
    agg: dict[NodeId, float] = {}
    for i in order:
        s = strategies.get(i, INTENDED)
        agg[i] = s.compute(received[i], dg.bids[i])
        targets = frozenset(s.pass_to(i, agg[i], dg.inviters[i], chooser))
        if not targets <= set(dg.inviters[i]):
            raise ValueError(f"{i!r} passes to non-inviters {sorted(targets - set(dg.inviters[i]))}")
        parents[i] = targets
        for t in sorted(targets):
            received[t].append(agg[i])
    return AggregationForest(dg.seller, dict(dg.bids), dict(sorted(parents.items())),
                             strategies, dict(sorted(agg.items())))


# ---------------------------------------------------------------------------
# Stage 3: top-down allocation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalAuctionResult:
    host: NodeId
    bids: Mapping[NodeId, float]
    reserve: float
    first: float
    second: float
    price: float
    winner: Optional[NodeId]

    @property
    def sold(self) -> bool:
        return self.winner is not None


TieBreak = Callable[[NodeId, list, AggregationForest], NodeId]


def local_auction(host: NodeId, bids: Mapping[NodeId, float], reserve: float, host_bid: float,
                  chooser: Chooser, *, origin: bool = False,
                  pick: Callable[[list], NodeId] | None = None) -> LocalAuctionResult:
    """Second-price auction with reserve equal to the host's purchasing price.

    The top bidder wins iff the host's own bid is below the selling price
    max(reserve, second) and the top bid covers that price. The original
    seller (``origin``) sells whenever anyone participates.
    """
    values = sorted(bids.values(), reverse=True)
    first = values[0] if values else 0.0
    second = values[1] if len(values) > 1 else 0.0
    price = max(reserve, second)
    if not values or first < price or (not origin and host_bid >= price):
        return LocalAuctionResult(host, dict(sorted(bids.items())), reserve, first, second, price, None)
    top = sorted(j for j, b in bids.items() if b == first)
    if len(top) == 1:
        winner = top[0]
    elif pick is not None:
        winner = pick(top)
    else:
        winner = chooser.choice(top, ("tie", host))
    return LocalAuctionResult(host, dict(sorted(bids.items())), reserve, first, second, price, winner)


def detach_and_reaggregate(forest: AggregationForest, host: NodeId,
                           participants: Iterable[NodeId]) -> AggregationForest:
    """Attach every participant solely to ``host`` and recompute aggregated bids."""
    changed = False
    for j in participants:
        if forest.parents.get(j) != frozenset([host]):
            forest.parents[j] = frozenset([host])
            changed = True
    if changed or not forest.agg:
        forest.recompute()
    return forest


@dataclass
class ResaleTrace:
    seller: NodeId
    auctions: list[LocalAuctionResult]
    path: list[NodeId]
    winner: Optional[NodeId]
    payments: dict[NodeId, float]
    revenue: float
    ledger: Ledger

    def allocation(self) -> dict[NodeId, float]:
        return {b: 1.0 if b == self.winner else 0.0 for b in self.payments}

    def utilities(self, valuations: Mapping[NodeId, float]) -> dict[NodeId, float]:
        out = {b: 0.0 - self.payments.get(b, 0.0) for b in valuations}
        if self.winner is not None:
            out[self.winner] += valuations[self.winner]
        return out

    def to_text(self) -> str:
        lines = []
        for k, a in enumerate(self.auctions, 1):
            bids = ",".join(f"{j}:{b!r}" for j, b in sorted(a.bids.items()))
            lines.append(f"auction {k} host={a.host} reserve={a.reserve!r} bids={bids} "
                         f"winner={a.winner if a.sold else '-'} price={a.price!r}")
        lines.append(f"result winner={self.winner or '-'} revenue={self.revenue!r} "
                     f"path={'>'.join(self.path)}")
        for b, p in sorted(self.payments.items()):
            lines.append(f"payment {b} {p!r}")
        return "\n".join(lines) + "\n"


def run_stage3_allocation(forest: AggregationForest, invitees: Mapping[NodeId, Sequence[NodeId]],
                          chooser: Chooser, ledger: Ledger | None = None,
                          tie_break: TieBreak | None = None) -> ResaleTrace:
    """Resell along the chain of local auctions until a host keeps the item.

    ``invitees[h]`` are the nodes host ``h`` notifies; earlier hosts are
    never participants.
    """
    seller = forest.seller
    ledger = ledger or Ledger(seller)
    payments = {b: 0.0 for b in forest.bids}
    auctions: list[LocalAuctionResult] = []
    path = [seller]
    host, reserve = seller, 0.0
    if not forest.agg:
        forest.recompute()
    while True:
        on_path = set(path)
        participants = [j for j in invitees.get(host, ()) if j not in on_path]
        detach_and_reaggregate(forest, host, participants)
        claimed = forest.strategies.get(host, INTENDED).claim_reserve(reserve) if host != seller else reserve
        ledger.verify(host, claimed)
        pick = None
        if tie_break is not None:
            h = host
            pick = lambda tied: tie_break(h, tied, forest)  # noqa: E731
        res = local_auction(host, {j: forest.agg[j] for j in participants}, claimed,
                            forest.bids.get(host, 0.0), chooser, origin=host == seller, pick=pick)
        auctions.append(res)
        if not res.sold:
            break
        assert res.first >= res.price
        ledger.append(host, res.winner, res.price)
        payments[res.winner] += res.price
        if host != seller:
            payments[host] -= res.price
        path.append(res.winner)
        host, reserve = res.winner, res.price
    revenue = auctions[0].price if auctions[0].sold else 0.0
    winner = path[-1] if len(path) > 1 else None
    return ResaleTrace(seller, auctions, path, winner, payments, revenue, ledger)


def run_sra(network: Network, strategies: Mapping[NodeId, Strategy] | None = None, seed: int = 0,
            chooser: Chooser | None = None) -> ResaleTrace:
    """Run all three stages; deterministic given ``seed`` (or ``chooser``)."""
    chooser = chooser if chooser is not None else SeededChooser(seed)
    reported = reveal_all(network, strategies)
    dg = run_stage1_diffusion(reported)
    forest = run_stage2_aggregation(dg, strategies, chooser)
    trace = run_stage3_allocation(forest, dg.invitees, chooser)
    for b in network.buyers:
        trace.payments.setdefault(b, 0.0)
    trace.payments = dict(sorted(trace.payments.items()))
    return trace


def sra_realizations(network: Network, strategies: Mapping[NodeId, Strategy] | None = None,
                     limit: int | None = None) -> Iterator[tuple[float, ResaleTrace]]:
    """Every random branch of an SRA run with its probability."""
    yield from enumerate_realizations(lambda ch: run_sra(network, strategies, chooser=ch), limit)
