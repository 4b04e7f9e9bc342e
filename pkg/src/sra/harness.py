"""Property checks: IR, ex-post IC deviation battery, payment independence, revenue dominance.

Deviation kinds follow the three action families a buyer controls:

=================  ==========================================  ==================
kind               what changes                                proof cases
=================  ==========================================  ==================
bid_misreport      revealed bid                                1.1, 1.2, 1.3
neighbor_subset    invited neighbours (a subset of the true)   1.4, 1.5, 1.6
pass_targets       which inviters receive the aggregated bid   2
compute_output     the aggregated bid itself                   3.1, 3.2, 3.3
=================  ==========================================  ==================

Exact arms weigh every random branch of the run by its probability, so a
gain above ``TOL`` is a real gain. Monte-Carlo arms pair seeds between the
intended and deviant runs and flag gains above ``TOL + 3 SE``.
"""
from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Literal, Mapping, Sequence

from . import baselines, crm, engine
from .engine import INTENDED, SeededChooser, Strategy, TooManyRealizations
from .network import BuyerProfile, Network, NodeId, TreeCountExceeded

TOL = 1e-9
EPS = 1e-6
Z_SIGMA = 3.0

Kind = Literal["bid_misreport", "neighbor_subset", "compute_output", "pass_targets"]
CASES = {
    "bid_misreport": ("1.1", "1.2", "1.3"),
    "neighbor_subset": ("1.4", "1.5", "1.6"),
    "pass_targets": ("2",),
    "compute_output": ("3.1", "3.2", "3.3"),
}


# ---------------------------------------------------------------------------
# Deviations
# ---------------------------------------------------------------------------

def _second_highest(received: Sequence[float], own: float) -> float:
    vals = sorted([*received, own], reverse=True)
    return vals[1] if len(vals) > 1 else 0.0


COMPUTE_RULES: dict[str, Callable[[Sequence[float], float], float]] = {
    "own_bid_only": lambda received, own: own,
    "second_highest": _second_highest,
    "half_max": lambda received, own: max([*received, own]) / 2,
    "max_plus_eps": lambda received, own: max([*received, own]) + EPS,
    "max_children_only": lambda received, own: max(received, default=0.0),
}


@dataclass(frozen=True)
class Deviation:
    """A unilateral deviation of one buyer; everyone else plays the intended strategy."""

    buyer: NodeId
    kind: Kind
    value: object
    description: str = ""

    @property
    def cases(self) -> tuple[str, ...]:
        return CASES[self.kind]

    def strategy(self) -> Strategy:
        v = self.value
        if self.kind == "bid_misreport":
            return Strategy(reveal=lambda p: (float(v), p.neighbors), name=self.label)
        if self.kind == "neighbor_subset":
            return Strategy(reveal=lambda p: (p.valuation, frozenset(v)), name=self.label)
        if self.kind == "compute_output":
            if isinstance(v, str):
                return Strategy(compute=COMPUTE_RULES[v], name=self.label)
            return Strategy(compute=lambda received, own: float(v), name=self.label)
        if self.kind == "pass_targets":
            if v == "all":
                return Strategy(pass_to=lambda a, b, inviters, ch: frozenset(inviters), name=self.label)
            targets = frozenset(v)
            return Strategy(pass_to=lambda a, b, inviters, ch: targets & frozenset(inviters), name=self.label)
        raise ValueError(f"unknown deviation kind {self.kind!r}")

    @property
    def label(self) -> str:
        if isinstance(self.value, (set, frozenset)):
            val = "{" + ",".join(sorted(self.value)) + "}"
        else:
            val = repr(self.value)
        return f"{self.buyer}:{self.kind}={val}"


@dataclass
class GridConfig:
    """Shape of the deviation battery."""

    eps: float = EPS
    max_prices: int = 6
    max_subset_neighbors: int = 4
    include_compute_rules: bool = True


@dataclass(frozen=True)
class InstanceContext:
    top_bid: float
    prices: tuple[float, ...]
    inviters: Mapping[NodeId, tuple[NodeId, ...]]


def instance_context(network: Network, limit: int = 4096) -> InstanceContext:
    prices: set[float] = set()
    try:
        runs = [tr for _, tr in engine.sra_realizations(network, limit=limit)]
    except TooManyRealizations:
        runs = [engine.run_sra(network, seed=s) for s in range(64)]
    for tr in runs:
        prices.update(a.price for a in tr.auctions)
    dg = engine.run_stage1_diffusion(network.truthful())
    top = max(network.valuations.values(), default=0.0)
    return InstanceContext(top, tuple(sorted(prices)), dict(dg.inviters))


def _dedupe(values: Iterable[float], skip: float) -> list[float]:
    out = []
    for x in values:
        x = max(0.0, float(x))
        if x != skip and x not in out:
            out.append(x)
    return out


def deviation_battery(network: Network, buyer: NodeId, ctx: InstanceContext | None = None,
                      config: GridConfig | None = None) -> list[Deviation]:
    """Every deviation the default grid tries for ``buyer`` (at least 20 for any buyer)."""
    cfg = config or GridConfig()
    ctx = ctx or instance_context(network)
    prof: BuyerProfile = network.buyers[buyer]
    v, eps, top = prof.valuation, cfg.eps, ctx.top_bid
    prices = [p for p in ctx.prices if p > 0][: cfg.max_prices]
    around_prices = [x for p in prices for x in (p - eps, p + eps)]
    out: list[Deviation] = []

    bids = _dedupe([0.0, v / 4, v / 2, v - eps, v + eps, 1.5 * v + eps, 3 * v + eps, *around_prices,
                    top - eps, top + eps, 2 * top + eps], skip=v)
    out += [Deviation(buyer, "bid_misreport", b, f"bid {b!r} instead of {v!r}") for b in bids]

    nbrs = sorted(prof.neighbors)
    if len(nbrs) <= cfg.max_subset_neighbors:
        subsets = [frozenset(c) for k in range(len(nbrs)) for c in itertools.combinations(nbrs, k)]
    else:
        subsets = [frozenset()] + [frozenset(nbrs) - {n} for n in nbrs]
    out += [Deviation(buyer, "neighbor_subset", s, f"invite only {sorted(s)}") for s in subsets]

    inviters = list(ctx.inviters.get(buyer, ()))
    passes: list[object] = [frozenset()]
    if len(inviters) > 1:
        passes += [frozenset([i]) for i in inviters]
        passes += [frozenset(c) for k in range(2, len(inviters)) for c in itertools.combinations(inviters, k)]
        passes.append("all")
    out += [Deviation(buyer, "pass_targets", p, f"pass to {p if p == 'all' else sorted(p)}") for p in passes]

    consts = _dedupe([0.0, v / 2, v + eps, *around_prices, top - eps, top + eps, 2 * top + eps], skip=math.nan)
    out += [Deviation(buyer, "compute_output", c, f"aggregate to constant {c!r}") for c in consts]
    if cfg.include_compute_rules:
        out += [Deviation(buyer, "compute_output", r, f"aggregate with {r}") for r in COMPUTE_RULES]
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    instance: str
    detail: str
    intended: float
    deviant: float
    gap: float
    se: float = 0.0
    kind: str = ""


@dataclass
class PropertyReport:
    name: str
    instances: int = 0
    checks: int = 0
    violations: list[Violation] = field(default_factory=list)
    inconclusive: list[Violation] = field(default_factory=list)
    tolerance: float = TOL
    notes: list[str] = field(default_factory=list)
    skipped: int = 0

    @property
    def max_gap(self) -> float:
        return max((v.gap for v in self.violations), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.violations

    def merge(self, other: "PropertyReport") -> "PropertyReport":
        return PropertyReport(self.name, self.instances + other.instances, self.checks + other.checks,
                              self.violations + other.violations, self.inconclusive + other.inconclusive,
                              self.tolerance, self.notes + other.notes, self.skipped + other.skipped)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.kind] = out.get(v.kind, 0) + 1
        return dict(sorted(out.items()))

    def to_text(self) -> str:
        lines = [f"property={self.name} status={'PASS' if self.passed else 'FAIL'} "
                 f"instances={self.instances} checks={self.checks} violations={len(self.violations)} "
                 f"inconclusive={len(self.inconclusive)} skipped={self.skipped} max_gap={self.max_gap!r} tolerance={self.tolerance!r}"]
        if self.violations:
            lines.append(f"violations_by_kind={self.by_kind()}")
        for tag, rows in (("violation", self.violations), ("inconclusive", self.inconclusive)):
            for v in rows:
                lines.append(f"{tag}\t{v.instance}\t{v.kind}\t{v.detail}\tintended={v.intended!r}\t"
                             f"deviant={v.deviant!r}\tgap={v.gap!r}\tse={v.se!r}")
        lines += [f"note\t{n}" for n in self.notes]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_network(rng: random.Random, n_buyers: int, extra_edge_prob: float = 0.25,
                   valuation: Callable[[random.Random], float] | None = None) -> Network:
    """Connected random instance: a random recursive tree plus independent extra edges."""
    names = [f"b{k}" for k in range(1, n_buyers + 1)]
    order = ["S", *names]
    edges = set()
    for k in range(1, len(order)):
        edges.add((order[rng.randrange(k)], order[k]))
    for i in range(len(order)):
        for j in range(i + 1, len(order)):
            pair = (order[i], order[j])
            if pair not in edges and rng.random() < extra_edge_prob:
                edges.add(pair)
    draw = valuation or (lambda r: r.random())
    return Network.from_edges("S", {b: draw(rng) for b in names}, sorted(edges))


def random_instances(count: int, seed: int = 0, min_buyers: int = 3, max_buyers: int = 8,
                     extra_edge_prob: float = 0.25) -> Iterator[tuple[str, Network]]:
    rng = random.Random(seed)
    for k in range(count):
        n = rng.randint(min_buyers, max_buyers)
        yield f"rand{seed}-{k}(n={n})", random_network(rng, n, extra_edge_prob)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

Arm = Callable[[Mapping[NodeId, Strategy] | None], float]


def _expected_utilities(network: Network, strategies, limit: int) -> dict[NodeId, float]:
    vals = network.valuations
    out = {b: 0.0 for b in vals}
    for prob, tr in engine.sra_realizations(network, strategies, limit=limit):
        for b, u in tr.utilities(vals).items():
            out[b] += prob * u
    return out


def _seeded_utilities(network: Network, strategies, buyer: NodeId, seeds: Sequence[int]) -> list[float]:
    vals = network.valuations
    return [engine.run_sra(network, strategies, seed=s).utilities(vals)[buyer] for s in seeds]


def ic_check(network: Network, label: str = "instance", deviations: Iterable[Deviation] | None = None,
             mode: Literal["auto", "exact", "monte_carlo"] = "auto", seeds: int = 1000, seed: int = 0,
             limit: int = 4096, config: GridConfig | None = None) -> PropertyReport:
    """Does any unilateral deviation raise the deviator's expected utility?"""
    report = PropertyReport("ic", instances=1)
    if deviations is None:
        ctx = instance_context(network, limit)
        deviations = [d for b in sorted(network.buyers) for d in deviation_battery(network, b, ctx, config)]
    deviations = list(deviations)
    exact = mode != "monte_carlo"
    intended: dict[NodeId, float] = {}
    if exact:
        try:
            intended = _expected_utilities(network, None, limit)
        except TooManyRealizations:
            if mode == "exact":
                raise
            exact = False
    seed_list = [seed * 1_000_003 + s for s in range(seeds)]
    base_cache: dict[NodeId, list[float]] = {}
    for dev in deviations:
        strategies = {dev.buyer: dev.strategy()}
        report.checks += 1
        if exact:
            try:
                u_dev = _expected_utilities(network, strategies, limit)[dev.buyer]
                u_int = intended[dev.buyer]
                gap = u_dev - u_int
                if gap > TOL:
                    report.violations.append(Violation(label, dev.label, u_int, u_dev, gap, 0.0, dev.kind))
                continue
            except TooManyRealizations:
                pass
        if dev.buyer not in base_cache:
            base_cache[dev.buyer] = _seeded_utilities(network, None, dev.buyer, seed_list)
        base = base_cache[dev.buyer]
        devu = _seeded_utilities(network, strategies, dev.buyer, seed_list)
        diffs = [d - b for d, b in zip(devu, base)]
        gap, se = crm.mean_se(diffs)
        row = Violation(label, dev.label, math.fsum(base) / len(base), math.fsum(devu) / len(devu), gap, se, dev.kind)
        if gap > TOL + Z_SIGMA * se:
            report.violations.append(row)
        elif gap > TOL:
            report.inconclusive.append(row)
    return report


def ir_check(instances: Iterable[tuple[str, Network]], seeds: int = 10, seed: int = 0) -> PropertyReport:
    """Intended play never leaves a buyer (or the seller) with negative realised utility."""
    report = PropertyReport("ir", tolerance=0.0)
    for label, net in instances:
        report.instances += 1
        vals = net.valuations
        for s in range(seeds):
            tr = engine.run_sra(net, seed=seed * 1_000_003 + s)
            report.checks += 1
            for b, u in tr.utilities(vals).items():
                if u < 0:
                    report.violations.append(Violation(label, f"seed={s} buyer={b}", 0.0, u, -u, kind="buyer"))
            if tr.revenue < 0:
                report.violations.append(Violation(label, f"seed={s} seller", 0.0, tr.revenue, -tr.revenue,
                                                   kind="seller"))
    return report


def lemma1_check(network: Network, buyer: NodeId, bids: Iterable[float], seed: int = 0,
                 chooser_factory: Callable[[], engine.Chooser] | None = None,
                 label: str = "instance") -> PropertyReport:
    """Bids that leave the winner and resale path unchanged must leave the buyer's payment unchanged."""
    report = PropertyReport("lemma1", instances=1, tolerance=0.0)
    make = chooser_factory or (lambda: SeededChooser(seed))
    base = engine.run_sra(network, chooser=make())
    for b in bids:
        strat = {buyer: Strategy(reveal=lambda p, b=b: (float(b), p.neighbors), name=f"bid={b!r}")}
        tr = engine.run_sra(network, strat, chooser=make())
        if tr.winner != base.winner or tr.path != base.path:
            report.skipped += 1
            continue
        report.checks += 1
        if tr.payments[buyer] != base.payments[buyer]:
            gap = abs(tr.payments[buyer] - base.payments[buyer])
            report.violations.append(Violation(label, f"{buyer} bid={b!r}", base.payments[buyer],
                                               tr.payments[buyer], gap, kind="payment"))
    return report


def default_bid_grid(network: Network, buyer: NodeId) -> list[float]:
    v = network.buyers[buyer].valuation
    top = max(network.valuations.values())
    return _dedupe([0.0, v / 2, v + EPS, 2 * v, top - EPS, top + EPS, 10 * top + 1], skip=math.nan)


def lemma1_suite(network: Network, label: str = "instance", seeds: int = 10) -> PropertyReport:
    report = PropertyReport("lemma1", tolerance=0.0)
    for s in range(seeds):
        for b in sorted(network.buyers):
            report = report.merge(lemma1_check(network, b, default_bid_grid(network, b), seed=s, label=label))
    report.instances = 1
    return report


def revenue_check(instances: Iterable[tuple[str, Network]], limit: int = 4096,
                  tree_cap: int = 20_000, tree_samples: int = 1000) -> PropertyReport:
    """Every distributed-auction realisation and the CRM expectation beat neighbour-only VCG."""
    report = PropertyReport("revenue")
    for label, net in instances:
        report.instances += 1
        vcg = baselines.vcg_neighbors(net).revenue
        try:
            revenues = [tr.revenue for _, tr in engine.sra_realizations(net, limit=limit)]
        except TooManyRealizations:
            revenues = [engine.run_sra(net, seed=s).revenue for s in range(200)]
            report.notes.append(f"{label}: sampled 200 seeds")
        report.checks += 1
        low = min(revenues)
        if low < vcg:
            report.violations.append(Violation(label, "sra realisation", vcg, low, vcg - low, kind="sra"))
        try:
            expected = crm.crm_run(net, cap=tree_cap, evaluator="closed_form").revenue
        except TreeCountExceeded:
            expected = crm.crm_run(net, mode="monte_carlo", samples=tree_samples, evaluator="closed_form").revenue
            report.notes.append(f"{label}: crm sampled {tree_samples} trees")
        report.checks += 1
        # the average of per-tree revenues each >= vcg can fall short only by summation rounding
        if expected < vcg - TOL:
            report.violations.append(Violation(label, "crm expectation", vcg, expected, vcg - expected, kind="crm"))
    return report
