"""Command-line runner: single mechanism runs, sampled experiments and property suites.

Exit codes: 0 success, 1 a property failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import baselines, crm, engine, harness
from .network import GraphFormatError, Network, TreeCountExceeded, bfs_depths, build_valid_subgraph, load_graph

MECHANISMS = ("sra", "crm", "idm", "vcg")
SUITES = ("ir", "ic", "lemma1", "revenue", "crm_equivalence")
DEPTH_UNIFORM_DEFAULT = (0.1, 0.1, 0.6, 0.1)
CSV_COLUMNS = ("mechanism", "id", "depth", "win_probability", "avg_utility", "avg_payment")

EXIT_OK, EXIT_VIOLATION, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


@dataclass
class ExperimentConfig:
    graph: str = "grid13"
    valuation_model: str = "depth_uniform"
    depth_uniform: tuple[float, float, float, float] = DEPTH_UNIFORM_DEFAULT
    samples: int = 10_000
    tree_samples: int = 1_000
    tree_distribution: str = "uniform"
    seed: int = 0
    mechanisms: tuple[str, ...] = MECHANISMS
    workers: int = 1

    def __post_init__(self):
        self.depth_uniform = tuple(float(x) for x in self.depth_uniform)
        self.mechanisms = tuple(self.mechanisms)
        if self.valuation_model not in ("fixed", "depth_uniform"):
            raise InputError(f"unknown valuation_model {self.valuation_model!r}")
        if len(self.depth_uniform) != 4:
            raise InputError("depth_uniform needs four numbers: lo_base lo_step hi_base hi_step")
        if bad := [m for m in self.mechanisms if m not in MECHANISMS]:
            raise InputError(f"unknown mechanisms {bad}; choose from {list(MECHANISMS)}")
        if self.tree_distribution not in crm.DISTRIBUTION_ALIASES:
            raise InputError(f"unknown tree distribution {self.tree_distribution!r}")
        self.tree_distribution = crm.canonical_distribution(self.tree_distribution)
        if self.samples < 1 or self.tree_samples < 1 or self.workers < 1:
            raise InputError("samples, tree_samples and workers must be positive")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InputError(f"config {path} must be a mapping")
        known = {f.name for f in fields(cls)}
        if unknown := sorted(set(data) - known):
            raise InputError(f"unknown config keys {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**data)
        except TypeError as exc:
            raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

def require_connected(net: Network) -> dict[str, int]:
    adj = {net.seller: net.seller_neighbors, **{b: p.neighbors for b, p in net.buyers.items()}}
    depths = bfs_depths(adj, net.seller)
    if missing := sorted(set(net.buyers) - set(depths)):
        raise InputError(f"graph is not connected to the seller; unreachable buyers: {missing}")
    return depths


def sample_valuations(net: Network, depths: dict[str, int], config: ExperimentConfig, index: int) -> Network:
    if config.valuation_model == "fixed":
        return net
    lo_base, lo_step, hi_base, hi_step = config.depth_uniform
    rng = np.random.default_rng([config.seed, index])
    vals = {}
    for b in sorted(net.buyers):
        d = depths[b]
        vals[b] = float(rng.uniform(lo_base + lo_step * d, hi_base + hi_step * d))
    return net.with_valuations(vals)


def _crm_auto(net: Network, config: ExperimentConfig, seed: int) -> crm.OutcomeSummary:
    g = build_valid_subgraph(net.truthful())
    exact = crm.tree_count(g, config.tree_distribution) <= config.tree_samples
    return crm.crm_run(net, mode="exact" if exact else "monte_carlo", samples=config.tree_samples,
                       seed=seed, distribution=config.tree_distribution, evaluator="closed_form")


def _sample_outcomes(args: tuple[Network, dict, ExperimentConfig, int, int]):
    """Per-mechanism (allocation, payment, revenue) for instance samples [start, stop)."""
    net, depths, config, start, stop = args
    rows = []
    for k in range(start, stop):
        inst = sample_valuations(net, depths, config, k)
        sub_seed = config.seed * 1_000_003 + k
        out = {}
        for m in config.mechanisms:
            if m == "sra":
                tr = engine.run_sra(inst, seed=sub_seed)
                out[m] = (tr.allocation(), dict(tr.payments), tr.revenue, inst.valuations)
                continue
            if m == "crm":
                s = _crm_auto(inst, config, sub_seed)
            elif m == "idm":
                s = baselines.idm_run(inst)
            else:
                s = baselines.vcg_neighbors(inst)
            out[m] = (s.allocation, s.payment, s.revenue, inst.valuations)
        rows.append(out)
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    depths: dict[str, int]
    win: dict[str, dict[str, float]] = field(default_factory=dict)
    utility: dict[str, dict[str, float]] = field(default_factory=dict)
    payment: dict[str, dict[str, float]] = field(default_factory=dict)
    revenue: dict[str, float] = field(default_factory=dict)
    crm_info: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in self.config.mechanisms:
            for b in sorted(self.depths, key=lambda x: (self.depths[x], x)):
                w.writerow([m, b, self.depths[b], repr(self.win[m][b]), repr(self.utility[m][b]),
                            repr(self.payment[m][b])])
        return buf.getvalue()

    def summary(self) -> dict:
        cfg = asdict(self.config)
        cfg["depth_uniform"] = list(cfg["depth_uniform"])
        cfg["mechanisms"] = list(cfg["mechanisms"])
        cfg.pop("workers")
        return {"config": cfg, "revenue": self.revenue, "crm": self.crm_info,
                "seeds": {"master": self.config.seed, "instance_samples": self.config.samples}}

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    net = load_graph(config.graph)
    depths = require_connected(net)
    buyers = sorted(net.buyers)
    n = config.samples
    chunks = max(1, config.workers)
    bounds = [(n * i // chunks, n * (i + 1) // chunks) for i in range(chunks)]
    jobs = [(net, depths, config, a, b) for a, b in bounds if a < b]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            parts = list(pool.map(_sample_outcomes, jobs))
    else:
        parts = [_sample_outcomes(j) for j in jobs]
    samples = [row for part in parts for row in part]

    res = ExperimentResult(config, {b: depths[b] for b in buyers})
    for m in config.mechanisms:
        win = {b: [] for b in buyers}
        util = {b: [] for b in buyers}
        pay = {b: [] for b in buyers}
        rev = []
        for row in samples:
            alloc, payment, revenue, vals = row[m]
            rev.append(revenue)
            for b in buyers:
                win[b].append(alloc.get(b, 0.0))
                pay[b].append(payment.get(b, 0.0))
                util[b].append(alloc.get(b, 0.0) * vals[b] - payment.get(b, 0.0))
        res.win[m] = {b: crm.mean_se(win[b])[0] for b in buyers}
        res.utility[m] = {b: crm.mean_se(util[b])[0] for b in buyers}
        res.payment[m] = {b: crm.mean_se(pay[b])[0] for b in buyers}
        res.revenue[m] = crm.mean_se(rev)[0]
    if "crm" in config.mechanisms:
        g = build_valid_subgraph(net.truthful())
        count = crm.tree_count(g, config.tree_distribution)
        res.crm_info = {"distribution": config.tree_distribution, "tree_count": count,
                        "mode": "exact" if count <= config.tree_samples else "monte_carlo",
                        "tree_samples": config.tree_samples}
    return res


def write_experiment(result: ExperimentResult, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "results.csv", out / "summary.json"
    csv_path.write_text(result.csv_text())
    json_path.write_text(result.summary_json())
    return [csv_path, json_path]


# ---------------------------------------------------------------------------
# Verify
# ---------------------------------------------------------------------------

FIXTURES = ("instance_a", "instance_b", "grid13")


def _instances(args, count: int, max_buyers: int = 8):
    if args.graph:
        return [(args.graph, load_graph(args.graph))]
    return list(harness.random_instances(count, seed=args.seed, min_buyers=3, max_buyers=max_buyers,
                                         extra_edge_prob=0.3))


def _suite_ir(args) -> harness.PropertyReport:
    instances = _instances(args, args.instances or 1000)
    report = harness.ir_check(instances, seeds=args.seeds or 10, seed=args.seed)
    if args.graph:
        label, net = instances[0]
        utils = engine.run_sra(net, seed=args.seed).utilities(net.valuations)
        report.notes.append(f"{label} seed={args.seed} utilities " + " ".join(f"{b}={u!r}" for b, u in utils.items()))
    return report


def _suite_ic(args) -> harness.PropertyReport:
    kinds = set(args.kinds.split(",")) if args.kinds else None
    report = harness.PropertyReport("ic")
    for label, net in _instances(args, args.instances or 100, max_buyers=6):
        ctx = harness.instance_context(net)
        devs = [d for b in sorted(net.buyers) for d in harness.deviation_battery(net, b, ctx)
                if kinds is None or d.kind in kinds]
        report = report.merge(harness.ic_check(net, label, devs, seeds=args.seeds or 1000, seed=args.seed))
    return report


def _suite_lemma1(args) -> harness.PropertyReport:
    names = [args.graph] if args.graph else list(FIXTURES)
    report = harness.PropertyReport("lemma1", tolerance=0.0)
    for name in names:
        report = report.merge(harness.lemma1_suite(load_graph(name), name, seeds=args.seeds or 10))
    return report


def _suite_revenue(args) -> harness.PropertyReport:
    return harness.revenue_check(_instances(args, args.instances or 1000))


def _suite_crm_equivalence(args) -> harness.PropertyReport:
    report = harness.PropertyReport("crm_equivalence", tolerance=0.0)
    per_tree = [] if args.graph else list(harness.random_instances(args.instances or 200, seed=args.seed))
    for label, net in per_tree:
        report.instances += 1
        n, bad = crm.per_tree_mismatches(build_valid_subgraph(net.truthful()))
        report.checks += n
        for tree, closed, eng in bad:
            report.violations.append(harness.Violation(label, f"tree {sorted(tree.parent.items())}",
                                                       0.0, 1.0, 1.0, kind="per_tree"))
    names = [args.graph] if args.graph else list(FIXTURES)
    for name in names:
        net = load_graph(name)
        rep = crm.crm_equivalence_check(net, samples=args.samples or 10_000, seed=args.seed)
        report.instances += 1
        report.checks += rep.trees_checked + len(rep.distribution_rows)
        for tree, closed, eng in rep.tree_mismatches:
            report.violations.append(harness.Violation(name, f"tree {sorted(tree.parent.items())}",
                                                       0.0, 1.0, 1.0, kind="per_tree"))
        for r in rep.distribution_rows:
            if not r["ok"]:
                report.violations.append(harness.Violation(name, f"{r['buyer']} {r['quantity']}", r["crm"],
                                                           r["sra"], abs(r["sra"] - r["crm"]), r["se"],
                                                           "distribution"))
        report.notes.append(f"{name}: " + rep.to_text().replace("\n", " | ").rstrip(" |"))
    return report


SUITE_RUNNERS = {"ir": _suite_ir, "ic": _suite_ic, "lemma1": _suite_lemma1, "revenue": _suite_revenue,
                 "crm_equivalence": _suite_crm_equivalence}


VERIFY_CONFIG_KEYS = ("graph", "seed", "samples", "instances", "seeds", "kinds")


def _apply_verify_config(args) -> None:
    """Fill verify options from a YAML file; command-line flags win."""
    try:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(data, dict) or (unknown := sorted(set(data) - set(VERIFY_CONFIG_KEYS))):
        raise InputError(f"verify config must be a mapping over {list(VERIFY_CONFIG_KEYS)}")
    for key, value in data.items():
        if key == "seed":
            if args.seed_given is None:
                args.seed = int(value)
        elif getattr(args, key) is None:
            setattr(args, key, ",".join(value) if key == "kinds" and isinstance(value, list) else value)


def cmd_verify(args) -> int:
    if args.config:
        _apply_verify_config(args)
    if args.kinds and (bad := set(args.kinds.split(",")) - set(harness.CASES)):
        raise InputError(f"unknown deviation kinds {sorted(bad)}; choose from {sorted(harness.CASES)}")
    suites = SUITES if args.suite == "all" else (args.suite,)
    status = EXIT_OK
    out = Path(args.out) if args.out else None
    for name in suites:
        report = SUITE_RUNNERS[name](args)
        text = report.to_text()
        sys.stdout.write(text)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"verify_{name}.txt").write_text(text)
        if not report.passed:
            v = report.violations[0]
            print(f"first violation ({name}): {v.instance} {v.detail} gap={v.gap!r}", file=sys.stderr)
            status = EXIT_VIOLATION
    return status


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

def _emit(text: str, args, filename: str) -> None:
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)


def cmd_run_sra(args) -> int:
    net = load_graph(args.graph)
    if args.samples:
        summary = crm.sra_summary(net, mode="monte_carlo", samples=args.samples, seed=args.seed)
        _emit(summary.to_table(), args, "sra.txt")
    else:
        _emit(engine.run_sra(net, seed=args.seed).to_text(), args, "sra.txt")
    return EXIT_OK


def cmd_run_crm(args) -> int:
    net = load_graph(args.graph)
    g = build_valid_subgraph(net.truthful())
    budget = args.tree_samples or 1_000
    exact = crm.tree_count(g, args.tree_distribution) <= budget
    summary = crm.crm_run(net, mode="exact" if exact else "monte_carlo", samples=budget, seed=args.seed,
                          distribution=args.tree_distribution)
    _emit(summary.to_table(), args, "crm.txt")
    return EXIT_OK


def cmd_run_idm(args) -> int:
    _emit(baselines.idm_run(load_graph(args.graph)).to_table(), args, "idm.txt")
    return EXIT_OK


def cmd_run_vcg(args) -> int:
    _emit(baselines.vcg_neighbors(load_graph(args.graph)).to_table(), args, "vcg.txt")
    return EXIT_OK


def cmd_experiment(args) -> int:
    overrides = {"graph": args.graph, "seed": args.seed_given, "samples": args.samples,
                 "tree_samples": args.tree_samples, "tree_distribution": args.tree_distribution_given,
                 "workers": args.workers, "valuation_model": args.valuation_model,
                 "mechanisms": args.mechanisms.split(",") if args.mechanisms else None}
    if args.config:
        config = ExperimentConfig.from_file(args.config, **overrides)
    else:
        config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    result = run_experiment(config)
    if args.out:
        for p in write_experiment(result, Path(args.out)):
            print(p)
    else:
        sys.stdout.write(result.csv_text())
        sys.stdout.write(result.summary_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--graph", help="graph file (YAML/JSON) or a bundled name: instance_a, instance_b, grid13")
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--samples", type=int, help="instance samples / SRA seeds")
    common.add_argument("--tree-samples", type=int, help="spanning-tree budget for CRM (default 1000)")
    common.add_argument("--tree-distribution", choices=sorted(crm.DISTRIBUTION_ALIASES), default=None)
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="sra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("run-sra", cmd_run_sra, "one seeded run (or --samples Monte-Carlo summary)"),
                            ("run-crm", cmd_run_crm, "expected outcome over spanning trees"),
                            ("run-idm", cmd_run_idm, "information diffusion mechanism"),
                            ("run-vcg", cmd_run_vcg, "second price among the seller's neighbours")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn, needs_graph=True)
    ex = sub.add_parser("experiment", parents=[common], help="sampled valuation experiment -> CSV + JSON")
    ex.add_argument("--config", help="YAML experiment config")
    ex.add_argument("--valuation-model", choices=("fixed", "depth_uniform"))
    ex.add_argument("--mechanisms", help="comma list from sra,crm,idm,vcg")
    ex.add_argument("--workers", type=int)
    ex.set_defaults(func=cmd_experiment, needs_graph=False)
    ve = sub.add_parser("verify", parents=[common], help="property suites; exit 1 on any violation")
    ve.add_argument("suite", choices=(*SUITES, "all"))
    ve.add_argument("--instances", type=int, help="random instances per suite")
    ve.add_argument("--seeds", type=int, help="seeds per instance")
    ve.add_argument("--kinds", help="restrict ic deviations to these kinds (comma list)")
    ve.add_argument("--config", help="YAML with any of: graph, seed, samples, instances, seeds, kinds")
    ve.set_defaults(func=cmd_verify, needs_graph=False)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed
    args.seed = args.seed if args.seed is not None else 0
    args.tree_distribution_given = args.tree_distribution
    args.tree_distribution = args.tree_distribution or "uniform"
    if args.needs_graph and not args.graph:
        parser.error(f"{args.command} needs --graph")
    try:
        return args.func(args)
    except (InputError, GraphFormatError, TreeCountExceeded, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
