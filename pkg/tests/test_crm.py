import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sra import crm
from sra.network import Network, SpanningTree, TreeCountExceeded, highest_bidders, sample_spanning_tree

from conftest import networks, valid


def tree(parent):
    return SpanningTree("S", parent)


class TestPerTree:
    def test_b_under_a(self, instance_b):
        g = valid(instance_b)
        out = crm.closed_form_tree_outcome(tree({"a": "S", "c": "S", "b": "a"}), g)
        assert out.winner == "b"
        assert out.payments == {"a": 0.0, "b": 2.0, "c": 0.0}
        assert out.revenue == 2.0

    def test_b_under_c(self, instance_b):
        g = valid(instance_b)
        out = crm.closed_form_tree_outcome(tree({"a": "S", "c": "S", "b": "c"}), g)
        assert (out.winner, out.payments["c"], out.revenue) == ("c", 1.0, 1.0)

    def test_reattachment_overrides_tree_shape(self, instance_b):
        # in the chain S-a-b-c, c is still a neighbour of S and joins S's local auction
        g = valid(instance_b)
        t = tree({"a": "S", "b": "a", "c": "b"})
        assert crm.closed_form_tree_outcome(t, g).same_as(crm.engine_tree_outcome(t, g))

    @given(networks(max_buyers=6, integer_valuations=True), st.integers(0, 2**31))
    def test_closed_form_equals_engine_with_ties(self, net, seed):
        g = valid(net)
        t = sample_spanning_tree(g, random.Random(seed))
        for z in highest_bidders(g):
            a = crm.closed_form_tree_outcome(t, g, z)
            b = crm.engine_tree_outcome(t, g, z)
            assert a.same_as(b), (a, b)

    @given(networks(max_buyers=6), st.integers(0, 2**31))
    def test_per_tree_ir_and_balance(self, net, seed):
        g = valid(net)
        out = crm.closed_form_tree_outcome(sample_spanning_tree(g, random.Random(seed)), g)
        assert g.bids[out.winner] >= out.payments[out.winner]
        assert all(p <= 0 for b, p in out.payments.items() if b != out.winner)
        assert math.isclose(math.fsum(out.payments.values()), out.revenue, abs_tol=1e-12)
        assert out.path[0] == "S" and out.winner in out.path[1:]
        assert out.path[-1] in highest_bidders(g)


class TestDistributions:
    def test_instance_b_uniform_exact(self, instance_b):
        s = crm.crm_run(instance_b)
        assert s.count == 4
        assert (s.allocation["b"], s.allocation["c"]) == (0.5, 0.5)
        assert (s.payment["b"], s.payment["c"]) == (1.0, 0.5)
        assert s.revenue == 1.5

    def test_instance_b_invitation_exact(self, instance_b):
        s = crm.crm_run(instance_b, distribution="invitation")
        assert s.count == 2
        assert s.revenue == 1.5 and s.allocation["b"] == 0.5

    def test_grid13_invitation_trees(self, grid13):
        g = valid(grid13)
        assert crm.count_invitation_trees(g) == 16
        trees = list(crm.enumerate_invitation_trees(g))
        assert len({tuple(t.edges) for _, t in trees}) == 16
        assert math.fsum(w for w, _ in trees) == 1.0
        assert all(t.is_spanning_tree_of(g) for _, t in trees)

    def test_distribution_aliases(self, instance_b):
        assert crm.crm_run(instance_b, distribution="invitation_weighted").count == 2
        assert crm.crm_run(instance_b, distribution="uniform_trees").count == 4
        with pytest.raises(ValueError):
            crm.crm_run(instance_b, distribution="bogus")

    def test_cap(self, grid13):
        with pytest.raises(TreeCountExceeded):
            crm.crm_run(grid13, cap=10)

    def test_monte_carlo_converges(self, grid13):
        exact = crm.crm_run(grid13, evaluator="closed_form")
        mc = crm.crm_run(grid13, mode="monte_carlo", samples=4000, seed=1, evaluator="closed_form")
        assert mc.count == 4000
        assert crm.summary_divergence(exact, mc) < 0.05

    def test_evaluators_agree_on_expectation(self, grid13):
        a = crm.crm_run(grid13, distribution="invitation", evaluator="closed_form")
        b = crm.crm_run(grid13, distribution="invitation", evaluator="engine")
        assert a.allocation == b.allocation and a.payment == b.payment

    def test_ties_are_averaged(self):
        net = Network.from_edges("S", {"a": 5, "b": 5}, [("S", "a"), ("S", "b")])
        s = crm.crm_run(net)
        assert s.allocation == {"a": 0.5, "b": 0.5}
        assert s.payment == {"a": 2.5, "b": 2.5}

    def test_no_buyers(self):
        s = crm.crm_run(Network("S", {}))
        assert s.revenue == 0.0 and s.allocation == {}

    @given(networks(max_buyers=6))
    def test_expected_budget_balance(self, net):
        s = crm.crm_run(net, cap=50_000, evaluator="closed_form")
        assert math.isclose(math.fsum(s.payment.values()), s.revenue, abs_tol=1e-9)
        assert math.isclose(math.fsum(s.allocation.values()), 1.0, abs_tol=1e-9)


class TestEquivalence:
    def test_instance_b(self, instance_b):
        rep = crm.crm_equivalence_check(instance_b, samples=2000, seed=3)
        assert rep.ok, rep.to_text()
        assert rep.divergence == 0.0

    def test_grid13_uniform_differs_from_invitation(self, grid13):
        rep = crm.crm_equivalence_check(grid13, samples=500, seed=0)
        assert rep.per_tree_ok and rep.distribution_ok
        assert rep.divergence > 0.1

    def test_sra_summary_exact_matches_invitation_crm(self, instance_b, grid13):
        for net in (instance_b, grid13):
            s = crm.sra_summary(net)
            c = crm.crm_run(net, distribution="invitation")
            assert crm.summary_divergence(s, c) < 1e-12

    def test_summary_table(self, instance_b):
        text = crm.crm_run(instance_b).to_table()
        assert text.splitlines()[0] == "# mechanism=crm mode=exact count=4 revenue=1.5"
        assert "c\t0.5\t0.5\t0.5" in text
