import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sra.engine import (AggregationForest, Ledger, LedgerVerificationError, ScriptedChooser, SeededChooser,
                        Strategy, enumerate_realizations, local_auction, reveal_all, run_sra,
                        run_stage1_diffusion, run_stage2_aggregation, sra_realizations)
from sra.network import Network

from conftest import networks


def bid(value):
    return Strategy(reveal=lambda p: (value, p.neighbors))


def b_under_a():
    return ScriptedChooser([0])


class TestStage1:
    def test_same_round_links_do_not_invite(self):
        net = Network.from_edges("S", {"a": 1, "b": 1, "c": 1}, [("S", "a"), ("S", "b"), ("a", "b"), ("b", "c")])
        dg = run_stage1_diffusion(net.truthful())
        assert dg.inviters == {"a": ("S",), "b": ("S",), "c": ("b",)}
        assert dg.depth == {"S": 0, "a": 1, "b": 1, "c": 2}

    def test_multiple_inviters(self, instance_b):
        dg = run_stage1_diffusion(instance_b.truthful())
        assert dg.inviters["b"] == ("a", "c")
        assert dg.invitees["a"] == ("b",) and dg.invitees["c"] == ("b",)

    def test_withheld_invitation_cuts_diffusion(self, instance_a):
        rep = reveal_all(instance_a, {"a": Strategy(reveal=lambda p: (p.valuation, frozenset()))})
        dg = run_stage1_diffusion(rep)
        assert "b" not in dg.depth

    def test_inviting_a_stranger_is_rejected(self, instance_a):
        with pytest.raises(ValueError, match="non-neighbours"):
            reveal_all(instance_a, {"c": Strategy(reveal=lambda p: (2.0, {"b"}))})

    def test_negative_bid_is_rejected(self, instance_a):
        with pytest.raises(ValueError, match="negative"):
            reveal_all(instance_a, {"c": bid(-1.0)})


class TestStage2:
    @given(networks(max_buyers=7), st.integers(0, 2**31))
    def test_intended_aggregate_is_subtree_max(self, net, seed):
        dg = run_stage1_diffusion(net.truthful())
        forest = run_stage2_aggregation(dg, None, SeededChooser(seed))
        assert all(len(p) == 1 for p in forest.parents.values())
        for n in forest.bids:
            assert forest.agg[n] == max(forest.bids[m] for m in forest.subtree(n))

    def test_passing_to_a_non_inviter_is_rejected(self, instance_b):
        dg = run_stage1_diffusion(instance_b.truthful())
        bad = {"a": Strategy(pass_to=lambda i, b, inv, ch: {"c"})}
        with pytest.raises(ValueError, match="non-inviters"):
            run_stage2_aggregation(dg, bad, SeededChooser(0))

    def test_cycle_detected(self):
        f = AggregationForest("S", {"a": 1.0, "b": 2.0}, {"a": frozenset({"b"}), "b": frozenset({"a"})})
        with pytest.raises(ValueError, match="cycle"):
            f.recompute()


class TestLocalAuction:
    def test_second_price_with_reserve(self):
        r = local_auction("h", {"x": 5.0, "y": 3.0}, reserve=1.0, host_bid=2.0, chooser=SeededChooser())
        assert (r.winner, r.price) == ("x", 3.0)

    def test_reserve_binds(self):
        r = local_auction("h", {"x": 5.0}, reserve=4.0, host_bid=0.0, chooser=SeededChooser())
        assert (r.winner, r.price) == ("x", 4.0)

    def test_host_keeps_when_own_bid_covers_price(self):
        r = local_auction("h", {"x": 5.0, "y": 3.0}, reserve=1.0, host_bid=3.0, chooser=SeededChooser())
        assert r.winner is None and r.price == 3.0

    def test_no_sale_below_reserve(self):
        r = local_auction("h", {"x": 1.0}, reserve=2.0, host_bid=0.0, chooser=SeededChooser())
        assert not r.sold

    def test_origin_sells_to_anyone(self):
        r = local_auction("S", {"x": 0.0}, reserve=0.0, host_bid=0.0, chooser=SeededChooser(), origin=True)
        assert (r.winner, r.price) == ("x", 0.0)

    def test_tie_uses_chooser(self):
        picks = {local_auction("h", {"x": 4.0, "y": 4.0}, 0.0, 0.0, SeededChooser(s), origin=True).winner
                 for s in range(40)}
        assert picks == {"x", "y"}


class TestFixtures:
    def test_instance_a_trace(self, instance_a):
        tr = run_sra(instance_a, seed=0)
        assert tr.to_text() == (
            "auction 1 host=S reserve=0.0 bids=a:7.0,c:2.0 winner=a price=2.0\n"
            "auction 2 host=a reserve=2.0 bids=b:7.0 winner=- price=2.0\n"
            "result winner=a revenue=2.0 path=S>a\n"
            "payment a 2.0\npayment b 0.0\npayment c 0.0\n")
        assert tr.utilities(instance_a.valuations) == {"a": 1.0, "b": 0.0, "c": 0.0}

    def test_instance_b_realisations(self, instance_b):
        outs = {tuple(tr.utilities(instance_b.valuations).values()): (p, tr.revenue)
                for p, tr in sra_realizations(instance_b)}
        assert outs == {(0.0, 8.0, 0.0): (0.5, 2.0), (0.0, 0.0, 1.0): (0.5, 1.0)}

    def test_b_under_a(self, instance_b):
        tr = run_sra(instance_b, chooser=b_under_a())
        assert tr.path == ["S", "a", "b"]
        assert tr.payments == {"a": 0.0, "b": 2.0, "c": 0.0}

    def test_overbidding_c_pays_ten(self, instance_b):
        tr = run_sra(instance_b, {"c": bid(11.0)}, chooser=b_under_a())
        assert tr.auctions[0].winner == "c" and tr.auctions[0].price == 10.0
        assert tr.winner == "c"
        assert tr.utilities(instance_b.valuations)["c"] == -8.0

    def test_underbidding_a_resells(self, instance_a):
        tr = run_sra(instance_a, {"a": bid(0.0)})
        assert tr.path == ["S", "a", "b"]
        assert tr.utilities(instance_a.valuations)["a"] == 0.0

    def test_orphaned_branch_is_reattached(self, instance_a):
        nobody = Strategy(pass_to=lambda i, b, inv, ch: ())
        tr = run_sra(instance_a, {"b": nobody})
        # a only sees its own 3 in Stage 2, wins at 2, then b's 7 reappears in a's local auction
        assert tr.auctions[0].bids == {"a": 3.0, "c": 2.0}
        assert tr.auctions[1].bids == {"b": 7.0}
        assert tr.winner == "a"


class TestLedger:
    def test_inflated_reserve_is_caught(self, instance_a):
        greedy = Strategy(claim_reserve=lambda r: r + 1.0)
        with pytest.raises(LedgerVerificationError, match="manipulation"):
            run_sra(instance_a, {"a": greedy})

    def test_unknown_host(self):
        with pytest.raises(LedgerVerificationError):
            Ledger("S").verify("x", 0.0)

    def test_records_append_only(self, instance_b):
        tr = run_sra(instance_b, chooser=b_under_a())
        assert [(r.host, r.winner, r.price) for r in tr.ledger.records] == [("S", "a", 2.0), ("a", "b", 2.0)]
        assert isinstance(tr.ledger.records, tuple)


class TestChoosers:
    def test_keyed_streams_are_order_independent(self):
        c = SeededChooser(9)
        first = c.choice("abcd", ("parent", "x"))
        c.choice("abcd", ("parent", "y"))
        assert c.choice("abcd", ("parent", "x")) == first

    def test_scripted_records_branch_points(self):
        c = ScriptedChooser([2])
        assert c.choice("abc", ("k",)) == "c"
        assert c.choice("xy", ("k2",)) == "x"
        assert c.choice("z", ("k3",)) == "z"
        assert c.trace == [(3, 2), (2, 0)]

    def test_enumeration_is_exhaustive(self):
        def run(ch):
            return ch.choice("ab", ("1",)) + ch.choice("xyz", ("2",))
        leaves = dict((v, p) for p, v in enumerate_realizations(run))
        assert sorted(leaves) == ["ax", "ay", "az", "bx", "by", "bz"]
        assert all(p == pytest.approx(1 / 6) for p in leaves.values())


class TestProperties:
    @given(networks(max_buyers=7), st.integers(0, 2**31))
    def test_budget_balance_and_rising_prices(self, net, seed):
        tr = run_sra(net, seed=seed)
        assert math.fsum(tr.payments.values()) == tr.revenue
        prices = [a.price for a in tr.auctions if a.sold]
        assert prices == sorted(prices)
        if tr.winner is not None:
            assert net.valuations[tr.winner] >= prices[-1]
        assert len(set(tr.path)) == len(tr.path)

    @given(networks(max_buyers=6), st.integers(0, 2**31))
    def test_deterministic_given_seed(self, net, seed):
        assert run_sra(net, seed=seed).to_text() == run_sra(net, seed=seed).to_text()

    @given(networks(max_buyers=6, integer_valuations=True))
    def test_realisation_probabilities_sum_to_one(self, net):
        assert math.fsum(p for p, _ in sra_realizations(net, limit=10_000)) == pytest.approx(1.0)
