import random

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from sra import harness
from sra.network import Network, build_valid_subgraph, load_named

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def networks(draw, min_buyers=1, max_buyers=6, integer_valuations=False):
    """Connected random instance; integer valuations make ties likely."""
    n = draw(st.integers(min_buyers, max_buyers))
    seed = draw(st.integers(0, 2**32 - 1))
    p = draw(st.sampled_from([0.0, 0.2, 0.5, 0.8]))
    rng = random.Random(seed)
    if integer_valuations:
        return harness.random_network(rng, n, p, valuation=lambda r: float(r.randint(0, 4)))
    return harness.random_network(rng, n, p)


@pytest.fixture
def instance_a() -> Network:
    return load_named("instance_a")


@pytest.fixture
def instance_b() -> Network:
    return load_named("instance_b")


@pytest.fixture
def grid13() -> Network:
    return load_named("grid13")


def valid(net: Network):
    return build_valid_subgraph(net.truthful())
