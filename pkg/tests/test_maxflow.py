import numpy as np
import pytest

from _oracles import brute_min_cut, random_network
from kinseg.maxflow import FlowNetwork, max_flow


def test_single_path():
    net = FlowNetwork(1, [5], [5], np.zeros((0, 2)), [], [])
    assert max_flow(net)[0] == 5


def test_diamond():
    # nodes a=0, b=1; s->a 3, s->b 2, a->t 2, b->t 3, a->b 1
    net = FlowNetwork(2, [3, 2], [2, 3], [[0, 1]], [1], [0])
    flow, side = max_flow(net)
    assert flow == 5
    assert net.cut_value(side) == 5


def test_random_networks_match_exhaustive_cut():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        net = random_network(rng)
        flow, side = max_flow(net)
        assert flow == brute_min_cut(net)
        assert net.cut_value(side) == flow


def test_float_capacities():
    rng = np.random.default_rng(5)
    for _ in range(100):
        net = random_network(rng)
        net = FlowNetwork(net.n_nodes, net.source_caps * 0.37, net.sink_caps * 0.37, net.edges,
                          net.caps * 0.37, net.rev_caps * 0.37)
        flow, side = max_flow(net)
        assert flow == pytest.approx(brute_min_cut(net), abs=1e-9)


def test_source_side_is_minimal():
    # zero-capacity everywhere: every cut is minimal; BFS from the source reaches nothing
    net = FlowNetwork.empty(4)
    flow, side = max_flow(net)
    assert flow == 0 and not side.any()
    # a node tied to both terminals equally stays on the sink side once saturated
    net = FlowNetwork(1, [4], [4], np.zeros((0, 2)), [], [])
    assert not max_flow(net)[1][0]


def test_chain_long():
    n = 500
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    caps = np.full(n - 1, 7.0)
    caps[250] = 3.0
    src = np.zeros(n)
    src[0] = 100
    snk = np.zeros(n)
    snk[-1] = 100
    flow, side = max_flow(FlowNetwork(n, src, snk, edges, caps, caps))
    assert flow == 3
    assert side[:251].all() and not side[251:].any()


def test_deterministic():
    rng = np.random.default_rng(9)
    net = random_network(rng)
    a = max_flow(net)
    b = max_flow(net)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_validation():
    with pytest.raises(ValueError):
        FlowNetwork(2, [1, -1], [0, 0], np.zeros((0, 2)), [], [])
    with pytest.raises(ValueError):
        FlowNetwork(2, [1, 1], [0, np.inf], np.zeros((0, 2)), [], [])
    with pytest.raises(ValueError):
        FlowNetwork(2, [1, 1], [0, 0], [[0, 2]], [1], [1])
    with pytest.raises(ValueError):
        FlowNetwork(2, [1, 1], [0, 0], [[0, 1]], [1, 2], [1])
