"""Topology model: builtin layouts, neighborhoods, LIR, file round-trips."""

import pytest

from capest.topo import (
    Flow,
    LirMeasurement,
    Topology,
    TopologyError,
    builtin_topology,
    classify_lir,
    load_topology,
    neighborhood,
    random_topology,
    save_topology,
)


def test_flow_path_must_chain():
    with pytest.raises(TopologyError):
        Flow(id="bad", path=((1, 2), (3, 4)))


def test_flow_rejects_empty_path_and_bad_weight():
    with pytest.raises(TopologyError):
        Flow(id="empty", path=())
    with pytest.raises(TopologyError):
        Flow(id="w", path=((1, 2),), weight=0.0)


def test_flow_endpoints():
    f = Flow(id="f", path=((1, 2), (2, 3)))
    assert f.source == 1
    assert f.destination == 3


def test_topology_validates_membership():
    with pytest.raises(TopologyError):
        Topology(
            nodes=frozenset({1, 2}),
            links=((1, 3),),
            flows=(),
            senses=frozenset(),
            interferes=frozenset(),
        )
    with pytest.raises(TopologyError):
        Topology(
            nodes=frozenset({1}),
            links=((1, 1),),
            flows=(),
            senses=frozenset(),
            interferes=frozenset(),
        )


def test_topology_rejects_duplicate_flow_ids():
    with pytest.raises(TopologyError):
        Topology(
            nodes=frozenset({1, 2}),
            links=((1, 2),),
            flows=(Flow(id="f", path=((1, 2),)), Flow(id="f", path=((1, 2),))),
            senses=frozenset(),
            interferes=frozenset(),
        )


def test_relations_are_symmetric_closures():
    t = Topology(
        nodes=frozenset({1, 2, 3}),
        links=((1, 2), (2, 3)),
        flows=(),
        senses=frozenset({(1, 2)}),
        interferes=frozenset({(2, 3)}),
    )
    assert (2, 1) in t.senses
    assert (3, 2) in t.interferes
    assert t.related(2, 1) and t.related(3, 2) and t.related(1, 1)
    assert not t.related(1, 3)


def test_builtin_fim_shape():
    t = builtin_topology("fim")
    assert len(t.nodes) == 9
    assert len(t.links) == 6
    assert sorted(f.id for f in t.flows) == ["f1_3", "f4_6", "f7_9"]
    for f in t.flows:
        assert len(f.path) == 2


def test_builtin_chain_cross_shape():
    t = builtin_topology("chain_cross")
    assert len(t.nodes) == 11
    assert len(t.links) == 8
    ids = sorted(f.id for f in t.flows)
    assert ids == ["f10_11", "f1_2", "f1_7", "f6_7", "f8_9"]
    assert len(t.flow_by_id("f1_7").path) == 6


def test_builtin_unknown_name():
    with pytest.raises(TopologyError):
        builtin_topology("ring")


def test_neighborhood_self_inclusive_and_mutual():
    for name in ("fim", "chain_cross"):
        t = builtin_topology(name)
        nbr = neighborhood(t)
        assert set(nbr) == set(t.links)
        for link, hood in nbr.items():
            assert link in hood
            for other in hood:
                assert link in nbr[other]


def test_neighborhood_fim_coupling():
    # middle-chain links contend with every link; the two outer chains are
    # mutually independent
    t = builtin_topology("fim")
    nbr = neighborhood(t)
    all_links = set(t.links)
    assert nbr[(4, 5)] == all_links
    assert nbr[(5, 6)] == all_links
    outer_a = {(1, 2), (2, 3)}
    outer_b = {(7, 8), (8, 9)}
    assert nbr[(1, 2)] == outer_a | {(4, 5), (5, 6)}
    assert nbr[(8, 9)] == outer_b | {(4, 5), (5, 6)}
    assert not (nbr[(1, 2)] & outer_b)


def test_neighborhood_chain_two_hop_reach():
    # adjacency relations give each chain link a two-hop coupling span
    t = builtin_topology("chain_cross")
    nbr = neighborhood(t)
    assert (3, 4) in nbr[(1, 2)]
    assert (4, 5) not in nbr[(1, 2)]
    assert (8, 9) in nbr[(2, 3)]
    assert (10, 11) not in nbr[(2, 3)]


def test_lir_definition():
    m = LirMeasurement(c11=100.0, c22=100.0, c31=50.0, c32=60.0)
    assert m.lir == pytest.approx(0.55)
    assert classify_lir(m)
    far = LirMeasurement(c11=100.0, c22=100.0, c31=99.0, c32=101.0)
    assert far.lir == pytest.approx(1.0)
    assert not classify_lir(far)


def test_lir_threshold_is_inclusive():
    m = LirMeasurement(c11=100.0, c22=100.0, c31=95.0, c32=95.0)
    assert classify_lir(m, threshold=0.95)


def test_lir_rejects_degenerate_inputs():
    with pytest.raises(TopologyError):
        LirMeasurement(c11=0.0, c22=0.0, c31=0.0, c32=0.0)
    with pytest.raises(TopologyError):
        LirMeasurement(c11=-1.0, c22=10.0, c31=1.0, c32=1.0)


def test_save_load_round_trip_builtin():
    for name in ("fim", "chain_cross"):
        t = builtin_topology(name)
        again = load_topology(save_topology(t))
        assert again.nodes == t.nodes
        assert again.links == t.links
        assert again.senses == t.senses
        assert again.interferes == t.interferes
        assert {f.id: f.path for f in again.flows} == {f.id: f.path for f in t.flows}
        assert again.data_rate == t.data_rate
        assert again.packet_size == t.packet_size


def test_save_load_round_trip_random():
    t = random_topology(
        n_nodes=12, n_flows=4, side_length=400.0, sense_range=150.0,
        interfere_range=250.0, seed=7,
    )
    again = load_topology(save_topology(t))
    assert again.nodes == t.nodes
    assert again.links == t.links
    assert again.senses == t.senses
    assert again.interferes == t.interferes
    assert again.positions == pytest.approx(t.positions)


def test_random_topology_is_seeded():
    kw = dict(n_nodes=10, n_flows=3, side_length=300.0, sense_range=120.0,
              interfere_range=200.0)
    a = random_topology(seed=3, **kw)
    b = random_topology(seed=3, **kw)
    c = random_topology(seed=4, **kw)
    assert a.positions == b.positions
    assert [f.path for f in a.flows] == [f.path for f in b.flows]
    assert a.positions != c.positions


def test_random_topology_ranges_define_relations():
    t = random_topology(
        n_nodes=10, n_flows=2, side_length=300.0, sense_range=120.0,
        interfere_range=200.0, seed=11,
    )

    def d2(a, b):
        (xa, ya), (xb, yb) = t.positions[a], t.positions[b]
        return (xa - xb) ** 2 + (ya - yb) ** 2

    for a in t.nodes:
        for b in t.nodes:
            if a == b:
                continue
            assert ((a, b) in t.senses) == (d2(a, b) <= 120.0**2)
            assert ((a, b) in t.interferes) == (d2(a, b) <= 200.0**2)
    # sensing implies interference when ranges are nested
    assert t.senses <= t.interferes


def test_random_topology_routes_use_declared_links():
    t = random_topology(
        n_nodes=14, n_flows=5, side_length=350.0, sense_range=140.0,
        interfere_range=220.0, seed=2,
    )
    link_set = set(t.links)
    for f in t.flows:
        for hop in f.path:
            assert hop in link_set


def test_load_topology_positions_derive_relations():
    text = """
nodes:
  - {id: a, x: 0.0, y: 0.0}
  - {id: b, x: 50.0, y: 0.0}
  - {id: c, x: 130.0, y: 0.0}
links:
  - {tx: a, rx: b}
  - {tx: b, rx: c}
relations:
  sense_range: 100.0
  interfere_range: 150.0
flows:
  - {id: f0, path: [a, b, c]}
"""
    t = load_topology(text)
    assert ("a", "b") in t.senses
    assert ("a", "c") not in t.senses
    assert ("b", "c") in t.senses
    assert ("a", "c") in t.interferes
    assert t.flow_by_id("f0").path == (("a", "b"), ("b", "c"))


def test_load_topology_explicit_relations_take_precedence():
    text = """
nodes: [a, b, c]
links:
  - {tx: a, rx: b}
relations:
  senses: [[a, b]]
  interferes: [[a, b], [b, c]]
"""
    t = load_topology(text)
    assert t.senses == frozenset({("a", "b"), ("b", "a")})
    assert ("c", "b") in t.interferes


def test_load_topology_errors():
    with pytest.raises(TopologyError):
        load_topology("links:\n  - {tx: a, rx: b}\n")  # no nodes
    with pytest.raises(TopologyError):
        load_topology("nodes: [a, b]\n")  # no links
    with pytest.raises(TopologyError):
        load_topology(
            "nodes: [a, b]\nlinks:\n  - {tx: a, rx: b}\n"
            "relations:\n  senses: [[a]]\n"
        )
    with pytest.raises(TopologyError):
        # positions required when deriving from ranges
        load_topology(
            "nodes: [a, b]\nlinks:\n  - {tx: a, rx: b}\n"
            "relations:\n  sense_range: 10.0\n  interfere_range: 10.0\n"
        )


def test_link_attributes_survive_round_trip():
    text = """
nodes: [a, b]
links:
  - {tx: a, rx: b, data_rate_bps: 2.0e6, packet_size_bytes: 512}
relations:
  senses: [[a, b]]
  interferes: [[a, b]]
"""
    t = load_topology(text)
    assert t.data_rate[("a", "b")] == pytest.approx(2.0e6)
    assert t.packet_size[("a", "b")] == 512
    again = load_topology(save_topology(t))
    assert again.data_rate == t.data_rate
    assert again.packet_size == t.packet_size
