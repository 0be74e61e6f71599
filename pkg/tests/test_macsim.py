"""Event-driven CSMA/CA simulator: timing, contention, arrivals, stop rules."""

import pytest

from capest.macsim import (
    DcfPolicy,
    LinkLoad,
    MacConfig,
    PriorityRandomAccess,
    SimulationError,
    StopRule,
    access_policy,
    backlogged_pair_run,
    path_capacity_probe,
    run_iteration,
)
from capest.topo import Flow, Topology

MAC = MacConfig()


def solo_topology() -> Topology:
    return Topology(
        nodes=frozenset({1, 2}),
        links=((1, 2),),
        flows=(Flow(id="f", path=((1, 2),)),),
        senses=frozenset({(1, 2)}),
        interferes=frozenset({(1, 2)}),
    )


def pair_topology(shared: bool) -> Topology:
    # two one-hop links; either one collision domain or fully independent
    senses = {(1, 2), (3, 4)}
    if shared:
        senses |= {(1, 3), (1, 4), (2, 3), (2, 4)}
    return Topology(
        nodes=frozenset({1, 2, 3, 4}),
        links=((1, 2), (3, 4)),
        flows=(),
        senses=frozenset(senses),
        interferes=frozenset(senses),
    )


def hidden_topology(with_carrier_sense: bool) -> Topology:
    # node 3 corrupts receptions at node 2 but the transmitters only hear each
    # other in the carrier-sense variant
    senses = {(1, 2), (3, 4)}
    if with_carrier_sense:
        senses |= {(1, 3)}
    return Topology(
        nodes=frozenset({1, 2, 3, 4}),
        links=((1, 2), (3, 4)),
        flows=(),
        senses=frozenset(senses),
        interferes=frozenset(senses | {(3, 2)}),
    )


def chain_topology() -> Topology:
    links = ((1, 2), (2, 3))
    rel = {(1, 2), (2, 3), (1, 3)}
    return Topology(
        nodes=frozenset({1, 2, 3}),
        links=links,
        flows=(Flow(id="f", path=links),),
        senses=frozenset(rel),
        interferes=frozenset(rel),
    )


# -- static timing -----------------------------------------------------------


def test_frame_airtimes_11mbps():
    assert MAC.data_airtime_us(11e6, 1024) == 782
    assert MAC.ack_airtime_us(11e6) == 22


def test_uncontended_service_closed_form():
    # DIFS + mean backoff + data + prop + SIFS + ACK + prop
    expect = 50 + 15.5 * 20 + 782 + 1 + 10 + 22 + 1
    assert MAC.uncontended_service_us(11e6, 1024) == pytest.approx(expect)


def test_mac_config_validation():
    with pytest.raises(SimulationError):
        MacConfig(cw_min=63, cw_max=31)
    with pytest.raises(SimulationError):
        MacConfig(slot_us=0)
    with pytest.raises(SimulationError):
        MacConfig(retransmit_limit=0)


def test_priority_policy_windows():
    p = PriorityRandomAccess()
    assert p.window_for(0, MAC) == (31, 1023)
    assert p.window_for(3, MAC) == (31, 1023)
    assert p.window_for(4, MAC) == (15, 255)
    assert p.window_for(16, MAC) == (7, 63)
    assert DcfPolicy().window_for(100, MAC) == (31, 1023)


def test_priority_policy_validation():
    with pytest.raises(SimulationError):
        PriorityRandomAccess(thresholds=(4,), windows=((31, 1023),))
    with pytest.raises(SimulationError):
        PriorityRandomAccess(thresholds=(16, 4), windows=((31, 1023),) * 3)
    with pytest.raises(SimulationError):
        PriorityRandomAccess(thresholds=(4,), windows=((31, 1023), (0, 63)))


def test_access_policy_factory():
    assert access_policy("dcf_basic").kind == "dcf_basic"
    p = access_policy(
        "priority_random_access", thresholds=[2], windows=[[31, 1023], [7, 63]]
    )
    assert p.thresholds == (2,)
    with pytest.raises(SimulationError):
        access_policy("token_ring")


def test_load_and_stop_validation():
    with pytest.raises(SimulationError):
        LinkLoad(link=(1, 2), rate_pps=-1.0)
    with pytest.raises(SimulationError):
        LinkLoad(link=(1, 2), process="fractal")
    with pytest.raises(SimulationError):
        LinkLoad(link=(1, 2), queue_capacity=0)
    with pytest.raises(SimulationError):
        LinkLoad(link=(1, 2), initial_backlog=-1)
    with pytest.raises(SimulationError):
        StopRule()
    with pytest.raises(SimulationError):
        StopRule(per_link_quota=0)


# -- single-link service ------------------------------------------------------


def test_saturated_solo_link_matches_closed_form():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    meas = run_iteration(t, loads, MAC, DcfPolicy(), StopRule(per_link_quota=500), seed=1)
    m = meas.per_link[(1, 2)]
    assert m.successes == 500
    assert not meas.truncated
    assert m.s_bar_us == pytest.approx(MAC.uncontended_service_us(11e6, 1024), rel=0.02)
    assert m.attempts == m.successes  # nobody to collide with
    assert m.mac_drops == 0


def test_identical_seeds_identical_runs():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    stop = StopRule(per_link_quota=200)
    a = run_iteration(t, loads, MAC, DcfPolicy(), stop, seed="s:0")
    b = run_iteration(t, loads, MAC, DcfPolicy(), stop, seed="s:0")
    c = run_iteration(t, loads, MAC, DcfPolicy(), stop, seed="s:1")
    am, bm, cm = (r.per_link[(1, 2)] for r in (a, b, c))
    assert am.samples_us == bm.samples_us
    assert a.duration_us == b.duration_us
    assert am.samples_us != cm.samples_us


def test_time_cap_stop_and_truncation_flag():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    capped = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=1_000_000), seed=1
    )
    assert not capped.truncated
    assert capped.duration_us <= 1_000_000
    assert capped.per_link[(1, 2)].successes == pytest.approx(850, abs=30)

    starved = run_iteration(
        t, loads, MAC, DcfPolicy(),
        StopRule(per_link_quota=10_000, time_cap_us=100_000), seed=1,
    )
    assert starved.truncated


def test_load_must_reference_declared_links():
    t = solo_topology()
    with pytest.raises(SimulationError):
        run_iteration(
            t, [LinkLoad(link=(2, 1), process="backlogged")], MAC, DcfPolicy(),
            StopRule(per_link_quota=10), seed=1,
        )
    with pytest.raises(SimulationError):
        run_iteration(
            t,
            [LinkLoad(link=(1, 2), process="backlogged")] * 2,
            MAC, DcfPolicy(), StopRule(per_link_quota=10), seed=1,
        )


# -- arrival processes --------------------------------------------------------


def test_deterministic_arrivals_below_capacity():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), rate_pps=200.0, process="deterministic")]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=2_000_000), seed=1
    )
    m = meas.per_link[(1, 2)]
    assert m.overflow_drops == 0
    assert abs(m.offered - 400) <= 1
    assert m.delivered_pps == pytest.approx(200.0, rel=0.03)
    assert m.queue_final <= 2


def test_jittered_and_poisson_arrival_counts():
    t = solo_topology()
    for process, lo, hi in (("jittered", 900, 1100), ("poisson", 850, 1150)):
        loads = [LinkLoad(link=(1, 2), rate_pps=500.0, process=process)]
        meas = run_iteration(
            t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=2_000_000), seed=3
        )
        assert lo <= meas.per_link[(1, 2)].offered <= hi, process


def test_overload_fills_queue_and_drops():
    t = solo_topology()
    loads = [
        LinkLoad(link=(1, 2), rate_pps=2000.0, process="deterministic", queue_capacity=20)
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=2_000_000), seed=1
    )
    m = meas.per_link[(1, 2)]
    assert m.overflow_drops > 0
    assert m.queue_final <= 20
    assert m.delivered_pps == pytest.approx(850.0, rel=0.03)
    assert m.accepted + m.overflow_drops == m.offered


def test_burst_offers_exact_count():
    t = solo_topology()
    loads = [
        LinkLoad(link=(1, 2), process="burst", burst_packets=50, queue_capacity=60)
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=1_000_000), seed=1
    )
    m = meas.per_link[(1, 2)]
    assert m.offered == 50
    assert m.successes == 50
    assert m.queue_final == 0


def test_initial_backlog_served_without_arrivals():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), rate_pps=0.0, initial_backlog=5)]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=100_000), seed=1
    )
    m = meas.per_link[(1, 2)]
    assert m.successes == 5
    assert m.queue_final == 0


def test_initial_backlog_clamped_to_capacity():
    t = solo_topology()
    loads = [
        LinkLoad(link=(1, 2), rate_pps=0.0, initial_backlog=30, queue_capacity=10)
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=200_000), seed=1
    )
    assert meas.per_link[(1, 2)].successes == 10


def test_relay_forwarding_along_chain():
    t = chain_topology()
    loads = [
        LinkLoad(link=(1, 2), process="burst", burst_packets=30, queue_capacity=40),
        LinkLoad(link=(2, 3), process="relay", queue_capacity=40),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=2_000_000), seed=1,
        forward_chain=((1, 2), (2, 3)),
    )
    down = meas.per_link[(2, 3)]
    assert down.relayed_in == 30
    assert down.successes == 30


def test_forward_chain_requires_loaded_links():
    t = chain_topology()
    loads = [LinkLoad(link=(1, 2), process="burst", burst_packets=5, queue_capacity=10)]
    with pytest.raises(SimulationError):
        run_iteration(
            t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=100_000), seed=1,
            forward_chain=((1, 2), (2, 3)),
        )


# -- contention and interference ---------------------------------------------


def test_shared_domain_splits_capacity():
    t = pair_topology(shared=True)
    loads = [
        LinkLoad(link=(1, 2), process="backlogged"),
        LinkLoad(link=(3, 4), process="backlogged"),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=3_000_000), seed=1
    )
    a = meas.per_link[(1, 2)].delivered_pps
    b = meas.per_link[(3, 4)].delivered_pps
    # two contenders share the idle backoff, so the sum runs a little above the
    # solo rate; collisions keep it well short of 2x
    assert 850.0 < a + b < 1000.0
    assert min(a, b) / max(a, b) > 0.7  # near-even split


def test_independent_links_keep_full_capacity():
    t = pair_topology(shared=False)
    loads = [
        LinkLoad(link=(1, 2), process="backlogged"),
        LinkLoad(link=(3, 4), process="backlogged"),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=3_000_000), seed=1
    )
    for link in ((1, 2), (3, 4)):
        assert meas.per_link[link].delivered_pps == pytest.approx(850.0, rel=0.05)


def test_hidden_interferer_corrupts_receptions():
    t = hidden_topology(with_carrier_sense=False)
    loads = [
        LinkLoad(link=(1, 2), process="backlogged"),
        LinkLoad(link=(3, 4), process="backlogged"),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=3_000_000), seed=1
    )
    victim = meas.per_link[(1, 2)]
    clean = meas.per_link[(3, 4)]
    # the saturated interferer leaves no reception-sized gap: total starvation
    assert victim.attempts > 100
    assert victim.successes < 0.05 * victim.attempts
    assert clean.successes > 0.9 * clean.attempts
    assert clean.delivered_pps > 100 * max(victim.delivered_pps, 1.0)


def test_carrier_sense_suppresses_hidden_collisions():
    t = hidden_topology(with_carrier_sense=True)
    loads = [
        LinkLoad(link=(1, 2), process="backlogged"),
        LinkLoad(link=(3, 4), process="backlogged"),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=3_000_000), seed=1
    )
    victim = meas.per_link[(1, 2)]
    assert victim.successes > 0.9 * victim.attempts


def test_collision_sample_includes_retry_time():
    # an intermittent interferer forces retries; the eventual success's service
    # sample must absorb the burned attempts, not just the final one
    t = hidden_topology(with_carrier_sense=False)
    loads = [
        LinkLoad(link=(1, 2), process="backlogged"),
        LinkLoad(link=(3, 4), rate_pps=300.0, process="jittered"),
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=3_000_000), seed=1
    )
    m = meas.per_link[(1, 2)]
    assert m.successes > 50
    assert m.attempts > 1.3 * m.successes
    clean_sbar = MAC.uncontended_service_us(11e6, 1024)
    assert m.s_bar_us > 1.5 * clean_sbar


# -- forced loss and retransmit limits ---------------------------------------


def test_loss_injection_with_infinite_retry():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(per_link_quota=300), seed=1,
        loss_every_nth_attempt=4,
    )
    m = meas.per_link[(1, 2)]
    assert m.mac_drops == 0
    assert m.successes == 300
    assert m.attempts == pytest.approx(400, abs=2)  # every 4th attempt burned


def test_loss_injection_with_retransmit_limit():
    t = solo_topology()
    mac = MacConfig(retransmit_limit=1)
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    meas = run_iteration(
        t, loads, mac, DcfPolicy(), StopRule(per_link_quota=400), seed=1,
        loss_every_nth_attempt=4,
    )
    m = meas.per_link[(1, 2)]
    assert m.mac_drops == pytest.approx(100, abs=2)
    assert m.successes + m.mac_drops == 400
    assert len(m.drop_times_in_mac_us) == m.mac_drops
    assert all(t_us > 0 for t_us in m.drop_times_in_mac_us)


# -- instrumentation ----------------------------------------------------------


def test_queue_sampling_and_mark():
    t = solo_topology()
    loads = [
        LinkLoad(link=(1, 2), rate_pps=2000.0, process="deterministic", queue_capacity=50)
    ]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(time_cap_us=1_000_000), seed=1,
        sample_every_us=50_000, mark_us=500_000,
    )
    m = meas.per_link[(1, 2)]
    assert len(m.queue_samples) >= 15
    times = [s[0] for s in m.queue_samples]
    assert times == sorted(times)
    assert all(0 <= occ <= 50 for _, occ in m.queue_samples)
    assert 0 < m.post_mark_offered < m.offered
    assert m.post_mark_delivered <= m.successes
    assert m.post_mark_overflow <= m.overflow_drops


def test_airtime_pairs_recorded():
    t = solo_topology()
    loads = [LinkLoad(link=(1, 2), process="backlogged")]
    meas = run_iteration(
        t, loads, MAC, DcfPolicy(), StopRule(per_link_quota=50), seed=1
    )
    m = meas.per_link[(1, 2)]
    # one (payload, rate) pair per success so downstream consumers can rebuild
    # per-packet airtimes under mixed frame sizes
    assert len(m.airtime_pairs) == m.successes
    assert all(pair == (1024, 11e6) for pair in m.airtime_pairs)


# -- composite probes ---------------------------------------------------------


def test_backlogged_pair_lir_shapes():
    shared = pair_topology(shared=True)
    tp = {
        m: backlogged_pair_run(shared, (1, 2), (3, 4), m, 2_000_000, seed=1)
        for m in ("solo_a", "solo_b", "simultaneous")
    }
    lir = (
        tp["simultaneous"][(1, 2)] + tp["simultaneous"][(3, 4)]
    ) / (tp["solo_a"][(1, 2)] + tp["solo_b"][(3, 4)])
    assert 0.40 <= lir <= 0.65

    indep = pair_topology(shared=False)
    tp = {
        m: backlogged_pair_run(indep, (1, 2), (3, 4), m, 2_000_000, seed=1)
        for m in ("solo_a", "solo_b", "simultaneous")
    }
    lir = (
        tp["simultaneous"][(1, 2)] + tp["simultaneous"][(3, 4)]
    ) / (tp["solo_a"][(1, 2)] + tp["solo_b"][(3, 4)])
    assert lir == pytest.approx(1.0, abs=0.05)


def test_backlogged_pair_mode_validation():
    with pytest.raises(SimulationError):
        backlogged_pair_run(pair_topology(True), (1, 2), (3, 4), "duet", 1000, 1)


def test_path_probe_on_shared_chain():
    t = chain_topology()
    res = path_capacity_probe(t, ((1, 2), (2, 3)), background=[], quota=100, seed=1)
    # both hops share one domain, so the path sustains about half the solo rate
    assert res.rate_pps == pytest.approx(425.0, rel=0.2)
    assert set(res.per_link_rate_pps) == {(1, 2), (2, 3)}
    assert not res.truncated


def test_path_probe_validation():
    t = chain_topology()
    with pytest.raises(SimulationError):
        path_capacity_probe(t, (), background=[], quota=10)
    with pytest.raises(SimulationError):
        path_capacity_probe(t, ((1, 2), (1, 2)), background=[], quota=10)
    with pytest.raises(SimulationError):
        path_capacity_probe(
            t, ((1, 2), (2, 3)),
            background=[LinkLoad(link=(1, 2), rate_pps=10.0)], quota=10,
        )
