"""Deterministic discrete-event simulator of a slotted CSMA/CA MAC.

Model summary: per-link FIFO queues feed a DCF-style MAC. A head-of-line
packet draws a uniform backoff in [0, CW] slots, counts it down while the
channel is idle (after DIFS), transmits, and waits SIFS + ACK. Carrier sensing
follows the topology's `senses` relation; reception fails iff any transmitter
that `interferes` with the receiver overlaps the packet in the air (binary
collision model, no capture), and a node never decodes while transmitting.
Failed attempts double CW up to the policy cap; successes reset it. The event
clock is integer microseconds; all randomness comes from per-link streams
seeded by stable strings, so runs are bit-reproducible.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace

from .topo import Link, Topology


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class MacConfig:
    slot_us: int = 20
    sifs_us: int = 10
    difs_us: int = 50
    cw_min: int = 31
    cw_max: int = 1023
    retransmit_limit: int | None = None  # None: retry forever
    phy_header_bytes: int = 16
    mac_header_bytes: int = 34
    ack_bytes: int = 14  # ACK frame body; a PHY header is added on air
    propagation_us: int = 1

    def __post_init__(self):
        if self.cw_min > self.cw_max:
            raise SimulationError("cw_min must be <= cw_max")
        for name in ("slot_us", "sifs_us", "difs_us", "propagation_us"):
            if getattr(self, name) <= 0:
                raise SimulationError(f"{name} must be > 0")
        if self.retransmit_limit is not None and self.retransmit_limit < 1:
            raise SimulationError("retransmit_limit must be >= 1 or None")

    def data_airtime_us(self, data_rate_bps: float, payload_bytes: int) -> int:
        bits = (self.phy_header_bytes + self.mac_header_bytes + payload_bytes) * 8
        return math.ceil(bits * 1e6 / data_rate_bps)

    def ack_airtime_us(self, data_rate_bps: float) -> int:
        bits = (self.ack_bytes + self.phy_header_bytes) * 8
        return math.ceil(bits * 1e6 / data_rate_bps)

    def uncontended_service_us(self, data_rate_bps: float, payload_bytes: int) -> float:
        """Closed-form mean service time of one success with no contention."""
        return (
            self.difs_us
            + self.cw_min / 2.0 * self.slot_us
            + self.data_airtime_us(data_rate_bps, payload_bytes)
            + self.propagation_us
            + self.sifs_us
            + self.ack_airtime_us(data_rate_bps)
            + self.propagation_us
        )


@dataclass(frozen=True)
class DcfPolicy:
    kind: str = field(default="dcf_basic", init=False)

    def window_for(self, queue_occupancy: int, mac: MacConfig) -> tuple[int, int]:
        return mac.cw_min, mac.cw_max


@dataclass(frozen=True)
class PriorityRandomAccess:
    """Queue-pressure priority: deeper queues draw from smaller windows.

    Priority level = number of thresholds at or below the queue occupancy;
    windows[level] is that level's (cw_min, cw_max) pair.
    """

    thresholds: tuple[int, ...] = (4, 16)
    windows: tuple[tuple[int, int], ...] = ((31, 1023), (15, 255), (7, 63))
    kind: str = field(default="priority_random_access", init=False)

    def __post_init__(self):
        if len(self.windows) != len(self.thresholds) + 1:
            raise SimulationError("need one window pair per priority level (thresholds + 1)")
        if list(self.thresholds) != sorted(self.thresholds):
            raise SimulationError("thresholds must be nondecreasing")
        for lo, hi in self.windows:
            if not (0 < lo <= hi):
                raise SimulationError(f"invalid contention window pair ({lo}, {hi})")

    def window_for(self, queue_occupancy: int, mac: MacConfig) -> tuple[int, int]:
        level = sum(1 for th in self.thresholds if queue_occupancy >= th)
        return self.windows[level]


AccessPolicy = DcfPolicy | PriorityRandomAccess


def access_policy(kind: str, **params) -> AccessPolicy:
    if kind == "dcf_basic":
        return DcfPolicy()
    if kind == "priority_random_access":
        if "thresholds" in params:
            params["thresholds"] = tuple(params["thresholds"])
        if "windows" in params:
            params["windows"] = tuple(tuple(w) for w in params["windows"])
        return PriorityRandomAccess(**params)
    raise SimulationError(f"unknown access policy {kind!r}")


ARRIVAL_PROCESSES = ("deterministic", "jittered", "poisson", "backlogged", "burst", "relay")


@dataclass(frozen=True)
class LinkLoad:
    link: Link
    rate_pps: float = 0.0
    process: str = "deterministic"
    queue_capacity: int = 100
    burst_packets: int = 0
    initial_backlog: int = 0

    def __post_init__(self):
        if self.rate_pps < 0:
            raise SimulationError("arrival rate must be >= 0")
        if self.queue_capacity < 1:
            raise SimulationError("queue capacity must be >= 1")
        if self.process not in ARRIVAL_PROCESSES:
            raise SimulationError(f"unknown arrival process {self.process!r}")
        if self.burst_packets < 0:
            raise SimulationError("burst_packets must be >= 0")
        if self.initial_backlog < 0:
            raise SimulationError("initial_backlog must be >= 0")

    @property
    def active(self) -> bool:
        return self.process in ("backlogged", "burst", "relay") or self.rate_pps > 0


@dataclass(frozen=True)
class StopRule:
    per_link_quota: int | None = None
    time_cap_us: int | None = None
    quota_links: tuple[Link, ...] | None = None  # None: every active loaded link

    def __post_init__(self):
        if self.per_link_quota is None and self.time_cap_us is None:
            raise SimulationError("stop rule needs a quota or a time cap")
        if self.per_link_quota is not None and self.per_link_quota < 1:
            raise SimulationError("quota must be >= 1")


@dataclass
class LinkMeasurements:
    link: Link
    samples_us: list[int] = field(default_factory=list)
    successes: int = 0
    mac_drops: int = 0
    attempts: int = 0
    drop_times_in_mac_us: list[int] = field(default_factory=list)
    airtime_pairs: list[tuple[int, float]] = field(default_factory=list)
    offered: int = 0
    accepted: int = 0
    overflow_drops: int = 0
    relayed_in: int = 0
    queue_final: int = 0
    queueing_delay_us: float = 0.0
    busy_us: int = 0
    idle_us: int = 0
    delivered_pps: float = 0.0
    post_mark_offered: int = 0
    post_mark_delivered: int = 0
    post_mark_overflow: int = 0
    queue_samples: list[tuple[int, int]] = field(default_factory=list)

    @property
    def s_bar_us(self) -> float:
        return sum(self.samples_us) / len(self.samples_us) if self.samples_us else 0.0


@dataclass
class IterationMeasurements:
    per_link: dict[Link, LinkMeasurements]
    duration_us: int
    truncated: bool


# Event kinds, in tie-break order at equal timestamps: signal endings release
# the medium before anything else starts; ACKs outrank fresh backoff fires;
# fires precede the sensing onset of signals launched elsewhere in the same
# microsecond (the in-air overlap itself is tracked from the true start time).
_K_SIG_OFF = 0
_K_TX_END = 1
_K_ACK_START = 2
_K_FIRE = 3
_K_ARRIVAL = 4
_K_SIG_ON = 5
_K_SAMPLE = 6
_K_MARK = 7
_K_TIMEOUT = 8

_IDLE, _CONTEND, _TXWAIT = 0, 1, 2
_DATA, _ACK = 0, 1


class _Signal:
    __slots__ = ("tx", "rx", "link", "kind", "t0", "end_air", "corrupted")

    def __init__(self, tx, rx, link, kind, t0, end_air, corrupted=False):
        self.tx = tx
        self.rx = rx
        self.link = link
        self.kind = kind
        self.t0 = t0
        self.end_air = end_air
        self.corrupted = corrupted


class _Node:
    __slots__ = ("id", "sense_count", "transmitting", "busy_since", "busy_total", "contending")

    def __init__(self, node_id):
        self.id = node_id
        self.sense_count = 0
        self.transmitting = False
        self.busy_since = 0
        self.busy_total = 0
        self.contending = {}  # ordered set of _LinkSim; insertion order is deterministic


class _LinkSim:
    __slots__ = (
        "link", "tx", "rx", "load", "rng", "queue", "state", "epoch", "counter",
        "anchor", "hol_arrival", "hol_start", "attempts_cur", "cw", "cw_hi",
        "attempt_serial", "consumed", "quota_done", "data_dur", "ack_dur",
        "payload", "rate_bps", "next_arrival_f", "forward_to", "meas",
        "mark_offered", "mark_delivered", "mark_overflow",
    )

    def __init__(self, link, tx_node, rx_node, load, rng, data_dur, ack_dur, payload, rate_bps):
        self.link = link
        self.tx = tx_node
        self.rx = rx_node
        self.load = load
        self.rng = rng
        self.queue = deque()
        self.state = _IDLE
        self.epoch = 0
        self.counter = 0
        self.anchor = None
        self.hol_arrival = 0
        self.hol_start = 0
        self.attempts_cur = 0
        self.cw = 0
        self.cw_hi = 0
        self.attempt_serial = 0
        self.consumed = 0
        self.quota_done = False
        self.data_dur = data_dur
        self.ack_dur = ack_dur
        self.payload = payload
        self.rate_bps = rate_bps
        self.next_arrival_f = 0.0
        self.forward_to = None
        self.meas = LinkMeasurements(link=link)
        self.mark_offered = 0
        self.mark_delivered = 0
        self.mark_overflow = 0

    def system_size(self) -> int:
        return len(self.queue) + (1 if self.state != _IDLE else 0)


class Simulator:
    def __init__(
        self,
        topology: Topology,
        loads: list[LinkLoad],
        mac: MacConfig,
        policy: AccessPolicy,
        stop: StopRule,
        seed: int | str,
        loss_every_nth_attempt: int | None = None,
        forward_chain: tuple[Link, ...] | None = None,
        sample_every_us: int | None = None,
        mark_us: int | None = None,
    ):
        self.mac = mac
        self.policy = policy
        self.stop = stop
        self.loss_period = loss_every_nth_attempt
        if self.loss_period is not None and self.loss_period < 1:
            raise SimulationError("loss injection period must be >= 1")
        self.sample_every = sample_every_us
        self.mark_us = mark_us
        self.heap: list = []
        self._seq = 0
        self.now = 0
        self.active_signals: set[_Signal] = set()
        self.truncated = False

        link_set = set(topology.links)
        self.nodes = {n: _Node(n) for n in sorted(topology.nodes, key=str)}
        self.links: dict[Link, _LinkSim] = {}
        for load in loads:
            if load.link not in link_set:
                raise SimulationError(f"load references unknown link {load.link}")
            if load.link in self.links:
                raise SimulationError(f"duplicate load for link {load.link}")
            tx, rx = load.link
            rate = topology.data_rate[load.link]
            size = topology.packet_size[load.link]
            self.links[load.link] = _LinkSim(
                load.link,
                self.nodes[tx],
                self.nodes[rx],
                load,
                random.Random(f"{seed}:{tx}->{rx}"),
                mac.data_airtime_us(rate, size),
                mac.ack_airtime_us(rate),
                size,
                rate,
            )
        if forward_chain:
            for up, down in zip(forward_chain, forward_chain[1:]):
                if up not in self.links or down not in self.links:
                    raise SimulationError("forward chain links must all carry loads")
                self.links[up].forward_to = self.links[down]

        self.listeners = {
            n: tuple(
                self.nodes[m]
                for m in self.nodes
                if m != n and (m, n) in topology.senses
            )
            for n in self.nodes
        }
        self.corruptors = {
            n: frozenset({n} | {m for m in self.nodes if (m, n) in topology.interferes})
            for n in self.nodes
        }

        if stop.per_link_quota is not None:
            tracked = (
                list(stop.quota_links)
                if stop.quota_links is not None
                else [l for l, ls in self.links.items() if ls.load.active]
            )
            for l in tracked:
                if l not in self.links:
                    raise SimulationError(f"quota tracks unloaded link {l}")
            self.quota_pending = set(tracked)
        else:
            self.quota_pending = set()

    # -- event plumbing -----------------------------------------------------

    def _push(self, t: int, kind: int, a=None, b=None):
        heapq.heappush(self.heap, (t, kind, self._seq, a, b))
        self._seq += 1

    # -- medium state -------------------------------------------------------

    def _inc_busy(self, node: _Node, t: int):
        node.sense_count += 1
        if node.sense_count == 1:
            node.busy_since = t
            for ls in list(node.contending):
                self._freeze(ls, t)

    def _dec_busy(self, node: _Node, t: int):
        node.sense_count -= 1
        if node.sense_count == 0:
            node.busy_total += t - node.busy_since
            for ls in list(node.contending):
                self._resume(ls, t)

    def _freeze(self, ls: _LinkSim, t: int):
        if ls.anchor is None:
            return
        elapsed = t - ls.anchor - self.mac.difs_us
        if elapsed > 0:
            ls.counter = max(0, ls.counter - elapsed // self.mac.slot_us)
        ls.anchor = None
        ls.epoch += 1

    def _resume(self, ls: _LinkSim, t: int):
        ls.anchor = t
        ls.epoch += 1
        self._push(t + self.mac.difs_us + ls.counter * self.mac.slot_us, _K_FIRE, ls, ls.epoch)

    def _contend(self, ls: _LinkSim, t: int):
        ls.state = _CONTEND
        ls.tx.contending[ls] = None
        if ls.tx.sense_count == 0:
            self._resume(ls, t)
        else:
            ls.anchor = None

    # -- packet lifecycle ---------------------------------------------------

    def _accept_arrival(self, ls: _LinkSim, t: int, relayed: bool = False):
        ls.meas.offered += 1
        if relayed:
            ls.meas.relayed_in += 1
        if ls.system_size() >= ls.load.queue_capacity:
            ls.meas.overflow_drops += 1
            return
        ls.meas.accepted += 1
        ls.queue.append(t)
        if ls.state == _IDLE:
            self._start_next_packet(ls, t)

    def _start_next_packet(self, ls: _LinkSim, t: int):
        if ls.queue:
            arrival = ls.queue.popleft()
        elif ls.load.process == "backlogged":
            ls.meas.offered += 1
            ls.meas.accepted += 1
            arrival = t
        else:
            ls.state = _IDLE
            return
        ls.hol_arrival = arrival
        ls.hol_start = t
        ls.meas.queueing_delay_us += t - arrival
        ls.attempts_cur = 0
        lo, hi = self.policy.window_for(1 + len(ls.queue), self.mac)
        ls.cw = lo
        ls.cw_hi = hi
        ls.counter = ls.rng.randrange(lo + 1)
        self._contend(ls, t)

    def _begin_transmission(self, node: _Node, sig: _Signal, t: int):
        # Mark mutual collisions against everything already in the air, then
        # join that set. Overlap is half-open: a signal leaving the air at
        # exactly t was removed before this runs.
        for other in self.active_signals:
            if other.rx is not None and sig.tx.id in self.corruptors[other.rx.id]:
                other.corrupted = True
            if sig.rx is not None and other.tx.id in self.corruptors[sig.rx.id]:
                sig.corrupted = True
        self.active_signals.add(sig)
        node.transmitting = True
        self._inc_busy(node, t)
        self._push(sig.end_air - self.mac.propagation_us, _K_TX_END, sig)
        self._push(sig.t0 + self.mac.propagation_us, _K_SIG_ON, sig)
        self._push(sig.end_air, _K_SIG_OFF, sig)

    def _fire(self, ls: _LinkSim, epoch: int, t: int):
        if epoch != ls.epoch or ls.state != _CONTEND:
            return
        ls.tx.contending.pop(ls, None)
        ls.anchor = None
        ls.state = _TXWAIT
        ls.attempts_cur += 1
        ls.attempt_serial += 1
        ls.meas.attempts += 1
        forced = self.loss_period is not None and ls.attempt_serial % self.loss_period == 0
        sig = _Signal(
            ls.tx, ls.rx, ls, _DATA, t, t + ls.data_dur + self.mac.propagation_us, forced
        )
        self._begin_transmission(ls.tx, sig, t)
        timeout = (
            t
            + ls.data_dur
            + self.mac.propagation_us
            + self.mac.sifs_us
            + ls.ack_dur
            + self.mac.propagation_us
            + 1
        )
        self._push(timeout, _K_TIMEOUT, ls, ls.epoch)

    def _ack_timeout(self, ls: _LinkSim, epoch: int, t: int):
        if epoch != ls.epoch or ls.state != _TXWAIT:
            return
        limit = self.mac.retransmit_limit
        if limit is not None and ls.attempts_cur >= limit:
            ls.meas.mac_drops += 1
            ls.meas.drop_times_in_mac_us.append(t - ls.hol_start)
            self._packet_done(ls, t)
        else:
            ls.cw = min(2 * (ls.cw + 1) - 1, ls.cw_hi)
            ls.counter = ls.rng.randrange(ls.cw + 1)
            ls.epoch += 1
            self._contend(ls, t)

    def _packet_done(self, ls: _LinkSim, t: int):
        ls.epoch += 1
        ls.consumed += 1
        if (
            not ls.quota_done
            and ls.link in self.quota_pending
            and ls.consumed >= self.stop.per_link_quota
        ):
            ls.quota_done = True
            self.quota_pending.discard(ls.link)
        self._start_next_packet(ls, t)

    def _success(self, ls: _LinkSim, t: int):
        ls.meas.successes += 1
        ls.meas.samples_us.append(t - ls.hol_start)
        ls.meas.airtime_pairs.append((ls.payload, ls.rate_bps))
        if ls.forward_to is not None:
            self._accept_arrival(ls.forward_to, t, relayed=True)
        self._packet_done(ls, t)

    # -- event handlers -----------------------------------------------------

    def _handle_sig_off(self, sig: _Signal, t: int):
        self.active_signals.discard(sig)
        for node in self.listeners[sig.tx.id]:
            self._dec_busy(node, t)
        if sig.corrupted:
            return
        if sig.kind == _DATA:
            self._push(t + self.mac.sifs_us, _K_ACK_START, sig.link, sig.link.epoch)
        else:
            ls = sig.link
            if ls.state == _TXWAIT:
                self._success(ls, t)

    def _handle_ack_start(self, ls: _LinkSim, epoch: int, t: int):
        if epoch != ls.epoch or ls.state != _TXWAIT:
            return
        if ls.rx.transmitting:
            return  # receiver is mid-transmission; the sender will time out
        sig = _Signal(ls.rx, ls.tx, ls, _ACK, t, t + ls.ack_dur + self.mac.propagation_us)
        self._begin_transmission(ls.rx, sig, t)

    def _handle_tx_end(self, sig: _Signal, t: int):
        sig.tx.transmitting = False
        self._dec_busy(sig.tx, t)

    def _schedule_arrival(self, ls: _LinkSim):
        proc = ls.load.process
        if proc == "deterministic":
            self._push(round(ls.next_arrival_f), _K_ARRIVAL, ls)
            ls.next_arrival_f += 1e6 / ls.load.rate_pps
        elif proc == "jittered":
            # mean-preserving dithered gaps: low burstiness like a periodic
            # source, but relative phases between equal-rate links diffuse
            # instead of locking into seed-dependent collision patterns
            self._push(round(ls.next_arrival_f), _K_ARRIVAL, ls)
            ls.next_arrival_f += (1e6 / ls.load.rate_pps) * ls.rng.uniform(0.5, 1.5)
        elif proc == "poisson":
            ls.next_arrival_f += ls.rng.expovariate(ls.load.rate_pps / 1e6)
            self._push(round(ls.next_arrival_f), _K_ARRIVAL, ls)

    def _handle_arrival(self, ls: _LinkSim, t: int):
        self._accept_arrival(ls, t)
        self._schedule_arrival(ls)

    # -- run ----------------------------------------------------------------

    def run(self) -> IterationMeasurements:
        for ls in self.links.values():
            proc = ls.load.process
            if ls.load.initial_backlog and proc != "backlogged":
                # queue carried over from a previous measurement window;
                # packets are already in the system, so service starts at t=0
                for _ in range(min(ls.load.initial_backlog, ls.load.queue_capacity)):
                    self._accept_arrival(ls, 0)
            if proc in ("deterministic", "jittered", "poisson") and ls.load.rate_pps > 0:
                if proc in ("deterministic", "jittered"):
                    # stagger phases so equal-rate links do not march in step
                    ls.next_arrival_f = ls.rng.uniform(0.0, 1e6 / ls.load.rate_pps)
                self._schedule_arrival(ls)
            elif proc == "backlogged":
                self._start_next_packet(ls, 0)
            elif proc == "burst":
                for _ in range(ls.load.burst_packets):
                    self._accept_arrival(ls, 0)
        if self.sample_every:
            self._push(self.sample_every, _K_SAMPLE, None)
        if self.mark_us is not None:
            self._push(self.mark_us, _K_MARK, None)

        cap = self.stop.time_cap_us
        quota_mode = self.stop.per_link_quota is not None
        end = 0
        while self.heap:
            t, kind, _, a, b = heapq.heappop(self.heap)
            if cap is not None and t > cap:
                end = cap
                self.truncated = quota_mode and bool(self.quota_pending)
                break
            self.now = t
            end = t
            if kind == _K_SIG_OFF:
                self._handle_sig_off(a, t)
            elif kind == _K_TX_END:
                self._handle_tx_end(a, t)
            elif kind == _K_ACK_START:
                self._handle_ack_start(a, b, t)
            elif kind == _K_FIRE:
                self._fire(a, b, t)
            elif kind == _K_TIMEOUT:
                self._ack_timeout(a, b, t)
            elif kind == _K_ARRIVAL:
                self._handle_arrival(a, t)
            elif kind == _K_SIG_ON:
                for node in self.listeners[a.tx.id]:
                    self._inc_busy(node, t)
            elif kind == _K_SAMPLE:
                for ls in self.links.values():
                    ls.meas.queue_samples.append((t, ls.system_size()))
                self._push(t + self.sample_every, _K_SAMPLE, None)
            elif kind == _K_MARK:
                for ls in self.links.values():
                    ls.mark_offered = ls.meas.offered
                    ls.mark_delivered = ls.meas.successes
                    ls.mark_overflow = ls.meas.overflow_drops
            if quota_mode and not self.quota_pending:
                break

        duration = max(end, 1)
        for node in self.nodes.values():
            if node.sense_count > 0:
                node.busy_total += duration - node.busy_since
                node.sense_count = 0
        per_link = {}
        for link, ls in self.links.items():
            m = ls.meas
            m.queue_final = ls.system_size()
            m.busy_us = min(ls.tx.busy_total, duration)
            m.idle_us = duration - m.busy_us
            m.delivered_pps = m.successes * 1e6 / duration
            m.post_mark_offered = m.offered - ls.mark_offered
            m.post_mark_delivered = m.successes - ls.mark_delivered
            m.post_mark_overflow = m.overflow_drops - ls.mark_overflow
            per_link[link] = m
        return IterationMeasurements(
            per_link=per_link, duration_us=duration, truncated=self.truncated
        )


def run_iteration(
    topology: Topology,
    loads: list[LinkLoad],
    mac: MacConfig,
    policy: AccessPolicy,
    stop: StopRule,
    seed: int | str,
    loss_every_nth_attempt: int | None = None,
    forward_chain: tuple[Link, ...] | None = None,
    sample_every_us: int | None = None,
    mark_us: int | None = None,
) -> IterationMeasurements:
    """One measurement window: run until every tracked link consumed its quota
    (successes + MAC drops) or the time cap fired; deterministic per seed."""
    sim = Simulator(
        topology,
        loads,
        mac,
        policy,
        stop,
        seed,
        loss_every_nth_attempt=loss_every_nth_attempt,
        forward_chain=forward_chain,
        sample_every_us=sample_every_us,
        mark_us=mark_us,
    )
    return sim.run()


def backlogged_pair_run(
    topology: Topology,
    link_a: Link,
    link_b: Link,
    mode: str,
    horizon_us: int,
    seed: int | str,
    mac: MacConfig | None = None,
    policy: AccessPolicy | None = None,
) -> dict[Link, float]:
    """Saturated throughputs (packets/s) of one or both links, others silent."""
    if mode not in ("solo_a", "solo_b", "simultaneous"):
        raise SimulationError(f"unknown mode {mode!r}")
    mac = mac or MacConfig()
    policy = policy or DcfPolicy()
    selected = {"solo_a": [link_a], "solo_b": [link_b], "simultaneous": [link_a, link_b]}[mode]
    loads = [LinkLoad(link=l, process="backlogged") for l in selected]
    meas = run_iteration(topology, loads, mac, policy, StopRule(time_cap_us=horizon_us), seed)
    return {l: meas.per_link[l].delivered_pps for l in selected}


@dataclass(frozen=True)
class ProbeResult:
    rate_pps: float
    per_link_rate_pps: dict[Link, float]
    truncated: bool


def path_capacity_probe(
    topology: Topology,
    path: tuple[Link, ...],
    background: list[LinkLoad],
    quota: int = 200,
    seed: int | str = 1,
    mac: MacConfig | None = None,
    policy: AccessPolicy | None = None,
) -> ProbeResult:
    """Residual capacity of a path: inject a back-to-back packet train at the
    first hop, relay it hop by hop, and take the bottleneck over path links of
    1/S_bar minus the non-probe arrival rate the link carried."""
    mac = mac or MacConfig()
    policy = policy or DcfPolicy()
    if not path:
        raise SimulationError("probe path is empty")
    for (_, rx), (tx2, _) in zip(path, path[1:]):
        if rx != tx2:
            raise SimulationError("probe path links are not chained")
    bg_by_link = {l.link: l for l in background}
    if path[0] in bg_by_link:
        raise SimulationError("background load on the probe source link is not supported")
    loads = []
    for i, link in enumerate(path):
        cap = quota + 10
        if i == 0:
            loads.append(
                LinkLoad(link=link, process="burst", burst_packets=quota, queue_capacity=cap)
            )
        elif link in bg_by_link:
            # shared link: keep the background arrivals, widen the queue so the
            # probe train fits behind them
            loads.append(replace(bg_by_link[link], queue_capacity=cap))
        else:
            loads.append(LinkLoad(link=link, process="relay", queue_capacity=cap))
    loads.extend(l for l in background if l.link not in set(path))
    per_packet = max(
        mac.uncontended_service_us(topology.data_rate[l.link], topology.packet_size[l.link])
        for l in loads
    )
    cap_us = round(quota * 10 * per_packet * len(loads))
    meas = run_iteration(
        topology,
        loads,
        mac,
        policy,
        StopRule(per_link_quota=quota, time_cap_us=cap_us, quota_links=tuple(path)),
        seed,
        forward_chain=tuple(path),
    )
    per_link_rate = {}
    for i, link in enumerate(path):
        m = meas.per_link[link]
        if not m.samples_us:
            per_link_rate[link] = 0.0
            continue
        own_probe = m.offered if i == 0 else m.relayed_in
        lam_other = max(0, m.offered - own_probe) * 1e6 / meas.duration_us
        per_link_rate[link] = max(0.0, 1e6 / m.s_bar_us - lam_other)
    return ProbeResult(
        rate_pps=min(per_link_rate.values()),
        per_link_rate_pps=per_link_rate,
        truncated=meas.truncated,
    )
