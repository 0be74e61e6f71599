"""Simulation-backed ground truth: feasibility checks and max-min optima.

A rate vector is feasible when, after a warmup window, every loaded link keeps
up with its arrivals (neither losing a meaningful fraction of packets nor
growing its queue). The max-min optimum is found by progressive water-filling:
raise all unfrozen flows together until infeasible, freeze the flows sharing
the binding neighborhood at the highest feasible level, and repeat. Each
feasibility probe is a majority vote over independently seeded simulations,
and finished solutions are cached by scenario fingerprint so repeated runs do
not re-search.
"""

from __future__ import annotations

import hashlib
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .allocator import link_arrival_rates
from .macsim import AccessPolicy, LinkLoad, MacConfig, StopRule, Simulator
from .topo import Flow, Link, Topology, neighborhood, save_topology

EPS_FEASIBLE = 0.02  # tolerated post-warmup loss fraction
# Near the boundary an empty-start queue takes tens of seconds to relax to its
# stationary occupancy; shorter horizons read that relaxation as a positive
# drift and reject rates the network sustains indefinitely.
DEFAULT_HORIZON_US = 60_000_000
WARMUP_FRACTION = 0.25
# Probe queues are deep so that an overflow signals genuine divergence, not a
# transient excursion (stable boundary runs were observed spiking past 50).
QUEUE_CAPACITY = 250
# queue-growth allowance: the occupancy fit may climb by at most this many
# packets over the post-warmup window ("slope <= 0 within noise"); the floor
# is rate-scaled because random-walk excursions of a stationary near-critical
# queue grow with the window while a fixed budget would shrink below them
SLOPE_BUDGET_PACKETS = 8.0
SLOPE_BUDGET_PPS = 0.4
# fresh-seed verification probes this far inside the reported rates; matches
# the 5% accuracy band the estimates are judged against
VERIFY_MARGIN = 0.05


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    delivery_ratio: dict[Link, float]
    max_queue: int
    queue_slope_per_s: dict[Link, float]
    severity: dict[Link, float]  # > 1 marks the checks a link failed, scaled

    def worst_link(self) -> Link | None:
        if not self.severity:
            return None
        return max(self.severity, key=lambda l: (self.severity[l], str(l)))


def is_feasible(
    topology: Topology,
    flow_rates: dict[str, float],
    mac: MacConfig,
    policy: AccessPolicy,
    horizon_us: int = DEFAULT_HORIZON_US,
    seed: int | str = 1,
    eps_f: float = EPS_FEASIBLE,
    queue_capacity: int = QUEUE_CAPACITY,
    flows: tuple[Flow, ...] | None = None,
    loss_every_nth_attempt: int | None = None,
) -> FeasibilityVerdict:
    """Simulate the per-link loads implied by flow rates and grade stability.

    A link passes when its post-warmup loss fraction (packets neither
    delivered nor still queued at the end) stays within eps_f, it never
    overflows after warmup, and a linear fit of its queue occupancy grows by
    less than the growth budget over the measured window.
    """
    if horizon_us <= 0:
        raise OracleError("horizon must be positive")
    for fid, r in flow_rates.items():
        if r < 0:
            raise OracleError(f"negative rate for flow {fid}")
    flows = topology.flows if flows is None else flows
    lam = link_arrival_rates(flows, flow_rates)
    # jittered (dithered-periodic) probes: near-constant spacing keeps queues
    # tiny below the sustainable rate, while the dither prevents equal-period
    # sources from freezing into phase-locked collision patterns that made
    # feasibility hinge on initial phases rather than on the rates themselves
    loads = [
        LinkLoad(link=l, rate_pps=r, process="jittered", queue_capacity=queue_capacity)
        for l, r in sorted(lam.items(), key=lambda kv: str(kv[0]))
        if r > 0
    ]
    warmup = int(horizon_us * WARMUP_FRACTION)
    sim = Simulator(
        topology,
        loads,
        mac,
        policy,
        StopRule(time_cap_us=horizon_us),
        seed,
        loss_every_nth_attempt=loss_every_nth_attempt,
        sample_every_us=max(1, horizon_us // 120),
        mark_us=warmup,
    )
    meas = sim.run()
    if meas.truncated:
        raise OracleError("feasibility run truncated before its horizon")

    ratios: dict[Link, float] = {}
    slopes: dict[Link, float] = {}
    severity: dict[Link, float] = {}
    max_queue = 0
    feasible = True
    window_us = max(1, meas.duration_us - warmup)
    growth_budget = max(SLOPE_BUDGET_PACKETS, SLOPE_BUDGET_PPS * window_us / 1e6)
    for link, m in meas.per_link.items():
        if m.queue_samples:
            max_queue = max(max_queue, max(q for _, q in m.queue_samples))
        max_queue = max(max_queue, m.queue_final)
        offered = m.post_mark_offered
        if offered <= 0:
            ratios[link] = 1.0
        else:
            still_queued = min(m.queue_final, offered - m.post_mark_delivered)
            lost = offered - m.post_mark_delivered - max(0, still_queued)
            ratios[link] = 1.0 - lost / offered
        late = [(t, q) for t, q in m.queue_samples if t >= warmup]
        if len(late) >= 3 and any(q != late[0][1] for _, q in late):
            slope, _ = statistics.linear_regression([t for t, _ in late], [q for _, q in late])
        else:
            slope = 0.0
        slopes[link] = slope * 1e6
        growth = slope * window_us
        sev = max(
            (1.0 - ratios[link]) / eps_f,
            growth / growth_budget,
            2.0 + m.post_mark_overflow if m.post_mark_overflow > 0 else 0.0,
        )
        severity[link] = sev
        if ratios[link] < 1.0 - eps_f:
            feasible = False
        if m.post_mark_overflow > 0:
            feasible = False
        if growth > growth_budget:
            feasible = False
    return FeasibilityVerdict(
        feasible=feasible,
        delivery_ratio=ratios,
        max_queue=max_queue,
        queue_slope_per_s=slopes,
        severity=severity,
    )


@dataclass(frozen=True)
class MaxMinSolution:
    rates: dict[str, float]
    groups: tuple[frozenset[str], ...]
    trace: tuple[dict, ...]
    horizon_us: int


def _probe_one(args) -> FeasibilityVerdict:
    topology, rates, mac, policy, horizon_us, seed, flows, loss = args
    return is_feasible(
        topology, rates, mac, policy, horizon_us, seed, flows=flows,
        loss_every_nth_attempt=loss,
    )


def _worker_count() -> int:
    raw = os.environ.get("CAPEST_WORKERS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _vote(
    topology, rates, mac, policy, horizon_us, seeds, flows,
    all_seeds: bool = False, loss: int | None = None,
) -> tuple[bool, list[FeasibilityVerdict]]:
    """Majority feasibility across seeds.

    The sequential path stops once the majority is decided unless all_seeds is
    set; callers that inspect the verdicts (bottleneck identification) must
    request every seed so the answer does not depend on evaluation order.
    """
    jobs = [(topology, rates, mac, policy, horizon_us, s, flows, loss) for s in seeds]
    need = len(seeds) // 2 + 1
    verdicts: list[FeasibilityVerdict] = []
    if _worker_count() > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(_worker_count(), len(jobs))) as pool:
            verdicts = list(pool.map(_probe_one, jobs))
    else:
        yes = no = 0
        for job in jobs:
            v = _probe_one(job)
            verdicts.append(v)
            yes += v.feasible
            no += not v.feasible
            if not all_seeds and (yes >= need or no >= need):
                break
    return sum(v.feasible for v in verdicts) >= need, verdicts


def _pav_nonincreasing(values: list[float], weights: list[float]) -> list[float]:
    """Isotonic regression onto nonincreasing sequences (pool adjacent violators)."""
    blocks: list[list[float]] = []  # [mean, weight, count]
    for v, w in zip(values, weights):
        blocks.append([v, w, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    out: list[float] = []
    for mean, _, count in blocks:
        out.extend([mean] * count)
    return out


def _scenario_fingerprint(
    topology, flows, mac, policy, tol_r, seeds, horizon_us, loss=None
) -> str:
    blob = json.dumps(
        {
            "probe": 3,  # bump when the probe process or grading rules change
            "topology": save_topology(topology),
            "flows": sorted(f.id for f in flows),
            "mac": {k: getattr(mac, k) for k in mac.__dataclass_fields__},
            "policy": {k: getattr(policy, k) for k in policy.__dataclass_fields__},
            "tol_r": tol_r,
            "seeds": list(seeds),
            "horizon_us": horizon_us,
            "loss": loss,
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _load_cache(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text())
    return {}


def _solution_to_json(sol: MaxMinSolution) -> dict:
    return {
        "rates": sol.rates,
        "groups": [sorted(g) for g in sol.groups],
        "trace": list(sol.trace),
        "horizon_us": sol.horizon_us,
    }


def _solution_from_json(doc: dict) -> MaxMinSolution:
    return MaxMinSolution(
        rates=dict(doc["rates"]),
        groups=tuple(frozenset(g) for g in doc["groups"]),
        trace=tuple(doc["trace"]),
        horizon_us=int(doc["horizon_us"]),
    )


def _search(
    topology: Topology,
    flows: tuple[Flow, ...],
    mac: MacConfig,
    policy: AccessPolicy,
    tol_r: float,
    seeds: tuple[int, ...],
    horizon_us: int,
    loss: int | None = None,
) -> MaxMinSolution:
    nbr = neighborhood(topology)
    rate_cap = 2e6 / min(
        mac.uncontended_service_us(topology.data_rate[l], topology.packet_size[l])
        for f in flows
        for l in f.path
    )
    unfrozen = {f.id for f in flows}
    level = {f.id: 0.0 for f in flows}
    groups: list[frozenset[str]] = []
    trace: list[dict] = []
    base = 0.0  # water level frozen so far; later groups must close at >= base

    def rates_at(x: float) -> dict[str, float]:
        return {fid: (x if fid in unfrozen else level[fid]) for fid in level}

    def probe_seeds(x: float, round_no: int) -> tuple:
        # fresh streams per probe level: reusing one seed set across the whole
        # bisection lets a lucky draw drag the boundary several percent
        return tuple(f"{s}/{int(round(x * 8))}.{round_no}" for s in seeds)

    def majority(x: float) -> bool:
        ok, _ = _vote(
            topology, rates_at(x), mac, policy, horizon_us, probe_seeds(x, 0), flows,
            loss=loss,
        )
        trace.append({"phase": len(groups), "rate": x, "feasible": ok})
        return ok

    while unfrozen:
        lo = base
        if lo > 0 and not majority(lo):
            # the previous phase ended with this exact vector voted feasible
            raise OracleError(
                f"water-filling base rate {lo:.1f} pkt/s infeasible; "
                "feasibility is not monotone at this horizon"
            )
        hi = max(lo + tol_r, 2 * tol_r)
        for _ in range(40):
            if not majority(hi):
                break
            lo = hi
            hi = min(2 * hi, rate_cap)
            if lo >= rate_cap:
                break
        else:
            raise OracleError("feasible beyond any physical rate; check the scenario")
        for _ in range(3):  # shrink the doubling bracket before the fine grid
            if hi - lo <= tol_r:
                break
            mid = (lo + hi) / 2
            if majority(mid):
                lo = mid
            else:
                hi = mid

        # Pointwise votes are noisy over a wide band (a single lucky verdict
        # would anchor a bisection permanently), so estimate the boundary as a
        # threshold: sample a grid across the band, fit a nonincreasing
        # feasibility probability by isotonic regression, and take its 50%
        # crossing. Pooling all the grid's failures also gives a stable
        # view of which link binds.
        failing: list[FeasibilityVerdict] = []

        def grid_pass(center: float, span: float, round_no: int) -> tuple[float, int]:
            bot = max(base, center - span)
            top = max(center + span, bot + tol_r)
            n_levels = 11
            levels = [bot + (top - bot) * i / (n_levels - 1) for i in range(n_levels)]
            p_hat: list[float] = []
            for lv in levels:
                _, verdicts = _vote(
                    topology,
                    rates_at(lv),
                    mac,
                    policy,
                    horizon_us,
                    probe_seeds(lv, round_no),
                    flows,
                    all_seeds=True,
                    loss=loss,
                )
                p = sum(v.feasible for v in verdicts) / len(verdicts)
                p_hat.append(p)
                failing.extend(v for v in verdicts if not v.feasible)
                trace.append(
                    {"phase": len(groups), "rate": round(lv, 3), "grid_p": round(p, 3)}
                )
            fitted = _pav_nonincreasing(p_hat, [1.0] * n_levels)
            if fitted[0] <= 0.5:
                # boundary at or below the window; -1 means recenter downward
                # (unless the bottom is already pinned at the water level)
                return levels[0], (0 if bot <= base else -1)
            if fitted[-1] > 0.5:
                return levels[-1], +1
            i = next(j for j, p in enumerate(fitted) if p <= 0.5)
            p0, p1 = fitted[i - 1], fitted[i]
            cross = levels[i - 1] + (p0 - 0.5) * (levels[i] - levels[i - 1]) / (p0 - p1)
            return cross, 0

        # refinement: successively narrower windows recentered on the latest
        # crossing estimate; a window whose ends still disagree with the fit
        # direction slides instead of shrinking, so an early coarse miss
        # cannot clamp the final answer
        crossing = (lo + hi) / 2
        span = max(3 * tol_r, 0.15 * crossing)
        round_no = 1
        while round_no <= 6:
            crossing, edge = grid_pass(max(crossing, base), span, round_no)
            round_no += 1
            if edge != 0:
                continue
            if span <= 3 * tol_r + 1e-9:
                break
            span = max(3 * tol_r, span / 5)
        freeze_at = max(crossing, base)

        # binding neighborhood: the link with the worst (median) severity over
        # every failing grid verdict; every seed is scored so worker count
        # cannot change the answer
        per_link_sev: dict[Link, list[float]] = {}
        for v in failing:
            for l, s in v.severity.items():
                per_link_sev.setdefault(l, []).append(s)
        group: set[str] = set()
        if per_link_sev:
            bottleneck = max(
                per_link_sev,
                key=lambda l: (statistics.median(per_link_sev[l]), str(l)),
            )
            hood = nbr[bottleneck]
            group = {
                f.id for f in flows if f.id in unfrozen and any(l in hood for l in f.path)
            }
        if not group:
            # noise fallback: freeze every remaining flow at the found level
            group = set(unfrozen)
        for fid in group:
            level[fid] = freeze_at
        unfrozen -= group
        groups.append(frozenset(group))
        base = freeze_at
        trace.append({"phase": len(groups) - 1, "freeze": sorted(group), "rate": freeze_at})
    return MaxMinSolution(
        rates=level, groups=tuple(groups), trace=tuple(trace), horizon_us=horizon_us
    )


def maxmin_oracle(
    topology: Topology,
    flows: tuple[Flow, ...] | None = None,
    mac: MacConfig | None = None,
    policy: AccessPolicy | None = None,
    tol_r: float = 1.0,
    seeds: tuple[int, ...] = (1, 2, 3),
    horizon_us: int = DEFAULT_HORIZON_US,
    cache_path: str | Path | None = None,
    loss_every_nth_attempt: int | None = None,
) -> MaxMinSolution:
    """Max-min fair rates by water-filling over feasibility bisection.

    The result is verified feasible on a fresh seed; on failure the whole
    search reruns once at twice the horizon before giving up. Set
    CAPEST_ORACLE_REFRESH=1 to ignore a cache hit and re-search.
    """
    from .macsim import DcfPolicy

    flows = topology.flows if flows is None else flows
    if not flows:
        raise OracleError("no flows to allocate")
    mac = mac or MacConfig()
    policy = policy or DcfPolicy()

    key = _scenario_fingerprint(
        topology, flows, mac, policy, tol_r, seeds, horizon_us,
        loss=loss_every_nth_attempt,
    )
    cache_file = Path(cache_path) if cache_path is not None else None
    refresh = os.environ.get("CAPEST_ORACLE_REFRESH", "") not in ("", "0")
    if cache_file is not None and not refresh:
        cached = _load_cache(cache_file).get(key)
        if cached is not None:
            return _solution_from_json(cached)

    last_err: OracleError | None = None
    solution = None
    for attempt, h in enumerate((horizon_us, 2 * horizon_us)):
        try:
            candidate = _search(
                topology, flows, mac, policy, tol_r, seeds, h,
                loss=loss_every_nth_attempt,
            )
        except OracleError as e:
            last_err = e
            continue
        # Verify on seeds disjoint from the search's, same majority notion.
        # The reported rates sit at the 50% point of the finite-horizon
        # feasibility band by construction, so the exact vector would fail a
        # fresh coin flip half the time no matter how good the search was;
        # certify a vector just inside the band instead. A failure at that
        # margin means the search rode a noise streak.
        fresh = tuple(s + 1000 for s in seeds)
        inside = {fid: r * (1 - VERIFY_MARGIN) for fid, r in candidate.rates.items()}
        ok, _ = _vote(
            topology, inside, mac, policy, h, fresh, flows,
            loss=loss_every_nth_attempt,
        )
        if ok:
            solution = candidate
            break
        last_err = OracleError(
            "oracle rates failed fresh-seed verification; widen the horizon"
        )
    if solution is None:
        raise last_err if last_err else OracleError("oracle search failed")

    if cache_file is not None:
        cache = _load_cache(cache_file)
        cache[key] = _solution_to_json(solution)
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(cache, indent=1, sort_keys=True))
    return solution
