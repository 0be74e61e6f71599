"""Centralized max-min and weighted-fair rate allocation over residual estimates.

Each link advertises a residual capacity (packets/s of headroom at its current
load). The allocator spreads that headroom across every flow crossing the
link's contention neighborhood, then lets each link cap its neighborhood at
the tightest member, and finally assigns each flow the minimum cap along its
path. Negative residuals push rates down through the same arithmetic. All
steps are pure functions: they return a fresh state and never mutate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .topo import Flow, Link

RATE_FLOOR = 1.0  # packets/s; keeps every flow-bearing link generating samples


class AllocatorError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationState:
    """Allocator variables after one step.

    r_allocate and r_max cover the active links (those with at least one flow
    in their neighborhood); r_f is keyed by flow id. bottleneck maps each flow
    to the path link whose r_allocate set its rate, ties broken by link id.
    """

    r_allocate: dict[Link, float]
    r_max: dict[Link, float]
    r_f: dict[str, float]
    iteration: int = 0
    bottleneck: dict[str, Link] | None = None


def _crossings(flow: Flow, link: Link) -> int:
    return sum(1 for l in flow.path if l == link)


def flow_incidence(
    flows: tuple[Flow, ...],
    nbr: dict[Link, frozenset[Link]],
    weights: dict[str, float] | None = None,
    airtimes: dict[Link, float] | None = None,
) -> dict[Link, float]:
    """Per-link total of (weighted) flow crossings over the link's neighborhood.

    With airtimes, each member's crossings are scaled by the ratio of its
    packet airtime to the link's own: raising the whole neighborhood by one
    unit of rate then costs exactly this many of the link's packet slots, so
    residual/incidence stays a feasible uniform raise under mixed packet
    sizes. Uniform airtimes reduce to plain counts.
    """
    per_link: dict[Link, float] = {}
    for link, hood in nbr.items():
        total = 0.0
        for member in hood:
            cross = 0.0
            for f in flows:
                w = 1.0 if weights is None else weights[f.id]
                cross += w * _crossings(f, member)
            if cross == 0.0:
                continue
            if airtimes is None:
                ratio = 1.0
            else:
                if member not in airtimes or link not in airtimes:
                    raise AllocatorError(f"missing airtime for link {member}")
                ratio = airtimes[member] / airtimes[link]
            total += cross * ratio
        per_link[link] = total
    return per_link


def link_arrival_rates(flows: tuple[Flow, ...], r_f: dict[str, float]) -> dict[Link, float]:
    """Per-link arrival rate implied by flow rates: each crossing adds r_f."""
    rates: dict[Link, float] = {}
    for f in flows:
        for link in f.path:
            rates[link] = rates.get(link, 0.0) + r_f[f.id]
    return rates


def active_links(flows: tuple[Flow, ...], nbr: dict[Link, frozenset[Link]]) -> list[Link]:
    counts = flow_incidence(flows, nbr)
    return sorted((l for l, c in counts.items() if c > 0), key=str)


def init_state(
    flows: tuple[Flow, ...],
    nbr: dict[Link, frozenset[Link]],
    rate_floor: float = RATE_FLOOR,
) -> AllocationState:
    """Start every flow at the floor; seed each link's cap from its own load."""
    links = active_links(flows, nbr)
    r_allocate = {
        l: rate_floor * max(1, sum(_crossings(f, l) for f in flows)) for l in links
    }
    return AllocationState(
        r_allocate=r_allocate,
        r_max=dict(r_allocate),
        r_f={f.id: rate_floor for f in flows},
        iteration=0,
        bottleneck=None,
    )


def _residual_value(entry) -> float:
    # accepts bare floats or estimator.ResidualEstimate records
    return float(getattr(entry, "residual", entry))


def _step(
    state: AllocationState,
    residuals: dict,
    nbr: dict[Link, frozenset[Link]],
    flows: tuple[Flow, ...],
    weights: dict[str, float] | None,
    rate_floor: float,
    airtimes: dict[Link, float] | None = None,
) -> AllocationState:
    links = active_links(flows, nbr)
    incidence = flow_incidence(flows, nbr, weights, airtimes)
    r_max: dict[Link, float] = {}
    for link in links:
        if link not in residuals:
            raise AllocatorError(f"no residual estimate for active link {link}")
        inc = incidence[link]
        if inc <= 0:
            raise AllocatorError(f"active link {link} has zero flow incidence")
        base = state.r_allocate.get(link, rate_floor)
        r_max[link] = max(rate_floor, base + _residual_value(residuals[link]) / inc)
    r_allocate: dict[Link, float] = {}
    for link in links:
        members = sorted((m for m in nbr[link] if m in r_max), key=str)
        r_allocate[link] = min(r_max[m] for m in members)
    r_f: dict[str, float] = {}
    bottleneck: dict[str, Link] = {}
    for f in flows:
        best_link = min(f.path, key=lambda l: (r_allocate[l], str(l)))
        cap = r_allocate[best_link]
        w = 1.0 if weights is None else weights[f.id]
        r_f[f.id] = max(rate_floor, w * cap)
        bottleneck[f.id] = best_link
    return AllocationState(
        r_allocate=r_allocate,
        r_max=r_max,
        r_f=r_f,
        iteration=state.iteration + 1,
        bottleneck=bottleneck,
    )


def maxmin_step(
    state: AllocationState,
    residuals: dict,
    nbr: dict[Link, frozenset[Link]],
    flows: tuple[Flow, ...],
    rate_floor: float = RATE_FLOOR,
    airtimes: dict[Link, float] | None = None,
) -> AllocationState:
    """One synchronous allocator update from fresh residual estimates."""
    return _step(state, residuals, nbr, flows, None, rate_floor, airtimes)


def weighted_step(
    state: AllocationState,
    residuals: dict,
    nbr: dict[Link, frozenset[Link]],
    flows: tuple[Flow, ...],
    weights: dict[str, float],
    rate_floor: float = RATE_FLOOR,
    airtimes: dict[Link, float] | None = None,
) -> AllocationState:
    """Weighted-fair variant: flow f's share scales with w_f.

    Weights are normalized to unit mean first, so scaling them all by a
    constant changes nothing and all-ones weights reduce to maxmin_step.
    """
    for f in flows:
        if f.id not in weights:
            raise AllocatorError(f"missing weight for flow {f.id}")
        if weights[f.id] <= 0:
            raise AllocatorError(f"weight for flow {f.id} must be > 0")
    mean_w = sum(weights[f.id] for f in flows) / len(flows)
    normalized = {f.id: weights[f.id] / mean_w for f in flows}
    return _step(state, residuals, nbr, flows, normalized, rate_floor, airtimes)


def check_constraint(
    deltas: dict[Link, float],
    residuals: dict,
    nbr: dict[Link, frozenset[Link]],
    airtimes: dict[Link, float] | None = None,
) -> tuple[bool, dict[Link, float]]:
    """Airtime-weighted feasibility of a set of per-link rate changes.

    For every link carrying a residual estimate, the airtime its neighborhood
    would newly consume (each member's delta scaled by the ratio of packet
    airtimes) must not exceed the link's residual. Returns overall truth and
    the per-link slack (residual minus consumed); slack < 0 marks a violator.
    With airtimes=None all ratios are 1.
    """
    slack: dict[Link, float] = {}
    ok = True
    for link, entry in residuals.items():
        res = _residual_value(entry)
        if airtimes is not None and link not in airtimes:
            raise AllocatorError(f"missing airtime for link {link}")
        consumed = 0.0
        for member in nbr.get(link, frozenset({link})):
            d = deltas.get(member, 0.0)
            if d == 0.0:
                continue
            if airtimes is None:
                ratio = 1.0
            else:
                if member not in airtimes:
                    raise AllocatorError(f"missing airtime for link {member}")
                ratio = airtimes[member] / airtimes[link]
            consumed += d * ratio
        s = res - consumed
        slack[link] = s
        tol = 1e-9 * max(1.0, abs(res), abs(consumed))
        if s < -tol:
            ok = False
    return ok, slack
