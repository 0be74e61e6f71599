"""Scenario runner and command-line front end.

Wires the simulator, per-link estimators, and the rate allocator into the
iterative estimation loop, and drives the auxiliary modes (ground-truth
search, fixed-point analysis, interference survey, residual curves, path
probes). Scenario files are YAML: the topology sections handled by topo, a
`mac` section (MacConfig fields plus an access policy spec), and a `run`
section with per-mode parameters. Outputs are CSV files plus a summary.json;
CSV rows are deterministic for a fixed scenario, config, and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .allocator import (
    check_constraint,
    init_state,
    link_arrival_rates,
    maxmin_step,
    weighted_step,
)
from .estimator import ResidualEstimate, ServiceEstimator
from .fixedpoint import (
    WlanModel,
    backoff_from_mac,
    canonical_backoff,
    capest_iterate,
    find_fixed_point,
    verify_shape,
)
from .macsim import (
    AccessPolicy,
    DcfPolicy,
    LinkLoad,
    MacConfig,
    StopRule,
    access_policy,
    backlogged_pair_run,
    path_capacity_probe,
    run_iteration,
)
from .oracle import DEFAULT_HORIZON_US, _worker_count, maxmin_oracle
from .topo import (
    Link,
    LirMeasurement,
    Topology,
    TopologyError,
    classify_lir,
    link_key,
    neighborhood,
    topology_from_sections,
)

CSV_SCHEMA = "capest-csv/1"
MODES = (
    "capest_maxmin",
    "capest_weighted",
    "oracle",
    "fixedpoint",
    "lir_survey",
    "residual_curve",
    "path_probe",
)
# convergence acceptance used by --check on capest modes: within the band by
# this iteration and never leaving it afterwards
CHECK_BAND = 0.05
CHECK_ITERATIONS = 18


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    mac: MacConfig
    policy: AccessPolicy
    run: dict
    path: str = ""


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario parse error in {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{p}: scenario document must be a mapping")
    try:
        topology = topology_from_sections(doc)
    except TopologyError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc

    mac_sec = dict(doc.get("mac") or {})
    pol_sec = mac_sec.pop("policy", None) or {"kind": "dcf_basic"}
    if not isinstance(pol_sec, dict) or "kind" not in pol_sec:
        raise ScenarioError(f"{p}: mac.policy needs a 'kind'")
    unknown = set(mac_sec) - set(MacConfig.__dataclass_fields__)
    if unknown:
        raise ScenarioError(f"{p}: unknown mac fields {sorted(unknown)}")
    mac = MacConfig(**mac_sec)
    pol_sec = dict(pol_sec)
    policy = access_policy(pol_sec.pop("kind"), **pol_sec)
    run = doc.get("run") or {}
    if not isinstance(run, dict):
        raise ScenarioError(f"{p}: run section must be a mapping")
    return Scenario(topology=topology, mac=mac, policy=policy, run=run, path=str(p))


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_path: str | Path
    mode: str
    iterations: int = 30
    quota: int = 200
    seed: int | str = 1
    out_dir: str | Path | None = None
    check: bool = False
    oracle_cache: str | Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"unknown mode {self.mode!r}")
        if self.iterations < 1:
            raise ScenarioError("iterations must be >= 1")
        if self.quota < 1:
            raise ScenarioError("quota must be >= 1")


@dataclass
class RunReport:
    mode: str
    flow_rows: list[dict]
    link_rows: list[dict]
    summary: dict
    truncated_iterations: list[int] = field(default_factory=list)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _write_summary(out_dir: Path, summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


def _link_str(link: Link) -> str:
    return f"{link[0]}->{link[1]}"


def _max_window_slots(policy: AccessPolicy, mac: MacConfig) -> float:
    """Widest contention window the policy can draw, for drop accounting."""
    windows = getattr(policy, "windows", None)
    if windows:
        return float(max(hi for _, hi in windows))
    return float(mac.cw_max)


def _tx_cost_us(topology: Topology, mac: MacConfig, link: Link) -> float:
    """One successful transmission after winning access: data, SIFS, ACK."""
    rate = topology.data_rate[link]
    size = topology.packet_size[link]
    return (
        mac.data_airtime_us(rate, size)
        + mac.propagation_us
        + mac.sifs_us
        + mac.ack_airtime_us(rate)
    )


def _payload_airtime_us(topology: Topology, link: Link) -> float:
    return topology.packet_size[link] * 8.0 / topology.data_rate[link] * 1e6


# -- the estimation loop ------------------------------------------------------


def run_capest(config: ExperimentConfig) -> RunReport:
    """Iterate measure -> estimate -> allocate and log every step.

    Each iteration is a fresh simulation window at the arrival rates the
    allocator chose last time; estimators are reset at the boundary, so the
    residuals consumed by the allocator come entirely from the window just
    measured. Multi-hop flows load every path link with an independent
    arrival process at the flow's rate, the same reading of per-link load
    the feasibility oracle uses.
    """
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path)
    topo, mac, policy = scn.topology, scn.mac, scn.policy
    if not topo.flows:
        raise ScenarioError(f"{scn.path}: no flows to allocate")
    run_cfg = scn.run
    weighted = config.mode == "capest_weighted"
    weights = {f.id: f.weight for f in topo.flows}

    process = run_cfg.get("process", "jittered")
    queue_capacity = int(run_cfg.get("queue_capacity", 100))
    loss_n = run_cfg.get("loss_every_nth_attempt")
    loss_n = int(loss_n) if loss_n is not None else None
    loss_accounting = bool(run_cfg.get("loss_accounting", True))
    airtime_mode = run_cfg.get("constraint_airtimes", "measured")
    if airtime_mode not in ("measured", "off"):
        raise ScenarioError(f"constraint_airtimes must be 'measured' or 'off'")

    nbr = neighborhood(topo)
    flows = topo.flows
    state = init_state(flows, nbr)
    lam = link_arrival_rates(flows, state.r_f)
    loaded = sorted(lam, key=link_key)
    for link in loaded:
        if link not in topo.data_rate:
            raise ScenarioError(f"flow path link {_link_str(link)} not declared")
    uncont = max(
        mac.uncontended_service_us(topo.data_rate[l], topo.packet_size[l]) for l in loaded
    )
    cap_us = int(config.quota * 10 * uncont * len(loaded))
    w_m_slots = _max_window_slots(policy, mac)

    oracle_rates: dict[str, float] | None = None
    ocfg = dict(run_cfg.get("oracle") or {})
    cache = config.oracle_cache or ocfg.get("cache")
    if not weighted and cache is not None:
        cache = Path(cache)
        if not cache.is_absolute():
            cache = Path(scn.path).parent / cache
        oracle_rates = maxmin_oracle(
            topo,
            flows,
            mac,
            policy,
            tol_r=float(ocfg.get("tol_r", 1.0)),
            seeds=tuple(ocfg.get("seeds", (1, 2, 3))),
            horizon_us=int(ocfg.get("horizon_us", DEFAULT_HORIZON_US)),
            cache_path=cache,
            loss_every_nth_attempt=loss_n,
        ).rates

    flow_rows: list[dict] = []
    link_rows: list[dict] = []
    truncated_iterations: list[int] = []
    gap_trace: list[float | None] = []
    rate_history: list[dict[str, float]] = []
    violations = 0
    first_violation: int | None = None
    carried: dict[Link, ResidualEstimate] = {}
    # estimators reset each iteration but the network does not: queues left
    # over at the end of one measurement window are still there when the next
    # one starts, so carry the occupancy forward or S bar reads optimistic
    backlog: dict[Link, int] = {}

    for it in range(1, config.iterations + 1):
        loads = [
            LinkLoad(
                link=l,
                rate_pps=lam[l],
                process=process,
                queue_capacity=queue_capacity,
                initial_backlog=backlog.get(l, 0),
            )
            for l in loaded
            if lam[l] > 0
        ]
        meas = run_iteration(
            topo,
            loads,
            mac,
            policy,
            StopRule(per_link_quota=config.quota, time_cap_us=cap_us),
            f"{config.seed}/it{it}",
            loss_every_nth_attempt=loss_n,
        )
        if meas.truncated:
            truncated_iterations.append(it)
        backlog = {
            l: m.queue_final for l, m in meas.per_link.items() if m.queue_final > 0
        }

        residuals: dict[Link, ResidualEstimate] = {}
        airtimes: dict[Link, float] = {}
        stats: dict[Link, dict] = {}
        for l in loaded:
            m = meas.per_link.get(l)
            est = ServiceEstimator(l, retransmit_limit=mac.retransmit_limit)
            if m is not None:
                for s in m.samples_us:
                    est.update_service(s)
                if loss_accounting:
                    t_s = _tx_cost_us(topo, mac, l)
                    for t_in_mac in m.drop_times_in_mac_us:
                        est.account_lost_packet(t_in_mac, w_m_slots, mac.slot_us, t_s)
                for payload_bytes, rate_bps in m.airtime_pairs:
                    est.update_airtime(payload_bytes, rate_bps)
                est.add_queueing_delay(m.queueing_delay_us)
            if est.k > 0:
                r = est.residual(lam[l])
                measured = 1
            elif l in carried:
                prev = carried[l]
                r = ResidualEstimate(
                    link=l,
                    service_rate=prev.service_rate,
                    residual=prev.service_rate - lam[l],
                    t_bar=prev.t_bar,
                )
                measured = 0
            else:
                # nothing observed yet on this link: uncontended prior
                sr = 1e6 / mac.uncontended_service_us(
                    topo.data_rate[l], topo.packet_size[l]
                )
                r = ResidualEstimate(
                    link=l,
                    service_rate=sr,
                    residual=sr - lam[l],
                    t_bar=_payload_airtime_us(topo, l),
                )
                measured = 0
            residuals[l] = r
            airtimes[l] = r.t_bar if r.t_bar > 0 else _payload_airtime_us(topo, l)
            stats[l] = {
                "loss_ratio": est.loss_ratio,
                "successes": m.successes if m else 0,
                "mac_drops": m.mac_drops if m else 0,
                "overflow_drops": m.overflow_drops if m else 0,
                "queue_final": m.queue_final if m else 0,
                "measured": measured,
            }
        carried = residuals

        step_airtimes = airtimes if airtime_mode == "measured" else None
        if weighted:
            state = weighted_step(state, residuals, nbr, flows, weights, airtimes=step_airtimes)
        else:
            state = maxmin_step(state, residuals, nbr, flows, airtimes=step_airtimes)
        new_lam = link_arrival_rates(flows, state.r_f)
        deltas = {l: new_lam.get(l, 0.0) - lam.get(l, 0.0) for l in loaded}
        ok, slack = check_constraint(
            deltas, residuals, nbr, airtimes if airtime_mode == "measured" else None
        )
        if not ok:
            violations += sum(1 for s in slack.values() if s < 0)
            if first_violation is None:
                first_violation = it

        for f in sorted(flows, key=lambda f: f.id):
            flow_rows.append(
                {"iteration": it, "flow": f.id, "rate_pps": state.r_f[f.id]}
            )
        for l in loaded:
            r = residuals[l]
            link_rows.append(
                {
                    "iteration": it,
                    "link": _link_str(l),
                    "lambda_pps": lam[l],
                    "s_bar_us": 1e6 / r.service_rate,
                    "service_rate_pps": r.service_rate,
                    "residual_pps": r.residual,
                    "t_bar_us": airtimes[l],
                    "loss_ratio": stats[l]["loss_ratio"],
                    "successes": stats[l]["successes"],
                    "mac_drops": stats[l]["mac_drops"],
                    "overflow_drops": stats[l]["overflow_drops"],
                    "queue_final": stats[l]["queue_final"],
                    "delta_pps": deltas[l],
                    "constraint_slack_pps": slack.get(l, 0.0),
                    "constraint_ok": int(slack.get(l, 0.0) >= 0),
                    "measured": stats[l]["measured"],
                    "truncated": int(meas.truncated),
                }
            )
        rate_history.append(dict(state.r_f))
        if oracle_rates:
            gap_trace.append(
                max(
                    abs(state.r_f[fid] - oracle_rates[fid]) / oracle_rates[fid]
                    for fid in oracle_rates
                )
            )
        else:
            gap_trace.append(None)
        lam = new_lam

    summary = _capest_summary(
        config, scn, rate_history, gap_trace, oracle_rates, weights if weighted else None
    )
    summary["constraint_violations"] = violations
    summary["first_violation_iteration"] = first_violation
    summary["truncated_iterations"] = truncated_iterations
    summary["wall_clock_s"] = time.monotonic() - t0

    report = RunReport(
        mode=config.mode,
        flow_rows=flow_rows,
        link_rows=link_rows,
        summary=summary,
        truncated_iterations=truncated_iterations,
    )
    if config.out_dir is not None:
        out = Path(config.out_dir)
        _write_csv(out / "rates.csv", ["iteration", "flow", "rate_pps"], flow_rows)
        _write_csv(
            out / "links.csv",
            [
                "iteration",
                "link",
                "lambda_pps",
                "s_bar_us",
                "service_rate_pps",
                "residual_pps",
                "t_bar_us",
                "loss_ratio",
                "successes",
                "mac_drops",
                "overflow_drops",
                "queue_final",
                "delta_pps",
                "constraint_slack_pps",
                "constraint_ok",
                "measured",
                "truncated",
            ],
            link_rows,
        )
        _write_summary(out, summary)
    return report


def _capest_summary(config, scn, rate_history, gap_trace, oracle_rates, weights):
    final = rate_history[-1]
    steps: list[float] = []
    for prev, cur in zip(rate_history, rate_history[1:]):
        steps.append(
            max(abs(cur[fid] - prev[fid]) / max(prev[fid], 1.0) for fid in cur)
        )
    # settle point: first iteration after which every step stays small
    settle = None
    for i in range(len(steps), -1, -1):
        if i == 0 or steps[i - 1] > CHECK_BAND:
            settle = i + 1 if i < len(steps) + 1 else None
            break
    if settle is not None and settle > len(rate_history):
        settle = None
    max_step_after = max(steps[settle - 1 :], default=0.0) if settle else None

    in_band_from = None
    if oracle_rates:
        gaps = [g for g in gap_trace]
        for i in range(len(gaps), 0, -1):
            if gaps[i - 1] is None or gaps[i - 1] > CHECK_BAND:
                in_band_from = i + 1 if i < len(gaps) else None
                break
        else:
            in_band_from = 1
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": config.mode,
        "scenario": str(config.scenario_path),
        "seed": str(config.seed),
        "iterations": config.iterations,
        "quota": config.quota,
        "final_rates": {fid: final[fid] for fid in sorted(final)},
        "settle_iteration": settle,
        "max_step_after_settle": max_step_after,
    }
    if oracle_rates:
        summary["oracle"] = {
            "rates": {fid: oracle_rates[fid] for fid in sorted(oracle_rates)},
            "gap_trace": gap_trace,
            "in_band_from_iteration": in_band_from,
            "final_gap": gap_trace[-1],
        }
    if weights:
        shares = {fid: final[fid] / weights[fid] for fid in final}
        lo, hi = min(shares.values()), max(shares.values())
        summary["weighted"] = {
            "weights": {fid: weights[fid] for fid in sorted(weights)},
            "share_spread": hi / lo - 1.0 if lo > 0 else None,
        }
    return summary


# -- auxiliary modes ----------------------------------------------------------


def run_oracle(config: ExperimentConfig) -> dict:
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path)
    ocfg = dict(scn.run.get("oracle") or {})
    cache = config.oracle_cache or ocfg.get("cache")
    if cache is not None:
        cache = Path(cache)
        if not cache.is_absolute():
            cache = Path(scn.path).parent / cache
    loss_n = scn.run.get("loss_every_nth_attempt")
    sol = maxmin_oracle(
        scn.topology,
        scn.topology.flows,
        scn.mac,
        scn.policy,
        tol_r=float(ocfg.get("tol_r", 1.0)),
        seeds=tuple(ocfg.get("seeds", (1, 2, 3))),
        horizon_us=int(ocfg.get("horizon_us", DEFAULT_HORIZON_US)),
        cache_path=cache,
        loss_every_nth_attempt=int(loss_n) if loss_n is not None else None,
    )
    group_of = {}
    for gi, group in enumerate(sol.groups):
        for fid in group:
            group_of[fid] = gi
    rows = [
        {"flow": fid, "rate_pps": sol.rates[fid], "group": group_of.get(fid, -1)}
        for fid in sorted(sol.rates)
    ]
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": "oracle",
        "scenario": str(config.scenario_path),
        "rates": {fid: sol.rates[fid] for fid in sorted(sol.rates)},
        "groups": [sorted(g) for g in sol.groups],
        "horizon_us": sol.horizon_us,
        "wall_clock_s": time.monotonic() - t0,
    }
    if config.out_dir is not None:
        out = Path(config.out_dir)
        _write_csv(out / "oracle.csv", ["flow", "rate_pps", "group"], rows)
        _write_summary(out, summary)
    return summary


def run_fixedpoint(config: ExperimentConfig) -> dict:
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path) if config.scenario_path else None
    fp = dict((scn.run.get("fixedpoint") if scn else None) or {})
    return _fixedpoint_core(fp, config.out_dir, t0, scenario=str(config.scenario_path))


def _fixedpoint_core(fp: dict, out_dir, t0: float, scenario: str = "") -> dict:
    n = int(fp.get("n", 5))
    sigma = float(fp.get("sigma_us", 20.0))
    t_s = float(fp.get("t_s_us", 800.0))
    b0 = float(fp.get("b0", 16.0))
    stages = int(fp.get("stages", 7))
    tol = float(fp.get("tol", 1e-9))
    grid = int(fp.get("grid", 1000))
    model = WlanModel(n=n, sigma_us=sigma, t_s_us=t_s, b=canonical_backoff(b0, stages))

    bis = find_fixed_point(model, tol=tol)
    lam0 = 1e-4 / (b0 * sigma)
    alpha = fp.get("alpha")
    it = capest_iterate(model, lam0, alpha=float(alpha) if alpha is not None else None, tol=tol)
    alphas = fp.get("alphas") or [0.5, 0.7, 0.9, 1.0 - 1.0 / n]
    sweep_rows = []
    for a in alphas:
        r = capest_iterate(model, lam0, alpha=float(a), tol=tol)
        sweep_rows.append(
            {
                "alpha": float(a),
                "lambda_star_per_us": r.lambda_star,
                "iterations": r.iterations,
                "converged": int(r.converged),
            }
        )
    shape_canonical = verify_shape(model, grid_size=grid, label="canonical")
    capped = WlanModel(
        n=n,
        sigma_us=sigma,
        t_s_us=t_s,
        b=backoff_from_mac(int(b0 * 2 - 1), int((b0 * 2 - 1 + 1) * 2**5 - 1), stages),
    )
    shape_capped = verify_shape(capped, grid_size=grid, label="capped")

    trace_rows = [
        {"method": "bisection", "iteration": i, "lambda_per_us": v}
        for i, v in enumerate(bis.trace)
    ] + [
        {"method": "iterate", "iteration": i, "lambda_per_us": v}
        for i, v in enumerate(it.trace)
    ]
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": "fixedpoint",
        "scenario": scenario,
        "model": {"n": n, "sigma_us": sigma, "t_s_us": t_s, "b0": b0, "stages": stages},
        "bisection": {
            "lambda_star_per_us": bis.lambda_star,
            "iterations": bis.iterations,
            "converged": bis.converged,
        },
        "iterate": {
            "lambda_star_per_us": it.lambda_star,
            "iterations": it.iterations,
            "converged": it.converged,
            "monotone_from_below": it.psi_above_start,
        },
        "agreement_rel": abs(bis.lambda_star - it.lambda_star)
        / max(bis.lambda_star, 1e-300),
        "shape": {
            rep.label: {
                "passed": rep.passed,
                "fprime_violations": len(rep.fprime_violations),
                "fsecond_violations": len(rep.fsecond_violations),
                "grid": rep.grid_size,
                "beta_hi": rep.beta_hi,
            }
            for rep in (shape_canonical, shape_capped)
        },
        "wall_clock_s": time.monotonic() - t0,
    }
    if out_dir is not None:
        out = Path(out_dir)
        _write_csv(
            out / "fixedpoint_trace.csv",
            ["method", "iteration", "lambda_per_us"],
            trace_rows,
        )
        _write_csv(
            out / "alpha_sweep.csv",
            ["alpha", "lambda_star_per_us", "iterations", "converged"],
            sweep_rows,
        )
        _write_summary(out, summary)
    return summary


def run_lir_survey(config: ExperimentConfig) -> dict:
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path)
    topo = scn.topology
    lcfg = dict(scn.run.get("lir") or {})
    if "pairs" in lcfg:
        pairs = [
            ((a[0], a[1]), (b[0], b[1])) for a, b in lcfg["pairs"]
        ]
    else:
        links = list(topo.links)
        pairs = [
            (links[i], links[j])
            for i in range(len(links))
            for j in range(i + 1, len(links))
        ]
    horizon = int(lcfg.get("horizon_us", 4_000_000))
    seeds = list(lcfg.get("seeds", (1, 2, 3)))
    threshold = float(lcfg.get("threshold", 0.95))

    rows = []
    consistent = True
    for la, lb in pairs:
        labels = []
        for s in seeds:
            c11 = backlogged_pair_run(topo, la, lb, "solo_a", horizon, s, scn.mac, scn.policy)[la]
            c22 = backlogged_pair_run(topo, la, lb, "solo_b", horizon, s, scn.mac, scn.policy)[lb]
            both = backlogged_pair_run(topo, la, lb, "simultaneous", horizon, s, scn.mac, scn.policy)
            m = LirMeasurement(c11=c11, c22=c22, c31=both[la], c32=both[lb])
            interferes = classify_lir(m, threshold)
            labels.append(interferes)
            rows.append(
                {
                    "seed": s,
                    "link_a": _link_str(la),
                    "link_b": _link_str(lb),
                    "c11_pps": c11,
                    "c22_pps": c22,
                    "c31_pps": m.c31,
                    "c32_pps": m.c32,
                    "lir": m.lir,
                    "interferes": int(interferes),
                }
            )
        if len(set(labels)) > 1:
            consistent = False
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": "lir_survey",
        "scenario": str(config.scenario_path),
        "pairs": len(pairs),
        "seeds": [str(s) for s in seeds],
        "threshold": threshold,
        "consistent_across_seeds": consistent,
        "wall_clock_s": time.monotonic() - t0,
    }
    if config.out_dir is not None:
        out = Path(config.out_dir)
        _write_csv(
            out / "lir.csv",
            [
                "seed",
                "link_a",
                "link_b",
                "c11_pps",
                "c22_pps",
                "c31_pps",
                "c32_pps",
                "lir",
                "interferes",
            ],
            rows,
        )
        _write_summary(out, summary)
    summary["rows"] = rows
    return summary


def run_residual_curve(
    config: ExperimentConfig,
    target_link: Link | None = None,
    neighbor_sets: dict[str, tuple[Link, ...]] | None = None,
    load_grid: list[float] | None = None,
) -> dict:
    """Sweep neighbor load and record the target link's saturated service rate.

    The target stays backlogged so 1/s_bar tracks the capacity left to it;
    each series splits the swept load evenly across its neighbor set.
    """
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path)
    topo = scn.topology
    rcfg = dict(scn.run.get("residual_curve") or {})
    if target_link is None:
        if "target" not in rcfg:
            raise ScenarioError("residual_curve needs a target link")
        target_link = tuple(rcfg["target"])
    if neighbor_sets is None:
        neighbor_sets = {}
        for entry in rcfg.get("series") or []:
            neighbor_sets[str(entry["label"])] = tuple(
                (l[0], l[1]) for l in entry["links"]
            )
        if not neighbor_sets:
            raise ScenarioError("residual_curve needs at least one series")
    if load_grid is None:
        raw = rcfg.get("loads")
        if isinstance(raw, dict):
            start, stop, steps = float(raw["start"]), float(raw["stop"]), int(raw["steps"])
            load_grid = [
                start + (stop - start) * i / max(1, steps - 1) for i in range(steps)
            ]
        elif raw:
            load_grid = [float(x) for x in raw]
        else:
            raise ScenarioError("residual_curve needs a load grid")
    quota = int(rcfg.get("quota", config.quota))
    process = scn.run.get("process", "jittered")

    rows = []
    for label in sorted(neighbor_sets):
        nset = neighbor_sets[label]
        for y in load_grid:
            loads = [LinkLoad(link=target_link, process="backlogged")]
            if y > 0:
                for l in nset:
                    loads.append(
                        LinkLoad(link=l, rate_pps=y / len(nset), process=process)
                    )
            uncont = scn.mac.uncontended_service_us(
                topo.data_rate[target_link], topo.packet_size[target_link]
            )
            meas = run_iteration(
                topo,
                loads,
                scn.mac,
                scn.policy,
                StopRule(
                    per_link_quota=quota,
                    time_cap_us=int(quota * 40 * uncont * (1 + len(nset))),
                    quota_links=(target_link,),
                ),
                f"{config.seed}/rc/{label}/{y}",
            )
            m = meas.per_link[target_link]
            s_bar = m.s_bar_us
            rows.append(
                {
                    "series": label,
                    "neighbor_load_pps": y,
                    "s_bar_us": s_bar,
                    "service_rate_pps": 1e6 / s_bar if s_bar > 0 else 0.0,
                    "samples": len(m.samples_us),
                    "truncated": int(meas.truncated),
                }
            )
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": "residual_curve",
        "scenario": str(config.scenario_path),
        "target": _link_str(target_link),
        "series": sorted(neighbor_sets),
        "wall_clock_s": time.monotonic() - t0,
    }
    if config.out_dir is not None:
        out = Path(config.out_dir)
        _write_csv(
            out / "curve.csv",
            ["series", "neighbor_load_pps", "s_bar_us", "service_rate_pps", "samples", "truncated"],
            rows,
        )
        _write_summary(out, summary)
    summary["rows"] = rows
    return summary


def run_path_probe(config: ExperimentConfig) -> dict:
    t0 = time.monotonic()
    scn = load_scenario(config.scenario_path)
    topo = scn.topology
    pcfg = dict(scn.run.get("path_probe") or {})
    if "flow" in pcfg:
        path = topo.flow_by_id(str(pcfg["flow"])).path
    elif "path" in pcfg:
        path = tuple((l[0], l[1]) for l in pcfg["path"])
    else:
        raise ScenarioError("path_probe needs a flow id or an explicit path")
    background = []
    for entry in pcfg.get("background") or []:
        background.append(
            LinkLoad(
                link=(entry["link"][0], entry["link"][1]),
                rate_pps=float(entry.get("rate_pps", 0.0)),
                process=str(entry.get("process", "jittered")),
            )
        )
    quota = int(pcfg.get("quota", config.quota))
    probe = path_capacity_probe(
        topo, path, background, quota=quota, seed=config.seed, mac=scn.mac, policy=scn.policy
    )
    rows = [
        {"link": _link_str(l), "rate_pps": probe.per_link_rate_pps[l]}
        for l in path
    ]
    summary = {
        "csv_schema": CSV_SCHEMA,
        "mode": "path_probe",
        "scenario": str(config.scenario_path),
        "path": [_link_str(l) for l in path],
        "rate_pps": probe.rate_pps,
        "truncated": probe.truncated,
        "wall_clock_s": time.monotonic() - t0,
    }
    if config.out_dir is not None:
        out = Path(config.out_dir)
        _write_csv(out / "probe.csv", ["link", "rate_pps"], rows)
        _write_summary(out, summary)
    return summary


# -- dispatch and checking ----------------------------------------------------


def run_mode(config: ExperimentConfig) -> tuple[dict, int]:
    """Run one scenario in its mode; returns (summary, exit_code)."""
    if config.mode in ("capest_maxmin", "capest_weighted"):
        report = run_capest(config)
        summary = report.summary
    elif config.mode == "oracle":
        summary = run_oracle(config)
    elif config.mode == "fixedpoint":
        summary = run_fixedpoint(config)
    elif config.mode == "lir_survey":
        summary = run_lir_survey(config)
    elif config.mode == "residual_curve":
        summary = run_residual_curve(config)
    else:
        summary = run_path_probe(config)
    code = _check_summary(config, summary) if config.check else 0
    return summary, code


def _check_summary(config: ExperimentConfig, summary: dict) -> int:
    mode = config.mode
    if mode == "capest_maxmin":
        orc = summary.get("oracle")
        if not orc:
            print("check: no oracle comparison available (set run.oracle.cache)", file=sys.stderr)
            return 2
        start = orc.get("in_band_from_iteration")
        ok = (
            start is not None
            and start <= CHECK_ITERATIONS
            and orc["final_gap"] is not None
            and orc["final_gap"] <= CHECK_BAND
        )
        if not ok:
            print(
                f"check: convergence outside band (from {start}, final gap {orc['final_gap']})",
                file=sys.stderr,
            )
            return 1
        return 0
    if mode == "capest_weighted":
        spread = (summary.get("weighted") or {}).get("share_spread")
        settle = summary.get("settle_iteration")
        if spread is None or spread > CHECK_BAND or settle is None:
            print(f"check: weighted shares spread {spread}, settle {settle}", file=sys.stderr)
            return 1
        return 0
    if mode == "fixedpoint":
        ok = (
            summary["bisection"]["converged"]
            and summary["iterate"]["converged"]
            and summary["agreement_rel"] <= 1e-6
        )
        return 0 if ok else 1
    if mode == "lir_survey":
        return 0 if summary.get("consistent_across_seeds") else 1
    if mode == "path_probe":
        return 1 if summary.get("truncated") else 0
    return 0  # oracle (verified or raised), residual_curve: completion suffices


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="capest",
        description="measurement-driven link-capacity estimation and rate allocation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run scenario files in a chosen mode")
    runp.add_argument("scenarios", nargs="+", help="scenario YAML files")
    runp.add_argument("--mode", choices=MODES, default="capest_maxmin")
    runp.add_argument("--iters", type=int, default=30)
    runp.add_argument("--quota", type=int, default=200)
    runp.add_argument("--seed", default="1")
    runp.add_argument("--out", default="capest_out", help="output directory root")
    runp.add_argument("--oracle-cache", default=None, help="oracle solution cache file")
    runp.add_argument(
        "--check", action="store_true", help="exit nonzero when thresholds fail"
    )

    fpp = sub.add_parser("fixedpoint", help="WLAN fixed-point analysis from parameters")
    fpp.add_argument("--n", type=int, default=5, help="contending stations")
    fpp.add_argument("--sigma", type=float, default=20.0, help="slot time, us")
    fpp.add_argument("--ts", type=float, default=800.0, help="mean transmission time, us")
    fpp.add_argument("--b0", type=float, default=16.0, help="stage-0 mean window, slots")
    fpp.add_argument("--stages", type=int, default=7, help="retransmit limit")
    fpp.add_argument("--alpha", type=float, default=None, help="damping (default 1-1/n)")
    fpp.add_argument("--tol", type=float, default=1e-9)
    fpp.add_argument("--grid", type=int, default=1000, help="shape scan grid size")
    fpp.add_argument("--out", default=None)

    orp = sub.add_parser("oracle", help="max-min ground truth for a scenario")
    orp.add_argument("scenario")
    orp.add_argument("--tol", type=float, default=1.0, help="rate tolerance, packets/s")
    orp.add_argument("--cache", default=None)
    orp.add_argument("--out", default=None)

    args = parser.parse_args(argv)

    if args.command == "fixedpoint":
        fp = {
            "n": args.n,
            "sigma_us": args.sigma,
            "t_s_us": args.ts,
            "b0": args.b0,
            "stages": args.stages,
            "tol": args.tol,
            "grid": args.grid,
        }
        if args.alpha is not None:
            fp["alpha"] = args.alpha
        try:
            summary = _fixedpoint_core(fp, args.out, time.monotonic())
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(
            f"lambda* = {summary['bisection']['lambda_star_per_us']:.10e} /us "
            f"(bisection, {summary['bisection']['iterations']} iters); "
            f"iterate agrees to {summary['agreement_rel']:.2e}"
        )
        for label, rep in summary["shape"].items():
            print(
                f"shape[{label}]: passed={rep['passed']} "
                f"f' violations={rep['fprime_violations']} "
                f"f'' violations={rep['fsecond_violations']}"
            )
        return 0

    if args.command == "oracle":
        cfg = ExperimentConfig(
            scenario_path=args.scenario,
            mode="oracle",
            out_dir=args.out,
            oracle_cache=args.cache,
        )
        # let the scenario's run.oracle defaults apply; --tol overrides
        scn = load_scenario(args.scenario)
        ocfg = dict(scn.run.get("oracle") or {})
        ocfg["tol_r"] = args.tol
        scn.run["oracle"] = ocfg
        try:
            loss_n = scn.run.get("loss_every_nth_attempt")
            sol = maxmin_oracle(
                scn.topology,
                scn.topology.flows,
                scn.mac,
                scn.policy,
                tol_r=args.tol,
                seeds=tuple(ocfg.get("seeds", (1, 2, 3))),
                horizon_us=int(ocfg.get("horizon_us", DEFAULT_HORIZON_US)),
                cache_path=Path(args.cache) if args.cache else None,
                loss_every_nth_attempt=int(loss_n) if loss_n is not None else None,
            )
        except Exception as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for fid in sorted(sol.rates):
            print(f"{fid}\t{sol.rates[fid]:.2f}")
        print(f"groups: {[sorted(g) for g in sol.groups]}")
        if args.out:
            out = Path(args.out)
            group_of = {fid: gi for gi, g in enumerate(sol.groups) for fid in g}
            _write_csv(
                out / "oracle.csv",
                ["flow", "rate_pps", "group"],
                [
                    {"flow": fid, "rate_pps": sol.rates[fid], "group": group_of[fid]}
                    for fid in sorted(sol.rates)
                ],
            )
        return 0

    # run subcommand
    configs = []
    multi = len(args.scenarios) > 1
    for spath in args.scenarios:
        out = Path(args.out)
        if multi:
            out = out / Path(spath).stem
        configs.append(
            ExperimentConfig(
                scenario_path=spath,
                mode=args.mode,
                iterations=args.iters,
                quota=args.quota,
                seed=args.seed,
                out_dir=out,
                check=args.check,
                oracle_cache=args.oracle_cache,
            )
        )
    workers = _worker_count()
    worst = 0
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            results = list(pool.map(run_mode, configs))
    else:
        results = []
        for cfg in configs:
            try:
                results.append(run_mode(cfg))
            except Exception as exc:
                print(f"error: {cfg.scenario_path}: {exc}", file=sys.stderr)
                results.append(({}, 2))
    for cfg, (summary, code) in zip(configs, results):
        worst = max(worst, code)
        tag = f"[{Path(str(cfg.scenario_path)).stem}:{cfg.mode}]"
        if not summary:
            print(f"{tag} failed")
            continue
        if "final_rates" in summary:
            rates = ", ".join(
                f"{fid}={r:.1f}" for fid, r in summary["final_rates"].items()
            )
            print(f"{tag} final rates (pkt/s): {rates}")
            orc = summary.get("oracle")
            if orc:
                print(
                    f"{tag} oracle gap: final {orc['final_gap']:.3f}, "
                    f"in band from iteration {orc['in_band_from_iteration']}"
                )
        elif "rates" in summary:
            rates = ", ".join(f"{fid}={r:.1f}" for fid, r in summary["rates"].items())
            print(f"{tag} oracle rates (pkt/s): {rates}")
        else:
            print(f"{tag} done in {summary.get('wall_clock_s', 0.0):.1f}s")
    return worst


if __name__ == "__main__":
    sys.exit(main())
