"""Topology model: nodes, directed links, flows, and conflict relations.

A topology carries two symmetric node relations. `senses` says who defers to
whose transmissions (carrier sensing); `interferes` says whose transmissions
corrupt receptions at whom. Link neighborhoods are built from their union and
drive both the rate allocator and the simulator's collision model.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import yaml

Node = int | str
Link = tuple[Node, Node]

DEFAULT_DATA_RATE_BPS = 11e6
DEFAULT_PACKET_SIZE_BYTES = 1024


class TopologyError(ValueError):
    pass


def node_key(n: Node):
    """Stable sort key across int and str node identifiers."""
    if isinstance(n, bool):  # bool is an int subclass; reject early
        raise TopologyError(f"node id {n!r} must be int or str")
    if isinstance(n, int):
        return (0, n, "")
    return (1, 0, str(n))


def link_key(link: Link):
    return (node_key(link[0]), node_key(link[1]))


def _symmetric_closure(pairs) -> frozenset[tuple[Node, Node]]:
    closed = set()
    for a, b in pairs:
        closed.add((a, b))
        closed.add((b, a))
    return frozenset(closed)


@dataclass(frozen=True)
class Flow:
    """A routed flow: ordered chain of directed links plus a fairness weight."""

    id: str
    path: tuple[Link, ...]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "path", tuple((tx, rx) for tx, rx in self.path))
        if not self.path:
            raise TopologyError(f"flow {self.id}: empty path")
        if not self.weight > 0:
            raise TopologyError(f"flow {self.id}: weight must be > 0")
        for (_, rx), (tx2, _) in zip(self.path, self.path[1:]):
            if rx != tx2:
                raise TopologyError(f"flow {self.id}: path links are not chained")

    @property
    def source(self) -> Node:
        return self.path[0][0]

    @property
    def destination(self) -> Node:
        return self.path[-1][1]


@dataclass(frozen=True)
class Topology:
    nodes: frozenset[Node]
    links: tuple[Link, ...]
    flows: tuple[Flow, ...]
    senses: frozenset[tuple[Node, Node]]
    interferes: frozenset[tuple[Node, Node]]
    data_rate: dict[Link, float] = field(default_factory=dict)
    packet_size: dict[Link, int] = field(default_factory=dict)
    positions: dict[Node, tuple[float, float]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(
            self, "links", tuple(sorted(((tx, rx) for tx, rx in self.links), key=link_key))
        )
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "senses", _symmetric_closure(self.senses))
        object.__setattr__(self, "interferes", _symmetric_closure(self.interferes))
        rates = dict(self.data_rate)
        sizes = dict(self.packet_size)
        for link in self.links:
            rates.setdefault(link, DEFAULT_DATA_RATE_BPS)
            sizes.setdefault(link, DEFAULT_PACKET_SIZE_BYTES)
        object.__setattr__(self, "data_rate", rates)
        object.__setattr__(self, "packet_size", sizes)
        self._validate()

    def _validate(self):
        for tx, rx in self.links:
            if tx == rx:
                raise TopologyError(f"link {tx}->{rx}: tx and rx must differ")
            for end in (tx, rx):
                if end not in self.nodes:
                    raise TopologyError(f"link {tx}->{rx}: node {end!r} not declared")
        for rel_name, rel in (("senses", self.senses), ("interferes", self.interferes)):
            for a, b in rel:
                for end in (a, b):
                    if end not in self.nodes:
                        raise TopologyError(f"{rel_name} pair ({a!r},{b!r}): node not declared")
        link_set = set(self.links)
        seen_flow_ids = set()
        for flow in self.flows:
            if flow.id in seen_flow_ids:
                raise TopologyError(f"duplicate flow id {flow.id!r}")
            seen_flow_ids.add(flow.id)
            for link in flow.path:
                if link not in link_set:
                    raise TopologyError(
                        f"flow {flow.id}: link {link[0]}->{link[1]} not declared"
                    )
        for link, rate in self.data_rate.items():
            if not rate > 0:
                raise TopologyError(f"link {link[0]}->{link[1]}: data rate must be > 0")
        for link, size in self.packet_size.items():
            if not size > 0:
                raise TopologyError(f"link {link[0]}->{link[1]}: packet size must be > 0")

    def related(self, a: Node, b: Node) -> bool:
        """True if a and b are coupled: equal, sensing, or interfering."""
        return a == b or (a, b) in self.senses or (a, b) in self.interferes

    def flow_by_id(self, flow_id: str) -> Flow:
        for flow in self.flows:
            if flow.id == flow_id:
                return flow
        raise TopologyError(f"unknown flow id {flow_id!r}")


NeighborhoodMap = dict[Link, frozenset[Link]]


def neighborhood(topology: Topology) -> NeighborhoodMap:
    """Map each link to the self-inclusive set of links coupled to it.

    Link k->l belongs to N(i->j) iff any endpoint of one link is related
    (equal, sensing, or interfering) to any endpoint of the other. The rule is
    symmetric in the two links, so membership is mutual.
    """
    nbr: NeighborhoodMap = {}
    for i, j in topology.links:
        members = set()
        for k, l in topology.links:
            if (
                topology.related(i, k)
                or topology.related(i, l)
                or topology.related(j, k)
                or topology.related(j, l)
            ):
                members.add((k, l))
        nbr[(i, j)] = frozenset(members)
    return nbr


@dataclass(frozen=True)
class LirMeasurement:
    """Solo vs simultaneous backlogged throughputs of a link pair, in packets/s."""

    c11: float
    c22: float
    c31: float
    c32: float
    lir: float = field(init=False)

    def __post_init__(self):
        for name in ("c11", "c22", "c31", "c32"):
            if getattr(self, name) < 0:
                raise TopologyError(f"{name} must be >= 0")
        denom = self.c11 + self.c22
        if denom <= 0:
            raise TopologyError("LIR undefined: both solo throughputs are zero")
        object.__setattr__(self, "lir", (self.c31 + self.c32) / denom)


def classify_lir(m: LirMeasurement, threshold: float = 0.95) -> bool:
    """True if the pair interferes: simultaneous throughput degraded below threshold."""
    return m.lir <= threshold


def builtin_topology(
    name: str,
    data_rate_bps: float = DEFAULT_DATA_RATE_BPS,
    packet_size_bytes: int = DEFAULT_PACKET_SIZE_BYTES,
) -> Topology:
    """Hand-encoded benchmark layouts: 'fim' and 'chain_cross'."""
    if name == "fim":
        return _fim_topology(data_rate_bps, packet_size_bytes)
    if name == "chain_cross":
        return _chain_cross_topology(data_rate_bps, packet_size_bytes)
    raise TopologyError(f"unknown builtin topology {name!r}")


def _fim_topology(rate: float, size: int) -> Topology:
    # Three parallel two-hop chains. The middle chain's nodes interfere with
    # both outer chains (its links contend with everyone); the outer chains do
    # not couple with each other. Sensing never crosses chains, so cross-chain
    # coupling is collision-driven while in-chain coupling is deferral-driven.
    chains = [(1, 2, 3), (4, 5, 6), (7, 8, 9)]
    nodes = {n for chain in chains for n in chain}
    links = []
    flows = []
    senses = set()
    for a, b, c in chains:
        links += [(a, b), (b, c)]
        flows.append(Flow(id=f"f{a}_{c}", path=((a, b), (b, c))))
        senses |= {(a, b), (b, c), (a, c)}
    interferes = set(senses)
    middle = chains[1]
    for outer in (chains[0], chains[2]):
        for m in middle:
            for o in outer:
                interferes.add((m, o))
    return Topology(
        nodes=frozenset(nodes),
        links=tuple(links),
        flows=tuple(flows),
        senses=frozenset(senses),
        interferes=frozenset(interferes),
        data_rate={l: rate for l in links},
        packet_size={l: size for l in links},
    )


def _chain_cross_topology(rate: float, size: int) -> Topology:
    # A six-hop chain 1..7 crossed by two single-hop links: 8->9 placed next to
    # node 3, 10->11 next to node 5. Adjacency doubles as both sensing and
    # interference; coupling along the chain is hidden-terminal at two hops
    # (e.g. node 4's transmissions corrupt receptions at 3, unseen by node 2).
    chain = [1, 2, 3, 4, 5, 6, 7]
    nodes = set(chain) | {8, 9, 10, 11}
    chain_links = [(a, b) for a, b in zip(chain, chain[1:])]
    links = chain_links + [(8, 9), (10, 11)]
    adjacency = set(chain_links)
    adjacency |= {(3, 8), (3, 9), (8, 9), (5, 10), (5, 11), (10, 11)}
    flows = (
        Flow(id="f1_7", path=tuple(chain_links)),
        Flow(id="f1_2", path=((1, 2),)),
        Flow(id="f8_9", path=((8, 9),)),
        Flow(id="f10_11", path=((10, 11),)),
        Flow(id="f6_7", path=((6, 7),)),
    )
    return Topology(
        nodes=frozenset(nodes),
        links=tuple(links),
        flows=flows,
        senses=frozenset(adjacency),
        interferes=frozenset(adjacency),
        data_rate={l: rate for l in links},
        packet_size={l: size for l in links},
    )


def random_topology(
    n_nodes: int,
    n_flows: int,
    side_length: float,
    sense_range: float,
    interfere_range: float,
    seed: int,
    data_rate_bps: float = DEFAULT_DATA_RATE_BPS,
    packet_size_bytes: int = DEFAULT_PACKET_SIZE_BYTES,
    max_retries: int = 50,
) -> Topology:
    """Uniform node placement in a square; disk-range relations; min-hop routes."""
    if n_nodes < 2:
        raise TopologyError("need at least 2 nodes")
    if sense_range <= 0 or interfere_range <= 0 or side_length <= 0:
        raise TopologyError("ranges and side length must be > 0")
    rng = random.Random(f"topo:{seed}")
    nodes = list(range(n_nodes))
    positions = {n: (rng.uniform(0, side_length), rng.uniform(0, side_length)) for n in nodes}

    def dist2(a: Node, b: Node) -> float:
        (xa, ya), (xb, yb) = positions[a], positions[b]
        return (xa - xb) ** 2 + (ya - yb) ** 2

    senses = {(a, b) for a in nodes for b in nodes if a < b and dist2(a, b) <= sense_range**2}
    interferes = {
        (a, b) for a in nodes for b in nodes if a < b and dist2(a, b) <= interfere_range**2
    }
    adj = {n: [] for n in nodes}
    for a, b in senses:
        adj[a].append(b)
        adj[b].append(a)
    for n in nodes:
        adj[n].sort()

    def min_hop_path(src: Node, dst: Node) -> list[Node] | None:
        parent = {src: src}
        frontier = [src]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in parent:
                        parent[v] = u
                        if v == dst:
                            path = [v]
                            while path[-1] != src:
                                path.append(parent[path[-1]])
                            return path[::-1]
                        nxt.append(v)
            frontier = nxt
        return None

    flows = []
    links = set()
    for i in range(n_flows):
        for attempt in range(max_retries):
            src, dst = rng.sample(nodes, 2)
            node_path = min_hop_path(src, dst)
            if node_path is not None:
                break
        else:
            raise TopologyError(
                f"flow {i}: no connected endpoint pair found in {max_retries} tries"
            )
        path = tuple((a, b) for a, b in zip(node_path, node_path[1:]))
        links.update(path)
        flows.append(Flow(id=f"f{i}_{src}_{dst}", path=path))

    return Topology(
        nodes=frozenset(nodes),
        links=tuple(sorted(links, key=link_key)),
        flows=tuple(flows),
        senses=frozenset(senses),
        interferes=frozenset(interferes),
        data_rate={l: data_rate_bps for l in links},
        packet_size={l: packet_size_bytes for l in links},
        positions=positions,
    )


# ---------------------------------------------------------------------------
# Topology file I/O. Scenario files are YAML documents with sections `nodes`,
# `relations`, `links`, `flows` (handled here) plus `mac` and `run` (handled by
# the experiment runner). Explicit relation lists take precedence; otherwise
# relations are derived from node positions and the ranges given under
# `relations`.
# ---------------------------------------------------------------------------


def _parse_pairs(raw, section: str) -> set[tuple[Node, Node]]:
    pairs = set()
    for idx, entry in enumerate(raw):
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise TopologyError(f"{section}[{idx}]: expected a [a, b] pair")
        pairs.add((entry[0], entry[1]))
    return pairs


def topology_from_sections(doc: dict) -> Topology:
    if not isinstance(doc, dict):
        raise TopologyError("scenario document must be a mapping")
    raw_nodes = doc.get("nodes")
    if not raw_nodes:
        raise TopologyError("missing section: nodes")
    nodes = []
    positions = {}
    for idx, entry in enumerate(raw_nodes):
        if isinstance(entry, dict):
            if "id" not in entry:
                raise TopologyError(f"nodes[{idx}]: missing id")
            nid = entry["id"]
            if "x" in entry or "y" in entry:
                try:
                    positions[nid] = (float(entry["x"]), float(entry["y"]))
                except (KeyError, TypeError, ValueError):
                    raise TopologyError(f"nodes[{idx}]: x and y must both be numbers")
        else:
            nid = entry
        nodes.append(nid)
    if len(set(nodes)) != len(nodes):
        raise TopologyError("duplicate node ids")

    raw_links = doc.get("links")
    if not raw_links:
        raise TopologyError("missing section: links")
    links = []
    data_rate = {}
    packet_size = {}
    for idx, entry in enumerate(raw_links):
        if not isinstance(entry, dict) or "tx" not in entry or "rx" not in entry:
            raise TopologyError(f"links[{idx}]: expected mapping with tx and rx")
        link = (entry["tx"], entry["rx"])
        links.append(link)
        data_rate[link] = float(entry.get("data_rate_bps", DEFAULT_DATA_RATE_BPS))
        packet_size[link] = int(entry.get("packet_size_bytes", DEFAULT_PACKET_SIZE_BYTES))

    relations = doc.get("relations") or {}
    if not isinstance(relations, dict):
        raise TopologyError("relations: expected a mapping")
    senses, interferes = None, None
    if "senses" in relations:
        senses = _parse_pairs(relations["senses"], "relations.senses")
    if "interferes" in relations:
        interferes = _parse_pairs(relations["interferes"], "relations.interferes")
    if senses is None or interferes is None:
        derived = {}
        for rel_name, range_name in (
            ("senses", "sense_range"),
            ("interferes", "interfere_range"),
        ):
            if (senses if rel_name == "senses" else interferes) is not None:
                continue
            if range_name not in relations:
                raise TopologyError(
                    f"relations: need explicit {rel_name} list or {range_name} with node positions"
                )
            rng_m = float(relations[range_name])
            missing = [n for n in nodes if n not in positions]
            if missing:
                raise TopologyError(
                    f"relations.{range_name}: node {missing[0]!r} has no position"
                )
            derived[rel_name] = {
                (a, b)
                for i, a in enumerate(nodes)
                for b in nodes[i + 1 :]
                if (positions[a][0] - positions[b][0]) ** 2
                + (positions[a][1] - positions[b][1]) ** 2
                <= rng_m**2
            }
        senses = derived.get("senses", senses)
        interferes = derived.get("interferes", interferes)

    flows = []
    for idx, entry in enumerate(doc.get("flows") or []):
        if not isinstance(entry, dict) or "id" not in entry or "path" not in entry:
            raise TopologyError(f"flows[{idx}]: expected mapping with id and path")
        node_path = list(entry["path"])
        if len(node_path) < 2:
            raise TopologyError(f"flows[{idx}]: path needs at least 2 nodes")
        path = tuple((a, b) for a, b in zip(node_path, node_path[1:]))
        flows.append(Flow(id=str(entry["id"]), path=path, weight=float(entry.get("weight", 1.0))))

    return Topology(
        nodes=frozenset(nodes),
        links=tuple(links),
        flows=tuple(flows),
        senses=frozenset(senses),
        interferes=frozenset(interferes),
        data_rate=data_rate,
        packet_size=packet_size,
        positions=positions or None,
    )


def topology_to_sections(topology: Topology) -> dict:
    """Canonical serializable form: sorted, explicit relations."""
    nodes_sorted = sorted(topology.nodes, key=node_key)
    nodes_out = []
    for n in nodes_sorted:
        if topology.positions and n in topology.positions:
            x, y = topology.positions[n]
            nodes_out.append({"id": n, "x": float(x), "y": float(y)})
        else:
            nodes_out.append({"id": n})

    def pairs_out(rel):
        canon = {tuple(sorted(p, key=node_key)) for p in rel}
        return [list(p) for p in sorted(canon, key=lambda p: (node_key(p[0]), node_key(p[1])))]

    links_out = [
        {
            "tx": tx,
            "rx": rx,
            "data_rate_bps": float(topology.data_rate[(tx, rx)]),
            "packet_size_bytes": int(topology.packet_size[(tx, rx)]),
        }
        for tx, rx in topology.links
    ]
    flows_out = [
        {
            "id": f.id,
            "path": [f.path[0][0]] + [rx for _, rx in f.path],
            "weight": float(f.weight),
        }
        for f in sorted(topology.flows, key=lambda f: f.id)
    ]
    return {
        "nodes": nodes_out,
        "relations": {
            "senses": pairs_out(topology.senses),
            "interferes": pairs_out(topology.interferes),
        },
        "links": links_out,
        "flows": flows_out,
    }


def load_topology(text: str) -> Topology:
    """Parse the topology sections of a scenario document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TopologyError(f"scenario parse error: {exc}") from exc
    return topology_from_sections(doc)


def save_topology(topology: Topology) -> str:
    """Serialize to the canonical scenario form; load(save(t)) == t."""
    return yaml.safe_dump(topology_to_sections(topology), sort_keys=False)
