"""Static route network: ports, cyclic routes, vessels and the trade model.

Topologies are stored as JSON with a ``schema_version`` field.  The bundled
six-port topology is ``generate_topology(6, 3, 6, seed=BUNDLED_SEED)``.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
BUNDLED_NAME = "bundled"
BUNDLED_SEED = 2
MODES = ("normal", "hard")


class TopologyError(ValueError):
    """Raised for an invalid topology; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid topology:\n  - " + "\n  - ".join(self.violations))


@dataclass
class Port:
    id: int
    name: str
    capacity: int
    initial_empty: int


@dataclass
class Route:
    id: int
    stops: list[int]
    distances: list[float]  # distances[k]: stops[k] -> stops[k+1], cyclic


@dataclass
class Vessel:
    id: int
    route: int
    capacity: int
    speed: float
    initial_stop: int
    initial_empty: int


@dataclass
class OrderPair:
    src: int
    dst: int
    mu: float
    sigma: float


@dataclass
class OrderModel:
    mode: str
    total_base: float
    pairs: list[OrderPair]
    periods: tuple[int, int] = (112, 28)
    amplitudes: tuple[float, float] = (0.5, 0.25)
    travel_noise: dict[str, float] = field(default_factory=lambda: {"normal": 0.0, "hard": 0.1})
    order_noise: dict[str, float] = field(default_factory=lambda: {"normal": 1.0, "hard": 1.5})


@dataclass
class Topology:
    name: str
    ports: list[Port]
    routes: list[Route]
    vessels: list[Vessel]
    order_model: OrderModel
    turnaround: int = 1
    episode_length: int = 224
    reward_scale: float = 2.0**-7
    schema_version: int = SCHEMA_VERSION

    @property
    def n_ports(self) -> int:
        return len(self.ports)

    @property
    def n_vessels(self) -> int:
        return len(self.vessels)

    def with_mode(self, mode: str) -> "Topology":
        if mode not in MODES:
            raise TopologyError([f"unknown mode {mode!r}"])
        t = copy.deepcopy(self)
        t.order_model.mode = mode
        return t

    def shared_route_pairs(self) -> set[tuple[int, int]]:
        pairs = set()
        for r in self.routes:
            for i in r.stops:
                for j in r.stops:
                    if i != j:
                        pairs.add((i, j))
        return pairs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["order_model"]["periods"] = list(self.order_model.periods)
        d["order_model"]["amplitudes"] = list(self.order_model.amplitudes)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")


# ---------------------------------------------------------------------------
# (de)serialisation


def topology_from_dict(d: dict) -> Topology:
    try:
        version = d.get("schema_version", None)
        if version != SCHEMA_VERSION:
            raise TopologyError([f"schema_version must be {SCHEMA_VERSION}, got {version!r}"])
        om = dict(d["order_model"])
        om["pairs"] = [OrderPair(**p) for p in om["pairs"]]
        for key in ("periods", "amplitudes"):
            if key in om:
                om[key] = tuple(om[key])
        return Topology(
            name=d["name"],
            ports=[Port(**p) for p in d["ports"]],
            routes=[Route(**r) for r in d["routes"]],
            vessels=[Vessel(**v) for v in d["vessels"]],
            order_model=OrderModel(**om),
            turnaround=d.get("turnaround", 1),
            episode_length=d.get("episode_length", 224),
            reward_scale=d.get("reward_scale", 2.0**-7),
            schema_version=version,
        )
    except (KeyError, TypeError) as exc:
        raise TopologyError([f"malformed topology: {exc}"]) from None


def loads_topology(text: str) -> Topology:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError([f"line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return topology_from_dict(d)


def bundled_path() -> Path:
    return Path(str(resources.files("encgat_ecr") / "data" / "bundled.topo.json"))


def load_topology(path: str | Path, validate: bool = True) -> Topology:
    if str(path) == BUNDLED_NAME:
        path = bundled_path()
    top = loads_topology(Path(path).read_text())
    if validate:
        validate_topology(top)
    return top


# ---------------------------------------------------------------------------
# validation


def topology_violations(top: Topology) -> list[str]:
    v: list[str] = []
    n = len(top.ports)
    if n == 0:
        v.append("no ports")
    for k, p in enumerate(top.ports):
        if p.id != k:
            v.append(f"port #{k} has id {p.id}; ids must be 0..{n - 1} in order")
        if p.capacity <= 0:
            v.append(f"port {p.id}: capacity must be positive")
        if not 0 <= p.initial_empty <= p.capacity:
            v.append(f"port {p.id}: initial_empty {p.initial_empty} outside [0, capacity]")
    for k, r in enumerate(top.routes):
        if r.id != k:
            v.append(f"route #{k} has id {r.id}; ids must be 0..{len(top.routes) - 1} in order")
        if len(r.stops) < 2:
            v.append(f"route {r.id}: needs at least 2 stops, has {len(r.stops)}")
        if len(r.distances) != len(r.stops):
            v.append(f"route {r.id}: {len(r.stops)} stops but {len(r.distances)} leg distances")
        if any(s < 0 or s >= n for s in r.stops):
            v.append(f"route {r.id}: references unknown port")
        if any(dd <= 0 for dd in r.distances):
            v.append(f"route {r.id}: leg distances must be positive")
        for a, b in zip(r.stops, r.stops[1:] + r.stops[:1]):
            if len(r.stops) >= 2 and a == b:
                v.append(f"route {r.id}: consecutive stops at the same port {a}")
                break
    for k, s in enumerate(top.vessels):
        if s.id != k:
            v.append(f"vessel #{k} has id {s.id}; ids must be 0..{len(top.vessels) - 1} in order")
        if not 0 <= s.route < len(top.routes):
            v.append(f"vessel {s.id}: references unknown route {s.route}")
            continue
        if not 0 <= s.initial_stop < len(top.routes[s.route].stops):
            v.append(f"vessel {s.id}: initial_stop {s.initial_stop} out of range")
        if s.capacity <= 0 or s.speed <= 0:
            v.append(f"vessel {s.id}: capacity and speed must be positive")
        if not 0 <= s.initial_empty <= s.capacity:
            v.append(f"vessel {s.id}: initial_empty outside [0, capacity]")
    om = top.order_model
    if om.mode not in MODES:
        v.append(f"order_model.mode must be one of {MODES}, got {om.mode!r}")
    if om.total_base < 0:
        v.append("order_model.total_base must be >= 0")
    if len(om.periods) != 2 or any(p <= 0 for p in om.periods):
        v.append("order_model.periods must be two positive integers")
    if len(om.amplitudes) != 2:
        v.append("order_model.amplitudes must have two entries")
    for mode in MODES:
        if om.travel_noise.get(mode, 0.0) < 0 or om.travel_noise.get(mode, 0.0) >= 1:
            v.append(f"order_model.travel_noise[{mode}] must lie in [0, 1)")
        if om.order_noise.get(mode, 1.0) < 0:
            v.append(f"order_model.order_noise[{mode}] must be >= 0")
    shared = top.shared_route_pairs()
    seen = set()
    for p in om.pairs:
        if (p.src, p.dst) in seen:
            v.append(f"order pair {p.src}->{p.dst} listed twice")
        seen.add((p.src, p.dst))
        if p.src == p.dst:
            v.append(f"order pair {p.src}->{p.dst} is a self-loop")
        elif (p.src, p.dst) not in shared:
            v.append(f"order pair {p.src}->{p.dst}: ports share no route")
        if p.mu < 0 or p.sigma < 0:
            v.append(f"order pair {p.src}->{p.dst}: mu and sigma must be >= 0")
    total_mu = math.fsum(p.mu for p in om.pairs)
    if total_mu > 1 + 1e-12:
        v.append(f"sum of order-pair mu is {total_mu:.6f} > 1")
    if top.turnaround < 0:
        v.append("turnaround must be >= 0")
    if top.episode_length < 1:
        v.append("episode_length must be >= 1")
    if top.reward_scale <= 0:
        v.append("reward_scale must be positive")
    return v


def validate_topology(top: Topology) -> Topology:
    v = topology_violations(top)
    if v:
        raise TopologyError(v)
    return top


# ---------------------------------------------------------------------------
# generation


def generate_topology(
    n_ports: int,
    n_routes: int,
    n_vessels: int,
    seed: int,
    *,
    mode: str = "normal",
    demand_share: float = 0.9,
    speed: float = 10.0,
    leg_range: tuple[int, int] = (15, 40),
    imbalance: float = 0.5,
    stock_ticks: float = 30.0,
    capacity_ticks: float = 15.0,
) -> Topology:
    """Random cyclic routes; routes 0 and 1 share the hub port 0.

    Every later route starts at a port already covered, so the network is
    connected.  Trade weights give each port an exporter/importer lean so that
    repositioning matters.
    """
    if n_routes < 1 or n_ports < 2 or n_ports - 1 < n_routes:
        raise TopologyError([f"need 1 <= routes <= ports - 1 (ports={n_ports}, routes={n_routes})"])
    if n_vessels < n_routes:
        raise TopologyError([f"need at least one vessel per route (routes={n_routes}, vessels={n_vessels})"])
    rng = np.random.default_rng(seed)
    others = [int(x) for x in rng.permutation(np.arange(1, n_ports))]
    cuts = np.sort(rng.choice(np.arange(1, len(others)), size=n_routes - 1, replace=False)) if n_routes > 1 else []
    chunks = [list(c) for c in np.split(np.array(others), cuts)]
    routes: list[Route] = []
    covered = [0]
    for r, chunk in enumerate(chunks):
        anchor = 0 if r < 2 else int(rng.choice(covered))
        stops = [anchor] + [int(x) for x in chunk]
        covered.extend(int(x) for x in chunk)
        dist = [float(rng.integers(leg_range[0], leg_range[1] + 1)) for _ in stops]
        routes.append(Route(id=r, stops=stops, distances=dist))

    lean = rng.uniform(-1.0, 1.0, size=n_ports) * imbalance
    w_exp = rng.lognormal(0.0, 0.3, size=n_ports) * np.exp(lean)
    w_imp = rng.lognormal(0.0, 0.3, size=n_ports) * np.exp(-lean)
    shared = sorted({(i, j) for r in routes for i in r.stops for j in r.stops if i != j})
    raw = np.array([w_exp[i] * w_imp[j] for i, j in shared])
    mus = raw / raw.sum() * demand_share
    total_base = float(round(100.0 * n_ports / 6.0))
    pairs = [
        OrderPair(src=i, dst=j, mu=round(float(m), 6), sigma=round(0.2 * float(m), 6)) for (i, j), m in zip(shared, mus)
    ]
    excess = math.fsum(p.mu for p in pairs) - demand_share
    if excess > 0:
        pairs[-1].mu = round(pairs[-1].mu - excess, 6)

    exports = np.zeros(n_ports)
    imports = np.zeros(n_ports)
    for p in pairs:
        exports[p.src] += p.mu * total_base
        imports[p.dst] += p.mu * total_base
    ports = []
    for i in range(n_ports):
        init = int(round(stock_ticks * exports[i])) + 20
        cap = int(round(capacity_ticks * (exports[i] + imports[i]))) + 100
        ports.append(Port(id=i, name=f"P{i}", capacity=cap, initial_empty=min(init, cap)))

    per_route = [1] * n_routes
    for _ in range(n_vessels - n_routes):
        weights = np.array([sum(r.distances) / per_route[k] for k, r in enumerate(routes)])
        per_route[int(np.argmax(weights))] += 1
    vessels: list[Vessel] = []
    for r, count in enumerate(per_route):
        route = routes[r]
        flow = sum(p.mu for p in pairs if p.src in route.stops and p.dst in route.stops) * total_base
        cycle = sum(math.ceil(dd / speed) for dd in route.distances)
        cap = int(round(1.5 * flow * cycle / count)) + 50
        for k in range(count):
            vessels.append(
                Vessel(
                    id=len(vessels), route=r, capacity=cap, speed=speed,
                    initial_stop=int(k * len(route.stops) // count), initial_empty=int(0.1 * cap),
                )
            )
    top = Topology(
        name=f"gen-{n_ports}p{n_routes}r{n_vessels}v-s{seed}",
        ports=ports, routes=routes, vessels=vessels,
        order_model=OrderModel(mode=mode, total_base=total_base, pairs=pairs),
    )
    return validate_topology(top)


def bundled_topology() -> Topology:
    return load_topology(bundled_path())


# ---------------------------------------------------------------------------
# derived topologies


def merge_ports(top: Topology, a: int, b: int) -> Topology:
    """Fold port ``b`` into port ``a``: the merged port takes both route positions.

    Capacity and stock are summed; order pairs are redirected (self-pairs
    dropped, duplicates combined).
    """
    if a == b:
        raise TopologyError([f"cannot merge port {a} with itself"])
    n = top.n_ports
    if not (0 <= a < n and 0 <= b < n):
        raise TopologyError([f"merge_ports: unknown port in ({a}, {b})"])
    keep, gone = min(a, b), max(a, b)

    def remap(p: int) -> int:
        p = keep if p == gone else p
        return p - 1 if p > gone else p

    pa, pb = top.ports[keep], top.ports[gone]
    ports = []
    for p in top.ports:
        if p.id == gone:
            continue
        if p.id == keep:
            ports.append(Port(remap(keep), f"{pa.name}+{pb.name}", pa.capacity + pb.capacity, pa.initial_empty + pb.initial_empty))
        else:
            ports.append(Port(remap(p.id), p.name, p.capacity, p.initial_empty))

    routes = []
    stop_maps: list[list[int]] = []
    violations = []
    for r in top.routes:
        stops = [remap(s) for s in r.stops]
        new_stops: list[int] = []
        new_dist: list[float] = []
        index_map = []
        for s, dd in zip(stops, r.distances):
            if new_stops and new_stops[-1] == s:
                new_dist[-1] += dd
                index_map.append(len(new_stops) - 1)
                continue
            new_stops.append(s)
            new_dist.append(dd)
            index_map.append(len(new_stops) - 1)
        while len(new_stops) > 1 and new_stops[-1] == new_stops[0]:
            new_stops.pop()
            extra = new_dist.pop()
            new_dist[-1] += extra
            index_map = [0 if k >= len(new_stops) else k for k in index_map]
        if len(new_stops) < 2:
            violations.append(f"route {r.id} would have a single stop after merging {a} and {b}")
        routes.append(Route(r.id, new_stops, new_dist))
        stop_maps.append(index_map)
    if violations:
        raise TopologyError(violations)

    vessels = [
        Vessel(v.id, v.route, v.capacity, v.speed, stop_maps[v.route][v.initial_stop], v.initial_empty)
        for v in top.vessels
    ]
    merged: dict[tuple[int, int], list[float]] = {}
    for p in top.order_model.pairs:
        key = (remap(p.src), remap(p.dst))
        if key[0] == key[1]:
            continue
        mu, var = merged.get(key, [0.0, 0.0])
        merged[key] = [mu + p.mu, var + p.sigma**2]
    pairs = [OrderPair(s, d, mu, math.sqrt(var)) for (s, d), (mu, var) in sorted(merged.items())]
    om = copy.deepcopy(top.order_model)
    om.pairs = pairs
    out = Topology(
        name=f"{top.name}-merge{a}_{b}", ports=ports, routes=routes, vessels=vessels, order_model=om,
        turnaround=top.turnaround, episode_length=top.episode_length, reward_scale=top.reward_scale,
    )
    return validate_topology(out)


def reshuffle_orders(top: Topology, seed: int, concentration: float = 1.0) -> Topology:
    """Redraw pair proportions from a symmetric Dirichlet over all same-route pairs.

    The total proportion is preserved and sigma keeps the original aggregate
    sigma/mu ratio.
    """
    rng = np.random.default_rng(seed)
    pairs = sorted(top.shared_route_pairs())
    total_mu = math.fsum(p.mu for p in top.order_model.pairs)
    total_sigma = math.fsum(p.sigma for p in top.order_model.pairs)
    ratio = total_sigma / total_mu if total_mu > 0 else 0.0
    w = rng.dirichlet(np.full(len(pairs), concentration))
    out = copy.deepcopy(top)
    out.order_model.pairs = [
        OrderPair(i, j, float(total_mu * wk), float(total_mu * wk * ratio)) for (i, j), wk in zip(pairs, w)
    ]
    out.name = f"{top.name}-shuffle{seed}"
    return validate_topology(out)
