"""Seeded discrete-event simulator for empty-container repositioning.

One tick is one day.  Each tick runs, in order:

1. turnaround containers whose release tick has come become empties
   (clipped by port capacity; the remainder waits another tick);
2. orders are generated and fulfilled from the origin port's empties;
3. vessels due this tick arrive: laden for the port is discharged into
   turnaround, laden waiting at the port boards, and a
   :class:`DecisionRequest` is issued for the (port, vessel) pair.

The caller answers requests with :func:`apply_action` and then calls
:func:`advance` again, which closes the tick (vessels depart) and runs
forward to the next tick with arrivals, or to the end of the episode.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .seeding import derive_rng
from .topology import OrderModel, Topology, TopologyError, validate_topology

N_ACTIONS = 22
NOOP_ACTION = 10
COUNTERS = ("orders", "fulfilled", "failed", "imports", "discharged", "loaded", "released")
VESSEL_COUNTERS = ("empty_in", "empty_out", "laden_in", "laden_out")


@dataclass(frozen=True)
class Order:
    src: int
    dst: int
    quantity: int


@dataclass(frozen=True)
class DecisionRequest:
    port: int
    vessel: int
    tick: int
    n_actions: int = N_ACTIONS


@dataclass
class StepResult:
    """Outcome of one :func:`advance` call.

    ``ticks`` are the ticks simulated; ``global_rewards[k]`` and
    ``local_rewards[k]`` belong to ``ticks[k]``.
    """

    ticks: list[int]
    global_rewards: list[float]
    local_rewards: np.ndarray
    done: bool
    requests: list[DecisionRequest]


@dataclass
class SimState:
    topology: Topology
    seed: int
    tick: int
    port_empty: np.ndarray
    laden_waiting: np.ndarray  # [P, P] origin port x destination
    turnaround: list[dict[int, int]]  # per port: release tick -> quantity
    fulfilled_total: np.ndarray
    shortage_total: np.ndarray
    orders_total: np.ndarray
    counters: dict[str, np.ndarray]
    vessel_empty: np.ndarray
    vessel_laden: np.ndarray  # [V, P] by destination
    vessel_stop: np.ndarray  # route index of the last stop reached
    next_arrival: np.ndarray
    planned_arrival: np.ndarray
    vessel_counters: dict[str, np.ndarray]
    events: list[tuple[int, int]]
    rng_orders: np.random.Generator
    rng_travel: np.random.Generator
    pending: list[DecisionRequest] = field(default_factory=list)
    tick_open: bool = False
    done: bool = False
    event_log: list[dict] | None = None
    tick_listeners: list[Callable[["SimState"], None]] = field(default_factory=list)
    last_orders: list[Order] = field(default_factory=list)

    @property
    def n_ports(self) -> int:
        return len(self.port_empty)

    @property
    def mode(self) -> str:
        return self.topology.order_model.mode

    def turnaround_total(self) -> np.ndarray:
        return np.array([sum(q.values()) for q in self.turnaround], dtype=np.int64)

    def total_containers(self) -> int:
        return int(
            self.port_empty.sum() + self.laden_waiting.sum() + self.turnaround_total().sum()
            + self.vessel_empty.sum() + self.vessel_laden.sum()
        )

    def vessel_space(self, v: int) -> int:
        cap = self.topology.vessels[v].capacity
        return int(cap - self.vessel_empty[v] - self.vessel_laden[v].sum())

    def log(self, **record) -> None:
        if self.event_log is not None:
            self.event_log.append({"tick": self.tick, **record})


# ---------------------------------------------------------------------------
# trade


def order_total(tick: int, om: OrderModel, mode: str | None = None) -> float:
    """Total order volume for ``tick`` before the per-pair split."""
    mode = mode or om.mode
    if mode == "normal":
        return float(om.total_base)
    (p1, p2), (a1, a2) = om.periods, om.amplitudes
    trend = (1.0 + a1 * math.sin(2 * math.pi * tick / p1)) * (1.0 + a2 * math.sin(2 * math.pi * tick / p2))
    return max(0.0, om.total_base * trend)


def generate_orders(tick: int, om: OrderModel, rng: np.random.Generator, mode: str | None = None) -> list[Order]:
    """Split the tick total into pair quantities with proportions ~ N(mu, sigma) clipped to [0, 1]."""
    if tick < 0:
        raise ValueError("tick must be >= 0")
    mode = mode or om.mode
    if not om.pairs:
        return []
    total = order_total(tick, om, mode)
    mu = np.array([p.mu for p in om.pairs])
    sigma = np.array([p.sigma for p in om.pairs]) * om.order_noise.get(mode, 1.0)
    share = np.clip(rng.normal(mu, sigma), 0.0, 1.0)
    qty = np.floor(share * total + 0.5).astype(np.int64)
    return [Order(p.src, p.dst, int(q)) for p, q in zip(om.pairs, qty)]


def fulfill_orders(state: SimState, orders: list[Order]) -> np.ndarray:
    """Serve orders from origin empties; returns consumed amounts per port."""
    consumed = np.zeros(state.n_ports, dtype=np.int64)
    c = state.counters
    for o in orders:
        a = min(o.quantity, int(state.port_empty[o.src]))
        state.port_empty[o.src] -= a
        state.laden_waiting[o.src, o.dst] += a
        short = o.quantity - a
        consumed[o.src] += a
        state.fulfilled_total[o.src] += a
        state.shortage_total[o.src] += short
        state.orders_total[o.src] += o.quantity
        c["orders"][o.src] += o.quantity
        c["fulfilled"][o.src] += a
        c["failed"][o.src] += short
        c["imports"][o.dst] += o.quantity
        if o.quantity:
            state.log(type="order", port=o.src, dst=o.dst, quantity=o.quantity, fulfilled=a)
    return consumed


def fulfillment_ratio(state: SimState) -> float:
    fulfilled = int(state.fulfilled_total.sum())
    demand = fulfilled + int(state.shortage_total.sum())
    return 1.0 if demand == 0 else fulfilled / demand


# ---------------------------------------------------------------------------
# vessels


def leg_ticks(distance: float, speed: float, factor: float = 1.0) -> int:
    return max(1, math.ceil(distance * factor / speed - 1e-9))


def _depart(state: SimState, v: int) -> None:
    vessel = state.topology.vessels[v]
    route = state.topology.routes[vessel.route]
    s = int(state.vessel_stop[v])
    eta = state.topology.order_model.travel_noise.get(state.mode, 0.0)
    factor = state.rng_travel.uniform(1.0 - eta, 1.0 + eta)
    dist = route.distances[s]
    state.next_arrival[v] = state.tick + leg_ticks(dist, vessel.speed, factor)
    state.planned_arrival[v] = state.tick + leg_ticks(dist, vessel.speed)
    heapq.heappush(state.events, (int(state.next_arrival[v]), v))
    state.log(type="depart", vessel=v, port=route.stops[s], next_arrival=int(state.next_arrival[v]))


def vessel_arrival(state: SimState, vessel: int, port: int) -> DecisionRequest:
    """Discharge laden for ``port``, board waiting laden, issue a decision request."""
    v = vessel
    top = state.topology
    route = top.routes[top.vessels[v].route]
    q = int(state.vessel_laden[v, port])
    if q:
        state.vessel_laden[v, port] = 0
        release = state.tick + top.turnaround
        state.turnaround[port][release] = state.turnaround[port].get(release, 0) + q
        state.vessel_counters["laden_out"][v] += q
    s = int(state.vessel_stop[v])
    n = len(route.stops)
    boarded = 0
    by_dst = {}
    seen = set()
    for step in range(1, n):
        dst = route.stops[(s + step) % n]
        if dst == port or dst in seen:
            continue
        seen.add(dst)
        space = state.vessel_space(v)
        if space <= 0:
            break
        b = min(int(state.laden_waiting[port, dst]), space)
        if b:
            state.laden_waiting[port, dst] -= b
            state.vessel_laden[v, dst] += b
            boarded += b
            by_dst[str(dst)] = b
    state.vessel_counters["laden_in"][v] += boarded
    state.log(type="arrival", port=port, vessel=v, laden_discharged=q, laden_loaded=boarded, boarded=by_dst)
    return DecisionRequest(port=port, vessel=v, tick=state.tick)


def action_amount(action: int, vessel_empty: int, port_empty: int, port_headroom: int, vessel_space: int) -> int:
    """Containers moved by ``action``: 0..10 discharge (100-10a)%, 11..21 load min(10(a-10), 100)%."""
    if action <= NOOP_ACTION:
        return min(vessel_empty * (100 - 10 * action) // 100, max(port_headroom, 0))
    pct = min(10 * (action - NOOP_ACTION), 100)
    return min(port_empty * pct // 100, max(vessel_space, 0))


def apply_action(state: SimState, request: DecisionRequest, action: int) -> int:
    """Execute a repositioning action; returns the number of empties moved."""
    if isinstance(action, bool) or int(action) != action or not 0 <= action < N_ACTIONS:
        raise ValueError(f"action must be an integer in 0..{N_ACTIONS - 1}, got {action!r}")
    action = int(action)
    if request.tick != state.tick or state.done:
        raise ValueError(f"request for tick {request.tick} is stale (simulator at tick {state.tick})")
    p, v = request.port, request.vessel
    cap = state.topology.ports[p].capacity
    amt = action_amount(
        action, int(state.vessel_empty[v]), int(state.port_empty[p]), cap - int(state.port_empty[p]), state.vessel_space(v)
    )
    if action <= NOOP_ACTION:
        state.vessel_empty[v] -= amt
        state.port_empty[p] += amt
        state.counters["discharged"][p] += amt
        state.vessel_counters["empty_out"][v] += amt
    else:
        state.port_empty[p] -= amt
        state.vessel_empty[v] += amt
        state.counters["loaded"][p] += amt
        state.vessel_counters["empty_in"][v] += amt
    state.log(type="action", port=p, vessel=v, action=action, amount=amt)
    return amt


# ---------------------------------------------------------------------------
# episode control


def reset(topology: Topology, seed: int, event_log: list | None = None) -> SimState:
    """Fresh episode state; identical (topology, seed, actions) give identical runs."""
    validate_topology(topology)
    if topology.turnaround < 1:
        raise TopologyError(["turnaround must be >= 1 for simulation"])
    P, V = topology.n_ports, topology.n_vessels
    state = SimState(
        topology=topology,
        seed=seed,
        tick=0,
        port_empty=np.array([p.initial_empty for p in topology.ports], dtype=np.int64),
        laden_waiting=np.zeros((P, P), dtype=np.int64),
        turnaround=[{} for _ in range(P)],
        fulfilled_total=np.zeros(P, dtype=np.int64),
        shortage_total=np.zeros(P, dtype=np.int64),
        orders_total=np.zeros(P, dtype=np.int64),
        counters={k: np.zeros(P, dtype=np.int64) for k in COUNTERS},
        vessel_empty=np.array([v.initial_empty for v in topology.vessels], dtype=np.int64),
        vessel_laden=np.zeros((V, P), dtype=np.int64),
        vessel_stop=np.array([v.initial_stop for v in topology.vessels], dtype=np.int64),
        next_arrival=np.zeros(V, dtype=np.int64),
        planned_arrival=np.zeros(V, dtype=np.int64),
        vessel_counters={k: np.zeros(V, dtype=np.int64) for k in VESSEL_COUNTERS},
        events=[],
        rng_orders=derive_rng(seed, "orders"),
        rng_travel=derive_rng(seed, "travel"),
        event_log=event_log,
    )
    for v in range(V):
        _depart(state, v)
    return state


def _close_tick(state: SimState) -> None:
    for req in state.pending:
        _depart(state, req.vessel)
    state.pending = []
    state.tick_open = False
    for fn in state.tick_listeners:
        fn(state)


def _release_turnaround(state: SimState) -> None:
    for p, queue in enumerate(state.turnaround):
        due = sorted(t for t in queue if t <= state.tick)
        if not due:
            continue
        cap = state.topology.ports[p].capacity
        for t in due:
            q = queue.pop(t)
            room = cap - int(state.port_empty[p])
            moved = min(q, max(room, 0))
            state.port_empty[p] += moved
            state.counters["released"][p] += moved
            if q - moved:
                nxt = state.tick + 1
                queue[nxt] = queue.get(nxt, 0) + q - moved
            if moved:
                state.log(type="release", port=p, amount=moved)


def step_tick(state: SimState) -> tuple[np.ndarray, list[DecisionRequest]]:
    """Simulate one tick; returns consumed amounts per port and decision requests."""
    state.tick += 1
    state.tick_open = True
    for arr in state.counters.values():
        arr[:] = 0
    for arr in state.vessel_counters.values():
        arr[:] = 0
    _release_turnaround(state)
    orders = generate_orders(state.tick, state.topology.order_model, state.rng_orders)
    state.last_orders = orders
    consumed = fulfill_orders(state, orders)
    requests = []
    arrivals = []
    while state.events and state.events[0][0] <= state.tick:
        arrivals.append(heapq.heappop(state.events)[1])
    for v in sorted(arrivals):
        vessel = state.topology.vessels[v]
        route = state.topology.routes[vessel.route]
        state.vessel_stop[v] = (state.vessel_stop[v] + 1) % len(route.stops)
        port = route.stops[int(state.vessel_stop[v])]
        requests.append(vessel_arrival(state, v, port))
    return consumed, requests


def advance(state: SimState) -> StepResult:
    """Close the current tick and run until the next decision tick or episode end."""
    if state.done:
        raise RuntimeError("episode is finished; call reset()")
    if state.tick_open:
        _close_tick(state)
    scale = state.topology.reward_scale
    ticks, glob, loc = [], [], []
    end = state.topology.episode_length
    while True:
        consumed, requests = step_tick(state)
        ticks.append(state.tick)
        loc.append(consumed * scale)
        glob.append(float(consumed.sum()) * scale)
        if state.tick >= end:
            state.done = True
            state.pending = []
            _close_tick(state)
            requests = []
            break
        if requests:
            state.pending = requests
            break
        _close_tick(state)
    return StepResult(ticks, glob, np.array(loc), state.done, requests)


# ---------------------------------------------------------------------------
# event log


def write_event_log(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_event_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
