"""Per-agent heterogeneous observations built from simulator state.

Vertex types are ports and vessels; edge types are port-port ("pp", ports
sharing a route) and port-vessel ("pv", vessels sailing a route through the
port).  Every vertex carries a lookback window of per-tick feature rows.

Port row (18 columns, container counts divided by port capacity):

====  =============================================================
0     empty containers
1     reserved empties (laden in turnaround at this port)
2     laden waiting to board
3     laden on board vessels, destined to this port
4     orders booked this tick with this port as destination
5     capacity / 1000
6     remaining space
7-9   orders, fulfilled, failed this tick (as origin)
10-17 5-tick sums: orders, fulfilled, failed, net empty flow,
      empties discharged from vessels, empties loaded onto vessels,
      turnaround releases, import bookings
====  =============================================================

Vessel row (7 columns, divided by vessel capacity): empty, laden,
capacity / 1000, remaining space, 5-tick net empty change, 5-tick net laden
change, and their difference.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .network import EDGE_TYPES, GraphBatch, GraphStructure
from .sim import SimState, leg_ticks
from .topology import Topology

PORT_FEATURES = 18
VESSEL_FEATURES = 7
ACC_WINDOW = 5
CAPACITY_SCALE = 1000.0
TIME_SCALE = 100.0
DISTANCE_SCALE = 100.0


def _route_distance(stops: list[int], dists: list[float], src: int, dst: int) -> float | None:
    """Shortest forward sailing distance from ``src`` to ``dst`` along one cyclic route."""
    n = len(stops)
    best = None
    for s in (k for k, p in enumerate(stops) if p == src):
        total = 0.0
        for step in range(1, n + 1):
            total += dists[(s + step - 1) % n]
            if stops[(s + step) % n] == dst:
                best = total if best is None else min(best, total)
                break
    return best


def build_structure(top: Topology) -> GraphStructure:
    P, V = top.n_ports, top.n_vessels
    pp = [sorted({j for r in top.routes if i in r.stops for j in r.stops if j != i}) for i in range(P)]
    pv = [sorted(v.id for v in top.vessels if i in top.routes[v.route].stops) for i in range(P)]
    dpp = max((len(x) for x in pp), default=0)
    dpv = max((len(x) for x in pv), default=0)
    pp_index = np.zeros((P, dpp), dtype=np.int64)
    pp_mask = np.zeros((P, dpp), dtype=bool)
    pp_edge = np.zeros((P, dpp, 1))
    pv_index = np.zeros((P, dpv), dtype=np.int64)
    pv_mask = np.zeros((P, dpv), dtype=bool)
    for i in range(P):
        for k, j in enumerate(pp[i]):
            pp_index[i, k] = j
            pp_mask[i, k] = True
            d = [_route_distance(r.stops, r.distances, j, i) for r in top.routes if i in r.stops and j in r.stops]
            pp_edge[i, k, 0] = min(x for x in d if x is not None) / DISTANCE_SCALE
        for k, v in enumerate(pv[i]):
            pv_index[i, k] = v
            pv_mask[i, k] = True
    return GraphStructure(P, V, pp_index, pp_mask, pp_edge, pv_index, pv_mask)


def ticks_until_arrival(state: SimState, vessel: int, port: int) -> int:
    """Planned ticks until ``vessel`` next calls at ``port`` (noise-free schedule)."""
    top = state.topology
    v = top.vessels[vessel]
    route = top.routes[v.route]
    n = len(route.stops)
    s = int(state.vessel_stop[vessel])
    at_port = any(r.vessel == vessel for r in state.pending)
    if at_port:
        if route.stops[s] == port:
            return 0
        t, cur = 0, s
    else:
        t = max(0, int(state.planned_arrival[vessel]) - state.tick)
        cur = (s + 1) % n
        if route.stops[cur] == port:
            return t
    for _ in range(n):
        t += leg_ticks(route.distances[cur], v.speed)
        cur = (cur + 1) % n
        if route.stops[cur] == port:
            return t
    raise ContractError(f"vessel {vessel} never calls at port {port}")


def pv_edge_features(state: SimState, structure: GraphStructure) -> np.ndarray:
    out = np.zeros(structure.pv_index.shape + (1,))
    for i in range(structure.n_ports):
        for k in range(structure.pv_index.shape[1]):
            if structure.pv_mask[i, k]:
                out[i, k, 0] = ticks_until_arrival(state, int(structure.pv_index[i, k]), i) / TIME_SCALE
    return out


class FeatureRecorder:
    """Ring buffers of committed per-tick feature rows for every vertex.

    Subscribe with ``state.tick_listeners.append(recorder.record_tick)``; the
    simulator then calls it once at the close of every tick.
    """

    def __init__(self, topology: Topology, n_lookback: int = 20):
        self.topology = topology
        self.n_lookback = n_lookback
        P, V = topology.n_ports, topology.n_vessels
        self.port_cap = np.array([p.capacity for p in topology.ports], dtype=np.float64)
        self.vessel_cap = np.array([v.capacity for v in topology.vessels], dtype=np.float64)
        self.port_rows: deque[np.ndarray] = deque(maxlen=n_lookback)
        self.vessel_rows: deque[np.ndarray] = deque(maxlen=n_lookback)
        self.port_raw: deque[np.ndarray] = deque(maxlen=ACC_WINDOW)
        self.vessel_raw: deque[np.ndarray] = deque(maxlen=ACC_WINDOW)
        self.ticks: deque[int] = deque(maxlen=n_lookback)
        self.last_tick: int | None = None

    # raw per-tick activity
    @staticmethod
    def _port_raw(state: SimState) -> np.ndarray:
        c = state.counters
        net = c["discharged"] + c["released"] - c["fulfilled"] - c["loaded"]
        return np.stack(
            [c["orders"], c["fulfilled"], c["failed"], net, c["discharged"], c["loaded"], c["released"], c["imports"]],
            axis=1,
        ).astype(np.float64)

    @staticmethod
    def _vessel_raw(state: SimState) -> np.ndarray:
        c = state.vessel_counters
        e = c["empty_in"] - c["empty_out"]
        lad = c["laden_in"] - c["laden_out"]
        return np.stack([e, lad], axis=1).astype(np.float64)

    def _rows(self, state: SimState) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        praw = self._port_raw(state)
        vraw = self._vessel_raw(state)
        pacc = praw + (np.sum(list(self.port_raw)[-(ACC_WINDOW - 1):], axis=0) if self.port_raw else 0.0)
        vacc = vraw + (np.sum(list(self.vessel_raw)[-(ACC_WINDOW - 1):], axis=0) if self.vessel_raw else 0.0)
        cap = self.port_cap
        c = state.counters
        inst = np.stack(
            [
                state.port_empty,
                state.turnaround_total(),
                state.laden_waiting.sum(axis=1),
                state.vessel_laden.sum(axis=0),
                c["imports"],
                np.zeros_like(cap),
                cap - state.port_empty,
                c["orders"],
                c["fulfilled"],
                c["failed"],
            ],
            axis=1,
        ).astype(np.float64) / cap[:, None]
        inst[:, 5] = cap / CAPACITY_SCALE
        port_row = np.concatenate([inst, pacc / cap[:, None]], axis=1)
        vcap = self.vessel_cap
        laden = state.vessel_laden.sum(axis=1)
        vessel_row = np.stack(
            [
                state.vessel_empty / vcap,
                laden / vcap,
                vcap / CAPACITY_SCALE,
                (vcap - state.vessel_empty - laden) / vcap,
                vacc[:, 0] / vcap,
                vacc[:, 1] / vcap,
                (vacc[:, 0] - vacc[:, 1]) / vcap,
            ],
            axis=1,
        )
        return port_row, vessel_row, praw, vraw

    def record_tick(self, state: SimState) -> None:
        if self.last_tick is not None and state.tick <= self.last_tick:
            raise ContractError(f"tick {state.tick} already recorded")
        port_row, vessel_row, praw, vraw = self._rows(state)
        self.port_rows.append(port_row)
        self.vessel_rows.append(vessel_row)
        self.port_raw.append(praw)
        self.vessel_raw.append(vraw)
        self.ticks.append(state.tick)
        self.last_tick = state.tick

    def live_rows(self, state: SimState) -> tuple[np.ndarray, np.ndarray]:
        """Feature rows for the current, not yet committed, tick."""
        port_row, vessel_row, _, _ = self._rows(state)
        return port_row, vessel_row

    def buffer(self) -> tuple[np.ndarray, np.ndarray]:
        """Committed rows, oldest first: [k, P, 18] and [k, V, 7]."""
        P, V = len(self.port_cap), len(self.vessel_cap)
        if not self.port_rows:
            return np.zeros((0, P, PORT_FEATURES)), np.zeros((0, V, VESSEL_FEATURES))
        return np.stack(self.port_rows), np.stack(self.vessel_rows)

    def windows(self, state: SimState) -> tuple[np.ndarray, np.ndarray]:
        """Lookback windows [P, n, 18] and [V, n, 7] ending with the live row.

        Rows before the first recorded tick are zero.
        """
        n = self.n_lookback
        live_p, live_v = self.live_rows(state)
        if self.last_tick is not None and self.last_tick == state.tick:
            hist_p, hist_v = list(self.port_rows)[:-1], list(self.vessel_rows)[:-1]
        else:
            hist_p, hist_v = list(self.port_rows), list(self.vessel_rows)
        hist_p = hist_p[len(hist_p) - (n - 1):] if n > 1 else []
        hist_v = hist_v[len(hist_v) - (n - 1):] if n > 1 else []
        P, V = live_p.shape[0], live_v.shape[0]
        pw = np.zeros((P, n, PORT_FEATURES))
        vw = np.zeros((V, n, VESSEL_FEATURES))
        k = len(hist_p)
        if k:
            pw[:, n - 1 - k:n - 1] = np.stack(hist_p, axis=1)
            vw[:, n - 1 - k:n - 1] = np.stack(hist_v, axis=1)
        pw[:, -1] = live_p
        vw[:, -1] = live_v
        return pw, vw


@dataclass
class GraphSnapshot:
    """All vertex windows and dynamic edge features at one decision tick."""

    tick: int
    port_windows: np.ndarray
    vessel_windows: np.ndarray
    pv_edge: np.ndarray


def take_snapshot(state: SimState, recorder: FeatureRecorder, structure: GraphStructure) -> GraphSnapshot:
    pw, vw = recorder.windows(state)
    return GraphSnapshot(state.tick, pw, vw, pv_edge_features(state, structure))


def stack_snapshots(snaps: list[GraphSnapshot], structure: GraphStructure) -> GraphBatch:
    return GraphBatch(
        structure,
        np.stack([s.port_windows for s in snaps]),
        np.stack([s.vessel_windows for s in snaps]),
        np.stack([s.pv_edge for s in snaps]),
    )


@dataclass
class HeteroObservation:
    """One agent's typed local view.

    ``neighbors[d]`` is N_d(center) in global ids; ``edge_types`` is the set
    of edge types incident to the centre.  ``batch`` holds the centre's
    receptive field (enough hops for every stacked block) as a one-snapshot
    graph; ``center_index``/``vessel_index`` locate the centre and the
    current vessel inside it.
    """

    center: int
    vessel: int | None
    tick: int
    ports: list[int]
    vessels: list[int]
    neighbors: dict[str, list[int]]
    edge_features: dict[str, np.ndarray]
    batch: GraphBatch
    center_index: int
    vessel_index: int | None
    action_mask: np.ndarray = field(default_factory=lambda: np.ones(22, dtype=bool))

    @property
    def edge_types(self) -> list[str]:
        return [d for d in EDGE_TYPES if self.neighbors.get(d)]

    @property
    def port_windows(self) -> np.ndarray:
        return self.batch.port_windows[0]

    @property
    def vessel_windows(self) -> np.ndarray:
        return self.batch.vessel_windows[0]


def restrict(snapshot: GraphSnapshot, structure: GraphStructure, ports: list[int], vessels: list[int]) -> GraphBatch:
    """Sub-graph over the given vertex ids, keeping neighbour order."""
    pmap = {p: k for k, p in enumerate(ports)}
    vmap = {v: k for k, v in enumerate(vessels)}

    def table(index, mask, keep: dict[int, int]):
        rows = []
        for p in ports:
            rows.append([(keep[int(j)], k) for k, (j, ok) in enumerate(zip(index[p], mask[p])) if ok and int(j) in keep])
        width = max((len(r) for r in rows), default=0)
        idx = np.zeros((len(ports), width), dtype=np.int64)
        msk = np.zeros((len(ports), width), dtype=bool)
        src = np.zeros((len(ports), width), dtype=np.int64)
        for a, r in enumerate(rows):
            for b, (j, k) in enumerate(r):
                idx[a, b], msk[a, b], src[a, b] = j, True, k
        return idx, msk, src

    pp_idx, pp_msk, pp_src = table(structure.pp_index, structure.pp_mask, pmap)
    pv_idx, pv_msk, pv_src = table(structure.pv_index, structure.pv_mask, vmap)
    rows = np.array(ports, dtype=np.int64)[:, None]
    pp_edge = structure.pp_edge[rows, pp_src] * pp_msk[..., None] if pp_idx.shape[1] else np.zeros((len(ports), 0, 1))
    pv_edge = snapshot.pv_edge[rows, pv_src] * pv_msk[..., None] if pv_idx.shape[1] else np.zeros((len(ports), 0, 1))
    sub = GraphStructure(len(ports), len(vessels), pp_idx, pp_msk, pp_edge, pv_idx, pv_msk)
    return GraphBatch(
        sub,
        snapshot.port_windows[ports][None],
        snapshot.vessel_windows[vessels][None] if vessels else np.zeros((1, 0) + snapshot.vessel_windows.shape[1:]),
        pv_edge[None],
    )


def observation_from_snapshot(
    snapshot: GraphSnapshot, structure: GraphStructure, port_id: int, vessel_id: int | None, hops: int = 2
) -> HeteroObservation:
    if not 0 <= port_id < structure.n_ports:
        raise ContractError(f"unknown port {port_id}")
    ports = {port_id}
    frontier = {port_id}
    for _ in range(hops):
        frontier = {j for p in frontier for j in structure.neighbors(p, "pp")} - ports
        ports |= frontier
    ports_l = sorted(ports)
    vessels = sorted({v for p in ports_l for v in structure.neighbors(p, "pv")} | ({vessel_id} if vessel_id is not None else set()))
    batch = restrict(snapshot, structure, ports_l, vessels)
    nb = {d: structure.neighbors(port_id, d) for d in EDGE_TYPES}
    c = ports_l.index(port_id)
    ef = {
        "pp": batch.structure.pp_edge[c][batch.structure.pp_mask[c]],
        "pv": batch.pv_edge[0, c][batch.structure.pv_mask[c]],
    }
    return HeteroObservation(
        center=port_id, vessel=vessel_id, tick=snapshot.tick, ports=ports_l, vessels=vessels,
        neighbors=nb, edge_features=ef, batch=batch, center_index=c,
        vessel_index=vessels.index(vessel_id) if vessel_id is not None else None,
    )


def build_observation(
    state: SimState, recorder: FeatureRecorder, port_id: int, vessel_id: int | None,
    structure: GraphStructure | None = None, hops: int = 2,
) -> HeteroObservation:
    """Observation of ``port_id`` with ``vessel_id`` as the vessel being served."""
    if not 0 <= port_id < state.n_ports:
        raise ContractError(f"unknown port {port_id}")
    structure = structure or build_structure(state.topology)
    return observation_from_snapshot(take_snapshot(state, recorder, structure), structure, port_id, vessel_id, hops)
