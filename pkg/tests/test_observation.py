import numpy as np
import pytest

from encgat_ecr.autodiff import ContractError
from encgat_ecr.network import NetConfig, encgat_forward, init_params
from encgat_ecr.observation import (
    ACC_WINDOW,
    PORT_FEATURES,
    VESSEL_FEATURES,
    FeatureRecorder,
    build_observation,
    build_structure,
    ticks_until_arrival,
)
from encgat_ecr.sim import N_ACTIONS, NOOP_ACTION, advance, apply_action, reset
from encgat_ecr.topology import Port, bundled_topology

from oracles import replay
from toys import line_topology, two_route_topology


def start(top, seed=0, n=20):
    state = reset(top, seed)
    rec = FeatureRecorder(top, n)
    state.tick_listeners.append(rec.record_tick)
    return state, rec


def run(state, rng=None, until=None, log_rows=None):
    while True:
        res = advance(state)
        if res.done or (until is not None and state.tick >= until):
            return res
        for q in res.requests:
            a = NOOP_ACTION if rng is None else int(rng.integers(N_ACTIONS))
            apply_action(state, q, a)


def test_window_shapes_and_padding_at_start():
    top = bundled_topology()
    state, rec = start(top)
    pw, vw = rec.windows(state)
    assert pw.shape == (top.n_ports, 20, PORT_FEATURES) and vw.shape == (top.n_vessels, 20, VESSEL_FEATURES)
    assert np.all(pw[:, :-1] == 0) and np.all(vw[:, :-1] == 0)
    assert np.any(pw[:, -1] != 0)


def test_first_decision_window_has_history_rows_only_for_past_ticks():
    top = bundled_topology()
    state, rec = start(top)
    res = advance(state)
    t = res.requests[0].tick
    pw, _ = rec.windows(state)
    filled = int(np.any(pw != 0, axis=(0, 2)).sum())
    assert filled == min(t, 20)


def test_ring_buffer_holds_last_twenty_ticks():
    top = line_topology()
    state, rec = start(top)
    run(state, until=25)
    advance(state)  # close tick 25
    assert list(rec.ticks) == list(range(6, 26))
    assert rec.buffer()[0].shape == (20, 3, PORT_FEATURES)


def test_double_recording_is_contract_error():
    top = line_topology()
    state, rec = start(top)
    advance(state)
    rec.record_tick(state)
    with pytest.raises(ContractError):
        rec.record_tick(state)


def test_accumulated_columns_are_five_tick_sums():
    top = bundled_topology().with_mode("hard")
    state, rec = start(top, 1, n=40)
    run(state, np.random.default_rng(1), until=40)
    advance(state)
    rows = rec.buffer()[0]  # [k, P, 18]
    cap = np.array([p.capacity for p in top.ports])
    per_tick = rows[:, :, 7:10] * cap[None, :, None]
    acc = rows[:, :, 10:13] * cap[None, :, None]
    assert rec.ticks[-1] - rec.ticks[0] == len(rows) - 1
    for t in range(ACC_WINDOW - 1, len(rows)):
        np.testing.assert_allclose(acc[t], per_tick[t - ACC_WINDOW + 1:t + 1].sum(axis=0), atol=1e-9)


def test_features_stay_in_range_over_episode():
    top = bundled_topology().with_mode("hard")
    state, rec = start(top, 2)
    rng = np.random.default_rng(2)
    lo, hi = np.inf, -np.inf
    while True:
        res = advance(state)
        if res.done:
            break
        pw, vw = rec.windows(state)
        lo = min(lo, pw.min(), vw.min())
        hi = max(hi, pw.max(), vw.max())
        for q in res.requests:
            apply_action(state, q, int(rng.integers(N_ACTIONS)))
    assert -10 <= lo and hi <= 10


def test_buffer_matches_replay_oracle():
    top = bundled_topology()
    log = []
    state = reset(top, 6, event_log=log)
    rec = FeatureRecorder(top, 300)
    state.tick_listeners.append(rec.record_tick)
    run(state, np.random.default_rng(6))
    ref = replay(top.to_dict(), log)
    rows_p, rows_v = rec.buffer()
    cap = np.array([p.capacity for p in top.ports], dtype=float)
    vcap = np.array([v.capacity for v in top.vessels], dtype=float)
    assert len(rows_p) == len(ref["snapshots"]) == top.episode_length
    for k, snap in enumerate(ref["snapshots"]):
        assert rec.ticks[k] == snap["tick"]
        np.testing.assert_array_equal(rows_p[k, :, 0], np.array(snap["empty"]) / cap)
        np.testing.assert_array_equal(rows_p[k, :, 1], np.array(snap["turnaround"]) / cap)
        np.testing.assert_array_equal(rows_p[k, :, 2], np.array(snap["waiting"]) / cap)
        np.testing.assert_array_equal(rows_p[k, :, 3], np.array(snap["inbound"]) / cap)
        np.testing.assert_array_equal(rows_p[k, :, 7], np.array(snap["orders"]) / cap)
        np.testing.assert_array_equal(rows_v[k, :, 0], np.array(snap["vessel_empty"]) / vcap)
        np.testing.assert_array_equal(rows_v[k, :, 1], np.array(snap["vessel_laden"]) / vcap)
        lo = max(0, k - ACC_WINDOW + 1)
        released = sum(np.array(s["released"]) for s in ref["snapshots"][lo:k + 1])
        np.testing.assert_allclose(rows_p[k, :, 16], released / cap, rtol=0, atol=1e-15)


def test_neighbours_symmetric_and_exclude_self():
    for top in (bundled_topology(), two_route_topology()):
        s = build_structure(top)
        for i in range(top.n_ports):
            nb = s.neighbors(i, "pp")
            assert i not in nb and len(nb) == len(set(nb))
            for j in nb:
                assert i in s.neighbors(j, "pp")
            vs = s.neighbors(i, "pv")
            assert len(vs) == len(set(vs))
            assert all(i in top.routes[top.vessels[v].route].stops for v in vs)


def test_port_edge_feature_is_route_distance():
    top = two_route_topology()
    s = build_structure(top)
    k = s.neighbors(1, "pp").index(0)
    # sailing 0 -> 1 on route 0 is 20 units
    assert s.pp_edge[1, k, 0] == pytest.approx(0.20)
    k = s.neighbors(0, "pp").index(1)
    # 1 -> 2 -> 0 is 15 + 25
    assert s.pp_edge[0, k, 0] == pytest.approx(0.40)


def test_ticks_until_arrival_follows_plan():
    top = line_topology(distances=(10.0, 20.0, 30.0))
    state, _ = start(top)
    assert ticks_until_arrival(state, 0, 1) == 1
    assert ticks_until_arrival(state, 0, 2) == 3
    assert ticks_until_arrival(state, 0, 0) == 6
    advance(state)  # vessel at port 1, tick 1
    assert ticks_until_arrival(state, 0, 1) == 0
    assert ticks_until_arrival(state, 0, 2) == 2


def test_isolated_port_has_no_neighbours_and_embeds():
    top = line_topology()
    top.ports.append(Port(3, "X", 50, 10))
    cfg = NetConfig(d_model=8, d_ff=8, n_lookback=4)
    state, rec = start(top, n=4)
    advance(state)
    obs = build_observation(state, rec, 3, None)
    assert obs.neighbors == {"pp": [], "pv": []} and obs.edge_types == []
    out = encgat_forward(obs, init_params(cfg, np.random.default_rng(0)), cfg)
    assert out.ports.shape == (1, 8) and np.all(np.isfinite(out.ports.data))


def test_unknown_port_is_contract_error():
    top = line_topology()
    state, rec = start(top)
    with pytest.raises(ContractError):
        build_observation(state, rec, 7, 0)


def test_observation_fields():
    top = two_route_topology()
    state, rec = start(top, n=5)
    res = advance(state)
    q = res.requests[0]
    obs = build_observation(state, rec, q.port, q.vessel)
    assert obs.center == q.port and obs.vessel == q.vessel and obs.tick == state.tick
    assert obs.port_windows.shape[1:] == (5, PORT_FEATURES)
    assert obs.vessels[obs.vessel_index] == q.vessel
    assert obs.ports[obs.center_index] == q.port
    assert len(obs.edge_features["pp"]) == len(obs.neighbors["pp"])
    assert obs.action_mask.all() and obs.action_mask.shape == (22,)


def test_observation_is_pure_function_of_history():
    top = bundled_topology().with_mode("hard")
    views = []
    for _ in range(2):
        state, rec = start(top, 9)
        run(state, np.random.default_rng(9), until=60)
        views.append(rec.windows(state))
    assert views[0][0].tobytes() == views[1][0].tobytes()
    assert views[0][1].tobytes() == views[1][1].tobytes()
