import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encgat_ecr.topology import (
    BUNDLED_SEED,
    SCHEMA_VERSION,
    TopologyError,
    bundled_path,
    bundled_topology,
    generate_topology,
    load_topology,
    loads_topology,
    merge_ports,
    reshuffle_orders,
    topology_violations,
    validate_topology,
)

from toys import line_topology, two_route_topology


def test_bundled_file_is_generator_output():
    assert bundled_topology().to_dict() == generate_topology(6, 3, 6, BUNDLED_SEED).to_dict()


def test_bundled_shape():
    top = bundled_topology()
    assert (top.n_ports, len(top.routes), top.n_vessels, top.episode_length) == (6, 3, 6, 224)
    hubs = set(top.routes[0].stops) & set(top.routes[1].stops)
    assert hubs, "the first two routes share a hub port"


def test_load_by_name_and_path():
    assert load_topology("bundled").to_dict() == load_topology(bundled_path()).to_dict()


def test_round_trip_through_json(tmp_path):
    top = two_route_topology()
    top.save(tmp_path / "t.json")
    back = load_topology(tmp_path / "t.json")
    assert back.to_dict() == top.to_dict()
    assert json.loads(top.dumps())["schema_version"] == SCHEMA_VERSION


def test_wrong_schema_version_rejected():
    d = two_route_topology().to_dict()
    d["schema_version"] = 99
    with pytest.raises(TopologyError):
        loads_topology(json.dumps(d))


def test_validation_lists_every_violation():
    top = line_topology()
    top.routes[0].stops = [0]
    top.routes[0].distances = [1.0]
    top.vessels[0].route = 5
    top.order_model.pairs[0].mu = 2.0
    v = topology_violations(top)
    assert any("at least 2 stops" in m for m in v)
    assert any("unknown route" in m for m in v)
    assert any("sum of order-pair mu" in m for m in v)
    with pytest.raises(TopologyError) as exc:
        validate_topology(top)
    assert len(exc.value.violations) == len(v)


def test_pairs_must_share_a_route():
    top = two_route_topology()
    top.order_model.pairs[0].src, top.order_model.pairs[0].dst = 3, 1
    assert any("share no route" in m for m in topology_violations(top))


def test_isolated_port_is_valid():
    from encgat_ecr.topology import Port

    top = line_topology()
    top.ports.append(Port(3, "X", 10, 0))
    assert topology_violations(top) == []


@pytest.mark.parametrize("seed", range(100))
def test_generated_topologies_validate(seed):
    rng = np.random.default_rng(seed)
    ports = int(rng.integers(3, 12))
    routes = int(rng.integers(1, ports))
    vessels = routes + int(rng.integers(0, 6))
    top = generate_topology(ports, routes, vessels, seed)
    assert topology_violations(top) == []
    assert math.fsum(p.mu for p in top.order_model.pairs) <= 1 + 1e-12


def test_generator_rejects_impossible_shapes():
    with pytest.raises(TopologyError):
        generate_topology(3, 3, 3, 0)
    with pytest.raises(TopologyError):
        generate_topology(6, 3, 2, 0)


def test_paper_scale_generation_runs_two_training_iterations():
    from encgat_ecr.trainer import TrainConfig, train
    from encgat_ecr.network import NetConfig

    top = generate_topology(22, 13, 46, 0)
    assert (top.n_ports, len(top.routes), top.n_vessels) == (22, 13, 46)
    top.episode_length = 20
    cfg = TrainConfig(pretrain_iterations=1, finetune_iterations=1, net=NetConfig(d_model=8, d_ff=8, n_lookback=4))
    res = train(top, cfg, 0)
    assert len(res.metrics) == 2
    assert all(np.isfinite(r["loss"]) for r in res.metrics)


def test_merge_ports_shape_and_totals():
    top = bundled_topology()
    merged = merge_ports(top, 1, 2)
    assert merged.n_ports == top.n_ports - 1
    assert merged.ports[1].capacity == top.ports[1].capacity + top.ports[2].capacity
    assert merged.ports[1].initial_empty == top.ports[1].initial_empty + top.ports[2].initial_empty
    assert sum(p.initial_empty for p in merged.ports) == sum(p.initial_empty for p in top.ports)
    assert merged.n_vessels == top.n_vessels
    assert topology_violations(merged) == []


def test_merge_rejects_same_port_and_single_stop_routes():
    top = bundled_topology()
    with pytest.raises(TopologyError):
        merge_ports(top, 2, 2)
    with pytest.raises(TopologyError):
        merge_ports(top, 0, 2)  # route [0, 2] would collapse to one stop


def test_reshuffle_preserves_total_and_is_reproducible():
    top = merge_ports(bundled_topology(), 1, 2)
    a = reshuffle_orders(top, 7)
    b = reshuffle_orders(top, 7)
    c = reshuffle_orders(top, 8)
    total = math.fsum(p.mu for p in top.order_model.pairs)
    assert math.fsum(p.mu for p in a.order_model.pairs) == pytest.approx(total, abs=1e-12)
    assert total <= 1
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()
    assert {(p.src, p.dst) for p in a.order_model.pairs} == top.shared_route_pairs()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0))
def test_reshuffle_always_validates(seed, concentration):
    top = reshuffle_orders(bundled_topology(), seed, concentration)
    assert topology_violations(top) == []


def test_with_mode_does_not_mutate():
    top = bundled_topology()
    hard = top.with_mode("hard")
    assert top.order_model.mode == "normal" and hard.order_model.mode == "hard"
    with pytest.raises(TopologyError):
        top.with_mode("extreme")
