import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encgat_ecr.autodiff import ContractError
from encgat_ecr.baselines import (
    LearnedPolicy,
    NoRepositioning,
    ProportionalHeuristic,
    RandomPolicy,
    evaluate,
    export_embeddings,
    pca,
    report_filename,
    transfer_evaluate,
    write_projection,
    write_report,
)
from encgat_ecr.network import NetConfig, init_params
from encgat_ecr.sim import N_ACTIONS, NOOP_ACTION, DecisionRequest, reset
from encgat_ecr.topology import bundled_topology, merge_ports, reshuffle_orders, topology_violations

from oracles import jacobi_eigh
from toys import line_topology

SMALL = NetConfig(d_model=8, d_ff=8, n_lookback=4)


def short(top, length=40):
    top.episode_length = length
    return top


# ---------------------------------------------------------------------------
# policies


def test_no_repositioning_always_noop():
    state = reset(bundled_topology(), 0)
    reqs = [DecisionRequest(0, p, p % 6) for p in range(6)]
    assert NoRepositioning().decide(state, reqs) == [NOOP_ACTION] * 6


def test_heuristic_discharges_into_a_starved_port():
    h = ProportionalHeuristic(0.3)
    a = h.action(port_empty=10, capacity=100, vessel_empty=80)
    assert a < NOOP_ACTION
    assert h.action(port_empty=50, capacity=100, vessel_empty=80) == NOOP_ACTION
    assert h.action(port_empty=95, capacity=100, vessel_empty=0) > NOOP_ACTION


def test_heuristic_threshold_bounds():
    with pytest.raises(ContractError):
        ProportionalHeuristic(0.7)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(1, 500), st.integers(0, 200), st.floats(0.0, 0.5))
def test_heuristic_actions_in_range(stock, cap, vessel, thr):
    a = ProportionalHeuristic(thr).action(min(stock, cap), cap, vessel)
    assert 0 <= a < N_ACTIONS


def test_random_policy_reproducible():
    top = short(bundled_topology())
    a = evaluate(RandomPolicy(3), top, [0, 1])
    b = evaluate(RandomPolicy(3), top, [0, 1])
    c = evaluate(RandomPolicy(4), top, [0, 1])
    assert a.ratios == b.ratios
    assert a.fulfilled.tolist() != c.fulfilled.tolist() or a.ratios != c.ratios


def test_heuristic_beats_no_repositioning_on_bundled():
    top = bundled_topology()
    assert evaluate(ProportionalHeuristic(), top, [0, 1, 2]).mean > evaluate(NoRepositioning(), top, [0, 1, 2]).mean


# ---------------------------------------------------------------------------
# harness


def test_single_seed_std_is_zero_and_mean_recomputes():
    top = short(bundled_topology())
    one = evaluate(NoRepositioning(), top, [3])
    assert one.std == 0.0 and one.episodes == 1
    many = evaluate(RandomPolicy(0), top, [0, 1, 2])
    assert many.mean == pytest.approx(sum(many.ratios) / 3, rel=1e-15)
    assert many.std == pytest.approx(np.std(many.ratios, ddof=1))
    assert many.fulfilled.shape == (3, top.n_ports)


def test_evaluate_needs_seeds():
    with pytest.raises(ContractError):
        evaluate(NoRepositioning(), bundled_topology(), [])


def test_evaluate_is_pure():
    top = short(bundled_topology().with_mode("hard"), 60)
    params = init_params(SMALL, np.random.default_rng(0))
    a = evaluate(LearnedPolicy(params, SMALL), top, [0, 1])
    b = evaluate(LearnedPolicy(params, SMALL), top, [0, 1])
    assert a.ratios == b.ratios and a.fulfilled.tobytes() == b.fulfilled.tobytes()
    n1 = evaluate(NoRepositioning(), top, [5])
    n2 = evaluate(NoRepositioning(), top, [5])
    assert n1.ratios == n2.ratios


def test_report_files(tmp_path):
    rep = evaluate(NoRepositioning(), short(bundled_topology()), [0, 1, 2, 3, 4])
    assert report_filename(rep) == f"eval_{rep.topology}_none_seeds0-4.csv"
    path = write_report(rep, tmp_path)
    rows = list(csv.DictReader(open(path)))
    assert [int(r["seed"]) for r in rows] == [0, 1, 2, 3, 4]
    assert [float(r["fulfillment_ratio"]) for r in rows] == rep.ratios
    ports = list(csv.DictReader(open(path.with_name(path.stem + "_ports.csv"))))
    assert len(ports) == 5 * 6


# ---------------------------------------------------------------------------
# PCA


def _reconstruction_error(xc, comps):
    return float(np.linalg.norm(xc - xc @ comps.T @ comps))


def _oracle_top(x, k=2):
    xc = x - x.mean(axis=0)
    w, v = jacobi_eigh(xc.T @ xc / (len(x) - 1))
    return xc, w[:k], v[:, :k].T


@pytest.mark.parametrize("shape", [(10, 5), (20, 3), (50, 8), (7, 2)])
@pytest.mark.parametrize("seed", range(5))
def test_pca_reconstruction_matches_jacobi(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape) * np.linspace(3.0, 0.5, shape[1])
    comps, vals, proj = pca(x, 2)
    xc, w, v = _oracle_top(x)
    assert abs(_reconstruction_error(xc, comps) - _reconstruction_error(xc, v)) <= 1e-8
    np.testing.assert_allclose(vals, w, rtol=0, atol=1e-8)
    np.testing.assert_allclose(proj, xc @ comps.T)


def test_pca_identity_case():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(size=30) * 3, rng.normal(size=30)])
    x -= x.mean(axis=0)
    # make the columns exactly uncorrelated so the axes are the principal directions
    x[:, 1] -= x[:, 0] * (x[:, 0] @ x[:, 1]) / (x[:, 0] @ x[:, 0])
    _, _, proj = pca(x, 2)
    np.testing.assert_allclose(np.abs(proj), np.abs(x), atol=1e-6)


def test_pca_projection_ordered_and_uncorrelated():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 8)) @ rng.normal(size=(8, 8))
    comps, vals, proj = pca(x, 2)
    assert abs(np.corrcoef(proj.T)[0, 1]) < 1e-6
    var = proj.var(axis=0, ddof=1)
    assert var[0] >= var[1]
    xc = x - x.mean(axis=0)
    for _ in range(100):
        d = rng.normal(size=8)
        d /= np.linalg.norm(d)
        assert var[0] >= (xc @ d).var(ddof=1) - 1e-9
    # pc2 is the best direction orthogonal to pc1
    for _ in range(100):
        d = rng.normal(size=8)
        d -= (d @ comps[0]) * comps[0]
        d /= np.linalg.norm(d)
        assert var[1] >= (xc @ d).var(ddof=1) - 1e-9


def test_pca_needs_two_rows():
    with pytest.raises(ContractError):
        pca(np.ones((1, 4)))


def test_export_embeddings_rows(tmp_path):
    top = short(bundled_topology())
    params = init_params(SMALL, np.random.default_rng(0))
    rows = export_embeddings(params, SMALL, top, 0)
    assert rows and set(rows[0]) == {"port", "tick", "pc1", "pc2"}
    write_projection(rows, tmp_path / "p.csv")
    back = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert len(back) == len(rows) and float(back[0]["pc1"]) == rows[0]["pc1"]


def test_export_with_too_few_decisions_is_contract_error():
    top = line_topology(episode_length=2)
    params = init_params(SMALL, np.random.default_rng(0))
    with pytest.raises(ContractError):
        export_embeddings(params, SMALL, top, 0)


# ---------------------------------------------------------------------------
# transfer


def derived_topology(seed=0):
    return reshuffle_orders(merge_ports(bundled_topology(), 1, 2), seed)


def test_derived_topology_is_valid_and_changes_the_problem():
    top = bundled_topology()
    der = derived_topology()
    assert topology_violations(der) == []
    assert evaluate(NoRepositioning(), top, [0]).mean != evaluate(NoRepositioning(), der, [0]).mean


def test_transfer_leaves_parameters_untouched():
    params = init_params(SMALL, np.random.default_rng(0))
    before = params.digest()
    der = short(derived_topology())
    rep = transfer_evaluate(params, SMALL, der, [0])
    assert rep.extra["digest"] == before == params.digest()


def test_transfer_rejects_feature_width_mismatch():
    params = init_params(SMALL, np.random.default_rng(0))
    params["temporal/port/wq"] = np.zeros((5, SMALL.d_model))
    with pytest.raises(ContractError):
        transfer_evaluate(params, SMALL, derived_topology(), [0])
