import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encgat_ecr import autodiff as ad
from encgat_ecr.autodiff import (
    AdamState,
    ContractError,
    DimensionError,
    NumericError,
    ParameterSet,
    Tape,
    Tensor,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
)

from oracles import central_difference, relative_error


def grad_of(fn, *arrays):
    """Analytic gradients of scalar ``fn(*tensors)`` with respect to every input."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        backward(out, tape)
    return [t.grad for t in ts]


def fd_of(fn, *arrays, h=1e-6):
    arrays = [a.copy() for a in arrays]
    out = []
    for k in range(len(arrays)):
        def f():
            return float(fn(*[Tensor(a) for a in arrays]).data)
        out.append(central_difference(f, arrays[k], h))
    return out


def check(fn, *arrays, tol=1e-5):
    for g, n in zip(grad_of(fn, *arrays), fd_of(fn, *arrays)):
        assert relative_error(g, n) < tol


# a weighted sum keeps the loss sensitive to every output entry
def wsum(t):
    w = np.cos(np.arange(t.data.size).reshape(t.shape) + 0.3)
    return ad.sum(ad.mul(t, w))


PRIMITIVE_CASES = {
    "add": (lambda a, b: wsum(ad.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: wsum(ad.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: wsum(ad.mul(a, b)), [(2, 3), (2, 3)]),
    "scale": (lambda a: wsum(ad.scale(a, -1.7)), [(3, 2)]),
    "relu": (lambda a: wsum(ad.relu(a)), [(4, 3)]),
    "exp": (lambda a: wsum(ad.exp(a)), [(2, 3)]),
    "log": (lambda a: wsum(ad.log(ad.add(ad.square(a), 0.5))), [(2, 3)]),
    "square": (lambda a: wsum(ad.square(a)), [(3, 3)]),
    "matmul": (lambda a, b: wsum(ad.matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: wsum(ad.matmul(a, b)), [(2, 3, 4), (4, 2)]),
    "matmul_both_batched": (lambda a, b: wsum(ad.matmul(a, b)), [(2, 3, 4), (2, 4, 2)]),
    "row_dots": (lambda a, b: wsum(ad.row_dots(a, b)), [(2, 3, 4), (2, 5, 4)]),
    "attend": (lambda w, v: wsum(ad.attend(w, v)), [(2, 3), (3, 4)]),
    "concat_last_dim": (lambda a, b: wsum(ad.concat_last_dim(a, b)), [(2, 2), (2, 3)]),
    "mean_rows": (lambda a: wsum(ad.mean_rows(a, exact=True)), [(4, 3)]),
    "masked_mean": (lambda a: wsum(ad.mean(a, axis=0, mask=np.array([True, False, True]))), [(3, 2)]),
    "softmax_rows": (lambda a: wsum(ad.softmax_rows(a)), [(2, 3)]),
    "masked_softmax": (lambda a: wsum(ad.softmax(a, np.array([[True, False, True], [True, True, False]]))), [(2, 3)]),
    "log_softmax": (lambda a: wsum(ad.log_softmax(a)), [(2, 5)]),
    "layer_norm": (lambda x, g, b: wsum(ad.layer_norm(x, g, b)), [(2, 4), (4,), (4,)]),
    "reshape_swap": (lambda a: wsum(ad.swapaxes(ad.reshape(a, (3, 2)))), [(2, 3)]),
    "gather": (lambda a: wsum(ad.gather(a, np.array([[0, 2], [1, 1]]), axis=0)), [(3, 2)]),
    "select": (lambda a, b: wsum(ad.select(np.array([True, False, True]), a, b)), [(3,), (3,)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVE_CASES[name]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        arrays = [rng.normal(size=s) for s in shapes]
        check(fn, *arrays)


def test_matmul_examples():
    out = ad.matmul(np.array([[1.0, 0], [0, 1]]), np.array([[3.0, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert ad.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_add_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ad.add(np.zeros((2, 3)), np.zeros((3, 2)))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(np.array([[0.0, 0.0]])).data, [[0.5, 0.5]])
    p = ad.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0) and p[0, 1] < 1e-300 + 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax_rows(np.array([[np.nan, 1.0]]))


def test_masked_softmax_zeroes_masked_entries_and_empty_rows():
    p = ad.softmax(np.array([[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]]), np.array([[True, False, True], [False, False, False]])).data
    assert p[0, 1] == 0.0
    assert p[0].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p[1] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_are_positive(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(4, 7))
    p = ad.softmax_rows(x).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(p > 0)


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(ad.layer_norm(np.array([[5.0, 5.0, 5.0]]), one, zero).data, [[0, 0, 0]])
    out = ad.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_layer_norm_standardises_rows(seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(3, 6)) + 2.0
    y = ad.layer_norm(x, np.ones(6), np.zeros(6)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-4)


def test_layer_norm_rejects_wrong_gain_shape():
    with pytest.raises(DimensionError):
        ad.layer_norm(np.zeros((2, 3)), np.ones(2), np.zeros(3))


def test_relu_and_concat_examples():
    assert ad.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert ad.concat_last_dim(np.zeros((4, 2)), np.zeros((4, 3))).shape == (4, 5)


def test_backward_of_sum_is_ones():
    (g,) = grad_of(lambda x: ad.sum(x), np.arange(4.0).reshape(2, 2))
    np.testing.assert_array_equal(g, np.ones((2, 2)))


def test_stop_gradient_blocks_upstream():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.mul(ad.stop_gradient(ad.scale(x, 2.0)), y))
        backward(loss, tape)
    assert x.grad is None or np.all(x.grad == 0)
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
        with pytest.raises(ContractError):
            backward(y, tape)


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractError):
            with Tape():
                pass


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.scale(x, 3.0)
    assert not y.requires_grad


def test_gradients_accumulate_over_two_backward_calls():
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            backward(ad.sum(ad.scale(x, 2.0)), tape)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_masked_log_softmax_masked_entries_get_zero_gradient():
    mask = np.array([[True, False, True]])
    x = Tensor(np.array([[0.1, 0.5, -0.2]]), requires_grad=True)
    with Tape() as tape:
        backward(ad.sum(ad.mul(ad.log_softmax(x, mask), np.array([[1.0, 5.0, 2.0]]))), tape)
    assert x.grad[0, 1] == 0.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    o1 = ad.softmax(ad.matmul(a, b)).data
    o2 = ad.softmax(ad.matmul(a, b)).data
    assert o1.tobytes() == o2.tobytes()


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_moves_by_learning_rate():
    ps = ParameterSet({"w": np.array([0.0])})
    ps["w"].grad = np.array([1.0])
    adam_step(ps, AdamState(learning_rate=0.1, clip_norm=0.0))
    assert ps["w"].data[0] == pytest.approx(-0.1, rel=1e-6)
    assert ps["w"].grad is None


def test_adam_zero_gradient_leaves_parameter():
    ps = ParameterSet({"w": np.array([1.5, -2.0])})
    ps["w"].grad = np.zeros(2)
    adam_step(ps, AdamState(learning_rate=0.1))
    np.testing.assert_array_equal(ps["w"].data, [1.5, -2.0])


def test_adam_missing_gradient_is_contract_error():
    ps = ParameterSet({"w": np.array([1.0])})
    with pytest.raises(ContractError):
        adam_step(ps, AdamState())


def test_adam_converges_on_quadratic():
    ps = ParameterSet({"w": np.array([0.0])})
    state = AdamState(learning_rate=0.1)
    for _ in range(200):
        with Tape() as tape:
            backward(ad.sum(ad.square(ad.sub(ps["w"], 3.0))), tape)
        adam_step(ps, state)
    assert abs(ps["w"].data[0] - 3.0) < 0.05


def test_adam_state_validation():
    with pytest.raises(ContractError):
        AdamState(beta1=1.0)
    with pytest.raises(ContractError):
        AdamState(epsilon=0.0)


def test_gradient_clipping_caps_global_norm():
    ps = ParameterSet({"a": np.zeros(2), "b": np.zeros(1)})
    ps["a"].grad = np.array([3.0, 0.0])
    ps["b"].grad = np.array([4.0])
    norm = ad.clip_grad_norm(ps, 1.0)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(np.sum(ps["a"].grad ** 2) + np.sum(ps["b"].grad ** 2))
    assert total == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    ps = ParameterSet({"x/w": rng.normal(size=(3, 2)), "y": rng.normal(size=(4,))})
    save_checkpoint(tmp_path / "c.npz", ps)
    back = load_checkpoint(tmp_path / "c.npz")
    assert list(back) == list(ps)
    for k in ps:
        assert back[k].data.tobytes() == ps[k].data.tobytes()
    assert back.digest() == ps.digest()


def test_checkpoint_without_version_rejected(tmp_path):
    np.savez(tmp_path / "bad.npz", w=np.zeros(2))
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "bad.npz")
