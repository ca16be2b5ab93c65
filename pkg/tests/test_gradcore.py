import numpy as np
import pytest
import scipy.sparse as sp

from slogan import gradcore as gc
from slogan.gradcore import ParamStore, Rng, Tensor, adam_step, finite_diff_check


def rand(rng, *shape, margin=0.0):
    """Uniform values in [-1, 1] kept `margin` away from zero (ReLU kinks)."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    if margin:
        x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return x


def test_relu_definition():
    out = gc.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.values, [0.0, 0.0, 2.0])


def test_softmax_uniform_on_equal_logits():
    out = gc.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.values, [[1 / 3, 1 / 3, 1 / 3]])


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = gc.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.values, a.values)


def test_softmax_rows_normalized():
    rng = Rng(1)
    x = Tensor(rng.normal(size=(50, 7)) * 5)
    p = gc.softmax_rows(x).values
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0) and np.all(p < 1)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    gc.tsum(gc.mul(x, x)).backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_mean_linearity():
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    gc.mean(x).backward()
    assert np.allclose(x.grad, [0.25, 0.25, 0.25, 0.25])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        gc.mul(x, x).backward()


def test_backward_accumulates_without_zeroing():
    x = Tensor([2.0], requires_grad=True)
    loss = gc.tsum(gc.mul(x, x))
    loss.backward()
    loss.backward()
    assert np.allclose(x.grad, [8.0])


def test_backward_diamond_accumulation():
    # x feeds two consumers; gradient contributions must add
    x = Tensor([1.0, -2.0, 0.5], requires_grad=True)

    def f(t):
        a = gc.mul(t, 3.0)
        b = gc.mul(t, t)
        return gc.tsum(gc.add(a, b))

    report = finite_diff_check(f, x, tol=1e-6)
    assert report["passed"], report


def test_matmul_chain_matches_finite_differences():
    rng = Rng(7)
    w = Tensor(rand(rng, 4, 3), requires_grad=True)
    a = Tensor(rand(rng, 5, 4))
    b = Tensor(rand(rng, 3, 2))

    def f(t):
        return gc.mean(gc.matmul(gc.matmul(a, t), b))

    report = finite_diff_check(f, w, tol=1e-3)
    assert report["passed"], report


OP_CASES = {
    "matmul": lambda x, aux: gc.matmul(x, aux["m32"]),
    "add": lambda x, aux: gc.add(x, aux["like"]),
    "add_bias_row": lambda x, aux: gc.add(x, aux["bias"]),
    "sub": lambda x, aux: gc.sub(x, aux["like"]),
    "mul": lambda x, aux: gc.mul(x, aux["like"]),
    "mul_scalar": lambda x, aux: gc.mul(x, 1.7),
    "relu": lambda x, aux: gc.relu(x),
    "exp": lambda x, aux: gc.exp(x),
    "log_shifted": lambda x, aux: gc.log(gc.add(gc.mul(x, 0.25), 2.0)),
    "mean_axis0": lambda x, aux: gc.mean(x, axis=0),
    "mean_axis1": lambda x, aux: gc.mean(x, axis=1),
    "sum_axis0": lambda x, aux: gc.tsum(x, axis=0),
    "sum_axis1": lambda x, aux: gc.tsum(x, axis=1),
    "concat": lambda x, aux: gc.concat(x, aux["like"]),
    "concat_rows": lambda x, aux: gc.concat_rows(x, aux["like"]),
    "slice_last": lambda x, aux: gc.slice_last(x, 1, 3),
    "softmax_rows": lambda x, aux: gc.softmax_rows(x),
    "row_sqdist": lambda x, aux: gc.row_sqdist(x, aux["like"]),
    "cross_entropy": lambda x, aux: gc.cross_entropy_rows(x, aux["labels"]),
    "gather_rows": lambda x, aux: gc.gather_rows(x, aux["gather"]),
    "sparse_matmul": lambda x, aux: gc.sparse_matmul(aux["sparse"], x),
    "log_mean_exp": lambda x, aux: gc.log_mean_exp(gc.mean(x, axis=1)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    build = OP_CASES[name]
    for trial in range(20):
        rng = Rng(1000 + trial)
        x = Tensor(rand(rng, 6, 3, margin=1e-2), requires_grad=True)
        aux = {
            "like": Tensor(rand(rng, 6, 3)),
            "bias": Tensor(rand(rng, 3)),
            "m32": Tensor(rand(rng, 3, 2)),
            "labels": rng.integers(0, 3, size=6),
            "gather": rng.integers(0, 6, size=9),
            "sparse": sp.random(6, 6, density=0.4, random_state=trial, format="csr"),
        }

        def f(t):
            return gc.mean(build(t, aux))

        report = finite_diff_check(f, x, tol=1e-3)
        assert report["passed"], (name, trial, report)


def test_shape_mismatch_messages_name_both_shapes():
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5)))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        gc.add(a, b)
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        gc.matmul(a, b)


def test_log_rejects_non_positive():
    with pytest.raises(ValueError, match="non-positive"):
        gc.log(Tensor([1.0, 0.0]))


def test_adam_zero_grad_leaves_parameter_unchanged():
    store = ParamStore()
    p = store.add("w", Tensor([1.0, -2.0]))
    p.grad = np.zeros_like(p.values)
    before = p.values.copy()
    adam_step(store, lr=0.1)
    assert np.array_equal(p.values, before)


def test_adam_first_step_magnitude_is_lr_signed():
    # closed form: m_hat = g, v_hat = g^2, so step ~= lr * sign(g)
    store = ParamStore()
    p = store.add("w", Tensor([1.0, 1.0]))
    p.grad = np.array([0.5, -3.0])
    adam_step(store, lr=0.01)
    assert np.allclose(p.values, [1.0 - 0.01, 1.0 + 0.01], atol=1e-6)


def test_adam_identical_params_identical_updates():
    store = ParamStore()
    a = store.add("a", Tensor([0.3, 0.7]))
    b = store.add("b", Tensor([0.3, 0.7]))
    a.grad = np.array([1.0, -1.0])
    b.grad = np.array([1.0, -1.0])
    adam_step(store, lr=0.05)
    assert np.array_equal(a.values, b.values)


def test_adam_lr_zero_bit_identical():
    store = ParamStore()
    p = store.add("w", Tensor([0.123456789, -9.87654321]))
    before = p.values.copy()
    p.grad = np.array([5.0, -2.0])
    adam_step(store, lr=0.0)
    assert p.values.tobytes() == before.tobytes()


def test_adam_missing_grad_names_parameter():
    store = ParamStore()
    store.add("alpha", Tensor([1.0]))
    store.add("beta", Tensor([1.0]))
    store.params["alpha"].grad = np.array([1.0])
    with pytest.raises(ValueError, match="beta"):
        adam_step(store, lr=0.1)


def test_adam_zeroes_grads_and_counts_steps():
    store = ParamStore()
    p = store.add("w", Tensor([1.0]))
    p.grad = np.array([1.0])
    adam_step(store, lr=0.1)
    assert p.grad is None
    assert store.step_count == 1


def test_duplicate_param_name_rejected():
    store = ParamStore()
    store.add("w", Tensor([1.0]))
    with pytest.raises(ValueError, match="duplicate"):
        store.add("w", Tensor([2.0]))


def test_finite_diff_relu_away_from_kink():
    x = Tensor([0.5, -0.7, 1.2], requires_grad=True)
    report = finite_diff_check(lambda t: gc.tsum(gc.relu(t)), x, tol=1e-6)
    assert report["passed"] and report["max_rel_err"] < 1e-6


def test_finite_diff_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = finite_diff_check(lambda t: gc.mul(gc.mean(t), 0.0), x, tol=1e-6)
    assert report["passed"]


def test_finite_diff_softmax_cross_entropy():
    rng = Rng(3)
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    report = finite_diff_check(
        lambda t: gc.mean(gc.cross_entropy_rows(t, labels)), logits, tol=1e-3)
    assert report["passed"], report


def test_finite_diff_rejects_non_finite():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="finite"):
        finite_diff_check(lambda t: gc.mul(gc.mean(t), float("nan")), x, tol=1e-3)


def test_rng_same_seed_same_sequence():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(size=10), b.normal(size=10))
    assert np.array_equal(a.permutation(20), b.permutation(20))


def test_rng_children_are_independent_and_stable():
    a = Rng(42).child("stream-one")
    b = Rng(42).child("stream-two")
    c = Rng(42).child("stream-one")
    assert np.array_equal(a.normal(size=5), c.normal(size=5))
    assert not np.array_equal(Rng(42).child("stream-one").normal(size=5), b.normal(size=5))


def test_rng_derangement_has_no_fixed_points():
    rng = Rng(5)
    for n in (2, 3, 8, 50):
        perm = rng.derangement(n)
        assert not np.any(perm == np.arange(n))
        assert np.array_equal(np.sort(perm), np.arange(n))


def test_default_dtype_switch():
    gc.set_default_dtype(np.float32)
    try:
        assert Tensor([1.0]).values.dtype == np.float32
    finally:
        gc.set_default_dtype(np.float64)
    assert Tensor([1.0]).values.dtype == np.float64
