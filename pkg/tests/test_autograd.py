"""Autodiff core: every op against central differences, plus the softmax
hand cases, backward semantics, and checkpoint round-trips."""

import math

import numpy as np
import pytest

from streamlora.autograd import (
    ParamStore,
    Value,
    backward,
    cols,
    concat,
    cross_entropy,
    finite_diff_grad,
    load_checkpoint,
    log,
    masked_softmax,
    masked_softmax_np,
    matmul,
    mean,
    mul,
    named_rng,
    no_grad,
    pick,
    powi,
    save_checkpoint,
    softmax,
    take_rows,
    tanh,
    transpose,
    vsum,
)


def check_gradients(build, tensors, rtol=1e-4, atol=1e-9):
    """Compare backward() grads on build()'s output with central differences."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = build()
    assert out.data.shape == (), "objective must be scalar"
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    def probe():
        with no_grad():
            return float(build().data)

    numeric = finite_diff_grad(probe, tensors, epsilon=1e-5)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def scalarize(v):
    """Reduce any value to a scalar with nontrivial weights, so gradient
    structure is visible (a plain sum would hide sign errors that cancel)."""
    flat = vsum(mul(v, Value(np.linspace(0.5, 1.5, v.data.size).reshape(v.data.shape))))
    return flat


# ---------------------------------------------------------------------------
# finite-difference sweep over every op
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    rng = named_rng(seed, "op-sweep")
    m, n, k = (int(x) for x in rng.integers(2, 8, size=3))

    a = Value(rng.normal(size=(m, n)))
    b = Value(rng.normal(size=(m, n)))
    w = Value(rng.normal(size=(n, k)))
    vec = Value(rng.normal(size=n))
    pos = Value(rng.uniform(0.5, 2.0, size=(m, n)))
    table = Value(rng.normal(size=(6, n)))
    ids = [int(i) for i in rng.integers(0, 6, size=4)]
    mask = np.zeros(n, dtype=bool)
    mask[rng.integers(0, n)] = True
    mask |= rng.uniform(size=n) < 0.5
    target = int(rng.integers(0, n))

    cases = [
        (lambda: scalarize(a + b), [a, b]),
        (lambda: scalarize(a - b), [a, b]),
        (lambda: scalarize(mul(a, b)), [a, b]),
        (lambda: scalarize(-a), [a]),
        (lambda: scalarize(matmul(a, w)), [a, w]),
        (lambda: scalarize(matmul(a, vec)), [a, vec]),
        (lambda: scalarize(matmul(vec, w)), [vec, w]),
        (lambda: matmul(vec, vec), [vec]),
        (lambda: scalarize(transpose(a)), [a]),
        (lambda: scalarize(powi(pos, -0.5)), [pos]),
        (lambda: scalarize(tanh(a)), [a]),
        (lambda: scalarize(log(pos)), [pos]),
        (lambda: scalarize(mean(a, axis=0)), [a]),
        (lambda: scalarize(mean(a, axis=1, keepdims=True)), [a]),
        (lambda: mean(a), [a]),
        (lambda: scalarize(vsum(a, axis=0)), [a]),
        (lambda: vsum(a), [a]),
        (lambda: scalarize(concat([a, b], axis=0)), [a, b]),
        (lambda: scalarize(concat([a, b], axis=1)), [a, b]),
        (lambda: scalarize(take_rows(table, ids)), [table]),
        (lambda: scalarize(cols(a, 0, max(1, n - 1))), [a]),
        (lambda: pick(vec, n - 1), [vec]),
        (lambda: scalarize(softmax(a)), [a]),
        (lambda: scalarize(masked_softmax(a, mask)), [a]),
        (lambda: cross_entropy(vec, target), [vec]),
    ]
    for build, tensors in cases:
        check_gradients(build, tensors)


def test_broadcast_gradients_match_finite_differences():
    rng = named_rng(7, "broadcast")
    a = Value(rng.normal(size=(4, 3)))
    row = Value(rng.normal(size=(1, 3)))
    col = Value(rng.normal(size=(4, 1)))
    scal = Value(rng.normal())
    check_gradients(lambda: scalarize(a + row), [a, row])
    check_gradients(lambda: scalarize(mul(a, col)), [a, col])
    check_gradients(lambda: scalarize(mul(a, scal)), [a, scal])
    check_gradients(lambda: scalarize(a + scal), [a, scal])


# ---------------------------------------------------------------------------
# masked softmax, exactly
# ---------------------------------------------------------------------------


def test_masked_softmax_uniform_logits():
    out = masked_softmax(Value(np.zeros(4)), np.ones(4, dtype=bool))
    np.testing.assert_array_equal(out.data, np.full(4, 0.25))


def test_masked_softmax_two_way_hand_case():
    out = masked_softmax(Value([1.0, 2.0, 3.0, 4.0]), np.array([False, True, False, True]))
    lo = 1.0 / (1.0 + math.exp(2.0))
    hi = math.exp(2.0) / (1.0 + math.exp(2.0))
    np.testing.assert_allclose(out.data, [0.0, lo, 0.0, hi], rtol=0, atol=1e-15)
    assert out.data[0] == 0.0 and out.data[2] == 0.0


def test_masked_softmax_singleton_subset_is_one():
    mask = np.array([False, True, False])
    out = masked_softmax(Value([5.0, -3.0, 9.0]), mask)
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 0.0])


def test_masked_softmax_empty_subset_raises():
    with pytest.raises(ValueError, match="empty routing subset"):
        masked_softmax(Value([1.0, 2.0]), np.zeros(2, dtype=bool))
    with pytest.raises(ValueError, match="empty routing subset"):
        masked_softmax_np(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2, dtype=bool))


def test_masked_softmax_rows_sum_to_one_and_stay_nonnegative():
    rng = named_rng(3, "masked-sums")
    for _ in range(200):
        n = int(rng.integers(2, 9))
        logits = rng.normal(scale=20.0, size=(5, n))  # large scale probes stability
        mask = rng.uniform(size=n) < 0.5
        mask[rng.integers(0, n)] = True
        out = masked_softmax_np(logits, mask)
        assert np.all(out >= 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
        assert np.all(out[:, ~mask] == 0.0)


def test_masked_softmax_zero_gradient_on_masked_entries():
    logits = Value(np.array([[1.0, 2.0, 3.0, 4.0]]), requires_grad=True)
    mask = np.array([True, False, True, False])
    out = masked_softmax(logits, mask)
    backward(pick(mean(mul(out, out), axis=0), 0))
    assert logits.grad[0, 1] == 0.0
    assert logits.grad[0, 3] == 0.0
    assert np.any(logits.grad != 0.0)


def test_masked_softmax_matches_full_softmax_when_mask_is_all_true():
    rng = named_rng(11, "full-mask")
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(
        masked_softmax_np(x, np.ones(5, dtype=bool)),
        masked_softmax_np(x, None),
        rtol=0, atol=1e-15,
    )


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Value(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(vsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_dot_is_the_other_vector():
    x = Value([1.0, 2.0, 3.0], requires_grad=True)
    y = Value([4.0, 5.0, 6.0])
    backward(matmul(x, y))
    np.testing.assert_array_equal(x.grad, y.data)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = Value([0.5, -1.0, 2.0], requires_grad=True)
    backward(cross_entropy(z, 2))
    p = np.exp(z.data) / np.exp(z.data).sum()
    p[2] -= 1.0
    np.testing.assert_allclose(z.grad, p, rtol=0, atol=1e-15)


def test_cross_entropy_hand_value():
    # two classes, logits [1, 0], true class 0: -log(e / (e + 1)) = log(1 + e^-1)
    loss = cross_entropy(Value([1.0, 0.0]), 0)
    assert loss.data == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-15)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(Value([0.0, 1.0]), 2)


def test_backward_accumulates_until_reset():
    x = Value([2.0], requires_grad=True)
    backward(vsum(mul(x, x)))
    first = x.grad.copy()
    backward(vsum(mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_backward_through_shared_subexpression_sums_both_paths():
    x = Value(3.0, requires_grad=True)
    y = mul(x, x)           # used twice below
    backward(y + y)
    assert float(x.grad) == pytest.approx(12.0)


def test_backward_rejects_non_scalar_root():
    x = Value([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar root"):
        backward(mul(x, x))


def test_detach_blocks_gradient_flow():
    x = Value([1.5], requires_grad=True)
    out = vsum(mul(x.detach(), x))
    backward(out)
    np.testing.assert_array_equal(x.grad, [1.5])  # only the live factor


def test_no_grad_produces_constant_nodes():
    x = Value([1.0, 2.0], requires_grad=True)
    with no_grad():
        out = mul(x, x)
    assert not out.requires_grad
    assert out._parents == ()


def test_log_requires_positive_without_floor():
    with pytest.raises(ValueError, match="non-positive"):
        log(Value([1.0, 0.0]))


def test_log_floor_clamps_value_and_gradient():
    x = Value([1e-20, 1.0], requires_grad=True)
    out = log(x, floor=1e-12)
    assert out.data[0] == pytest.approx(math.log(1e-12))
    backward(vsum(out))
    assert x.grad[0] == pytest.approx(1e12)
    assert x.grad[1] == pytest.approx(1.0)


def test_division_sugar_and_scalar_ops():
    x = Value([2.0, 4.0], requires_grad=True)
    out = vsum((x / 2.0) * 3.0 + 1.0 - (1.0 - x))
    backward(out)
    np.testing.assert_allclose(x.grad, [2.5, 2.5])
    with pytest.raises(TypeError):
        x / Value([1.0, 1.0])


def test_take_rows_rejects_out_of_range_ids():
    table = Value(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="out of range"):
        take_rows(table, [0, 3])


# ---------------------------------------------------------------------------
# finite differences as their own oracle
# ---------------------------------------------------------------------------


def test_finite_diff_on_square_is_two_theta():
    theta = Value(np.asarray(3.0))
    store = ParamStore()
    store.add("theta", theta)
    grads = finite_diff_grad(lambda: float(theta.data) ** 2, store, epsilon=1e-5)
    assert grads[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_of_constant_function_is_zero():
    x = Value(np.ones((2, 2)))
    grads = finite_diff_grad(lambda: 42.0, [x], epsilon=1e-5)
    np.testing.assert_array_equal(grads[0], np.zeros((2, 2)))


def test_finite_diff_rejects_non_finite_objective():
    x = Value(np.asarray(1.0))
    with pytest.raises(ValueError, match="non-finite"):
        finite_diff_grad(lambda: float("nan"), [x], epsilon=1e-5)


def test_finite_diff_restores_parameters_exactly():
    x = Value(np.array([1.0, 2.0, 3.0]))
    before = x.data.copy()
    finite_diff_grad(lambda: float((x.data ** 2).sum()), [x], epsilon=1e-4)
    np.testing.assert_array_equal(x.data, before)


# ---------------------------------------------------------------------------
# parameter store and checkpoints
# ---------------------------------------------------------------------------


def test_param_store_rejects_duplicates_and_tracks_order():
    store = ParamStore()
    store.add("b", Value([1.0]))
    store.add("a", Value([[2.0, 3.0]]))
    assert store.paths() == ["b", "a"]  # insertion order, not sorted
    assert store.n_scalars() == 3
    with pytest.raises(ValueError, match="duplicate"):
        store.add("b", Value([0.0]))


def test_param_store_add_marks_trainable_and_zero_grad_clears():
    store = ParamStore()
    v = store.add("x", Value([1.0, 2.0]))
    assert v.requires_grad
    backward(vsum(mul(v, v)))
    assert v.grad is not None
    store.zero_grad()
    assert v.grad is None


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = named_rng(9, "ckpt")
    records = {
        "layer.0.weight": rng.normal(size=(4, 3)),
        "scalar": np.asarray(math.pi),
        "vector": rng.uniform(size=7),
    }
    path = tmp_path / "state.bin"
    save_checkpoint(path, records)
    loaded = load_checkpoint(path)
    assert sorted(loaded) == sorted(records)
    for name, arr in records.items():
        assert loaded[name].dtype == np.float64
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr), name  # bitwise, no tolerance


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_param_store_save_load_with_extras(tmp_path):
    store = ParamStore()
    store.add("w", Value(np.arange(6.0).reshape(2, 3)))
    extra = {"ema.w": np.full((2, 3), 0.5)}
    path = tmp_path / "ckpt.bin"
    store.save(path, extra=extra)

    target = ParamStore()
    fresh = target.add("w", Value(np.zeros((2, 3))))
    leftovers = target.load(path)
    np.testing.assert_array_equal(fresh.data, np.arange(6.0).reshape(2, 3))
    assert set(leftovers) == {"ema.w"}
    np.testing.assert_array_equal(leftovers["ema.w"], extra["ema.w"])


def test_param_store_load_rejects_missing_and_mismatched(tmp_path):
    store = ParamStore()
    store.add("w", Value(np.zeros((2, 2))))
    path = tmp_path / "ckpt.bin"
    store.save(path)

    wrong_shape = ParamStore()
    wrong_shape.add("w", Value(np.zeros(3)))
    with pytest.raises(ValueError, match="shape mismatch"):
        wrong_shape.load(path)

    bigger = ParamStore()
    bigger.add("w", Value(np.zeros((2, 2))))
    bigger.add("extra", Value(np.zeros(1)))
    with pytest.raises(ValueError, match="missing"):
        bigger.load(path)


# ---------------------------------------------------------------------------
# named streams
# ---------------------------------------------------------------------------


def test_named_rng_is_stable_and_name_separated():
    a1 = named_rng(0, "alpha").normal(size=5)
    a2 = named_rng(0, "alpha").normal(size=5)
    b = named_rng(0, "beta").normal(size=5)
    other_seed = named_rng(1, "alpha").normal(size=5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, other_seed)


def test_named_rng_streams_are_order_independent():
    # drawing from one stream must not shift another
    first = named_rng(4, "x").normal(size=3)
    named_rng(4, "y").normal(size=1000)
    again = named_rng(4, "x").normal(size=3)
    np.testing.assert_array_equal(first, again)
