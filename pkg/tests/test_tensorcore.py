import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowid import tensorcore as tc


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_grads(build_loss, leaves: dict[str, tc.Tensor], tol: float = 1e-3):
    """build_loss() -> scalar Tensor over `leaves`; compares to central differences."""
    loss = build_loss()
    tc.backward(loss)
    for name, leaf in leaves.items():
        assert leaf.grad is not None, f"no grad on {name}"
        num = numeric_grad(lambda: build_loss().item(), leaf.data)
        err = rel_err(leaf.grad.astype(np.float64), num)
        assert err < tol, f"{name}: rel err {err:.2e}"


def leaf(rng, *shape, scale=1.0):
    return tc.Tensor(rng.standard_normal(shape).astype(np.float32) * scale, requires_grad=True)


# one gradcheck case per registered op; rank <= 4 randomized inputs
def _case_add(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
    target = tc.Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    return {"a": a, "b": b}, lambda: tc.mse(tc.add(a, b), target)


def _case_sub(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
    return {"a": a, "b": b}, lambda: tc.tsum(tc.mul(tc.sub(a, b), 0.3))


def _case_mul(rng):
    a, b = leaf(rng, 2, 5), leaf(rng, 5)
    return {"a": a, "b": b}, lambda: tc.mean(tc.mul(a, b))


def _case_matmul(rng):
    a, b = leaf(rng, 2, 3, 4, 5), leaf(rng, 5, 3)
    c = leaf(rng, 2, 3, 3, 2)
    return {"a": a, "b": b, "c": c}, lambda: tc.mean(tc.matmul(tc.matmul(a, b), c))


def _case_reshape(rng):
    a = leaf(rng, 2, 6)
    return {"a": a}, lambda: tc.mse(tc.reshape(a, (3, 4)), tc.Tensor(np.ones((3, 4), np.float32)))


def _case_transpose(rng):
    a = leaf(rng, 2, 3, 4)
    w = tc.Tensor(rng.standard_normal((4, 3, 2)).astype(np.float32))
    return {"a": a}, lambda: tc.tsum(tc.mul(tc.transpose(a, (2, 1, 0)), w))


def _case_concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    w = tc.Tensor(rng.standard_normal((6, 3)).astype(np.float32))
    return {"a": a, "b": b}, lambda: tc.tsum(tc.mul(tc.concat([a, b], axis=0), w))


def _case_narrow(rng):
    a = leaf(rng, 3, 8)
    w = tc.Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    return {"a": a}, lambda: tc.tsum(tc.mul(tc.narrow(a, 1, 2, 4), w))


def _case_embedding(rng):
    table = leaf(rng, 7, 4)
    ids = np.array([[0, 3], [3, 6]])
    w = tc.Tensor(rng.standard_normal((2, 2, 4)).astype(np.float32))
    return {"table": table}, lambda: tc.tsum(tc.mul(tc.embedding(table, ids), w))


def _case_softmax(rng):
    a = leaf(rng, 2, 3, 5)
    w = tc.Tensor(rng.standard_normal((2, 3, 5)).astype(np.float32))
    return {"a": a}, lambda: tc.tsum(tc.mul(tc.softmax(a, axis=-1), w))


def _case_layernorm(rng):
    a = leaf(rng, 2, 4, 6)
    w = tc.Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
    return {"a": a}, lambda: tc.tsum(tc.mul(tc.layernorm(a), w))


def _case_gelu(rng):
    a = leaf(rng, 3, 4)
    return {"a": a}, lambda: tc.mean(tc.gelu(a))


def _case_mean(rng):
    a = leaf(rng, 2, 3, 4)
    w = tc.Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    return {"a": a}, lambda: tc.tsum(tc.mul(tc.mean(a, axis=1), w))


def _case_tsum(rng):
    a = leaf(rng, 5)
    return {"a": a}, lambda: tc.tsum(tc.mul(a, a))


def _case_mse(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    return {"a": a, "b": b}, lambda: tc.mse(a, b)


def _case_cross_entropy(rng):
    logits = leaf(rng, 6, 4, scale=2.0)
    labels = np.array([0, 1, 2, 3, 1, 2])
    return {"logits": logits}, lambda: tc.cross_entropy(logits, labels)


def _case_bce_logits(rng):
    logits = leaf(rng, 4, 3, scale=2.0)
    targets = (rng.random((4, 3)) > 0.5).astype(np.float32)
    return {"logits": logits}, lambda: tc.bce_logits(logits, targets)


CASES = {name: globals()[f"_case_{name}"] for name in tc.GRAD_OPS}


@pytest.mark.parametrize("op", tc.GRAD_OPS)
def test_gradcheck_every_registered_op(op):
    rng = np.random.default_rng(hash(op) % 2**31)
    leaves, build = CASES[op](rng)
    check_grads(build, leaves)


def test_every_grad_op_has_a_case():
    assert set(CASES) == set(tc.GRAD_OPS)


# ---------------------------------------------------------------------------
# value-level contracts


def test_softmax_uniform_logits():
    y = tc.softmax(tc.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(y.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)
    assert abs(y.data.sum() - 1.0) < 1e-6


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=16))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    y = tc.softmax(tc.Tensor(vals)).data
    assert np.all(y > 0) and np.all(y < 1 + 1e-6)
    assert abs(y.sum() - 1.0) < 1e-5


def test_mse_identity_is_zero():
    x = tc.Tensor(np.random.default_rng(0).standard_normal((4, 5)).astype(np.float32))
    assert tc.mse(x, x).item() == 0.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((2, 3)).astype(np.float32)
    b = rng.standard_normal((3, 2)).astype(np.float32)
    want = np.zeros((2, 2), np.float64)
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += float(a[i, k]) * float(b[k, j])
    got = tc.matmul(tc.Tensor(a), tc.Tensor(b)).data
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        tc.add(tc.Tensor(np.zeros((2, 3))), tc.Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="matmul"):
        tc.matmul(tc.Tensor(np.zeros((2, 3))), tc.Tensor(np.zeros((4, 2))))


def test_nonfinite_output_names_op():
    big = tc.Tensor(np.full((2,), 3e38, np.float32))
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError, match="add"):
        tc.add(big, big)


def test_backward_sum_of_squares():
    x = tc.Tensor([3.0], requires_grad=True)
    loss = tc.tsum(tc.mul(x, x))
    tc.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_requires_scalar():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        tc.backward(tc.mul(x, x))


def test_unreachable_parameter_keeps_no_grad():
    x = tc.Tensor([1.0], requires_grad=True)
    other = tc.Tensor([2.0], requires_grad=True)
    tc.backward(tc.tsum(tc.mul(x, x)))
    assert other.grad is None
    assert x.grad is not None


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = leaf(rng, 4, 8, scale=0.5)
    b1 = leaf(rng, 8, scale=0.1)
    w2 = leaf(rng, 8, 2, scale=0.5)
    x = tc.Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    y = tc.Tensor(rng.standard_normal((5, 2)).astype(np.float32))

    def build():
        h = tc.gelu(tc.add(tc.matmul(x, w1), b1))
        return tc.mse(tc.matmul(h, w2), y)

    check_grads(build, {"w1": w1, "b1": b1, "w2": w2})


def test_grad_accumulation_matches_summed_loss():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((3, 3)).astype(np.float32)

    w = tc.Tensor(data.copy(), requires_grad=True)
    tc.backward(tc.tsum(tc.mul(w, w)))
    tc.backward(tc.mean(w))
    acc = w.grad.copy()

    w2 = tc.Tensor(data.copy(), requires_grad=True)
    tc.backward(tc.add(tc.tsum(tc.mul(w2, w2)), tc.mean(w2)))
    np.testing.assert_allclose(acc, w2.grad, rtol=1e-6)


def test_no_grad_suppresses_graph():
    x = tc.Tensor([1.0], requires_grad=True)
    with tc.no_grad():
        y = tc.mul(x, x)
    assert not y.requires_grad and y._backward is None


# ---------------------------------------------------------------------------
# Adam


def test_adam_single_step_magnitude():
    p = tc.Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0], np.float32)
    state = tc.AdamState(lr=0.1)
    tc.adam_step({"p": p}, state)
    # bias-corrected mhat/(sqrt(vhat)+eps) == 1 on the first step
    np.testing.assert_allclose(p.data, [0.9], atol=1e-6)
    assert state.step == 1
    np.testing.assert_allclose(p.grad, [1.0])  # grads untouched


def test_adam_zero_grad_keeps_param():
    p = tc.Tensor([2.0], requires_grad=True)
    p.grad = np.zeros(1, np.float32)
    before = p.data.copy()
    tc.adam_step({"p": p}, tc.AdamState(lr=0.5))
    np.testing.assert_allclose(p.data, before)


def test_adam_missing_grad_names_parameter():
    p = tc.Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="theta"):
        tc.adam_step({"theta": p}, tc.AdamState())


def test_accumulated_backwards_equal_one_summed_backward_through_adam():
    rng = np.random.default_rng(11)
    data = rng.standard_normal(4).astype(np.float32)
    y1 = rng.standard_normal(4).astype(np.float32)
    y2 = rng.standard_normal(4).astype(np.float32)

    def run(accumulate: bool):
        w = tc.Tensor(data.copy(), requires_grad=True)
        if accumulate:
            tc.backward(tc.mse(w, tc.Tensor(y1)))
            tc.backward(tc.mse(w, tc.Tensor(y2)))
        else:
            tc.backward(tc.add(tc.mse(w, tc.Tensor(y1)), tc.mse(w, tc.Tensor(y2))))
        tc.adam_step({"w": w}, tc.AdamState(lr=0.05))
        return w.data

    np.testing.assert_allclose(run(True), run(False), atol=1e-7)


# ---------------------------------------------------------------------------
# determinism and checkpoints


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        w = tc.Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
        x = tc.Tensor(rng.standard_normal((4, 8)).astype(np.float32))
        state = tc.AdamState(lr=1e-2)
        for _ in range(5):
            tc.zero_grads({"w": w})
            tc.backward(tc.mse(tc.gelu(tc.matmul(x, w)), tc.Tensor(np.zeros((4, 8), np.float32))))
            tc.adam_step({"w": w}, state)
        return w.data.tobytes()

    assert run() == run()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "a": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "b.weight": rng.standard_normal(7).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "ck.fwtc"
    tc.save_tensors(path, tensors)
    loaded = tc.load_tensors(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].shape == np.asarray(tensors[k]).shape
        assert loaded[k].tobytes() == np.asarray(tensors[k], dtype="<f4").tobytes()
    # same content -> same bytes on disk
    path2 = tmp_path / "ck2.fwtc"
    tc.save_tensors(path2, tensors)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.fwtc"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="FWTC"):
        tc.load_tensors(p)
