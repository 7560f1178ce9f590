import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgkn import tensor_core as tc
from mgkn.tensor_core import Tensor


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def autodiff_grads(build, arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with tc.recording():
        loss = build(*leaves)
        tc.backward(loss)
    return [leaf.grad for leaf in leaves]


def check_against_fd(build, arrays, tol=1e-5):
    grads = autodiff_grads(build, arrays)
    for k, arr in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(x)
            return float(build(*args).data)
        expected = fd_grad(f, arr.copy())
        assert rel_err(grads[k], expected) < tol


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(tc.matmul(eye, Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_array_equal(tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_of_sum():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    gA, gB = autodiff_grads(lambda a, b: tc.sum_all(tc.matmul(a, b)), [A, B])
    expected = fd_grad(lambda x: (x @ B).sum(), A.copy())
    assert rel_err(gA, expected) < 1e-6
    np.testing.assert_allclose(gA, np.ones((3, 3)) @ B.T)
    np.testing.assert_allclose(gB, A.T @ np.ones((3, 3)))


def test_relu_and_add_examples():
    np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(tc.elementwise("add", x, 0).data, x.data)
    (g,) = autodiff_grads(lambda t: tc.sum_all(tc.relu(t)), [np.array([-1.0, 2.0])])
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_elementwise_rejects_general_broadcast():
    with pytest.raises(tc.DimensionError):
        tc.add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(tc.DimensionError):
        tc.mul(Tensor(np.ones((2, 2))), np.ones(2))
    with pytest.raises(ValueError):
        tc.elementwise("tanh", Tensor([1.0]))


def test_segment_mean_examples():
    out = tc.segment_mean(Tensor([[2.0], [4.0], [6.0]]), [0, 0, 1], 2)
    np.testing.assert_array_equal(out.data, [[3.0], [6.0]])
    out = tc.segment_mean(Tensor([[5.0]]), [0], 2)
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_segment_mean_index_error():
    with pytest.raises(IndexError):
        tc.segment_mean(Tensor([[1.0], [2.0]]), [0, 2], 2)


def test_segment_mean_backward_divides_by_segment_size():
    rng = np.random.default_rng(1)
    vals = rng.standard_normal((3, 2))
    w = rng.standard_normal((2, 2))
    build = lambda v: tc.sum_all(tc.mul(tc.segment_mean(v, [1, 0, 1], 2), Tensor(w)))
    check_against_fd(build, [vals])
    (g,) = autodiff_grads(build, [vals])
    np.testing.assert_allclose(g, [w[1] / 2, w[0], w[1] / 2])


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.recording():
        y = tc.scale(x, 2.0)
        with pytest.raises(tc.ContractError):
            tc.backward(y)


def test_backward_requires_active_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.recording():
        y = tc.sum_all(x)
    with pytest.raises(tc.ContractError):
        tc.backward(y)


def test_no_tape_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tc.sum_all(x)
    assert y.tape_id is None and not y.requires_grad


def test_tape_records_parents_before_children():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with tc.recording() as tape:
        y = tc.relu(tc.matmul(x, x))
        tc.sum_all(tc.add(y, y))
    for node in tape.nodes:
        for p in node._parents:
            if p._backward is not None:
                assert p._index < node._index


def test_reused_node_gradient_accumulates():
    (g,) = autodiff_grads(lambda x: tc.sum_all(tc.mul(x, x)), [np.array([1.0, -3.0])])
    np.testing.assert_allclose(g, [2.0, -6.0])


def test_bmv_repeated_use_matches_fd():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((4, 3, 3))
    v = rng.standard_normal((4, 3))

    def build(m, x):
        y = tc.bmv(m, x)
        z = tc.bmv(m, tc.relu(y))
        return tc.sum_all(tc.mul(z, z))

    check_against_fd(build, [M, v])


def test_linear_and_take_rows_match_fd():
    rng = np.random.default_rng(3)
    X, W, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    idx = [0, 4, 4, 2, 1, 0]

    def build(x, w, bb):
        h = tc.take_rows(tc.linear(x, w, bb), idx)
        return tc.sum_all(tc.mul(h, h))

    check_against_fd(build, [X, W, b])


shapes = st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8))


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_primitives_match_finite_differences(shape, seed):
    m, k, n = shape
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, k))
    B = rng.standard_normal((k, n))
    C = rng.standard_normal((m, n))
    seg = rng.integers(0, 3, size=m)

    def build(a, b, c):
        h = tc.add(tc.matmul(a, b), tc.scale(c, 0.5))
        h = tc.mul(tc.relu(h), c)
        return tc.sum_all(tc.segment_mean(h, seg, 3))

    # keep relu inputs away from the kink so the finite difference is smooth
    pre = A @ B + 0.5 * C
    C = np.where(np.abs(pre) < 1e-3, C + 1e-2, C)
    check_against_fd(build, [A, B, C], tol=1e-5)


def test_forward_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        with tc.recording():
            y = tc.segment_mean(tc.relu(tc.matmul(x, w)), [0, 1, 1, 2, 2, 2], 3)
            loss = tc.sum_all(tc.mul(y, y))
            tc.backward(loss)
        return y.data.copy(), w.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 10), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_segment_mean_equals_row_normalised_adjacency(n, e, seed):
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n, e)
    dst = rng.integers(0, n, e)
    v = rng.standard_normal((n, 2))
    out = tc.segment_mean(tc.take_rows(Tensor(v), src), dst, n).data
    A = np.zeros((n, n))
    for i, j in zip(src, dst):
        A[j, i] += 1.0
    deg = A.sum(axis=1, keepdims=True)
    A = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
    np.testing.assert_allclose(out, A @ v, atol=1e-12, rtol=0)


def test_row_outer_and_permute_match_fd():
    rng = np.random.default_rng(4)
    A, B = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    M = rng.standard_normal((2, 3, 4))

    def build(a, b, m):
        o = tc.row_outer(a, b)
        p = tc.reshape(tc.permute(m, (1, 2, 0)), (12, 2))
        return tc.sum_all(tc.mul(o, o)) + tc.sum_all(tc.mul(p, p))

    check_against_fd(build, [A, B, M])
    np.testing.assert_array_equal(tc.row_outer(Tensor(A), Tensor(B)).data,
                                  np.einsum("ep,eq->epq", A, B).reshape(5, 6))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 25), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**31 - 1))
def test_fused_outer_mean_equals_composition(n, e, p, q, seed):
    rng = np.random.default_rng(seed)
    H, V = rng.standard_normal((e, p)), rng.standard_normal((n, q))
    src, dst = rng.integers(0, n, e), rng.integers(0, n, e)
    G = rng.standard_normal((n, p * q))

    def run(f):
        h, v = Tensor(H.copy(), True), Tensor(V.copy(), True)
        with tc.recording():
            out = f(h, v)
            tc.backward(tc.sum_all(tc.mul(out, Tensor(G))))
        return out.data, h.grad, v.grad

    fused = run(lambda h, v: tc.segment_outer_mean(h, v, src, dst, n))
    plain = run(lambda h, v: tc.segment_mean(tc.row_outer(h, tc.take_rows(v, src)), dst, n))
    for x, y in zip(fused, plain):
        np.testing.assert_allclose(x, y, atol=1e-12, rtol=0)


def test_fused_outer_mean_matches_fd():
    rng = np.random.default_rng(6)
    H, V = rng.standard_normal((7, 3)), rng.standard_normal((4, 2))
    src, dst = [0, 1, 1, 3, 2, 0, 3], [0, 0, 2, 2, 2, 3, 3]
    W = rng.standard_normal((4, 6))
    build = lambda h, v: tc.sum_all(tc.mul(tc.relu(tc.segment_outer_mean(h, v, src, dst, 4)),
                                           Tensor(W)))
    check_against_fd(build, [H, V])
