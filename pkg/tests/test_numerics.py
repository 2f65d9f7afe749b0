import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishy.errors import ContractViolation, FormatError, TrainingDivergence
from fishy.numerics import (
    AdamState,
    Mlp,
    adam_update,
    container_from_bytes,
    container_to_bytes,
    derive_rng,
    load_tensor,
    mlp_apply,
    mlp_grad,
    mlp_init,
    read_tensor,
    resize_bilinear,
    resize_bilinear_grad,
    resize_matrix,
    save_tensor,
    sigmoid,
    tensor_from_bytes,
    tensor_to_bytes,
)

from conftest import central_diff


def scalar_mlp(layers, x):
    """Independent scalar-by-scalar forward pass."""
    h = [float(v) for v in x]
    for li, (w, b) in enumerate(layers):
        out = []
        for j in range(w.shape[1]):
            acc = float(b[j])
            for i in range(w.shape[0]):
                acc += h[i] * float(w[i, j])
            out.append(math.tanh(acc) if li < len(layers) - 1 else acc)
        h = out
    return h


def test_mlp_zero_net_outputs_zero(rng):
    net = Mlp([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    assert np.array_equal(mlp_apply(net, rng.normal(size=(5, 3))), np.zeros((5, 2)))


def test_mlp_identity_layer():
    net = Mlp([(np.eye(2), np.zeros(2))])
    assert np.array_equal(mlp_apply(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_mlp_matches_scalar_oracle():
    net = mlp_init([2, 3, 2], derive_rng(7, "mlp"))
    x = np.array([0.5, -0.5])
    expected = scalar_mlp(net.layers, x)
    np.testing.assert_allclose(mlp_apply(net, x[None])[0], expected, rtol=0, atol=1e-14)


def test_mlp_dimension_mismatch():
    net = mlp_init([3, 2], derive_rng(0))
    with pytest.raises(ContractViolation):
        mlp_apply(net, np.zeros((1, 4)))


def test_mlp_layers_must_chain():
    with pytest.raises(ContractViolation):
        Mlp([(np.zeros((2, 3)), np.zeros(3)), (np.zeros((4, 1)), np.zeros(1))])


def test_mlp_grad_zero_upstream(rng):
    net = mlp_init([3, 4, 2], rng)
    gx, gp = mlp_grad(net, rng.normal(size=(5, 3)), np.zeros((5, 2)))
    assert not gx.any()
    assert all(not dw.any() and not db.any() for dw, db in gp)


def test_mlp_grad_linear_layer(rng):
    w = rng.normal(size=(3, 2))
    net = Mlp([(w, np.zeros(2))])
    up = rng.normal(size=(4, 2))
    gx, _ = mlp_grad(net, rng.normal(size=(4, 3)), up)
    np.testing.assert_allclose(gx, up @ w.T, atol=1e-15)


def test_mlp_grad_shape_mismatch(rng):
    net = mlp_init([3, 2], rng)
    with pytest.raises(ContractViolation):
        mlp_grad(net, np.zeros((2, 3)), np.zeros((2, 3)))


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(1, 4), min_size=1, max_size=3))
def test_mlp_grad_matches_finite_differences(seed, hidden):
    r = np.random.default_rng(seed)
    sizes = [int(r.integers(1, 5))] + hidden + [int(r.integers(1, 5))]
    net = mlp_init(sizes, r)
    net = Mlp([(w, r.normal(size=b.shape)) for w, b in net.layers])
    x = r.normal(size=(2, sizes[0]))
    up = r.normal(size=(2, sizes[-1]))
    gx, gp = mlp_grad(net, x, up)

    def f_x(xx):
        return float(np.sum(up * mlp_apply(net, xx)))

    assert _rel_err(gx, central_diff(f_x, x)) < 1e-5
    for li, (dw, db) in enumerate(gp):
        def f_w(ww, li=li):
            layers = list(net.layers)
            layers[li] = (ww, layers[li][1])
            return float(np.sum(up * mlp_apply(Mlp(layers), x)))

        def f_b(bb, li=li):
            layers = list(net.layers)
            layers[li] = (layers[li][0], bb)
            return float(np.sum(up * mlp_apply(Mlp(layers), x)))

        assert _rel_err(dw, central_diff(f_w, net.layers[li][0])) < 1e-5
        assert _rel_err(db, central_diff(f_b, net.layers[li][1])) < 1e-5


def test_mlp_determinism():
    a = mlp_init([4, 8, 3], derive_rng(3, "x"))
    b = mlp_init([4, 8, 3], derive_rng(3, "x"))
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    assert mlp_apply(a, x).tobytes() == mlp_apply(b, x).tobytes()


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    new, state = adam_update(p, [np.zeros(2)], AdamState.for_params(p), 0.1)
    assert np.array_equal(new[0], p[0])
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr():
    p = [np.array([0.3])]
    new, _ = adam_update(p, [np.array([2.5])], AdamState.for_params(p), 0.01)
    np.testing.assert_allclose(new[0], [0.3 - 0.01], atol=1e-9)


def scalar_adam(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(w)
    return trace


def test_adam_quadratic_matches_scalar_reference():
    p = [np.array([1.0])]
    state = AdamState.for_params(p)
    trace = []
    for _ in range(10):
        p, state = adam_update(p, [2.0 * p[0]], state, 0.1)
        trace.append(float(p[0][0]))
    ref = scalar_adam(1.0, 0.1, 10)
    np.testing.assert_allclose(trace, ref, rtol=0, atol=1e-14)
    assert all(abs(b) < abs(a) for a, b in zip([1.0] + trace, trace))
    assert state.step_count == 10


def test_adam_rejects_non_finite_gradient():
    p = [np.zeros(2)]
    with pytest.raises(TrainingDivergence):
        adam_update(p, [np.array([np.nan, 0.0])], AdamState.for_params(p), 0.1)


def test_adam_rejects_bad_lr():
    p = [np.zeros(1)]
    with pytest.raises(ContractViolation):
        adam_update(p, [np.zeros(1)], AdamState.for_params(p), 0.0)


def test_resize_identity_and_corners(rng):
    a = rng.normal(size=(5, 7, 2))
    np.testing.assert_array_equal(resize_bilinear(a, (5, 7)), a)
    cell = np.array([[1.0, 2.0], [3.0, 4.0]])
    up = resize_bilinear(cell, (4, 4))
    assert (up[0, 0], up[0, -1], up[-1, 0], up[-1, -1]) == (1.0, 2.0, 3.0, 4.0)


def test_resize_rows_sum_to_one():
    for n_in, n_out in [(1, 5), (3, 8), (8, 3), (7, 7)]:
        m = resize_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
        assert m.min() >= 0


def test_resize_grad_is_adjoint(rng):
    x = rng.normal(size=(3, 5))
    y = rng.normal(size=(7, 9))
    lhs = np.sum(resize_bilinear(x, (7, 9)) * y)
    rhs = np.sum(x * resize_bilinear_grad(y, (3, 5)))
    assert abs(lhs - rhs) < 1e-12


def test_sigmoid_strictly_inside_unit_interval():
    s = sigmoid(np.array([-1e6, -40.0, 0.0, 40.0, 1e6]))
    assert np.all((s > 0) & (s < 1))
    assert s[2] == 0.5


def test_derive_rng_streams_are_named():
    a = derive_rng(1, "a").random(3)
    assert np.array_equal(a, derive_rng(1, "a").random(3))
    assert not np.array_equal(a, derive_rng(1, "b").random(3))
    assert not np.array_equal(a, derive_rng(2, "a").random(3))


@pytest.mark.parametrize("dtype,tag", [(np.float32, 0), (np.float64, 1)])
def test_tensor_layout(dtype, tag):
    arr = np.arange(6, dtype=dtype).reshape(2, 3)
    data = tensor_to_bytes(arr)
    assert data[:4] == b"FBT1"
    assert data[4] == tag
    assert int.from_bytes(data[5:9], "little") == 2
    assert int.from_bytes(data[9:17], "little") == 2
    assert int.from_bytes(data[17:25], "little") == 3
    assert data[25:] == arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes()
    back = tensor_from_bytes(data)
    assert back.dtype == dtype and np.array_equal(back, arr)


def test_tensor_file_round_trip(tmp_path, rng):
    arr = rng.normal(size=(4, 2, 3))
    save_tensor(tmp_path / "x.fbt", arr)
    assert np.array_equal(load_tensor(tmp_path / "x.fbt"), arr)
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_tensor_rejects_garbage():
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"NOPE"))
    with pytest.raises(FormatError):
        tensor_from_bytes(tensor_to_bytes(np.zeros(10))[:-3])


def test_container_round_trip(rng):
    tensors = [rng.normal(size=(3, 2)), np.arange(4, dtype=np.float32)]
    header, back = container_from_bytes(container_to_bytes({"b": 1, "a": [1, 2]}, tensors))
    assert header == {"a": [1, 2], "b": 1}
    assert all(np.array_equal(x, y) and x.dtype == y.dtype for x, y in zip(tensors, back))
