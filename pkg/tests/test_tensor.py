"""Unit tests for the autodiff tensor engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from rostfine import tensor as tz
from rostfine.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    concat,
    grad_check,
    layer_norm,
    linear,
    softmax,
    tile_rows,
    topo_order,
)


def randn(rng, *shape):
    return rng.standard_normal(shape)


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.arange(9.0).reshape(3, 3))
    eye = Tensor(np.eye(3))
    assert_allclose((eye @ a).data, a.data)


def test_matmul_zero():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    z = Tensor(np.zeros((3, 2)))
    assert_allclose((a @ z).data, np.zeros((2, 2)))


def test_matmul_hand_case():
    # triple-loop reference on the 2x2 case
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    expected = [[0.0, 0.0], [0.0, 0.0]]
    for i in range(2):
        for j in range(2):
            for t in range(2):
                expected[i][j] += a[i][t] * b[t][j]
    assert expected == [[19.0, 22.0], [43.0, 50.0]]
    got = Tensor(a) @ Tensor(b)
    assert_allclose(got.data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_matmul_associativity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b, c = (randn(rng, 4, 4) for _ in range(3))
        left = (Tensor(a) @ Tensor(b)) @ Tensor(c)
        right = Tensor(a) @ (Tensor(b) @ Tensor(c))
        assert_allclose(left.data, right.data, atol=1e-9)


def test_batched_matmul_matches_loop():
    rng = np.random.default_rng(8)
    a = randn(rng, 5, 3, 4)
    b = randn(rng, 5, 4, 2)
    got = (Tensor(a) @ Tensor(b)).data
    for i in range(5):
        assert_allclose(got[i], a[i] @ b[i])


# -- softmax ---------------------------------------------------------------


def test_softmax_constant_is_uniform():
    y = softmax(Tensor(np.full(7, 3.25)))
    assert_allclose(y.data, np.full(7, 1 / 7), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-30, 30))
def test_softmax_shift_invariance(xs, c):
    x = np.asarray(xs)
    assert_allclose(
        softmax(Tensor(x)).data, softmax(Tensor(x + c)).data, atol=1e-12
    )


def test_softmax_closed_form():
    y = softmax(Tensor([0.0, np.log(2.0)]))
    assert_allclose(y.data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_simplex():
    rng = np.random.default_rng(3)
    for _ in range(50):
        y = softmax(Tensor(randn(rng, 6, 9) * 10), axis=-1).data
        assert np.all(y >= 0)
        assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_empty_axis_errors():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((3, 0))), axis=-1)


# -- layer norm --------------------------------------------------------------


def _ln_params(d):
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


def test_layer_norm_constant_row():
    g, b = _ln_params(5)
    out = layer_norm(Tensor(np.full((2, 5), 4.0)), g, b)
    assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_zero_mean():
    rng = np.random.default_rng(11)
    g, b = _ln_params(16)
    out = layer_norm(Tensor(randn(rng, 4, 16)), g, b)
    assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)


def test_layer_norm_hand_case():
    # row [1, 3]: mean 2, population std 1
    g, b = _ln_params(2)
    out = layer_norm(Tensor([[1.0, 3.0]]), g, b, eps=0.0)
    assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


# -- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert_allclose(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_identity():
    rng = np.random.default_rng(2)
    x = Tensor(randn(rng, 8), requires_grad=True)
    ((x * x).sum() * 0.5).backward()
    assert_allclose(x.grad, x.data, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_off_path_params_get_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    grads = tz.gradients((x * 3.0).sum(), [x, y])
    assert_allclose(grads[0], 3.0)
    assert_allclose(grads[1], 0.0)


def test_loss_seed_gradient_is_one():
    x = Tensor(2.0, requires_grad=True)
    out = x * 1.0
    out.backward()
    assert_allclose(out.grad, 1.0)


def test_tape_is_topologically_ordered_and_unique():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = y + x          # diamond: x feeds y and z
    loss = (z * y).sum()
    tape = topo_order(loss)
    assert len({id(n) for n in tape}) == len(tape)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_diamond_graph_accumulates_once():
    # f = (2x) * (2x + x) = 6x^2, f' = 12x
    x = Tensor(1.5, requires_grad=True)
    y = x * 2.0
    (y * (y + x)).backward()
    assert_allclose(x.grad, 12.0 * 1.5, atol=1e-12)


# -- strict shapes ------------------------------------------------------------


def test_elementwise_rejects_shape_mismatch():
    with pytest.raises(ShapeError, match=r"\(2,\) vs \(3,\)"):
        Tensor(np.ones(2)) + Tensor(np.ones(3))


def test_no_implicit_row_broadcast():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) * Tensor(np.ones(3))


def test_scalar_with_tensor_is_allowed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ((x * 3.0).sum()).backward()
    assert_allclose(x.grad, 3.0)


def test_scalar_tensor_operand_gradient():
    s = Tensor(2.0, requires_grad=True)
    x = Tensor(np.arange(4.0))
    ((x * s).sum()).backward()
    assert_allclose(s.grad, 6.0)


# -- checked mode ---------------------------------------------------------------


def test_checked_mode_catches_nan():
    with tz.checked():
        with pytest.raises(NonFiniteError):
            Tensor([-1.0]).log()
    # outside the context the same op passes silently
    assert np.isnan(Tensor([-1.0]).log().data).all()


# -- gradient checking -------------------------------------------------------


def test_grad_check_quadratic_is_exact():
    rng = np.random.default_rng(5)
    a = Tensor(randn(rng, 4, 4))
    x = Tensor(randn(rng, 4, 1), requires_grad=True, name="x")

    def f():
        return (x.transpose((1, 0)) @ (a @ x)).reshape(())

    assert grad_check(f, [x], h=1e-5) < 1e-10


def test_grad_check_softmax_js_composite():
    rng = np.random.default_rng(6)
    logits = Tensor(randn(rng, 5), requires_grad=True, name="logits")
    target = Tensor(np.array([0.1, 0.2, 0.4, 0.2, 0.1]))

    def f():
        p = softmax(logits)
        eps = 1e-8
        pe = (p + eps) / (1.0 + 5 * eps)
        qe = (target + eps) / (1.0 + 5 * eps)
        m = (pe + qe) * 0.5
        kl_pm = (pe * (pe.log() - m.log())).sum()
        kl_qm = (qe * (qe.log() - m.log())).sum()
        return kl_pm * 0.5 + kl_qm * 0.5

    assert grad_check(f, [logits], h=1e-5) < 1e-5


def test_grad_check_attention_block_vs_finite_differences():
    rng = np.random.default_rng(12)
    d = 6
    x = Tensor(randn(rng, 4, d))
    wq = Tensor(randn(rng, d, d) * 0.3, requires_grad=True, name="wq")
    wv = Tensor(randn(rng, d, d) * 0.3, requires_grad=True, name="wv")
    b = Tensor(np.zeros(d), requires_grad=True, name="b")

    def f():
        q = linear(x, wq, b)
        att = softmax(q @ x.transpose((1, 0)), axis=-1)
        out = att @ linear(x, wv, b)
        return (out * out).mean()

    assert grad_check(f, [wq, wv, b], h=1e-5) < 1e-6


def test_grad_check_reports_nonfinite_parameter():
    x = Tensor(np.array([1.0]), requires_grad=True, name="theta")

    def f():
        return (x - 1.0).log().sum()  # log(0) at the unperturbed point

    with pytest.raises(NonFiniteError, match="theta"):
        grad_check(f, [x], h=1e-5)


def test_grad_check_rejects_bad_step():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x.sum(), [x], h=1e-2)


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b,
    "exp": lambda a, b: (a * 0.3).exp() + b,
    "log": lambda a, b: (a * a + 1.0).log() * b,
    "sqrt": lambda a, b: (a * a + b * b + 0.5).sqrt(),
    "tanh": lambda a, b: a.tanh() * b,
    "gelu": lambda a, b: a.gelu() + b,
    "softmax": lambda a, b: softmax(a, axis=-1) * b,
    "layer_norm": lambda a, b: layer_norm(a, Tensor(np.ones(4)), Tensor(np.zeros(4))) * b,
    "mean": lambda a, b: (a.mean(axis=0, keepdims=True) @ b.mean(axis=1, keepdims=True)),
    "concat": lambda a, b: concat([a, b], axis=1),
    "slice": lambda a, b: a.slice_along(1, 1, 3) * b.slice_along(1, 0, 2),
    "gather": lambda a, b: a.gather_rows(np.array([3, 1, 1, 0])) * b,
    "tile": lambda a, b: tile_rows(a.slice_along(0, 0, 1), 4) * b,
    "reshape": lambda a, b: (a.reshape((2, 8)) @ b.reshape((8, 2))),
    "transpose": lambda a, b: a.transpose((1, 0)) @ b.transpose((1, 0)),
    "pow": lambda a, b: (a * a + 1.0) ** 1.5 + b,
    "abs": lambda a, b: (a + 0.3).abs() * b,
    "neg": lambda a, b: -a + b,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_gradient_matches_central_differences(name):
    # 100 random draws spread over the op table; ~5 seeds per op
    op = OPS[name]
    for seed in range(5):
        rng = np.random.default_rng(hash(name) % 10_000 + seed)
        a = Tensor(randn(rng, 4, 4), requires_grad=True, name="a")
        b = Tensor(randn(rng, 4, 4), requires_grad=True, name="b")

        def f():
            out = op(a, b)
            return (out * out).mean() if out.size != 1 else out.reshape(())

        assert grad_check(f, [a, b], h=1e-5) < 1e-4, f"op {name} seed {seed}"


# -- misc ------------------------------------------------------------------------


def test_gather_rows_duplicates_accumulate():
    v = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    out = v.gather_rows(np.array([1, 1, 2]))
    out.sum().backward()
    assert_allclose(v.grad, [[0, 0], [2, 2], [1, 1], [0, 0]])


def test_tile_rows_requires_unit_leading_dim():
    with pytest.raises(ShapeError):
        tile_rows(Tensor(np.ones((2, 3))), 4)


def test_float32_dtype_is_supported():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    (x.sum() * 2.0).backward()
    assert x.data.dtype == np.float32
    assert_allclose(x.grad, 2.0)
