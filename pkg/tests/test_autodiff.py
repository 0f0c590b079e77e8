"""Numeric core tests.

Oracles used here are deliberately independent of the implementation:
matmul is checked against an explicit triple loop, softmax against a
scalar exp/sum evaluation, and every backward rule against central
finite differences computed in float64.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from flatdst import autodiff as ad
from flatdst.autodiff import (
    NEG_INF,
    Parameter,
    Tensor,
    backward,
    grad_check,
    no_grad,
    precision,
)
from flatdst.errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    InvalidMaskError,
)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Schoolbook matrix product, no numpy matmul involved."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_row_oracle(row: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Scalar exp/sum softmax over the visible entries of one row."""
    exps = [math.exp(float(x)) if v else 0.0 for x, v in zip(row, visible)]
    total = sum(exps)
    return np.array([e / total for e in exps])


def fd_grad(loss_fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = loss_fn()
        flat[i] = saved - eps
        f_minus = loss_fn()
        flat[i] = saved
        gf[i] = (f_plus - f_minus) / (2 * eps)
    return g


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    eye = Tensor(np.eye(3))
    npt.assert_array_equal(ad.matmul(a, eye).data, a.data)


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    npt.assert_allclose(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    with precision("float64"):
        for _ in range(5):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 2))
            got = ad.matmul(Tensor(a), Tensor(b)).data
            npt.assert_allclose(got, matmul_oracle(a, b), rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError, match=r"\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_transpose_requires_matrix():
    with pytest.raises(DimensionError):
        ad.transpose(Tensor(np.zeros(3)))


def test_gather_rows_forward():
    table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3))
    out = ad.gather_rows(table, [2, 0, 2])
    npt.assert_array_equal(out.data, table.data[[2, 0, 2]])


def test_concat_roundtrip():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.zeros((1, 3)))
    out = ad.concat_rows([a, b])
    assert out.shape == (3, 3)
    c = ad.concat_cols([Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 1)))])
    assert c.shape == (2, 3)


def test_gelu_known_points():
    x = Tensor(np.array([0.0, 100.0, -100.0]))
    out = ad.gelu(x).data
    npt.assert_allclose(out, [0.0, 100.0, 0.0], atol=1e-6)


# ---------------------------------------------------------------------------
# Masked softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_when_unmasked():
    logits = Tensor(np.zeros((1, 4)))
    mask = np.zeros((1, 4))
    npt.assert_allclose(ad.masked_softmax(logits, mask).data, np.full((1, 4), 0.25))


def test_softmax_single_visible_entry():
    logits = Tensor(np.array([[3.0, -1.0, 2.0]]))
    mask = np.array([[NEG_INF, NEG_INF, 0.0]])
    out = ad.masked_softmax(logits, mask).data
    npt.assert_array_equal(out, [[0.0, 0.0, 1.0]])


def test_softmax_masked_entries_exactly_zero():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((5, 7)))
    mask = np.where(rng.random((5, 7)) < 0.4, NEG_INF, 0.0)
    mask[:, 0] = 0.0  # keep every row valid
    p = ad.masked_softmax(logits, mask).data
    assert (p[mask != 0] == 0.0).all()
    npt.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)


def test_softmax_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    with precision("float64"):
        logits = rng.standard_normal((4, 6))
        visible = rng.random((4, 6)) < 0.7
        visible[:, 2] = True
        mask = np.where(visible, 0.0, NEG_INF)
        p = ad.masked_softmax(Tensor(logits), mask).data
        for i in range(4):
            npt.assert_allclose(p[i], softmax_row_oracle(logits[i], visible[i]), rtol=1e-10)


def test_softmax_fully_masked_row_rejected():
    logits = Tensor(np.zeros((2, 3)))
    mask = np.array([[0.0, 0.0, 0.0], [NEG_INF, NEG_INF, NEG_INF]])
    with pytest.raises(InvalidMaskError, match="row 1"):
        ad.masked_softmax(logits, mask)


def test_softmax_shifts_are_stable():
    # Huge logits must not overflow thanks to the row-max subtraction.
    with precision("float64"):
        logits = Tensor(np.array([[1e4, 1e4 + 1.0]]))
        p = ad.masked_softmax(logits, np.zeros((1, 2))).data
    npt.assert_allclose(p, [[1 / (1 + math.e), math.e / (1 + math.e)]], rtol=1e-10)


# ---------------------------------------------------------------------------
# Layer norm
# ---------------------------------------------------------------------------


def test_layer_norm_constant_row_gives_bias():
    x = Tensor(np.full((2, 4), 3.0))
    gain = Tensor(np.ones(4))
    bias = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    out = ad.layer_norm(x, gain, bias).data
    npt.assert_allclose(out, np.tile(bias.data, (2, 1)), atol=1e-3)


def test_layer_norm_output_stats():
    rng = np.random.default_rng(5)
    with precision("float64"):
        x = Tensor(rng.standard_normal((6, 16)) * 4 + 2)
        out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        npt.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        npt.assert_allclose(out.std(axis=1), 1.0, atol=1e-4)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def test_backward_quadratic():
    with precision("float64"):
        x = Tensor(np.array([[1.0, 2.0]]))
        loss = ad.sum_all(ad.mul(x, x))
        backward(loss)
        npt.assert_allclose(x.grad, [[2.0, 4.0]])


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(ad.add(x, x))


def test_backward_accumulates_until_zeroed():
    with precision("float64"):
        p = Parameter("w", np.array([[1.0, 2.0]]))
        for _ in range(3):
            backward(ad.sum_all(ad.mul(p.tensor, p.tensor)))
        npt.assert_allclose(p.grad, [[6.0, 12.0]])
        p.zero_grad()
        npt.assert_array_equal(p.grad, [[0.0, 0.0]])


def test_backward_shared_subexpression():
    # y = x*x used twice; gradient must combine both paths.
    with precision("float64"):
        x = Tensor(np.array([[3.0]]))
        y = ad.mul(x, x)
        loss = ad.sum_all(ad.add(y, y))
        backward(loss)
        npt.assert_allclose(x.grad, [[12.0]])


def test_untouched_parameter_keeps_zero_grad():
    p = Parameter("unused", np.ones((2, 2)))
    q = Parameter("used", np.ones((2, 2)))
    backward(ad.sum_all(q.tensor))
    npt.assert_array_equal(p.grad, np.zeros((2, 2)))
    npt.assert_array_equal(q.grad, np.ones((2, 2)))


@pytest.mark.parametrize("op_name", ["tanh", "gelu"])
def test_elementwise_backward_matches_fd(op_name):
    op = getattr(ad, op_name)
    rng = np.random.default_rng(13)
    with precision("float64"):
        x = Tensor(rng.standard_normal((3, 5)))
        backward(ad.sum_all(op(x)))

        def f():
            with no_grad():
                return float(ad.sum_all(op(x)).data)

        npt.assert_allclose(x.grad, fd_grad(f, x.data), atol=1e-8)


def test_gather_rows_backward_scatter_adds():
    with precision("float64"):
        table = Tensor(np.zeros((4, 2)))
        out = ad.gather_rows(table, [1, 1, 3])
        backward(ad.sum_all(out))
        npt.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_layer_norm_backward_matches_fd():
    rng = np.random.default_rng(17)
    with precision("float64"):
        x = Tensor(rng.standard_normal((3, 8)))
        gain = Tensor(rng.standard_normal(8))
        bias = Tensor(rng.standard_normal(8))
        backward(ad.sum_all(ad.tanh(ad.layer_norm(x, gain, bias))))

        def make_f():
            def f():
                with no_grad():
                    return float(ad.sum_all(ad.tanh(ad.layer_norm(x, gain, bias))).data)
            return f

        for t in (x, gain, bias):
            npt.assert_allclose(t.grad, fd_grad(make_f(), t.data), atol=1e-7)


def test_softmax_backward_matches_fd():
    rng = np.random.default_rng(19)
    with precision("float64"):
        logits = Tensor(rng.standard_normal((3, 5)))
        mask = np.where(rng.random((3, 5)) < 0.3, NEG_INF, 0.0)
        mask[:, 1] = 0.0
        weights = rng.standard_normal((3, 5))  # mix rows so the loss sees each prob
        backward(ad.sum_all(ad.mul(ad.masked_softmax(logits, mask), Tensor(weights))))

        def f():
            with no_grad():
                return float(
                    ad.sum_all(ad.mul(ad.masked_softmax(logits, mask), Tensor(weights))).data
                )

        npt.assert_allclose(logits.grad, fd_grad(f, logits.data), atol=1e-8)


def test_cross_entropy_backward_matches_fd():
    rng = np.random.default_rng(23)
    with precision("float64"):
        logits = Tensor(rng.standard_normal((4, 7)))
        targets = np.array([0, 3, 6, 3])
        backward(ad.cross_entropy_mean(logits, targets))

        def f():
            with no_grad():
                return float(ad.cross_entropy_mean(logits, targets).data)

        npt.assert_allclose(logits.grad, fd_grad(f, logits.data), atol=1e-8)


def test_gradient_additivity_of_separate_backwards():
    # backward(sop + vg) must equal backward(sop) then backward(vg).
    rng = np.random.default_rng(29)
    with precision("float64"):
        w = rng.standard_normal((4, 4))
        x = rng.standard_normal((2, 4))

        def losses(param):
            h = ad.matmul(Tensor(x), param.tensor)
            return ad.sum_all(ad.tanh(h)), ad.mean_all(ad.mul(h, h))

        p1 = Parameter("w", w.copy())
        a, b = losses(p1)
        backward(ad.add(a, b))

        p2 = Parameter("w", w.copy())
        a, b = losses(p2)
        backward(a)
        backward(b)

        npt.assert_allclose(p1.grad, p2.grad, atol=1e-12)


# ---------------------------------------------------------------------------
# no_grad and precision switches
# ---------------------------------------------------------------------------


def test_no_grad_records_no_nodes():
    with no_grad():
        out = ad.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
    assert out.node is None


def test_precision_switch_is_scoped():
    assert ad.active_dtype() == np.float32
    with precision("float64"):
        assert Tensor(np.zeros(1)).data.dtype == np.float64
    assert Tensor(np.zeros(1)).data.dtype == np.float32


def test_unknown_precision_rejected():
    with pytest.raises(ContractError):
        ad.set_precision("float16")


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------


def test_grad_check_quadratic_is_tight():
    with precision("float64"):
        p = Parameter("w", np.array([[0.5, -1.5], [2.0, 0.25]]))

        def loss_fn():
            return ad.sum_all(ad.mul(p.tensor, p.tensor))

        report = grad_check(loss_fn, [p], samples_per_param=None)
        assert report.max_rel_error < 1e-7


def test_grad_check_small_attention_stack():
    rng = np.random.default_rng(31)
    with precision("float64"):
        wq = Parameter("wq", rng.standard_normal((4, 4)) * 0.3)
        wk = Parameter("wk", rng.standard_normal((4, 4)) * 0.3)
        wv = Parameter("wv", rng.standard_normal((4, 4)) * 0.3)
        x = rng.standard_normal((3, 4))
        mask = np.array([[0.0, NEG_INF, NEG_INF],
                         [0.0, 0.0, NEG_INF],
                         [0.0, 0.0, 0.0]])

        def loss_fn():
            xt = Tensor(x)
            q = ad.matmul(xt, wq.tensor)
            k = ad.matmul(xt, wk.tensor)
            v = ad.matmul(xt, wv.tensor)
            att = ad.masked_softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 0.5), mask)
            return ad.mean_all(ad.tanh(ad.matmul(att, v)))

        report = grad_check(loss_fn, [wq, wk, wv], samples_per_param=None)
        assert report.max_rel_error < 1e-4
        assert set(report.per_param) == {"wq", "wk", "wv"}


def test_grad_check_skips_frozen_params():
    with precision("float64"):
        p = Parameter("w", np.ones((2, 2)))
        frozen = Parameter("frozen", np.ones((2, 2)), trainable=False)

        def loss_fn():
            return ad.sum_all(ad.mul(p.tensor, frozen.tensor))

        report = grad_check(loss_fn, [p, frozen])
        assert "frozen" not in report.per_param


def test_grad_check_rejects_nondeterministic_loss():
    with precision("float64"):
        p = Parameter("w", np.ones((1, 1)))
        state = {"calls": 0}

        def loss_fn():
            state["calls"] += 1
            return ad.scale(ad.sum_all(p.tensor), float(state["calls"]))

        with pytest.raises(DeterminismError):
            grad_check(loss_fn, [p])


def test_grad_check_eps_bounds():
    with precision("float64"):
        p = Parameter("w", np.ones((1, 1)))
        with pytest.raises(ContractError):
            grad_check(lambda: ad.sum_all(p.tensor), [p], eps=1e-3)


def test_grad_check_requires_float64():
    p = Parameter("w", np.ones((1, 1)))  # float32 under default precision
    with pytest.raises(ContractError, match="float64"):
        grad_check(lambda: ad.sum_all(p.tensor), [p])
