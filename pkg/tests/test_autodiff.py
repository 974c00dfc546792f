import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poq import autodiff as ad
from poq.autodiff import DimensionError, NonFiniteError, Tensor, gradcheck, parameter
from poq.optim import SGD, Adam, MissingGradError


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        out = ad.matmul(Tensor(a.astype(np.float32)), Tensor(b.astype(np.float32)))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31))
    def test_oracle_float32_up_to_64(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, size=(m, k)).astype(np.float32)
        b = rng.uniform(-1, 1, size=(k, n)).astype(np.float32)
        out = ad.matmul(Tensor(a), Tensor(b)).data
        ref = naive_matmul(a.astype(np.float64), b.astype(np.float64))
        # float32 accumulation error grows with k; scale the tolerance by sqrt(k)
        np.testing.assert_allclose(out, ref, atol=1e-6 * max(1, np.sqrt(k)) * 4)
        np.testing.assert_allclose(ad.matmul(Tensor(np.eye(m, dtype=np.float32)), Tensor(a)).data, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(1)
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.normal(size=(4, 2)))
        dc = rng.normal(size=(3, 2))
        ad.matmul(a, b).backward(dc)
        np.testing.assert_allclose(a.grad, dc @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ dc)

    def test_batched_shared_weight(self):
        rng = np.random.default_rng(2)
        x = parameter(rng.normal(size=(3, 5, 4)))
        w = parameter(rng.normal(size=(4, 2)))
        assert gradcheck(lambda: ad.sum_(ad.matmul(x, w) * ad.matmul(x, w)), [x, w]) < 1e-6


class TestSoftmax:
    def test_uniform_on_zeros(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor(np.zeros((1, 3)))).data, [[1 / 3] * 3],
                                   rtol=1e-6)

    def test_shift_invariance(self):
        x = np.array([[0.3, -1.2, 2.0]])
        a = ad.softmax_rows(Tensor(x)).data
        b = ad.softmax_rows(Tensor(x + 17.5)).data
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_two_entries(self):
        e = np.e
        out = ad.softmax_rows(Tensor(np.array([[1.0, 0.0]]))).data
        np.testing.assert_allclose(out, [[e / (e + 1), 1 / (e + 1)]], rtol=1e-6)
        np.testing.assert_allclose(out, [[0.7311, 0.2689]], atol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_rows_sum_to_one(self, m, n, seed):
        x = np.random.default_rng(seed).normal(scale=10, size=(m, n)).astype(np.float32)
        s = ad.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
        assert (s >= 0).all() and (s <= 1).all()

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.softmax_rows(Tensor(np.array([[np.nan, 0.0]])))


class TestLayerNorm:
    def test_constant_row(self):
        out = ad.layer_norm(Tensor(np.full((1, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_unit_row(self):
        out = ad.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_zero_gain_gives_bias(self):
        bias = np.array([0.5, -2.0, 3.0])
        x = np.random.default_rng(0).normal(size=(4, 3))
        out = ad.layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (4, 3)))

    def test_single_feature_rejected(self):
        with pytest.raises(DimensionError):
            ad.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))

    def test_eps_inside_sqrt(self):
        x = np.array([[0.0, 2e-3]])
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out, expected, rtol=1e-10)


class TestBackward:
    def test_sum_gives_ones(self):
        w = parameter(np.arange(5.0))
        ad.sum_(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones(5))

    def test_square_gives_2w(self):
        w = parameter(np.array([1.0, -2.0, 3.5]))
        ad.sum_(w * w).backward()
        np.testing.assert_array_equal(w.grad, 2 * w.data)

    def test_accumulates_until_zeroed(self):
        w = parameter(np.array([1.0, 2.0]))
        ad.sum_(w * w).backward()
        ad.sum_(w * w).backward()
        np.testing.assert_array_equal(w.grad, 4 * w.data)
        ad.zero_grads([w])
        assert w.grad is None

    def test_non_scalar_rejected(self):
        w = parameter(np.ones(3))
        with pytest.raises(DimensionError):
            (w * 2.0).backward()

    def test_shared_subexpression(self):
        w = parameter(np.array([0.5, 1.5]))
        y = w * w
        ad.sum_(y + y * w).backward()
        np.testing.assert_allclose(w.grad, 2 * w.data + 3 * w.data ** 2)

    def test_no_grad_records_nothing(self):
        w = parameter(np.ones(2))
        with ad.no_grad():
            y = w * 3.0
        assert not y.requires_grad and y._parents == ()

    def test_scalar_constants_keep_dtype(self):
        w = parameter(np.ones(3, dtype=np.float32))
        y = (w * np.float64(0.5) + 1) / 2.0 - 1.0
        assert y.dtype == np.float32


def _composite_graphs(rng):
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 5)))
    g = parameter(rng.normal(size=5))
    beta = parameter(rng.normal(size=5))
    yield "matmul", (lambda: ad.sum_(ad.matmul(a, b) * ad.matmul(a, b))), [a, b]
    yield "softmax", (lambda: ad.sum_(ad.softmax(ad.matmul(a, b)) * Tensor(np.arange(5.0)))), [a, b]
    yield "log_softmax", (lambda: ad.sum_(ad.log_softmax(ad.matmul(a, b)) * Tensor(np.arange(5.0)))), [a, b]
    ln = lambda: ad.layer_norm(ad.matmul(a, b), g, beta)  # noqa: E731
    yield "layer_norm", (lambda: ad.sum_(ln() * ln() * Tensor(np.arange(5.0)))), [a, b, g, beta]
    yield "relu", (lambda: ad.sum_(ad.relu(ad.matmul(a, b)) * ad.matmul(a, b))), [a, b]
    mix = Tensor(rng.normal(size=(3, 5)))
    yield "reshape_transpose", (lambda: ad.sum_(ad.transpose(ad.reshape(ad.matmul(a, b), (5, 3)))
                                                 * mix)), [a, b]
    yield "broadcast_div", (lambda: ad.sum_(ad.div(ad.matmul(a, b), ad.exp(g) + 1.0))), [a, b, g]
    yield "mean_log", (lambda: ad.mean(ad.log(ad.exp(ad.matmul(a, b)) + 1.0))), [a, b]


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_ops(seed):
    rng = np.random.default_rng(seed)
    for name, f, params in _composite_graphs(rng):
        err = gradcheck(f, params, step=1e-6)
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


class TestOptimizers:
    def test_sgd_plain_step(self):
        w = parameter(np.array([1.0]))
        w.grad = np.array([1.0])
        SGD([w], lr=0.1, momentum=0.0).step()
        np.testing.assert_allclose(w.data, [0.9])

    def test_sgd_zero_gradient_no_move(self):
        w = parameter(np.array([1.0, -3.0]))
        opt = SGD([w], lr=0.1, momentum=0.9)
        w.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -3.0])
        assert opt.step_count == 1

    def test_sgd_momentum_recurrence(self):
        w = parameter(np.array([0.0]))
        opt = SGD([w], lr=0.5, momentum=0.9)
        for _ in range(2):
            w.grad = np.array([1.0])
            opt.step()
        # buf: 1 then 1.9; w: -0.5 then -0.5 - 0.95
        np.testing.assert_allclose(w.data, [-1.45])

    def test_adam_first_step_is_lr(self):
        w = parameter(np.array([2.0, -1.0]))
        g = np.array([0.3, -4.0])
        w.grad = g.copy()
        Adam([w], lr=1e-4).step()
        # bias-corrected m = g, v = g^2, so the step is lr * g / (|g| + eps)
        expected = np.array([2.0, -1.0]) - 1e-4 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w.data, expected, rtol=1e-12)
        np.testing.assert_allclose(np.abs(w.data - [2.0, -1.0]), 1e-4, rtol=1e-6)

    def test_missing_grad_names_parameter(self):
        w = parameter(np.ones(2), name="head.weight")
        with pytest.raises(MissingGradError, match="head.weight"):
            Adam([w]).step()

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError):
            SGD([parameter(np.ones(1))], lr=0.0)

    def test_moment_buffers_match_shapes(self):
        ps = [parameter(np.ones((2, 3))), parameter(np.ones(4))]
        opt = Adam(ps)
        assert [m.shape for m in opt.m] == [(2, 3), (4,)]
        assert [v.shape for v in opt.v] == [(2, 3), (4,)]
