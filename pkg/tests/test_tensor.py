import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmrifuse import tensor as tn
from fmrifuse.errors import ConfigError, ContractError, NonFiniteError, ShapeError
from fmrifuse.gradcheck import grad_check
from fmrifuse.tensor import Graph, Tensor, backward

from conftest import numeric_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        assert out.data.tolist() == [[1, 2], [3, 4]]

    def test_row_times_column(self):
        assert tn.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_matches_triple_loop(self, rng):
        # integer-valued entries keep every partial sum exact regardless of BLAS summation order
        a = rng.integers(-9, 10, size=(5, 7)).astype(float)
        b = rng.integers(-9, 10, size=(7, 3)).astype(float)
        np.testing.assert_array_equal(tn.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
    def test_associativity(self, m, k, n, q, seed):
        r = np.random.default_rng(seed)
        a, b, c = (Tensor(r.normal(size=s)) for s in [(m, k), (k, n), (n, q)])
        left = ((a @ b) @ c).data
        right = (a @ (b @ c)).data
        np.testing.assert_allclose(left, right, atol=1e-9, rtol=0)


class TestSoftmax:
    def test_symmetric_pair(self):
        assert tn.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_large_equal_logits(self):
        np.testing.assert_allclose(tn.softmax_rows(Tensor([[1000.0] * 3])).data, [[1 / 3] * 3], rtol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(4, 6))
        np.testing.assert_allclose(
            tn.softmax_rows(Tensor(x + 17.3)).data, tn.softmax_rows(Tensor(x)).data, atol=1e-15
        )

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        out = tn.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_monotone_within_row(self, rng):
        x = rng.normal(size=10)
        out = tn.softmax_rows(Tensor(x.reshape(1, -1))).data[0]
        assert np.array_equal(np.argsort(x), np.argsort(out))


class TestLayerNorm:
    def test_constant_row(self):
        out = tn.layer_norm(Tensor([[5.0] * 4]), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        assert np.all(np.abs(out.data) < 1e-3)

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal(size=6)
        out = tn.layer_norm(Tensor(rng.normal(size=(3, 6))), Tensor(np.zeros(6)), Tensor(beta), 1e-5)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (3, 6)))

    def test_two_point_standardization(self):
        out = tn.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            tn.layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)


class TestGelu:
    def test_zero(self):
        assert tn.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotes(self):
        out = tn.gelu(Tensor([10.0, -10.0])).data
        assert abs(out[0] - 10.0) < 1e-6
        assert abs(out[1]) < 1e-6

    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    def test_bounded_by_identity(self, x):
        assert np.all(np.abs(tn.gelu(Tensor(x)).data) <= np.abs(x) + 1e-12)


class TestDropout:
    def test_zero_rate_is_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 5)))
        np.testing.assert_array_equal(tn.dropout_apply(x, 0.0, rng, True).data, x.data)

    def test_inference_is_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 5)))
        np.testing.assert_array_equal(tn.dropout_apply(x, 0.5, rng, False).data, x.data)

    def test_zero_fraction(self):
        x = Tensor(np.ones(100_000))
        out = tn.dropout_apply(x, 0.5, np.random.default_rng(1), True).data
        assert abs(np.mean(out == 0) - 0.5) <= 0.01

    def test_survivors_scaled(self):
        out = tn.dropout_apply(Tensor(np.ones(1000)), 0.2, np.random.default_rng(0), True).data
        assert set(np.unique(out)) <= {0.0, 1.25}

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones(64))
        a = tn.dropout_apply(x, 0.3, np.random.default_rng(9), True).data
        b = tn.dropout_apply(x, 0.3, np.random.default_rng(9), True).data
        np.testing.assert_array_equal(a, b)

    def test_preserves_expectation(self):
        r = np.random.default_rng(4)
        x = Tensor(np.full(8, 2.5))
        copies = np.stack([tn.dropout_apply(x, 0.3, r, True).data for _ in range(10_000)])
        assert abs(copies.mean() - 2.5) <= 0.01 * 2.5

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_invalid_rate(self, rate, rng):
        with pytest.raises(ConfigError):
            tn.dropout_apply(Tensor([1.0]), rate, rng, True)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True, name="w")
        with Graph() as g:
            loss = w.sum()
        np.testing.assert_array_equal(backward(g, loss)["w"].data, [1, 1, 1, 1])

    def test_quadratic(self):
        w = Tensor([1.0, -2.0, 3.0], requires_grad=True, name="w")
        with Graph() as g:
            loss = (w * w).sum()
        np.testing.assert_array_equal(backward(g, loss)["w"].data, [2, -4, 6])

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        with Graph() as g:
            out = w * 2.0
        with pytest.raises(ContractError):
            backward(g, out)

    def test_untouched_leaf_gets_zeros(self):
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        u = Tensor([[3.0]], requires_grad=True, name="u")
        with Graph() as g:
            loss = w.sum()
        grads = backward(g, loss, {"w": w, "u": u})
        np.testing.assert_array_equal(grads["u"].data, [[0.0]])

    def test_graph_is_insertion_ordered(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as g:
            a = w * w
            b = a.sum()
        assert [n.op for n in g.nodes] == ["mul", "sum"]
        assert a.node_id == 0 and b.node_id == 1

    def test_no_recording_outside_graph(self):
        w = Tensor([1.0], requires_grad=True)
        out = w * 3.0
        assert out.node_id is None and not out.requires_grad

    def test_cross_entropy_softmax_matches_finite_differences(self, rng):
        W0 = rng.normal(size=(4, 5))
        x = rng.normal(size=(5, 1))
        label = 2

        def loss_np(wflat):
            z = wflat.reshape(4, 5) @ x
            z = z[:, 0] - z.max()
            return -(z[label] - np.log(np.exp(z).sum()))

        W = Tensor(W0, requires_grad=True, name="W")
        with Graph() as g:
            probs = tn.softmax_rows(tn.transpose(W @ Tensor(x)))
            loss = -tn.log(probs[0, label])
        analytic = backward(g, loss)["W"].data
        numeric = numeric_grad(loss_np, W0.reshape(-1)).reshape(4, 5)
        rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        assert rel.max() < 1e-6

    def test_broadcast_add_reduces_gradient(self):
        b = Tensor([1.0, 2.0], requires_grad=True, name="b")
        with Graph() as g:
            loss = (Tensor(np.ones((3, 2))) + b).sum()
        np.testing.assert_array_equal(backward(g, loss)["b"].data, [3.0, 3.0])

    def test_reused_tensor_accumulates(self):
        w = Tensor([2.0], requires_grad=True, name="w")
        with Graph() as g:
            loss = (w * w * w).sum()
        np.testing.assert_allclose(backward(g, loss)["w"].data, [12.0])


def _composition(params):
    x, w1, w2, gamma, beta = (params[k] for k in ("x", "w1", "w2", "gamma", "beta"))
    h = tn.gelu(tn.linear(x, w1))
    h = tn.layer_norm(h, gamma, beta, 1e-5)
    z = tn.softmax_rows(h @ w2)
    z = tn.concat([z, tn.exp(h * 0.1)], axis=1)
    return (tn.log(tn.clamp_min(z, 1e-12)) * z).mean() + z[1:, :2].sum() / Tensor(3.0)


class TestGradCheck:
    def test_linear_function_exact(self):
        a = np.array([1.5, -2.0, 0.25])
        w = Tensor([0.3, 0.1, -0.7], requires_grad=True)
        report = grad_check(lambda p: (p["w"] * Tensor(a)).sum(), {"w": w})
        assert report.max_abs_err < 1e-9

    def test_zero_eps_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda p: p["w"].sum(), {"w": w}, eps=0.0)

    def test_nondeterministic_function_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        r = np.random.default_rng(0)
        with pytest.raises(ContractError, match="deterministic"):
            grad_check(lambda p: tn.dropout_apply(p["w"], 0.5, r, True).sum(), {"w": w})

    def test_restores_parameters(self, rng):
        w = Tensor(rng.normal(size=3), requires_grad=True)
        before = w.data.copy()
        grad_check(lambda p: (p["w"] * p["w"]).sum(), {"w": w})
        np.testing.assert_array_equal(w.data, before)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_random_compositions(self, seed):
        r = np.random.default_rng(seed)
        params = {
            "x": Tensor(r.normal(size=(3, 4)), requires_grad=True),
            "w1": Tensor(r.normal(size=(6, 4)), requires_grad=True),
            "w2": Tensor(r.normal(size=(6, 5)), requires_grad=True),
            "gamma": Tensor(r.normal(size=6), requires_grad=True),
            "beta": Tensor(r.normal(size=6), requires_grad=True),
        }
        report = grad_check(_composition, params, eps=1e-5)
        # near-zero gradient entries make the relative error pure round-off, so accept a tight absolute bound too
        assert report.max_rel_err < 1e-5 or report.max_abs_err < 1e-9, report


class TestTensorBasics:
    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_non_finite_result_detected(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            tn.exp(Tensor([1000.0]))

    def test_finite_check_can_be_disabled(self):
        with tn.check_finite(False), np.errstate(over="ignore"):
            out = tn.exp(Tensor([1000.0]))
        assert np.isinf(out.data[0])

    def test_determinism(self, rng):
        x = rng.normal(size=(4, 8))
        a = tn.gelu(tn.softmax_rows(Tensor(x))).data
        b = tn.gelu(tn.softmax_rows(Tensor(x))).data
        assert a.tobytes() == b.tobytes()
