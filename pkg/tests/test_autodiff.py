import numpy as np
import pytest

from unimatch import autodiff as ad
from unimatch.errors import ContractError, DimensionError, NumericsError

from conftest import check_grads, finite_difference, rel_error


class TestRecord:
    def test_mul_elementwise(self):
        out = ad.record("mul", [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.value, [3.0, 8.0])

    def test_matmul_zero_annihilator(self):
        out = ad.record("matmul", [np.zeros((2, 3)), np.random.default_rng(1).normal(size=(3, 1))])
        np.testing.assert_array_equal(out.value, np.zeros((2, 1)))

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError) as e:
            ad.record("matmul", [np.zeros((2, 3)), np.zeros((2, 3))])
        assert "(2, 3)" in str(e.value)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ad.record("conv2d", [np.zeros((2, 2))])

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericsError):
            ad.Tensor([1.0, np.nan])

    def test_sum_sigmoid_matches_finite_difference(self):
        w = np.array([0.5])
        x = np.array([1.0])

        def loss(wt):
            return ad.sum(ad.sigmoid(ad.mul(wt, ad.constant(x))))

        wt = ad.parameter(w)
        with ad.Tape():
            (g,) = ad.grad(loss(wt), [wt])
        (fd,) = finite_difference(
            lambda a: float(1.0 / (1.0 + np.exp(-a[0] * x[0]))), [w.copy()]
        )
        assert rel_error(g.value, fd) < 1e-6


class TestBackward:
    def test_identity(self):
        x = ad.parameter([3.0])
        with ad.Tape():
            loss = ad.sum(x)
            ad.backward(loss, [x])
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_square_sum(self):
        x = ad.parameter([1.0, -2.0])
        with ad.Tape():
            loss = ad.sum(ad.mul(x, x))
            ad.backward(loss, [x])
        np.testing.assert_allclose(x.grad, [2.0, -4.0])

    def test_nonscalar_loss_rejected(self):
        x = ad.parameter([1.0, 2.0])
        with ad.Tape():
            with pytest.raises(ContractError):
                ad.grad(x, [x])

    def test_nonparticipating_gets_zero(self):
        x = ad.parameter([1.0])
        other = ad.parameter([[1.0, 2.0]])
        with ad.Tape():
            loss = ad.sum(x)
            gs = ad.grad(loss, [x, other])
        np.testing.assert_array_equal(gs[1].value, np.zeros((1, 2)))

    def test_mlp_grads_match_finite_difference(self, rng):
        sizes = [(3, 5), (5,), (5, 4), (4,), (4, 1), (1,)]
        params = [rng.normal(size=s) * 0.7 for s in sizes]
        x = rng.normal(size=(6, 3))

        def loss(w1, b1, w2, b2, w3, b3):
            h = ad.relu(ad.add(ad.matmul(ad.constant(x), w1), b1))
            h = ad.sigmoid(ad.add(ad.matmul(h, w2), b2))
            out = ad.add(ad.matmul(h, w3), b3)
            return ad.mean(ad.square(out))

        check_grads(loss, params, tol=1e-4)


OP_CASES = {
    "matmul": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
               lambda a, b: ad.matmul(a, b)),
    "add": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda a, b: ad.add(a, b)),
    "add_broadcast": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4,))],
                      lambda a, b: ad.add(a, b)),
    "mul": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda a, b: ad.mul(a, b)),
    "concat": (lambda rng: [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))],
               lambda a, b: ad.concat([a, b], axis=1)),
    "sigmoid": (lambda rng: [rng.normal(size=(3, 4))], ad.sigmoid),
    "relu": (lambda rng: [rng.normal(size=(3, 4)) + np.where(rng.normal(size=(3, 4)) > 0, 0.2, -0.2)],
             ad.relu),
    "softmax": (lambda rng: [rng.normal(size=(3, 4))], lambda a: ad.softmax(a, axis=1)),
    "log": (lambda rng: [rng.uniform(0.3, 3.0, size=(3, 4))], ad.log),
    "sum": (lambda rng: [rng.normal(size=(3, 4))], lambda a: ad.sum(a, axis=0)),
    "mean": (lambda rng: [rng.normal(size=(3, 4))], lambda a: ad.mean(a, axis=1)),
    "square": (lambda rng: [rng.normal(size=(3, 4))], ad.square),
    "sqrt": (lambda rng: [rng.uniform(0.3, 3.0, size=(3, 4))], ad.sqrt),
    "l2norm": (lambda rng: [rng.normal(size=(3, 4)) + 0.5], lambda a: ad.l2norm(a, axis=1)),
    "transpose": (lambda rng: [rng.normal(size=(3, 4))], ad.transpose),
    "slice": (lambda rng: [rng.normal(size=(4, 5))], lambda a: ad.narrow(a, 1, 1, 3)),
    "scale": (lambda rng: [rng.normal(size=(3, 4))], lambda a: ad.scale(a, -2.5)),
    "exp": (lambda rng: [rng.normal(size=(3, 4))], ad.exp),
    "div": (lambda rng: [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4))],
            lambda a, b: ad.div(a, b)),
    "take_rows": (lambda rng: [rng.normal(size=(5, 3))],
                  lambda a: ad.take_rows(a, np.array([0, 2, 2, 4]))),
    "logsumexp": (lambda rng: [rng.normal(size=(3, 4))], lambda a: ad.logsumexp(a, axis=1)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_property(name):
    """Analytic vs central FD on 100 random instances per op (spec tolerance)."""
    make, op = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    # a weighted scalarization makes the FD check sensitive to every output
    for trial in range(100):
        arrays = make(rng)
        with ad.Tape():
            probe = rng.normal(size=op(*[ad.constant(a) for a in arrays]).shape)

        def loss(*ts):
            return ad.sum(ad.mul(op(*ts), ad.constant(probe)))

        check_grads(loss, arrays, tol=1e-4)


class TestGradReverse:
    def test_forward_bit_identical(self):
        x = ad.parameter([1.0, -2.0])
        out = ad.grad_reverse(x)
        assert out.value is x.value

    def test_backward_negates(self):
        x = ad.parameter([5.0, 7.0])
        with ad.Tape():
            loss = ad.sum(ad.grad_reverse(x))
            (g,) = ad.grad(loss, [x])
        np.testing.assert_array_equal(g.value, [-1.0, -1.0])

    def test_upstream_negation(self, rng):
        x = ad.parameter(rng.normal(size=(4,)))
        up = rng.normal(size=(4,))
        with ad.Tape():
            loss = ad.sum(ad.mul(ad.grad_reverse(x), ad.constant(up)))
            (g,) = ad.grad(loss, [x])
        np.testing.assert_allclose(g.value, -up, atol=1e-15)


class TestSpectralNormalize:
    def test_identity_unchanged(self, rng):
        w = ad.parameter(np.eye(2))
        st = ad.SpectralState.initialize(w.value, rng, warmup=20)
        out = ad.spectral_normalize(w, st)
        np.testing.assert_allclose(out.value, np.eye(2), atol=1e-12)

    def test_diag_oracle(self, rng):
        w = ad.parameter(np.diag([3.0, 1.0]))
        st = ad.SpectralState.initialize(w.value, rng, warmup=20)
        out = ad.spectral_normalize(w, st)
        np.testing.assert_allclose(out.value, np.diag([1.0, 1.0 / 3.0]), atol=1e-3)
        assert abs(np.linalg.svd(out.value, compute_uv=False)[0] - 1.0) < 1e-3

    def test_random_matrices_vs_svd(self, rng):
        for _ in range(20):
            m, n = rng.integers(2, 9, size=2)
            w = ad.parameter(rng.normal(size=(m, n)))
            st = ad.SpectralState.initialize(w.value, rng, warmup=50)
            out = ad.spectral_normalize(w, st)
            sigma = np.linalg.svd(out.value, compute_uv=False)[0]
            assert abs(sigma - 1.0) < 1e-3

    def test_zero_matrix_flagged(self, rng):
        w = ad.parameter(np.zeros((3, 3)))
        st = ad.SpectralState(u=np.ones(3) / np.sqrt(3), v=np.zeros(3), n_iters=1)
        out = ad.spectral_normalize(w, st)
        assert st.degenerate
        assert out is w

    def test_unit_vectors_after_update(self, rng):
        w = rng.normal(size=(4, 6))
        st = ad.SpectralState.initialize(w, rng, warmup=5)
        assert abs(np.linalg.norm(st.u) - 1.0) < 1e-12
        assert abs(np.linalg.norm(st.v) - 1.0) < 1e-12
        assert st.n_iters >= 1

    def test_no_gradient_through_scalar(self, rng):
        w_val = rng.normal(size=(3, 3))
        w = ad.parameter(w_val.copy())
        st = ad.SpectralState.initialize(w_val, rng, warmup=30)
        u, v = st.u.copy(), st.v.copy()
        with ad.Tape():
            out = ad.spectral_normalize(w, st)
            loss = ad.sum(out)
            (g,) = ad.grad(loss, [w])
        # gradient is exactly 1/sigma everywhere when sigma is a constant
        wu = w_val.T @ u
        vv = wu / np.linalg.norm(wu)
        uu = w_val @ vv
        uu /= np.linalg.norm(uu)
        sigma = uu @ w_val @ vv
        np.testing.assert_allclose(g.value, np.full((3, 3), 1.0 / sigma), atol=1e-12)


def linear_critic(w):
    def apply(x):
        return ad.matmul(x, ad.constant(w.reshape(-1, 1)))

    return apply


class TestInputGradient:
    def test_linear_critic_constant_gradient(self, rng):
        w = np.array([3.0, 4.0])
        x = ad.parameter(rng.normal(size=(5, 2)))
        with ad.Tape():
            g = ad.input_gradient(linear_critic(w), x)
        np.testing.assert_allclose(g.value, np.tile(w, (5, 1)), atol=1e-12)

    def test_quadratic(self):
        x = ad.parameter([[1.0, 2.0]])
        with ad.Tape():
            g = ad.input_gradient(lambda t: ad.sum(ad.mul(t, t), axis=1), x)
        np.testing.assert_allclose(g.value, [[2.0, 4.0]], atol=1e-12)

    def test_nonscalar_output_rejected(self, rng):
        x = ad.parameter(rng.normal(size=(3, 2)))
        with ad.Tape():
            with pytest.raises(ContractError):
                ad.input_gradient(lambda t: t, x)

    def test_hidden_layer_critic_both_orders(self, rng):
        w1 = rng.normal(size=(2, 6)) * 0.8
        w2 = rng.normal(size=(6, 1)) * 0.8
        xv = rng.normal(size=(4, 2))

        def critic(t, a, b):
            return ad.matmul(ad.sigmoid(ad.matmul(t, a)), b)

        # first order: d critic / d x vs FD
        x = ad.parameter(xv.copy())
        a, b = ad.constant(w1), ad.constant(w2)
        with ad.Tape():
            g = ad.input_gradient(lambda t: critic(t, a, b), x)

        def f_of_x(xa):
            h = 1.0 / (1.0 + np.exp(-(xa @ w1)))
            return float(np.sum(h @ w2))

        (fd_x,) = finite_difference(f_of_x, [xv.copy()])
        assert rel_error(g.value, fd_x) < 1e-4

        # second order: d penalty / d critic weights vs FD
        def penalty(a_t, b_t):
            xt = ad.constant(xv)
            xt.requires_grad = True
            gg = ad.input_gradient(lambda t: critic(t, a_t, b_t), xt)
            norms = ad.l2norm(gg, axis=1)
            return ad.mean(ad.square(ad.sub(norms, 1.0)))

        check_grads(penalty, [w1, w2], tol=1e-3, h=1e-5)


class TestTapeDeterminism:
    def test_bit_identical_runs(self):
        def run():
            rng = np.random.default_rng(99)
            w = ad.parameter(rng.normal(size=(4, 4)))
            x = ad.constant(rng.normal(size=(6, 4)))
            with ad.Tape():
                loss = ad.mean(ad.square(ad.sigmoid(ad.matmul(x, w))))
                (g,) = ad.grad(loss, [w])
            return float(loss.value), g.value.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)
