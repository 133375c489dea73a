import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from inrnet import autodiff as ad
from inrnet.autodiff import AdamW, Value, adamw_step, finite_diff_check, parameter
from inrnet.errors import NumericError, RankError, ShapeError


def rng_param(rng, *shape):
    return parameter(rng.normal(size=shape))


class TestPrimitives:
    def test_sin_derivative_at_zero(self):
        x = parameter(np.zeros(1))
        x.sin().sum().backward()
        assert x.grad[0] == pytest.approx(1.0)

    def test_relu_kink_convention(self):
        x = parameter(np.array([-1.0, 0.0, 2.0]))
        x.relu().sum().backward()
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_max_ties_lowest_index(self):
        x = parameter(np.array([[1.0, 3.0, 3.0]]))
        x.max(axis=-1).sum().backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_default_dtype_fp32(self):
        assert parameter(np.ones(2)).dtype == np.float32
        with ad.precision(np.float64):
            assert parameter(np.ones(2)).dtype == np.float64

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)|\(2, 4\).*\(2, 3\)"):
            ad.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 4))))

    @pytest.mark.parametrize("name, fn, shapes", [
        ("add", lambda a, b: a + b, [(3, 4), (4,)]),
        ("sub", lambda a, b: a - b, [(3, 4), (3, 4)]),
        ("mul", lambda a, b: a * b, [(3, 4), (3, 1)]),
        ("div", lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
        ("matmul", lambda a, b: ad.matmul(a, b), [(2, 3), (3, 4)]),
        ("bmatmul", lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)]),
        ("sin", lambda a: a.sin(), [(5,)]),
        ("cos", lambda a: a.cos(), [(5,)]),
        ("exp", lambda a: a.exp(), [(5,)]),
        ("tanh", lambda a: a.tanh(), [(5,)]),
        ("softmax", lambda a: ad.softmax(a, axis=-1) * np.arange(4.0), [(3, 4)]),
        ("log_softmax", lambda a: ad.log_softmax(a, axis=0) * np.arange(12.0).reshape(3, 4), [(3, 4)]),
        ("sum", lambda a: a.sum(axis=1) ** 2, [(3, 4)]),
        ("mean", lambda a: a.mean(axis=0, keepdims=True) ** 2, [(3, 4)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=0) ** 2, [(2, 3), (1, 3)]),
        ("stack", lambda a, b: ad.stack([a, b], axis=1) ** 2, [(2, 3), (2, 3)]),
        ("slice", lambda a: a[1:, ::2] ** 2, [(3, 4)]),
        ("take", lambda a: a.take(np.array([0, 2, 2]), axis=1) ** 2, [(3, 4)]),
        ("reshape", lambda a: a.reshape(4, 3) * np.arange(12.0).reshape(4, 3), [(3, 4)]),
        ("transpose", lambda a: a.transpose(1, 0) * np.arange(12.0).reshape(4, 3), [(3, 4)]),
        ("broadcast", lambda a: a.broadcast_to((3, 4)) * np.arange(12.0).reshape(3, 4), [(1, 4)]),
        ("scale", lambda a: a.scale(2.5) ** 2, [(3,)]),
    ])
    def test_fd_fp32(self, name, fn, shapes):
        rng = np.random.default_rng(hash(name) % 2 ** 32)
        params = [rng_param(rng, *s) for s in shapes]
        assert finite_diff_check(fn, params) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_fd_fp64(self, seed):
        rng = np.random.default_rng(seed)
        with ad.precision(np.float64):
            a, b = rng_param(rng, 3, 4), rng_param(rng, 4, 2)
            fn = lambda a, b: (ad.matmul(a, b).sin() * ad.matmul(a, b)).sum(axis=0)  # noqa: E731
            assert finite_diff_check(fn, [a, b], epsilon=1e-5) < 1e-7

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(0)
        x = parameter(rng.choice([-1, 1], size=20) * rng.uniform(0.1, 1.0, size=20))
        assert finite_diff_check(lambda x: x.relu() * 3.0, [x]) < 1e-4

    def test_matmul_example(self):
        rng = np.random.default_rng(5)
        assert finite_diff_check(lambda a, b: ad.matmul(a, b), [rng_param(rng, 2, 3), rng_param(rng, 3, 4)]) < 1e-4

    def test_sparse_apply(self):
        rng = np.random.default_rng(1)
        mat = sp.random(5, 7, density=0.4, random_state=1, format="csr")
        x = rng_param(rng, 2, 7, 3)
        assert finite_diff_check(lambda x: ad.sparse_apply(mat, x, axis=1) ** 2, [x]) < 1e-4
        dense = np.einsum("ij,bjc->bic", mat.toarray(), x.data)
        assert np.allclose(ad.sparse_apply(mat, x, axis=1).data, dense, atol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self):
        x = parameter(np.zeros((2, 3, 4)))
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    def test_mean_square(self):
        x = parameter(np.array([1.0, -2.0, 3.0, 0.5]))
        (x * x).mean().backward()
        assert np.allclose(x.grad, x.data / 2)

    def test_non_scalar_root(self):
        with pytest.raises(RankError):
            parameter(np.ones(3)).sin().backward()

    def test_accumulates(self):
        x = parameter(np.array([2.0]))
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        assert x.grad[0] == pytest.approx(6.0)
        x.zero_grad()
        assert x.grad is None

    def test_linearity(self):
        rng = np.random.default_rng(0)
        with ad.precision(np.float64):
            x = rng_param(rng, 5)
            f = lambda x: x.sin().sum()  # noqa: E731
            g = lambda x: (x * x).sum()  # noqa: E731
            f(x).backward()
            gf = x.grad.copy()
            x.zero_grad()
            g(x).backward()
            gg = x.grad.copy()
            x.zero_grad()
            (f(x) * 2.0 + g(x) * -0.5).backward()
            assert np.allclose(x.grad, 2.0 * gf - 0.5 * gg, rtol=0, atol=1e-14)

    def test_deterministic(self):
        grads = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            a, b = rng_param(rng, 4, 5), rng_param(rng, 5, 2)
            ad.matmul(a, b).tanh().sum().backward()
            grads.append(a.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_no_grad(self):
        x = parameter(np.ones(2))
        with ad.no_grad():
            y = x.sin()
        assert not y.requires_grad

    def test_siren_forward_fd(self):
        rng = np.random.default_rng(4)
        x = Value(rng.uniform(-1, 1, size=(16, 2)))
        w1, b1 = parameter(rng.uniform(-0.5, 0.5, (2, 8))), parameter(rng.uniform(-0.5, 0.5, 8))
        w2, b2 = parameter(rng.uniform(-0.3, 0.3, (8, 1))), parameter(rng.uniform(-0.3, 0.3, 1))

        def fn(w1, b1, w2, b2):
            h = (ad.matmul(x, w1) + b1).scale(3.0).sin()
            return (ad.matmul(h, w2) + b2).mean()

        assert finite_diff_check(fn, [w1, b1, w2, b2]) < 1e-3


class TestFiniteDiffCheck:
    def test_sum_of_squares_fp64(self):
        with ad.precision(np.float64):
            x = parameter(np.random.default_rng(0).normal(size=6))
            assert finite_diff_check(lambda x: x * x, [x], epsilon=1e-5) < 1e-6

    def test_dead_relu_skipped(self):
        x = parameter(np.array([-1.0, -2.0, 0.5]))
        assert finite_diff_check(lambda x: x.relu(), [x]) < 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        with pytest.raises(NumericError):
            finite_diff_check(lambda x: x.log(), [parameter(np.array([-1.0]))])

    def test_qmc_mean_of_siren_channel(self):
        from inrnet.pointset import qmc_mean, sobol_sequence

        rng = np.random.default_rng(2)
        ps = sobol_sequence(2, 64, 0)
        w = parameter(rng.normal(size=(2, 4)))
        v = parameter(rng.normal(size=(4, 1)) * 0.3)
        fn = lambda w, v: qmc_mean(ad.matmul(ad.matmul(Value(ps.points), w).scale(30.0).sin(), v))  # noqa: E731
        assert finite_diff_check(fn, [w, v], epsilon=1e-4) < 1e-3


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = np.array([1.0, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        out = adamw_step(p, np.zeros(2), m, v, 1, lr=0.1, weight_decay=0.0)
        assert np.array_equal(out, p)

    def test_unit_grad_first_step(self):
        p = np.array([0.5])
        out = adamw_step(p, np.ones(1), np.zeros(1), np.zeros(1), 1, lr=1e-3, weight_decay=0.0)
        # bias-corrected moments equal (g, g^2), so the step is lr * g / (|g| + eps)
        assert out[0] == pytest.approx(0.5 - 1e-3, abs=1e-9)

    def test_decoupled_decay(self):
        p = np.array([2.0])
        out = adamw_step(p, np.zeros(1), np.zeros(1), np.zeros(1), 1, lr=0.1, weight_decay=0.01)
        assert out[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)

    def test_defaults(self):
        opt = AdamW([parameter(np.ones(1))])
        assert (opt.lr, opt.betas, opt.weight_decay, opt.eps) == (1e-3, (0.9, 0.999), 0.01, 1e-8)

    def test_non_finite_skips(self):
        p = parameter(np.ones(2))
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([np.nan, 1.0], dtype=np.float32)
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always")
            assert opt.step() is False
        assert opt.skipped == 1
        assert np.array_equal(p.data, np.ones(2))

    def test_minimises_quadratic(self):
        p = parameter(np.array([3.0, -4.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        assert np.abs(p.data).max() < 0.05
