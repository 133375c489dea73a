import numpy as np
import pytest

from inrnet.errors import InvalidRegionsError, UnsupportedTargetError
from inrnet.layers.kernels import GaussianKernel, Support
from inrnet.pointset import Domain, sobol_sequence
from inrnet.theory import (
    BumpFamily,
    PiecewiseConstant,
    Rectangle,
    RectangleCover,
    StudyLayer,
    _Reference,
    approx_demo,
    box_indicator,
    build_ramp_network,
    build_rectangle_cover,
    evaluate_network,
    gradient_convergence_study,
    halves_target,
    l1_approximation_error,
    parameter_gradients,
    quadrant_target,
    ramp_fraction,
    smoothstep,
    study_csv,
)


def ramp_oracle(x, lo, hi, delta):
    """Independent formula: trapezoid per axis with ramps of width delta * (hi - lo)."""
    w = delta * (hi - lo)
    up = np.clip((x - lo) / w, 0, 1)
    down = np.clip((hi - x) / w, 0, 1)
    return np.prod(np.minimum(up, down), axis=-1)


def smooth_input(p):
    return np.sin(2 * p[:, 0]) * np.cos(p[:, 1]) + 0.5


class TestCover:
    def test_indicator(self):
        cov = build_rectangle_cover(box_indicator([0, 0], [0.5, 0.5]), 0.1)
        assert len(cov.positive) == 1 and not cov.negative
        assert cov.positive[0].height == 1.0

    def test_zero_target(self):
        cov = build_rectangle_cover(PiecewiseConstant(2, 1.0, []), 0.1)
        assert cov.positive == [] and cov.negative == []

    def test_halves(self):
        cov = build_rectangle_cover(halves_target(), 0.1)
        assert len(cov.positive) == 1 and len(cov.negative) == 1

    def test_mass_accounting_exact(self):
        J = PiecewiseConstant(2, 1.0, [([0, 0], [0.5, 1], 2.0), ([-1, -1], [0, -0.5], -0.5)])
        assert build_rectangle_cover(J, 0.1).covered_mass() == J.l1_norm()

    def test_ramp_fraction_formula(self):
        eps, norm, n = 0.1, 1.0, 2
        ratio = (eps / 8) / (norm + eps / 16)
        assert ramp_fraction(eps, norm, n) == pytest.approx(0.5 * (1 - (1 - ratio) ** 0.5))
        assert 0 < ramp_fraction(10.0, 0.01, 3) <= 0.49

    def test_unsupported_target(self):
        with pytest.raises(UnsupportedTargetError):
            build_rectangle_cover(lambda x: x[:, 0], 0.1)

    def test_overlapping_pieces(self):
        with pytest.raises(InvalidRegionsError):
            PiecewiseConstant(2, 1.0, [([0, 0], [1, 1], 1.0), ([0.5, 0.5], [1, 1], 1.0)])

    def test_invariants(self):
        with pytest.raises(ValueError):
            RectangleCover(2, [Rectangle(np.zeros(2), np.ones(2), 0.0)], [], 0.1, 0.1)
        with pytest.raises(ValueError):
            RectangleCover(2, [], [], 0.5, 0.1)


class TestRampNetwork:
    def _cover(self, delta=0.1):
        r = Rectangle(np.array([-0.5, 0.0]), np.array([0.5, 0.8]), 2.0)
        return RectangleCover(2, [r], [], delta, delta)

    def test_centre_is_one(self):
        out = evaluate_network(build_ramp_network(self._cover()), [[0.0, 0.4]])
        assert out[0, 0] == 2.0

    def test_outside_is_zero(self):
        out = evaluate_network(build_ramp_network(self._cover()), [[0.9, 0.4], [0.0, -0.1], [-0.6, 0.9]])
        assert np.all(out == 0.0)

    def test_ramp_midpoint_half(self):
        # ramp band along x is [-0.5, -0.4]; its midpoint is -0.45
        out = evaluate_network(build_ramp_network(self._cover()), [[-0.45, 0.4]])
        assert out[0, 0] == pytest.approx(2.0 * 0.5, abs=1e-12)

    def test_matches_trapezoid_oracle(self):
        x = np.random.default_rng(0).uniform(-1, 1, size=(2000, 2))
        cov = self._cover(0.2)
        r = cov.positive[0]
        out = evaluate_network(build_ramp_network(cov), x)[:, 0]
        assert np.allclose(out, 2.0 * ramp_oracle(x, r.lo, r.hi, 0.2), atol=1e-12)

    def test_bounded(self):
        J = PiecewiseConstant(2, 1.0, [([0, 0], [0.5, 1], 2.0), ([-1, -1], [0, -0.5], -0.5),
                                       ([-1, 0], [-0.2, 1], 1.5)])
        net = build_ramp_network(build_rectangle_cover(J, 0.3))
        out = evaluate_network(net, np.random.default_rng(1).uniform(-1.5, 1.5, size=(5000, 2)))[:, 0]
        assert out.min() >= -0.5 - 1e-12 and out.max() <= 3.5 + 1e-12

    def test_composition(self):
        covers = [build_rectangle_cover(quadrant_target(), 0.1), build_rectangle_cover(halves_target(), 0.1)]
        net = build_ramp_network(covers)
        x = np.array([[0.5, 0.5], [-0.5, -0.5]])
        out = evaluate_network(net, x)
        single = [evaluate_network(build_ramp_network(c), x)[:, 0] for c in covers]
        assert out.shape == (2, 2)
        assert np.allclose(out, np.stack(single, axis=1))


class TestL1:
    def test_small_delta_band_bound(self):
        J = box_indicator([-0.5, -0.5], [0.5, 0.5])
        r = Rectangle(np.array([-0.5, -0.5]), np.array([0.5, 0.5]), 1.0)
        delta = 1e-3
        net = build_ramp_network(RectangleCover(2, [r], [], delta, delta))
        est = l1_approximation_error(net, J, n_samples=100_000)
        bound = (1 - (1 - 2 * delta) ** 2) * J.l1_norm()
        assert est.error < bound

    def test_zero_target_empty_network(self):
        J = PiecewiseConstant(2, 1.0, [])
        net = build_ramp_network(build_rectangle_cover(J, 0.1))
        assert l1_approximation_error(net, J, n_samples=1000).error == 0.0
        assert l1_approximation_error(None, J, n_samples=1000).error == 0.0

    @pytest.mark.parametrize("target", ["quadrant", "halves"])
    def test_tolerance_handshake(self, target):
        _, _, est = approx_demo(target, eps=0.1, n_samples=100_000)
        assert est.error < 0.1
        assert est.stderr < 0.01

    def test_three_dims(self):
        _, _, est = approx_demo("quadrant", eps=0.1, n=3, n_samples=50_000)
        assert est.error < 0.1

    def test_monotone_in_eps(self):
        errs = []
        for eps in (0.8, 0.4, 0.2, 0.1):
            errs.append(np.median([approx_demo("halves", eps=eps, n_samples=20_000, seed=s)[2].error
                                   for s in range(3)]))
        assert all(b <= a for a, b in zip(errs, errs[1:]))

    def test_unknown_target(self):
        with pytest.raises(UnsupportedTargetError):
            approx_demo("spiral")


class TestBump:
    def test_smoothstep(self):
        assert smoothstep(np.array([0.0, 0.5, 1.0, 2.0])).tolist() == [0.0, 0.5, 1.0, 1.0]

    def test_one_at_centre_zero_elsewhere(self):
        ps = sobol_sequence(2, 256, 0, Domain.cube(2))
        c = ps.points[10]
        bump = BumpFamily.for_points(c, ps.points)
        vals = bump(ps.points)
        assert vals[10] == 1.0
        assert np.all(np.delete(vals, 10) == 0.0)

    def test_radius_shrinks(self):
        c = np.array([0.1, -0.2])
        radii = [BumpFamily.for_points(c, sobol_sequence(2, n, 0, Domain.cube(2)).points).radius
                 for n in (256, 1024, 4096)]
        assert radii[0] > radii[1] > radii[2]

    def test_quadrature_mass(self):
        # int of smoothstep(1 - rho / r) over the disc is 3 pi r^2 / 10
        bump = BumpFamily(np.zeros(2), 0.05)
        nodes, w = bump.quadrature(48)
        assert np.sum(w * bump(nodes)) == pytest.approx(0.3 * np.pi * 0.05 ** 2, rel=2e-3)


@pytest.fixture(scope="module")
def conv_study():
    sup = Support((-0.2, -0.2), (0.2, 0.2))
    ker = GaussianKernel(1, 1, 0.1, sup, width=1.5, amplitude=np.ones((1, 1)))
    layer = StudyLayer("conv", ker)
    ref = _Reference(layer, smooth_input, Domain.cube(2))
    return layer, ref


class TestGradientStudy:
    def test_linear_layer_exact(self):
        rows = gradient_convergence_study(StudyLayer("linear", weight=0.7), smooth_input)
        for _, emp, fd, gap in rows:
            assert emp == pytest.approx(0.7, abs=1e-12) and fd == pytest.approx(0.7, abs=1e-12)

    def test_conv_gap_shrinks(self, conv_study):
        layer, ref = conv_study
        wins = 0
        for seed in range(5):
            rows = gradient_convergence_study(layer, smooth_input, (256, 4096), seed=seed, reference=ref)
            wins += rows[1][3] < rows[0][3]
        assert wins == 5

    def test_tau_robust(self, conv_study):
        layer, ref = conv_study
        a = gradient_convergence_study(layer, smooth_input, (1024,), tau=1e-3, reference=ref)[0]
        b = gradient_convergence_study(layer, smooth_input, (1024,), tau=1e-4, reference=ref)[0]
        assert b[2] == pytest.approx(a[2], rel=0.01)

    def test_relu_layer_runs(self):
        sup = Support((-0.2, -0.2), (0.2, 0.2))
        ker = GaussianKernel(1, 1, 0.1, sup, width=1.5, amplitude=np.ones((1, 1)))
        rows = gradient_convergence_study(StudyLayer("conv", ker, activation="relu"), smooth_input, (256,),
                                          n_ref=2 ** 12)
        assert np.isfinite(rows[0][1]) and np.isfinite(rows[0][2])

    def test_centre_appended(self):
        from inrnet.theory import _study_points

        ps, idx = _study_points(64, 0, np.array([0.123, 0.456]), Domain.cube(2))
        assert ps.n == 65 and idx == 64

    def test_parameter_gradients_converge(self):
        sup = Support((-0.2, -0.2), (0.2, 0.2))
        ker = GaussianKernel(1, 2, 0.1, sup, width=1.5, amplitude=np.ones((1, 2)))
        diffs = []
        for seed in range(3):
            g = parameter_gradients(ker, smooth_input, (256, 1024, 4096), seed=seed)
            diffs.append([np.abs(g[i] - g[i + 1]).max() for i in range(2)])
        med = np.median(np.array(diffs), axis=0)
        assert med[0] > med[1]

    def test_csv(self):
        text = study_csv([(256, 1.0, 0.5, 0.5)])
        assert text.splitlines() == ["n,empirical_grad,directional_fd,gap", "256,1.0,0.5,0.5"]
