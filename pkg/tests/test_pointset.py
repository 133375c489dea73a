import itertools

import numpy as np
import pytest
from scipy.stats import qmc

from inrnet.errors import (
    CannotExtendError,
    DomainMismatchError,
    EmptyInputError,
    InsufficientPointsError,
    UnsupportedDimensionError,
)
from inrnet.pointset import (
    Domain,
    PointSet,
    extend,
    grid_points,
    halton_sequence,
    iid_points,
    make_points,
    nearest_index,
    qmc_mean,
    shrink_transform,
    sobol_sequence,
    star_discrepancy,
    truncate,
)


def brute_star_discrepancy(u):
    """Independent oracle: every anchored box with corners on the point coordinates (and 1)."""
    n, d = u.shape
    axes = [np.unique(np.append(u[:, k], 1.0)) for k in range(d)]
    worst = 0.0
    for corner in itertools.product(*axes):
        c = np.array(corner)
        vol = np.prod(c)
        closed = np.sum(np.all(u <= c, axis=1))
        opened = np.sum(np.all(u < c, axis=1))
        worst = max(worst, closed / n - vol, vol - opened / n)
    return worst


class TestDomain:
    def test_volume_and_maps(self):
        dom = Domain(((-1.0, 1.0), (0.0, 3.0)))
        assert dom.volume == pytest.approx(6.0)
        u = np.array([[0.5, 0.5]])
        assert np.allclose(dom.from_unit(u), [[0.0, 1.5]])
        assert np.allclose(dom.to_unit(dom.from_unit(u)), u)

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            Domain(((1.0, 1.0),))


class TestSobol:
    def test_first_terms_1d(self):
        ps = sobol_sequence(1, 2)
        assert np.allclose(ps.points[:, 0], [0.0, 0.5])

    @pytest.mark.parametrize("d", [1, 2, 3, 5, 8])
    def test_matches_scipy_unscrambled(self, d):
        ours = sobol_sequence(d, 256).points
        ref = qmc.Sobol(d, scramble=False).random_base2(8)
        assert np.allclose(ours, ref, atol=1e-12)

    def test_dimension_limit(self):
        with pytest.raises(UnsupportedDimensionError):
            sobol_sequence(9, 4)

    def test_scramble_is_deterministic_and_differs(self):
        a = sobol_sequence(2, 64, 3).points
        b = sobol_sequence(2, 64, 3).points
        c = sobol_sequence(2, 64, 4).points
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_scramble_keeps_net_property(self):
        # a (0, m, 2)-net: each 1/8 x 1/8 cell holds exactly one of 64 points
        u = sobol_sequence(2, 64, 11).points
        cells = np.floor(u * 8).astype(int)
        assert len({tuple(c) for c in cells}) == 64

    def test_beats_iid_discrepancy(self):
        wins = 0
        for seed in range(20):
            s = star_discrepancy(sobol_sequence(2, 256, seed)).star_discrepancy
            r = star_discrepancy(iid_points(2, 256, seed)).star_discrepancy
            wins += s < r
        assert wins >= 18

    def test_mean_of_x1(self):
        ps = sobol_sequence(2, 1024, 0)
        assert abs(qmc_mean(ps.points[:, :1])[0] - 0.5) < 0.01


class TestHalton:
    def test_first_term(self):
        assert np.allclose(halton_sequence(2, 1).points, [[0.5, 1.0 / 3.0]])

    def test_third_term(self):
        assert np.allclose(halton_sequence(2, 3).points[2], [0.75, 1.0 / 9.0])

    def test_base_two(self):
        assert np.allclose(halton_sequence(1, 4).points[:, 0], [0.5, 0.25, 0.75, 0.125])

    def test_matches_scipy(self):
        ref = qmc.Halton(3, scramble=False).random(33)[1:]
        assert np.allclose(halton_sequence(3, 32).points, ref)


class TestGrid:
    def test_two_by_two(self):
        ps = grid_points([2, 2])
        assert np.allclose(ps.points, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])

    def test_single_pixel(self):
        ps = grid_points([1], Domain.cube(1))
        assert np.allclose(ps.points, [[0.0]])

    def test_1024_points(self):
        ps = grid_points([32, 32], Domain.cube(2))
        assert ps.n == 1024
        assert ps.cell_volume == pytest.approx(4.0 / 1024)

    def test_make_points_grid_rounds_to_square(self):
        assert make_points("grid", 2, 1000, Domain.cube(2)).n == 1024


class TestShrink:
    def test_examples(self):
        ps = PointSet(Domain.cube(2), np.array([[-0.5, 1.0], [0.0, 0.0], [1.0, -1.0]]))
        out = shrink_transform(ps)
        assert np.allclose(out.points, [[-0.25, 1.0], [0.0, 0.0], [1.0, -1.0]])
        assert out.generator == "shrunk"

    def test_closure(self):
        out = shrink_transform(sobol_sequence(3, 500, 1, Domain.cube(3)))
        assert np.all(np.abs(out.points) <= 1.0)

    def test_wrong_domain(self):
        with pytest.raises(DomainMismatchError):
            shrink_transform(sobol_sequence(2, 8))


class TestTruncateExtend:
    def test_prefix_property(self):
        big = sobol_sequence(2, 1024, 5)
        assert np.array_equal(truncate(big, 256).points, sobol_sequence(2, 256, 5).points)
        h = halton_sequence(2, 100)
        assert np.array_equal(truncate(h, 10).points, halton_sequence(2, 10).points)

    def test_identity_and_errors(self):
        ps = sobol_sequence(2, 16)
        assert truncate(ps, 16) is ps
        with pytest.raises(InsufficientPointsError):
            truncate(ps, 17)

    def test_truncated_beats_iid(self):
        sob, rnd = [], []
        for seed in range(20):
            sob.append(star_discrepancy(truncate(sobol_sequence(2, 1024, seed), 256)).star_discrepancy)
            rnd.append(star_discrepancy(iid_points(2, 256, seed)).star_discrepancy)
        assert np.median(sob) < np.median(rnd)

    def test_extend_identity_map(self):
        ps = sobol_sequence(2, 32, 1)
        big, nn = extend(ps, 32)
        assert np.array_equal(nn, np.arange(32))

    def test_extend_restores_values(self):
        ps = sobol_sequence(2, 32, 1)
        vals = np.random.default_rng(0).normal(size=32)
        big, nn = extend(ps, 128)
        assert np.array_equal(vals[nn][:32], vals)
        # every new point maps to its closest original point
        d = np.linalg.norm(big.points[:, None] - ps.points[None], axis=2)
        assert np.allclose(d[np.arange(128), nn], d.min(axis=1))

    def test_extend_1d_continuation(self):
        ps = sobol_sequence(1, 4)
        big, _ = extend(ps, 8)
        assert np.allclose(np.sort(big.points[4:, 0]), np.sort([0.375, 0.875, 0.625, 0.125]))
        # independent oracle for the continuation
        assert np.allclose(big.points[:, 0], qmc.Sobol(1, scramble=False).random(8)[:, 0])

    @pytest.mark.parametrize("ps", [grid_points([4, 4]), iid_points(2, 16, 0)])
    def test_cannot_extend(self, ps):
        with pytest.raises(CannotExtendError):
            extend(ps, 32)

    def test_nearest_index_ties_lowest(self):
        ps = PointSet(Domain.cube(1), np.array([[-0.5], [0.5]]))
        assert nearest_index(ps, np.array([[0.0]]))[0] == 0


class TestStarDiscrepancy:
    def test_1d_examples(self):
        ps = PointSet(Domain.cube(1, 0, 1), np.array([[0.5]]))
        assert star_discrepancy(ps).star_discrepancy == pytest.approx(0.5)
        ps = PointSet(Domain.cube(1, 0, 1), np.array([[0.25], [0.75]]))
        assert star_discrepancy(ps).star_discrepancy == pytest.approx(0.25)

    @pytest.mark.parametrize("seed", range(4))
    def test_exact_2d_matches_brute_force(self, seed):
        u = np.random.default_rng(seed).random((25, 2))
        ps = PointSet(Domain.cube(2, 0, 1), u)
        rep = star_discrepancy(ps)
        assert rep.method == "exact"
        assert rep.star_discrepancy == pytest.approx(brute_star_discrepancy(u), abs=1e-12)

    def test_sampled_is_lower_bound(self):
        u = np.random.default_rng(1).random((40, 2))
        ps = PointSet(Domain.cube(2, 0, 1), u)
        exact = star_discrepancy(ps).star_discrepancy
        sampled = star_discrepancy(ps, exact_max_n=0, n_boxes=5000)
        assert sampled.method == "sampled"
        assert sampled.star_discrepancy <= exact + 1e-12
        centre = PointSet(Domain.cube(3, 0, 1), np.full((1, 3), 0.5))
        assert star_discrepancy(centre).star_discrepancy <= 1.0 - 0.125 + 1e-12

    def test_decay_and_envelope(self):
        vals = [star_discrepancy(sobol_sequence(2, n, 0)).star_discrepancy for n in (64, 256, 1024)]
        assert vals[0] > vals[1] > vals[2]
        assert vals[2] < 10 * 2 * np.log(1024) ** 2 / 1024


class TestQmcMean:
    def test_constant(self):
        assert qmc_mean(np.full((10, 1), 3.0))[0] == 3.0

    def test_linear_and_indicator(self):
        ps = sobol_sequence(2, 4096, 0)
        x = ps.points
        assert abs(qmc_mean(x[:, :1])[0] - 0.5) < 0.005
        assert abs(qmc_mean((x[:, :1] <= 0.5).astype(float))[0] - 0.5) < 0.02

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            qmc_mean(np.zeros((0, 1)))

    def test_koksma_hlawka(self):
        for n in (16, 64, 256):
            ps = sobol_sequence(2, n)
            err = abs(qmc_mean(ps.points[:, :1] * ps.points[:, 1:])[0] - 0.25)
            assert err <= 3 * star_discrepancy(ps).star_discrepancy

    def test_qmc_beats_mc(self):
        f = lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])  # noqa: E731
        exact = 4 / np.pi ** 2
        q = np.mean([abs(f(sobol_sequence(2, 4096, s).points).mean() - exact) for s in range(20)])
        m = np.mean([abs(f(iid_points(2, 4096, s).points).mean() - exact) for s in range(20)])
        assert q < m


class TestDump:
    def test_header(self):
        text = sobol_sequence(2, 3, 7).dump()
        assert text.splitlines()[0] == "# pointset d=2 n=3 gen=sobol seed=7"
        assert len(text.strip().splitlines()) == 4
