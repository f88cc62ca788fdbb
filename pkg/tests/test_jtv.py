import numpy as np
import pytest

from dexct.geometry import Geometry
from dexct.jtv import (
    JtvConfig,
    diff_h,
    diff_h_adjoint,
    diff_v,
    diff_v_adjoint,
    jtv_gradient,
    jtv_solve,
    jtv_value,
)
from dexct.model import DualEnergySystem, ImagePair, PVC_IODINE, SinogramPair, simulate_measurement

from oracles import anisotropic_tv, difference_matrices


class TestDifferenceOperators:
    def test_constant_image(self):
        f = np.full((4, 4), 3.0)
        dh = diff_h(f)
        dv = diff_v(f)
        assert np.all(dh[:, :-1] == 0.0)
        assert np.all(dh[:, -1] == -3.0)
        assert np.all(dv[:-1, :] == 0.0)
        assert np.all(dv[-1, :] == -3.0)

    def test_two_by_two_hand_values(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(diff_h(f), np.array([[1.0, -2.0], [1.0, -4.0]]))
        assert np.array_equal(diff_v(f), np.array([[2.0, 2.0], [-3.0, -4.0]]))

    def test_matches_column_major_index_formula(self):
        n = 4
        lh, lv = difference_matrices(n)
        rng = np.random.default_rng(0)
        f = rng.standard_normal((n, n))
        vec = f.ravel(order="F")
        assert np.allclose(diff_h(f).ravel(order="F"), lh @ vec, atol=1e-14)
        assert np.allclose(diff_v(f).ravel(order="F"), lv @ vec, atol=1e-14)

    def test_adjoints_match_matrix_transposes(self):
        n = 4
        lh, lv = difference_matrices(n)
        rng = np.random.default_rng(1)
        u = rng.standard_normal((n, n))
        vec = u.ravel(order="F")
        assert np.allclose(diff_h_adjoint(u).ravel(order="F"), lh.T @ vec, atol=1e-14)
        assert np.allclose(diff_v_adjoint(u).ravel(order="F"), lv.T @ vec, atol=1e-14)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((6, 6))
        u = rng.standard_normal((6, 6))
        for op, op_t in ((diff_h, diff_h_adjoint), (diff_v, diff_v_adjoint)):
            lhs = float(np.vdot(op(f), u))
            rhs = float(np.vdot(f, op_t(u)))
            assert lhs == pytest.approx(rhs, rel=1e-13, abs=1e-13)


class TestJtvValue:
    def test_zero_image(self):
        kappa = 1e-6
        pair = ImagePair(np.zeros((2, 2)), np.zeros((2, 2)))
        # four difference stacks (horizontal/vertical for each channel) of
        # N^2 = 4 entries each; every zero entry smooths to sqrt(kappa)
        assert jtv_value(pair, kappa) == pytest.approx(16 * np.sqrt(kappa), rel=1e-12)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(3)
        g1 = rng.random((5, 5))
        g2 = rng.random((5, 5))
        assert jtv_value(ImagePair(g1, g2), 1e-6) == pytest.approx(
            jtv_value(ImagePair(g2, g1), 1e-6), rel=1e-15
        )

    def test_binary_image_approaches_exact_tv(self):
        rng = np.random.default_rng(4)
        g1 = (rng.random((8, 8)) < 0.4).astype(float)
        g2 = (rng.random((8, 8)) < 0.3).astype(float)
        exact = anisotropic_tv(g1) + anisotropic_tv(g2)
        smoothed = jtv_value(ImagePair(g1, g2), 1e-16)
        assert smoothed == pytest.approx(exact, abs=1e-5)
        assert smoothed >= exact

    def test_dominates_exact_tv(self):
        rng = np.random.default_rng(5)
        pair = ImagePair(rng.random((6, 6)), rng.random((6, 6)))
        assert jtv_value(pair, 1e-4) >= anisotropic_tv(pair.g1) + anisotropic_tv(pair.g2)


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(6)
        pair = ImagePair(rng.random((8, 8)), rng.random((8, 8)))
        kappa = 1e-6
        grad = jtv_gradient(pair, kappa)
        h = 1e-6
        for _ in range(20):
            i, j = rng.integers(0, 8, size=2)
            which = rng.integers(0, 2)
            plus = ImagePair(pair.g1.copy(), pair.g2.copy())
            minus = ImagePair(pair.g1.copy(), pair.g2.copy())
            (plus.g1 if which == 0 else plus.g2)[i, j] += h
            (minus.g1 if which == 0 else minus.g2)[i, j] -= h
            fd = (jtv_value(plus, kappa) - jtv_value(minus, kappa)) / (2 * h)
            analytic = (grad.g1 if which == 0 else grad.g2)[i, j]
            assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-7)


@pytest.fixture(scope="module")
def tv_setup():
    geo = Geometry.parallel_beam(12, 11)
    system = DualEnergySystem(PVC_IODINE, geo, geo)
    rng = np.random.default_rng(7)
    phantom = ImagePair(
        (rng.random((12, 12)) < 0.3).astype(float), (rng.random((12, 12)) < 0.2).astype(float)
    )
    m = simulate_measurement(phantom, system, 0.01, 0.0, seed=8)
    return geo, system, m


class TestSolver:
    def test_zero_data_drives_solution_down(self):
        geo = Geometry.parallel_beam(8, 7)
        system = DualEnergySystem(PVC_IODINE, geo, geo)
        zero = SinogramPair(
            np.zeros(geo.sinogram_shape), np.zeros(geo.sinogram_shape), geo, geo
        )
        pair, report = jtv_solve(zero, system, JtvConfig(gamma=1e-6, n_iters=30))
        assert report.iterations[-1].objective <= report.iterations[0].objective
        assert np.all(pair.g1 >= 0.0) and np.all(pair.g2 >= 0.0)

    def test_objective_monotone_nonincreasing(self, tv_setup):
        _, system, m = tv_setup
        _, report = jtv_solve(m, system, JtvConfig(n_iters=50))
        objs = [r.objective for r in report.iterations]
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(objs, objs[1:]))
        assert len(objs) == 50

    def test_output_nonnegative(self, tv_setup):
        _, system, m = tv_setup
        pair, _ = jtv_solve(m, system, JtvConfig(n_iters=40))
        assert np.all(pair.g1 >= 0.0)
        assert np.all(pair.g2 >= 0.0)

    def test_line_search_failure_flagged(self, tv_setup):
        _, system, m = tv_setup
        cfg = JtvConfig(n_iters=10, initial_step=1e12, max_backtracks=0)
        _, report = jtv_solve(m, system, cfg)
        assert report.line_search_failed
        assert report.n_iterations == 0

    def test_report_csv_shape(self, tv_setup):
        _, system, m = tv_setup
        _, report = jtv_solve(m, system, JtvConfig(n_iters=5))
        lines = report.to_csv().splitlines()
        assert lines[0] == "iteration,objective,step_size"
        assert len(lines) == 6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            JtvConfig(gamma=0.0)
        with pytest.raises(ValueError):
            JtvConfig(kappa=0.0)
        with pytest.raises(ValueError):
            JtvConfig(n_iters=0)
