"""Analytic latent model harness: convergence order, stability constants,
consistency transfer, and the plateau + power-law error split."""

import numpy as np
import pytest

from latdyn import theory
from latdyn.model import TABLEAUS


def scalar_ldm(scale=1.0, n_high=6, seed=0):
    return theory.scaled_orthogonal_ldm(n_high, 1, np.array([[-1.0]]), scale=scale, seed=seed)


class TestAnalyticLdm:
    def test_restrict_lift_identity_enforced(self):
        with pytest.raises(ValueError):
            theory.AnalyticLdm(np.ones((4, 1)), np.ones((1, 4)), np.array([[-1.0]]))

    def test_exact_solution_scalar(self):
        ldm = scalar_ldm()
        z0 = np.array([2.0])
        assert ldm.exact(1.5, z0)[0] == pytest.approx(2.0 * np.exp(-1.5), rel=1e-12)

    def test_lipschitz_constants_are_spectral_norms(self):
        ldm = scalar_ldm(scale=7.0)
        assert ldm.lip_lift() == pytest.approx(7.0, rel=1e-12)
        assert ldm.lip_restrict() == pytest.approx(1.0 / 7.0, rel=1e-12)
        assert ldm.lip_field() == pytest.approx(1.0, rel=1e-12)


class TestConvergenceOrder:
    dts = [0.1, 0.05, 0.025, 0.0125]

    def test_rk2_order(self):
        fit = theory.measure_convergence_order(
            scalar_ldm(), TABLEAUS["ralston2"], self.dts, 1.0, np.array([1.0])
        )
        assert fit.slope == pytest.approx(2.0, abs=0.1)

    def test_rk4_order(self):
        fit = theory.measure_convergence_order(
            scalar_ldm(), TABLEAUS["rk4"], self.dts, 1.0, np.array([1.0])
        )
        assert fit.slope == pytest.approx(4.0, abs=0.2)

    def test_euler_order(self):
        fit = theory.measure_convergence_order(
            scalar_ldm(), TABLEAUS["euler"], self.dts, 1.0, np.array([1.0])
        )
        assert fit.slope == pytest.approx(1.0, abs=0.1)

    def test_norm7_lift_scales_errors_but_not_slope(self):
        base = theory.measure_convergence_order(
            scalar_ldm(scale=1.0), TABLEAUS["ralston2"], self.dts, 1.0, np.array([1.0])
        )
        lifted = theory.measure_convergence_order(
            scalar_ldm(scale=7.0), TABLEAUS["ralston2"], self.dts, 1.0, np.array([1.0])
        )
        assert np.allclose(lifted.errors, 7.0 * base.errors, rtol=1e-10)
        assert lifted.slope == pytest.approx(base.slope, abs=0.05)

    def test_unstable_field_rejected(self):
        ldm = theory.scaled_orthogonal_ldm(4, 1, np.array([[0.5]]))
        with pytest.raises(theory.UnstableField):
            theory.measure_convergence_order(
                ldm, TABLEAUS["ralston2"], self.dts, 1.0, np.array([1.0])
            )

    def test_matrix_field_order(self):
        a = np.array([[-1.0, 0.5], [0.0, -2.0]])
        ldm = theory.scaled_orthogonal_ldm(8, 2, a, scale=2.0, seed=3)
        fit = theory.measure_convergence_order(
            ldm, TABLEAUS["ralston2"], self.dts, 1.0, np.array([1.0, -1.0])
        )
        assert fit.slope == pytest.approx(2.0, abs=0.15)


class TestZeroStability:
    def test_zero_perturbation_no_deviation(self):
        ldm = scalar_ldm()
        out = theory.measure_zero_stability(
            ldm, TABLEAUS["ralston2"], 0.05, 1.0, np.full(6, 0.5), [0.0]
        )
        assert out[0.0] == 0.0

    def test_constant_independent_of_eps(self):
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.3], [0.0, -0.5]]), seed=1)
        u0 = np.linspace(0.3, 1.0, 8)
        out = theory.measure_zero_stability(
            ldm, TABLEAUS["ralston2"], 0.05, 1.0, u0, [1e-6, 1e-4, 1e-2]
        )
        vals = np.array(list(out.values()))
        assert vals.max() / vals.min() <= 1.1

    def test_measured_below_closed_form_bound(self):
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.3], [0.0, -0.5]]), seed=1)
        u0 = np.linspace(0.3, 1.0, 8)
        out = theory.measure_zero_stability(
            ldm, TABLEAUS["ralston2"], 0.05, 1.0, u0, [1e-4]
        )
        bound = theory.zero_stability_bound(ldm, TABLEAUS["ralston2"], 0.05, 1.0)
        assert out[1e-4] <= bound

    def test_increment_lipschitz_recursion(self):
        # Ralston RK2 on an L-Lipschitz field: Lip(k1) <= L,
        # Lip(k2) <= L(1 + dt(2/3)L); Phi bound combines with b = (1/4, 3/4).
        got = theory.lip_increment(TABLEAUS["ralston2"], 2.0, 0.1)
        expected = 0.25 * 2.0 + 0.75 * 2.0 * (1 + 0.1 * (2 / 3) * 2.0)
        assert got == pytest.approx(expected, rel=1e-12)


class TestContinuousStability:
    def test_zero_eps(self):
        assert theory.measure_continuous_stability(scalar_ldm(), 0.1, 1.0, np.full(6, 0.5), 0.0) == 0.0

    def test_ratio_below_bound(self):
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.2], [0.0, -0.7]]), seed=2)
        u0 = np.linspace(0.2, 0.9, 8)
        ratio = theory.measure_continuous_stability(ldm, 0.05, 1.0, u0, 1e-4)
        assert 0 < ratio <= theory.continuous_stability_bound(ldm, 1.0)

    def test_first_order_in_eps(self):
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.2], [0.0, -0.7]]), seed=2)
        u0 = np.linspace(0.2, 0.9, 8)
        r1 = theory.measure_continuous_stability(ldm, 0.05, 1.0, u0, 1e-4)
        r2 = theory.measure_continuous_stability(ldm, 0.05, 1.0, u0, 2e-4)
        # deviation doubles with eps, so the ratio stays within 5%
        assert r2 == pytest.approx(r1, rel=0.05)


class TestConsistencyTransfer:
    def test_one_step_residual_bound_linear_lift(self):
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.4], [0.0, -0.3]]), scale=3.0, seed=4)
        tb = TABLEAUS["ralston2"]
        dt = 0.05
        z_prev = np.array([0.7, -0.4])
        z_exact = ldm.exact(dt, z_prev)
        one_step = theory.rk_integrate(ldm.rhs, z_prev, 0.0, dt, 1, tb)[1]
        eps_n = z_exact - one_step
        eps_h = ldm.lift @ z_exact - ldm.lift @ one_step
        assert np.linalg.norm(eps_h) <= ldm.lip_lift() * np.linalg.norm(eps_n) * (1 + 1e-12)

    def test_error_decomposition_triangle(self):
        # ||u_h - lifted numeric|| <= ||u_h - lifted exact|| + ||lifted exact - lifted numeric||
        ldm = theory.scaled_orthogonal_ldm(8, 2, np.array([[-1.0, 0.4], [0.0, -0.3]]), seed=5)
        tb = TABLEAUS["ralston2"]
        dt, n_steps = 0.1, 10
        z0 = np.array([0.8, -0.2])
        numeric = theory.rk_integrate(ldm.rhs, z0, 0.0, dt, n_steps, tb)
        rng = np.random.default_rng(0)
        for k in range(n_steps + 1):
            exact_h = ldm.lift @ ldm.exact(k * dt, z0)
            u_h = exact_h + 0.01 * rng.standard_normal(8)  # synthetic model error
            numeric_h = ldm.lift @ numeric[k]
            lhs = np.linalg.norm(u_h - numeric_h)
            rhs = np.linalg.norm(u_h - exact_h) + np.linalg.norm(exact_h - numeric_h)
            assert lhs <= rhs * (1 + 1e-12)

    def test_perfect_embedding_zero_error(self):
        # exact maps and exact dynamics: the time-continuous error vanishes
        ldm = scalar_ldm(scale=2.0)
        z0 = np.array([1.0])
        for t in np.linspace(0.0, 2.0, 9):
            u_h = ldm.lift @ ldm.exact(t, z0)
            recon = ldm.lift @ (ldm.restrict @ u_h)
            assert np.linalg.norm(u_h - recon) <= 1e-12


class TestErrorDecompositionFit:
    def test_analytic_case_has_no_plateau(self):
        ldm = scalar_ldm()
        dts = [0.2, 0.1, 0.05, 0.025, 0.0125]
        errs = [
            theory.measure_convergence_order(
                ldm, TABLEAUS["ralston2"], [dt, dt / 2, dt / 4, dt / 8], 1.0, np.array([1.0])
            ).errors[0]
            for dt in dts
        ]
        fit = theory.fit_error_decomposition(dts, errs, p=2)
        assert abs(fit.c1) <= 1e-10
        assert fit.c2 > 0

    def test_plateau_recovered(self):
        dts = np.array([0.4, 0.2, 0.1, 0.05, 0.025])
        errs = 3e-3 + 0.5 * dts**2
        fit = theory.fit_error_decomposition(dts, errs, p=2)
        assert fit.c1 == pytest.approx(3e-3, rel=1e-6)
        assert fit.c2 == pytest.approx(0.5, rel=1e-6)
        assert theory.coarse_slope(dts, errs, fit.c1) == pytest.approx(2.0, abs=0.05)

    def test_wrong_order_rejected(self):
        dts = np.array([0.4, 0.2, 0.1, 0.05, 0.025])
        errs = 0.5 * dts**2  # clean second order
        with pytest.raises(theory.PoorFit):
            theory.fit_error_decomposition(dts, errs, p=1)

    def test_error_fn_wrapper(self):
        fit = theory.error_decomposition_fit(lambda dt: 1e-3 + 2.0 * dt**2, [0.2, 0.1, 0.05], p=2)
        assert fit.c1 == pytest.approx(1e-3, rel=1e-9)

    def test_order_fit_validation(self):
        with pytest.raises(ValueError):
            theory.OrderFit(np.array([0.1, 0.2, 0.05, 0.025]), np.ones(4), 1.0, 0.0, 0.0)
