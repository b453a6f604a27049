"""Interval SPDE example: assembly, super-parabolicity, end-to-end runs."""

import numpy as np
import pytest
from scipy.integrate import quad

from teugels_control import cauchy as cx
from teugels_control import control as ctrl
from teugels_control import galerkin as gk
from teugels_control import levy as lv

from _oracles import lq_qp_oracle


def constant_coeffs(**kw):
    defaults = dict(length=1.0, a=1.0, b=0.0, c=0.0, eta=0.0, rho=0.0,
                    gammas=(), xi=lambda z: np.sin(np.pi * np.asarray(z)),
                    kappa=0.5, bound=10.0)
    defaults.update(kw)
    return cx.CauchyCoefficients(**defaults)


def brownian_triplet():
    return lv.LevyTriplet(gaussian_sigma=1.0)


def jump_triplet():
    return lv.LevyTriplet(
        gaussian_sigma=1.0,
        jump_measure=lv.FinitePointMasses(((1.0, 2.0), (-0.5, 1.0))))


class TestValidation:
    def test_super_parabolicity_violation_refused(self):
        coeffs = constant_coeffs(a=0.5, eta=1.5, kappa=0.1)  # 2a < eta^2
        with pytest.raises(cx.SuperParabolicityError):
            cx.build_problem(coeffs, n=4, horizon=1.0)

    def test_bound_violation_refused(self):
        coeffs = constant_coeffs(a=1.0, c=50.0, bound=10.0)
        with pytest.raises(ValueError, match="bound"):
            cx.build_problem(coeffs, n=4, horizon=1.0)

    def test_marginal_super_parabolicity_passes(self):
        # 2a - eta^2 = kappa exactly
        coeffs = constant_coeffs(a=1.0, eta=np.sqrt(2.0 - 0.5), kappa=0.5)
        problem, _, _ = cx.build_problem(coeffs, n=6, horizon=1.0)
        assert gk.check_coercivity(problem).passed


class TestAssembly:
    def test_pure_laplacian_is_negative_stiffness(self):
        coeffs = constant_coeffs(a=1.0)
        problem, _, space = cx.build_problem(coeffs, n=6, horizon=1.0)
        np.testing.assert_allclose(problem.A_op(0.0), -space.form_V,
                                   atol=1e-12)
        report = gk.check_coercivity(problem)
        assert report.passed

    def test_variable_coefficient_matches_quadrature_oracle(self):
        n, length = 5, 2.0
        f = lambda t, z: 1.0 + 0.5 * np.sin(z)
        mat = cx.assemble_interval(n, length, 0.0, f, 0, 0)
        h = length / (n + 1)

        def hat(i):
            zi = (i + 1) * h
            return lambda z: np.maximum(0.0, 1.0 - abs(z - zi) / h)

        for i in range(n):
            for j in range(max(0, i - 1), min(n, i + 2)):
                oracle, _ = quad(
                    lambda z: f(0.0, z) * hat(i)(z) * hat(j)(z), 0.0, length,
                    points=[(k + 1) * h for k in range(n)], limit=200)
                # 3-point Gauss is exact on polynomials; the sin coefficient
                # leaves an O(h^6) quadrature remainder
                assert mat[i, j] == pytest.approx(oracle, abs=1e-6)

    def test_convection_matrix_antisymmetric_part(self):
        # for constant b, int phi_j' phi_i is antisymmetric up to boundary
        n = 6
        mat = cx.assemble_interval(n, 1.0, 0.0, lambda t, z: 1.0, 0, 1)
        np.testing.assert_allclose(mat + mat.T, 0.0, atol=1e-12)

    def test_initial_projection_reproduces_hat_interpolant(self):
        # xi equal to a hat function projects onto the exact coordinates
        n, length = 7, 1.0
        h = length / (n + 1)
        target = 3
        zt = (target + 1) * h

        def xi(z):
            return np.maximum(0.0, 1.0 - np.abs(np.asarray(z) - zt) / h)

        coeffs = constant_coeffs(xi=xi)
        problem, _, _ = cx.build_problem(coeffs, n=n, horizon=1.0)
        expected = np.zeros(n)
        expected[target] = 1.0
        np.testing.assert_allclose(problem.x0, expected, atol=1e-10)


class TestRun:
    def test_zero_initial_data_zero_optimum(self):
        coeffs = constant_coeffs(xi=lambda z: np.zeros_like(np.asarray(z)))
        cfg = cx.RunConfig(coefficients=coeffs, triplet=brownian_triplet(),
                           steps=8, space_dim=4, n_paths=4, seed=0)
        report = cx.run(cfg)
        assert report.optimal_cost == pytest.approx(0.0, abs=1e-20)
        np.testing.assert_allclose(report.control, 0.0)

    def test_brownian_only_matches_qp_oracle(self):
        coeffs = constant_coeffs()
        n, steps = 8, 16
        problem, spec, space = cx.build_problem(coeffs, n, horizon=1.0)
        bundles = lv.simulate_bundle(brownian_triplet(),
                                     lv.TimeGrid(1.0, steps), 1, seed=5)
        noise = gk.driving_noise(bundles, None, 0)
        u0 = ctrl.ControlGrid(values=np.zeros((steps, n)),
                              gram_U=space.gram_H, dt=noise.grid.dt)
        result = ctrl.optimize(problem, spec, noise, u0, max_iters=600,
                               gradient_tol=1e-8)
        _, J_star = lq_qp_oracle(problem, noise, space.gram_H)
        assert result.status == "converged"
        assert abs(result.cost - J_star) <= 1e-6 * abs(J_star)

    def test_full_model_converges(self):
        coeffs = constant_coeffs(b=0.2, c=-0.1, eta=0.5, rho=0.3,
                                 gammas=(0.4, 0.2))
        cfg = cx.RunConfig(coefficients=coeffs, triplet=jump_triplet(),
                           steps=16, space_dim=8, truncation=2, n_paths=64,
                           seed=7)
        report = cx.run(cfg)
        assert report.optimizer_status == "converged"
        assert (report.final_gradient_norm
                <= 1e-6 * report.initial_gradient_norm)
        assert report.coercivity_margin >= -1e-10
        assert report.basis_dim == 3
        assert report.truncation == 2

    def test_two_starts_agree(self):
        coeffs = constant_coeffs(eta=0.5, gammas=(0.3,))
        base = dict(coefficients=coeffs, triplet=jump_triplet(), steps=12,
                    space_dim=6, truncation=1, n_paths=32, seed=3,
                    gradient_tol=1e-9)
        r0 = cx.run(cx.RunConfig(**base))
        rng = np.random.default_rng(99)
        u_rand = 0.5 * rng.standard_normal((12, 6))
        r1 = cx.run(cx.RunConfig(**base, u0=u_rand))
        space = gk.hat_basis_interval(6)
        diff = r0.control - r1.control
        dt = 1.0 / 12
        gap = np.sqrt(dt * np.einsum("ni,ij,nj->", diff, space.gram_H, diff))
        norm = np.sqrt(dt * np.einsum("ni,ij,nj->", r0.control, space.gram_H,
                                      r0.control))
        assert gap <= 1e-6 * max(norm, 1.0)

    def test_jump_coupling_vanishes_continuously(self):
        # Gamma = 0 and no jumps vs tiny jump intensity: J* moves slightly
        coeffs = constant_coeffs()
        base_cfg = dict(coefficients=coeffs, steps=8, space_dim=4,
                        n_paths=32, seed=2, truncation=0)
        J_brownian = cx.run(cx.RunConfig(triplet=brownian_triplet(),
                                         **base_cfg)).optimal_cost
        tiny = lv.LevyTriplet(
            gaussian_sigma=1.0,
            jump_measure=lv.FinitePointMasses(((1.0, 1e-4),)))
        J_tiny = cx.run(cx.RunConfig(triplet=tiny, **base_cfg)).optimal_cost
        assert abs(J_tiny - J_brownian) <= 0.02 * max(J_brownian, 1e-12)

    def test_refinement_stability_of_optimal_cost(self):
        # doubling each of (n, N, m, paths) separately moves J* by < 2%
        length = np.pi
        coeffs = constant_coeffs(length=length, eta=0.3,
                                 gammas=(0.2, 0.1, 0.05),
                                 xi=lambda z: np.sin(np.asarray(z)))
        trip = lv.LevyTriplet(
            gaussian_sigma=1.0,
            jump_measure=lv.FinitePointMasses(((1.0, 0.5), (-0.5, 0.25))))
        base = dict(coefficients=coeffs, triplet=trip, horizon=0.25,
                    steps=16, space_dim=8, truncation=2, n_paths=1000,
                    seed=17)
        J_base = cx.run(cx.RunConfig(**base)).optimal_cost
        for key, value in (("space_dim", 16), ("steps", 32),
                           ("truncation", 4), ("n_paths", 2000)):
            cfg = dict(base)
            cfg[key] = value
            J = cx.run(cx.RunConfig(**cfg)).optimal_cost
            assert abs(J - J_base) <= 0.02 * J_base, (key, J, J_base)


class TestRegression:
    def test_regression_recovers_mean_and_slopes(self):
        # synthetic adjoint p = alpha + beta dW + gamma dH: the ensemble-mean
        # estimators must recover the coefficients
        rng = np.random.default_rng(0)
        P, steps, n, m = 40_000, 3, 2, 1
        dt = 0.1
        dW = rng.normal(0.0, np.sqrt(dt), (P, steps))
        dH = rng.normal(0.0, np.sqrt(dt), (P, steps, m))
        alpha = np.array([1.0, -2.0])
        beta = np.array([0.5, 0.25])
        gamma = np.array([-1.5, 3.0])
        p = (alpha[None, None, :] + dW[:, :, None] * beta
             + dH[:, :, 0:1] * gamma)
        p_full = np.concatenate([np.zeros((P, 1, n)), p], axis=1)
        adj = ctrl.AdjointEnsemble(
            p_dual=p_full, p=p_full, du=np.zeros((P, steps, n)),
            q_hat=np.zeros((steps, n)), r_hat=np.zeros((steps, m, n)),
            gradient=np.zeros((steps, n)), dt=dt)
        noise = gk.NoiseEnsemble(grid=lv.TimeGrid(steps * dt, steps),
                                 dW=dW, dH=dH)
        p_hat, q_hat, r_hat = cx.regression_coefficients(adj, noise)
        np.testing.assert_allclose(p_hat, np.broadcast_to(alpha, (steps, n)),
                                   atol=5e-2)
        np.testing.assert_allclose(q_hat, np.broadcast_to(beta, (steps, n)),
                                   atol=5e-2)
        np.testing.assert_allclose(r_hat[:, 0, :],
                                   np.broadcast_to(gamma, (steps, n)),
                                   atol=5e-2)
