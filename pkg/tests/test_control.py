"""Cost, variation, pathwise adjoint, duality and the optimizer."""

import numpy as np
import pytest

from teugels_control import control as ctrl
from teugels_control import galerkin as gk
from teugels_control import levy as lv

from _oracles import lq_qp_oracle


def hat_problem(n=4, steps=8, n_paths=6, seed=0, with_noise_op=True,
                control_dim=None):
    """Small LQ problem on hat functions with b = g = u and B_op coupling."""
    space = gk.hat_basis_interval(n)
    nu = n if control_dim is None else control_dim
    identity = np.eye(n)
    B = 0.3 * space.gram_H if with_noise_op else np.zeros((n, n))
    problem = gk.GelfandProblem(
        space=space, A_op=lambda t: -space.form_V, B_op=lambda t: B,
        b=gk.AffineCoefficient(n, nu, Ku=identity[:, :nu]),
        g=gk.AffineCoefficient(n, nu, Ku=identity[:, :nu]),
        sigmas=[], alpha=1.0, lam=0.0, bound_C=10.0,
        x0=np.sin(np.pi * np.arange(1, n + 1) / (n + 1)),
        control_dim=nu)
    trip = lv.LevyTriplet(gaussian_sigma=1.0)
    bundles = lv.simulate_bundle(trip, lv.TimeGrid(1.0, steps), n_paths, seed)
    noise = gk.driving_noise(bundles, None, 0)
    spec = ctrl.quadratic_cost(space.gram_H, space.gram_H)
    return problem, noise, spec, space


class TestCost:
    def test_terminal_only_zero_dynamics(self):
        n = 3
        space = gk.hat_basis_interval(n)
        x0 = np.array([1.0, -2.0, 0.5])
        problem = gk.GelfandProblem(
            space=space, A_op=lambda t: np.zeros((n, n)),
            B_op=lambda t: np.zeros((n, n)),
            b=gk.AffineCoefficient(n, 1), g=gk.AffineCoefficient(n, 1),
            sigmas=[], alpha=1.0, lam=0.0, bound_C=1.0, x0=x0, control_dim=1)
        trip = lv.LevyTriplet(gaussian_sigma=1.0)
        bundles = lv.simulate_bundle(trip, lv.TimeGrid(1.0, 4), 3, 0)
        noise = gk.driving_noise(bundles, None, 0)
        traj = gk.solve_ensemble(problem, noise)

        def zero(t, X, u):
            return np.zeros(X.shape[0])

        spec = ctrl.CostSpec(
            l=zero, grad_x=lambda t, X, u: np.zeros_like(X),
            grad_u=lambda t, X, u: np.zeros_like(np.atleast_1d(u)),
            phi=lambda X: np.einsum("pi,ij,pj->p", X, space.gram_H, X),
            grad_phi=lambda X: 2.0 * X @ space.gram_H)
        J = ctrl.cost(traj, np.zeros((4, 1)), spec)
        assert J == pytest.approx(float(x0 @ space.gram_H @ x0))

    def test_nonnegative_quadratic_cost(self):
        problem, noise, spec, _ = hat_problem()
        u = np.random.default_rng(0).standard_normal((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        assert ctrl.cost(traj, u, spec) >= 0.0

    def test_gateaux_slope(self):
        problem, noise, spec, _ = hat_problem()
        rng = np.random.default_rng(1)
        u = rng.standard_normal((8, 4))
        v = rng.standard_normal((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        J0 = ctrl.cost(traj, u, spec)
        eps = 1e-6
        traj_eps = gk.solve_ensemble(problem, noise, u + eps * v)
        J1 = ctrl.cost(traj_eps, u + eps * v, spec)
        adj = ctrl.pathwise_adjoint(problem, traj, u, spec,
                                    gram_U=problem.space.gram_H)
        dt = noise.grid.dt
        slope = dt * float(np.einsum("ni,ij,nj->", adj.gradient,
                                     problem.space.gram_H, v))
        assert (J1 - J0) / eps == pytest.approx(slope, rel=1e-4)


class TestVariation:
    def test_zero_direction_zero_variation(self):
        problem, noise, spec, _ = hat_problem()
        u = np.zeros((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        Y = ctrl.variation_solve(problem, traj, u, np.zeros((8, 4)))
        np.testing.assert_allclose(Y.X, 0.0)

    def test_affine_exactness(self):
        problem, noise, spec, _ = hat_problem()
        rng = np.random.default_rng(2)
        u = rng.standard_normal((8, 4))
        v = rng.standard_normal((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        Y = ctrl.variation_solve(problem, traj, u, v)
        eps = 0.5   # any eps: dynamics are affine
        traj_eps = gk.solve_ensemble(problem, noise, u + eps * v)
        np.testing.assert_allclose((traj_eps.X - traj.X) / eps, Y.X,
                                   atol=1e-10)


class TestAdjoint:
    def test_constant_adjoint_zero_dynamics_linear_terminal(self):
        n = 3
        space = gk.hat_basis_interval(n)
        phi_vec = np.array([0.5, -1.0, 2.0])
        problem = gk.GelfandProblem(
            space=space, A_op=lambda t: np.zeros((n, n)),
            B_op=lambda t: np.zeros((n, n)),
            b=gk.AffineCoefficient(n, 1), g=gk.AffineCoefficient(n, 1),
            sigmas=[], alpha=1.0, lam=0.0, bound_C=1.0,
            x0=np.ones(n), control_dim=1)
        steps = 4
        grid = lv.TimeGrid(1.0, steps)
        noise = gk.NoiseEnsemble(grid=grid, dW=np.zeros((2, steps)),
                                 dH=np.zeros((2, steps, 0)))
        traj = gk.solve_ensemble(problem, noise)
        spec = ctrl.CostSpec(
            l=lambda t, X, u: np.zeros(X.shape[0]),
            grad_x=lambda t, X, u: np.zeros_like(X),
            grad_u=lambda t, X, u: np.zeros_like(np.atleast_1d(u)),
            phi=lambda X: X @ (space.gram_H @ phi_vec),
            grad_phi=lambda X: np.broadcast_to(space.gram_H @ phi_vec,
                                               X.shape).copy())
        adj = ctrl.pathwise_adjoint(problem, traj, np.zeros((steps, 1)), spec)
        # H-representative p is the constant phi_vec at every node
        expected = np.broadcast_to(phi_vec, (2, steps + 1, 3))
        np.testing.assert_allclose(adj.p, expected, atol=1e-12)
        np.testing.assert_allclose(adj.q_hat, 0.0, atol=1e-14)

    def test_gradient_matches_central_differences(self):
        problem, noise, spec, space = hat_problem(n=4, steps=8, n_paths=16,
                                                  seed=3)
        rng = np.random.default_rng(4)
        u = rng.standard_normal((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        adj = ctrl.pathwise_adjoint(problem, traj, u, spec,
                                    gram_U=space.gram_H)
        dt = noise.grid.dt
        dJ = space.gram_H @ adj.gradient.T * dt   # (n, steps) coordinate grads
        eps = 1e-5
        for k, i in [(0, 0), (3, 2), (7, 3), (5, 1)]:
            up, um = u.copy(), u.copy()
            up[k, i] += eps
            um[k, i] -= eps
            Jp = ctrl.cost(gk.solve_ensemble(problem, noise, up), up, spec)
            Jm = ctrl.cost(gk.solve_ensemble(problem, noise, um), um, spec)
            fd = (Jp - Jm) / (2 * eps)
            assert abs(fd - dJ[i, k]) <= 1e-6 * max(abs(fd), 1e-6)


class TestDuality:
    def test_zero_direction(self):
        problem, noise, spec, _ = hat_problem()
        u = np.zeros((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        res = ctrl.duality_check(problem, traj, u, np.zeros((8, 4)), spec)
        assert res["residual"] == pytest.approx(0.0, abs=1e-14)

    def test_random_directions_roundoff(self):
        problem, noise, spec, space = hat_problem(n=4, steps=8, n_paths=12,
                                                  seed=5)
        rng = np.random.default_rng(6)
        u = rng.standard_normal((8, 4))
        traj = gk.solve_ensemble(problem, noise, u)
        adj = ctrl.pathwise_adjoint(problem, traj, u, spec,
                                    gram_U=space.gram_H)
        for _ in range(5):
            d = rng.standard_normal((8, 4))
            res = ctrl.duality_check(problem, traj, u, d, spec, adj)
            assert res["relative"] <= 1e-10


class TestOptimize:
    def test_scalar_no_dynamics_matches_qp(self):
        # l = x^2 + u^2, dx = u dt, A = 0, Phi = 0 would need custom spec;
        # use the standard quadratic cost with terminal state instead and
        # compare against the dense QP oracle.
        problem, noise, spec, space = hat_problem(n=3, steps=6, n_paths=4,
                                                  seed=7)
        u0 = ctrl.ControlGrid(values=np.zeros((6, 3)), gram_U=space.gram_H,
                              dt=noise.grid.dt)
        result = ctrl.optimize(problem, spec, noise, u0, max_iters=400,
                               gradient_tol=1e-10)
        assert result.status == "converged"
        u_star, J_star = lq_qp_oracle(problem, noise, space.gram_H)
        assert result.cost == pytest.approx(J_star, rel=1e-8)
        assert np.max(np.abs(result.control.values - u_star)) < 1e-5

    def test_zero_cost_problem_stays_at_start(self):
        problem, noise, _, space = hat_problem(n=3, steps=4, n_paths=2, seed=1)

        def zero(t, X, u):
            return np.zeros(X.shape[0])

        spec = ctrl.CostSpec(
            l=zero, grad_x=lambda t, X, u: np.zeros_like(X),
            grad_u=lambda t, X, u: np.zeros(np.atleast_1d(u).shape),
            phi=lambda X: np.zeros(X.shape[0]),
            grad_phi=lambda X: np.zeros_like(X))
        u0 = ctrl.ControlGrid(values=np.ones((4, 3)), gram_U=space.gram_H,
                              dt=noise.grid.dt)
        result = ctrl.optimize(problem, spec, noise, u0, max_iters=5)
        np.testing.assert_allclose(result.control.values, 1.0)
        assert result.final_gradient_norm == 0.0

    def test_monotone_history(self):
        problem, noise, spec, space = hat_problem(n=4, steps=8, n_paths=8,
                                                  seed=9)
        u0 = ctrl.ControlGrid(values=np.zeros((8, 4)), gram_U=space.gram_H,
                              dt=noise.grid.dt)
        result = ctrl.optimize(problem, spec, noise, u0, max_iters=100)
        costs = [h[0] for h in result.history]
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))

    def test_box_projection_respected(self):
        problem, noise, spec, space = hat_problem(n=3, steps=6, n_paths=4,
                                                  seed=2)
        u0 = ctrl.ControlGrid(values=np.zeros((6, 3)), gram_U=space.gram_H,
                              dt=noise.grid.dt,
                              lower=np.full((6, 3), -0.01),
                              upper=np.full((6, 3), 0.01))
        result = ctrl.optimize(problem, spec, noise, u0, max_iters=50)
        assert np.all(result.control.values >= -0.01 - 1e-15)
        assert np.all(result.control.values <= 0.01 + 1e-15)


@pytest.fixture(scope="module")
def optimum():
    problem, noise, spec, space = hat_problem(n=3, steps=6, n_paths=8,
                                              seed=11)
    u0 = ctrl.ControlGrid(values=np.zeros((6, 3)), gram_U=space.gram_H,
                          dt=noise.grid.dt)
    result = ctrl.optimize(problem, spec, noise, u0, max_iters=400,
                           gradient_tol=1e-9)
    traj = gk.solve_ensemble(problem, noise, result.control.values)
    adj = ctrl.pathwise_adjoint(problem, traj, result.control.values,
                                spec, gram_U=space.gram_H)
    return problem, noise, spec, result, adj


class TestOptimalityDiagnostics:

    def test_minimum_condition_unconstrained(self, optimum):
        problem, noise, spec, result, adj = optimum
        report = ctrl.minimum_condition_check(result.control, adj.gradient,
                                              n_trials=200, seed=0)
        assert report["min_pairing"] >= -1e-6 * max(report["scale"], 1.0)

    def test_verification_no_violations(self, optimum):
        problem, noise, spec, result, _ = optimum
        report = ctrl.verification_check(problem, spec, noise, result.control,
                                         n_perturbations=100, seed=1,
                                         spread=0.5)
        assert report["violations"] == 0

    def test_convexity_slope_two(self, optimum):
        problem, noise, spec, result, _ = optimum
        rng = np.random.default_rng(3)
        v = rng.standard_normal(result.control.values.shape)
        eps_list = np.array([1e-1, 1e-2, 1e-3])
        gaps = []
        for eps in eps_list:
            u = result.control.values + eps * v
            traj = gk.solve_ensemble(problem, noise, u)
            gaps.append(ctrl.cost(traj, u, spec) - result.cost)
        slope = np.polyfit(np.log(eps_list), np.log(gaps), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.1)
