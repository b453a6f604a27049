"""Stochastic evolution equations driven by Brownian motion and the
orthonormalized power-jump (Teugels) martingales of a Levy process, with
Galerkin simulation, pathwise adjoints and open-loop optimal control."""

from .levy import (FinitePointMasses, TwoSidedExponential, LevyTriplet,
                   TimeGrid, PathBundle, ValidationReport, validate_triplet,
                   nu_moment, mean_rate, simulate_bundle,
                   stack_gaussian_increments, jump_power_sums, coarsen_bundle)
from .teugels import (MomentFunctional, PolynomialBasis, TeugelsIncrements,
                      CovariationReport, build_moment_functional,
                      orthonormalize, teugels_increments, realized_covariation)
from .galerkin import (GalerkinSpace, hat_basis_interval, AffineCoefficient,
                       GelfandProblem, NoiseEnsemble, driving_noise,
                       TrajectoryEnsemble, CoercivityReport, check_coercivity,
                       step, solve_ensemble, ito_energy_residual,
                       apriori_estimate_check, continuous_dependence_check)
from .control import (ControlGrid, CostSpec, quadratic_cost, AdjointEnsemble,
                      cost, variation_solve, pathwise_adjoint,
                      hamiltonian_gradient, duality_check, optimize,
                      OptimizeResult, minimum_condition_check,
                      verification_check)
from .cauchy import (CauchyCoefficients, SuperParabolicityError,
                     assemble_interval, build_problem, RunConfig,
                     CauchyReport, run, regression_coefficients,
                     stationarity_residual)

__version__ = "0.1.0"
