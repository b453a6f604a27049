"""Teugels martingale construction.

The martingale family H^i is obtained by orthonormalizing the monomials
1, x, x^2, ... against the measure mu(dx) = x^2 nu(dx) + sigma^2 delta_0(dx)
and applying the resulting coefficients to the compensated power-jump
processes Y^(k).  The family is pairwise strongly orthogonal with
predictable bracket <H^i, H^j>(t) = delta_ij * t, which the statistical
helpers below verify on simulated ensembles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .levy import (LevyTriplet, PathBundle, jump_power_sums, nu_moment,
                   stack_gaussian_increments)

__all__ = [
    "MomentFunctional",
    "PolynomialBasis",
    "TeugelsIncrements",
    "CovariationReport",
    "build_moment_functional",
    "orthonormalize",
    "teugels_increments",
    "realized_covariation",
]

K_MAX_HARD_CAP = 12
K_MAX_CONDITIONING_WARNING = 8
DEFAULT_RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class MomentFunctional:
    """Moments M_k = int x^k mu(dx) of mu(dx) = x^2 nu(dx) + sigma^2 delta_0.

    ``mu_moments[k]`` holds M_k for k = 0..2*K_max, enough for Gram matrices
    of polynomials up to degree K_max - 1.
    """

    mu_moments: np.ndarray
    k_max: int

    def hankel(self, size: int | None = None) -> np.ndarray:
        k = self.k_max if size is None else size
        return np.array([[self.mu_moments[i + j] for j in range(k)]
                         for i in range(k)])


def build_moment_functional(triplet: LevyTriplet, k_max: int) -> MomentFunctional:
    """Closed-form mu-moments, with a positive-semidefiniteness check."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if k_max > K_MAX_HARD_CAP:
        raise ValueError(
            f"k_max capped at {K_MAX_HARD_CAP}: Hankel conditioning degrades fast")
    sigma2 = triplet.gaussian_sigma**2
    moments = np.empty(2 * k_max + 1)
    for k in range(2 * k_max + 1):
        m = nu_moment(triplet.jump_measure, k + 2)
        if k == 0:
            m += sigma2
        moments[k] = m
    if moments[0] <= 0.0:
        raise ValueError("degenerate driving noise: sigma = 0 and nu = 0")
    func = MomentFunctional(mu_moments=moments, k_max=k_max)
    eigs = np.linalg.eigvalsh(func.hankel())
    if eigs[0] < -1e-9 * max(1.0, eigs[-1]):
        raise ValueError(f"Hankel moment matrix not PSD (min eig {eigs[0]})")
    return func


@dataclass(frozen=True)
class PolynomialBasis:
    """Lower-triangular coefficients of the mu-orthonormal polynomials.

    Row i of ``c`` (0-based row i-1) holds c_{i,1..i}: the polynomial
    p_{i-1}(x) = sum_k c_{i,k} x^{k-1} of degree i-1.  ``dim`` equals the
    numerical rank of the Hankel moment matrix.
    """

    dim: int
    c: np.ndarray
    rank_tolerance: float

    def gram_matrix(self, functional: MomentFunctional) -> np.ndarray:
        """Exact Gram matrix of the basis under mu, from the moments alone."""
        hank = functional.hankel(self.c.shape[1])
        return self.c @ hank @ self.c.T

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """p_0..p_{dim-1} at the points x, shape (dim,) + x.shape."""
        powers = np.array([np.asarray(x, dtype=float)**k
                           for k in range(self.c.shape[1])])
        return np.tensordot(self.c, powers, axes=1)


def orthonormalize(functional: MomentFunctional,
                   rank_tolerance: float = DEFAULT_RANK_TOLERANCE) -> PolynomialBasis:
    """Modified Gram-Schmidt on 1, x, x^2, ... under the mu inner product.

    The inner product of coefficient vectors f, g is f^T Hankel g.
    Accumulation runs in extended precision with one reorthogonalization
    pass; the sweep stops at the first polynomial whose squared mu-norm
    drops below rank_tolerance * M_0, which sets the dimension.
    """
    k_max = functional.k_max
    hank = functional.hankel().astype(np.longdouble)
    m0 = float(functional.mu_moments[0])
    cutoff = rank_tolerance * m0
    rows: list[np.ndarray] = []
    for deg in range(k_max):
        v = np.zeros(k_max, dtype=np.longdouble)
        v[deg] = 1.0
        for _ in range(2):  # MGS + one reorthogonalization
            for row in rows:
                v -= (row @ hank @ v) * row
        norm2 = float(v @ hank @ v)
        if norm2 < cutoff:
            break
        row = v / np.sqrt(norm2)
        if row[deg] < 0:
            row = -row
        rows.append(row)
    c = np.array([np.asarray(r, dtype=float) for r in rows])
    c = c[:, :len(rows)]   # columns beyond the rank are identically zero
    return PolynomialBasis(dim=len(rows), c=c, rank_tolerance=rank_tolerance)


@dataclass(frozen=True)
class TeugelsIncrements:
    """Per-path, per-step increments dH^i, shape (paths, steps, dim)."""

    dH: np.ndarray
    dt: float
    horizon: float

    @property
    def dim(self) -> int:
        return self.dH.shape[2]


def teugels_increments(basis: PolynomialBasis, bundles: list[PathBundle],
                       rate: float, nu_moments: list[float]) -> TeugelsIncrements:
    """Assemble dH^i from the simulated paths.

    dH^i_n = c_{i,1} dY1_n + sum_{k=2..i} c_{i,k} (P_k,n - nu_moments[k-1] dt)
    with dY1 the compensated L increment and P_k,n the in-step jump power
    sums.  ``rate`` is E[L(1)] and fixes the compensation of dY1 together
    with nu_moments[0] = int x nu(dx).
    """
    d = basis.dim
    if d > len(nu_moments) + 1:
        raise ValueError("need nu moments up to order dim")
    grid = bundles[0].grid
    dt = grid.dt
    _, dW_levy = stack_gaussian_increments(bundles)
    power = jump_power_sums(bundles, max(d, 1))
    # dY^(1): the full L increment minus rate*dt.  Under the compensated
    # path convention this is the sigma*B part plus the centered jump sum.
    dY = np.empty(power.shape)
    dY[:, :, 0] = dW_levy + power[:, :, 0] - nu_moments[0] * dt
    for k in range(2, d + 1):
        dY[:, :, k - 1] = power[:, :, k - 1] - nu_moments[k - 1] * dt
    n_paths, steps = dW_levy.shape
    dH = np.einsum("ik,pnk->pni", basis.c[:, :d], dY[:, :, :d])
    assert dH.shape == (n_paths, steps, d)
    return TeugelsIncrements(dH=dH, dt=dt, horizon=grid.horizon)


@dataclass(frozen=True)
class CovariationReport:
    """Realized covariation [H^i, H^j](T): per-path values and ensemble stats."""

    per_path: np.ndarray    # (paths, dim, dim)
    mean: np.ndarray        # (dim, dim)
    stderr: np.ndarray      # (dim, dim)
    horizon: float

    def max_orthogonality_deviation(self) -> float:
        """Worst |mean - delta_ij T| measured in standard errors."""
        target = self.horizon * np.eye(self.mean.shape[0])
        return float(np.max(np.abs(self.mean - target) / self.stderr))

    def to_dict(self) -> dict:
        d = self.mean.shape[0]
        pairs = {}
        for i in range(d):
            for j in range(i, d):
                pairs[f"{i + 1},{j + 1}"] = {
                    "mean": float(self.mean[i, j]),
                    "stderr": float(self.stderr[i, j]),
                }
        return {"horizon": self.horizon, "pairs": pairs}


def realized_covariation(increments: TeugelsIncrements) -> CovariationReport:
    """Discrete bracket [H^i, H^j](T) = sum_n dH^i_n dH^j_n per path."""
    dH = increments.dH
    per_path = np.einsum("pni,pnj->pij", dH, dH)
    n_paths = per_path.shape[0]
    mean = per_path.mean(axis=0)
    stderr = per_path.std(axis=0, ddof=1) / np.sqrt(n_paths)
    return CovariationReport(per_path=per_path, mean=mean, stderr=stderr,
                             horizon=increments.horizon)
