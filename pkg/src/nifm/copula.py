"""Factor-structured Gaussian and t copulas.

The correlation matrix is built from a D x k lower-trapezoidal loading
matrix G as R1 (G G' + I) R1 with R1 = diag(G G' + I)^{-1/2}.  Diagonal
loadings are kept positive by storing log(G_ii) in the unconstrained
representation.  k = 0 is the independence (identity correlation) case.

All densities are evaluated in natural-log space through a Cholesky factor
of the correlation matrix; no explicit inverses are formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg, special


class CopulaFamily(Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"


class CorrelationError(ValueError):
    """Raised when a matrix fails the correlation-matrix contract."""


def n_free_loadings(dim: int, n_factors: int) -> int:
    """Free entries of the lower-trapezoidal loading matrix."""
    if not 0 <= n_factors <= dim:
        raise ValueError(f"need 0 <= k <= D, got k={n_factors}, D={dim}")
    return dim * n_factors - n_factors * (n_factors - 1) // 2


@dataclass(frozen=True)
class FactorLoadings:
    """Unconstrained loading parameters.

    ``values`` holds the free entries of the unconstrained matrix in
    row-major order over the lower-trapezoidal support (entries (i, j) with
    j <= min(i, k), 1-based).  Diagonal entries are logs of the constrained
    loadings; off-diagonal entries pass through unchanged.
    """

    dim: int
    n_factors: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        expected = n_free_loadings(self.dim, self.n_factors)
        if self.values.shape != (expected,):
            raise ValueError(
                f"expected {expected} free entries for D={self.dim}, k={self.n_factors}, "
                f"got shape {self.values.shape}"
            )
        if expected and not np.all(np.isfinite(self.values)):
            raise ValueError("loading entries must be finite")

    def _support(self):
        for i in range(self.dim):
            for j in range(min(i + 1, self.n_factors)):
                yield i, j

    def matrix_unconstrained(self) -> np.ndarray:
        out = np.zeros((self.dim, self.n_factors))
        for pos, (i, j) in enumerate(self._support()):
            out[i, j] = self.values[pos]
        return out

    def matrix(self) -> np.ndarray:
        """Constrained loading matrix (positive diagonal, zeros above)."""
        g = self.matrix_unconstrained()
        out = g.copy()
        for j in range(self.n_factors):
            out[j, j] = np.exp(g[j, j])
        return out

    def vech(self) -> np.ndarray:
        """Free entries stacked column by column (the network target layout)."""
        g = self.matrix_unconstrained()
        return np.concatenate(
            [g[j:, j] for j in range(self.n_factors)]
            or [np.empty(0)]
        )

    @classmethod
    def from_vech(cls, dim: int, n_factors: int, vech: np.ndarray) -> "FactorLoadings":
        vech = np.asarray(vech, dtype=float)
        if vech.shape != (n_free_loadings(dim, n_factors),):
            raise ValueError(f"vech has wrong length {vech.shape}")
        g = np.zeros((dim, n_factors))
        pos = 0
        for j in range(n_factors):
            n = dim - j
            g[j:, j] = vech[pos : pos + n]
            pos += n
        values = np.array([g[i, j] for i, j in cls._support_static(dim, n_factors)])
        return cls(dim, n_factors, values)

    @staticmethod
    def _support_static(dim, n_factors):
        for i in range(dim):
            for j in range(min(i + 1, n_factors)):
                yield i, j

    def column_slices(self) -> list[slice]:
        """Slices of the vech layout belonging to each factor column."""
        out, pos = [], 0
        for j in range(self.n_factors):
            out.append(slice(pos, pos + self.dim - j))
            pos += self.dim - j
        return out


@dataclass(frozen=True)
class CopulaParams:
    loadings: FactorLoadings
    family: CopulaFamily = CopulaFamily.GAUSSIAN
    nu: float | None = None

    def __post_init__(self):
        if self.family is CopulaFamily.STUDENT_T:
            if self.nu is None or not self.nu > 2.0:
                raise ValueError(f"t copula requires nu > 2, got {self.nu}")
        elif self.nu is not None:
            raise ValueError("nu is only meaningful for the t copula")

    @property
    def df(self) -> float | None:
        """Unconstrained degrees of freedom, log(nu - 2)."""
        return None if self.nu is None else float(np.log(self.nu - 2.0))

    def n_params(self) -> int:
        base = self.loadings.values.shape[0]
        return base + (1 if self.family is CopulaFamily.STUDENT_T else 0)


def loadings_to_correlation(loadings: FactorLoadings) -> np.ndarray:
    """Correlation matrix R1 (G G' + I) R1 with unit diagonal."""
    if loadings.n_factors == 0:
        return np.eye(loadings.dim)
    g = loadings.matrix()
    r = g @ g.T
    r[np.diag_indices_from(r)] += 1.0
    scale = 1.0 / np.sqrt(np.diag(r))
    omega = r * scale[:, None] * scale[None, :]
    # exact unit diagonal regardless of rounding in the scaling
    omega[np.diag_indices_from(omega)] = 1.0
    return omega


def validate_correlation(omega: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise CorrelationError(f"expected a square matrix, got shape {omega.shape}")
    if np.max(np.abs(np.diag(omega) - 1.0)) > tol:
        raise CorrelationError("diagonal deviates from 1 beyond tolerance")
    if np.max(np.abs(omega - omega.T)) > tol:
        raise CorrelationError("matrix is not symmetric")
    return omega


def _chol(omega: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as err:
        raise CorrelationError(f"correlation matrix is not positive definite: {err}") from err


def _mvn_logpdf_standardised(z: np.ndarray, chol_factor: np.ndarray) -> np.ndarray:
    """log N(z; 0, Omega) for rows of z, given the Cholesky factor of Omega."""
    d = chol_factor.shape[0]
    sol = linalg.solve_triangular(chol_factor, z.T, lower=True)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol_factor)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


def gaussian_copula_logdensity(omega: np.ndarray, u: np.ndarray) -> float | np.ndarray:
    """Log density of the Gaussian copula at u (one row of D values or a T x D
    matrix; a matrix returns the per-row vector)."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    rows = u[None, :] if single else u
    if np.any(rows <= 0.0) or np.any(rows >= 1.0):
        raise ValueError("copula data must lie strictly inside (0, 1)")
    z = special.ndtri(rows)
    L = _chol(omega)
    joint = _mvn_logpdf_standardised(z, L)
    margins = -0.5 * (np.log(2.0 * np.pi) + z**2).sum(axis=1)
    out = joint - margins
    return float(out[0]) if single else out


def _t_logpdf(x: np.ndarray, nu: float) -> np.ndarray:
    return (
        special.gammaln((nu + 1.0) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * np.log(nu * np.pi)
        - (nu + 1.0) / 2.0 * np.log1p(x**2 / nu)
    )


def _mvt_logpdf_standardised(z: np.ndarray, chol_factor: np.ndarray, nu: float) -> np.ndarray:
    d = chol_factor.shape[0]
    sol = linalg.solve_triangular(chol_factor, z.T, lower=True)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol_factor)))
    return (
        special.gammaln((nu + d) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * logdet
        - (nu + d) / 2.0 * np.log1p(quad / nu)
    )


def t_copula_logdensity(omega: np.ndarray, nu: float, u: np.ndarray) -> float | np.ndarray:
    """Log density of the t copula (row or matrix input, as above)."""
    if not nu > 2.0:
        raise ValueError(f"t copula requires nu > 2, got {nu}")
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    rows = u[None, :] if single else u
    if np.any(rows <= 0.0) or np.any(rows >= 1.0):
        raise ValueError("copula data must lie strictly inside (0, 1)")
    z = special.stdtrit(nu, rows)
    L = _chol(omega)
    joint = _mvt_logpdf_standardised(z, L, nu)
    margins = _t_logpdf(z, nu).sum(axis=1)
    out = joint - margins
    return float(out[0]) if single else out


def copula_logdensity(params: CopulaParams, u: np.ndarray) -> float | np.ndarray:
    omega = loadings_to_correlation(params.loadings)
    if params.family is CopulaFamily.GAUSSIAN:
        return gaussian_copula_logdensity(omega, u)
    return t_copula_logdensity(omega, params.nu, u)


def copula_logdensity_batch(
    omegas: np.ndarray, u: np.ndarray, nu: np.ndarray | None = None
) -> np.ndarray:
    """One copula log density per (correlation matrix, data row) pair.

    ``omegas`` is (J, D, D), ``u`` is (J, D) and ``nu`` an optional (J,)
    vector of t-copula degrees of freedom (None means Gaussian).  Used by the
    predictive-density machinery where every posterior draw carries its own
    correlation matrix.
    """
    omegas = np.asarray(omegas, dtype=float)
    u = np.asarray(u, dtype=float)
    j, d = u.shape
    L = np.linalg.cholesky(omegas)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    if nu is None:
        z = special.ndtri(u)
        sol = np.linalg.solve(L, z[:, :, None])[:, :, 0]
        quad = np.sum(sol**2, axis=1)
        joint = -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
        margins = -0.5 * (np.log(2.0 * np.pi) + z**2).sum(axis=1)
        return joint - margins
    nu = np.asarray(nu, dtype=float)
    z = special.stdtrit(nu[:, None], u)
    sol = np.linalg.solve(L, z[:, :, None])[:, :, 0]
    quad = np.sum(sol**2, axis=1)
    joint = (
        special.gammaln((nu + d) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * logdet
        - (nu + d) / 2.0 * np.log1p(quad / nu)
    )
    margins = _t_logpdf_batch(z, nu).sum(axis=1)
    return joint - margins


def _t_logpdf_batch(x: np.ndarray, nu: np.ndarray) -> np.ndarray:
    nu = nu[:, None]
    return (
        special.gammaln((nu + 1.0) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * np.log(nu * np.pi)
        - (nu + 1.0) / 2.0 * np.log1p(x**2 / nu)
    )


def simulate_copula_data(params: CopulaParams, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n_rows of copula data with uniform margins.

    Gaussian family: u = Phi(z) with z ~ N(0, Omega).  t family: z is the
    normal draw divided by sqrt(s/nu) with s ~ chi^2_nu, then u = T_nu(z).
    """
    omega = loadings_to_correlation(params.loadings)
    L = _chol(omega)
    x = rng.standard_normal((n_rows, omega.shape[0])) @ L.T
    if params.family is CopulaFamily.GAUSSIAN:
        return np.clip(special.ndtr(x), 1e-15, 1.0 - 1e-15)
    s = rng.chisquare(params.nu, size=n_rows)
    z = x / np.sqrt(s / params.nu)[:, None]
    return np.clip(special.stdtr(params.nu, z), 1e-15, 1.0 - 1e-15)


def t_cdf(nu: float, x: np.ndarray | float) -> np.ndarray | float:
    """CDF of the standard (unit-scale) Student-t distribution."""
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu}")
    return special.stdtr(nu, x)


def t_quantile(nu: float, p: np.ndarray | float) -> np.ndarray | float:
    """Quantile function of the standard Student-t distribution."""
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu}")
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError("quantile argument must lie strictly inside (0, 1)")
    return special.stdtrit(nu, p)
