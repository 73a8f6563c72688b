"""GARCH(1,1) marginal model: parameter transforms, simulation, likelihood,
conditional variances and marginal CDF/quantile transforms.

Two error laws are supported: standard Gaussian and unit-scale Student-t
(the degrees-of-freedom parameter ``nu_tilde`` controls the latter and the
density is the plain t density, not the variance-standardised one).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import signal, special

CDF_CLAMP = 1e-12  # keeps downstream quantile transforms finite


def _logit(x: float) -> float:
    return math.log(x / (1.0 - x))


def _expit(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class ErrorKind(Enum):
    GAUSSIAN = "gaussian"
    STUDENT_T = "student_t"


class InvalidParameterError(ValueError):
    """Raised when parameter values violate the model constraints."""


@dataclass(frozen=True)
class GarchParams:
    """Constrained GARCH(1,1) parameters.

    ``alpha1`` weights the lagged squared observation, ``alpha2`` the lagged
    variance and ``gamma`` is the variance intercept.  Stationarity requires
    ``alpha1 + alpha2 < 1``.  ``nu_tilde`` (> 2) is present iff the error law
    is Student-t.
    """

    alpha1: float
    alpha2: float
    gamma: float
    error_kind: ErrorKind = ErrorKind.GAUSSIAN
    nu_tilde: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.alpha1 < 1.0 and 0.0 <= self.alpha2 < 1.0):
            raise InvalidParameterError(
                f"alpha1={self.alpha1}, alpha2={self.alpha2} must lie in [0, 1)"
            )
        if self.alpha1 + self.alpha2 >= 1.0:
            raise InvalidParameterError(
                f"alpha1 + alpha2 = {self.alpha1 + self.alpha2} violates stationarity"
            )
        if not self.gamma > 0.0:
            raise InvalidParameterError(f"gamma={self.gamma} must be positive")
        if self.error_kind is ErrorKind.STUDENT_T:
            if self.nu_tilde is None or not self.nu_tilde > 2.0:
                raise InvalidParameterError(
                    f"nu_tilde={self.nu_tilde} must exceed 2 for Student-t errors"
                )
        elif self.nu_tilde is not None:
            raise InvalidParameterError("nu_tilde is only meaningful for Student-t errors")
        if not (
            math.isfinite(self.alpha1)
            and math.isfinite(self.alpha2)
            and math.isfinite(self.gamma)
        ):
            raise InvalidParameterError("parameters must be finite")


@dataclass(frozen=True)
class TransformedGarchParams:
    """Unconstrained image of :class:`GarchParams` (all components finite)."""

    phi1: float
    phi2: float
    phi3: float
    df_tilde: float | None = None

    def __post_init__(self):
        ok = (
            math.isfinite(self.phi1)
            and math.isfinite(self.phi2)
            and math.isfinite(self.phi3)
            and (self.df_tilde is None or math.isfinite(self.df_tilde))
        )
        if not ok:
            raise InvalidParameterError("transformed parameters must be finite")

    def as_array(self) -> np.ndarray:
        if self.df_tilde is None:
            return np.array([self.phi1, self.phi2, self.phi3])
        return np.array([self.phi1, self.phi2, self.phi3, self.df_tilde])


def to_unconstrained(p: GarchParams) -> TransformedGarchParams:
    """Map constrained parameters to the unconstrained space.

    The map goes through the intermediate (psi1, psi2, psi3) =
    (alpha1+alpha2, gamma/(1-psi1), alpha1/psi1) and then applies
    logit/log/logit componentwise; the degrees of freedom map via
    log(nu_tilde - 2).
    """
    psi1 = p.alpha1 + p.alpha2
    if psi1 == 0.0:
        raise InvalidParameterError("alpha1 + alpha2 = 0: phi3 is undefined on this boundary")
    psi2 = p.gamma / (1.0 - psi1)
    psi3 = p.alpha1 / psi1
    df_tilde = None
    if p.error_kind is ErrorKind.STUDENT_T:
        df_tilde = math.log(p.nu_tilde - 2.0)
    return TransformedGarchParams(_logit(psi1), math.log(psi2), _logit(psi3), df_tilde)


def from_unconstrained(
    t: TransformedGarchParams | np.ndarray,
    error_kind: ErrorKind = ErrorKind.GAUSSIAN,
) -> GarchParams:
    """Inverse of :func:`to_unconstrained`; any finite input is valid."""
    if isinstance(t, TransformedGarchParams):
        phi1, phi2, phi3, df = t.phi1, t.phi2, t.phi3, t.df_tilde
    else:
        arr = np.asarray(t, dtype=float)
        phi1, phi2, phi3 = float(arr[0]), float(arr[1]), float(arr[2])
        df = float(arr[3]) if arr.shape[0] > 3 else None
    psi1 = _expit(phi1)
    psi2 = math.exp(phi2)
    psi3 = _expit(phi3)
    nu_tilde = None
    if error_kind is ErrorKind.STUDENT_T:
        if df is None:
            raise InvalidParameterError("Student-t parameters need a fourth (df) component")
        nu_tilde = math.exp(df) + 2.0
    return GarchParams(
        psi1 * psi3, psi1 * (1.0 - psi3), psi2 * (1.0 - psi1), error_kind, nu_tilde
    )


def transform_log_jacobian(t: TransformedGarchParams | np.ndarray, error_kind: ErrorKind) -> float:
    """log |d(constrained)/d(unconstrained)| of :func:`from_unconstrained`.

    Needed when a density over the constrained parameters is evaluated in
    the unconstrained space (e.g. by the MCMC oracle).
    """
    arr = t.as_array() if isinstance(t, TransformedGarchParams) else np.asarray(t, dtype=float)
    # d(alpha1, alpha2, gamma)/d(phi) factorises through psi; the psi->param
    # block contributes psi1*(1-psi1) and the logistic/log links the rest.
    log_psi1 = special.log_expit(arr[0])
    log_1m_psi1 = special.log_expit(-arr[0])
    log_psi3 = special.log_expit(arr[2])
    log_1m_psi3 = special.log_expit(-arr[2])
    out = 2.0 * (log_psi1 + log_1m_psi1) + arr[1] + log_psi3 + log_1m_psi3
    if error_kind is ErrorKind.STUDENT_T:
        out += arr[3]  # d nu / d df = exp(df)
    return float(out)


def _check_series(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] < 1:
        raise ValueError(f"series must be a 1-D vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    return y


def conditional_variances(p: GarchParams, y: np.ndarray) -> np.ndarray:
    """Variance recursion sigma2_t = gamma + alpha1*y_{t-1}^2 + alpha2*sigma2_{t-1}
    started from the stationary value gamma / (1 - alpha1 - alpha2).
    """
    y = _check_series(y)
    sigma2_1 = p.gamma / (1.0 - p.alpha1 - p.alpha2)
    if y.shape[0] == 1:
        return np.array([sigma2_1])
    # First-order linear recursion in sigma2: handled by an IIR filter with
    # driving term gamma + alpha1*y_{t-1}^2 and initial state sigma2_1.
    drive = p.gamma + p.alpha1 * y[:-1] ** 2
    zi = np.array([p.alpha2 * sigma2_1])
    rest, _ = signal.lfilter([1.0], [1.0, -p.alpha2], drive, zi=zi)
    return np.concatenate(([sigma2_1], rest))


def _t_logpdf(x: np.ndarray, nu: float) -> np.ndarray:
    return (
        special.gammaln((nu + 1.0) / 2.0)
        - special.gammaln(nu / 2.0)
        - 0.5 * np.log(nu * np.pi)
        - (nu + 1.0) / 2.0 * np.log1p(x**2 / nu)
    )


def log_likelihood(p: GarchParams, y: np.ndarray) -> float:
    """Log-likelihood of the series under the GARCH(1,1) recursion.

    Returns ``-inf`` if any intermediate quantity is non-finite.
    """
    y = _check_series(y)
    sigma2 = conditional_variances(p, y)
    if not np.all(np.isfinite(sigma2)) or np.any(sigma2 <= 0.0):
        return -np.inf
    z = y / np.sqrt(sigma2)
    if p.error_kind is ErrorKind.GAUSSIAN:
        ll = -0.5 * np.log(2.0 * np.pi) - 0.5 * z**2
    else:
        ll = _t_logpdf(z, p.nu_tilde)
    total = np.sum(ll - 0.5 * np.log(sigma2))
    return float(total) if np.isfinite(total) else -np.inf


def simulate(p: GarchParams, n_steps: int, innovations: np.ndarray) -> np.ndarray:
    """Run the observation recursion y_t = sigma_t * eps_t for given innovations.

    The innovations are standardised draws supplied by the caller, which is
    what lets a copula drive cross-series dependence.
    """
    eps = np.asarray(innovations, dtype=float)
    if eps.shape != (n_steps,):
        raise ValueError(f"expected {n_steps} innovations, got shape {eps.shape}")
    y = np.empty(n_steps)
    sigma2 = p.gamma / (1.0 - p.alpha1 - p.alpha2)
    for t in range(n_steps):
        if t > 0:
            sigma2 = p.gamma + p.alpha1 * y[t - 1] ** 2 + p.alpha2 * sigma2
        y[t] = np.sqrt(sigma2) * eps[t]
    return y


def simulate_batch(
    params: list[GarchParams], n_steps: int, innovations: np.ndarray
) -> np.ndarray:
    """Vectorised :func:`simulate` across a batch; innovations is (B, n_steps)."""
    eps = np.asarray(innovations, dtype=float)
    n = len(params)
    if eps.shape != (n, n_steps):
        raise ValueError(f"innovations shape {eps.shape} != ({n}, {n_steps})")
    a1 = np.array([p.alpha1 for p in params])
    a2 = np.array([p.alpha2 for p in params])
    g = np.array([p.gamma for p in params])
    y = np.empty((n, n_steps))
    sigma2 = g / (1.0 - a1 - a2)
    for t in range(n_steps):
        if t > 0:
            sigma2 = g + a1 * y[:, t - 1] ** 2 + a2 * sigma2
        y[:, t] = np.sqrt(sigma2) * eps[:, t]
    return y


def marginal_cdf(p: GarchParams, y: np.ndarray, sigma2: np.ndarray | None = None) -> np.ndarray:
    """Probability integral transform u_t = F(y_t / sigma_t), clamped away from {0, 1}."""
    y = _check_series(y)
    if sigma2 is None:
        sigma2 = conditional_variances(p, y)
    z = y / np.sqrt(sigma2)
    if p.error_kind is ErrorKind.GAUSSIAN:
        u = special.ndtr(z)
    else:
        u = special.stdtr(p.nu_tilde, z)
    return np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)


def marginal_quantile(p: GarchParams, u: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Inverse of :func:`marginal_cdf` at fixed conditional variances."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("quantile transform requires u strictly inside (0, 1)")
    if p.error_kind is ErrorKind.GAUSSIAN:
        z = special.ndtri(u)
    else:
        z = special.stdtrit(p.nu_tilde, u)
    return z * np.sqrt(sigma2)


def marginal_logpdf(p: GarchParams, y: np.ndarray, sigma2: np.ndarray) -> np.ndarray:
    """Pointwise log density of observations at given conditional variances."""
    y = np.asarray(y, dtype=float)
    z = y / np.sqrt(sigma2)
    if p.error_kind is ErrorKind.GAUSSIAN:
        core = -0.5 * np.log(2.0 * np.pi) - 0.5 * z**2
    else:
        core = _t_logpdf(z, p.nu_tilde)
    return core - 0.5 * np.log(sigma2)


def next_variance(p: GarchParams, last_y: float, last_sigma2: float) -> float:
    """One-step variance update given the last observation and variance."""
    return p.gamma + p.alpha1 * last_y**2 + p.alpha2 * last_sigma2
