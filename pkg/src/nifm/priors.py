"""Prior distributions over model parameters, prior sampling and
hyperparameter calibration from historical data.

Beta priors govern the GARCH reaction/persistence parameters (with the
stationarity constraint alpha1 + alpha2 < 1 enforced by rejection), gamma
priors the variance intercept and the degrees-of-freedom parameters
(truncated to nu > 2), and an isotropic Gaussian the unconstrained factor
loadings.  Gamma distributions are parameterised by shape and rate
throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

from .copula import (
    CopulaFamily,
    CopulaParams,
    FactorLoadings,
    copula_logdensity,
    n_free_loadings,
)
from .garch import (
    ErrorKind,
    GarchParams,
    log_likelihood,
    marginal_cdf,
    from_unconstrained,
    to_unconstrained,
    transform_log_jacobian,
)

MAX_REJECTION_DRAWS = 10**6


class PriorSamplingError(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters for all model components.

    Tuples are (shape_a, shape_b) for beta and (shape, rate) for gamma
    distributions.  ``loadings_mean`` is the prior mean of the unconstrained
    loading entries in the row-major free-entry layout.
    """

    alpha1: tuple[float, float]
    alpha2: tuple[float, float]
    gamma: tuple[float, float]
    marginal_kind: ErrorKind
    dim: int
    n_factors: int
    loadings_mean: np.ndarray
    nu_tilde: tuple[float, float] | None = None
    nu: tuple[float, float] = (4.74, 1.0 / 2.03)

    def __post_init__(self):
        object.__setattr__(self, "loadings_mean", np.asarray(self.loadings_mean, dtype=float))
        expected = n_free_loadings(self.dim, self.n_factors)
        if self.loadings_mean.shape != (expected,):
            raise ValueError(
                f"loadings_mean must have {expected} entries for D={self.dim}, "
                f"k={self.n_factors}, got {self.loadings_mean.shape}"
            )
        for name in ("alpha1", "alpha2", "gamma", "nu_tilde", "nu"):
            val = getattr(self, name)
            if val is not None and (val[0] <= 0 or val[1] <= 0):
                raise ValueError(f"{name} hyperparameters must be positive, got {val}")
        if self.marginal_kind is ErrorKind.STUDENT_T and self.nu_tilde is None:
            raise ValueError("Student-t marginals need a nu_tilde prior")

    def to_config(self) -> dict[str, str]:
        out = {
            "prior.alpha1": f"{self.alpha1[0]},{self.alpha1[1]}",
            "prior.alpha2": f"{self.alpha2[0]},{self.alpha2[1]}",
            "prior.gamma": f"{self.gamma[0]},{self.gamma[1]}",
            "prior.nu": f"{self.nu[0]},{self.nu[1]}",
            "prior.marginal_kind": self.marginal_kind.value,
            "prior.dim": str(self.dim),
            "prior.n_factors": str(self.n_factors),
            "prior.loadings_mean": ",".join(repr(float(v)) for v in self.loadings_mean),
        }
        if self.nu_tilde is not None:
            out["prior.nu_tilde"] = f"{self.nu_tilde[0]},{self.nu_tilde[1]}"
        return out

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> "PriorSpec":
        def pair(key):
            a, b = cfg[key].split(",")
            return float(a), float(b)

        mean_str = cfg["prior.loadings_mean"]
        mean = np.array([float(v) for v in mean_str.split(",")]) if mean_str else np.empty(0)
        return cls(
            alpha1=pair("prior.alpha1"),
            alpha2=pair("prior.alpha2"),
            gamma=pair("prior.gamma"),
            marginal_kind=ErrorKind(cfg["prior.marginal_kind"]),
            dim=int(cfg["prior.dim"]),
            n_factors=int(cfg["prior.n_factors"]),
            loadings_mean=mean,
            nu_tilde=pair("prior.nu_tilde") if "prior.nu_tilde" in cfg else None,
            nu=pair("prior.nu"),
        )


def default_priors(
    marginal_kind: ErrorKind, dim: int, n_factors: int, loadings_mean=None
) -> PriorSpec:
    """Calibrated default hyperparameters for each marginal error law."""
    mean = (
        np.zeros(n_free_loadings(dim, n_factors))
        if loadings_mean is None
        else np.asarray(loadings_mean, dtype=float)
    )
    if marginal_kind is ErrorKind.GAUSSIAN:
        return PriorSpec(
            alpha1=(11.34, 85.12),
            alpha2=(19.58, 4.62),
            gamma=(4.69, 1.0 / 0.03),
            marginal_kind=marginal_kind,
            dim=dim,
            n_factors=n_factors,
            loadings_mean=mean,
        )
    return PriorSpec(
        alpha1=(28.75, 324.57),
        alpha2=(61.61, 22.40),
        gamma=(3.53, 1.0 / 0.0276),
        marginal_kind=marginal_kind,
        dim=dim,
        n_factors=n_factors,
        loadings_mean=mean,
        nu_tilde=(8.39, 1.0 / 1.45),
    )


def _sample_truncated_gamma(shape_rate, rng, lower=2.0):
    shape, rate = shape_rate
    for _ in range(MAX_REJECTION_DRAWS):
        draw = rng.gamma(shape, 1.0 / rate)
        if draw > lower:
            return float(draw)
    raise PriorSamplingError(f"truncated gamma rejection cap hit for {shape_rate}")


def sample_marginal_params(spec: PriorSpec, rng: np.random.Generator) -> GarchParams:
    """Draw GARCH parameters; stationarity violations are resampled."""
    for _ in range(MAX_REJECTION_DRAWS):
        a1 = rng.beta(*spec.alpha1)
        a2 = rng.beta(*spec.alpha2)
        if a1 + a2 < 1.0 and a1 + a2 > 0.0:
            break
    else:
        raise PriorSamplingError("stationarity rejection cap hit")
    g = rng.gamma(spec.gamma[0], 1.0 / spec.gamma[1])
    if spec.marginal_kind is ErrorKind.STUDENT_T:
        nu = _sample_truncated_gamma(spec.nu_tilde, rng)
        return GarchParams(a1, a2, g, ErrorKind.STUDENT_T, nu)
    return GarchParams(a1, a2, g)


def sample_copula_params(
    spec: PriorSpec, family: CopulaFamily, rng: np.random.Generator
) -> CopulaParams:
    values = spec.loadings_mean + rng.standard_normal(spec.loadings_mean.shape[0])
    loadings = FactorLoadings(spec.dim, spec.n_factors, values)
    if family is CopulaFamily.STUDENT_T:
        return CopulaParams(loadings, family, _sample_truncated_gamma(spec.nu, rng))
    return CopulaParams(loadings)


@lru_cache(maxsize=64)
def _stationarity_log_norm(alpha1_hyper, alpha2_hyper) -> float:
    """log P(alpha1 + alpha2 < 1) under the independent beta priors.

    Not negligible for the default Gaussian-error hyperparameters (about
    0.80), so the rejection renormalisation is included in the prior
    density rather than dropped as a constant.
    """
    x, w = np.polynomial.legendre.leggauss(400)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    f1 = stats.beta.pdf(x, *alpha1_hyper)
    cdf2 = stats.beta.cdf(1.0 - x, *alpha2_hyper)
    return float(np.log(w @ (f1 * cdf2)))


@lru_cache(maxsize=64)
def _gamma_truncation_log_norm(hyper, lower=2.0) -> float:
    """log P(X > lower) for a gamma(shape, rate) variable."""
    shape, rate = hyper
    return float(stats.gamma.logsf(lower, shape, scale=1.0 / rate))


def _beta_logpdf(x, a, b):
    if not 0.0 < x < 1.0:
        return -math.inf
    return (
        (a - 1.0) * math.log(x)
        + (b - 1.0) * math.log1p(-x)
        - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    )


def _gamma_logpdf(x, shape, rate):
    if x <= 0.0:
        return -math.inf
    return shape * math.log(rate) + (shape - 1.0) * math.log(x) - rate * x - math.lgamma(shape)


def log_prior_marginal_constrained(
    spec: PriorSpec, alpha1, alpha2, gamma, nu_tilde=None
) -> float:
    """Log prior density of constrained GARCH parameters.

    Truncation and rejection normalising constants are omitted (they are
    constant offsets, harmless in MCMC ratios); outside the support the
    value is -inf.
    """
    if alpha1 + alpha2 >= 1.0:
        return -math.inf
    out = (
        _beta_logpdf(alpha1, *spec.alpha1)
        + _beta_logpdf(alpha2, *spec.alpha2)
        + _gamma_logpdf(gamma, *spec.gamma)
        - _stationarity_log_norm(spec.alpha1, spec.alpha2)
    )
    if spec.marginal_kind is ErrorKind.STUDENT_T:
        if nu_tilde is None or nu_tilde <= 2.0:
            return -math.inf
        out += _gamma_logpdf(nu_tilde, *spec.nu_tilde)
        out -= _gamma_truncation_log_norm(spec.nu_tilde)
    return out


def log_prior_marginal(spec: PriorSpec, params: GarchParams) -> float:
    return log_prior_marginal_constrained(
        spec, params.alpha1, params.alpha2, params.gamma, params.nu_tilde
    )


def log_prior_marginal_transformed(spec: PriorSpec, theta: np.ndarray) -> float:
    """Prior density over the unconstrained parameters (Jacobian included)."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        return -math.inf
    params = from_unconstrained(theta, spec.marginal_kind)
    base = log_prior_marginal(spec, params)
    if not np.isfinite(base):
        return base
    return base + transform_log_jacobian(theta, spec.marginal_kind)


def log_prior_copula(spec: PriorSpec, params: CopulaParams) -> float:
    dev = params.loadings.values - spec.loadings_mean
    n = dev.shape[0]
    out = -0.5 * float(dev @ dev) - 0.5 * n * math.log(2.0 * math.pi)
    if params.family is CopulaFamily.STUDENT_T:
        if params.nu is None or params.nu <= 2.0:
            return -math.inf
        out += _gamma_logpdf(params.nu, *spec.nu) - _gamma_truncation_log_norm(spec.nu)
    return out


def log_prior_copula_transformed(
    spec: PriorSpec, theta: np.ndarray, family: CopulaFamily
) -> float:
    """Prior over (row-major loadings, df) with the df Jacobian included."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        return -math.inf
    n_load = n_free_loadings(spec.dim, spec.n_factors)
    loadings = FactorLoadings(spec.dim, spec.n_factors, theta[:n_load])
    if family is CopulaFamily.STUDENT_T:
        df = theta[n_load]
        nu = math.exp(df) + 2.0
        params = CopulaParams(loadings, family, nu)
        return log_prior_copula(spec, params) + df
    return log_prior_copula(spec, CopulaParams(loadings))


# ---------------------------------------------------------------------------
# calibration from historical data
# ---------------------------------------------------------------------------

def fit_garch_ml(y: np.ndarray, error_kind: ErrorKind = ErrorKind.GAUSSIAN) -> GarchParams:
    """Maximum-likelihood GARCH fit via optimisation in the unconstrained space."""
    y = np.asarray(y, dtype=float)
    start = to_unconstrained(
        GarchParams(
            0.1, 0.8, max(float(np.var(y)), 1e-6) * 0.1,
            error_kind, 8.0 if error_kind is ErrorKind.STUDENT_T else None,
        )
    ).as_array()

    def negloglik(t):
        ll = log_likelihood(from_unconstrained(t, error_kind), y)
        return -ll if np.isfinite(ll) else 1e12

    res = optimize.minimize(negloglik, start, method="Nelder-Mead",
                            options={"maxiter": 4000, "xatol": 1e-7, "fatol": 1e-9})
    return from_unconstrained(res.x, error_kind)


def _check_fit_data(values: np.ndarray, name: str):
    values = np.asarray(values, dtype=float)
    if np.std(values) < 1e-10:
        raise CalibrationError(f"degenerate {name} pseudo-observations (zero variance)")
    return values


def fit_beta_ml(values: np.ndarray) -> tuple[float, float]:
    values = _check_fit_data(values, "beta")
    a, b, _, _ = stats.beta.fit(values, floc=0, fscale=1)
    return float(a), float(b)


def fit_gamma_ml(values: np.ndarray) -> tuple[float, float]:
    values = _check_fit_data(values, "gamma")
    shape, _, scale = stats.gamma.fit(values, floc=0)
    return float(shape), float(1.0 / scale)


def fit_copula_loadings_ml(u: np.ndarray, n_factors: int) -> np.ndarray:
    """ML estimate of the unconstrained loadings from pseudo-observations."""
    dim = u.shape[1]
    n = n_free_loadings(dim, n_factors)

    def negloglik(values):
        loadings = FactorLoadings(dim, n_factors, values)
        ll = np.sum(copula_logdensity(CopulaParams(loadings), u))
        return -ll if np.isfinite(ll) else 1e12

    res = optimize.minimize(negloglik, np.zeros(n), method="L-BFGS-B")
    return res.x


def calibrate_priors(
    histories: np.ndarray,
    n_factors: int,
    marginal_kind: ErrorKind = ErrorKind.GAUSSIAN,
    marginal_estimator=None,
) -> PriorSpec:
    """Fit prior hyperparameters from a panel of historical series.

    Each column is fitted marginally (ML by default; pass
    ``marginal_estimator`` to plug in a posterior-mean oracle), beta and
    gamma laws are fitted to the resulting per-series estimates, and the
    loading prior mean is set to the copula ML estimate on the
    pseudo-observations.
    """
    histories = np.asarray(histories, dtype=float)
    if histories.ndim != 2:
        raise CalibrationError(f"histories must be T x D, got shape {histories.shape}")
    t_star, dim = histories.shape
    if dim < 3:
        raise CalibrationError(f"too few series to fit hyperparameters (D={dim} < 3)")
    if t_star < 100:
        raise CalibrationError(f"history too short to calibrate (T*={t_star} < 100)")

    estimator = marginal_estimator or (lambda y: fit_garch_ml(y, marginal_kind))
    fits = [estimator(histories[:, d]) for d in range(dim)]
    a1_hat = np.array([p.alpha1 for p in fits])
    a2_hat = np.array([p.alpha2 for p in fits])
    g_hat = np.array([p.gamma for p in fits])

    u = np.column_stack(
        [marginal_cdf(fits[d], histories[:, d]) for d in range(dim)]
    )
    mu_star = fit_copula_loadings_ml(u, n_factors)

    base = default_priors(marginal_kind, dim, n_factors)
    return replace(
        base,
        alpha1=fit_beta_ml(a1_hat),
        alpha2=fit_beta_ml(a2_hat),
        gamma=fit_gamma_ml(g_hat),
        loadings_mean=mu_star,
    )


def prior_interval(dist: str, hyper: tuple[float, float], level=0.9) -> tuple[float, float]:
    """Central probability interval of a beta or (untruncated) gamma prior."""
    lo, hi = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    if dist == "beta":
        return tuple(stats.beta.ppf([lo, hi], *hyper))
    if dist == "gamma":
        shape, rate = hyper
        return tuple(stats.gamma.ppf([lo, hi], shape, scale=1.0 / rate))
    raise ValueError(f"unknown distribution {dist!r}")
