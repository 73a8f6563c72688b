"""Predictive densities, log predictive density scores and rolling-window
validation.

The one-step-ahead density of a new observation vector is the Monte Carlo
average over posterior draws of the model's conditional density: the copula
density evaluated at the per-series probability integral transforms times
the marginal densities, with each draw's GARCH state advanced one step from
the window.  Multi-step horizons simulate the intermediate observations
draw by draw.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import special

from .copula import CopulaFamily, copula_logdensity_batch, loadings_to_correlation
from .garch import CDF_CLAMP, ErrorKind
from .inference import JointDraws, NifmResult, infer, joint_posterior_sample

LOG_2PI = float(np.log(2.0 * np.pi))


class PredictionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictiveDensityEstimate:
    horizon: int
    log_density: float
    n_draws: int
    n_dropped: int
    draws: np.ndarray | None = None  # optional simulated y_{T+h}, (J, D)


@dataclass(frozen=True)
class ValidationReport:
    window_length: int
    n_extra: int
    horizon: int
    per_roll: list[float]
    seconds_per_roll: list[float]
    dropped_per_roll: list[int]

    @property
    def lpds(self) -> float:
        return float(sum(self.per_roll))

    def to_csv(self) -> str:
        lines = ["roll,log_predictive,seconds,dropped"]
        for i, (lp, sec, dr) in enumerate(
            zip(self.per_roll, self.seconds_per_roll, self.dropped_per_roll)
        ):
            lines.append(f"{i},{lp!r},{sec!r},{dr}")
        return "\n".join(lines) + "\n"


def _stack_marginals(draws: JointDraws):
    """Constrained GARCH parameter arrays of shape (J, D)."""
    n_draws = len(draws.marginal_params)
    dim = len(draws.marginal_params[0])
    a1 = np.empty((n_draws, dim))
    a2 = np.empty((n_draws, dim))
    g = np.empty((n_draws, dim))
    nu = None
    if draws.marginal_params[0][0].nu_tilde is not None:
        nu = np.empty((n_draws, dim))
    for j, row in enumerate(draws.marginal_params):
        for d, p in enumerate(row):
            a1[j, d] = p.alpha1
            a2[j, d] = p.alpha2
            g[j, d] = p.gamma
            if nu is not None:
                nu[j, d] = p.nu_tilde
    return a1, a2, g, nu


def _variance_through_window(a1, a2, g, window):
    """Run the variance recursion over the window for every draw; returns the
    variance of the next step (J, D)."""
    sigma2 = g / (1.0 - a1 - a2)
    for t in range(1, window.shape[0]):
        sigma2 = g + a1 * window[t - 1] ** 2 + a2 * sigma2
    return g + a1 * window[-1] ** 2 + a2 * sigma2


def _marginal_logpdf(y, sigma2, nu):
    z2 = y**2 / sigma2
    if nu is None:
        core = -0.5 * (LOG_2PI + z2)
    else:
        core = (
            special.gammaln((nu + 1.0) / 2.0)
            - special.gammaln(nu / 2.0)
            - 0.5 * np.log(nu * np.pi)
            - (nu + 1.0) / 2.0 * np.log1p(z2 / nu)
        )
    return core - 0.5 * np.log(sigma2)


def _marginal_cdf(y, sigma2, nu):
    z = y / np.sqrt(sigma2)
    u = special.ndtr(z) if nu is None else special.stdtr(nu, z)
    return np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)


def _copula_pieces(draws: JointDraws):
    if draws.copula_params is None:
        return None, None
    omegas = np.stack([loadings_to_correlation(p.loadings) for p in draws.copula_params])
    nus = None
    if draws.copula_params[0].family is CopulaFamily.STUDENT_T:
        nus = np.array([p.nu for p in draws.copula_params])
    return omegas, nus


def per_draw_log_density(draws: JointDraws, window: np.ndarray, y_next: np.ndarray):
    """log p(y_next | theta_j) for every posterior draw j (one-step-ahead)."""
    window = np.asarray(window, dtype=float)
    y_next = np.asarray(y_next, dtype=float)
    a1, a2, g, nu = _stack_marginals(draws)
    sigma2_next = _variance_through_window(a1, a2, g, window)
    logp = _marginal_logpdf(y_next[None, :], sigma2_next, nu).sum(axis=1)
    omegas, nus = _copula_pieces(draws)
    if omegas is not None:
        u_next = _marginal_cdf(y_next[None, :], sigma2_next, nu)
        logp = logp + copula_logdensity_batch(omegas, u_next, nus)
    return logp


def _simulate_forward(draws, window, n_steps_ahead, rng):
    """Advance each draw's state n_steps_ahead - 1 simulated steps; returns
    the variance at the final step (J, D) and the simulated paths."""
    a1, a2, g, nu = _stack_marginals(draws)
    sigma2 = _variance_through_window(a1, a2, g, window)
    omegas, nus = _copula_pieces(draws)
    n_draws, dim = sigma2.shape
    chol = np.linalg.cholesky(omegas) if omegas is not None else None
    for _ in range(n_steps_ahead - 1):
        if chol is None:
            u = rng.uniform(size=(n_draws, dim))
        else:
            z = np.einsum("jde,je->jd", chol, rng.standard_normal((n_draws, dim)))
            if nus is not None:
                s = rng.chisquare(nus)
                z = z / np.sqrt(s / nus)[:, None]
                u = special.stdtr(nus[:, None], z)
            else:
                u = special.ndtr(z)
        u = np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)
        eps = special.ndtri(u) if nu is None else special.stdtrit(nu, u)
        y_sim = np.sqrt(sigma2) * eps
        sigma2 = g + a1 * y_sim**2 + a2 * sigma2
    return sigma2


def predictive_log_density(
    source,
    window: np.ndarray,
    y_next: np.ndarray,
    horizon: int = 1,
    n_draws: int = 1000,
    rng=None,
    keep_draws: bool = False,
) -> PredictiveDensityEstimate:
    """Monte Carlo log predictive density of ``y_next`` given the window.

    ``source`` is a :class:`NifmResult` (draws are sampled from it) or
    ready-made :class:`JointDraws`.  Draws whose density is NaN are dropped
    and counted; -inf densities are legitimate zeros and simply contribute
    nothing to the average.
    """
    if horizon < 1:
        raise PredictionError(f"horizon must be >= 1, got {horizon}")
    if isinstance(source, NifmResult):
        if rng is None:
            raise PredictionError("sampling draws from a result requires an rng")
        draws = joint_posterior_sample(source, n_draws, rng)
    else:
        draws = source
    window = np.asarray(window, dtype=float)
    y_next = np.asarray(y_next, dtype=float)

    if horizon == 1:
        logp = per_draw_log_density(draws, window, y_next)
    else:
        if rng is None:
            raise PredictionError("multi-step horizons require an rng")
        a1, a2, g, nu = _stack_marginals(draws)
        sigma2 = _simulate_forward(draws, window, horizon, rng)
        logp = _marginal_logpdf(y_next[None, :], sigma2, nu).sum(axis=1)
        omegas, nus = _copula_pieces(draws)
        if omegas is not None:
            u_next = _marginal_cdf(y_next[None, :], sigma2, nu)
            logp = logp + copula_logdensity_batch(omegas, u_next, nus)

    keep = ~np.isnan(logp)
    n_dropped = int((~keep).sum())
    kept = logp[keep]
    if kept.size == 0:
        raise PredictionError("all posterior draws produced NaN densities")
    log_density = float(special.logsumexp(kept) - np.log(kept.size))

    sim_draws = None
    if keep_draws:
        sim_rng = rng if rng is not None else np.random.default_rng(0)
        sim_draws = _simulate_next(draws, window, sim_rng)
    return PredictiveDensityEstimate(
        horizon=horizon,
        log_density=log_density,
        n_draws=int(logp.size),
        n_dropped=n_dropped,
        draws=sim_draws,
    )


def _simulate_next(draws, window, rng):
    """One simulated y_{T+1} per posterior draw (for plot emission)."""
    a1, a2, g, nu = _stack_marginals(draws)
    sigma2 = _variance_through_window(a1, a2, g, window)
    omegas, nus = _copula_pieces(draws)
    n_draws, dim = sigma2.shape
    if omegas is None:
        u = rng.uniform(size=(n_draws, dim))
    else:
        chol = np.linalg.cholesky(omegas)
        z = np.einsum("jde,je->jd", chol, rng.standard_normal((n_draws, dim)))
        if nus is not None:
            s = rng.chisquare(nus)
            z = z / np.sqrt(s / nus)[:, None]
            u = special.stdtr(nus[:, None], z)
        else:
            u = special.ndtr(z)
    u = np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)
    eps = special.ndtri(u) if nu is None else special.stdtrit(nu, u)
    return np.sqrt(sigma2) * eps


def gaussian_kde_curve(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Gaussian kernel density estimate with Silverman bandwidth.

    Plot emission only; never used in score computations.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    bw = 0.9 * min(samples.std(ddof=1), np.subtract(*np.percentile(samples, [75, 25])) / 1.349)
    bw = max(bw * n ** (-1 / 5), 1e-12)
    diffs = (grid[:, None] - samples[None, :]) / bw
    return np.exp(-0.5 * diffs**2).sum(axis=1) / (n * bw * np.sqrt(2 * np.pi))


def rolling_validate(
    marginal_net,
    copula_net,
    full_data: np.ndarray,
    horizon: int = 1,
    n_draws: int = 1000,
    base_seed: int = 0,
    plugin_mode: str = "analytic",
) -> ValidationReport:
    """Fixed-width rolling-window validation over the tail of ``full_data``.

    The window length is the marginal network's input length T; with
    ``full_data`` of length T + K, the model is re-fit (amortised) on rows
    (i, ..., i+T-1) and scored on row i+T+h-1 for i = 0, ..., K-h.
    """
    full_data = np.asarray(full_data, dtype=float)
    window_length = marginal_net.n_steps
    n_total = full_data.shape[0]
    n_extra = n_total - window_length
    if n_extra < horizon:
        raise PredictionError(
            f"need at least T+h = {window_length + horizon} rows, got {n_total}"
        )
    per_roll, seconds, dropped = [], [], []
    for i in range(n_extra - horizon + 1):
        start = time.perf_counter()
        window = full_data[i : i + window_length]
        y_obs = full_data[i + window_length + horizon - 1]
        rng = np.random.default_rng(base_seed + i)
        try:
            result = infer(marginal_net, copula_net, window, plugin_mode=plugin_mode)
            est = predictive_log_density(
                result, window, y_obs, horizon=horizon, n_draws=n_draws, rng=rng
            )
        except Exception as err:
            raise PredictionError(f"roll {i} failed: {err}") from err
        per_roll.append(est.log_density)
        dropped.append(est.n_dropped)
        seconds.append(time.perf_counter() - start)
    return ValidationReport(
        window_length=window_length,
        n_extra=n_extra,
        horizon=horizon,
        per_roll=per_roll,
        seconds_per_roll=seconds,
        dropped_per_roll=dropped,
    )


def compare_models(
    candidates: list,
    full_data: np.ndarray,
    horizon: int = 1,
    n_draws: int = 1000,
    base_seed: int = 0,
) -> list:
    """Rolling-validate every (marginal_net, copula_net, label) candidate and
    rank by LPDS, best first."""
    rows = []
    for marginal_net, copula_net, label in candidates:
        report = rolling_validate(
            marginal_net, copula_net, full_data,
            horizon=horizon, n_draws=n_draws, base_seed=base_seed,
        )
        rows.append((label, report))
    rows.sort(key=lambda item: item[1].lpds, reverse=True)
    return rows


def ranking_table(rows: list) -> str:
    lines = ["label,lpds,seconds"]
    for label, report in rows:
        lines.append(f"{label},{report.lpds!r},{sum(report.seconds_per_roll)!r}")
    return "\n".join(lines) + "\n"
