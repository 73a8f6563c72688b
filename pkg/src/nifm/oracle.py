"""Brute-force posterior sampler used as ground truth at desk scale.

Adaptive Gaussian random-walk Metropolis in the unconstrained parameter
space (empirical-covariance proposal with a scale factor tuned towards the
0.234 acceptance target during burn-in, frozen afterwards so the sampling
phase is a plain Metropolis chain), plus two-stage targets that mirror the
amortised pipeline: per-series GARCH posteriors, then the copula posterior
given plug-in marginal estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .copula import (
    CopulaFamily,
    FactorLoadings,
    loadings_to_correlation,
    n_free_loadings,
)
from .garch import ErrorKind, from_unconstrained, log_likelihood
from .priors import (
    PriorSpec,
    log_prior_copula_transformed,
    log_prior_marginal_transformed,
)

ACCEPT_TARGET = 0.234
MAX_BURN_REJECTION_STREAK = 1000


class SamplerError(RuntimeError):
    pass


@dataclass
class McmcChain:
    draws: np.ndarray  # (n_iter, m) post-burn draws in the unconstrained space
    acceptance_rate: float
    proposal_scale_history: list
    seed: int

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def mean(self):
        return self.draws.mean(axis=0)

    def sd(self):
        return self.draws.std(axis=0, ddof=1)

    def interval(self, level=0.95):
        lo = (1.0 - level) / 2.0
        return np.quantile(self.draws, [lo, 1.0 - lo], axis=0)

    def to_csv(self, names=None) -> str:
        m = self.draws.shape[1]
        names = names or [f"param_{i + 1}" for i in range(m)]
        lines = [",".join(names)]
        for row in self.draws:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def metropolis_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    """The Metropolis accept rule; log_ratio = log target(prop) - log target(cur)."""
    if not np.isfinite(log_ratio):
        return False
    if log_ratio >= 0.0:
        return True
    return math.log(rng.uniform()) < log_ratio


def mh_sample(
    log_target,
    init: np.ndarray,
    n_iter: int,
    n_burn: int,
    rng: np.random.Generator,
    adapt: bool = True,
    init_scale: float = 0.1,
) -> McmcChain:
    """Adaptive random-walk Metropolis; returns the post-burn chain.

    During burn-in the proposal is rescaled towards the 0.234 acceptance
    target and its shape tracks the running empirical covariance; both are
    frozen after burn-in, preserving ergodicity of the sampling phase.
    """
    x = np.asarray(init, dtype=float).copy()
    m = x.shape[0]
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise SamplerError(f"log target not finite at the initial point: {lp}")

    seed_mark = int(rng.integers(2**31))  # record position; keeps chains distinguishable
    log_scale = math.log(init_scale / math.sqrt(m))
    run_mean = x.copy()
    run_cov = np.eye(m)
    moment_count = 1
    chol = np.linalg.cholesky(run_cov)
    scale_history = [math.exp(log_scale)]
    reject_streak = 0

    draws = np.empty((n_iter, m))
    n_accept_sampling = 0
    total = n_burn + n_iter
    for t in range(total):
        step = math.exp(log_scale) * (chol @ rng.standard_normal(m))
        prop = x + step
        lp_prop = float(log_target(prop))
        accepted = metropolis_accept(lp_prop - lp, rng)
        if accepted:
            x, lp = prop, lp_prop
        in_burn = t < n_burn
        if in_burn:
            if accepted:
                reject_streak = 0
            else:
                reject_streak += 1
                if reject_streak >= MAX_BURN_REJECTION_STREAK:
                    raise SamplerError(
                        f"{MAX_BURN_REJECTION_STREAK} consecutive rejections during "
                        "burn-in; the target appears badly scaled"
                    )
            if adapt:
                # Robbins-Monro scale tuning towards the acceptance target
                gamma = min(1.0, 5.0 * m / (t + 10.0))
                log_scale += gamma * ((1.0 if accepted else 0.0) - ACCEPT_TARGET) * 0.1
                # running moments for the Haario covariance proposal; restart
                # them once the initial transient has passed so the early
                # wandering does not pollute the proposal shape
                if t == max(n_burn // 3, 1):
                    run_mean = x.copy()
                    run_cov = np.outer(x - run_mean, x - run_mean) + 1e-10 * np.eye(m)
                    moment_count = 1
                w = 1.0 / (moment_count + 1.0)
                moment_count += 1
                delta = x - run_mean
                run_mean += w * delta
                run_cov += w * (np.outer(delta, delta) - run_cov)
                if t >= 10 * m and t % 25 == 0 and t > n_burn // 3:
                    chol = np.linalg.cholesky(
                        (2.38**2 / m) * run_cov + 1e-10 * np.eye(m)
                    )
                    log_scale = min(max(log_scale, -10.0), 5.0) * 0.5
                scale_history.append(math.exp(log_scale))
        else:
            if t == n_burn and adapt:
                chol = np.linalg.cholesky((2.38**2 / m) * run_cov + 1e-10 * np.eye(m))
            if accepted:
                n_accept_sampling += 1
            draws[t - n_burn] = x
    return McmcChain(
        draws=draws,
        acceptance_rate=n_accept_sampling / max(n_iter, 1),
        proposal_scale_history=scale_history,
        seed=seed_mark,
    )


# ---------------------------------------------------------------------------
# model targets
# ---------------------------------------------------------------------------

def garch_log_posterior(spec: PriorSpec, y: np.ndarray | None):
    """Unconstrained-space log posterior for one series (prior-only if y is
    None); includes the transform Jacobian."""

    def target(theta):
        lp = log_prior_marginal_transformed(spec, theta)
        if not np.isfinite(lp) or y is None:
            return lp
        return lp + log_likelihood(from_unconstrained(theta, spec.marginal_kind), y)

    return target


def garch_posterior(
    y: np.ndarray | None,
    spec: PriorSpec,
    n_iter: int = 20_000,
    n_burn: int = 5_000,
    rng: np.random.Generator | None = None,
) -> McmcChain:
    """Random-walk Metropolis chain for one series' GARCH parameters."""
    rng = rng if rng is not None else np.random.default_rng(0)
    m = 4 if spec.marginal_kind is ErrorKind.STUDENT_T else 3
    init = np.array([2.0, 0.5, -2.0, 2.0])[:m]
    return mh_sample(garch_log_posterior(spec, y), init, n_iter, n_burn, rng)


def copula_log_posterior(spec: PriorSpec, u: np.ndarray, family: CopulaFamily):
    """Unconstrained-space log posterior for the copula parameters.

    For the Gaussian family the normal scores and the (parameter-free)
    margin term are precomputed once; the t family recomputes the scores
    since they depend on the degrees of freedom.
    """
    u = np.asarray(u, dtype=float)
    n_rows, dim = u.shape
    n_load = n_free_loadings(spec.dim, spec.n_factors)

    if family is CopulaFamily.GAUSSIAN:
        z = special.ndtri(u)
        margin_const = -0.5 * float((np.log(2.0 * np.pi) + z**2).sum())

        def target(theta):
            lp = log_prior_copula_transformed(spec, theta, family)
            if not np.isfinite(lp):
                return lp
            loadings = FactorLoadings(spec.dim, spec.n_factors, theta[:n_load])
            omega = loadings_to_correlation(loadings)
            try:
                chol = np.linalg.cholesky(omega)
            except np.linalg.LinAlgError:
                return -np.inf
            sol = linalg.solve_triangular(chol, z.T, lower=True)
            quad = float((sol**2).sum())
            logdet = 2.0 * float(np.log(np.diag(chol)).sum())
            joint = -0.5 * (n_rows * dim * np.log(2.0 * np.pi) + n_rows * logdet + quad)
            return lp + joint - margin_const

        return target

    from .copula import t_copula_logdensity

    def target(theta):
        lp = log_prior_copula_transformed(spec, theta, family)
        if not np.isfinite(lp):
            return lp
        loadings = FactorLoadings(spec.dim, spec.n_factors, theta[:n_load])
        omega = loadings_to_correlation(loadings)
        nu = float(np.exp(theta[n_load]) + 2.0)
        try:
            vals = t_copula_logdensity(omega, nu, u)
        except Exception:
            return -np.inf
        return lp + float(np.sum(vals))

    return target


def copula_posterior(
    u: np.ndarray,
    spec: PriorSpec,
    family: CopulaFamily = CopulaFamily.GAUSSIAN,
    n_iter: int = 20_000,
    n_burn: int = 5_000,
    rng: np.random.Generator | None = None,
) -> McmcChain:
    """Chain for the copula parameters given pseudo-observations ``u``.

    Draws live in the row-major unconstrained loading layout (plus df last
    for the t family), matching :mod:`nifm.priors`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    init = spec.loadings_mean.copy()
    if family is CopulaFamily.STUDENT_T:
        init = np.concatenate([init, [0.5]])
    return mh_sample(copula_log_posterior(spec, u, family), init, n_iter, n_burn, rng)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _autocorrelations(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def ess_single(x: np.ndarray) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    n = x.shape[0]
    rho = _autocorrelations(x)
    iat = 1.0
    total = 0.0
    for k in range(1, n // 2):
        pair = rho[2 * k - 1] + rho[2 * k]
        if pair <= 0.0:
            break
        total += pair
    iat = max(1.0, 1.0 + 2.0 * total)
    return n / iat


def diagnostics(chains) -> dict:
    """Per-parameter ESS (summed over chains) and split-Rhat."""
    if isinstance(chains, McmcChain):
        chains = [chains]
    if not chains:
        raise SamplerError("diagnostics need at least one chain")
    n, m = chains[0].draws.shape
    if n < 100:
        raise SamplerError(f"chains too short for diagnostics (n={n} < 100)")
    ess = np.zeros(m)
    for chain in chains:
        for j in range(m):
            ess[j] += ess_single(chain.draws[:, j])

    half = n // 2
    groups = []
    for chain in chains:
        groups.append(chain.draws[:half])
        groups.append(chain.draws[half : 2 * half])
    means = np.stack([g.mean(axis=0) for g in groups])
    variances = np.stack([g.var(axis=0, ddof=1) for g in groups])
    w = variances.mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * w + b / half
    rhat = np.sqrt(var_plus / w)
    return {"ess": ess, "rhat": rhat}


def diagnostics_table(chains, names=None) -> str:
    stats = diagnostics(chains)
    m = stats["ess"].shape[0]
    names = names or [f"param_{i + 1}" for i in range(m)]
    lines = ["parameter,n_eff,rhat"]
    for i in range(m):
        lines.append(f"{names[i]},{stats['ess'][i]:.1f},{stats['rhat'][i]:.4f}")
    return "\n".join(lines) + "\n"
