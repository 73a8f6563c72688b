"""Two-stage amortised inference: per-series marginal posteriors, plug-in
posterior means, copula-data construction, and the copula posterior.

Stage one runs the marginal network on every column and back-transforms the
posterior-mean parameters; stage two feeds the resulting pseudo-observations
to the copula network.  The full approximate posterior factorises into the
D marginal blocks and the copula block, so joint sampling draws each block
independently.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .copula import CopulaFamily, CopulaParams, FactorLoadings, n_free_loadings
from .garch import ErrorKind, GarchParams, from_unconstrained, marginal_cdf
from .nets import CopulaNet, GaussianPosterior, MarginalNet, ShapeError


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class NifmResult:
    """Everything the two-stage pass produces for one dataset."""

    marginal_posteriors: list[GaussianPosterior]
    marginal_plugins: list[GarchParams]
    copula_data: np.ndarray
    copula_posterior: GaussianPosterior | None
    family: CopulaFamily
    n_factors: int
    marginal_kind: ErrorKind
    wall_time: float

    @property
    def dim(self):
        return len(self.marginal_posteriors)

    def to_report(self) -> dict:
        """JSON-serialisable summary (means, sds, plug-ins, config)."""
        report = {
            "config": {
                "dim": self.dim,
                "n_factors": self.n_factors,
                "family": self.family.value,
                "marginal_kind": self.marginal_kind.value,
                "wall_time_seconds": self.wall_time,
            },
            "marginals": [],
        }
        names = ["phi1", "phi2", "phi3", "df_tilde"]
        for d, (post, plug) in enumerate(
            zip(self.marginal_posteriors, self.marginal_plugins)
        ):
            entry = {
                "series": d + 1,
                "posterior_mean": dict(zip(names, map(float, post.mean))),
                "posterior_sd": dict(zip(names, map(float, post.sd()))),
                "plugin": {
                    "alpha1": plug.alpha1,
                    "alpha2": plug.alpha2,
                    "gamma": plug.gamma,
                },
            }
            if plug.nu_tilde is not None:
                entry["plugin"]["nu_tilde"] = plug.nu_tilde
            report["marginals"].append(entry)
        if self.copula_posterior is not None:
            report["copula"] = {
                "posterior_mean": [float(v) for v in self.copula_posterior.mean],
                "posterior_sd": [float(v) for v in self.copula_posterior.sd()],
            }
        return report

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_report(), **kwargs)


def plugin_params(
    posterior: GaussianPosterior,
    marginal_kind: ErrorKind,
    mode: str = "analytic",
    n_draws: int = 1000,
    rng=None,
) -> GarchParams:
    """Posterior-mean plug-in for one series.

    ``analytic`` back-transforms the exact Gaussian mean in the
    unconstrained space; ``sampled`` averages back-transformed posterior
    draws in the constrained space (the transform is nonlinear, so the two
    differ slightly).
    """
    if mode == "analytic":
        return from_unconstrained(posterior.mean, marginal_kind)
    if mode != "sampled":
        raise InferenceError(f"unknown plugin mode {mode!r}")
    if rng is None:
        raise InferenceError("sampled plugin mode needs an rng")
    draws = posterior.sample(n_draws, rng)
    stacked = np.stack(
        [
            [p.alpha1, p.alpha2, p.gamma] + ([p.nu_tilde] if p.nu_tilde is not None else [])
            for p in (from_unconstrained(t, marginal_kind) for t in draws)
        ]
    )
    mean = stacked.mean(axis=0)
    nu = float(mean[3]) if stacked.shape[1] == 4 else None
    return GarchParams(float(mean[0]), float(mean[1]), float(mean[2]),
                       marginal_kind, nu)


def infer(
    marginal_net: MarginalNet,
    copula_net: CopulaNet | None,
    data: np.ndarray,
    plugin_mode: str = "analytic",
    rng=None,
) -> NifmResult:
    """Run the two-stage pipeline on a (T, D) panel.

    ``copula_net=None`` is the zero-factor (independence) model: the copula
    stage is skipped and the result carries no copula posterior.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise InferenceError(f"data must be a (T, D) matrix, got shape {data.shape}")
    n_steps, dim = data.shape
    if dim < 2:
        raise InferenceError(f"the copula stage requires D >= 2 series, got D={dim}")
    if n_steps != marginal_net.n_steps:
        raise ShapeError(
            f"data rows {n_steps} do not match the marginal network length "
            f"{marginal_net.n_steps}"
        )
    if copula_net is not None and copula_net.dim != dim:
        raise ShapeError(
            f"data columns {dim} do not match the copula network dimension {copula_net.dim}"
        )

    start = time.perf_counter()
    posteriors, plugins, u_cols = [], [], []
    for d in range(dim):
        try:
            post = marginal_net.posterior(data[:, d])
            plug = plugin_params(post, marginal_net.marginal_kind, plugin_mode, rng=rng)
            u_cols.append(marginal_cdf(plug, data[:, d]))
        except (ValueError, FloatingPointError) as err:
            raise InferenceError(f"marginal stage failed for series {d + 1}: {err}") from err
        posteriors.append(post)
        plugins.append(plug)
    copula_data = np.column_stack(u_cols)
    copula_posterior = None
    family = CopulaFamily.GAUSSIAN
    n_factors = 0
    if copula_net is not None:
        copula_posterior = copula_net.posterior(copula_data)
        family = copula_net.family
        n_factors = copula_net.n_factors
    wall = time.perf_counter() - start
    return NifmResult(
        marginal_posteriors=posteriors,
        marginal_plugins=plugins,
        copula_data=copula_data,
        copula_posterior=copula_posterior,
        family=family,
        n_factors=n_factors,
        marginal_kind=marginal_net.marginal_kind,
        wall_time=wall,
    )


@dataclass(frozen=True)
class JointDraws:
    """Posterior draws in both parameterisations.

    ``marginal_transformed`` is (J, D, m_d); ``marginal_params`` is a J-list
    of D-lists of constrained parameters; copula draws hold the vech-layout
    loading entries (+ df) and the corresponding constrained objects.
    """

    marginal_transformed: np.ndarray
    marginal_params: list
    copula_transformed: np.ndarray | None
    copula_params: list | None


def joint_posterior_sample(result: NifmResult, n_draws: int, rng) -> JointDraws:
    """Independent draws from every factor of the approximate posterior."""
    dim = result.dim
    trans = np.stack(
        [result.marginal_posteriors[d].sample(n_draws, rng) for d in range(dim)], axis=1
    )
    marginal_params = [
        [from_unconstrained(trans[j, d], result.marginal_kind) for d in range(dim)]
        for j in range(n_draws)
    ]
    if result.copula_posterior is None:
        return JointDraws(trans, marginal_params, None, None)
    cop_trans = result.copula_posterior.sample(n_draws, rng)
    n_load = n_free_loadings(dim, result.n_factors)
    copula_params = []
    for j in range(n_draws):
        loadings = FactorLoadings.from_vech(dim, result.n_factors, cop_trans[j, :n_load])
        if result.family is CopulaFamily.STUDENT_T:
            nu = float(np.exp(cop_trans[j, n_load]) + 2.0)
            copula_params.append(CopulaParams(loadings, result.family, nu))
        else:
            copula_params.append(CopulaParams(loadings))
    return JointDraws(trans, marginal_params, cop_trans, copula_params)
