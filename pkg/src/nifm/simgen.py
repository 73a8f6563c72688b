"""Training-set generation: batched (parameters, data) pairs for the two
network stages and full joint simulation of copula-GARCH panels.

Batch generation uses a deterministic per-sample seeding scheme
(seed = base_seed + sample_index), so splitting a batch across workers and
generating it serially produce bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .copula import (
    CopulaFamily,
    CopulaParams,
    n_free_loadings,
    simulate_copula_data,
)
from .garch import ErrorKind, GarchParams, simulate_batch, to_unconstrained
from .priors import PriorSpec, sample_copula_params, sample_marginal_params


@dataclass(frozen=True)
class MarginalTrainingBatch:
    targets: np.ndarray  # (B, 3) or (B, 4): transformed GARCH parameters
    inputs: np.ndarray  # (B, T): simulated series


@dataclass(frozen=True)
class CopulaTrainingBatch:
    targets: np.ndarray  # (B, m_cop): loadings in vech order (+ df for t family)
    inputs: np.ndarray  # (B, T, D): copula data


@dataclass(frozen=True)
class JointTruth:
    """Ground truth attached to a joint simulation."""

    marginals: list[GarchParams]
    copula: CopulaParams
    copula_data: np.ndarray  # the (T, D) uniforms that drove the innovations


def _base_seed(seed_or_rng) -> int:
    if isinstance(seed_or_rng, (int, np.integer)):
        return int(seed_or_rng)
    return int(seed_or_rng.integers(2**62))


def _sample_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(base_seed + index))


def copula_target(params: CopulaParams) -> np.ndarray:
    """Network target layout: loadings stacked column-wise, df appended."""
    vech = params.loadings.vech()
    if params.family is CopulaFamily.STUDENT_T:
        return np.concatenate([vech, [params.df]])
    return vech


def copula_target_width(dim: int, n_factors: int, family: CopulaFamily) -> int:
    return n_free_loadings(dim, n_factors) + (1 if family is CopulaFamily.STUDENT_T else 0)


def gen_marginal_batch(
    spec: PriorSpec, n_samples: int, n_steps: int, seed_or_rng
) -> MarginalTrainingBatch:
    """Prior draws of transformed GARCH parameters with matching series."""
    base = _base_seed(seed_or_rng)
    params = []
    eps = np.empty((n_samples, n_steps))
    for i in range(n_samples):
        rng = _sample_rng(base, i)
        p = sample_marginal_params(spec, rng)
        params.append(p)
        if spec.marginal_kind is ErrorKind.STUDENT_T:
            eps[i] = rng.standard_t(p.nu_tilde, size=n_steps)
        else:
            eps[i] = rng.standard_normal(n_steps)
    targets = np.stack([to_unconstrained(p).as_array() for p in params])
    inputs = simulate_batch(params, n_steps, eps)
    return MarginalTrainingBatch(targets=targets, inputs=inputs)


def gen_copula_batch(
    spec: PriorSpec,
    n_samples: int,
    n_steps: int,
    family: CopulaFamily,
    seed_or_rng,
) -> CopulaTrainingBatch:
    """Prior draws of copula parameters with matching copula data."""
    base = _base_seed(seed_or_rng)
    width = copula_target_width(spec.dim, spec.n_factors, family)
    targets = np.empty((n_samples, width))
    inputs = np.empty((n_samples, n_steps, spec.dim))
    for i in range(n_samples):
        rng = _sample_rng(base, i)
        params = sample_copula_params(spec, family, rng)
        targets[i] = copula_target(params)
        inputs[i] = simulate_copula_data(params, n_steps, rng)
    return CopulaTrainingBatch(targets=targets, inputs=inputs)


def simulate_joint(
    spec: PriorSpec,
    n_steps: int,
    family: CopulaFamily,
    rng: np.random.Generator,
    truth: JointTruth | None = None,
) -> tuple[np.ndarray, JointTruth]:
    """Simulate a (T, D) panel from the full copula-GARCH pipeline.

    Copula data drive the marginal innovations through the error-law
    quantile transform, then each column runs the GARCH recursion.  Pass
    ``truth`` to reuse fixed parameters instead of fresh prior draws.
    """
    dim = spec.dim
    if truth is None:
        copula_params = sample_copula_params(spec, family, rng)
        marginals = [sample_marginal_params(spec, rng) for _ in range(dim)]
    else:
        copula_params = truth.copula
        marginals = truth.marginals
        if len(marginals) != dim:
            raise ValueError(f"truth has {len(marginals)} marginals, spec says D={dim}")
    u = simulate_copula_data(copula_params, n_steps, rng)
    eps = np.empty_like(u)
    for d, p in enumerate(marginals):
        if p.error_kind is ErrorKind.STUDENT_T:
            eps[:, d] = special.stdtrit(p.nu_tilde, u[:, d])
        else:
            eps[:, d] = special.ndtri(u[:, d])
    data = simulate_batch(marginals, n_steps, eps.T).T
    return data, JointTruth(marginals=marginals, copula=copula_params, copula_data=u)
