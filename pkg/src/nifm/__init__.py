"""Amortised two-stage Bayesian inference for multivariate time-series
copula models: Gaussian/t factor copulas with GARCH(1,1) marginals.

The package covers the full workflow: prior specification and sampling,
joint simulation, the two posterior-approximation networks (a CNN for the
marginals, a Deep Sets encoder for the copula), training with early
stopping, the two-stage inference pass, predictive densities with
rolling-window validation, and an adaptive random-walk Metropolis oracle
for verification.
"""

from .copula import (
    CopulaFamily,
    CopulaParams,
    FactorLoadings,
    gaussian_copula_logdensity,
    loadings_to_correlation,
    simulate_copula_data,
    t_copula_logdensity,
)
from .garch import (
    ErrorKind,
    GarchParams,
    TransformedGarchParams,
    conditional_variances,
    from_unconstrained,
    log_likelihood,
    marginal_cdf,
    simulate,
    to_unconstrained,
)
from .inference import NifmResult, infer, joint_posterior_sample
from .nets import (
    CopulaNet,
    GaussianPosterior,
    MarginalNet,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .oracle import McmcChain, copula_posterior, diagnostics, garch_posterior, mh_sample
from .predict import compare_models, predictive_log_density, rolling_validate
from .priors import PriorSpec, calibrate_priors, default_priors
from .simgen import gen_copula_batch, gen_marginal_batch, simulate_joint

__version__ = "0.1.0"
