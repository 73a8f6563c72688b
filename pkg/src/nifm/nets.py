"""Posterior-approximation networks and their training machinery.

Two architectures: a 1-D CNN that maps a single series to a full-covariance
Gaussian over the transformed GARCH parameters (three MLP heads: mean,
Cholesky diagonal, strict lower triangle), and a Deep Sets network that maps
copula data to a mean-field Gaussian over the copula parameters (per-row
encoder, mean pooling, one mean/variance head pair per factor).

Training minimises the Monte Carlo negative log posterior-density loss on
prior-predictive batches with Adam, early stopping on a held-out validation
set, and restores the best-validation parameters.  Checkpoints are a
self-describing binary container.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, tensor
from .copula import CopulaFamily, n_free_loadings
from .garch import ErrorKind

VARIANCE_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        self.w = tensor(_uniform_init(rng, (n_in, n_out), n_in, dtype), requires_grad=True)
        self.b = tensor(_uniform_init(rng, (n_out,), n_in, dtype), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]

    def buffers(self):
        return []

    def n_params(self):
        return self.w.data.size + self.b.data.size


class Conv1d:
    def __init__(self, c_in, c_out, rng, kernel=3, stride=2, padding=1, dtype=np.float32):
        fan_in = c_in * kernel
        self.w = tensor(_uniform_init(rng, (c_out, c_in, kernel), fan_in, dtype), requires_grad=True)
        self.b = tensor(_uniform_init(rng, (c_out,), fan_in, dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self):
        return [self.w, self.b]

    def buffers(self):
        return []

    def n_params(self):
        return self.w.data.size + self.b.data.size


class BatchNorm1d:
    def __init__(self, n, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = tensor(np.ones(n, dtype=dtype), requires_grad=True)
        self.beta = tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ad.batchnorm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def n_params(self):
        return self.gamma.data.size + self.beta.data.size


class MlpHead:
    """Stack of Linear layers with ReLU (and optional BatchNorm) between.

    With ``activate_last`` the final layer also gets norm + ReLU; used for
    trunks whose output feeds further layers.
    """

    def __init__(self, dims, rng, batchnorm=False, activate_last=False, dtype=np.float32):
        self.linears = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.activate_last = activate_last
        hidden = dims[1:] if activate_last else dims[1:-1]
        self.norms = [BatchNorm1d(n, dtype=dtype) for n in hidden] if batchnorm else None

    def __call__(self, x, training=False):
        last = len(self.linears) - 1
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < last or self.activate_last:
                if self.norms is not None:
                    x = self.norms[i](x, training)
                x = ad.relu(x)
        return x

    def params(self):
        out = []
        for i, lin in enumerate(self.linears):
            out.extend(lin.params())
            if self.norms is not None and i < len(self.norms):
                out.extend(self.norms[i].params())
        return out

    def buffers(self):
        if self.norms is None:
            return []
        out = []
        for bn in self.norms:
            out.extend(bn.buffers())
        return out


# ---------------------------------------------------------------------------
# Gaussian posterior container and losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPosterior:
    """Either full-covariance (``chol`` set) or mean-field (``var`` set)."""

    mean: np.ndarray
    chol: np.ndarray | None = None
    var: np.ndarray | None = None

    def __post_init__(self):
        if (self.chol is None) == (self.var is None):
            raise ValueError("exactly one of chol/var must be provided")
        if self.chol is not None and np.any(np.diag(self.chol) <= 0):
            raise ValueError("Cholesky factor must have positive diagonal")
        if self.var is not None and np.any(self.var <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self):
        return self.mean.shape[0]

    def covariance(self):
        if self.chol is not None:
            return self.chol @ self.chol.T
        return np.diag(self.var)

    def sd(self):
        if self.chol is not None:
            return np.sqrt(np.sum(self.chol**2, axis=1))
        return np.sqrt(self.var)

    def sample(self, n_draws, rng):
        eta = rng.standard_normal((n_draws, self.dim))
        if self.chol is not None:
            return self.mean + eta @ self.chol.T
        return self.mean + eta * np.sqrt(self.var)


def posterior_mean(posterior: GaussianPosterior) -> np.ndarray:
    """Analytic posterior mean (no Monte Carlo needed for a Gaussian)."""
    return posterior.mean.copy()


def sample_posterior(posterior: GaussianPosterior, n_draws: int, rng) -> np.ndarray:
    return posterior.sample(n_draws, rng)


def nll_loss(posterior: GaussianPosterior, target: np.ndarray) -> float:
    """Negative Gaussian log density of ``target`` under the posterior."""
    target = np.asarray(target, dtype=float)
    if target.shape != posterior.mean.shape:
        raise ShapeError(f"target shape {target.shape} != mean shape {posterior.mean.shape}")
    m = posterior.dim
    r = target - posterior.mean
    if posterior.chol is not None:
        from scipy.linalg import solve_triangular

        x = solve_triangular(posterior.chol, r, lower=True)
        return float(
            0.5 * m * LOG_2PI + np.sum(np.log(np.diag(posterior.chol))) + 0.5 * x @ x
        )
    return float(0.5 * np.sum(LOG_2PI + np.log(posterior.var) + r**2 / posterior.var))


def _scatter_matrices(m, dtype=np.float32):
    """Constant matrices mapping (diag, strict-lower) vectors to a flat m*m
    lower-triangular matrix; strict-lower entries in row-major order."""
    s_diag = np.zeros((m, m * m), dtype=dtype)
    for i in range(m):
        s_diag[i, i * m + i] = 1.0
    q = m * (m - 1) // 2
    s_lower = np.zeros((q, m * m), dtype=dtype)
    pos = 0
    for i in range(m):
        for j in range(i):
            s_lower[pos, i * m + j] = 1.0
            pos += 1
    return s_diag, s_lower


def full_cov_nll_graph(mean_t, raw_diag_t, lower_t, targets):
    """Graph-mode mean negative log density with a Cholesky-parameterised
    covariance; ``targets`` is a constant (B, m) array."""
    b, m = targets.shape
    diag = ad.add_const(ad.softplus(raw_diag_t), VARIANCE_FLOOR)
    s_diag, s_lower = _scatter_matrices(m, dtype=mean_t.data.dtype)
    flat = ad.add(ad.matmul(diag, tensor(s_diag)), ad.matmul(lower_t, tensor(s_lower)))
    chol = ad.reshape(flat, (b, m, m))
    resid = ad.sub(tensor(targets.astype(mean_t.data.dtype)), mean_t)
    x = ad.lower_triangular_solve(chol, resid)
    quad = ad.sum_all(ad.square(x))
    logdet = ad.sum_all(ad.log(diag))
    loss = ad.add(ad.scale(quad, 0.5), logdet)
    return ad.add_const(ad.scale(loss, 1.0 / b), 0.5 * m * LOG_2PI)


def mean_field_nll_graph(mean_t, raw_var_t, targets):
    """Graph-mode mean negative log density under independent Gaussians."""
    b, m = targets.shape
    var = ad.add_const(ad.softplus(raw_var_t), VARIANCE_FLOOR)
    resid = ad.sub(tensor(targets.astype(mean_t.data.dtype)), mean_t)
    quad = ad.sum_all(ad.div(ad.square(resid), var))
    logdet = ad.sum_all(ad.log(var))
    loss = ad.scale(ad.add(quad, logdet), 0.5)
    return ad.add_const(ad.scale(loss, 1.0 / b), 0.5 * m * LOG_2PI)


# ---------------------------------------------------------------------------
# marginal network (1-D CNN with three heads)
# ---------------------------------------------------------------------------

class MarginalNet:
    """CNN posterior approximator for one GARCH series."""

    CHANNELS = (1, 8, 16, 32)
    HEAD_WIDTHS = (512, 256, 128)

    def __init__(self, n_steps: int, marginal_kind: ErrorKind, seed: int = 0,
                 dtype=np.float32):
        self.n_steps = int(n_steps)
        self.marginal_kind = marginal_kind
        self.m_out = 4 if marginal_kind is ErrorKind.STUDENT_T else 3
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.convs = [
            Conv1d(a, b, rng, dtype=self.dtype)
            for a, b in zip(self.CHANNELS[:-1], self.CHANNELS[1:])
        ]
        length = self.n_steps
        for _ in self.convs:
            length = ad.conv1d_output_length(length, 3, 2, 1)
        self.flat_dim = self.CHANNELS[-1] * length
        q = self.m_out * (self.m_out - 1) // 2
        dims = (self.flat_dim,) + self.HEAD_WIDTHS
        self.head_mean = MlpHead(dims + (self.m_out,), rng, dtype=self.dtype)
        self.head_diag = MlpHead(dims + (self.m_out,), rng, dtype=self.dtype)
        self.head_lower = MlpHead(dims + (q,), rng, dtype=self.dtype)

    def descriptor(self):
        return {
            "kind": "marginal",
            "n_steps": str(self.n_steps),
            "marginal_kind": self.marginal_kind.value,
            "seed": str(self.seed),
        }

    @classmethod
    def from_descriptor(cls, desc):
        return cls(int(desc["n_steps"]), ErrorKind(desc["marginal_kind"]), int(desc["seed"]))

    def params(self):
        out = []
        for conv in self.convs:
            out.extend(conv.params())
        for head in (self.head_mean, self.head_diag, self.head_lower):
            out.extend(head.params())
        return out

    def buffers(self):
        return []

    def n_parameters(self):
        return sum(p.data.size for p in self.params())

    def forward(self, series, training=False):
        """Map a (B, T) batch to (mean, raw_diag, lower) head outputs."""
        series = np.asarray(series)
        if series.ndim != 2 or series.shape[1] != self.n_steps:
            raise ShapeError(
                f"expected input (B, {self.n_steps}), got {series.shape}"
            )
        x = tensor(series.astype(self.dtype)[:, None, :])
        for conv in self.convs:
            x = ad.relu(conv(x))
        x = ad.flatten(x)
        return self.head_mean(x), self.head_diag(x), self.head_lower(x)

    def posterior(self, series) -> GaussianPosterior:
        """Eval-mode posterior for a single series of length T."""
        series = np.asarray(series, dtype=float)
        if series.shape != (self.n_steps,):
            raise ShapeError(f"expected a series of length {self.n_steps}, got {series.shape}")
        mean_t, raw_diag_t, lower_t = self.forward(series[None, :])
        return self._assemble(mean_t.data[0], raw_diag_t.data[0], lower_t.data[0])

    def _assemble(self, mean, raw_diag, lower):
        m = self.m_out
        chol = np.zeros((m, m))
        chol[np.diag_indices(m)] = np.logaddexp(0.0, raw_diag) + VARIANCE_FLOOR
        chol[np.tril_indices(m, k=-1)] = lower
        return GaussianPosterior(mean=mean.astype(float), chol=chol)

    def loss_graph(self, inputs, targets):
        mean_t, raw_diag_t, lower_t = self.forward(inputs, training=True)
        return full_cov_nll_graph(mean_t, raw_diag_t, lower_t, targets)

    def describe(self):
        rows = []
        length = self.n_steps
        for i, conv in enumerate(self.convs):
            out_len = ad.conv1d_output_length(length, 3, 2, 1)
            rows.append(
                (f"conv1d_{i}", f"({self.CHANNELS[i]}, {length})",
                 f"({self.CHANNELS[i + 1]}, {out_len})", conv.n_params())
            )
            length = out_len
        rows.append(("flatten", f"({self.CHANNELS[-1]}, {length})", f"({self.flat_dim},)", 0))
        for name, head in (
            ("head_mean", self.head_mean),
            ("head_diag", self.head_diag),
            ("head_lower", self.head_lower),
        ):
            for j, lin in enumerate(head.linears):
                rows.append(
                    (f"{name}_linear_{j}", f"({lin.w.data.shape[0]},)",
                     f"({lin.w.data.shape[1]},)", lin.n_params())
                )
        return rows


# ---------------------------------------------------------------------------
# copula network (Deep Sets with per-factor head pairs)
# ---------------------------------------------------------------------------

class CopulaNet:
    """Permutation-invariant posterior approximator for copula parameters.

    Factor column l (widths D, D-1, ..., D-k+1) gets one mean head and one
    variance head.  For the t family the degrees-of-freedom coordinate is
    appended to the first factor's heads.  With four factors the pooled
    summary is projected to 1024 and the (wider) head trunks are shared
    across factors, with factor-specific final layers.
    """

    ENCODER_WIDTHS = (64, 128, 256, 512)
    HEAD_WIDTHS = (1024, 512, 256, 128)
    HEAD_WIDTHS_K4 = (1536, 768, 512, 256)

    def __init__(self, dim: int, n_factors: int, family: CopulaFamily, seed: int = 0,
                 dtype=np.float32):
        if not 1 <= n_factors <= dim:
            raise ShapeError(f"need 1 <= k <= D, got k={n_factors}, D={dim}")
        self.dim = int(dim)
        self.n_factors = int(n_factors)
        self.family = family
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        dims = (self.dim,) + self.ENCODER_WIDTHS
        self.encoder = [Linear(a, b, rng, self.dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.factor_widths = [
            self.dim - l + (1 if l == 0 and family is CopulaFamily.STUDENT_T else 0)
            for l in range(self.n_factors)
        ]
        if self.n_factors == 4:
            self.post_pool = Linear(self.ENCODER_WIDTHS[-1], 1024, rng, self.dtype)
            trunk_dims = (1024,) + self.HEAD_WIDTHS_K4
            self.trunk_mean = MlpHead(trunk_dims, rng, batchnorm=True, activate_last=True,
                                      dtype=self.dtype)
            self.trunk_var = MlpHead(trunk_dims, rng, batchnorm=True, activate_last=True,
                                     dtype=self.dtype)
            self.final_mean = [Linear(trunk_dims[-1], w, rng, self.dtype)
                               for w in self.factor_widths]
            self.final_var = [Linear(trunk_dims[-1], w, rng, self.dtype)
                              for w in self.factor_widths]
            self.heads_mean = self.heads_var = None
        else:
            self.post_pool = None
            base = (self.ENCODER_WIDTHS[-1],) + self.HEAD_WIDTHS
            self.heads_mean = [MlpHead(base + (w,), rng, batchnorm=True, dtype=self.dtype)
                               for w in self.factor_widths]
            self.heads_var = [MlpHead(base + (w,), rng, batchnorm=True, dtype=self.dtype)
                              for w in self.factor_widths]

    @property
    def n_outputs(self):
        return sum(self.factor_widths)

    def descriptor(self):
        return {
            "kind": "copula",
            "dim": str(self.dim),
            "n_factors": str(self.n_factors),
            "family": self.family.value,
            "seed": str(self.seed),
        }

    @classmethod
    def from_descriptor(cls, desc):
        return cls(
            int(desc["dim"]), int(desc["n_factors"]), CopulaFamily(desc["family"]),
            int(desc["seed"]),
        )

    def _head_lists(self):
        if self.n_factors == 4:
            return (
                [self.post_pool, self.trunk_mean, self.trunk_var]
                + self.final_mean
                + self.final_var
            )
        return self.heads_mean + self.heads_var

    def params(self):
        out = []
        for lin in self.encoder:
            out.extend(lin.params())
        for part in self._head_lists():
            out.extend(part.params())
        return out

    def buffers(self):
        out = []
        for part in self._head_lists():
            if hasattr(part, "buffers"):
                out.extend(part.buffers())
        return out

    def n_parameters(self):
        return sum(p.data.size for p in self.params())

    def _encode(self, u):
        b, t, d = u.shape
        x = tensor(u.astype(self.dtype).reshape(b * t, d))
        for lin in self.encoder:
            x = ad.relu(lin(x))
        x = ad.reshape(x, (b, t, self.ENCODER_WIDTHS[-1]))
        pooled = ad.mean_over_axis(x, axis=1)
        if self.post_pool is not None:
            pooled = ad.relu(self.post_pool(pooled))
        return pooled

    def forward(self, u, training=False):
        """Map (B, T, D) copula data to per-factor (mean, raw variance) outputs."""
        u = np.asarray(u)
        if u.ndim != 3 or u.shape[2] != self.dim:
            raise ShapeError(f"expected input (B, T, {self.dim}), got {u.shape}")
        pooled = self._encode(u)
        means, raw_vars = [], []
        if self.n_factors == 4:
            hm = self.trunk_mean(pooled, training)
            hv = self.trunk_var(pooled, training)
            for fm, fv in zip(self.final_mean, self.final_var):
                means.append(fm(hm))
                raw_vars.append(fv(hv))
        else:
            for hm, hv in zip(self.heads_mean, self.heads_var):
                means.append(hm(pooled, training))
                raw_vars.append(hv(pooled, training))
        return means, raw_vars

    def _target_slices(self):
        slices = []
        pos = 0
        for l in range(self.n_factors):
            n = self.dim - l
            slices.append((pos, pos + n))
            pos += n
        return slices

    def split_targets(self, targets):
        """Split a (B, m_cop) target into per-head parts (the df coordinate
        joins the first factor's part for the t family)."""
        targets = np.asarray(targets)
        parts = []
        for l, (a, b) in enumerate(self._target_slices()):
            part = targets[:, a:b]
            if l == 0 and self.family is CopulaFamily.STUDENT_T:
                part = np.concatenate([part, targets[:, -1:]], axis=1)
            parts.append(part)
        return parts

    def posterior(self, u) -> GaussianPosterior:
        """Eval-mode mean-field posterior for one (T, D) copula data set.

        Output coordinates follow the training-target layout: loadings
        stacked column-wise, then the df coordinate for the t family.
        """
        u = np.asarray(u, dtype=float)
        if u.ndim != 2 or u.shape[1] != self.dim:
            raise ShapeError(f"expected (T, {self.dim}) copula data, got {u.shape}")
        means, raw_vars = self.forward(u[None, :, :])
        mean_parts = [m.data[0] for m in means]
        var_parts = [np.logaddexp(0.0, v.data[0]) + VARIANCE_FLOOR for v in raw_vars]
        if self.family is CopulaFamily.STUDENT_T:
            df_mean, df_var = mean_parts[0][-1:], var_parts[0][-1:]
            mean_parts[0] = mean_parts[0][:-1]
            var_parts[0] = var_parts[0][:-1]
            mean_parts.append(df_mean)
            var_parts.append(df_var)
        return GaussianPosterior(
            mean=np.concatenate(mean_parts).astype(float),
            var=np.concatenate(var_parts).astype(float),
        )

    def loss_graph(self, inputs, targets):
        means, raw_vars = self.forward(inputs, training=True)
        parts = self.split_targets(targets)
        total = None
        for mean_t, raw_var_t, part in zip(means, raw_vars, parts):
            term = mean_field_nll_graph(mean_t, raw_var_t, part)
            total = term if total is None else ad.add(total, term)
        return total

    def describe(self):
        rows = [("encoder", f"(T, {self.dim})", f"(T, {self.ENCODER_WIDTHS[-1]})",
                 sum(l.n_params() for l in self.encoder))]
        rows.append(("mean_pool", f"(T, {self.ENCODER_WIDTHS[-1]})",
                     f"({self.ENCODER_WIDTHS[-1]},)", 0))
        if self.post_pool is not None:
            rows.append(("post_pool", "(512,)", "(1024,)", self.post_pool.n_params()))
        for l, w in enumerate(self.factor_widths):
            rows.append((f"factor_{l + 1}_heads", "pooled", f"({w},) + ({w},)", 0))
        return rows


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 9e-5
    max_epochs: int = 4000
    patience: int = 100
    val_frac: float = 0.1
    n_per_epoch: int = 30_000
    seed: int = 0
    fresh_per_epoch: bool = True
    # keep the final-epoch parameters instead of the best-validation snapshot
    # (degenerate synthetic tasks can make the validation loss uninformative)
    restore_best: bool = True


@dataclass
class TrainResult:
    curves: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    epochs_run: int


class FixedBatchSource:
    """Serves a fixed (targets, inputs) dataset; useful for sanity tasks."""

    def __init__(self, targets, inputs):
        self.targets = np.asarray(targets)
        self.inputs = np.asarray(inputs)

    def generate(self, n_samples, seed):
        idx = np.random.Generator(np.random.PCG64(seed)).choice(
            self.inputs.shape[0], size=n_samples, replace=True
        )
        return self.targets[idx], self.inputs[idx]


class MarginalBatchSource:
    def __init__(self, prior_spec, n_steps):
        self.prior_spec = prior_spec
        self.n_steps = n_steps

    def generate(self, n_samples, seed):
        from .simgen import gen_marginal_batch

        batch = gen_marginal_batch(self.prior_spec, n_samples, self.n_steps, seed)
        return batch.targets, batch.inputs


class CopulaBatchSource:
    def __init__(self, prior_spec, n_steps, family):
        self.prior_spec = prior_spec
        self.n_steps = n_steps
        self.family = family

    def generate(self, n_samples, seed):
        from .simgen import gen_copula_batch

        batch = gen_copula_batch(self.prior_spec, n_samples, self.n_steps, self.family, seed)
        return batch.targets, batch.inputs


def _mean_loss(net, inputs, targets, batch_size):
    """Eval-mode loss over a dataset, computed in mini-batches without a tape."""
    total, count = 0.0, 0
    for start in range(0, inputs.shape[0], batch_size):
        ib = inputs[start : start + batch_size]
        tb = targets[start : start + batch_size]
        loss = net.loss_graph(ib, tb)
        total += float(loss.data) * ib.shape[0]
        count += ib.shape[0]
    return total / count


def _snapshot(net):
    return (
        [p.data.copy() for p in net.params()],
        [b.copy() for b in net.buffers()],
    )


def _restore(net, snapshot):
    params, buffers = snapshot
    for p, saved in zip(net.params(), params):
        p.data[...] = saved
    for b, saved in zip(net.buffers(), buffers):
        b[...] = saved


def train(net, batch_source, config: TrainConfig, log_every=0) -> TrainResult:
    """Adam training with early stopping; restores best-validation weights."""
    n_val = max(int(round(config.n_per_epoch * config.val_frac)), config.batch_size)
    n_train = config.n_per_epoch
    val_targets, val_inputs = batch_source.generate(n_val, seed=config.seed * 1_000_003 + 1)

    params = net.params()
    state = ad.AdamState([p.data for p in params])
    curves = []
    best_val = np.inf
    best_epoch = -1
    best_snapshot = _snapshot(net)
    nonfinite_streak = 0

    train_targets = train_inputs = None
    for epoch in range(config.max_epochs):
        if train_inputs is None or config.fresh_per_epoch:
            data_seed = config.seed * 1_000_003 + 1000 + epoch * n_train
            train_targets, train_inputs = batch_source.generate(n_train, seed=data_seed)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n_train, config.batch_size):
            ib = train_inputs[start : start + config.batch_size]
            tb = train_targets[start : start + config.batch_size]
            if ib.shape[0] < 2:
                continue  # batchnorm needs more than one row
            for p in params:
                p.grad = None
            with Tape():
                loss = net.loss_graph(ib, tb)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    nonfinite_streak += 1
                    if nonfinite_streak >= 5:
                        raise TrainingError(
                            f"loss non-finite for 5 consecutive batches "
                            f"(epoch {epoch}, batch starting at {start})"
                        )
                    continue
                nonfinite_streak = 0
                ad.backward(loss)
            ad.adam_step(
                [p.data for p in params], [p.grad for p in params], state, lr=config.lr
            )
            epoch_loss += loss_val
            n_batches += 1
        train_loss = epoch_loss / max(n_batches, 1)
        val_loss = _mean_loss(net, val_inputs, val_targets, config.batch_size)
        curves.append((epoch, train_loss, val_loss))
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f}", flush=True)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = _snapshot(net)
        elif epoch - best_epoch >= config.patience:
            break
    if config.restore_best:
        _restore(net, best_snapshot)
    return TrainResult(
        curves=curves, best_epoch=best_epoch, best_val_loss=best_val,
        epochs_run=len(curves),
    )


def write_loss_curves(path, curves):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, train_loss, val_loss in curves:
            fh.write(f"{epoch},{train_loss!r},{val_loss!r}\n")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"NIFMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(net, path, meta: dict | None = None):
    """Self-describing binary container: magic, version (u32), UTF-8
    key=value descriptor block, float64 little-endian parameter payload
    (trainable parameters then buffers), trailing CRC32."""
    desc = dict(net.descriptor())
    for key, value in (meta or {}).items():
        desc[f"meta.{key}"] = str(value)
    desc_bytes = "\n".join(f"{k}={v}" for k, v in sorted(desc.items())).encode("utf-8")
    arrays = [p.data for p in net.params()] + list(net.buffers())
    payload = np.concatenate([a.ravel().astype("<f8") for a in arrays]).tobytes()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(desc_bytes)))
    buf.write(desc_bytes)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect: dict | None = None):
    """Load a checkpoint; returns (net, meta dict).

    ``expect`` entries (e.g. {"n_steps": "200"}) are checked against the
    descriptor and a mismatch raises :class:`CheckpointError`.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 16:
        raise CheckpointError("file too short to be a checkpoint")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError("checksum mismatch: corrupt checkpoint file")
    buf = io.BytesIO(body)
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version = struct.unpack("<I", buf.read(4))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    desc_len = struct.unpack("<I", buf.read(4))[0]
    desc_bytes = buf.read(desc_len)
    desc = dict(line.split("=", 1) for line in desc_bytes.decode("utf-8").splitlines())
    payload_len = struct.unpack("<Q", buf.read(8))[0]
    payload = np.frombuffer(buf.read(payload_len), dtype="<f8")

    meta = {k[5:]: v for k, v in desc.items() if k.startswith("meta.")}
    core = {k: v for k, v in desc.items() if not k.startswith("meta.")}
    if expect:
        for key, value in expect.items():
            if core.get(key) != str(value):
                raise CheckpointError(
                    f"descriptor mismatch for {key!r}: checkpoint has "
                    f"{core.get(key)!r}, expected {value!r}"
                )
    if core.get("kind") == "marginal":
        net = MarginalNet.from_descriptor(core)
    elif core.get("kind") == "copula":
        net = CopulaNet.from_descriptor(core)
    else:
        raise CheckpointError(f"unknown network kind {core.get('kind')!r}")
    arrays = [p.data for p in net.params()] + list(net.buffers())
    total = sum(a.size for a in arrays)
    if total != payload.size:
        raise CheckpointError(
            f"parameter payload has {payload.size} values, architecture needs {total}"
        )
    pos = 0
    for a in arrays:
        a[...] = payload[pos : pos + a.size].reshape(a.shape).astype(a.dtype)
        pos += a.size
    return net, meta
