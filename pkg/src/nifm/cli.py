"""Command-line front-end: dataset simulation, network training, amortised
inference, rolling-window validation, model comparison, the MCMC oracle and
prior calibration.

Configuration comes from an optional flat key=value file overridden by CLI
flags (flags win).  Every subcommand is deterministic under --seed.  Plot
material is emitted as CSV only.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO
error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .copula import CopulaFamily, FactorLoadings, n_free_loadings
from .garch import ErrorKind, GarchParams
from .inference import InferenceError, NifmResult, infer, joint_posterior_sample
from .nets import (
    CheckpointError,
    CopulaBatchSource,
    CopulaNet,
    MarginalBatchSource,
    MarginalNet,
    ShapeError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curves,
)
from .oracle import SamplerError, copula_posterior, diagnostics_table, garch_posterior
from .predict import PredictionError, compare_models, ranking_table, rolling_validate
from .priors import CalibrationError, PriorSpec, calibrate_priors, default_priors
from .simgen import JointTruth, simulate_joint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    family: str = "gaussian"
    marginal_kind: str = "gaussian"
    dim: int = 3
    factors: int = 1
    steps: int = 200
    batch: int = 32
    lr: float = 9e-5
    max_epochs: int = 4000
    patience: int = 100
    n_per_epoch: int = 30_000
    val_frac: float = 0.1
    draws: int = 1000
    horizon: int = 1
    extra: int = 30
    seed: int = 0
    threads: int = 1

    def validate(self):
        for name in ("dim", "steps", "batch", "max_epochs", "patience",
                     "n_per_epoch", "draws", "horizon", "extra", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.factors < 0:
            raise ConfigError(f"factors must be >= 0, got {self.factors}")
        if self.factors > self.dim:
            raise ConfigError(
                f"factors must not exceed dim, got k={self.factors}, D={self.dim}"
            )
        if not 0.0 < self.val_frac < 1.0:
            raise ConfigError(f"val_frac must lie in (0, 1), got {self.val_frac}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        try:
            CopulaFamily(self.family)
            ErrorKind(self.marginal_kind)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    @property
    def copula_family(self):
        return CopulaFamily(self.family)

    @property
    def error_kind(self):
        return ErrorKind(self.marginal_kind)


# The desk preset keeps every experiment inside a single-core CPU budget:
# short series, three dimensions, 2000 fresh draws per epoch and a larger
# learning rate than the full-scale default to converge within ~10^2 epochs.
DESK_PRESET = {
    "steps": 200,
    "dim": 3,
    "factors": 1,
    "n_per_epoch": 2000,
    "max_epochs": 300,
    "patience": 40,
    "lr": 3e-4,
}

_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}
_INT_KEYS = {"dim", "factors", "steps", "batch", "max_epochs", "patience",
             "n_per_epoch", "draws", "horizon", "extra", "seed", "threads"}
_FLOAT_KEYS = {"lr", "val_frac"}


def parse_config_file(path) -> dict:
    """Flat key=value file; '#' comments; unknown keys are rejected."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("prior."):
            out[key] = value
            continue
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        out[key] = value
    return out


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "preset", None) == "desk":
        for key, value in DESK_PRESET.items():
            setattr(cfg, key, value)
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            if key.startswith("prior."):
                continue
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
            setattr(cfg, key, value)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def load_priors(args, cfg: ExperimentConfig) -> PriorSpec:
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
        if any(k.startswith("prior.") for k in raw):
            return PriorSpec.from_config(raw)
    return default_priors(cfg.error_kind, cfg.dim, cfg.factors)


# ---------------------------------------------------------------------------
# dataset and truth file IO
# ---------------------------------------------------------------------------

def write_dataset(path, data: np.ndarray):
    dim = data.shape[1]
    header = ",".join(f"y{d + 1}" for d in range(dim))
    lines = [header]
    for row in data:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text:
        raise ConfigError(f"{path}: empty dataset file")
    header = text[0].split(",")
    if not all(name.strip().startswith("y") for name in header):
        raise ConfigError(f"{path}: expected a y1..yD header row, got {text[0]!r}")
    rows = [[float(v) for v in line.split(",")] for line in text[1:]]
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: inconsistent row widths")
    return data


def write_truth(path, truth: JointTruth):
    payload = {
        "marginals": [
            {
                "alpha1": p.alpha1,
                "alpha2": p.alpha2,
                "gamma": p.gamma,
                "error_kind": p.error_kind.value,
                "nu_tilde": p.nu_tilde,
            }
            for p in truth.marginals
        ],
        "copula": {
            "dim": truth.copula.loadings.dim,
            "n_factors": truth.copula.loadings.n_factors,
            "values": [float(v) for v in truth.copula.loadings.values],
            "family": truth.copula.family.value,
            "nu": truth.copula.nu,
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_truth(path) -> JointTruth:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    marginals = [
        GarchParams(
            m["alpha1"], m["alpha2"], m["gamma"],
            ErrorKind(m["error_kind"]), m["nu_tilde"],
        )
        for m in payload["marginals"]
    ]
    cop = payload["copula"]
    loadings = FactorLoadings(cop["dim"], cop["n_factors"], np.array(cop["values"]))
    from .copula import CopulaParams

    copula = CopulaParams(loadings, CopulaFamily(cop["family"]), cop["nu"])
    return JointTruth(marginals=marginals, copula=copula, copula_data=np.empty(0))


def _posterior_summary_rows(result: NifmResult):
    """Parameter-name/mean/sd rows shared by `infer` and `oracle` output."""
    names_mar = ["phi1", "phi2", "phi3", "df_tilde"]
    rows = []
    for d, post in enumerate(result.marginal_posteriors):
        for name, mean, sd in zip(names_mar, post.mean, post.sd()):
            rows.append((f"series{d + 1}.{name}", float(mean), float(sd)))
    if result.copula_posterior is not None:
        post = result.copula_posterior
        n_load = n_free_loadings(result.dim, result.n_factors)
        for i in range(n_load):
            rows.append((f"cop.vech{i + 1}", float(post.mean[i]), float(post.sd()[i])))
        if result.family is CopulaFamily.STUDENT_T:
            rows.append((f"cop.df", float(post.mean[n_load]), float(post.sd()[n_load])))
    return rows


def write_summary_csv(path, rows):
    lines = ["parameter,mean,sd"]
    for name, mean, sd in rows:
        lines.append(f"{name},{mean!r},{sd!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = build_config(args)
    spec = load_priors(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    data, truth = simulate_joint(spec, cfg.steps + args.extra_rows, cfg.copula_family, rng)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_dataset(out_dir / "dataset.csv", data)
    write_truth(out_dir / "truth.json", truth)
    print(f"wrote {out_dir / 'dataset.csv'} ({data.shape[0]} rows x {data.shape[1]} series)")
    print(f"wrote {out_dir / 'truth.json'}")
    return EXIT_OK


def _train_common(args, cfg, net, source, label):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        print(f"{label}: {net.n_parameters()} trainable parameters")
        for row in net.describe():
            print("  " + " | ".join(str(c) for c in row))
        return EXIT_OK
    t0 = time.time()
    result = train(
        net, source,
        TrainConfig(
            batch_size=cfg.batch, lr=cfg.lr, max_epochs=cfg.max_epochs,
            patience=cfg.patience, val_frac=cfg.val_frac,
            n_per_epoch=cfg.n_per_epoch, seed=cfg.seed,
        ),
        log_every=args.log_every,
    )
    ckpt = out_dir / f"{label}.ckpt"
    save_checkpoint(
        net, ckpt,
        meta={
            "epochs_run": result.epochs_run,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "train_seed": cfg.seed,
        },
    )
    write_loss_curves(out_dir / f"{label}_loss.csv", result.curves)
    print(
        f"trained {label}: {result.epochs_run} epochs, best val loss "
        f"{result.best_val_loss:.4f} (epoch {result.best_epoch}), "
        f"{time.time() - t0:.0f}s"
    )
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_train_marginal(args):
    cfg = build_config(args)
    spec = load_priors(args, cfg)
    if args.resume:
        net, _ = load_checkpoint(
            args.resume, expect={"kind": "marginal", "n_steps": cfg.steps}
        )
    else:
        net = MarginalNet(cfg.steps, cfg.error_kind, seed=cfg.seed)
    return _train_common(args, cfg, net, MarginalBatchSource(spec, cfg.steps), "marginal")


def cmd_train_copula(args):
    cfg = build_config(args)
    if cfg.factors == 0:
        raise ConfigError("the zero-factor model has no copula network to train")
    spec = load_priors(args, cfg)
    if args.resume:
        net, _ = load_checkpoint(
            args.resume,
            expect={"kind": "copula", "dim": cfg.dim, "n_factors": cfg.factors},
        )
    else:
        net = CopulaNet(cfg.dim, cfg.factors, cfg.copula_family, seed=cfg.seed)
    label = f"copula_k{cfg.factors}"
    return _train_common(
        args, cfg, net, CopulaBatchSource(spec, cfg.steps, cfg.copula_family), label
    )


def _load_nets(args, data):
    marginal_net, _ = load_checkpoint(args.marginal_net, expect={"kind": "marginal"})
    copula_net = None
    if args.copula_net and args.copula_net != "none":
        copula_net, _ = load_checkpoint(args.copula_net, expect={"kind": "copula"})
    if data.shape[0] < marginal_net.n_steps:
        raise ConfigError(
            f"dataset has {data.shape[0]} rows but the network needs "
            f"{marginal_net.n_steps}"
        )
    return marginal_net, copula_net


def cmd_infer(args):
    cfg = build_config(args)
    data = read_dataset(args.data)
    marginal_net, copula_net = _load_nets(args, data)
    window = data[-marginal_net.n_steps :]
    t0 = time.perf_counter()
    result = infer(marginal_net, copula_net, window, plugin_mode=args.plugin_mode)
    wall = time.perf_counter() - t0
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = result.to_report()
    report["config"]["wall_time_seconds"] = wall
    if args.truth:
        truth = read_truth(args.truth)
        _attach_truth_errors(report, result, truth)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    write_summary_csv(out_dir / "posterior_summary.csv", _posterior_summary_rows(result))
    if args.samples:
        rng = np.random.default_rng(cfg.seed)
        draws = joint_posterior_sample(result, args.samples, rng)
        _write_draws_csv(out_dir / "posterior_draws.csv", result, draws)
    if args.predictive_draws:
        from .predict import predictive_log_density

        rng = np.random.default_rng(cfg.seed + 1)
        est = predictive_log_density(
            result, window, window[-1], n_draws=args.predictive_draws,
            rng=rng, keep_draws=True,
        )
        write_dataset(out_dir / "predictive_draws.csv", est.draws)
    print(f"inference wall time: {wall:.4f}s (no optimiser state touched)")
    print(f"wrote {out_dir / 'report.json'}")
    return EXIT_OK


def _attach_truth_errors(report, result: NifmResult, truth: JointTruth):
    from .garch import to_unconstrained

    for d, entry in enumerate(report["marginals"]):
        true_t = to_unconstrained(truth.marginals[d]).as_array()
        post = result.marginal_posteriors[d]
        z = (post.mean - true_t) / post.sd()
        entry["truth_z_scores"] = {
            name: float(v)
            for name, v in zip(["phi1", "phi2", "phi3", "df_tilde"], z)
        }
    if result.copula_posterior is not None and truth.copula.loadings.n_factors == result.n_factors:
        post = result.copula_posterior
        true_vech = truth.copula.loadings.vech()
        n_load = true_vech.shape[0]
        z = (post.mean[:n_load] - true_vech) / post.sd()[:n_load]
        report["copula"]["truth_z_scores"] = [float(v) for v in z]


def _write_draws_csv(path, result: NifmResult, draws):
    names = []
    for d in range(result.dim):
        base = ["phi1", "phi2", "phi3"]
        if result.marginal_kind is ErrorKind.STUDENT_T:
            base.append("df_tilde")
        names.extend(f"series{d + 1}.{n}" for n in base)
    n_draws = draws.marginal_transformed.shape[0]
    flat = draws.marginal_transformed.reshape(n_draws, -1)
    if draws.copula_transformed is not None:
        n_load = n_free_loadings(result.dim, result.n_factors)
        names.extend(f"cop.vech{i + 1}" for i in range(n_load))
        if result.family is CopulaFamily.STUDENT_T:
            names.append("cop.df")
        flat = np.concatenate([flat, draws.copula_transformed], axis=1)
    lines = [",".join(names)]
    for row in flat:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_validate(args):
    cfg = build_config(args)
    data = read_dataset(args.data)
    marginal_net, copula_net = _load_nets(args, data)
    report = rolling_validate(
        marginal_net, copula_net, data,
        horizon=cfg.horizon, n_draws=cfg.draws, base_seed=cfg.seed,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "validation.csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"LPDS over {len(report.per_roll)} rolls: {report.lpds:.4f}")
    print(f"wrote {out_dir / 'validation.csv'}")
    return EXIT_OK


def cmd_compare(args):
    cfg = build_config(args)
    data = read_dataset(args.data)
    marginal_net, _ = load_checkpoint(args.marginal_net, expect={"kind": "marginal"})
    candidates = []
    for spec_str in args.candidate:
        if ":" not in spec_str:
            raise ConfigError(
                f"candidate must look like label:checkpoint (or label:none), got {spec_str!r}"
            )
        label, path = spec_str.split(":", 1)
        if path == "none":
            candidates.append((marginal_net, None, label))
        else:
            copula_net, _ = load_checkpoint(path, expect={"kind": "copula"})
            candidates.append((marginal_net, copula_net, label))
    rows = compare_models(
        candidates, data, horizon=cfg.horizon, n_draws=cfg.draws, base_seed=cfg.seed
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, report in rows:
        (out_dir / f"validation_{label}.csv").write_text(report.to_csv(), encoding="utf-8")
    table = ranking_table(rows)
    (out_dir / "ranking.csv").write_text(table, encoding="utf-8")
    print("label,LPDS,seconds")
    for label, report in rows:
        print(f"{label},{report.lpds:.4f},{sum(report.seconds_per_roll):.2f}")
    return EXIT_OK


def run_oracle_ifm(
    window: np.ndarray,
    spec: PriorSpec,
    family: CopulaFamily,
    n_factors: int,
    n_iter: int,
    n_burn: int,
    n_chains: int = 4,
    seed: int = 0,
    threads: int = 1,
):
    """Two-stage MCMC (marginals first, copula on plug-in pseudo-observations).

    Runs ``n_chains`` independent chains per target so the potential scale
    reduction factor compares genuinely separate chains.  Returns
    (marginal chain lists, copula chain list or None, plug-in parameters).
    """
    from .garch import marginal_cdf
    from .inference import plugin_params
    from .nets import GaussianPosterior

    dim = window.shape[1]

    def run_marginal(task):
        d, c = task
        rng = np.random.default_rng(seed * 10_000 + d * 100 + c)
        return garch_posterior(window[:, d], spec, n_iter=n_iter, n_burn=n_burn, rng=rng)

    tasks = [(d, c) for d in range(dim) for c in range(n_chains)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(run_marginal, tasks))
    else:
        flat = [run_marginal(task) for task in tasks]
    marginal_chains = [flat[d * n_chains : (d + 1) * n_chains] for d in range(dim)]

    plugins = []
    for d in range(dim):
        pooled = np.concatenate([c.draws for c in marginal_chains[d]])
        post = GaussianPosterior(mean=pooled.mean(axis=0), var=pooled.var(axis=0, ddof=1))
        plugins.append(plugin_params(post, spec.marginal_kind, "analytic"))

    copula_chains = None
    if n_factors > 0:
        u = np.column_stack([marginal_cdf(plugins[d], window[:, d]) for d in range(dim)])

        def run_copula(c):
            rng = np.random.default_rng(seed * 10_000 + 9000 + c)
            return copula_posterior(u, spec, family=family, n_iter=n_iter,
                                    n_burn=n_burn, rng=rng)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                copula_chains = list(pool.map(run_copula, range(n_chains)))
        else:
            copula_chains = [run_copula(c) for c in range(n_chains)]
    return marginal_chains, copula_chains, plugins


def cmd_oracle(args):
    cfg = build_config(args)
    data = read_dataset(args.data)
    window = data[-cfg.steps :] if data.shape[0] > cfg.steps else data
    dim = window.shape[1]
    spec = load_priors(args, ExperimentConfig(
        family=cfg.family, marginal_kind=cfg.marginal_kind,
        dim=dim, factors=cfg.factors,
    ).validate())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    marginal_chains, copula_chains, _ = run_oracle_ifm(
        window, spec, cfg.copula_family, cfg.factors,
        n_iter=args.n_iter, n_burn=args.n_burn, n_chains=args.chains,
        seed=cfg.seed, threads=cfg.threads,
    )
    wall = time.perf_counter() - t0

    rows = []
    names_mar = ["phi1", "phi2", "phi3", "df_tilde"]
    tables = []
    for d, chains in enumerate(marginal_chains):
        pooled = np.concatenate([c.draws for c in chains])
        names = [f"series{d + 1}.{n}" for n in names_mar[: pooled.shape[1]]]
        for j, name in enumerate(names):
            rows.append((name, float(pooled[:, j].mean()), float(pooled[:, j].std(ddof=1))))
        (out_dir / f"chain_series{d + 1}.csv").write_text(
            "\n".join(
                [",".join(names)]
                + [",".join(repr(float(v)) for v in row) for row in pooled]
            ) + "\n",
            encoding="utf-8",
        )
        tables.append(diagnostics_table(chains, names))

    if copula_chains is not None:
        n_load = n_free_loadings(dim, cfg.factors)
        pooled = np.concatenate([c.draws for c in copula_chains])
        vech_draws = np.stack(
            [FactorLoadings(dim, cfg.factors, t[:n_load]).vech() for t in pooled]
        )
        cop_names = [f"cop.vech{i + 1}" for i in range(n_load)]
        if cfg.copula_family is CopulaFamily.STUDENT_T:
            vech_draws = np.concatenate([vech_draws, pooled[:, -1:]], axis=1)
            cop_names.append("cop.df")
        for j, name in enumerate(cop_names):
            rows.append((name, float(vech_draws[:, j].mean()),
                         float(vech_draws[:, j].std(ddof=1))))
        (out_dir / "chain_copula.csv").write_text(
            "\n".join(
                [",".join(cop_names)]
                + [",".join(repr(float(v)) for v in row) for row in vech_draws]
            ) + "\n",
            encoding="utf-8",
        )
        raw_names = [f"cop.rowmajor{i + 1}" for i in range(pooled.shape[1])]
        tables.append(diagnostics_table(copula_chains, raw_names))

    write_summary_csv(out_dir / "posterior_summary.csv", rows)
    combined = tables[0] + "".join(t.split("\n", 1)[1] for t in tables[1:])
    (out_dir / "diagnostics.csv").write_text(combined, encoding="utf-8")
    n_targets = len(marginal_chains) + (1 if copula_chains is not None else 0)
    print(f"oracle wall time: {wall:.2f}s ({n_targets} targets x {args.chains} chains)")
    print(f"wrote {out_dir / 'posterior_summary.csv'}")
    return EXIT_OK


def cmd_calibrate_priors(args):
    cfg = build_config(args)
    data = read_dataset(args.data)
    spec = calibrate_priors(data, cfg.factors, marginal_kind=cfg.error_kind)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "priors.cfg"
    lines = [f"{k} = {v}" for k, v in spec.to_config().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser):
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out-dir", default=".", help="output directory")


def _add_train_flags(parser):
    parser.add_argument("--preset", choices=["desk"], help="desk-scale defaults")
    parser.add_argument("--steps", type=int, default=None, help="series length T")
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--factors", type=int, default=None)
    parser.add_argument("--family", choices=[f.value for f in CopulaFamily], default=None)
    parser.add_argument("--marginal-kind", dest="marginal_kind",
                        choices=[k.value for k in ErrorKind], default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--n-per-epoch", dest="n_per_epoch", type=int, default=None)
    parser.add_argument("--dry-run", action="store_true",
                        help="validate config and print the parameter count")
    parser.add_argument("--resume", help="checkpoint to continue training from")
    parser.add_argument("--log-every", type=int, default=0)


def make_parser():
    parser = argparse.ArgumentParser(
        prog="nifm",
        description="Amortised two-stage inference for copula-GARCH models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset and its ground truth")
    _add_common(p)
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("--steps", type=int, default=None, help="series length T")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--factors", type=int, default=None)
    p.add_argument("--family", choices=[f.value for f in CopulaFamily], default=None)
    p.add_argument("--marginal-kind", dest="marginal_kind",
                   choices=[k.value for k in ErrorKind], default=None)
    p.add_argument("--extra-rows", type=int, default=0,
                   help="rows beyond T (for rolling validation)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-marginal", help="train the marginal network")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_marginal)

    p = sub.add_parser("train-copula", help="train a copula network")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_copula)

    p = sub.add_parser("infer", help="amortised two-stage inference on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--marginal-net", dest="marginal_net", required=True)
    p.add_argument("--copula-net", dest="copula_net", default=None,
                   help="copula checkpoint or 'none' for the zero-factor model")
    p.add_argument("--truth", help="truth.json for standardised-error columns")
    p.add_argument("--samples", type=int, default=0,
                   help="emit this many posterior draws as CSV")
    p.add_argument("--predictive-draws", dest="predictive_draws", type=int, default=0,
                   help="emit this many simulated next-step observations as CSV")
    p.add_argument("--plugin-mode", dest="plugin_mode", default="analytic",
                   choices=["analytic", "sampled"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("validate", help="rolling-window LPDS for one model")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--marginal-net", dest="marginal_net", required=True)
    p.add_argument("--copula-net", dest="copula_net", default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="rank candidate models by LPDS")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--marginal-net", dest="marginal_net", required=True)
    p.add_argument("--candidate", action="append", required=True,
                   help="label:copula_checkpoint (or label:none), repeatable")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--draws", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle", help="run the MCMC oracle (two-stage)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None, help="window length T")
    p.add_argument("--factors", type=int, default=None)
    p.add_argument("--family", choices=[f.value for f in CopulaFamily], default=None)
    p.add_argument("--marginal-kind", dest="marginal_kind",
                   choices=[k.value for k in ErrorKind], default=None)
    p.add_argument("--n-iter", dest="n_iter", type=int, default=60_000,
                   help="post-burn iterations per chain (default targets "
                        "worst-parameter ESS near 1000 per chain)")
    p.add_argument("--n-burn", dest="n_burn", type=int, default=15_000)
    p.add_argument("--chains", type=int, default=4,
                   help="independent chains per target (cross-chain Rhat)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("calibrate-priors", help="fit prior hyperparameters")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--factors", type=int, default=None)
    p.add_argument("--marginal-kind", dest="marginal_kind",
                   choices=[k.value for k in ErrorKind], default=None)
    p.set_defaults(func=cmd_calibrate_priors)

    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, CalibrationError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SamplerError, PredictionError, InferenceError,
            ShapeError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
