import json
from pathlib import Path

import numpy as np
import pytest

from nifm.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    build_config,
    main,
    parse_config_file,
    read_dataset,
    read_truth,
    write_dataset,
)
from nifm.copula import CopulaFamily
from nifm.garch import ErrorKind
from nifm.nets import CopulaNet, MarginalNet, save_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_nets(workdir):
    """Untrained tiny networks checkpointed for CLI mechanics tests."""
    marginal = MarginalNet(40, ErrorKind.GAUSSIAN, seed=0)
    copula = CopulaNet(3, 1, CopulaFamily.GAUSSIAN, seed=1)
    mpath = workdir / "marginal.ckpt"
    cpath = workdir / "copula.ckpt"
    save_checkpoint(marginal, mpath)
    save_checkpoint(copula, cpath)
    return str(mpath), str(cpath)


@pytest.fixture(scope="module")
def dataset(workdir):
    out = workdir / "sim"
    code = main([
        "simulate", "--dim", "3", "--factors", "1", "--steps", "40",
        "--extra-rows", "6", "--seed", "7", "--out-dir", str(out),
    ])
    assert code == EXIT_OK
    return out


class TestConfig:
    def test_defaults_follow_training_hyperparameters(self):
        cfg = ExperimentConfig()
        assert cfg.batch == 32
        assert cfg.lr == 9e-5
        assert cfg.patience == 100
        assert cfg.max_epochs == 4000
        assert cfg.draws == 1000

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("stepz = 100\n")
        with pytest.raises(ConfigError, match="unknown configuration key"):
            parse_config_file(path)

    def test_file_parsing_with_comments(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("# comment\nsteps = 128\nlr = 0.0003  # inline\n\n")
        cfg = parse_config_file(path)
        assert cfg == {"steps": "128", "lr": "0.0003"}

    def test_flags_override_config_file(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("steps = 128\ndim = 5\n")

        class Args:
            config = str(path)
            preset = None
            steps = 64
            dim = None

        cfg = build_config(Args())
        assert cfg.steps == 64  # flag wins
        assert cfg.dim == 5  # file value survives

    def test_invalid_values_rejected(self):
        class Args:
            config = None
            preset = None
            steps = -1

        with pytest.raises(ConfigError, match="steps"):
            build_config(Args())

        class Args2:
            config = None
            preset = None
            dim = 3
            factors = 4

        with pytest.raises(ConfigError, match="factors"):
            build_config(Args2())

    def test_desk_preset(self):
        class Args:
            config = None
            preset = "desk"

        cfg = build_config(Args())
        assert cfg.steps == 200
        assert cfg.dim == 3
        assert cfg.n_per_epoch == 2000
        assert cfg.max_epochs <= 300


class TestSimulate:
    def test_outputs_exist_and_parse(self, dataset):
        data = read_dataset(dataset / "dataset.csv")
        assert data.shape == (46, 3)
        truth = read_truth(dataset / "truth.json")
        assert len(truth.marginals) == 3
        assert truth.copula.loadings.n_factors == 1

    def test_determinism_under_seed(self, workdir):
        out_a, out_b = workdir / "det_a", workdir / "det_b"
        for out in (out_a, out_b):
            code = main([
                "simulate", "--dim", "2", "--factors", "1", "--steps", "30",
                "--seed", "11", "--out-dir", str(out),
            ])
            assert code == EXIT_OK
        assert (out_a / "dataset.csv").read_text() == (out_b / "dataset.csv").read_text()
        assert (out_a / "truth.json").read_text() == (out_b / "truth.json").read_text()

    def test_zero_factor_dataset(self, workdir):
        out = workdir / "zero"
        code = main([
            "simulate", "--dim", "2", "--factors", "0", "--steps", "25",
            "--seed", "3", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        truth = read_truth(out / "truth.json")
        assert truth.copula.loadings.n_factors == 0

    def test_header_round_trip(self, tmp_path):
        data = np.random.default_rng(0).normal(size=(5, 2))
        path = tmp_path / "d.csv"
        write_dataset(path, data)
        assert path.read_text().splitlines()[0] == "y1,y2"
        np.testing.assert_array_equal(read_dataset(path), data)

    def test_invalid_config_exit_code(self, capsys):
        code = main(["simulate", "--dim", "2", "--factors", "3", "--steps", "10"])
        assert code == EXIT_CONFIG
        assert "factors" in capsys.readouterr().err


class TestTraining:
    def test_dry_run_prints_parameter_count(self, workdir, capsys):
        code = main([
            "train-marginal", "--steps", "1000", "--dry-run",
            "--out-dir", str(workdir / "t1"),
        ])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "6641369" in out

    def test_copula_dry_run(self, workdir, capsys):
        code = main([
            "train-copula", "--dim", "20", "--factors", "1", "--steps", "1000",
            "--dry-run", "--out-dir", str(workdir / "t2"),
        ])
        assert code == EXIT_OK
        assert "2615784" in capsys.readouterr().out

    def test_tiny_training_run_writes_artifacts(self, workdir):
        out = workdir / "t3"
        code = main([
            "train-marginal", "--steps", "40", "--n-per-epoch", "64",
            "--max-epochs", "2", "--patience", "5", "--seed", "1",
            "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        assert (out / "marginal.ckpt").exists()
        curves = (out / "marginal_loss.csv").read_text().splitlines()
        assert curves[0] == "epoch,train_loss,val_loss"
        assert len(curves) == 3

    def test_resume_from_checkpoint(self, workdir):
        out = workdir / "t3"  # reuse artifact from the previous test
        code = main([
            "train-marginal", "--steps", "40", "--n-per-epoch", "64",
            "--max-epochs", "1", "--patience", "5", "--seed", "2",
            "--resume", str(out / "marginal.ckpt"), "--out-dir", str(workdir / "t4"),
        ])
        assert code == EXIT_OK

    def test_zero_factor_training_rejected(self, capsys):
        code = main([
            "train-copula", "--dim", "3", "--factors", "0", "--steps", "40",
            "--dry-run",
        ])
        assert code == EXIT_CONFIG


class TestInfer:
    def test_report_and_summary(self, workdir, tiny_nets, dataset, capsys):
        mpath, cpath = tiny_nets
        out = workdir / "inf"
        code = main([
            "infer", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath, "--copula-net", cpath,
            "--truth", str(dataset / "truth.json"),
            "--samples", "50", "--seed", "5", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        assert "wall time" in capsys.readouterr().out
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["dim"] == 3
        assert "truth_z_scores" in report["marginals"][0]
        summary = (out / "posterior_summary.csv").read_text().splitlines()
        assert summary[0] == "parameter,mean,sd"
        names = [line.split(",")[0] for line in summary[1:]]
        assert "series1.phi1" in names
        assert "cop.vech1" in names
        draws = (out / "posterior_draws.csv").read_text().splitlines()
        assert len(draws) == 51

    def test_zero_factor_inference(self, workdir, tiny_nets, dataset):
        mpath, _ = tiny_nets
        out = workdir / "inf0"
        code = main([
            "infer", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath, "--copula-net", "none",
            "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert "copula" not in report

    def test_predictive_draw_emission(self, workdir, tiny_nets, dataset):
        mpath, cpath = tiny_nets
        out = workdir / "infpd"
        code = main([
            "infer", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath, "--copula-net", cpath,
            "--predictive-draws", "25", "--seed", "3", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        draws = read_dataset(out / "predictive_draws.csv")
        assert draws.shape == (25, 3)

    def test_missing_file_is_io_or_config_error(self, workdir, tiny_nets, capsys):
        mpath, cpath = tiny_nets
        code = main([
            "infer", "--data", str(workdir / "does_not_exist.csv"),
            "--marginal-net", mpath, "--copula-net", cpath,
            "--out-dir", str(workdir / "infmiss"),
        ])
        assert code == 4
        assert "io error" in capsys.readouterr().err

    def test_shape_mismatch_is_numerical_failure(self, workdir, tiny_nets, capsys):
        mpath, cpath = tiny_nets
        bad = workdir / "bad.csv"
        write_dataset(bad, np.random.default_rng(0).normal(size=(50, 4)))
        code = main([
            "infer", "--data", str(bad), "--marginal-net", mpath,
            "--copula-net", cpath, "--out-dir", str(workdir / "infbad"),
        ])
        assert code == 3

    def test_short_dataset_is_config_error(self, workdir, tiny_nets):
        mpath, cpath = tiny_nets
        short = workdir / "short.csv"
        write_dataset(short, np.random.default_rng(0).normal(size=(10, 3)))
        code = main([
            "infer", "--data", str(short), "--marginal-net", mpath,
            "--copula-net", cpath, "--out-dir", str(workdir / "infshort"),
        ])
        assert code == EXIT_CONFIG


class TestValidateAndCompare:
    def test_validate_emits_lpds(self, workdir, tiny_nets, dataset, capsys):
        mpath, cpath = tiny_nets
        out = workdir / "val"
        code = main([
            "validate", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath, "--copula-net", cpath,
            "--draws", "40", "--seed", "9", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        assert "LPDS over 6 rolls" in capsys.readouterr().out
        lines = (out / "validation.csv").read_text().splitlines()
        assert lines[0] == "roll,log_predictive,seconds,dropped"
        assert len(lines) == 7

    def test_compare_ranks_and_ties(self, workdir, tiny_nets, dataset, capsys):
        mpath, cpath = tiny_nets
        out = workdir / "cmp"
        code = main([
            "compare", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath,
            "--candidate", f"a:{cpath}",
            "--candidate", f"b:{cpath}",
            "--candidate", "indep:none",
            "--draws", "30", "--seed", "4", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "label,LPDS,seconds"
        ranking = (out / "ranking.csv").read_text().splitlines()
        assert ranking[0] == "label,lpds,seconds"
        # identical candidates a and b tie bit-for-bit
        vals = {}
        for line in ranking[1:]:
            label, lpds, _ = line.split(",")
            vals[label] = lpds
        assert vals["a"] == vals["b"]
        assert (out / "validation_a.csv").exists()
        assert (out / "validation_indep.csv").exists()


class TestOracleCommand:
    def test_oracle_outputs_join_with_infer(self, workdir, tiny_nets, dataset):
        out = workdir / "orc"
        code = main([
            "oracle", "--data", str(dataset / "dataset.csv"), "--steps", "40",
            "--factors", "1", "--n-iter", "400", "--n-burn", "300",
            "--seed", "2", "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        summary = (out / "posterior_summary.csv").read_text().splitlines()
        assert summary[0] == "parameter,mean,sd"
        oracle_names = {line.split(",")[0] for line in summary[1:]}
        # joinable on parameter name with the infer output
        mpath, cpath = tiny_nets
        infer_out = workdir / "inf_join"
        main([
            "infer", "--data", str(dataset / "dataset.csv"),
            "--marginal-net", mpath, "--copula-net", cpath,
            "--out-dir", str(infer_out),
        ])
        infer_summary = (infer_out / "posterior_summary.csv").read_text().splitlines()
        infer_names = {line.split(",")[0] for line in infer_summary[1:]}
        assert oracle_names == infer_names
        diag = (out / "diagnostics.csv").read_text().splitlines()
        assert diag[0] == "parameter,n_eff,rhat"
        assert (out / "chain_series1.csv").exists()
        assert (out / "chain_copula.csv").exists()

    def test_threads_flag_reproducible(self, workdir, dataset):
        outs = []
        for tag, threads in (("th1", "1"), ("th2", "2")):
            out = workdir / tag
            code = main([
                "oracle", "--data", str(dataset / "dataset.csv"), "--steps", "40",
                "--factors", "0", "--n-iter", "300", "--n-burn", "200",
                "--seed", "2", "--threads", threads, "--out-dir", str(out),
            ])
            assert code == EXIT_OK
            outs.append((out / "posterior_summary.csv").read_text())
        assert outs[0] == outs[1]


class TestCalibratePriors:
    def test_writes_loadable_prior_config(self, workdir):
        rng = np.random.default_rng(0)
        from nifm.garch import GarchParams, simulate

        cols = [
            simulate(GarchParams(0.1, 0.8, 0.1), 150, rng.standard_normal(150))
            for _ in range(4)
        ]
        data_path = workdir / "hist.csv"
        write_dataset(data_path, np.column_stack(cols))
        out = workdir / "cal"
        code = main([
            "calibrate-priors", "--data", str(data_path), "--factors", "1",
            "--out-dir", str(out),
        ])
        assert code == EXIT_OK
        cfg = parse_config_file(out / "priors.cfg")
        from nifm.priors import PriorSpec

        spec = PriorSpec.from_config(cfg)
        assert spec.dim == 4
