"""End-to-end tests for the ``dgadr`` command line."""

import json

import pandas as pd
import pytest
from loguru import logger

from dgadr.cli import build_parser, build_store, main
from dgadr.config import Settings

SMALL_CONFIG = """\
# three small domains, two short seeds
num_domains = 3
num_classes = 3
feature_dim = 4
samples_per_domain = 60
class_skew = 2.0
domain_shift_scale = 0.5
noise_std = 0.5
data_seed = 11
hidden_dims = 8,6
batch_size = 24
epochs = 2
lr = 0.05
alpha = 1.0
seeds = 0,1
eval_every = 1
"""


@pytest.fixture(autouse=True)
def reset_logger(monkeypatch):
    """Keep the CLI's stderr sink from leaking into other tests."""
    monkeypatch.delenv("DGADR_JOBS", raising=False)
    monkeypatch.delenv("DGADR_LOG_LEVEL", raising=False)
    yield
    logger.remove()


@pytest.fixture
def small_conf(temp_dir):
    path = temp_dir / "small.conf"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def data_csv(temp_dir, small_conf):
    path = temp_dir / "data.csv"
    assert main(["gen", "--config", str(small_conf), "--out", str(path)]) == 0
    return path


class TestParser:
    """Test argument parsing."""

    def test_seed_routes_by_command(self):
        """Test --seed sets the generator seed for gen and the seeds otherwise."""
        parser = build_parser()
        gen = build_store(
            parser.parse_args(["gen", "--out", "x.csv", "--seed", "4"]), Settings()
        )
        train = build_store(
            parser.parse_args(["train", "d.csv", "--seed", "4", "--alpha", "0"]),
            Settings(),
        )
        assert gen["overrides"] == {"data_seed": "4"}
        assert train["overrides"] == {"seeds": "4", "alpha": 0.0}

    def test_default_run_dir(self):
        """Test runs default to <runs_dir>/<command>."""
        args = build_parser().parse_args(["loto", "d.csv"])
        store = build_store(args, Settings(runs_dir="somewhere"))
        assert str(store["run_dir"]).replace("\\", "/") == "somewhere/loto"

    def test_command_required(self):
        """Test a subcommand is mandatory."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestErrors:
    """Test failures exit non-zero with a message."""

    def test_gen_needs_out(self, capsys):
        """Test gen refuses to run without an output path."""
        assert main(["gen"]) == 1
        assert "gen needs --out" in capsys.readouterr().err

    def test_missing_data_file(self, temp_dir, capsys):
        """Test a missing dataset names the path."""
        missing = temp_dir / "absent.csv"
        code = main(["train", str(missing), "--out", str(temp_dir / "run")])
        assert code == 1
        assert str(missing) in capsys.readouterr().err

    def test_unknown_config_key(self, temp_dir, capsys):
        """Test an unknown config key names the key."""
        conf = temp_dir / "bad.conf"
        conf.write_text("epochs = 2\nmomentum = 0.9\n")
        code = main(
            ["gen", "--config", str(conf), "--out", str(temp_dir / "d.csv")]
        )
        assert code == 1
        assert "momentum" in capsys.readouterr().err

    def test_invalid_jobs(self, data_csv, temp_dir, capsys):
        """Test an out-of-range flag value is rejected by name."""
        code = main(["loto", str(data_csv), "--jobs", "0", "--out", str(temp_dir)])
        assert code == 1
        assert "jobs" in capsys.readouterr().err


class TestCommands:
    """Test each subcommand end to end."""

    def test_gen(self, small_conf, temp_dir, capsys):
        """Test gen writes the dataset and echoes the config beside it."""
        path = temp_dir / "data.csv"
        assert main(["gen", "--config", str(small_conf), "--out", str(path)]) == 0
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["f0", "f1", "f2", "f3", "label", "domain"]
        assert len(frame) == 180
        resolved = (temp_dir / "config.resolved").read_text()
        assert "data_seed = 11\n" in resolved
        assert "wrote 180 samples" in capsys.readouterr().out

    def test_gen_is_deterministic(self, data_csv, small_conf, temp_dir):
        """Test the same config and seed give byte-identical data."""
        again = temp_dir / "again" / "data.csv"
        assert main(["gen", "--config", str(small_conf), "--out", str(again)]) == 0
        assert again.read_bytes() == data_csv.read_bytes()

    def test_train_eval_analyze(self, data_csv, small_conf, temp_dir, capsys):
        """Test a trained model can be evaluated and analysed."""
        run = temp_dir / "train"
        code = main(
            [
                "train",
                str(data_csv),
                "--config",
                str(small_conf),
                "--target-domain",
                "0",
                "--seed",
                "5",
                "--out",
                str(run),
            ]
        )
        assert code == 0
        assert "seeds = 5\n" in (run / "config.resolved").read_text()
        assert (run / "run.log").is_file()
        trained = pd.read_csv(run / "results.csv")

        evaluated = temp_dir / "eval"
        params = str(run / "params.out")
        code = main(
            [
                "eval",
                str(data_csv),
                "--params",
                params,
                "--target-domain",
                "0",
                "--out",
                str(evaluated),
            ]
        )
        assert code == 0
        report = json.loads((evaluated / "report.json").read_text())
        assert report["accuracy"] == pytest.approx(trained.loc[0, "accuracy"])

        analysed = temp_dir / "analyze"
        code = main(
            ["analyze", str(data_csv), "--params", params, "--out", str(analysed)]
        )
        assert code == 0
        summary = json.loads((analysed / "analysis.json").read_text())
        assert summary["feature_source"] == "model"
        assert "mean off-diagonal KL" in capsys.readouterr().out

    def test_loto_independent_of_jobs(self, data_csv, small_conf, temp_dir):
        """Test parallel runs write the same tables as a serial run."""
        outputs = []
        for jobs in ("1", "2"):
            run = temp_dir / f"loto{jobs}"
            code = main(
                [
                    "loto",
                    str(data_csv),
                    "--config",
                    str(small_conf),
                    "--jobs",
                    jobs,
                    "--out",
                    str(run),
                ]
            )
            assert code == 0
            outputs.append(run)
        for name in ("results.csv", "aggregate.csv"):
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
        aggregate = pd.read_csv(outputs[0] / "aggregate.csv")
        assert aggregate["target"].astype(str).tolist() == ["0", "1", "2", "Average"]

    def test_jobs_from_environment(self, data_csv, small_conf, temp_dir, monkeypatch):
        """Test DGADR_JOBS sets the default worker count."""
        monkeypatch.setenv("DGADR_JOBS", "2")
        run = temp_dir / "loto"
        code = main(
            ["loto", str(data_csv), "--config", str(small_conf), "--out", str(run)]
        )
        assert code == 0
        assert "jobs = 2\n" in (run / "config.resolved").read_text()

    def test_gradcheck(self, temp_dir, capsys):
        """Test the gradient self-check passes and writes its table."""
        assert main(["gradcheck", "--out", str(temp_dir)]) == 0
        table = pd.read_csv(temp_dir / "gradcheck.csv")
        assert table["objective"].tolist() == [
            "focal",
            "weighted_ce",
            "domalign",
            "combined",
        ]
        assert (table["max_relative_error"] < 1e-4).all()
        assert "max rel. err" in capsys.readouterr().out
