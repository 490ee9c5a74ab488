import json

import numpy as np
import pandas as pd
import pytest

from momcpd import cli, gp_cpd
from momcpd.config import RunConfig
from momcpd.data import load_prices
from momcpd.errors import ConfigError


def write_spec(tmp_path, n_assets=2, segments=None):
    segments = segments or [[120, 0.001, 0.008], [120, -0.001, 0.008]]
    spec = {
        "assets": [
            {"symbol": f"S{i}", "seed": 50 + i, "segments": segments}
            for i in range(n_assets)
        ]
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    return path


def write_config(tmp_path, prices, out, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(
        f"prices = {prices}\n"
        f"out = {out}\n"
        "lookbacks = 10\n"
        "strategies = long_only, moskowitz\n"
        "# a comment line\n" + extra
    )
    return path


# ---------------------------------------------------------------- config


def test_config_defaults_validate():
    config = RunConfig()
    config.validate()
    assert config.sigma_tgt == 0.15
    assert config.lookbacks == [10, 21, 63, 126, 252]


def test_config_from_file_parses_values(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(
        "sigma_tgt = 0.2\n"
        "lookbacks = 10, 21\n"
        "macd_pairs = 8-24, 16-28\n"
        "strategies = macd, intermediate:w=0.3\n"
        "grid.hidden_size = 5, 10\n"
        "grid.learning_rate = 0.01\n"
    )
    config = RunConfig.from_file(path)
    assert config.sigma_tgt == 0.2
    assert config.lookbacks == [10, 21]
    assert config.macd_pairs == [(8, 24), (16, 28)]
    assert config.strategies == ["macd", "intermediate:w=0.3"]
    assert config.grid["hidden_size"] == [5, 10]
    assert config.grid["learning_rate"] == [0.01]
    assert config.grid["dropout_rate"]  # untouched keys keep defaults


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("volatility = 0.2\n")
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_file(path)


def test_config_rejects_malformed_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("sigma_tgt 0.2\n")
    with pytest.raises(ConfigError, match="expected key"):
        RunConfig.from_file(path)


def test_config_rejects_bad_pair(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("macd_pairs = 8\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_config_overrides_win(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\nout = from_file\n")
    config = RunConfig.from_file(path, {"seed": 9, "out": None})
    assert config.seed == 9
    assert config.out == "from_file"  # None overrides are ignored


# ---------------------------------------------------------------- gen-data


def test_gen_data_writes_loadable_csv(tmp_path):
    spec = write_spec(tmp_path)
    out = tmp_path / "prices.csv"
    assert cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(out)]) == 0
    prices = load_prices(out)
    assert sorted(prices) == ["S0", "S1"]
    assert len(prices["S0"]) == 241


def test_gen_data_deterministic(tmp_path):
    spec = write_spec(tmp_path)
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(out_a)])
    cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(out_b)])
    assert out_a.read_text() == out_b.read_text()


def test_gen_data_rejects_empty_spec(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("{}")
    code = cli.main(["gen-data", "--spec", str(path), "--prices-out", str(tmp_path / "x.csv")])
    assert code == 1


# ---------------------------------------------------------------- cpd


@pytest.fixture
def small_run(tmp_path):
    spec = write_spec(tmp_path)
    prices = tmp_path / "prices.csv"
    cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(prices)])
    config = write_config(tmp_path, prices, tmp_path / "out")
    return config, tmp_path / "out"


def test_cpd_writes_cache(small_run):
    config, out = small_run
    assert cli.main(["--config", str(config), "cpd"]) == 0
    cache = gp_cpd.read_cache(out / "cpd_cache.csv")
    assert set(cache["symbol"]) == {"S0", "S1"}
    assert set(cache["lookback"]) == {10}
    # one row per day with a full trailing window, per asset
    assert len(cache) == 2 * (240 - 10)


def test_cpd_refuses_overwrite_without_resume(small_run):
    config, _ = small_run
    assert cli.main(["--config", str(config), "cpd"]) == 0
    assert cli.main(["--config", str(config), "cpd"]) == 1


def test_cpd_resume_extends_cache(tmp_path):
    spec = write_spec(tmp_path)
    prices_full = tmp_path / "full.csv"
    cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(prices_full)])
    table = pd.read_csv(prices_full)
    truncated = tmp_path / "part.csv"
    table.groupby("symbol").head(200).to_csv(truncated, index=False)

    out = tmp_path / "out"
    config_part = write_config(tmp_path, truncated, out)
    assert cli.main(["--config", str(config_part), "cpd"]) == 0
    partial = gp_cpd.read_cache(out / "cpd_cache.csv")

    config_full = write_config(tmp_path, prices_full, out)
    assert cli.main(["--config", str(config_full), "--resume", "cpd"]) == 0
    extended = gp_cpd.read_cache(out / "cpd_cache.csv")
    assert len(extended) == 2 * (240 - 10)
    # already-computed rows are reused verbatim
    merged = extended.merge(partial, on=["symbol", "date", "lookback"], suffixes=("", "_old"))
    np.testing.assert_array_equal(merged["nu"].to_numpy(), merged["nu_old"].to_numpy())


def test_cpd_refuses_stale_cache(small_run, tmp_path):
    config, out = small_run
    assert cli.main(["--config", str(config), "cpd"]) == 0
    other = write_config(tmp_path, tmp_path / "prices.csv", out, extra="lookbacks = 21\n")
    assert cli.main(["--config", str(other), "--resume", "cpd"]) == 1


# ---------------------------------------------------------------- backtest


def test_backtest_classical_only(tmp_path, capsys):
    spec = write_spec(
        tmp_path,
        segments=[[260, 0.0015, 0.008], [260, -0.0015, 0.008],
                  [260, 0.0015, 0.008], [260, -0.0015, 0.008]],
    )
    prices = tmp_path / "prices.csv"
    cli.main(["gen-data", "--spec", str(spec), "--prices-out", str(prices)])
    out = tmp_path / "out"
    config = write_config(
        tmp_path, prices, out,
        extra="data_start = 2000\ndata_end = 2004\nwindow_step = 2\n",
    )
    assert cli.main(["--config", str(config), "backtest"]) == 0
    report = pd.read_csv(out / "report.csv", index_col=0)
    assert sorted(report.index) == ["long_only", "moskowitz"]
    assert set(["sharpe", "mdd", "calmar"]).issubset(report.columns)
    windows = pd.read_csv(out / "report_windows.csv")
    assert len(windows) == 2 * 1  # one test window per strategy
    assert (out / "daily" / "long_only_portfolio.csv").exists()
    assert (out / "cost_curve_moskowitz.csv").exists()
    assert "moskowitz" in capsys.readouterr().out

    # report subcommand rebuilds the same table from stored daily returns
    assert cli.main(["--config", str(config), "report"]) == 0
    rebuilt = pd.read_csv(out / "report.csv", index_col=0)
    pd.testing.assert_frame_equal(rebuilt, report)

    # cost-sweep subcommand reproduces the stored curves
    curve_before = pd.read_csv(out / "cost_curve_moskowitz.csv")
    assert cli.main(["--config", str(config), "cost-sweep"]) == 0
    curve_after = pd.read_csv(out / "cost_curve_moskowitz.csv")
    np.testing.assert_allclose(
        curve_before["sharpe"].to_numpy(), curve_after["sharpe"].to_numpy(), atol=1e-12
    )


def test_train_without_learned_strategies_is_noop(small_run):
    config, out = small_run
    assert cli.main(["--config", str(config), "train"]) == 0
    assert not (out / "checkpoints").exists() or not list((out / "checkpoints").iterdir())


def test_main_reports_errors_as_exit_code(tmp_path):
    config = write_config(tmp_path, tmp_path / "missing.csv", tmp_path / "out")
    assert cli.main(["--config", str(config), "cpd"]) == 1


def test_strategy_tag_is_filename_safe():
    assert cli._strategy_tag("intermediate:w=0.5") == "intermediate_w-0.5"
    assert "/" not in cli._strategy_tag("lstm_cpd:lbw=21,x=1")
