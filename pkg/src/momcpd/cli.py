"""Batch command-line front door for the full pipeline.

Stages communicate only through files: price CSV -> CPD cache CSV ->
model checkpoints -> report files. Each subcommand is deterministic
given (config, seed) and the resumable ones skip work already done.
"""

import argparse
import json
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import backtest as bt
from . import gp_cpd
from .config import RunConfig
from .data import (
    PriceSeries,
    RegimeSpec,
    ReturnSeries,
    arithmetic_returns,
    ewm_volatility,
    generate_synthetic,
    load_prices,
    winsorize,
)
from .dmn import features as feat
from .dmn import lstm as lstm_mod
from .dmn.train import random_search, train as train_network
from .errors import ConfigError, MomcpdError
from .strategies import MacdParams, parse_strategy_spec

logger = logging.getLogger(__name__)


def _strategy_tag(spec: str) -> str:
    return spec.replace(":", "_").replace("=", "-").replace(",", "_")


def _checkpoint_path(config: RunConfig, spec: str, window: bt.Window) -> Path:
    return config.out_dir() / "checkpoints" / f"{_strategy_tag(spec)}_{window.label()}.npz"


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(spec_path: str, out_path: str) -> None:
    """Synthesize a price CSV from a JSON regime specification."""
    spec = json.loads(Path(spec_path).read_text())
    if "assets" not in spec or not spec["assets"]:
        raise ConfigError(f"{spec_path}: expected a non-empty 'assets' list")
    frames = []
    for entry in spec["assets"]:
        regime = RegimeSpec(
            segments=[tuple(seg) for seg in entry["segments"]],
            seed=int(entry["seed"]),
            symbol=str(entry["symbol"]),
            start_date=entry.get("start_date", "2000-01-03"),
            start_price=float(entry.get("start_price", 100.0)),
        )
        prices = generate_synthetic(regime)
        frames.append(
            pd.DataFrame(
                {
                    "symbol": prices.symbol,
                    "date": prices.series.index.strftime("%Y-%m-%d"),
                    "close": prices.series.to_numpy(),
                }
            )
        )
    table = pd.concat(frames).sort_values(["symbol", "date"])
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_path, index=False, float_format="%.10f")
    logger.info("wrote %d rows to %s", len(table), out_path)


# ---------------------------------------------------------------- cpd


def _cpd_task(symbol: str, series: pd.Series, lookback: int, date_floor) -> pd.DataFrame:
    returns = ReturnSeries(symbol, series)
    date_range = None
    if date_floor is not None:
        date_range = (date_floor, series.index[-1])
    results = gp_cpd.run_cpd(returns, lookback, date_range)
    return gp_cpd.results_to_frame(results)


def cmd_cpd(config: RunConfig, resume: bool = False) -> None:
    """Precompute changepoint score/location for every (asset, day, lookback)."""
    prices = load_prices(config.prices)
    cache_path = config.out_dir() / "cpd_cache.csv"
    existing: Optional[pd.DataFrame] = None
    if cache_path.exists():
        existing = gp_cpd.read_cache(cache_path)
        stale_lb = set(existing["lookback"]) - set(config.lookbacks)
        stale_sym = set(existing["symbol"]) - set(prices)
        if stale_lb or stale_sym:
            raise ConfigError(
                f"{cache_path} holds lookbacks {sorted(stale_lb)} / symbols "
                f"{sorted(stale_sym)} absent from the current config; refusing "
                "to mix caches (move or delete the file)"
            )
        if not resume:
            raise ConfigError(
                f"{cache_path} already exists; pass --resume to extend it"
            )

    tasks = []
    for symbol in sorted(prices):
        returns = arithmetic_returns(prices[symbol])
        for lookback in config.lookbacks:
            floor = None
            if existing is not None:
                done = existing[
                    (existing["symbol"] == symbol)
                    & (existing["lookback"] == lookback)
                ]
                if len(done):
                    last = done["date"].max()
                    if last >= returns.series.index[-1]:
                        continue
                    later = returns.series.index[returns.series.index > last]
                    floor = later[0]
            tasks.append((symbol, returns.series, lookback, floor))

    frames = [] if existing is None else [existing.assign(
        date=existing["date"].dt.strftime("%Y-%m-%d")
    )]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            frames.extend(pool.map(_cpd_task, *zip(*tasks)))
    else:
        for task in tasks:
            frames.append(_cpd_task(*task))
    cache = pd.concat(frames, ignore_index=True).sort_values(
        ["symbol", "lookback", "date"]
    )
    config.out_dir().mkdir(parents=True, exist_ok=True)
    cache.to_csv(cache_path, index=False)
    logger.info("CPD cache: %d rows at %s", len(cache), cache_path)


# ---------------------------------------------------------------- train


def _slice_prices(
    prices: Dict[str, PriceSeries], end: pd.Timestamp
) -> Dict[str, PriceSeries]:
    out = {}
    for symbol, ps in prices.items():
        series = ps.series[ps.series.index < end]
        if len(series) >= 2:
            out[symbol] = PriceSeries(symbol, series)
    return out


def _window_training_data(
    config: RunConfig,
    prices: Dict[str, PriceSeries],
    window: bt.Window,
    cpd_cache: Optional[pd.DataFrame],
    lbw: Optional[int],
):
    """Per-asset feature frames and vol-scaled targets for one training span."""
    macd_params = MacdParams(list(config.macd_pairs))
    features, targets = {}, {}
    for symbol, ps in _slice_prices(prices, window.train_end).items():
        returns = arithmetic_returns(ps)
        clean = winsorize(returns, config.winsorize_halflife, config.winsorize_clip)
        vols = ewm_volatility(returns, config.vol_span)
        try:
            frame = feat.build_features(
                clean, vols, ps,
                cpd_cache=cpd_cache, lbw=lbw,
                offsets=config.return_offsets, macd_params=macd_params,
            )
        except MomcpdError as exc:
            logger.info("%s: excluded from training (%s)", symbol, exc)
            continue
        features[symbol] = frame
        targets[symbol] = feat.vol_scaled_targets(returns, vols, config.sigma_tgt)
    if not features:
        raise ConfigError(f"no asset has enough history before {window.train_end.date()}")
    return features, targets


def _load_cpd_cache_if_needed(config: RunConfig, specs: List[str]):
    needs_cpd = any(parse_strategy_spec(s)[0] == "lstm_cpd" for s in specs)
    if not needs_cpd:
        return None
    cache_path = config.out_dir() / "cpd_cache.csv"
    if not cache_path.exists():
        raise ConfigError(
            f"{cache_path} not found; run the 'cpd' subcommand before training "
            "lstm_cpd strategies"
        )
    return gp_cpd.read_cache(cache_path)


def cmd_train(config: RunConfig, resume: bool = False) -> None:
    """Random-search + train one checkpoint per (learned strategy, window)."""
    learned = [
        s for s in config.strategies if parse_strategy_spec(s)[0] in ("lstm", "lstm_cpd")
    ]
    if not learned:
        logger.info("no learned strategies configured; nothing to train")
        return
    prices = load_prices(config.prices)
    cpd_cache = _load_cpd_cache_if_needed(config, learned)
    windows = bt.plan_windows(config.data_start, config.data_end, config.window_step)
    grid = dict(config.grid)
    grid["cpd_lbw"] = list(config.lookbacks)
    log_rows = []
    (config.out_dir() / "checkpoints").mkdir(parents=True, exist_ok=True)
    for window in windows:
        for spec in learned:
            name, args = parse_strategy_spec(spec)
            ckpt = _checkpoint_path(config, spec, window)
            if resume and ckpt.exists():
                logger.info("%s %s: checkpoint exists, skipping", spec, window.label())
                continue
            fixed_lbw = int(args["lbw"]) if "lbw" in args else None
            search_lbw = name == "lstm_cpd" and fixed_lbw is None
            feature_cache: dict = {}

            def get_data(lbw):
                if lbw not in feature_cache:
                    feature_cache[lbw] = _window_training_data(
                        config, prices, window, cpd_cache, lbw
                    )
                return feature_cache[lbw]

            def train_fn(hp, trial_seed):
                lbw = None
                if name == "lstm_cpd":
                    lbw = hp.cpd_lbw if search_lbw else fixed_lbw
                    hp.cpd_lbw = lbw
                features, targets = get_data(lbw)
                return train_network(
                    features, targets, hp, trial_seed,
                    max_epochs=config.max_epochs, patience=config.patience,
                    tau=config.sequence_length,
                )

            seed = int(
                np.random.default_rng(
                    [config.seed, zlib.crc32(spec.encode()), window.test_start.year]
                ).integers(2**31 - 1)
            )
            result = random_search(
                train_fn, n_iters=config.search_iters, seed=seed,
                grid=grid, include_lbw=search_lbw,
            )
            lstm_mod.save_model(result.best.model, ckpt)
            for i, trial in enumerate(result.trials):
                log_rows.append(
                    {
                        "window": window.label(),
                        "strategy": spec,
                        "trial": i,
                        "hyperparams": json.dumps(trial.hyperparams.to_dict()),
                        "validation_loss": trial.validation_loss,
                        "error": trial.error or "",
                    }
                )
            logger.info(
                "%s %s: best val loss %.4f -> %s",
                spec, window.label(), result.best.validation_loss, ckpt,
            )
    log_path = config.out_dir() / "search_log.csv"
    frame = pd.DataFrame(log_rows)
    if resume and log_path.exists() and len(frame):
        frame = pd.concat([pd.read_csv(log_path), frame], ignore_index=True)
    if len(frame):
        frame.to_csv(log_path, index=False)


# ---------------------------------------------------------------- backtest


def _concat_strategy_returns(parts):
    from .strategies import StrategyReturns, portfolio_return

    asset_returns = pd.concat([p.asset_returns for p in parts]).sort_index()
    return StrategyReturns(
        asset_returns=asset_returns,
        positions=pd.concat([p.positions for p in parts]).sort_index(),
        vols=pd.concat([p.vols for p in parts]).sort_index(),
        portfolio=portfolio_return(asset_returns),
    )


def cmd_backtest(config: RunConfig) -> None:
    """Run every configured strategy across the window plan, write reports."""
    prices = load_prices(config.prices)
    assets = bt.prepare_assets(prices)
    cpd_cache = _load_cpd_cache_if_needed(config, config.strategies)
    windows = bt.plan_windows(config.data_start, config.data_end, config.window_step)
    out = config.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "daily").mkdir(exist_ok=True)
    (out / "strategy_data").mkdir(exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)

    pooled: Dict[str, List[pd.Series]] = {}
    labelled: Dict[str, List] = {}
    for spec in config.strategies:
        name, _ = parse_strategy_spec(spec)
        parts = []
        pooled[spec] = []
        labelled[spec] = []
        for window in windows:
            model = None
            if name in ("lstm", "lstm_cpd"):
                ckpt = _checkpoint_path(config, spec, window)
                if not ckpt.exists():
                    raise ConfigError(
                        f"{ckpt} not found; run the 'train' subcommand first"
                    )
                model = lstm_mod.load_model(ckpt)
            result = bt.run_strategy(
                spec, assets, window,
                sigma_tgt=config.sigma_tgt, model=model, cpd_cache=cpd_cache,
                tau=config.sequence_length,
            )
            parts.append(result)
            pooled[spec].append(result.portfolio)
            labelled[spec].append((window.label(), result.portfolio))
        combined = _concat_strategy_returns(parts)
        tag = _strategy_tag(spec)

        portfolio = bt.pooled_returns(pooled[spec])
        portfolio.rename("ret").rename_axis("date").to_csv(
            out / "daily" / f"{tag}_portfolio.csv"
        )
        long_form = (
            combined.asset_returns.rename_axis("date")
            .reset_index()
            .melt(id_vars="date", var_name="symbol", value_name="ret")
            .dropna()
        )
        long_form["pos"] = [
            combined.positions.at[d, s] for d, s in zip(long_form["date"], long_form["symbol"])
        ]
        long_form["sigma"] = [
            combined.vols.at[d, s] for d, s in zip(long_form["date"], long_form["symbol"])
        ]
        long_form.to_csv(out / "strategy_data" / f"{tag}_assets.csv", index=False)

        bt.cost_sweep(combined, sigma_tgt=config.sigma_tgt).to_csv(
            out / f"cost_curve_{tag}.csv", index=False
        )
        equity = (1.0 + portfolio).cumprod().rename("equity").rename_axis("date")
        equity.to_csv(out / "plots" / f"equity_{tag}.csv")
        if len(combined.positions) >= 252:
            for kind, frame in bt.position_diagnostics(combined.positions).items():
                frame.rename_axis("date").to_csv(
                    out / "plots" / f"positions_{kind}_{tag}.csv"
                )

    report = bt.build_report(pooled, rescale=False, sigma_tgt=config.sigma_tgt)
    report.to_csv(out / "report.csv")
    bt.build_report(pooled, rescale=True, sigma_tgt=config.sigma_tgt).to_csv(
        out / "report_rescaled.csv"
    )
    bt.build_window_report(labelled).to_csv(out / "report_windows.csv", index=False)
    print(report.to_string(float_format=lambda v: f"{v:.4f}"))


# ---------------------------------------------------------------- cost-sweep / report


def _read_strategy_data(config: RunConfig, spec: str):
    from .strategies import StrategyReturns, portfolio_return

    path = config.out_dir() / "strategy_data" / f"{_strategy_tag(spec)}_assets.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found; run the 'backtest' subcommand first")
    table = pd.read_csv(path, parse_dates=["date"])
    pivot = lambda col: table.pivot(index="date", columns="symbol", values=col)
    asset_returns = pivot("ret")
    return StrategyReturns(
        asset_returns=asset_returns,
        positions=pivot("pos"),
        vols=pivot("sigma"),
        portfolio=portfolio_return(asset_returns),
    )


def cmd_cost_sweep(config: RunConfig) -> None:
    """Recompute Sharpe-vs-cost curves from stored backtest data."""
    for spec in config.strategies:
        result = _read_strategy_data(config, spec)
        curve = bt.cost_sweep(result, sigma_tgt=config.sigma_tgt)
        path = config.out_dir() / f"cost_curve_{_strategy_tag(spec)}.csv"
        curve.to_csv(path, index=False)
        logger.info("%s: cost curve written to %s", spec, path)


def cmd_report(config: RunConfig) -> None:
    """Rebuild the metric tables from stored daily portfolio returns."""
    pooled = {}
    for spec in config.strategies:
        path = config.out_dir() / "daily" / f"{_strategy_tag(spec)}_portfolio.csv"
        if not path.exists():
            raise ConfigError(f"{path} not found; run the 'backtest' subcommand first")
        series = pd.read_csv(path, parse_dates=["date"]).set_index("date")["ret"]
        pooled[spec] = [series]
    report = bt.build_report(pooled, rescale=False, sigma_tgt=config.sigma_tgt)
    report.to_csv(config.out_dir() / "report.csv")
    bt.build_report(pooled, rescale=True, sigma_tgt=config.sigma_tgt).to_csv(
        config.out_dir() / "report_rescaled.csv"
    )
    print(report.to_string(float_format=lambda v: f"{v:.4f}"))


# ---------------------------------------------------------------- entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momcpd",
        description="Changepoint-aware momentum pipeline: data, CPD, training, backtest.",
    )
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="parallel workers for CPD")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--resume", action="store_true", help="skip completed work")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize a price CSV from a JSON spec")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--prices-out", required=True)

    sub.add_parser("cpd", help="precompute the changepoint cache")
    sub.add_parser("train", help="train checkpoints for learned strategies")
    sub.add_parser("backtest", help="run strategies and write reports")
    sub.add_parser("cost-sweep", help="recompute cost curves from stored data")
    sub.add_parser("report", help="rebuild metric tables from stored returns")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    config = RunConfig()
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(args.spec, args.prices_out)
            return 0
        config = _load_config(args)
        if args.command == "cpd":
            cmd_cpd(config, resume=args.resume)
        elif args.command == "train":
            cmd_train(config, resume=args.resume)
        elif args.command == "backtest":
            cmd_backtest(config)
        elif args.command == "cost-sweep":
            cmd_cost_sweep(config)
        elif args.command == "report":
            cmd_report(config)
        return 0
    except (MomcpdError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
