"""Expanding-window backtests, the nine-column metric table and cost analysis.

The experiment protocol: train on all history to date, test on the next
span, grow the training span and repeat. Metrics are reported both on
the pooled daily return stream across test windows (headline) and per
window (detail).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .data import (
    PriceSeries,
    ReturnSeries,
    VolSeries,
    arithmetic_returns,
    ewm_volatility,
    TRADING_DAYS,
)
from .dmn.features import build_features
from .dmn.lstm import LstmModel
from .dmn.train import SEQUENCE_LENGTH
from .errors import ConfigError, MetricUndefinedError, ValidationError
from .strategies import (
    SIGMA_TGT,
    StrategyReturns,
    captured_return,
    classical_positions,
    parse_strategy_spec,
    portfolio_return,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "returns_ann",
    "vol_ann",
    "sharpe",
    "downside_dev_ann",
    "sortino",
    "mdd",
    "calmar",
    "pct_positive",
    "avg_p_over_avg_l",
]

STRATEGY_GROUPS = {
    "long_only": "Reference",
    "macd": "Reference",
    "moskowitz": "TSMOM",
    "intermediate": "TSMOM",
    "lstm": "LSTM",
    "lstm_cpd": "LSTM w/ CPD",
}


@dataclass
class Window:
    train_start: pd.Timestamp
    train_end: pd.Timestamp
    test_start: pd.Timestamp
    test_end: pd.Timestamp

    def label(self) -> str:
        return f"{self.test_start.year}-{self.test_end.year}"


def plan_windows(
    data_start: int = 1990,
    data_end: int = 2020,
    step: int = 5,
) -> List[Window]:
    """Expanding train spans with consecutive ``step``-year test spans.

    The first training span covers ``step`` years; the final test span is
    truncated at ``data_end`` if the data runs out mid-cycle.
    """
    if data_end <= data_start + step:
        raise ConfigError(
            f"span {data_start}-{data_end} too short for one train+test cycle"
        )
    windows = []
    test_start = data_start + step
    while test_start < data_end:
        test_end = min(test_start + step, data_end)
        windows.append(
            Window(
                train_start=pd.Timestamp(f"{data_start}-01-01"),
                train_end=pd.Timestamp(f"{test_start}-01-01"),
                test_start=pd.Timestamp(f"{test_start}-01-01"),
                test_end=pd.Timestamp(f"{test_end}-01-01"),
            )
        )
        test_start += step
    return windows


@dataclass
class AssetData:
    """Derived series for one asset, computed once and shared."""

    prices: PriceSeries
    returns: ReturnSeries
    vols: VolSeries


def prepare_assets(prices: Dict[str, PriceSeries]) -> Dict[str, AssetData]:
    out = {}
    for symbol, ps in prices.items():
        rs = arithmetic_returns(ps)
        out[symbol] = AssetData(prices=ps, returns=rs, vols=ewm_volatility(rs))
    return out


def _capture(
    positions: pd.Series, asset: AssetData, sigma_tgt: float
) -> pd.DataFrame:
    """Captured return, position and vol per realization date for one asset."""
    sigma = asset.vols.post_warmup()
    sigma = sigma[sigma > 0]
    x = positions.reindex(sigma.index).dropna()
    sigma = sigma.reindex(x.index)
    r_next = asset.returns.series.shift(-1).reindex(x.index)
    frame = pd.DataFrame(
        {
            "ret": captured_return(x, sigma, r_next, sigma_tgt),
            "pos": x,
            "sigma": sigma,
        }
    ).dropna()
    # Stamp rows on the day the return is realized (t+1).
    locs = asset.returns.series.index.searchsorted(frame.index) + 1
    frame.index = asset.returns.series.index[locs]
    return frame


def lstm_positions(
    model: LstmModel,
    features: pd.DataFrame,
    start: pd.Timestamp,
    end: pd.Timestamp,
    tau: int = SEQUENCE_LENGTH,
) -> pd.Series:
    """Run the network over a test span in consecutive stateless sequences.

    Feature rows in [start, end) are chopped into back-to-back chunks of
    ``tau`` steps (final chunk may be shorter); each chunk starts from
    zero states, so every position depends only on features at or before
    its date.
    """
    if list(features.columns) != model.feature_columns:
        raise ValidationError(
            f"feature columns {list(features.columns)} do not match the "
            f"model's {model.feature_columns}"
        )
    span = features.loc[(features.index >= start) & (features.index < end)]
    if span.empty:
        return pd.Series(dtype=float)
    chunks = []
    for i in range(0, len(span), tau):
        chunk = span.iloc[i:i + tau]
        positions = model.forward(chunk.to_numpy()[None, :, :])[0]
        chunks.append(pd.Series(positions, index=chunk.index))
    return pd.concat(chunks)


def run_strategy(
    spec: str,
    assets: Dict[str, AssetData],
    window: Window,
    sigma_tgt: float = SIGMA_TGT,
    model: Optional[LstmModel] = None,
    cpd_cache: Optional[pd.DataFrame] = None,
    tau: int = SEQUENCE_LENGTH,
) -> StrategyReturns:
    """Daily strategy returns over one test window.

    Classical rules are evaluated on the full (causal) price history and
    sliced to the test span; learned strategies require a model trained
    on the window's training span.
    """
    name, args = parse_strategy_spec(spec)
    learned = name in ("lstm", "lstm_cpd")
    if learned and model is None:
        raise ConfigError(f"{spec}: learned strategy needs a trained model")
    rets, poss, sigmas = {}, {}, {}
    for symbol in sorted(assets):
        asset = assets[symbol]
        if learned:
            lbw = model.hyperparams.cpd_lbw if name == "lstm_cpd" else None
            if name == "lstm_cpd" and lbw is None:
                lbw = int(args.get("lbw", 0)) or None
            try:
                features = build_features(
                    asset.returns, asset.vols, asset.prices,
                    cpd_cache=cpd_cache, lbw=lbw,
                )
            except Exception:
                logger.info("%s: skipped (insufficient feature history)", symbol)
                continue
            x = lstm_positions(model, features, window.test_start, window.test_end, tau=tau)
            if x.empty:
                continue
        else:
            x = classical_positions(name, asset.prices, args).dropna()
        frame = _capture(x, asset, sigma_tgt)
        frame = frame.loc[
            (frame.index > window.test_start) & (frame.index <= window.test_end)
        ]
        if frame.empty:
            continue
        rets[symbol] = frame["ret"]
        poss[symbol] = frame["pos"]
        sigmas[symbol] = frame["sigma"]
    if not rets:
        raise ConfigError(f"{spec}: no asset produced returns in {window.label()}")
    asset_returns = pd.DataFrame(rets)
    return StrategyReturns(
        asset_returns=asset_returns,
        positions=pd.DataFrame(poss),
        vols=pd.DataFrame(sigmas),
        portfolio=portfolio_return(asset_returns),
    )


def compute_metrics(daily_returns: pd.Series) -> pd.Series:
    """The nine-column performance row for a daily return stream.

    Volatility and Sharpe use the population std; MDD is the largest
    peak-to-trough decline of the compounded equity curve.
    """
    r = pd.Series(daily_returns).dropna()
    if len(r) < 2:
        raise MetricUndefinedError("need >= 2 return observations")
    values = r.to_numpy(dtype=float)
    mean, std = values.mean(), values.std()
    returns_ann = TRADING_DAYS * mean
    vol_ann = np.sqrt(TRADING_DAYS) * std
    if std < 1e-15:
        raise MetricUndefinedError("zero volatility, Sharpe undefined")
    sharpe = np.sqrt(TRADING_DAYS) * mean / std
    negatives = values[values < 0]
    downside = np.sqrt(np.sum(negatives**2) / len(values))
    downside_ann = np.sqrt(TRADING_DAYS) * downside
    sortino = TRADING_DAYS * mean / downside_ann if downside_ann > 0 else np.nan
    equity = np.cumprod(1.0 + values)
    peak = np.maximum.accumulate(equity)
    mdd = float(np.max(1.0 - equity / peak))
    if mdd <= 0:
        raise MetricUndefinedError("zero drawdown, Calmar undefined")
    calmar = returns_ann / mdd
    positives = values[values > 0]
    pct_positive = 100.0 * len(positives) / len(values)
    if len(positives) == 0 or len(negatives) == 0:
        avg_p_over_avg_l = np.nan
    else:
        avg_p_over_avg_l = positives.mean() / abs(negatives.mean())
    return pd.Series(
        [
            returns_ann,
            vol_ann,
            sharpe,
            downside_ann,
            sortino,
            mdd,
            calmar,
            pct_positive,
            avg_p_over_avg_l,
        ],
        index=METRIC_COLUMNS,
    )


def compute_metrics_tolerant(daily_returns: pd.Series) -> pd.Series:
    """As :func:`compute_metrics` but NaN-filled where a ratio is undefined."""
    try:
        return compute_metrics(daily_returns)
    except MetricUndefinedError:
        r = pd.Series(daily_returns).dropna().to_numpy(dtype=float)
        row = pd.Series(np.nan, index=METRIC_COLUMNS)
        if len(r) >= 2:
            row["returns_ann"] = TRADING_DAYS * r.mean()
            row["vol_ann"] = np.sqrt(TRADING_DAYS) * r.std()
            row["pct_positive"] = 100.0 * (r > 0).sum() / len(r)
        return row


def rescale_to_target_vol(
    daily_returns: pd.Series, sigma_tgt: float = SIGMA_TGT
) -> pd.Series:
    """Scale a return stream so its annualized volatility equals the target.

    A single multiplicative factor, so Sharpe, Sortino, the share of
    positive days and the profit/loss ratio are unchanged.
    """
    r = pd.Series(daily_returns).dropna()
    std = r.to_numpy(dtype=float).std()
    if std < 1e-15:
        raise MetricUndefinedError("zero realized volatility, cannot rescale")
    return r * (sigma_tgt / (np.sqrt(TRADING_DAYS) * std))


def transaction_adjusted_returns(
    returns: pd.Series,
    positions: pd.Series,
    sigma: pd.Series,
    sigma_tgt: float = SIGMA_TGT,
    cost: float = 0.0,
) -> pd.Series:
    """Subtract a linear turnover cost from captured returns.

    All three inputs are aligned per realization date (position and vol
    are the values from the decision day). The position before the first
    observation is taken as flat, so entering the strategy is charged.
    """
    scaled = positions / sigma
    turnover = (scaled - scaled.shift(1).fillna(0.0)).abs()
    return returns - cost * sigma_tgt * turnover


def portfolio_cost_adjusted(
    result: StrategyReturns, cost: float, sigma_tgt: float = SIGMA_TGT
) -> pd.Series:
    """Equal-weight portfolio returns after per-asset turnover costs."""
    adjusted = {
        symbol: transaction_adjusted_returns(
            result.asset_returns[symbol].dropna(),
            result.positions[symbol].dropna(),
            result.vols[symbol].dropna(),
            sigma_tgt,
            cost,
        )
        for symbol in result.asset_returns.columns
    }
    return portfolio_return(pd.DataFrame(adjusted))


def cost_sweep(
    result: StrategyReturns,
    cost_grid_bps: Sequence[float] = (0, 1, 2, 3, 4, 5),
    sigma_tgt: float = SIGMA_TGT,
) -> pd.DataFrame:
    """Sharpe ratio per transaction-cost level, costs in basis points."""
    rows = []
    for bps in cost_grid_bps:
        portfolio = portfolio_cost_adjusted(result, bps * 1e-4, sigma_tgt)
        r = portfolio.to_numpy(dtype=float)
        sharpe = np.sqrt(TRADING_DAYS) * r.mean() / r.std()
        rows.append({"C_bps": bps, "sharpe": sharpe})
    return pd.DataFrame(rows)


def position_diagnostics(positions: pd.DataFrame) -> Dict[str, pd.DataFrame]:
    """Slow (1y) and fast (1m) moving averages of position size per asset."""
    if len(positions) < TRADING_DAYS:
        raise ConfigError("need at least a year of positions for diagnostics")
    return {
        "slow_252": positions.rolling(TRADING_DAYS).mean(),
        "fast_21": positions.rolling(21).mean(),
    }


def pooled_returns(per_window: Sequence[pd.Series]) -> pd.Series:
    """Concatenate per-window daily portfolio returns into one stream."""
    return pd.concat(list(per_window)).sort_index()


def build_report(
    strategy_returns: Dict[str, List[pd.Series]],
    rescale: bool = False,
    sigma_tgt: float = SIGMA_TGT,
) -> pd.DataFrame:
    """Nine-column metric table, one row per strategy, over pooled returns."""
    rows = {}
    for spec, window_returns in strategy_returns.items():
        pooled = pooled_returns(window_returns)
        if rescale:
            pooled = rescale_to_target_vol(pooled, sigma_tgt)
        rows[spec] = compute_metrics_tolerant(pooled)
    report = pd.DataFrame(rows).T
    report.index.name = "strategy"
    report.insert(
        0, "group", [STRATEGY_GROUPS[parse_strategy_spec(s)[0]] for s in report.index]
    )
    return report


def build_window_report(
    strategy_returns: Dict[str, List[Tuple[str, pd.Series]]]
) -> pd.DataFrame:
    """Per-window metric rows for the detailed report."""
    records = []
    for spec, labelled in strategy_returns.items():
        for label, series in labelled:
            row = compute_metrics_tolerant(series)
            row["strategy"] = spec
            row["window"] = label
            records.append(row)
    frame = pd.DataFrame(records)
    return frame[["strategy", "window"] + METRIC_COLUMNS]
