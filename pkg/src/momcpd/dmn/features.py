"""LSTM input feature construction.

Each (asset, day) row holds volatility-normalized trailing returns at
five horizons, the three MACD indicators, and optionally the changepoint
score/location pair for one lookback. Everything is causal: a row dated
t uses data up to and including t.
"""

from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from ..data import PriceSeries, ReturnSeries, VolSeries, TRADING_DAYS
from ..errors import InsufficientDataError, ValidationError
from ..strategies import MacdParams, macd_signal

DEFAULT_OFFSETS = (1, 21, 63, 126, 252)

RETURN_COLUMNS = [f"ret_{t}" for t in DEFAULT_OFFSETS]
CPD_COLUMNS = ["cpd_nu", "cpd_gamma"]


def macd_columns(params: MacdParams) -> list:
    return [f"macd_{s}_{l}" for s, l in params.pairs]


def build_features(
    returns: ReturnSeries,
    vols: VolSeries,
    prices: PriceSeries,
    cpd_cache: Optional[pd.DataFrame] = None,
    lbw: Optional[int] = None,
    offsets: Sequence[int] = DEFAULT_OFFSETS,
    macd_params: Optional[MacdParams] = None,
) -> pd.DataFrame:
    """Feature rows for one asset, indexed by date.

    Normalized returns are r_{t-t',t} / (sigma_t * sqrt(t')) with sigma_t
    the ex-ante *daily* volatility (annualized estimate / sqrt(252)).
    Rows start once the longest offset has history and the vol estimate
    is out of warm-up. With ``lbw`` set, the cache must cover every
    emitted date for this asset.
    """
    macd_params = macd_params or MacdParams()
    p = prices.series
    sigma_daily = vols.post_warmup() / np.sqrt(TRADING_DAYS)
    sigma_daily = sigma_daily[sigma_daily > 0]

    columns = {}
    for t_off in offsets:
        trailing = p / p.shift(t_off) - 1.0
        columns[f"ret_{t_off}"] = (
            trailing.reindex(sigma_daily.index) / (sigma_daily * np.sqrt(t_off))
        )
    for (s, l), name in zip(macd_params.pairs, macd_columns(macd_params)):
        columns[name] = macd_signal(prices, s, l).reindex(sigma_daily.index)

    frame = pd.DataFrame(columns).dropna()
    if frame.empty:
        raise InsufficientDataError(
            f"{prices.symbol}: no dates with full feature history"
        )

    if lbw is not None:
        if cpd_cache is None:
            raise ValidationError("lbw set but no CPD cache supplied")
        rows = cpd_cache[
            (cpd_cache["symbol"] == prices.symbol) & (cpd_cache["lookback"] == lbw)
        ]
        cpd = rows.set_index("date")[["nu", "gamma"]]
        missing = frame.index.difference(cpd.index)
        if len(missing) > 0:
            raise ValidationError(
                f"{prices.symbol}: CPD cache missing {len(missing)} dates for "
                f"lookback {lbw} (first: {missing[0].date()})"
            )
        frame["cpd_nu"] = cpd["nu"].reindex(frame.index)
        frame["cpd_gamma"] = cpd["gamma"].reindex(frame.index)

    if not np.isfinite(frame.to_numpy()).all():
        raise ValidationError(f"{prices.symbol}: non-finite feature values")
    return frame


def vol_scaled_targets(
    returns: ReturnSeries, vols: VolSeries, sigma_tgt: float
) -> pd.Series:
    """Per-day target component sigma_tgt / sigma_t * r_{t+1}, stamped at t."""
    sigma = vols.post_warmup()
    sigma = sigma[sigma > 0]
    r_next = returns.series.shift(-1).reindex(sigma.index)
    return (sigma_tgt / sigma * r_next).dropna()
