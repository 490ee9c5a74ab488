"""Classical benchmark position rules and volatility-scaled return capture.

Position functions return a full date-indexed series of positions in
[-1, 1]; every value at date t uses data up to and including t only.
Captured returns pair the position at t with the asset return from t to
t+1 under volatility scaling to a common annualized target.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .data import PriceSeries, ReturnSeries, VolSeries, TRADING_DAYS
from .errors import InsufficientDataError, ValidationError

SIGMA_TGT = 0.15
ANNUAL_DAYS = 252
MONTH_DAYS = 21
MACD_PRICE_STD_WINDOW = 63
MACD_SIGNAL_STD_WINDOW = 252
MACD_RESPONSE_NORM = 0.89


@dataclass
class MacdParams:
    """Short/long EWMA timescale pairs, in trading days."""

    pairs: List[Tuple[int, int]] = field(
        default_factory=lambda: [(8, 24), (16, 28), (32, 96)]
    )

    def __post_init__(self) -> None:
        for short, long in self.pairs:
            if not (0 < short < long):
                raise ValidationError(f"need 0 < S < L, got ({short}, {long})")


@dataclass
class StrategyReturns:
    """Per-asset captured returns plus the equal-weight portfolio series.

    Positions and vols are kept alongside returns so transaction-cost
    adjustments can be applied after the fact.
    """

    asset_returns: pd.DataFrame  # date x symbol
    positions: pd.DataFrame
    vols: pd.DataFrame
    portfolio: pd.Series


def trailing_return(prices: pd.Series, days: int) -> pd.Series:
    """Cumulative arithmetic return p_t / p_{t-days} - 1."""
    return prices / prices.shift(days) - 1.0


def position_long_only(prices: PriceSeries) -> pd.Series:
    return pd.Series(1.0, index=prices.series.index)


def position_moskowitz(prices: PriceSeries) -> pd.Series:
    """Sign of the trailing annual return; NaN until a year of history."""
    return np.sign(trailing_return(prices.series, ANNUAL_DAYS))


def position_intermediate(prices: PriceSeries, w: float) -> pd.Series:
    """Blend of annual-return and monthly-return sign signals.

    w = 0 reproduces the pure annual-sign rule; w = 1 uses only the
    monthly sign.
    """
    if not 0.0 <= w <= 1.0:
        raise ValidationError("w must be in [0, 1]")
    slow = np.sign(trailing_return(prices.series, ANNUAL_DAYS))
    fast = np.sign(trailing_return(prices.series, MONTH_DAYS))
    return (1.0 - w) * slow + w * fast


def _ewma_halflife(timescale: int) -> float:
    # Half-life such that the EWMA decay factor equals 1 - 1/timescale.
    return np.log(0.5) / np.log(1.0 - 1.0 / timescale)


def macd_signal(prices: PriceSeries, short: int, long: int) -> pd.Series:
    """Volatility-normalized EWMA crossover indicator.

    q_t = (EWMA_S - EWMA_L) / 63-day rolling price std, then normalized
    by the 252-day rolling std of q. Days where either std is zero (or
    still warming up) emit 0.
    """
    p = prices.series
    ewma_s = p.ewm(halflife=_ewma_halflife(short)).mean()
    ewma_l = p.ewm(halflife=_ewma_halflife(long)).mean()
    price_std = p.rolling(MACD_PRICE_STD_WINDOW).std()
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (ewma_s - ewma_l) / price_std
    q = q.replace([np.inf, -np.inf], np.nan)
    q_std = q.rolling(MACD_SIGNAL_STD_WINDOW).std()
    with np.errstate(divide="ignore", invalid="ignore"):
        y = q / q_std
    y = y.replace([np.inf, -np.inf], np.nan)
    return y.fillna(0.0)


def macd_response(y):
    """Position response y * exp(-y^2/4) / 0.89, maximized at y = sqrt(2)."""
    y = np.asarray(y, dtype=float)
    return y * np.exp(-(y**2) / 4.0) / MACD_RESPONSE_NORM


def position_macd(prices: PriceSeries, params: Optional[MacdParams] = None) -> pd.Series:
    params = params or MacdParams()
    signals = [macd_signal(prices, s, l) for s, l in params.pairs]
    responses = [macd_response(sig) for sig in signals]
    return pd.Series(np.mean(responses, axis=0), index=prices.series.index)


def captured_return(x, sigma, r_next, sigma_tgt: float = SIGMA_TGT):
    """Volatility-scaled capture: X_t * (sigma_tgt / sigma_t) * r_{t+1}."""
    return x * (sigma_tgt / sigma) * r_next


def captured_returns_series(
    positions: pd.Series,
    vols: VolSeries,
    returns: ReturnSeries,
    sigma_tgt: float = SIGMA_TGT,
) -> pd.Series:
    """Daily captured returns for one asset, indexed by the realization date.

    The value at date t+1 uses the position and vol known at t. Warm-up
    vol days and days without a position are dropped.
    """
    sigma = vols.post_warmup()
    sigma = sigma[sigma > 0]
    x = positions.reindex(sigma.index).dropna()
    r_next = returns.series.shift(-1).reindex(x.index)
    captured = captured_return(x, sigma.reindex(x.index), r_next, sigma_tgt).dropna()
    # Stamp on the day the return is realized.
    realized_dates = returns.series.index[
        returns.series.index.searchsorted(captured.index) + 1
    ]
    return pd.Series(captured.to_numpy(), index=realized_dates)


def portfolio_return(asset_returns: pd.DataFrame) -> pd.Series:
    """Equal-weight mean across the assets with data on each date."""
    portfolio = asset_returns.mean(axis=1, skipna=True)
    return portfolio.dropna()


def parse_strategy_spec(spec: str) -> Tuple[str, Dict[str, float]]:
    """Parse names like ``intermediate:w=0.5`` or ``lstm_cpd:lbw=21``."""
    name, _, arg_str = spec.partition(":")
    name = name.strip()
    args: Dict[str, float] = {}
    if arg_str:
        for part in arg_str.split(","):
            key, _, value = part.partition("=")
            if not value:
                raise ValidationError(f"malformed strategy spec {spec!r}")
            args[key.strip()] = float(value)
    known = {"long_only", "moskowitz", "intermediate", "macd", "lstm", "lstm_cpd"}
    if name not in known:
        raise ValidationError(f"unknown strategy {name!r}")
    if name == "intermediate" and "w" not in args:
        raise ValidationError("intermediate strategy needs w=<float>")
    return name, args


def classical_positions(name: str, prices: PriceSeries, args: Dict[str, float]) -> pd.Series:
    if name == "long_only":
        return position_long_only(prices)
    if name == "moskowitz":
        return position_moskowitz(prices)
    if name == "intermediate":
        return position_intermediate(prices, args["w"])
    if name == "macd":
        return position_macd(prices)
    raise ValidationError(f"{name!r} is not a classical strategy")
