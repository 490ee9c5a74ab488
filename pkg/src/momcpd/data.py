"""Price/return series loading, validation, transforms and synthesis.

All series are represented as pandas Series indexed by normalized
Timestamps, wrapped in small dataclasses that enforce the invariants the
rest of the pipeline relies on (sorted dates, finite values, positive
prices).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    DegenerateWindowError,
    InsufficientDataError,
    ParseError,
    ValidationError,
)

TRADING_DAYS = 252
DEFAULT_VOL_SPAN = 60
VOL_WARMUP_OBS = 10


def _check_series(series: pd.Series, what: str) -> None:
    if not series.index.is_monotonic_increasing:
        raise ValidationError(f"{what}: dates must be strictly increasing")
    if series.index.has_duplicates:
        raise ValidationError(f"{what}: duplicate dates")
    if not np.isfinite(series.to_numpy(dtype=float)).all():
        raise ValidationError(f"{what}: non-finite values")


@dataclass
class PriceSeries:
    """Dated close prices for one asset."""

    symbol: str
    series: pd.Series  # index: dates, values: close prices

    def __post_init__(self) -> None:
        _check_series(self.series, f"prices[{self.symbol}]")
        if (self.series.to_numpy(dtype=float) <= 0).any():
            raise ValidationError(f"prices[{self.symbol}]: non-positive close")
        self.series = self.series.astype(float)

    def __len__(self) -> int:
        return len(self.series)


@dataclass
class ReturnSeries:
    """Daily arithmetic returns for one asset."""

    symbol: str
    series: pd.Series

    def __post_init__(self) -> None:
        _check_series(self.series, f"returns[{self.symbol}]")
        self.series = self.series.astype(float)

    def __len__(self) -> int:
        return len(self.series)


@dataclass
class VolSeries:
    """Annualized ex-ante volatility per day.

    The first ``warmup_obs`` values are numerically valid but flagged as
    warm-up; position sizing must use :meth:`post_warmup`.
    """

    symbol: str
    series: pd.Series
    warmup_obs: int = VOL_WARMUP_OBS

    def __post_init__(self) -> None:
        _check_series(self.series, f"vol[{self.symbol}]")
        if (self.series.to_numpy(dtype=float) < 0).any():
            raise ValidationError(f"vol[{self.symbol}]: negative volatility")

    def post_warmup(self) -> pd.Series:
        return self.series.iloc[self.warmup_obs:]


@dataclass
class StandardizedWindow:
    """A trailing window of returns standardized to mean 0, variance 1.

    ``time_index`` holds integer day offsets 0..lookback; GP
    hyperparameters are expressed in these units.
    """

    symbol: str
    end_date: pd.Timestamp
    lookback: int
    values: np.ndarray
    time_index: np.ndarray

    def __post_init__(self) -> None:
        if len(self.values) != self.lookback + 1:
            raise ValidationError("window length must equal lookback + 1")
        if len(self.time_index) != len(self.values):
            raise ValidationError("time_index length mismatch")


@dataclass
class RegimeSpec:
    """Piecewise-Gaussian synthetic return generator specification."""

    segments: List[Tuple[int, float, float]]  # (length, drift, vol) per segment
    seed: int
    symbol: str = "SYN"
    start_date: str = "2000-01-03"
    start_price: float = 100.0

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValidationError("RegimeSpec needs at least one segment")
        for length, _, vol in self.segments:
            if length <= 0:
                raise ValidationError("segment lengths must be > 0")
            if vol < 0:
                raise ValidationError("segment vols must be >= 0")


def load_prices(path) -> Dict[str, PriceSeries]:
    """Read a ``symbol,date,close`` CSV into one PriceSeries per symbol."""
    try:
        frame = pd.read_csv(path, dtype={"symbol": str})
    except FileNotFoundError:
        raise
    except Exception as exc:  # malformed CSV structure
        raise ParseError(f"{path}: {exc}") from exc
    expected = ["symbol", "date", "close"]
    if list(frame.columns) != expected:
        raise ParseError(f"{path}: expected header {','.join(expected)}")
    try:
        frame["date"] = pd.to_datetime(frame["date"], format="%Y-%m-%d")
        frame["close"] = pd.to_numeric(frame["close"])
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    bad = ~np.isfinite(frame["close"]) | (frame["close"] <= 0)
    if bad.any():
        line = int(frame.index[bad][0]) + 2  # +1 header, +1 one-based
        raise ValidationError(f"{path}:{line}: non-positive or non-finite close")
    dupes = frame.duplicated(subset=["symbol", "date"])
    if dupes.any():
        line = int(frame.index[dupes][0]) + 2
        raise ValidationError(f"{path}:{line}: duplicate (symbol, date) row")

    out: Dict[str, PriceSeries] = {}
    for symbol, group in frame.groupby("symbol", sort=True):
        group = group.sort_values("date")
        series = pd.Series(group["close"].to_numpy(), index=group["date"].to_numpy())
        out[str(symbol)] = PriceSeries(str(symbol), series)
    return out


def arithmetic_returns(prices: PriceSeries) -> ReturnSeries:
    """Daily arithmetic returns (p_t - p_{t-1}) / p_{t-1}."""
    if len(prices) < 2:
        raise InsufficientDataError(
            f"{prices.symbol}: need >= 2 prices to compute returns"
        )
    returns = prices.series.pct_change().iloc[1:]
    return ReturnSeries(prices.symbol, returns)


def ewm_volatility(returns: ReturnSeries, span: int = DEFAULT_VOL_SPAN) -> VolSeries:
    """Annualized EWM standard deviation of daily returns.

    Uses the pandas ``span`` convention (decay 2/(span+1)) with adjusted
    weighting seeded from the first observation; values exist from the
    second observation onward and the first 10 are flagged as warm-up.
    """
    if span < 2:
        raise ValidationError("span must be >= 2")
    if len(returns) == 0:
        raise InsufficientDataError(f"{returns.symbol}: empty return series")
    std = returns.series.ewm(span=span, adjust=True).std()
    vol = (std * np.sqrt(TRADING_DAYS)).iloc[1:]
    return VolSeries(returns.symbol, vol)


def winsorize(
    returns: ReturnSeries, halflife: float = 252.0, clip: float = 5.0
) -> ReturnSeries:
    """Clamp returns to ``clip`` EWM standard deviations from the EWM mean.

    The EWM statistics use adjusted (bias-corrected) weighting, matching
    the pandas ewm convention, and the state is updated with the
    *clamped* value, so the operation is both causal and idempotent. The
    first 10 observations pass through unclamped while the dispersion
    estimate warms up.
    """
    if halflife <= 0 or clip <= 0:
        raise ValidationError("halflife and clip must be > 0")
    decay = np.exp(np.log(0.5) / halflife)
    values = returns.series.to_numpy(dtype=float)
    out = np.empty_like(values)
    # West's incremental weighted mean/variance with geometric weights.
    sum_w = 0.0
    sum_w2 = 0.0
    mean = 0.0
    s = 0.0  # weighted sum of squared deviations
    for i, x in enumerate(values):
        if i >= VOL_WARMUP_OBS:
            denom = sum_w - sum_w2 / sum_w
            var = s / denom if denom > 0 else 0.0
            if var > 0:
                lo = mean - clip * np.sqrt(var)
                hi = mean + clip * np.sqrt(var)
                x = min(max(x, lo), hi)
        out[i] = x
        sum_w = decay * sum_w + 1.0
        sum_w2 = decay**2 * sum_w2 + 1.0
        delta = x - mean
        mean += delta / sum_w
        s = decay * s + delta * (x - mean)
    return ReturnSeries(returns.symbol, pd.Series(out, index=returns.series.index))


def standardize_window(
    returns: ReturnSeries, end_date, lookback: int
) -> StandardizedWindow:
    """Extract the l+1 returns ending at ``end_date`` and standardize them.

    Standardization uses the population (divide-by-n) variance so the
    output has exactly unit empirical variance.
    """
    series = returns.series.loc[:end_date]
    if len(series) < lookback + 1:
        raise InsufficientDataError(
            f"{returns.symbol}: need {lookback + 1} returns ending at {end_date}"
        )
    window = series.iloc[-(lookback + 1):].to_numpy(dtype=float)
    std = window.std()  # population
    if std < 1e-12:
        raise DegenerateWindowError(
            f"{returns.symbol}@{end_date}: window variance ~ 0"
        )
    values = (window - window.mean()) / std
    return StandardizedWindow(
        symbol=returns.symbol,
        end_date=series.index[-1],
        lookback=lookback,
        values=values,
        time_index=np.arange(lookback + 1, dtype=float),
    )


def generate_synthetic(spec: RegimeSpec) -> PriceSeries:
    """Build a price path from piecewise-Gaussian daily returns.

    Deterministic given the spec: same seed, same series.
    """
    rng = np.random.default_rng(spec.seed)
    pieces = [
        rng.normal(drift, vol, size=length) for length, drift, vol in spec.segments
    ]
    daily = np.concatenate(pieces)
    prices = spec.start_price * np.cumprod(1.0 + np.concatenate(([0.0], daily)))
    dates = pd.bdate_range(spec.start_date, periods=len(prices))
    return PriceSeries(spec.symbol, pd.Series(prices, index=dates))
