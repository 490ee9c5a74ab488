import numpy as np
import pandas as pd
import pytest

from momcpd.data import (
    PriceSeries,
    RegimeSpec,
    ReturnSeries,
    arithmetic_returns,
    ewm_volatility,
    generate_synthetic,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def trending_prices():
    """Six years of daily prices with alternating 250-day drift regimes."""
    spec = RegimeSpec(
        segments=[(250, 0.002 * (-1) ** k, 0.008) for k in range(6)],
        seed=7,
        symbol="TRND",
        start_date="2000-01-03",
    )
    return generate_synthetic(spec)


@pytest.fixture
def flat_noise_prices():
    spec = RegimeSpec(
        segments=[(800, 0.0, 0.01)],
        seed=11,
        symbol="NOIS",
        start_date="2000-01-03",
    )
    return generate_synthetic(spec)


@pytest.fixture
def trending_returns(trending_prices):
    return arithmetic_returns(trending_prices)


@pytest.fixture
def trending_vols(trending_returns):
    return ewm_volatility(trending_returns)


def make_price_series(values, symbol="T", start="2010-01-04"):
    index = pd.bdate_range(start, periods=len(values))
    return PriceSeries(symbol, pd.Series(np.asarray(values, dtype=float), index=index))


def make_return_series(values, symbol="T", start="2010-01-04"):
    index = pd.bdate_range(start, periods=len(values))
    return ReturnSeries(symbol, pd.Series(np.asarray(values, dtype=float), index=index))
