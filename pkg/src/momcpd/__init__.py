"""Changepoint-aware momentum trading pipeline.

Subpackages: data ingestion and synthesis, GP changepoint scoring,
classical strategy benchmarks, an LSTM position network trained on a
Sharpe objective, and an expanding-window backtester with cost analysis.
"""

__version__ = "0.1.0"
