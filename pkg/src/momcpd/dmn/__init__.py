"""Deep momentum network: features, LSTM, Sharpe loss, training."""

from .features import build_features, vol_scaled_targets
from .lstm import (
    LstmHyperparams,
    LstmModel,
    load_model,
    save_model,
    sharpe_loss,
    sharpe_loss_grad,
)
# Note: the train() entry point stays in momcpd.dmn.train so the
# submodule name is not shadowed by a function re-export.
from .train import (
    AdamState,
    SearchResult,
    TrainResult,
    build_sequences,
    clip_and_adam_step,
    random_search,
)

__all__ = [
    "AdamState",
    "LstmHyperparams",
    "LstmModel",
    "SearchResult",
    "TrainResult",
    "build_features",
    "build_sequences",
    "clip_and_adam_step",
    "load_model",
    "random_search",
    "save_model",
    "sharpe_loss",
    "sharpe_loss_grad",
    "vol_scaled_targets",
]
