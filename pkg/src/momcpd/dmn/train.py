"""Minibatch Adam training of the position network on the Sharpe objective.

Data handling follows a fixed regime: per-asset chronological 90/10
train/validation split, non-overlapping sequences of 63 steps, shuffled
sequence order each epoch, early stopping on validation loss with the
best-epoch weights restored. Everything is reproducible from
(data, hyperparams, seed).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigError, DegenerateBatchError, MomcpdError
from .lstm import (
    DEFAULT_GRID,
    LstmHyperparams,
    LstmModel,
    sharpe_loss,
    sharpe_loss_grad,
)

logger = logging.getLogger(__name__)

SEQUENCE_LENGTH = 63
MAX_EPOCHS = 300
PATIENCE = 25
TRAIN_FRACTION = 0.9

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    def __init__(self, params: Dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def clip_and_adam_step(
    model: LstmModel,
    grads: Dict[str, np.ndarray],
    lr: float,
    max_grad_norm: float,
    state: AdamState,
) -> None:
    """Global-norm gradient clipping followed by a bias-corrected Adam update."""
    total_sq = sum(float(np.sum(g**2)) for g in grads.values())
    if not np.isfinite(total_sq):
        raise MomcpdError("non-finite gradient")
    norm = np.sqrt(total_sq)
    scale = max_grad_norm / norm if norm > max_grad_norm else 1.0
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for key, grad in grads.items():
        g = grad * scale
        state.m[key] = ADAM_BETA1 * state.m[key] + (1.0 - ADAM_BETA1) * g
        state.v[key] = ADAM_BETA2 * state.v[key] + (1.0 - ADAM_BETA2) * g**2
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        model.params[key] = model.params[key] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class SequenceSet:
    """Stacked non-overlapping sequences: features (n, tau, d), targets (n, tau)."""

    features: np.ndarray
    targets: np.ndarray
    symbols: List[str]

    def __len__(self) -> int:
        return len(self.features)


def _chop_sequences(
    frame: pd.DataFrame, targets: pd.Series, tau: int
) -> List[Tuple[np.ndarray, np.ndarray]]:
    joint = frame.join(targets.rename("__target__"), how="inner").dropna()
    values = joint.drop(columns="__target__").to_numpy()
    y = joint["__target__"].to_numpy()
    out = []
    for start in range(0, len(joint) - tau + 1, tau):
        out.append((values[start:start + tau], y[start:start + tau]))
    return out


def build_sequences(
    features: Dict[str, pd.DataFrame],
    targets: Dict[str, pd.Series],
    tau: int = SEQUENCE_LENGTH,
    train_fraction: float = TRAIN_FRACTION,
) -> Tuple[SequenceSet, SequenceSet]:
    """Per-asset chronological split into train/validation sequence sets.

    An asset is included only if its validation span yields at least one
    full sequence; assets are processed in sorted symbol order so the
    result is deterministic.
    """
    train_feats, train_targs, train_syms = [], [], []
    val_feats, val_targs, val_syms = [], [], []
    for symbol in sorted(features):
        frame = features[symbol]
        split = int(len(frame) * train_fraction)
        train_part = _chop_sequences(frame.iloc[:split], targets[symbol], tau)
        val_part = _chop_sequences(frame.iloc[split:], targets[symbol], tau)
        if not val_part:
            logger.info("%s: excluded, validation span shorter than one sequence", symbol)
            continue
        for f, y in train_part:
            train_feats.append(f)
            train_targs.append(y)
            train_syms.append(symbol)
        for f, y in val_part:
            val_feats.append(f)
            val_targs.append(y)
            val_syms.append(symbol)
    if not train_feats or not val_feats:
        raise ConfigError("no usable training/validation sequences")
    return (
        SequenceSet(np.stack(train_feats), np.stack(train_targs), train_syms),
        SequenceSet(np.stack(val_feats), np.stack(val_targs), val_syms),
    )


@dataclass
class TrainResult:
    model: LstmModel
    validation_loss: float
    best_epoch: int
    epochs_run: int
    history: List[float] = field(default_factory=list)


def _validation_loss(model: LstmModel, val: SequenceSet) -> float:
    positions = model.forward(val.features, dropout_enabled=False)
    return sharpe_loss(positions, val.targets)


def train(
    features: Dict[str, pd.DataFrame],
    targets: Dict[str, pd.Series],
    hyperparams: LstmHyperparams,
    seed: int,
    max_epochs: int = MAX_EPOCHS,
    patience: int = PATIENCE,
    tau: int = SEQUENCE_LENGTH,
) -> TrainResult:
    """Train a position network; returns the best-validation-epoch weights."""
    train_set, val_set = build_sequences(features, targets, tau=tau)
    input_size = train_set.features.shape[2]
    rng = np.random.default_rng(seed)
    model = LstmModel(
        input_size,
        hyperparams,
        seed=seed,
        feature_columns=list(next(iter(features.values())).columns),
    )
    state = AdamState(model.params)
    n = len(train_set)
    batch_size = min(hyperparams.minibatch_size, n)

    best_loss = _validation_loss(model, val_set)
    best_params = model.copy_params()
    best_epoch = 0
    history = [best_loss]
    epochs_run = 0
    for epoch in range(1, max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(n)
        try:
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                x = train_set.features[idx]
                y = train_set.targets[idx]
                cache: dict = {}
                positions = model.forward(
                    x, dropout_enabled=True, rng=rng, cache=cache
                )
                try:
                    _, d_positions = sharpe_loss_grad(positions, y)
                except DegenerateBatchError:
                    logger.warning("epoch %d: degenerate batch skipped", epoch)
                    continue
                grads = model.backward(cache, d_positions)
                clip_and_adam_step(
                    model,
                    grads,
                    hyperparams.learning_rate,
                    hyperparams.max_grad_norm,
                    state,
                )
        except MomcpdError as exc:
            logger.error("epoch %d aborted: %s", epoch, exc)
            model.params = {k: v.copy() for k, v in best_params.items()}
            break
        val_loss = _validation_loss(model, val_set)
        history.append(val_loss)
        if np.isfinite(val_loss) and val_loss < best_loss:
            best_loss = val_loss
            best_params = model.copy_params()
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break
    model.params = best_params
    return TrainResult(
        model=model,
        validation_loss=best_loss,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        history=history,
    )


@dataclass
class SearchTrial:
    hyperparams: LstmHyperparams
    validation_loss: float
    error: Optional[str] = None


@dataclass
class SearchResult:
    best: TrainResult
    best_hyperparams: LstmHyperparams
    trials: List[SearchTrial] = field(default_factory=list)


def sample_hyperparams(
    rng: np.random.Generator,
    grid: Optional[dict] = None,
    include_lbw: bool = False,
) -> LstmHyperparams:
    grid = grid or DEFAULT_GRID
    draw = {key: grid[key][rng.integers(len(grid[key]))] for key in
            ("dropout_rate", "hidden_size", "minibatch_size", "learning_rate",
             "max_grad_norm")}
    if include_lbw:
        draw["cpd_lbw"] = int(grid["cpd_lbw"][rng.integers(len(grid["cpd_lbw"]))])
    return LstmHyperparams(**draw)


def random_search(
    train_fn: Callable[[LstmHyperparams, int], TrainResult],
    n_iters: int = 50,
    seed: int = 0,
    grid: Optional[dict] = None,
    include_lbw: bool = False,
) -> SearchResult:
    """Uniform random grid search; best trial = lowest finite validation loss.

    ``train_fn(hyperparams, trial_seed)`` runs one training; trial seeds
    derive deterministically from ``seed``.
    """
    if n_iters < 1:
        raise ConfigError("n_iters must be >= 1")
    rng = np.random.default_rng(seed)
    trials: List[SearchTrial] = []
    best: Optional[TrainResult] = None
    best_hp: Optional[LstmHyperparams] = None
    for i in range(n_iters):
        hp = sample_hyperparams(rng, grid, include_lbw=include_lbw)
        trial_seed = int(rng.integers(2**31 - 1))
        try:
            result = train_fn(hp, trial_seed)
        except MomcpdError as exc:
            logger.warning("trial %d failed: %s", i, exc)
            trials.append(SearchTrial(hp, np.inf, error=str(exc)))
            continue
        loss = result.validation_loss if np.isfinite(result.validation_loss) else np.inf
        trials.append(SearchTrial(hp, loss))
        if best is None or loss < best.validation_loss or not np.isfinite(
            best.validation_loss
        ):
            best = result
            best_hp = hp
    if best is None or not np.isfinite(best.validation_loss):
        detail = "; ".join(
            f"trial {i}: {t.error or t.validation_loss}" for i, t in enumerate(trials)
        )
        raise ConfigError(f"all random-search trials failed ({detail})")
    return SearchResult(best=best, best_hyperparams=best_hp, trials=trials)
