"""From-scratch LSTM position network with exact backpropagation.

A single LSTM layer followed by a time-distributed linear head with tanh
squashing maps feature sequences directly to positions in (-1, 1). The
network is trained on an annualized Sharpe objective over all
(sequence, step) pairs of a minibatch; gradients are computed by
backpropagation through time and are exact (finite-difference checked in
the test suite).
"""

import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import DegenerateBatchError, ValidationError

SQRT_ANNUAL = np.sqrt(252.0)

# Gate block order inside the stacked weight matrices.
_I, _F, _G, _O = 0, 1, 2, 3

CHECKPOINT_VERSION = 1


@dataclass
class LstmHyperparams:
    dropout_rate: float = 0.3
    hidden_size: int = 10
    minibatch_size: int = 64
    learning_rate: float = 1e-3
    max_grad_norm: float = 1.0
    cpd_lbw: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "dropout_rate": self.dropout_rate,
            "hidden_size": self.hidden_size,
            "minibatch_size": self.minibatch_size,
            "learning_rate": self.learning_rate,
            "max_grad_norm": self.max_grad_norm,
            "cpd_lbw": self.cpd_lbw,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LstmHyperparams":
        return cls(**data)


DEFAULT_GRID = {
    "dropout_rate": [0.1, 0.2, 0.3, 0.4, 0.5],
    "hidden_size": [5, 10, 20, 40, 80, 160],
    "minibatch_size": [64, 128, 256],
    "learning_rate": [1e-4, 1e-3, 1e-2, 1e-1],
    "max_grad_norm": [1e-2, 1.0, 1e2],
    "cpd_lbw": [10, 21, 63, 126, 252],
}


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class LstmModel:
    """LSTM weights plus the hyperparameters and seed that produced them.

    Parameters live in ``params``: W (input to gates), U (hidden to
    gates), b (gate biases, forget gate offset +1 at init), w_out / b_out
    (position head). Gate blocks are stacked input/forget/candidate/output.
    """

    def __init__(
        self,
        input_size: int,
        hyperparams: LstmHyperparams,
        seed: int,
        feature_columns: Optional[List[str]] = None,
        params: Optional[Dict[str, np.ndarray]] = None,
    ):
        self.input_size = input_size
        self.hyperparams = hyperparams
        self.seed = seed
        self.feature_columns = list(feature_columns or [])
        hidden = hyperparams.hidden_size
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            k = 1.0 / np.sqrt(hidden)
            b = np.zeros(4 * hidden)
            b[_F * hidden:(_F + 1) * hidden] = 1.0  # aids early gradient flow
            self.params = {
                "W": rng.uniform(-k, k, size=(input_size, 4 * hidden)),
                "U": rng.uniform(-k, k, size=(hidden, 4 * hidden)),
                "b": b,
                "w_out": rng.uniform(-k, k, size=hidden),
                "b_out": np.zeros(()),
            }
        self._check_shapes()

    def _check_shapes(self) -> None:
        hidden = self.hyperparams.hidden_size
        expected = {
            "W": (self.input_size, 4 * hidden),
            "U": (hidden, 4 * hidden),
            "b": (4 * hidden,),
            "w_out": (hidden,),
            "b_out": (),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValidationError(
                    f"parameter {name}: expected shape {shape}, "
                    f"got {self.params[name].shape}"
                )

    def copy_params(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def forward(
        self,
        x: np.ndarray,
        dropout_enabled: bool = False,
        rng: Optional[np.random.Generator] = None,
        cache: Optional[dict] = None,
    ) -> np.ndarray:
        """Positions for a batch of sequences, shape (batch, steps).

        States start at zero for every sequence (stateless across
        batches). Dropout masks (inverted scaling) are applied to LSTM
        inputs and outputs when enabled; masks come from ``rng`` so two
        identically seeded calls agree exactly. Pass a dict as ``cache``
        to retain intermediates for :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ValidationError(
                f"expected input (batch, steps, {self.input_size}), got {x.shape}"
            )
        batch, steps, _ = x.shape
        hidden = self.hyperparams.hidden_size
        rate = self.hyperparams.dropout_rate
        if dropout_enabled and rate > 0:
            if rng is None:
                raise ValidationError("dropout enabled but no rng supplied")
            keep = 1.0 - rate
            in_mask = (rng.random(x.shape) < keep) / keep
            out_mask = (rng.random((batch, steps, hidden)) < keep) / keep
        else:
            in_mask = np.ones_like(x)
            out_mask = np.ones((batch, steps, hidden))

        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        w_out, b_out = self.params["w_out"], self.params["b_out"]

        xm = x * in_mask
        h = np.zeros((batch, hidden))
        c = np.zeros((batch, hidden))
        gates = np.empty((steps, batch, 4 * hidden))
        cells = np.empty((steps, batch, hidden))
        tanh_cells = np.empty((steps, batch, hidden))
        hiddens = np.empty((steps, batch, hidden))
        positions = np.empty((batch, steps))
        for t in range(steps):
            z = xm[:, t, :] @ W + h @ U + b
            i = _sigmoid(z[:, _I * hidden:(_I + 1) * hidden])
            f = _sigmoid(z[:, _F * hidden:(_F + 1) * hidden])
            g = np.tanh(z[:, _G * hidden:(_G + 1) * hidden])
            o = _sigmoid(z[:, _O * hidden:(_O + 1) * hidden])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gates[t] = np.concatenate([i, f, g, o], axis=1)
            cells[t] = c
            tanh_cells[t] = tc
            hiddens[t] = h
            hm = h * out_mask[:, t, :]
            positions[:, t] = np.tanh(hm @ w_out + b_out)
        if cache is not None:
            cache.update(
                xm=xm,
                in_mask=in_mask,
                out_mask=out_mask,
                gates=gates,
                cells=cells,
                tanh_cells=tanh_cells,
                hiddens=hiddens,
                positions=positions,
            )
        return positions

    def backward(self, cache: dict, d_positions: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. all parameters.

        ``d_positions`` is dLoss/dX over the cached forward batch;
        backpropagation runs through the head and all time steps.
        """
        xm = cache["xm"]
        out_mask = cache["out_mask"]
        gates = cache["gates"]
        cells = cache["cells"]
        tanh_cells = cache["tanh_cells"]
        hiddens = cache["hiddens"]
        positions = cache["positions"]
        batch, steps, _ = xm.shape
        hidden = self.hyperparams.hidden_size
        W, U = self.params["W"], self.params["U"]
        w_out = self.params["w_out"]

        grads = {
            "W": np.zeros_like(W),
            "U": np.zeros_like(U),
            "b": np.zeros_like(self.params["b"]),
            "w_out": np.zeros_like(w_out),
            "b_out": np.zeros(()),
        }
        dh_next = np.zeros((batch, hidden))
        dc_next = np.zeros((batch, hidden))
        for t in range(steps - 1, -1, -1):
            hm = hiddens[t] * out_mask[:, t, :]
            da = d_positions[:, t] * (1.0 - positions[:, t] ** 2)
            grads["w_out"] += da @ hm
            grads["b_out"] += da.sum()
            dh = da[:, None] * w_out[None, :] * out_mask[:, t, :] + dh_next

            i = gates[t][:, _I * hidden:(_I + 1) * hidden]
            f = gates[t][:, _F * hidden:(_F + 1) * hidden]
            g = gates[t][:, _G * hidden:(_G + 1) * hidden]
            o = gates[t][:, _O * hidden:(_O + 1) * hidden]
            tc = tanh_cells[t]
            c_prev = cells[t - 1] if t > 0 else np.zeros((batch, hidden))
            h_prev = hiddens[t - 1] if t > 0 else np.zeros((batch, hidden))

            do = dh * tc
            dc = dh * o * (1.0 - tc**2) + dc_next
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            dc_next = dc * f

            dz = np.concatenate(
                [
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g**2),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            grads["W"] += xm[:, t, :].T @ dz
            grads["U"] += h_prev.T @ dz
            grads["b"] += dz.sum(axis=0)
            dh_next = dz @ U.T
        return grads


def sharpe_loss(positions: np.ndarray, vol_scaled_returns: np.ndarray) -> float:
    """Negative annualized Sharpe of captured returns over the batch.

    Captured returns are elementwise products of positions and the
    vol-scaled next-day return components; the std is the population std
    over all (sequence, step) pairs.
    """
    captured = (np.asarray(positions) * np.asarray(vol_scaled_returns)).ravel()
    if captured.size < 2:
        raise DegenerateBatchError("need at least 2 captured returns")
    std = captured.std()
    if std < 1e-12:
        raise DegenerateBatchError("captured returns have ~zero dispersion")
    return float(-SQRT_ANNUAL * captured.mean() / std)


def sharpe_loss_grad(
    positions: np.ndarray, vol_scaled_returns: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Loss value plus dLoss/dPositions, same shape as ``positions``."""
    positions = np.asarray(positions, dtype=float)
    targets = np.asarray(vol_scaled_returns, dtype=float)
    captured = positions * targets
    flat = captured.ravel()
    if flat.size < 2:
        raise DegenerateBatchError("need at least 2 captured returns")
    n = flat.size
    mean = flat.mean()
    std = flat.std()
    if std < 1e-12:
        raise DegenerateBatchError("captured returns have ~zero dispersion")
    loss = -SQRT_ANNUAL * mean / std
    # d/dR_k of -sqrt(252) m/s with population statistics.
    d_captured = -SQRT_ANNUAL / (n * std) * (1.0 - mean * (captured - mean) / std**2)
    return float(loss), d_captured * targets


def save_model(model: LstmModel, path) -> None:
    """Write a versioned npz checkpoint (weights + JSON metadata)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "input_size": model.input_size,
        "seed": model.seed,
        "feature_columns": model.feature_columns,
        "hyperparams": model.hyperparams.to_dict(),
    }
    arrays = {f"param_{k}": v for k, v in model.params.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> LstmModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValidationError(
                f"checkpoint version {meta['version']} newer than supported "
                f"{CHECKPOINT_VERSION}"
            )
        params = {
            key[len("param_"):]: data[key]
            for key in data.files
            if key.startswith("param_")
        }
    return LstmModel(
        input_size=meta["input_size"],
        hyperparams=LstmHyperparams.from_dict(meta["hyperparams"]),
        seed=meta["seed"],
        feature_columns=meta["feature_columns"],
        params=params,
    )
