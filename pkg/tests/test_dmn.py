import numpy as np
import pandas as pd
import pytest

from momcpd.data import arithmetic_returns, ewm_volatility
from momcpd.dmn import features as feat
from momcpd.dmn import lstm as nn
from momcpd.dmn import train as tr
from momcpd.errors import ConfigError, DegenerateBatchError, ValidationError
from momcpd.gp_cpd import results_to_frame, run_cpd

import conftest


# ---------------------------------------------------------------- features


def test_build_features_columns_and_start(trending_prices, trending_returns, trending_vols):
    frame = feat.build_features(trending_returns, trending_vols, trending_prices)
    assert list(frame.columns) == [
        "ret_1", "ret_21", "ret_63", "ret_126", "ret_252",
        "macd_8_24", "macd_16_28", "macd_32_96",
    ]
    assert np.isfinite(frame.to_numpy()).all()
    # rows begin once the longest trailing-return offset has history
    first = frame.index[0]
    assert trending_prices.series.index.get_loc(first) >= 252


def test_build_features_normalization(trending_prices, trending_returns, trending_vols):
    frame = feat.build_features(trending_returns, trending_vols, trending_prices)
    t = frame.index[10]
    p = trending_prices.series
    sigma_daily = trending_vols.series.loc[t] / np.sqrt(252)
    loc = p.index.get_loc(t)
    expected = (p.iloc[loc] / p.iloc[loc - 21] - 1.0) / (sigma_daily * np.sqrt(21))
    assert frame.loc[t, "ret_21"] == pytest.approx(expected)


def test_build_features_is_causal(trending_prices, trending_returns, trending_vols):
    from momcpd.data import PriceSeries

    full = feat.build_features(trending_returns, trending_vols, trending_prices)
    cutoff = trending_prices.series.index[900]
    short_prices = PriceSeries("TRND", trending_prices.series.loc[:cutoff])
    short_returns = arithmetic_returns(short_prices)
    short_vols = ewm_volatility(short_returns)
    short = feat.build_features(short_returns, short_vols, short_prices)
    overlap = short.index.intersection(full.index)
    assert len(overlap) > 100
    pd.testing.assert_frame_equal(short.loc[overlap], full.loc[overlap])


def test_build_features_with_cpd_cache(rng):
    returns = conftest.make_return_series(
        rng.normal(0, 0.01, size=400), symbol="CPD"
    )
    prices = conftest.make_price_series(
        100 * np.cumprod(1 + np.concatenate(([0.0], returns.series.to_numpy()[1:]))),
        symbol="CPD",
    )
    vols = ewm_volatility(returns)
    cache = results_to_frame(run_cpd(returns, lookback=10))
    cache["date"] = pd.to_datetime(cache["date"])
    frame = feat.build_features(
        returns, vols, prices, cpd_cache=cache, lbw=10, offsets=(1, 21, 63)
    )
    assert "cpd_nu" in frame.columns and "cpd_gamma" in frame.columns
    assert frame["cpd_nu"].between(0, 1).all()


def test_build_features_rejects_missing_cache_dates(trending_prices, trending_returns, trending_vols):
    cache = pd.DataFrame(
        {
            "symbol": ["TRND"],
            "date": [trending_prices.series.index[260]],
            "lookback": [21],
            "nu": [0.5],
            "gamma": [0.5],
            "nlml_matern": [1.0],
            "nlml_changepoint": [1.0],
            "fallback": ["none"],
        }
    )
    with pytest.raises(ValidationError, match="missing"):
        feat.build_features(
            trending_returns, trending_vols, trending_prices, cpd_cache=cache, lbw=21
        )


def test_vol_scaled_targets_alignment(trending_prices, trending_returns, trending_vols):
    targets = feat.vol_scaled_targets(trending_returns, trending_vols, 0.15)
    t = targets.index[3]
    loc = trending_returns.series.index.get_loc(t)
    r_next = trending_returns.series.iloc[loc + 1]
    assert targets.loc[t] == pytest.approx(0.15 / trending_vols.series.loc[t] * r_next)


# ---------------------------------------------------------------- network


def _toy_model(input_size=3, hidden=4, seed=0, dropout=0.0):
    hp = nn.LstmHyperparams(
        dropout_rate=dropout, hidden_size=hidden, minibatch_size=8, learning_rate=1e-3
    )
    return nn.LstmModel(input_size, hp, seed=seed, feature_columns=[f"f{i}" for i in range(input_size)])


def test_forward_shape_and_range(rng):
    model = _toy_model()
    x = rng.normal(size=(5, 7, 3))
    positions = model.forward(x)
    assert positions.shape == (5, 7)
    assert (np.abs(positions) < 1.0).all()


def test_forward_rejects_bad_shape(rng):
    model = _toy_model()
    with pytest.raises(ValidationError):
        model.forward(rng.normal(size=(5, 7, 4)))


def test_forward_is_stateless_across_sequences(rng):
    model = _toy_model()
    x = rng.normal(size=(4, 6, 3))
    batched = model.forward(x)
    singles = np.vstack([model.forward(x[i:i + 1]) for i in range(4)])
    np.testing.assert_allclose(batched, singles, atol=1e-14)


def test_dropout_reproducible_from_rng(rng):
    model = _toy_model(dropout=0.4)
    x = rng.normal(size=(3, 5, 3))
    a = model.forward(x, dropout_enabled=True, rng=np.random.default_rng(9))
    b = model.forward(x, dropout_enabled=True, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    c = model.forward(x, dropout_enabled=True, rng=np.random.default_rng(10))
    assert not np.array_equal(a, c)


def test_dropout_requires_rng(rng):
    model = _toy_model(dropout=0.4)
    with pytest.raises(ValidationError):
        model.forward(rng.normal(size=(2, 3, 3)), dropout_enabled=True)


def test_forget_gate_bias_initialized_high():
    model = _toy_model(hidden=6)
    b = model.params["b"]
    assert (b[6:12] == 1.0).all()
    assert (b[:6] == 0.0).all()


# ---------------------------------------------------------------- loss


def test_sharpe_loss_two_point_contract():
    # captured returns [0.02, 0.00]: mean 0.01, population std 0.01
    loss = nn.sharpe_loss(np.array([[1.0, 1.0]]), np.array([[0.02, 0.0]]))
    assert loss == pytest.approx(-np.sqrt(252.0), abs=1e-9)


def test_sharpe_loss_scale_invariant(rng):
    positions = rng.uniform(-1, 1, size=(4, 10))
    targets = rng.normal(0, 0.01, size=(4, 10))
    base = nn.sharpe_loss(positions, targets)
    assert nn.sharpe_loss(positions, targets * 7.5) == pytest.approx(base, abs=1e-12)


def test_sharpe_loss_duplication_invariant(rng):
    positions = rng.uniform(-1, 1, size=(4, 10))
    targets = rng.normal(0, 0.01, size=(4, 10))
    base = nn.sharpe_loss(positions, targets)
    doubled = nn.sharpe_loss(
        np.vstack([positions, positions]), np.vstack([targets, targets])
    )
    assert doubled == pytest.approx(base, abs=1e-12)


def test_sharpe_loss_degenerate_batches():
    with pytest.raises(DegenerateBatchError):
        nn.sharpe_loss(np.array([[1.0]]), np.array([[0.01]]))
    with pytest.raises(DegenerateBatchError):
        nn.sharpe_loss(np.ones((2, 3)), np.full((2, 3), 0.01))


def test_sharpe_loss_grad_matches_finite_differences(rng):
    positions = rng.uniform(-0.9, 0.9, size=(3, 6))
    targets = rng.normal(0, 0.01, size=(3, 6))
    loss, grad = nn.sharpe_loss_grad(positions, targets)
    assert loss == pytest.approx(nn.sharpe_loss(positions, targets))
    h = 1e-7
    for idx in [(0, 0), (1, 3), (2, 5)]:
        up = positions.copy()
        dn = positions.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (nn.sharpe_loss(up, targets) - nn.sharpe_loss(dn, targets)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_backward_matches_finite_differences(rng):
    model = _toy_model(input_size=2, hidden=3, seed=4)
    x = rng.normal(size=(2, 4, 2))
    y = rng.normal(0, 0.01, size=(2, 4))
    cache = {}
    positions = model.forward(x, cache=cache)
    _, d_positions = nn.sharpe_loss_grad(positions, y)
    grads = model.backward(cache, d_positions)
    h = 1e-6
    for name in grads:
        flat = model.params[name].reshape(-1)
        g_flat = np.asarray(grads[name]).reshape(-1)
        for k in range(0, flat.size, max(1, flat.size // 5)):
            orig = flat[k]
            flat[k] = orig + h
            up = nn.sharpe_loss(model.forward(x), y)
            flat[k] = orig - h
            dn = nn.sharpe_loss(model.forward(x), y)
            flat[k] = orig
            fd = (up - dn) / (2 * h)
            assert g_flat[k] == pytest.approx(fd, rel=1e-4, abs=1e-8), name


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = _toy_model(input_size=5, hidden=3, seed=17)
    model.hyperparams.cpd_lbw = 21
    path = tmp_path / "model.npz"
    nn.save_model(model, path)
    loaded = nn.load_model(path)
    assert loaded.input_size == 5
    assert loaded.seed == 17
    assert loaded.feature_columns == model.feature_columns
    assert loaded.hyperparams.to_dict() == model.hyperparams.to_dict()
    for key in model.params:
        np.testing.assert_array_equal(loaded.params[key], model.params[key])


def test_checkpoint_rejects_newer_version(tmp_path, monkeypatch):
    model = _toy_model()
    path = tmp_path / "model.npz"
    monkeypatch.setattr(nn, "CHECKPOINT_VERSION", 99)
    nn.save_model(model, path)
    monkeypatch.setattr(nn, "CHECKPOINT_VERSION", 1)
    with pytest.raises(ValidationError, match="version"):
        nn.load_model(path)


# ---------------------------------------------------------------- training


def _toy_dataset(rng, n_days=400, n_assets=2, predictable=True):
    features, targets = {}, {}
    for a in range(n_assets):
        index = pd.bdate_range("2015-01-05", periods=n_days)
        signal = rng.normal(size=n_days)
        noise = rng.normal(0, 0.3, size=n_days)
        frame = pd.DataFrame({"f0": signal, "f1": rng.normal(size=n_days)}, index=index)
        y = signal + noise if predictable else rng.normal(size=n_days)
        features[f"A{a}"] = frame
        targets[f"A{a}"] = pd.Series(0.01 * y, index=index)
    return features, targets


def test_build_sequences_split(rng):
    features, targets = _toy_dataset(rng, n_days=200)
    train_set, val_set = tr.build_sequences(features, targets, tau=20)
    # 180 train days -> 9 sequences, 20 validation days -> 1, per asset
    assert len(train_set) == 18
    assert len(val_set) == 2
    assert train_set.features.shape == (18, 20, 2)
    assert sorted(set(train_set.symbols)) == ["A0", "A1"]


def test_build_sequences_excludes_short_validation(rng):
    features, targets = _toy_dataset(rng, n_days=200, n_assets=1)
    with pytest.raises(ConfigError):
        tr.build_sequences(features, targets, tau=50)  # validation span: 20 days


def test_adam_first_step_is_signed_lr(rng):
    model = _toy_model(input_size=2, hidden=2)
    state = tr.AdamState(model.params)
    grads = {k: rng.normal(size=v.shape) for k, v in model.params.items()}
    before = model.copy_params()
    tr.clip_and_adam_step(model, grads, lr=0.01, max_grad_norm=1e9, state=state)
    for key, g in grads.items():
        step = model.params[key] - before[key]
        np.testing.assert_allclose(step, -0.01 * np.sign(g), atol=1e-6)


def test_gradient_clipping_rescales_global_norm(rng):
    model = _toy_model(input_size=2, hidden=2)
    state = tr.AdamState(model.params)
    grads = {k: 100.0 * np.ones_like(v) for k, v in model.params.items()}
    tr.clip_and_adam_step(model, grads, lr=0.01, max_grad_norm=1.0, state=state)
    total = np.sqrt(sum(np.sum(m**2) for m in state.m.values()))
    # first Adam moment is (1 - beta1) * clipped gradient
    assert total == pytest.approx((1.0 - tr.ADAM_BETA1) * 1.0, rel=1e-9)


def test_train_is_deterministic(rng):
    features, targets = _toy_dataset(rng)
    hp = nn.LstmHyperparams(dropout_rate=0.1, hidden_size=4, minibatch_size=8,
                            learning_rate=1e-2)
    a = tr.train(features, targets, hp, seed=5, max_epochs=3, tau=20)
    b = tr.train(features, targets, hp, seed=5, max_epochs=3, tau=20)
    for key in a.model.params:
        np.testing.assert_array_equal(a.model.params[key], b.model.params[key])
    assert a.history == b.history


def test_train_improves_on_predictable_data(rng):
    features, targets = _toy_dataset(rng, n_days=600)
    hp = nn.LstmHyperparams(dropout_rate=0.0, hidden_size=4, minibatch_size=16,
                            learning_rate=1e-2)
    result = tr.train(features, targets, hp, seed=1, max_epochs=30, tau=20)
    assert result.validation_loss < result.history[0]
    assert result.best_epoch >= 1


def test_train_early_stops_within_patience(rng):
    features, targets = _toy_dataset(rng, predictable=False)
    hp = nn.LstmHyperparams(dropout_rate=0.0, hidden_size=3, minibatch_size=16,
                            learning_rate=1e-4)
    result = tr.train(
        features, targets, hp, seed=2, max_epochs=200, patience=4, tau=20
    )
    assert result.epochs_run < 200
    assert result.epochs_run - result.best_epoch <= 4 + 1


def test_train_restores_best_epoch_weights(rng):
    features, targets = _toy_dataset(rng)
    hp = nn.LstmHyperparams(dropout_rate=0.0, hidden_size=3, minibatch_size=16,
                            learning_rate=5e-2)
    result = tr.train(features, targets, hp, seed=3, max_epochs=10, patience=3, tau=20)
    val = tr._validation_loss(result.model, tr.build_sequences(features, targets, tau=20)[1])
    assert val == pytest.approx(result.validation_loss, abs=1e-12)


# ---------------------------------------------------------------- search


def test_sample_hyperparams_draws_from_grid():
    rng = np.random.default_rng(0)
    grid = dict(nn.DEFAULT_GRID)
    for _ in range(20):
        hp = tr.sample_hyperparams(rng, grid, include_lbw=True)
        assert hp.hidden_size in grid["hidden_size"]
        assert hp.learning_rate in grid["learning_rate"]
        assert hp.cpd_lbw in grid["cpd_lbw"]
    hp = tr.sample_hyperparams(rng, grid, include_lbw=False)
    assert hp.cpd_lbw is None


def test_random_search_picks_best_trial():
    calls = []

    def train_fn(hp, trial_seed):
        calls.append(trial_seed)
        loss = float(hp.hidden_size)  # smaller hidden size wins
        model = _toy_model(hidden=hp.hidden_size)
        return tr.TrainResult(model=model, validation_loss=loss, best_epoch=1,
                              epochs_run=1)

    result = tr.random_search(train_fn, n_iters=6, seed=0)
    assert result.best.validation_loss == min(t.validation_loss for t in result.trials)
    assert result.best_hyperparams.hidden_size == int(result.best.validation_loss)
    assert len(set(calls)) == 6  # distinct deterministic trial seeds


def test_random_search_tolerates_failures():
    def train_fn(hp, trial_seed):
        if hp.hidden_size > 10:
            raise DegenerateBatchError("boom")
        return tr.TrainResult(model=_toy_model(), validation_loss=-1.0,
                              best_epoch=1, epochs_run=1)

    result = tr.random_search(train_fn, n_iters=10, seed=1)
    assert result.best.validation_loss == -1.0
    assert any(t.error for t in result.trials)


def test_random_search_all_failures_raises():
    def train_fn(hp, trial_seed):
        raise DegenerateBatchError("always")

    with pytest.raises(ConfigError):
        tr.random_search(train_fn, n_iters=3, seed=2)
