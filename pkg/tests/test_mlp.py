"""Dense network: config, splits, backprop exactness, training loop."""

import math

import numpy as np
import pytest

from indoor_fusion.errors import (
    DimensionMismatch,
    Divergence,
    InsufficientData,
    TooFewFrames,
)
from indoor_fusion.ingest import FusionFrame, select_blocks
from indoor_fusion.mlp import (
    DEFAULT_HIDDEN,
    Mlp,
    MlpConfig,
    SplitSpec,
    forward,
    gradient_check,
    load_checkpoint,
    median_position_error,
    predict_stream,
    save_checkpoint,
    split_dataset,
    train,
    train_arrays,
)
from indoor_fusion.records import Position2D


def _identity_frames(n, seed=0):
    """Frames whose label is literally their two features: y = x."""
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n):
        x, y = rng.uniform(0.5, 7.5), rng.uniform(0.5, 5.5)
        frames.append(FusionFrame(float(i), np.asarray([x, y]), np.asarray([1.0]),
                                  Position2D(x, y)))
    return frames


def _tiny_config(**kwargs):
    defaults = dict(layer_sizes=(2, 8, 2), activation="tanh", optimizer="adam",
                    learning_rate=1e-2, epochs=5, batch_size=16, seed=1)
    defaults.update(kwargs)
    return MlpConfig(**defaults)


# ---------------------------------------------------------------------------
# Config and splits

def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 2))          # no hidden layer
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 8, 3))       # output must be (x, y)
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 0, 2))
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 8, 2), activation="sigmoid")
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 8, 2), optimizer="rmsprop")
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 8, 2), learning_rate=-1.0)
    with pytest.raises(ValueError):
        MlpConfig(layer_sizes=(4, 8, 2), epochs=0)
    assert MlpConfig(layer_sizes=(4, 8, 2), learning_rate=0.0).learning_rate == 0.0


def test_config_helpers():
    c = MlpConfig.for_input(30)
    assert c.layer_sizes == (30, *DEFAULT_HIDDEN, 2)
    c2 = c.with_input(7)
    assert c2.layer_sizes == (7, *DEFAULT_HIDDEN, 2)
    c3 = MlpConfig.for_input(5, hidden=(4,), epochs=3)
    assert c3.layer_sizes == (5, 4, 2) and c3.epochs == 3


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(train_fraction=0.0)
    with pytest.raises(ValueError):
        SplitSpec(train_fraction=1.0)


def test_split_dataset_is_an_exact_partition():
    items = list(range(37))
    train_part, test_part = split_dataset(items, SplitSpec(0.9, 3))
    assert len(train_part) == 33  # round(37 * 0.9)
    assert len(test_part) == 4
    assert sorted(train_part + test_part) == items
    again = split_dataset(items, SplitSpec(0.9, 3))
    assert again == (train_part, test_part)
    different = split_dataset(items, SplitSpec(0.9, 4))
    assert different != (train_part, test_part)


def test_split_dataset_always_leaves_both_sides_nonempty():
    items = list(range(10))
    train_part, test_part = split_dataset(items, SplitSpec(0.99, 0))
    assert len(train_part) == 9 and len(test_part) == 1
    train_part, test_part = split_dataset(items, SplitSpec(0.01, 0))
    assert len(train_part) == 1 and len(test_part) == 9
    with pytest.raises(TooFewFrames):
        split_dataset(list(range(9)))


# ---------------------------------------------------------------------------
# Forward and backward passes

def test_forward_shapes_and_width_check():
    model = Mlp(_tiny_config())
    out = model.forward(np.zeros((5, 2)))
    assert out.shape == (5, 2)
    with pytest.raises(DimensionMismatch):
        model.forward(np.zeros((5, 3)))
    x, y = forward(model, np.zeros(2))
    assert (x, y) == (float(out[0, 0]), float(out[0, 1]))


def test_manual_forward_and_loss_oracle():
    config = MlpConfig(layer_sizes=(1, 1, 2), activation="tanh",
                       normalization=False)
    model = Mlp(config)
    model.weights = [np.asarray([[1.0]]), np.asarray([[0.5, -0.5]])]
    model.biases = [np.asarray([0.0]), np.asarray([0.1, 0.2])]
    a = math.tanh(0.3)
    expected = (a * 0.5 + 0.1, -a * 0.5 + 0.2)
    out = model.forward(np.asarray([[0.3]]))
    assert out[0, 0] == pytest.approx(expected[0], abs=1e-15)
    assert out[0, 1] == pytest.approx(expected[1], abs=1e-15)

    y = np.asarray([[1.0, 0.0]])
    loss, _, _ = model.loss_and_grad(np.asarray([[0.3]]), y)
    hand = (expected[0] - 1.0) ** 2 + (expected[1] - 0.0) ** 2
    assert loss == pytest.approx(hand, abs=1e-15)


def test_loss_and_grad_input_validation():
    model = Mlp(_tiny_config())
    with pytest.raises(InsufficientData):
        model.loss_and_grad(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(DimensionMismatch):
        model.loss_and_grad(np.zeros((3, 2)), np.zeros((2, 2)))


def test_gradient_check_tanh_tight():
    rng = np.random.default_rng(5)
    model = Mlp(MlpConfig(layer_sizes=(4, 10, 6, 2), activation="tanh", seed=5))
    x = rng.normal(size=(12, 4))
    y = rng.normal(size=(12, 2))
    model.set_normalization(x)
    assert gradient_check(model, x, y) < 1e-7


def test_gradient_check_relu():
    rng = np.random.default_rng(6)
    model = Mlp(MlpConfig(layer_sizes=(3, 16, 2), activation="relu", seed=6))
    x = rng.normal(size=(10, 3))
    y = rng.normal(size=(10, 2))
    assert gradient_check(model, x, y) < 1e-5


def test_gradient_check_sampling_is_cheap_and_consistent():
    rng = np.random.default_rng(7)
    model = Mlp(MlpConfig(layer_sizes=(6, 12, 2), activation="tanh", seed=7))
    x = rng.normal(size=(8, 6))
    y = rng.normal(size=(8, 2))
    full = gradient_check(model, x, y)
    sampled = gradient_check(model, x, y, samples=20, rng=np.random.default_rng(1))
    assert sampled <= full + 1e-12


# ---------------------------------------------------------------------------
# Optimizer steps

def test_zero_learning_rate_leaves_weights_at_init():
    config = _tiny_config(optimizer="sgd", learning_rate=0.0, epochs=3)
    x = np.random.default_rng(0).normal(size=(20, 2))
    y = x.copy()
    model, history = train_arrays(x, y, x[:4], y[:4], config)
    fresh = Mlp(config)
    fresh.set_normalization(x)
    for got, want in zip(model.weights, fresh.weights):
        np.testing.assert_array_equal(got, want)
    # per-epoch losses agree up to summation order of the shuffled batches
    losses = [h[1] for h in history]
    assert max(losses) - min(losses) < 1e-12


def test_single_sgd_step_matches_the_update_rule():
    config = MlpConfig(layer_sizes=(2, 4, 2), activation="tanh", optimizer="sgd",
                       learning_rate=0.1, epochs=1, batch_size=8, seed=3)
    x = np.asarray([[0.4, -0.2]])
    y = np.asarray([[1.0, 2.0]])
    model, _ = train_arrays(x, y, np.zeros((0, 2)), np.zeros((0, 2)), config)

    reference = Mlp(config, rng=np.random.default_rng(config.seed))
    reference.set_normalization(x)
    _, grad_w, grad_b = reference.loss_and_grad(x, y)
    for got, w0, g in zip(model.weights, reference.weights, grad_w):
        np.testing.assert_array_equal(got, w0 - 0.1 * g)
    for got, b0, g in zip(model.biases, reference.biases, grad_b):
        np.testing.assert_array_equal(got, b0 - 0.1 * g)


def test_first_adam_step_moves_by_lr_times_sign():
    config = MlpConfig(layer_sizes=(2, 4, 2), activation="tanh", optimizer="adam",
                       learning_rate=1e-3, epochs=1, batch_size=8, seed=4)
    x = np.asarray([[0.7, 0.1]])
    y = np.asarray([[-1.0, 0.5]])
    model, _ = train_arrays(x, y, np.zeros((0, 2)), np.zeros((0, 2)), config)

    reference = Mlp(config, rng=np.random.default_rng(config.seed))
    reference.set_normalization(x)
    _, grad_w, _ = reference.loss_and_grad(x, y)
    for got, w0, g in zip(model.weights, reference.weights, grad_w):
        delta = got - w0
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), atol=1e-3 * 1e-4)


# ---------------------------------------------------------------------------
# Training loop behavior

def test_training_is_deterministic():
    frames = _identity_frames(60)
    config = _tiny_config(layer_sizes=(3, 8, 2))
    m1, h1 = train(frames, config)
    m2, h2 = train(frames, config)
    assert h1 == h2
    for a, b in zip(m1.weights, m2.weights):
        np.testing.assert_array_equal(a, b)


def test_training_learns_the_identity_task():
    frames = _identity_frames(250)
    config = MlpConfig(layer_sizes=(3, 32, 2), activation="tanh", optimizer="adam",
                       learning_rate=3e-2, epochs=60, batch_size=32, seed=0)
    model, history = train(frames, config)
    final_err = history[-1][2]
    best = min(h[2] for h in history)
    assert best < 0.2
    # training reduced the loss from its starting point
    assert history[-1][1] < history[0][1]
    assert math.isfinite(final_err)


def test_best_snapshot_is_restored():
    frames = _identity_frames(80, seed=2)
    config = _tiny_config(layer_sizes=(3, 8, 2), epochs=12, learning_rate=5e-2)
    spec = SplitSpec(0.8, 1)
    model, history = train(frames, config, spec)
    train_frames, test_frames = split_dataset(frames, spec)
    from indoor_fusion.ingest import frames_to_arrays

    x_test, y_test = frames_to_arrays(test_frames)
    final = median_position_error(model, x_test, y_test)
    assert final == pytest.approx(min(h[2] for h in history), abs=1e-12)


def test_early_stopping_counts_stale_epochs():
    x = np.random.default_rng(1).normal(size=(30, 2))
    y = x.copy()
    config = _tiny_config(optimizer="sgd", learning_rate=0.0, epochs=50, patience=3)
    _, history = train_arrays(x, y, x[:5], y[:5], config)
    # epoch 0 sets the best; the next `patience` epochs cannot improve
    assert len(history) == 4


def test_divergence_carries_history():
    # relu passes the raw 1e300 features through; the first matmul overflows
    x = np.asarray([[1e300, 1e300]] * 12)
    y = np.zeros((12, 2))
    config = _tiny_config(normalization=False, activation="relu",
                          learning_rate=1e6, optimizer="sgd")
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(Divergence) as exc:
            train_arrays(x, y, np.zeros((0, 2)), np.zeros((0, 2)), config)
    assert isinstance(exc.value.history, list)


def test_train_arrays_validates_shapes():
    config = _tiny_config()
    with pytest.raises(InsufficientData):
        train_arrays(np.zeros((0, 2)), np.zeros((0, 2)),
                     np.zeros((0, 2)), np.zeros((0, 2)), config)
    with pytest.raises(DimensionMismatch):
        train_arrays(np.zeros((5, 3)), np.zeros((5, 2)),
                     np.zeros((0, 3)), np.zeros((0, 2)), config)


def test_normalization_can_be_disabled():
    config = _tiny_config(normalization=False)
    model = Mlp(config)
    model.set_normalization(np.full((10, 2), 100.0))
    np.testing.assert_array_equal(model.x_mean, np.zeros(2))
    np.testing.assert_array_equal(model.x_std, np.ones(2))


# ---------------------------------------------------------------------------
# Persistence and prediction

def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    frames = _identity_frames(40)
    model, _ = train(frames, _tiny_config(layer_sizes=(3, 8, 2), epochs=2))
    path = tmp_path / "model.json"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.config == model.config
    np.testing.assert_array_equal(back.x_mean, model.x_mean)
    np.testing.assert_array_equal(back.x_std, model.x_std)
    for a, b in zip(model.weights + model.biases, back.weights + back.biases):
        np.testing.assert_array_equal(a, b)
    x = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(model.forward(x), back.forward(x))


def test_predict_stream_parallels_the_frames():
    frames = _identity_frames(40)
    model, _ = train(frames, _tiny_config(layer_sizes=(3, 8, 2), epochs=2))
    estimates = predict_stream(model, frames[:5])
    assert [t for t, _ in estimates] == [f.t_ref for f in frames[:5]]
    assert all(isinstance(p, Position2D) for _, p in estimates)
    assert predict_stream(model, []) == []


def test_median_position_error_matches_numpy():
    model = Mlp(_tiny_config())
    x = np.random.default_rng(2).normal(size=(9, 2))
    y = np.random.default_rng(3).normal(size=(9, 2))
    pred = model.forward(x)
    want = float(np.median(np.hypot(*(pred - y).T)))
    assert median_position_error(model, x, y) == want


# ---------------------------------------------------------------------------
# End-to-end on simulated data

def test_rssi_frames_are_learnable(noiseless_campaign):
    result = noiseless_campaign.result
    frames, layout = select_blocks(result.frames, result.layout, ["rssi"])
    config = MlpConfig.for_input(layout.feature_width + layout.mask_width,
                                 hidden=(64, 32), learning_rate=1e-2,
                                 epochs=40, seed=0)
    model, history = train(frames, config)
    assert min(h[2] for h in history) <= 0.5
