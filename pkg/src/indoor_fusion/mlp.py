"""Small dense position-regression network, written against numpy only.

Float64 end to end so the analytic gradients can be checked against central
finite differences to tight tolerance.  Training is plain minibatch SGD or
Adam on mean squared position error over fusion frames, with feature
normalization frozen from the training split and the best-so-far weights
(by held-out median position error) restored at the end.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, Divergence, InsufficientData, TooFewFrames
from .ingest import FusionFrame, frames_to_arrays
from .records import Position2D

_ACTIVATIONS = ("relu", "tanh")
_OPTIMIZERS = ("adam", "sgd")
DEFAULT_HIDDEN = (256, 128, 64)


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and optimization settings; layer_sizes includes the
    input width and the fixed 2-wide (x, y) output."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 64
    patience: int = 10
    normalization: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least one hidden layer: (input, hidden..., 2)")
        if self.layer_sizes[-1] != 2:
            raise ValueError(f"output layer must be 2-wide, got {self.layer_sizes[-1]}")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}")
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate must be >= 0; epochs, batch_size >= 1")

    @classmethod
    def for_input(cls, input_dim: int, hidden: tuple[int, ...] = DEFAULT_HIDDEN,
                  **kwargs) -> "MlpConfig":
        return cls(layer_sizes=(input_dim, *hidden, 2), **kwargs)

    def with_input(self, input_dim: int) -> "MlpConfig":
        return replace(self, layer_sizes=(input_dim, *self.layer_sizes[1:-1], 2))


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic shuffled train/test partition rule."""

    train_fraction: float = 0.9
    shuffle_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), "
                             f"got {self.train_fraction}")


def split_dataset(frames: list, spec: SplitSpec = SplitSpec()) -> tuple[list, list]:
    """Shuffle by seed, take the first train_fraction as train, rest as test.

    Exact partition: no overlap, union equals the input multiset.
    """
    if len(frames) < 10:
        raise TooFewFrames(f"need >= 10 frames to split, got {len(frames)}")
    perm = np.random.default_rng(spec.shuffle_seed).permutation(len(frames))
    n_train = min(max(int(round(len(frames) * spec.train_fraction)), 1),
                  len(frames) - 1)
    return ([frames[i] for i in perm[:n_train]],
            [frames[i] for i in perm[n_train:]])


class Mlp:
    """Fully connected net mapping a feature vector to an (x, y) estimate."""

    def __init__(self, config: MlpConfig, rng: np.random.Generator | None = None):
        self.config = config
        sizes = config.layer_sizes
        self.x_mean = np.zeros(sizes[0])
        self.x_std = np.ones(sizes[0])
        rng = rng or np.random.default_rng(config.seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / fan_in) if config.activation == "relu" \
                else math.sqrt(1.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.config.layer_sizes[0]

    def _activate(self, z: np.ndarray) -> np.ndarray:
        if self.config.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _activate_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        if self.config.activation == "relu":
            return (z > 0.0).astype(np.float64)
        return 1.0 - a * a

    def set_normalization(self, x: np.ndarray) -> None:
        """Freeze per-feature standardization from (training) data."""
        if not self.config.normalization:
            return
        x = np.atleast_2d(x)
        self.x_mean = x.mean(axis=0)
        self.x_std = np.maximum(x.std(axis=0), 1e-8)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"input has {x.shape[1]} features, "
                                    f"model expects {self.input_dim}")
        a = (x - self.x_mean) / self.x_std
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = self._activate(a @ w + b)
        return a @ self.weights[-1] + self.biases[-1]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray,
                      ) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
        """MSE = mean over the batch of squared position error, plus its
        gradients by backpropagation (shapes mirror the parameters)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if len(x) == 0:
            raise InsufficientData("empty batch")
        if len(x) != len(y):
            raise DimensionMismatch(f"{len(x)} inputs vs {len(y)} targets")
        n = len(x)
        norm = (x - self.x_mean) / self.x_std
        pre: list[np.ndarray] = []
        acts: list[np.ndarray] = [norm]
        a = norm
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            a = self._activate(z)
            pre.append(z)
            acts.append(a)
        pred = a @ self.weights[-1] + self.biases[-1]

        diff = pred - y
        loss = float(np.sum(diff * diff) / n)
        delta = 2.0 * diff / n
        grad_w = [np.empty(0)] * len(self.weights)
        grad_b = [np.empty(0)] * len(self.biases)
        grad_w[-1] = acts[-1].T @ delta
        grad_b[-1] = delta.sum(axis=0)
        for layer in range(len(self.weights) - 2, -1, -1):
            delta = (delta @ self.weights[layer + 1].T) \
                * self._activate_grad(pre[layer], acts[layer + 1])
            grad_w[layer] = acts[layer].T @ delta
            grad_b[layer] = delta.sum(axis=0)
        return loss, grad_w, grad_b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def clone_weights(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def restore_weights(self, snapshot: tuple[list[np.ndarray], list[np.ndarray]]) -> None:
        self.weights = [w.copy() for w in snapshot[0]]
        self.biases = [b.copy() for b in snapshot[1]]


def forward(mlp: Mlp, features: np.ndarray) -> tuple[float, float]:
    """Single-vector convenience wrapper around Mlp.forward."""
    out = mlp.forward(np.asarray(features, dtype=np.float64).reshape(1, -1))
    return float(out[0, 0]), float(out[0, 1])


def loss_and_grad(mlp: Mlp, x: np.ndarray, y: np.ndarray):
    return mlp.loss_and_grad(x, y)


# ---------------------------------------------------------------------------
# Persistence

def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


def save_checkpoint(path, model: Mlp) -> None:
    """Bit-exact JSON+base64 checkpoint of weights, stats and config."""
    c = model.config
    doc = {
        "config": {
            "layer_sizes": list(c.layer_sizes),
            "activation": c.activation,
            "optimizer": c.optimizer,
            "learning_rate": c.learning_rate,
            "beta1": c.beta1,
            "beta2": c.beta2,
            "adam_eps": c.adam_eps,
            "epochs": c.epochs,
            "batch_size": c.batch_size,
            "patience": c.patience,
            "normalization": c.normalization,
            "seed": c.seed,
        },
        "x_mean": _encode(model.x_mean),
        "x_std": _encode(model.x_std),
        "layers": [{"shape": list(w.shape), "w": _encode(w), "b": _encode(b)}
                   for w, b in zip(model.weights, model.biases)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = dict(doc["config"])
    cfg["layer_sizes"] = tuple(cfg["layer_sizes"])
    config = MlpConfig(**cfg)
    model = Mlp(config)
    model.x_mean = _decode(doc["x_mean"], (config.layer_sizes[0],))
    model.x_std = _decode(doc["x_std"], (config.layer_sizes[0],))
    model.weights = [_decode(layer["w"], tuple(layer["shape"])) for layer in doc["layers"]]
    model.biases = [_decode(layer["b"], (layer["shape"][1],)) for layer in doc["layers"]]
    return model


# ---------------------------------------------------------------------------
# Training

def median_position_error(model: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    pred = model.forward(x)
    return float(np.median(np.hypot(pred[:, 0] - y[:, 0], pred[:, 1] - y[:, 1])))


def train_arrays(x_train: np.ndarray, y_train: np.ndarray,
                 x_test: np.ndarray, y_test: np.ndarray,
                 config: MlpConfig) -> tuple[Mlp, list[tuple[int, float, float]]]:
    """Inner optimization loop over already-stacked arrays.

    History rows are (epoch, train mse, test median error m).  Raises
    Divergence (carrying the history so far) on non-finite loss.
    """
    x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    y_train = np.atleast_2d(np.asarray(y_train, dtype=np.float64))
    if len(x_train) == 0:
        raise InsufficientData("empty training set")
    if x_train.shape[1] != config.layer_sizes[0]:
        raise DimensionMismatch(f"frames have {x_train.shape[1]} features, "
                                f"config expects {config.layer_sizes[0]}")
    rng = np.random.default_rng(config.seed)
    model = Mlp(config, rng=rng)
    model.set_normalization(x_train)

    adam_m = [[np.zeros_like(w) for w in model.weights],
              [np.zeros_like(b) for b in model.biases]]
    adam_v = [[np.zeros_like(w) for w in model.weights],
              [np.zeros_like(b) for b in model.biases]]
    step = 0
    history: list[tuple[int, float, float]] = []
    best_err = math.inf
    best_snapshot = model.clone_weights()
    stale = 0

    for epoch in range(config.epochs):
        perm = rng.permutation(len(x_train))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grad_w, grad_b = model.loss_and_grad(x_train[idx], y_train[idx])
            if not math.isfinite(loss):
                raise Divergence(f"non-finite loss at epoch {epoch}", history=history)
            total += loss * len(idx)
            step += 1
            for params, grads, m_s, v_s in ((model.weights, grad_w, adam_m[0], adam_v[0]),
                                            (model.biases, grad_b, adam_m[1], adam_v[1])):
                for i, grad in enumerate(grads):
                    if config.optimizer == "sgd":
                        params[i] -= config.learning_rate * grad
                    else:
                        m_s[i] *= config.beta1
                        m_s[i] += (1.0 - config.beta1) * grad
                        v_s[i] *= config.beta2
                        v_s[i] += (1.0 - config.beta2) * grad * grad
                        m_hat = m_s[i] / (1.0 - config.beta1 ** step)
                        v_hat = v_s[i] / (1.0 - config.beta2 ** step)
                        params[i] -= config.learning_rate * m_hat / (np.sqrt(v_hat)
                                                                     + config.adam_eps)
        train_mse = total / len(x_train)
        test_err = median_position_error(model, x_test, y_test) if len(x_test) \
            else math.nan
        history.append((epoch, train_mse, test_err))
        if len(x_test) and test_err < best_err:
            best_err = test_err
            best_snapshot = model.clone_weights()
            stale = 0
        else:
            stale += 1
            if len(x_test) and stale >= config.patience:
                break
    if len(x_test):  # without a held-out set the final weights stand
        model.restore_weights(best_snapshot)
    return model, history


def train(frames: list[FusionFrame], config: MlpConfig | None = None,
          spec: SplitSpec = SplitSpec(),
          ) -> tuple[Mlp, list[tuple[int, float, float]]]:
    """Split frames per ``spec``, fit, and return the best-test snapshot.

    Normalization statistics come from the training split only; the run is
    deterministic given (config.seed, spec.shuffle_seed).
    """
    train_frames, test_frames = split_dataset(frames, spec)
    x_train, y_train = frames_to_arrays(train_frames)
    x_test, y_test = frames_to_arrays(test_frames)
    if config is None:
        config = MlpConfig.for_input(x_train.shape[1])
    return train_arrays(x_train, y_train, x_test, y_test, config)


def predict_stream(mlp: Mlp, frames: list[FusionFrame],
                   ) -> list[tuple[float, Position2D]]:
    """One (t_ref, estimate) per frame; masks appended exactly as in training."""
    if not frames:
        return []
    x, _ = frames_to_arrays(frames)
    pred = mlp.forward(x)
    return [(fr.t_ref, Position2D(float(pred[i, 0]), float(pred[i, 1])))
            for i, fr in enumerate(frames)]


# ---------------------------------------------------------------------------
# Gradient verification

def gradient_check(model: Mlp, x: np.ndarray, y: np.ndarray,
                   epsilon: float = 1e-5, samples: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max |analytic - central difference|, normalized by the largest
    gradient magnitude.  ``samples`` limits the check to that many randomly
    chosen parameters (all parameters when None)."""
    _, grad_w, grad_b = model.loss_and_grad(x, y)
    analytic = np.concatenate([g.ravel() for g in grad_w + grad_b])
    flats = [w.ravel() for w in model.weights] + [b.ravel() for b in model.biases]
    offsets = np.cumsum([0] + [f.size for f in flats])

    total = offsets[-1]
    if samples is None or samples >= total:
        indices = np.arange(total)
    else:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(total, size=samples, replace=False)

    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    worst = 0.0
    for global_i in indices:
        layer = int(np.searchsorted(offsets, global_i, side="right")) - 1
        flat = flats[layer]
        i = int(global_i - offsets[layer])
        original = flat[i]
        flat[i] = original + epsilon
        up, *_ = model.loss_and_grad(x, y)
        flat[i] = original - epsilon
        down, *_ = model.loss_and_grad(x, y)
        flat[i] = original
        numeric = (up - down) / (2.0 * epsilon)
        worst = max(worst, abs(analytic[global_i] - numeric) / scale)
    return worst
