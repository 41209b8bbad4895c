"""From-scratch MLP regressor trained with minibatch SGD.

Forward, backward, and the optimizer are plain numpy; gradients are exact
(validated against central finite differences in the test suite). Hidden
layers use relu or tanh, the output layer is always linear, and an
"L-layer MLP of width h" means L-1 hidden layers plus the linear output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import binio
from .data import SplitDataset
from .linalg import ensure_matrix

ACTIVATIONS = ("relu", "tanh")

CHECKPOINT_MAGIC_KEY = "nrc-probe-checkpoint"


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite during training."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        """Dimension chain d, h_1, ..., h_{L-1}, t."""
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1


@dataclass
class MlpParameters:
    """Per-layer weights (h_out x h_in) and biases, plus the hidden nonlinearity."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be parallel non-empty lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i + 1}: bias shape {b.shape} does not match {w.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i + 1}: input dim {w.shape[1]} breaks the chain")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i + 1}: non-finite parameters")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParameters":
        return MlpParameters([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.activation)


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float
    epochs: int
    batch_size: int
    seed: int
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    metric_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        object.__setattr__(self, "metric_epochs", tuple(self.metric_epochs))
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


@dataclass
class ActivationTrace:
    """Post-activation features per hidden layer for one forward pass.

    hidden[i] is H^(i+1) (N x h_{i+1}); inputs is H^0 = X.
    """

    inputs: np.ndarray
    hidden: list[np.ndarray]
    predictions: np.ndarray


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class OptimizerState:
    weight_buffers: list[np.ndarray]
    bias_buffers: list[np.ndarray]
    epoch: int = 0
    lr: float = 0.0

    @classmethod
    def for_params(cls, params: MlpParameters) -> "OptimizerState":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])


def init_params(arch: MlpArchitecture, seed: int) -> MlpParameters:
    """He-normal weights for relu (var 2/fan_in), var 1/fan_in for tanh;
    biases start at zero."""
    rng = np.random.default_rng(seed)
    gain = 2.0 if arch.hidden_activation == "relu" else 1.0
    dims = arch.layer_dims
    weights, biases = [], []
    for i in range(arch.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        std = np.sqrt(gain / fan_in)
        weights.append(rng.standard_normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return MlpParameters(weights, biases, arch.hidden_activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    """Predictions only, no trace retained."""
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _act(h @ w.T + b, params.activation)
    return h @ params.weights[-1].T + params.biases[-1]


def forward_capture(params: MlpParameters, x) -> ActivationTrace:
    """Forward pass retaining every hidden post-activation matrix."""
    x = ensure_matrix(x, "X")
    if x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input dim {x.shape[1]} does not match "
                         f"first layer fan-in {params.weights[0].shape[1]}")
    hidden = []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _act(h @ w.T + b, params.activation)
        hidden.append(h)
    pred = h @ params.weights[-1].T + params.biases[-1]
    return ActivationTrace(inputs=x, hidden=hidden, predictions=pred)


def mse_loss(pred, y) -> float:
    """(1/N) ||pred - Y||_F^2 (summed over target dims, averaged over rows)."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {y.shape}")
    diff = pred - y
    return float((diff * diff).sum() / pred.shape[0])


def _forward_backward(params: MlpParameters, x: np.ndarray, y: np.ndarray
                      ) -> tuple[float, Gradients]:
    """One fused pass; returns the batch loss and exact MSE gradients."""
    n = x.shape[0]
    acts = [x]
    h = x
    relu = params.activation == "relu"
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = _act(h @ w.T + b, params.activation)
        acts.append(h)
    pred = h @ params.weights[-1].T + params.biases[-1]
    diff = pred - y
    loss = float((diff * diff).sum() / n)

    n_layers = params.n_layers
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    delta = (2.0 / n) * diff
    g_w[-1] = delta.T @ acts[-1]
    g_b[-1] = delta.sum(axis=0)
    back = delta @ params.weights[-1]
    for i in range(n_layers - 2, -1, -1):
        a = acts[i + 1]
        delta = back * (a > 0.0) if relu else back * (1.0 - a * a)
        g_w[i] = delta.T @ acts[i]
        g_b[i] = delta.sum(axis=0)
        if i > 0:
            back = delta @ params.weights[i]
    return loss, Gradients(weights=g_w, biases=g_b)


def backward(params: MlpParameters, x, y) -> Gradients:
    """Exact gradients of mse_loss(forward(X), Y) w.r.t. every weight and bias."""
    x = ensure_matrix(x, "X")
    y = ensure_matrix(y, "Y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("X and Y row counts differ")
    _, grads = _forward_backward(params, x, y)
    return grads


def sgd_step(params: MlpParameters, grads: Gradients, state: OptimizerState,
             schedule: TrainSchedule) -> tuple[MlpParameters, OptimizerState]:
    """Classic coupled-L2 SGD with momentum; biases are exempt from decay.

    g' = grad + weight_decay * param; buf = momentum * buf + g';
    param <- param - lr * buf. Updates in place and returns the pair.
    """
    lr = state.lr
    mu = schedule.momentum
    wd = schedule.weight_decay
    for w, gw, buf in zip(params.weights, grads.weights, state.weight_buffers):
        g = gw + wd * w if wd else gw
        buf *= mu
        buf += g
        w -= lr * buf
    for b, gb, buf in zip(params.biases, grads.biases, state.bias_buffers):
        buf *= mu
        buf += gb
        b -= lr * buf
    return params, state


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    """initial_lr * decay_factor ** (number of milestones <= epoch)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    n_passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial_lr * schedule.decay_factor**n_passed


@dataclass
class EpochLoss:
    epoch: int
    train_mse: float
    test_mse: float


def train(arch: MlpArchitecture, schedule: TrainSchedule, split: SplitDataset,
          metric_callback=None) -> tuple[MlpParameters, list[EpochLoss]]:
    """Seeded shuffled minibatch SGD over the train split.

    Loss history has one entry per epoch plus the initial (epoch 0) state.
    metric_callback(epoch, params, trace) fires at every epoch listed in
    schedule.metric_epochs with a full-train-set ActivationTrace; epoch 0
    means the untrained network. Raises TrainingDiverged on NaN/Inf loss.
    """
    x_tr, y_tr = split.train.inputs, split.train.targets
    x_te, y_te = split.test.inputs, split.test.targets
    if x_tr.shape[1] != arch.input_dim or y_tr.shape[1] != arch.output_dim:
        raise ValueError(
            f"dataset dims ({x_tr.shape[1]}, {y_tr.shape[1]}) do not match "
            f"architecture ({arch.input_dim}, {arch.output_dim})")

    params = init_params(arch, schedule.seed)
    state = OptimizerState.for_params(params)
    shuffle_rng = np.random.default_rng(schedule.seed + 1)
    metric_epochs = set(schedule.metric_epochs)

    history = [EpochLoss(0, mse_loss(_forward(params, x_tr), y_tr),
                         mse_loss(_forward(params, x_te), y_te))]
    if metric_callback is not None and 0 in metric_epochs:
        metric_callback(0, params, forward_capture(params, x_tr))

    n = x_tr.shape[0]
    bs = schedule.batch_size
    for e in range(schedule.epochs):
        state.epoch = e
        state.lr = lr_at(schedule, e)
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            _, grads = _forward_backward(params, x_tr[idx], y_tr[idx])
            sgd_step(params, grads, state, schedule)
        train_mse = mse_loss(_forward(params, x_tr), y_tr)
        test_mse = mse_loss(_forward(params, x_te), y_te)
        if not (np.isfinite(train_mse) and np.isfinite(test_mse)):
            raise TrainingDiverged(epoch=e + 1, loss=train_mse)
        history.append(EpochLoss(e + 1, train_mse, test_mse))
        if metric_callback is not None and (e + 1) in metric_epochs:
            metric_callback(e + 1, params, forward_capture(params, x_tr))
    return params, history


def save_checkpoint(path, params: MlpParameters, arch: MlpArchitecture,
                    schedule: TrainSchedule, epoch: int) -> None:
    """Binary container of shape-prefixed float64 tensors (W1, b1, W2, b2, ...)
    with a JSON header {arch, schedule, epoch, seed}."""
    header = {
        "format": CHECKPOINT_MAGIC_KEY,
        "arch": asdict(arch),
        "schedule": asdict(schedule),
        "epoch": epoch,
        "seed": schedule.seed,
    }
    arrays = []
    for w, b in zip(params.weights, params.biases):
        arrays.append(w)
        arrays.append(b)
    binio.write_container(path, arrays, header=header)


def load_checkpoint(path) -> tuple[MlpParameters, MlpArchitecture, TrainSchedule, int]:
    header, arrays = binio.read_container(path)
    if not header or header.get("format") != CHECKPOINT_MAGIC_KEY:
        raise ValueError(f"{path}: not a checkpoint file")
    arch = MlpArchitecture(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in header["arch"].items()})
    schedule = TrainSchedule(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in header["schedule"].items()})
    if len(arrays) != 2 * arch.n_layers:
        raise ValueError(f"{path}: expected {2 * arch.n_layers} tensors, got {len(arrays)}")
    weights = arrays[0::2]
    biases = arrays[1::2]
    params = MlpParameters(weights, biases, arch.hidden_activation)
    expected = arch.layer_dims
    for i, w in enumerate(params.weights):
        if w.shape != (expected[i + 1], expected[i]):
            raise ValueError(f"{path}: layer {i + 1} shape {w.shape} does not match header")
    return params, arch, schedule, header["epoch"]
