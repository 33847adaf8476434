"""Parameter updates (SGD / RMSprop / Adam) and the training loop.

Update rules, writing g for the gradient:

    SGD       buf <- momentum * buf + g;        w <- w - lr * buf
    RMSprop   v <- rho * v + (1 - rho) * g^2;   w <- w - lr * g / (sqrt(v) + eps)
    Adam      m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
              w <- w - lr * m_hat / (sqrt(v_hat) + eps)   (bias-corrected)

The training loop sweeps seeded-shuffled minibatches of normal-only
data, keeps the last partial batch, and is bit-deterministic for a
fixed seed in single-threaded use.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import ConfigError, DataError, FormatError, NumericError
from .model import load_model, patchify, save_model
from .serialize import load_tensors, save_tensors
from .tensor import Tensor, backward

OPTIMIZER_KINDS = ("sgd", "rmsprop", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    rho: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"must be one of {OPTIMIZER_KINDS}, got {self.kind!r}", field="optimizer")
        if self.learning_rate < 0:
            raise ConfigError(f"must be >= 0, got {self.learning_rate}", field="learning_rate")


class Optimizer:
    """Shared state handling; subclasses implement one update rule."""

    slots = ()

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.step_count = 0
        self.state = {name: self._init_state(p.data) for name, p in params.items()}

    def _init_state(self, data):
        return {}

    def step(self):
        self.step_count += 1
        lr = self.config.learning_rate
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient; run backward first")
            self._update(p, p.grad, self.state[name], lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _update(self, p, g, state, lr):
        raise NotImplementedError

    # state (de)serialization: one flat container plus the step counter,
    # stored in the parameter dtype (exact for any desk-scale step count)
    def state_arrays(self):
        out = {}
        for name, slots in self.state.items():
            for slot, arr in slots.items():
                out[f"{name}#{slot}"] = arr
        dtype = next(iter(self.params.values())).data.dtype if self.params else np.float64
        out["#step"] = np.array([self.step_count], dtype=dtype)
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["#step"][0])
        for name, slots in self.state.items():
            for slot in slots:
                key = f"{name}#{slot}"
                if key not in arrays:
                    raise FormatError(f"optimizer state missing {key}")
                if arrays[key].shape != slots[slot].shape:
                    raise FormatError(f"optimizer state {key} has wrong shape {arrays[key].shape}")
                slots[slot] = arrays[key].astype(slots[slot].dtype)


class SGD(Optimizer):
    def _init_state(self, data):
        if self.config.momentum != 0.0:
            return {"velocity": np.zeros_like(data)}
        return {}

    def _update(self, p, g, state, lr):
        if "velocity" in state:
            state["velocity"] = self.config.momentum * state["velocity"] + g
            g = state["velocity"]
        p.data = p.data - p.data.dtype.type(lr) * g


class RMSprop(Optimizer):
    def _init_state(self, data):
        return {"square_avg": np.zeros_like(data)}

    def _update(self, p, g, state, lr):
        rho = p.data.dtype.type(self.config.rho)
        state["square_avg"] = rho * state["square_avg"] + (1 - rho) * g * g
        denom = np.sqrt(state["square_avg"]) + p.data.dtype.type(self.config.eps)
        p.data = p.data - p.data.dtype.type(lr) * g / denom


class Adam(Optimizer):
    def _init_state(self, data):
        return {"m": np.zeros_like(data), "v": np.zeros_like(data)}

    def _update(self, p, g, state, lr):
        dt = p.data.dtype.type
        b1, b2 = dt(self.config.beta1), dt(self.config.beta2)
        state["m"] = b1 * state["m"] + (1 - b1) * g
        state["v"] = b2 * state["v"] + (1 - b2) * g * g
        m_hat = state["m"] / dt(1.0 - self.config.beta1**self.step_count)
        v_hat = state["v"] / dt(1.0 - self.config.beta2**self.step_count)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(self.config.eps))


_OPTIMIZERS = {"sgd": SGD, "rmsprop": RMSprop, "adam": Adam}


def build_optimizer(params, config):
    return _OPTIMIZERS[config.kind](params, config)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    loss: str = "l2"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epsilon: float = losses.DEFAULT_EPSILON
    reduction: str = "sum"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"must be >= 1, got {self.epochs}", field="epochs")
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", field="batch_size")
        losses.parse_loss_spec(self.loss)


@dataclass
class TrainHistory:
    loss_per_epoch: list
    wall_clock_s: list
    model: object = None
    optimizer: object = None

    def to_json(self):
        """Deterministic portion only; timing stays out of the identity."""
        return {"epochs": len(self.loss_per_epoch), "loss_per_epoch": self.loss_per_epoch}


def _require_normal_only(batch):
    if batch.labels is not None and np.any(batch.labels != 0):
        bad = int(np.count_nonzero(batch.labels))
        raise DataError(f"training data must be anomaly-free; found {bad} anomalous sample(s)")


def train(model, train_batch, config, on_step=None):
    """Fit the autoencoder on normal-only data.

    Per batch: forward in train mode (patch-wise when configured), loss,
    backward, optimizer step, gradient reset. ``on_step(epoch, step,
    loss_value, x, y_hat)`` is invoked after each step when given.
    Non-finite losses abort with the offending step location.
    """
    _require_normal_only(train_batch)
    pixels = train_batch.pixels.data
    n = pixels.shape[0]
    if n == 0:
        raise DataError("training set is empty")

    loss_fn = losses.make_loss_fn(config.loss, config.epsilon, config.reduction)
    optimizer = build_optimizer(model.parameters(), config.optimizer)
    p = model.config.patches

    loss_per_epoch = []
    wall_clock = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.shuffle:
            order = np.random.default_rng(config.seed + epoch).permutation(n)
        else:
            order = np.arange(n)
        batch_losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            chunk = pixels[order[start : start + config.batch_size]]
            if p > 1:
                chunk = patchify(chunk, p)
            x = Tensor(chunk)
            y_hat = model.forward(x, mode="train")
            loss = loss_fn(x, y_hat)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
            backward(loss)
            optimizer.step()
            if on_step is not None:  # before the reset so grads are observable
                on_step(epoch, step, value, x, y_hat)
            optimizer.zero_grad()
            batch_losses.append(value)
        loss_per_epoch.append(float(np.mean(batch_losses)))
        wall_clock.append(time.perf_counter() - t0)
    return TrainHistory(loss_per_epoch, wall_clock, model, optimizer)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model, optimizer, history, experiment=None):
    """Checkpoint = model pair + optimizer state blob + history JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory / "model")
    save_tensors(directory / "optimizer.lampstate", optimizer.state_arrays())
    payload = history.to_json()
    payload["optimizer"] = asdict(optimizer.config)
    if experiment is not None:
        payload.update(experiment)
    (directory / "history.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (directory / "timing.json").write_text(
        json.dumps({"wall_clock_s": history.wall_clock_s, "total_s": sum(history.wall_clock_s)})
    )


def load_checkpoint(directory):
    """Returns (model, optimizer state arrays, history dict)."""
    directory = Path(directory)
    model = load_model(directory / "model")
    state = load_tensors(directory / "optimizer.lampstate")
    history = json.loads((directory / "history.json").read_text())
    return model, state, history
