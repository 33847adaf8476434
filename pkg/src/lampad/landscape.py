"""Loss landscapes over filter-normalized random directions.

A direction assigns one array per model parameter. Under filter
normalization every leading-axis slice of a multi-dimensional weight is
rescaled to the norm of the corresponding model slice (so plots are
comparable across models), while 1-d parameters (biases, norm scales)
get the zero direction. Landscapes evaluate the loss at
theta + alpha * d1 (+ beta * d2) over a regular grid in eval mode and
restore the parameters bit-exactly afterwards.

The classifier probe reuses the autoencoder's encoder stack with a
linear head so landscapes of a label-prediction loss can be computed
for encoders as well.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .errors import ConfigError, ShapeError
from .model import encoder_forward, init_encoder_params, patchify
from .optim import build_optimizer
from .tensor import Tensor, backward, linear, no_grad, reshape

DEFAULT_RESOLUTION = 51
DEFAULT_SPAN = 1.0
DEFAULT_SAMPLE_CAP = 1024


@dataclass
class Direction:
    entries: dict
    seed: int
    normalization: str


def random_direction(model, seed, normalization="filter"):
    """Gaussian direction over the model's parameters.

    ``filter`` rescales each slice d[i] of every weight with ndim >= 2
    to the norm of the model's matching slice (zero-norm slices give a
    zero direction); 1-d parameters are zeroed. ``none`` keeps the raw
    Gaussian sample everywhere.
    """
    if normalization not in ("filter", "none"):
        raise ConfigError(f"must be 'filter' or 'none', got {normalization!r}", field="normalization")
    rng = np.random.default_rng(seed)
    entries = {}
    for name, p in model.parameters().items():
        d = rng.standard_normal(p.data.shape).astype(p.data.dtype)
        if normalization == "filter":
            if p.data.ndim >= 2:
                flat_d = d.reshape(d.shape[0], -1)
                flat_w = p.data.reshape(d.shape[0], -1)
                d_norm = np.linalg.norm(flat_d, axis=1)
                w_norm = np.linalg.norm(flat_w, axis=1)
                scale = np.divide(w_norm, d_norm, out=np.zeros_like(w_norm), where=d_norm > 0)
                d = (flat_d * scale[:, None]).reshape(d.shape).astype(p.data.dtype)
            else:
                d = np.zeros_like(p.data)
        entries[name] = d
    return Direction(entries, seed, normalization)


def _check_direction(model, direction):
    for name, p in model.parameters().items():
        if name not in direction.entries:
            raise ShapeError(f"direction missing entry for parameter {name}")
        if direction.entries[name].shape != p.data.shape:
            raise ShapeError(
                f"direction entry {name} has shape {direction.entries[name].shape}, "
                f"parameter has {p.data.shape}"
            )


@dataclass
class LandscapeGrid:
    """Loss values over displacement coordinates; 1-d grids have one beta."""

    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray  # [len(betas), len(alphas)]
    metadata: dict = field(default_factory=dict)

    @property
    def center_value(self):
        return float(self.values[len(self.betas) // 2, len(self.alphas) // 2])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "beta", "loss"])
            for j, b in enumerate(self.betas):
                for i, a in enumerate(self.alphas):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.values[j, i]))])

    def save_metadata(self, path):
        Path(path).write_text(json.dumps(self.metadata, indent=2, sort_keys=True))


def _axis(span, resolution):
    coords = np.linspace(-span, span, resolution)
    if resolution % 2 == 1:
        coords[resolution // 2] = 0.0  # ensure the exact unperturbed point
    return coords


def loss_grid(model, loss_fn, data, d1, d2=None, span=DEFAULT_SPAN, resolution=DEFAULT_RESOLUTION,
              metadata=None):
    """Evaluate ``loss_fn(model, data)`` over a displacement grid.

    1-d when ``d2`` is absent. The center point evaluates the stored
    parameters untouched, and the parameters are restored bit-exactly
    before returning.
    """
    _check_direction(model, d1)
    if d2 is not None:
        _check_direction(model, d2)
    alphas = _axis(span, resolution)
    betas = _axis(span, resolution) if d2 is not None else np.zeros(1)

    params = model.parameters()
    originals = {name: p.data for name, p in params.items()}
    values = np.empty((len(betas), len(alphas)), dtype=np.float64)
    try:
        for j, b in enumerate(betas):
            for i, a in enumerate(alphas):
                for name, p in params.items():
                    moved = originals[name]
                    if a != 0.0:
                        moved = moved + originals[name].dtype.type(a) * d1.entries[name]
                    if d2 is not None and b != 0.0:
                        moved = moved + originals[name].dtype.type(b) * d2.entries[name]
                    p.data = moved
                values[j, i] = loss_fn(model, data)
    finally:
        for name, p in params.items():
            p.data = originals[name]

    meta = dict(metadata or {})
    meta.update(
        {
            "resolution": int(resolution),
            "span": float(span),
            "dims": 2 if d2 is not None else 1,
            "direction_seeds": [d1.seed] + ([d2.seed] if d2 is not None else []),
            "normalization": d1.normalization,
            "center_loss": float(values[len(betas) // 2, len(alphas) // 2]),
        }
    )
    return LandscapeGrid(alphas, betas, values, meta)


def reconstruction_loss_fn(loss_spec, epsilon=losses.DEFAULT_EPSILON, reduction="sum"):
    """Closure evaluating a reconstruction loss on fixed pixels: (model, pixels) -> float."""
    fn = losses.make_loss_fn(loss_spec, epsilon, reduction)

    def evaluate(model, pixels):
        p = getattr(model.config, "patches", 1)
        tiles = patchify(pixels, p) if p > 1 else pixels
        with no_grad():
            x = Tensor(tiles)
            return float(fn(x, model.forward(x, mode="eval")).item())

    return evaluate


def classification_loss_fn():
    """Closure evaluating cross-entropy on fixed (pixels, labels) data."""

    def evaluate(model, data):
        pixels, labels = data
        with no_grad():
            return float(losses.cross_entropy(model.forward(Tensor(pixels), mode="eval"), labels).item())

    return evaluate


def sharpness_index(grid):
    """Mean |finite difference| of the loss per unit coordinate step."""
    vals = grid.values
    pieces = []
    if vals.shape[1] >= 2:
        steps = np.diff(grid.alphas)
        pieces.append((np.abs(np.diff(vals, axis=1)) / steps).ravel())
    if vals.shape[0] >= 2:
        steps = np.diff(grid.betas).reshape(-1, 1)
        pieces.append((np.abs(np.diff(vals, axis=0)) / steps).ravel())
    if not pieces:
        raise ShapeError("sharpness is undefined for a single-point grid")
    return float(np.mean(np.concatenate(pieces)))


# ---------------------------------------------------------------------------
# encoder classifier probe


class ProbeModel:
    """Encoder stack plus a linear head producing class logits."""

    def __init__(self, config, params, bn_states, num_classes):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.num_classes = num_classes

    def parameters(self):
        return self.params

    def forward(self, x, mode="train"):
        h = encoder_forward(self.params, self.bn_states, self.config, x, mode)
        n = h.data.shape[0]
        flat = reshape(h, (n, h.data.size // n))
        return linear(flat, self.params["head.weight"], self.params["head.bias"])


def build_probe(ae_model, num_classes, seed=0, reuse_encoder=True):
    """Probe over the AE's encoder, copied (trained) or freshly sampled."""
    config = ae_model.config
    rng = np.random.default_rng(seed)
    dtype = ae_model.dtype
    if reuse_encoder:
        params = {}
        bn_states = {}
        for i in range(config.depth):
            for slot in ("conv.weight", "conv.bias", "bn.gamma", "bn.beta"):
                name = f"enc{i}.{slot}"
                params[name] = Tensor(ae_model.params[name].data.copy(), requires_grad=True)
            bn_states[f"enc{i}"] = ae_model.bn_states[f"enc{i}"].copy()
    else:
        params, bn_states = init_encoder_params(config, rng, dtype)
    ph, pw = config.net_input_size
    feat = config.widths[-1] * (ph >> config.depth) * (pw >> config.depth)
    bound = np.sqrt(3.0 / feat)
    params["head.weight"] = Tensor(
        rng.uniform(-bound, bound, size=(num_classes, feat)).astype(dtype), requires_grad=True
    )
    params["head.bias"] = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return ProbeModel(config, params, bn_states, num_classes)


def encoder_probe_train(ae_model, pixels, labels, epochs, optimizer_config, batch_size=64,
                        seed=0, reuse_encoder=True):
    """Train a class-label probe on the encoder; K is inferred from labels.

    Returns the probe and its per-epoch mean training loss.
    """
    labels = np.asarray(labels)
    if labels.min() < 0:
        raise ConfigError("labels must be nonnegative", field="labels")
    num_classes = int(labels.max()) + 1
    probe = build_probe(ae_model, num_classes, seed=seed, reuse_encoder=reuse_encoder)
    optimizer = build_optimizer(probe.parameters(), optimizer_config)
    n = pixels.shape[0]
    loss_per_epoch = []
    for epoch in range(epochs):
        order = np.random.default_rng(seed + epoch).permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits = probe.forward(Tensor(pixels[idx]), mode="train")
            loss = losses.cross_entropy(logits, labels[idx])
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            batch_losses.append(loss.item())
        loss_per_epoch.append(float(np.mean(batch_losses)))
    return probe, loss_per_epoch


def probe_accuracy(probe, pixels, labels):
    with no_grad():
        logits = probe.forward(Tensor(pixels), mode="eval")
    return float((logits.data.argmax(axis=1) == np.asarray(labels)).mean())
