"""Convolutional autoencoder: construction, forward pass, persistence.

The encoder repeats [strided conv -> batch norm -> leaky ReLU]; the
decoder mirrors it with [nearest 2x upsample -> conv -> batch norm ->
leaky ReLU], except the last decoder stage swaps the norm/activation
for a sigmoid so reconstructions live in (0, 1). Spatial dims halve per
encoder stage and double per decoder stage, so valid inputs are
divisible by 2^depth (per patch when patch-wise reconstruction is on).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .serialize import load_tensors, save_tensors
from .tensor import BatchNormState, Tensor

CHANNEL_CAP = 256
MODEL_SUFFIX = ".lampmodel"
CONFIG_SUFFIX = ".json"


@dataclass
class AEConfig:
    depth: int = 4
    input_channels: int = 1
    input_size: tuple = (32, 32)
    kernel_size: int = 3
    base_width: int = 0  # 0 picks the depth default (16 for 4, 32 for 6)
    leaky_slope: float = 0.2
    patches: int = 1
    skip_connections: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.depth not in (4, 6):
            raise ConfigError(f"must be 4 or 6, got {self.depth}", field="depth")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"must be odd and positive, got {self.kernel_size}", field="kernel_size")
        if self.input_channels < 1:
            raise ConfigError(f"must be >= 1, got {self.input_channels}", field="input_channels")
        if self.patches < 1:
            raise ConfigError(f"must be >= 1, got {self.patches}", field="patches")
        if self.skip_connections:
            raise ConfigError("skip connections are not supported", field="skip_connections")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError(f"must be in [0, 1), got {self.leaky_slope}", field="leaky_slope")
        if self.base_width == 0:
            self.base_width = 16 if self.depth == 4 else 32
        h, w = self.input_size
        if h % self.patches or w % self.patches:
            raise ConfigError(
                f"input size {h}x{w} not divisible by patch grid {self.patches}", field="patches"
            )
        ph, pw = h // self.patches, w // self.patches
        if ph % (1 << self.depth) or pw % (1 << self.depth):
            raise ConfigError(
                f"network input {ph}x{pw} must be divisible by 2^depth = {1 << self.depth}",
                field="input_size",
            )

    @property
    def net_input_size(self):
        """Spatial size actually fed to the network (patch size)."""
        return (self.input_size[0] // self.patches, self.input_size[1] // self.patches)

    @property
    def widths(self):
        return [min(self.base_width << i, CHANNEL_CAP) for i in range(self.depth)]


def _kaiming_uniform(rng, shape, fan_in, slope, dtype):
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def encoder_layer_names(depth):
    return [f"enc{i}" for i in range(depth)]


def decoder_layer_names(depth):
    return [f"dec{i}" for i in range(depth)]


def init_encoder_params(config, rng, dtype):
    """Fresh encoder parameter dict + batchnorm states."""
    params = {}
    states = {}
    chans = [config.input_channels] + config.widths
    k = config.kernel_size
    for i in range(config.depth):
        cin, cout = chans[i], chans[i + 1]
        params[f"enc{i}.conv.weight"] = Tensor(
            _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, config.leaky_slope, dtype),
            requires_grad=True,
        )
        params[f"enc{i}.conv.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        params[f"enc{i}.bn.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        params[f"enc{i}.bn.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        states[f"enc{i}"] = BatchNormState()
    return params, states


def encoder_forward(params, states, config, x, mode):
    """Run the shared encoder stack (used by the AE and the probe)."""
    pad = config.kernel_size // 2
    h = x
    for i in range(config.depth):
        h = T.conv2d(h, params[f"enc{i}.conv.weight"], params[f"enc{i}.conv.bias"], stride=2, padding=pad)
        h = T.batchnorm2d(h, params[f"enc{i}.bn.gamma"], params[f"enc{i}.bn.beta"], states[f"enc{i}"], mode)
        h = T.leaky_relu(h, config.leaky_slope)
    return h


class AEModel:
    """Parameter set + batchnorm state for one autoencoder."""

    def __init__(self, config, params, bn_states, dtype=np.float32):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.dtype = np.dtype(dtype)

    def parameters(self):
        return self.params

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def _check_input(self, x):
        ph, pw = self.config.net_input_size
        if x.ndim != 4 or x.shape[1] != self.config.input_channels or x.shape[2] != ph or x.shape[3] != pw:
            raise ShapeError(
                f"expected input [N,{self.config.input_channels},{ph},{pw}], got {tuple(x.shape)}"
            )

    def forward(self, x, mode="train"):
        """Reconstruct a batch at the network input size."""
        self._check_input(x)
        cfg = self.config
        pad = cfg.kernel_size // 2
        h = encoder_forward(self.params, self.bn_states, cfg, x, mode)
        for i in range(cfg.depth):
            h = T.upsample_nearest2x(h)
            h = T.conv2d(h, self.params[f"dec{i}.conv.weight"], self.params[f"dec{i}.conv.bias"], 1, pad)
            if i < cfg.depth - 1:
                h = T.batchnorm2d(
                    h, self.params[f"dec{i}.bn.gamma"], self.params[f"dec{i}.bn.beta"],
                    self.bn_states[f"dec{i}"], mode,
                )
                h = T.leaky_relu(h, cfg.leaky_slope)
            else:
                h = T.sigmoid(h)
        return h

    def reconstruct(self, x, mode="eval"):
        """Reconstruct full-size images, splitting into patches if configured."""
        p = self.config.patches
        if p == 1:
            return self.forward(x, mode)
        tiles = self.forward(Tensor(patchify(x.data, p), dtype=x.data.dtype), mode)
        return Tensor(unpatchify(tiles.data, p))


def build_autoencoder(config, seed=0, dtype=np.float32):
    """Deterministically initialized model: same seed, same bits."""
    rng = np.random.default_rng(seed)
    params, states = init_encoder_params(config, rng, dtype)
    chans = [config.input_channels] + config.widths
    k = config.kernel_size
    for i in range(config.depth):
        cin, cout = chans[config.depth - i], chans[config.depth - 1 - i]
        params[f"dec{i}.conv.weight"] = Tensor(
            _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, config.leaky_slope, dtype),
            requires_grad=True,
        )
        params[f"dec{i}.conv.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        if i < config.depth - 1:
            params[f"dec{i}.bn.gamma"] = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
            params[f"dec{i}.bn.beta"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            states[f"dec{i}"] = BatchNormState()
    return AEModel(config, params, states, dtype)


# ---------------------------------------------------------------------------
# patch tiling


def patchify(pixels, p):
    """Split [N,C,H,W] into a row-major p x p grid of [N*p*p,C,H/p,W/p]."""
    if p == 1:
        return pixels
    n, c, h, w = pixels.shape
    if h % p or w % p:
        raise ShapeError(f"spatial dims ({h},{w}) not divisible by patch grid {p}")
    ph, pw = h // p, w // p
    tiles = pixels.reshape(n, c, p, ph, p, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(tiles).reshape(n * p * p, c, ph, pw)


def unpatchify(tiles, p):
    """Exact inverse of patchify."""
    if p == 1:
        return tiles
    m, c, ph, pw = tiles.shape
    if m % (p * p):
        raise ShapeError(f"tile count {m} not divisible by {p * p}")
    n = m // (p * p)
    grid = tiles.reshape(n, p, p, c, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(grid).reshape(n, c, p * ph, p * pw)


# ---------------------------------------------------------------------------
# persistence


def _model_paths(prefix):
    prefix = Path(prefix)
    return prefix.parent / (prefix.name + MODEL_SUFFIX), prefix.parent / (prefix.name + CONFIG_SUFFIX)


def save_model(model, prefix):
    """Write <prefix>.lampmodel (binary arrays) + <prefix>.json (config)."""
    model_path, sidecar_path = _model_paths(prefix)
    arrays = {name: p.data for name, p in model.params.items()}
    bn_batches = {}
    for layer, st in model.bn_states.items():
        bn_batches[layer] = st.num_batches
        if st.initialized:
            arrays[f"{layer}.bn.running_mean"] = st.running_mean
            arrays[f"{layer}.bn.running_var"] = st.running_var
    save_tensors(model_path, arrays)
    sidecar = {
        "format": 1,
        "dtype": model.dtype.name,
        "config": asdict(model.config),
        "bn_batches": bn_batches,
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(prefix):
    model_path, sidecar_path = _model_paths(prefix)
    if not sidecar_path.exists():
        raise FormatError(f"missing model config sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("format") != 1:
        raise FormatError(f"unsupported model format {sidecar.get('format')!r}")
    cfg_dict = dict(sidecar["config"])
    cfg_dict["input_size"] = tuple(cfg_dict["input_size"])
    config = AEConfig(**cfg_dict)
    dtype = np.dtype(sidecar["dtype"])

    arrays = load_tensors(model_path)
    reference = build_autoencoder(config, seed=0, dtype=dtype)
    params = {}
    for name, ref in reference.params.items():
        if name not in arrays:
            raise FormatError(f"model file missing parameter {name}")
        if arrays[name].shape != ref.data.shape:
            raise FormatError(
                f"parameter {name} has shape {arrays[name].shape}, config implies {ref.data.shape}"
            )
        if arrays[name].dtype != dtype:
            raise FormatError(f"parameter {name} stored as {arrays[name].dtype}, sidecar says {dtype}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    states = {}
    for layer, batches in sidecar["bn_batches"].items():
        if batches > 0:
            mean_key, var_key = f"{layer}.bn.running_mean", f"{layer}.bn.running_var"
            if mean_key not in arrays or var_key not in arrays:
                raise FormatError(f"model file missing running statistics for layer {layer}")
            states[layer] = BatchNormState(arrays[mean_key], arrays[var_key], batches)
        else:
            states[layer] = BatchNormState()
    return AEModel(config, params, states, dtype)


# ---------------------------------------------------------------------------
# reconstruction export


def export_image(pixels, path):
    """Dump one [C,H,W] or [H,W] image in [0,1] as PGM, PPM, or PNG."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"expected [H,W], [1,H,W] or [3,H,W], got {tuple(arr.shape)}")
    raw = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    suffix = path.suffix.lower()
    c, h, w = raw.shape
    if suffix == ".png":
        from PIL import Image

        img = raw[0] if c == 1 else raw.transpose(1, 2, 0)
        Image.fromarray(img, mode="L" if c == 1 else "RGB").save(path)
    elif suffix == ".pgm" and c == 1:
        path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raw[0].tobytes())
    elif suffix == ".ppm" and c == 3:
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.transpose(1, 2, 0).tobytes())
    else:
        raise ValueError(f"cannot write {c}-channel image to {suffix!r}; use .png, .pgm, or .ppm")
