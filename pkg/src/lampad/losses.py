"""Reconstruction losses: per-element base maps, amplification, scaling.

Three base losses produce per-element maps over [N,C,H,W]: squared
error, absolute error, and a windowed SSIM loss. The amplified variant
normalizes the map into [0, 1-epsilon] against its batch-wide maximum
(treated as a constant), then applies -log(1 - x) elementwise before
reduction. Because -log(1-x) >= x with derivative 1/(1-x) >= 1, the
amplified loss penalizes every residual at least as hard as the scaled
base loss and strictly harder away from zero.

A softmax cross-entropy is included for the encoder classifier probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

BASE_KINDS = ("l2", "l1", "ssim")
REDUCTIONS = ("sum", "mean")

DEFAULT_EPSILON = 0.01
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2  # (0.01 * L)^2 with L = 1 for [0,1] images
SSIM_C2 = 0.03**2


@dataclass
class LossMap:
    """Per-element nonnegative base loss with the producing kind."""

    values: Tensor
    base_kind: str


@dataclass
class LampConfig:
    epsilon: float = DEFAULT_EPSILON
    reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie strictly in (0, 1), got {self.epsilon}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


def _check_same_shape(y, y_hat):
    if y.shape != y_hat.shape:
        raise ShapeError(f"target shape {tuple(y.shape)} != reconstruction shape {tuple(y_hat.shape)}")


def l2_map(y, y_hat):
    """Per-element squared error (y - y_hat)^2."""
    _check_same_shape(y, y_hat)
    return LossMap(T.square(T.sub(y, y_hat)), "l2")


def l1_map(y, y_hat):
    """Per-element absolute error |y - y_hat|; subgradient 0 at ties."""
    _check_same_shape(y, y_hat)
    return LossMap(T.absval(T.sub(y, y_hat)), "l1")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=np.float32):
    """Normalized 2-d Gaussian window used for local SSIM statistics."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(dtype)


def _windowed_mean(x, kernel, pad):
    n, c, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, h, w))
    blurred = T.conv2d(T.pad_reflect2d(flat, pad), kernel, stride=1, padding=0)
    return T.reshape(blurred, (n, c, h, w))


def ssim_map(y, y_hat, window_size=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """Per-pixel structural dissimilarity (1 - SSIM_local) / 2 in [0, 1].

    Local means, variances and covariance come from a Gaussian window
    applied per channel with reflection padding, so the map matches the
    input shape. Identical inputs give the exact zero map.
    """
    _check_same_shape(y, y_hat)
    n, c, h, w = y.shape
    if h < window_size or w < window_size:
        raise ShapeError(f"image ({h}x{w}) smaller than SSIM window {window_size}")
    kern = Tensor(gaussian_window(window_size, sigma, y.data.dtype)[None, None])
    pad = window_size // 2

    mu_x = _windowed_mean(y, kern, pad)
    mu_y = _windowed_mean(y_hat, kern, pad)
    var_x = T.sub(_windowed_mean(T.mul(y, y), kern, pad), T.mul(mu_x, mu_x))
    var_y = T.sub(_windowed_mean(T.mul(y_hat, y_hat), kern, pad), T.mul(mu_y, mu_y))
    cov = T.sub(_windowed_mean(T.mul(y, y_hat), kern, pad), T.mul(mu_x, mu_y))

    lum = T.add(T.scalar_mul(T.mul(mu_x, mu_y), 2.0), c1)
    con = T.add(T.scalar_mul(cov, 2.0), c2)
    lum_d = T.add(T.add(T.mul(mu_x, mu_x), T.mul(mu_y, mu_y)), c1)
    con_d = T.add(T.add(var_x, var_y), c2)
    ssim = T.div(T.mul(lum, con), T.mul(lum_d, con_d))
    # clamp guards float round-off at the [0,1] boundaries; gradients
    # still flow on the closed interval
    return LossMap(T.clamp(T.scalar_mul(T.sub(1.0, ssim), 0.5), 0.0, 1.0), "ssim")


_BASE_FNS = {"l2": l2_map, "l1": l1_map, "ssim": ssim_map}


def base_map(y, y_hat, base):
    if base not in _BASE_FNS:
        raise ValueError(f"unknown base loss {base!r}; expected one of {BASE_KINDS}")
    return _BASE_FNS[base](y, y_hat)


def scale_loss_map(loss_map, epsilon=DEFAULT_EPSILON, peak=None):
    """Normalize a loss map into [0, 1-epsilon] by its global maximum.

    The maximum spans every element of the batch map and is detached, so
    it acts as a constant; ``peak`` optionally pins it to an externally
    chosen value (finite-difference validation relies on this to hold
    the constant fixed while the inputs move). A nonzero map scales to a
    maximum of exactly 1-epsilon; the all-zero map is returned
    unchanged.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie strictly in (0, 1), got {epsilon}")
    if peak is None:
        peak = float(T.reduce_max(loss_map.values).item())
    if peak == 0.0:
        return loss_map
    # divide first so the peak element becomes exactly 1.0, then shrink
    scaled = T.scalar_mul(T.div(loss_map.values, peak), 1.0 - epsilon)
    return LossMap(scaled, loss_map.base_kind)


def _reduce(values, reduction):
    if reduction == "sum":
        return T.reduce_sum(values)
    if reduction == "mean":
        return T.reduce_mean(values)
    raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def lamp_loss(y, y_hat, base="l2", config=None, scale_peak=None):
    """Amplified reconstruction loss: reduce(-log(1 - scaled base map)).

    The scaled map lives in [0, 1-epsilon], so the log argument stays in
    [epsilon, 1] and the per-element amplified loss is capped at
    -log(epsilon). Differentiable w.r.t. y_hat through everything except
    the detached normalization constant (pin it via ``scale_peak`` when
    a fixed constant is needed, e.g. for gradient validation).
    """
    cfg = config or LampConfig()
    scaled = scale_loss_map(base_map(y, y_hat, base), cfg.epsilon, peak=scale_peak)
    amplified = T.neg(T.log(T.sub(1.0, scaled.values)))
    return _reduce(amplified, cfg.reduction)


def base_loss(y, y_hat, base="l2", reduction="sum"):
    """Unamplified control arm: reduce the raw base map."""
    return _reduce(base_map(y, y_hat, base).values, reduction)


def cross_entropy(logits, labels):
    """Mean negative log-softmax of the true class over the batch."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {tuple(logits.shape)}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    out = (lse - z[np.arange(n), labels]).mean().astype(z.dtype)

    softmax = ez / ez.sum(axis=1, keepdims=True)

    def bwd(g):
        gz = softmax.copy()
        gz[np.arange(n), labels] -= 1.0
        return (g * gz / z.dtype.type(n),)

    return T._result("cross_entropy", (logits,), out, bwd)


def parse_loss_spec(spec):
    """Split a loss spec string like "l2.lamp" into (base, amplified)."""
    parts = spec.lower().split(".")
    if len(parts) == 1:
        base, amplified = parts[0], False
    elif len(parts) == 2 and parts[1] == "lamp":
        base, amplified = parts[0], True
    else:
        raise ValueError(f"bad loss spec {spec!r}; expected <base>[.lamp]")
    if base not in BASE_KINDS:
        raise ValueError(f"bad loss spec {spec!r}; base must be one of {BASE_KINDS}")
    return base, amplified


def make_loss_fn(spec, epsilon=DEFAULT_EPSILON, reduction="sum"):
    """Resolve a loss spec string into a callable (y, y_hat) -> scalar."""
    base, amplified = parse_loss_spec(spec)
    if amplified:
        cfg = LampConfig(epsilon=epsilon, reduction=reduction)
        return lambda y, y_hat: lamp_loss(y, y_hat, base, cfg)
    return lambda y, y_hat: base_loss(y, y_hat, base, reduction)
