"""Adversarial and structural losses, plus the PSNR/SSIM image metrics.

Every loss takes :class:`~sdgan.tensor.Tensor` inputs and returns a scalar
tensor that can be backpropagated.  The ``*_value`` helpers evaluate the same
expressions on plain arrays in float64 and return Python floats.

Images are (N, C, H, W) batches with pixel values in [0, 1].  (H, W) and
(C, H, W) arrays are promoted to a batch of one.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, avg_pool2d

BCE_EPSILON = 1e-7
LUMA_WEIGHTS = (0.2989, 0.5870, 0.1141)


def default_channel_weights(channels):
    if channels == 3:
        return LUMA_WEIGHTS
    if channels == 1:
        return (1.0,)
    return tuple([1.0 / channels] * channels)


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 8
    window_stride: int = None
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or (self.window_stride is not None and self.window_stride < 1):
            raise ConfigError("SSIM window size and stride must be positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ConfigError("SSIM constants k1, k2 and dynamic range must be positive")

    @property
    def stride(self):
        return self.window_stride or self.window_size

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class PmseConfig:
    patch_size: int = 8
    patch_stride: int = None
    channel_weights: tuple = None

    def __post_init__(self):
        if self.patch_size < 1 or (self.patch_stride is not None and self.patch_stride < 1):
            raise ConfigError("PMSE patch size and stride must be positive")
        if self.channel_weights is not None and any(w < 0 for w in self.channel_weights):
            raise ConfigError("PMSE channel weights must be non-negative")

    @property
    def stride(self):
        return self.patch_stride or self.patch_size

    def weights_for(self, channels):
        weights = self.channel_weights or default_channel_weights(channels)
        if len(weights) != channels:
            raise ConfigError(f"{len(weights)} channel weights given for {channels}-channel images")
        return tuple(weights)


def _batch(x):
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=np.float64)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise DimensionError(f"expected an image or image batch, got shape {x.shape}")
    return x


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def to_gray(x, weights=None):
    """Collapse channels with the luminance weights; single channel passes through."""
    x = _batch(x)
    channels = x.shape[1]
    if channels == 1:
        return x
    weights = weights or default_channel_weights(channels)
    if len(weights) != channels:
        raise ConfigError(f"{len(weights)} luminance weights for {channels} channels")
    w = Tensor(np.asarray(weights).reshape(1, channels, 1, 1), dtype=x.dtype)
    return (x * w).sum(axis=1, keepdims=True)


def bce(prediction, target, eps=BCE_EPSILON):
    """Mean binary cross-entropy with predictions clipped to [eps, 1 - eps]."""
    if not isinstance(target, Tensor):
        target = Tensor(np.broadcast_to(target, prediction.shape), dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise DimensionError(f"prediction shape {prediction.shape} differs from target shape {target.shape}")
    p = prediction.clip(eps, 1 - eps)
    return -(target * p.log() + (1 - target) * (1 - p).log()).mean()


def ssim_index(x1, x2, cfg=None):
    """Mean SSIM over all windows of all images in the batch."""
    cfg = cfg or SsimConfig()
    x1, x2 = _batch(x1), _batch(x2)
    _same_shape(x1, x2)
    h, w = x1.shape[2:]
    if cfg.window_size > min(h, w):
        raise ContractError(f"SSIM window {cfg.window_size} larger than image side {min(h, w)}")
    p, q = to_gray(x1), to_gray(x2)
    size, stride = cfg.window_size, cfg.stride
    mu_p = avg_pool2d(p, size, stride)
    mu_q = avg_pool2d(q, size, stride)
    mu_pp = mu_p * mu_p
    mu_qq = mu_q * mu_q
    mu_pq = mu_p * mu_q
    var_p = avg_pool2d(p * p, size, stride) - mu_pp
    var_q = avg_pool2d(q * q, size, stride) - mu_qq
    cov = avg_pool2d(p * q, size, stride) - mu_pq
    c1, c2 = cfg.c1, cfg.c2
    numerator = (2 * mu_pq + c1) * (2 * cov + c2)
    denominator = (mu_pp + mu_qq + c1) * (var_p + var_q + c2)
    return (numerator / denominator).mean()


def ssim_loss(x1, x2, cfg=None):
    return 1 - ssim_index(x1, x2, cfg)


def pmse(x1, x2, cfg=None):
    """Channel-weighted mean over patches of each patch's mean squared error."""
    cfg = cfg or PmseConfig()
    x1, x2 = _batch(x1), _batch(x2)
    _same_shape(x1, x2)
    channels = x1.shape[1]
    weights = cfg.weights_for(channels)
    if cfg.patch_size > min(x1.shape[2:]):
        raise ContractError(f"PMSE patch {cfg.patch_size} larger than image side {min(x1.shape[2:])}")
    diff = x1 - x2
    per_patch = avg_pool2d(diff * diff, cfg.patch_size, cfg.stride)
    per_channel = per_patch.mean(axis=(0, 2, 3))
    lam = Tensor(np.asarray(weights), dtype=x1.dtype)
    return (per_channel * lam).sum()


def structural_loss(x1, x2, ssim_cfg=None, pmse_cfg=None):
    return (ssim_loss(x1, x2, ssim_cfg) + pmse(x1, x2, pmse_cfg)) * 0.5


def _f64(x):
    data = x.data if isinstance(x, Tensor) else x
    return Tensor(np.asarray(data, dtype=np.float64), dtype=np.float64)


def bce_value(prediction, target, eps=BCE_EPSILON):
    return bce(_f64(prediction), _f64(np.broadcast_to(target, np.shape(prediction))), eps).item()


def ssim_value(x1, x2, cfg=None):
    return ssim_index(_f64(x1), _f64(x2), cfg).item()


def ssim_loss_value(x1, x2, cfg=None):
    return ssim_loss(_f64(x1), _f64(x2), cfg).item()


def pmse_value(x1, x2, cfg=None):
    return pmse(_f64(x1), _f64(x2), cfg).item()


def structural_loss_value(x1, x2, ssim_cfg=None, pmse_cfg=None):
    return structural_loss(_f64(x1), _f64(x2), ssim_cfg, pmse_cfg).item()


def mse_value(x1, x2):
    a = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=np.float64)
    b = np.asarray(x2.data if isinstance(x2, Tensor) else x2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(x_fin, x_real, max_value=1.0):
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    mse = mse_value(x_fin, x_real)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)
