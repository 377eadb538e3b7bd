"""PSNR, Gaussian-window SSIM and the L1 + SSIM training loss.

SSIM is written once against the tensor ops so the same code serves the
differentiable loss and the plain metric on H x W x C images. Filtering is
"valid" (no padding): the SSIM map covers every full window position.
RGB metrics average over channels: PSNR from the MSE pooled over all
channels, SSIM as the mean of the per-channel maps.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

PSNR_CAP_DB = 100.0

# ITU-R BT.601 luma weights, used when channel="y".
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.ssim_sigma <= 0:
            raise ConfigError("ssim_sigma must be positive")


@lru_cache(maxsize=16)
def gaussian_1d(size, sigma):
    """Normalized 1-D Gaussian taps, float64."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    g.setflags(write=False)
    return g


def gaussian_window(size, sigma):
    """Normalized 2-D Gaussian window, float64."""
    g = gaussian_1d(size, sigma)
    return np.outer(g, g)


def _to_luma(img):
    return (np.asarray(img, dtype=np.float64)[..., :3] @ _LUMA)[..., None]


def _prepare(a, b, channel):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if channel == "y" and a.shape[-1] >= 3:
        a, b = _to_luma(a), _to_luma(b)
    elif channel not in ("rgb", "y"):
        raise ConfigError(f"channel must be 'rgb' or 'y', got {channel!r}")
    return a, b


def psnr(a, b, cap=PSNR_CAP_DB, channel="rgb"):
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    a, b = _prepare(a, b, channel)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim_tensor(pred, target, cfg=LossConfig()):
    """Mean SSIM of two N,C,H,W tensors as a scalar tensor."""
    if pred.shape != target.shape:
        raise DimensionError(f"SSIM shapes differ: {pred.shape} vs {target.shape}")
    n, c, h, w = pred.shape
    if min(h, w) < cfg.ssim_window:
        raise DimensionError(
            f"image {h}x{w} is smaller than the {cfg.ssim_window}px SSIM window"
        )
    g = gaussian_1d(cfg.ssim_window, cfg.ssim_sigma).astype(pred.dtype)
    k_row = T.Tensor(np.broadcast_to(g, (c, 1, 1, g.size)).copy())
    k_col = T.Tensor(np.broadcast_to(g[:, None], (c, 1, g.size, 1)).copy())

    # the window is separable: one row pass then one column pass
    def blur(t):
        return T.depthwise_conv2d(T.depthwise_conv2d(t, k_row), k_col)

    mu1, mu2 = blur(pred), blur(target)
    mu1_sq, mu2_sq, mu12 = T.square(mu1), T.square(mu2), mu1 * mu2
    s11 = blur(T.square(pred)) - mu1_sq
    s22 = blur(T.square(target)) - mu2_sq
    s12 = blur(pred * target) - mu12
    num = (2.0 * mu12 + cfg.c1) * (2.0 * s12 + cfg.c2)
    den = (mu1_sq + mu2_sq + cfg.c1) * (s11 + s22 + cfg.c2)
    return T.mean(num / den)


def _hwc_to_tensor(img):
    return T.Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None]), dtype=np.float64)


def ssim(a, b, cfg=LossConfig(), channel="rgb"):
    """Mean SSIM of two H x W (x C) images in [0, 1]."""
    a, b = _prepare(a, b, channel)
    return float(ssim_tensor(_hwc_to_tensor(a), _hwc_to_tensor(b), cfg).item())


def combined_loss(pred, target, cfg=LossConfig()):
    """alpha * L1 + (1 - alpha) * (1 - SSIM), as a differentiable scalar."""
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    l1 = T.mean(T.abs_(pred - target))
    if cfg.alpha == 1.0:
        return l1
    dssim = 1.0 - ssim_tensor(pred, target, cfg)
    if cfg.alpha == 0.0:
        return dssim
    return cfg.alpha * l1 + (1.0 - cfg.alpha) * dssim
