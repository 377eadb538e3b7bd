"""First-order turbulence simulator: random tilt fields plus a shared blur.

Each frame is the clean image blurred by a fixed Gaussian, backward-warped
by its own spatially correlated displacement field, and optionally hit by
Gaussian noise. Tilt strength follows the usual single-axis tilt variance
for an aperture of diameter D in turbulence with Fried parameter r0; the
``corr`` knob sets the displacement correlation length.

Angles are converted to pixels through an object-plane pixel pitch that
grows linearly with the path length (a fixed angular pixel scale).
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionError, InputError
from .utils import derive_seed, read_png, write_png

# Parameter intervals for the synthetic training set.
DEFAULT_RANGES = {
    "D": (0.06143, 0.091254),
    "L": (200.0, 400.0),
    "Cn2": (5.7386e-14, 9.7386e-14),
    "corr": (-1.0, 0.0),
}

# Single-axis tilt standard deviation is TILT_COEF * (D/r0)^(5/6) * lambda/D (radians).
TILT_COEF = math.sqrt(0.182)


@dataclass(frozen=True)
class TurbulenceParams:
    D: float
    L: float
    Cn2: float
    corr: float
    wavelength: float = 550e-9

    def __post_init__(self):
        if not (self.D > 0 and self.L > 0 and self.Cn2 > 0 and self.wavelength > 0):
            raise ConfigError(f"D, L, Cn2 and wavelength must be positive: {self}")
        if not -1.0 <= self.corr <= 0.0:
            raise ConfigError(f"corr must lie in [-1, 0], got {self.corr}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SimConfig:
    """Meter-to-pixel mapping and frame-level options."""

    pixel_pitch_ref: float = 2e-3  # object-plane meters per pixel at L = L_ref
    L_ref: float = 200.0
    tilt_gain: float = 1.0
    blur_gain: float = 1.0
    blur_min: float = 0.5
    blur_max: float = 4.0
    corr_sigma_min: float = 2.0
    corr_sigma_max: float = 12.0
    noise_std: tuple = (0.0, 0.02)  # per-frame noise sigma drawn uniformly from this range

    def __post_init__(self):
        lo, hi = self.noise_std
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid noise_std interval {self.noise_std}")
        if self.corr_sigma_min <= 0 or self.corr_sigma_max < self.corr_sigma_min:
            raise ConfigError("corr sigma interval must be positive and ordered")
        if self.blur_min <= 0 or self.blur_max < self.blur_min:
            raise ConfigError("blur clip interval must be positive and ordered")

    def pixel_pitch(self, L):
        return self.pixel_pitch_ref * L / self.L_ref


@dataclass
class DisplacementField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise DimensionError("dx and dy must share a shape")

    @property
    def shape(self):
        return self.dx.shape

    def magnitude(self):
        return np.hypot(self.dx, self.dy)


@dataclass
class FrameSequence:
    """N degraded frames (N,H,W,C in [0,1]) of one scene, plus ground truth."""

    frames: np.ndarray
    gt: np.ndarray = None
    params: TurbulenceParams = None
    seed: int = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def sample_params(ranges=None, rng_seed=0, wavelength=550e-9):
    """Draw D, L, Cn2 and corr independently and uniformly from ``ranges``."""
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    rng = np.random.default_rng(rng_seed)
    values = {}
    for name in ("D", "L", "Cn2", "corr"):
        lo, hi = ranges[name]
        if hi < lo:
            raise ConfigError(f"inverted interval for {name}: [{lo}, {hi}]")
        values[name] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return TurbulenceParams(wavelength=wavelength, **values)


def fried_parameter(p):
    """Plane-wave Fried parameter r0 = (0.423 k^2 Cn2 L)^(-3/5), meters."""
    k = 2.0 * math.pi / p.wavelength
    return (0.423 * k * k * p.Cn2 * p.L) ** (-3.0 / 5.0)


def tilt_sigma_px(p, cfg=SimConfig()):
    """Per-axis tilt standard deviation in pixels."""
    r0 = fried_parameter(p)
    angle = TILT_COEF * (p.D / r0) ** (5.0 / 6.0) * p.wavelength / p.D
    return cfg.tilt_gain * angle * p.L / cfg.pixel_pitch(p.L)


def blur_sigma_px(p, cfg=SimConfig()):
    """Gaussian blur sigma ~ lambda L / (D pitch), clipped to [blur_min, blur_max]."""
    sigma = cfg.blur_gain * p.wavelength * p.L / (p.D * cfg.pixel_pitch(p.L))
    return float(np.clip(sigma, cfg.blur_min, cfg.blur_max))


def correlation_sigma_px(corr, cfg=SimConfig()):
    """Affine map corr in [-1, 0] -> correlation kernel sigma in pixels."""
    return cfg.corr_sigma_min + (corr + 1.0) * (cfg.corr_sigma_max - cfg.corr_sigma_min)


def generate_displacement_field(p, shape, rng_seed, cfg=SimConfig()):
    """Zero-mean Gaussian tilt field with per-pixel std ``tilt_sigma_px``.

    White noise is smoothed with a periodic Gaussian of the correlation
    sigma, then each component is centered and rescaled to the tilt sigma.
    """
    h, w = shape
    if h < 8 or w < 8:
        raise DimensionError(f"displacement fields need H, W >= 8, got {shape}")
    rng = np.random.default_rng(rng_seed)
    sigma_tilt = tilt_sigma_px(p, cfg)
    sigma_corr = correlation_sigma_px(p.corr, cfg)
    out = []
    for _ in range(2):
        f = gaussian_filter(rng.standard_normal((h, w)), sigma_corr, mode="wrap")
        f -= f.mean()
        f *= sigma_tilt / f.std()
        out.append(f)
    return DisplacementField(dx=out[0], dy=out[1])


def warp(image, fld):
    """Backward bilinear warp: out(y, x) = image(y + dy, x + dx), edges clamped."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if fld.shape != (h, w):
        raise DimensionError(f"field {fld.shape} does not match image {(h, w)}")
    gy, gx = np.mgrid[0:h, 0:w]
    yy = np.clip(gy + fld.dy, 0, h - 1)
    xx = np.clip(gx + fld.dx, 0, w - 1)
    y0 = np.floor(yy).astype(np.intp)
    x0 = np.floor(xx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yy - y0
    wx = xx - x0
    if image.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bottom = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(image.dtype, copy=False)


def blur(image, sigma):
    image = np.asarray(image, dtype=np.float64)
    sig = (sigma, sigma, 0) if image.ndim == 3 else sigma
    return gaussian_filter(image, sig, mode="nearest")


def simulate_sequence(clean, p, n_frames, rng_seed, cfg=SimConfig(), noise=True):
    """Render ``n_frames`` turbulent observations of ``clean`` (H,W,C in [0,1])."""
    if n_frames < 1:
        raise InputError("n_frames must be >= 1")
    clean = np.asarray(clean, dtype=np.float64)
    blurred = blur(clean, blur_sigma_px(p, cfg))
    lo, hi = cfg.noise_std
    frames = np.empty((n_frames,) + clean.shape)
    for k in range(n_frames):
        fseed = derive_seed(rng_seed, "frame", k)
        fld = generate_displacement_field(p, clean.shape[:2], fseed, cfg)
        frame = warp(blurred, fld)
        if noise and hi > 0:
            rng = np.random.default_rng(derive_seed(fseed, "noise"))
            sigma = rng.uniform(lo, hi)
            frame = frame + rng.normal(0.0, sigma, frame.shape)
        frames[k] = np.clip(frame, 0.0, 1.0)
    return FrameSequence(frames=frames, gt=clean.copy(), params=p, seed=rng_seed)


def save_sequence(seq, directory, extra=None):
    """Write frame_%03d.png, gt.png and a params.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(seq.frames):
        write_png(directory / f"frame_{k:03d}.png", frame)
    if seq.gt is not None:
        write_png(directory / "gt.png", seq.gt)
    sidecar = {
        "params": seq.params.to_dict() if seq.params is not None else None,
        "seed": seq.seed,
        "n_frames": len(seq.frames),
    }
    sidecar.update(seq.meta)
    if extra:
        sidecar.update(extra)
    (directory / "params.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return directory


def load_sequence(directory):
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise InputError(f"no frame_*.png files in {directory}")
    frames = np.stack([read_png(p) for p in paths])
    gt_path = directory / "gt.png"
    gt = read_png(gt_path) if gt_path.exists() else None
    params, seed, meta = None, None, {}
    sidecar = directory / "params.json"
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("params"):
            params = TurbulenceParams(**meta["params"])
        seed = meta.get("seed")
    return FrameSequence(frames=frames, gt=gt, params=params, seed=seed, meta=meta)
