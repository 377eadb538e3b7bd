"""Synthetic text scenes: rendering, pre-turbulence degradation, dataset packaging.

Two domains are produced: words over flat backgrounds ("clean") and words
over crops of user-supplied photographs ("scene"). Each entry is rendered,
degraded (blur -> noise -> brightness, each applied with some probability),
then passed through the turbulence simulator. The undegraded render is kept
as ground truth.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import ConfigError, GenerationError
from .turbsim import DEFAULT_RANGES, SimConfig, blur, sample_params, save_sequence, simulate_sequence
from .utils import derive_seed

_HERE = Path(__file__).resolve().parent
FONT_DIR = _HERE / "fonts"
FONT_FILES = ("DejaVuSans.ttf", "DejaVuSerif.ttf", "DejaVuSansMono.ttf", "DejaVuSans-Bold.ttf")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

# Image counts of the reference corpus; only their ratios are used.
CLEAN_SCENE_COUNTS = (8706, 2569)
PRETRAIN_FINETUNE_COUNTS = (9275, 2000)
FINETUNE_CLEAN_SCENE_COUNTS = (1000, 1000)

MANIFEST_VERSION = 1
MAX_FIT_RETRIES = 5


@lru_cache(maxsize=1)
def word_list():
    words = (_HERE / "data" / "words.txt").read_text().split()
    return tuple(w for w in words if 3 <= len(w) <= 12)


@lru_cache(maxsize=64)
def _font(font_id, size):
    return ImageFont.truetype(str(FONT_DIR / FONT_FILES[font_id % len(FONT_FILES)]), size)


@dataclass(frozen=True)
class TextSample:
    text: str
    font_id: int
    size_px: int
    orientation_deg: float
    fg: tuple = (0.0, 0.0, 0.0)
    bg: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.text:
            raise ConfigError("text must be non-empty")
        if self.size_px < 8:
            raise ConfigError(f"size_px must be >= 8, got {self.size_px}")


@dataclass(frozen=True)
class DegradeConfig:
    p_blur: float = 0.5
    p_noise: float = 0.5
    p_brightness: float = 0.5
    blur_sigma: tuple = (0.5, 1.5)
    noise_sigma: tuple = (0.01, 0.05)
    brightness: tuple = (0.8, 1.2)

    @classmethod
    def disabled(cls):
        return cls(p_blur=0.0, p_noise=0.0, p_brightness=0.0)


@dataclass(frozen=True)
class DatagenConfig:
    total: int = 100
    canvas: tuple = (64, 64)
    n_frames: int = 100
    scene_domain: bool = True
    size_range: tuple = (10, 22)
    orientation_range: tuple = (-30.0, 30.0)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    def __post_init__(self):
        if self.total < 1:
            raise ConfigError("total must be >= 1")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.size_range[0] < 8 or self.size_range[1] < self.size_range[0]:
            raise ConfigError(f"invalid size_range {self.size_range}")


def random_sample(rng, cfg=DatagenConfig()):
    """Draw a word, font, size, orientation and a contrasting color pair."""
    words = word_list()
    text = words[rng.integers(len(words))]
    font_id = int(rng.integers(len(FONT_FILES)))
    size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
    angle = float(rng.uniform(*cfg.orientation_range))
    dark = tuple(float(v) for v in rng.uniform(0.0, 0.3, 3))
    light = tuple(float(v) for v in rng.uniform(0.7, 1.0, 3))
    fg, bg = (light, dark) if rng.random() < 0.25 else (dark, light)
    return TextSample(text, font_id, size, angle, fg, bg)


def _text_mask(sample, size):
    font = _font(sample.font_id, size)
    left, top, right, bottom = font.getbbox(sample.text)
    pad = 2
    mask = Image.new("L", (right - left + 2 * pad, bottom - top + 2 * pad), 0)
    ImageDraw.Draw(mask).text((pad - left, pad - top), sample.text, fill=255, font=font)
    angle = sample.orientation_deg % 360.0
    if angle:
        mask = mask.rotate(angle, resample=Image.BICUBIC, expand=True)
    return np.asarray(mask, dtype=np.float64) / 255.0


def render_text_image(sample, canvas, rng_seed, background=None):
    """Anti-aliased text composited over a flat color or ``background`` (H,W,3).

    If the rotated text does not fit, the font size shrinks by 20% per retry.
    """
    h, w = canvas
    rng = np.random.default_rng(rng_seed)
    size = sample.size_px
    for _ in range(MAX_FIT_RETRIES + 1):
        mask = _text_mask(sample, size)
        mh, mw = mask.shape
        if mh <= h and mw <= w:
            break
        size = max(1, int(size * 0.8))
    else:
        raise GenerationError(f"text does not fit a {h}x{w} canvas after retries: {sample}")

    y = int(rng.integers(0, h - mh + 1))
    x = int(rng.integers(0, w - mw + 1))
    alpha = np.zeros((h, w))
    alpha[y : y + mh, x : x + mw] = mask
    alpha = alpha[..., None]
    if background is None:
        base = np.broadcast_to(np.asarray(sample.bg, dtype=np.float64), (h, w, 3))
    else:
        base = np.asarray(background, dtype=np.float64)
    fg = np.asarray(sample.fg, dtype=np.float64)
    return np.clip(base * (1.0 - alpha) + fg * alpha, 0.0, 1.0)


def degrade(image, rng_seed, cfg=DegradeConfig()):
    """Randomly blur, add noise and scale brightness, in that order; clip to [0, 1]."""
    rng = np.random.default_rng(rng_seed)
    use_blur, use_noise, use_gain = rng.random(3) < (cfg.p_blur, cfg.p_noise, cfg.p_brightness)
    blur_sigma = rng.uniform(*cfg.blur_sigma)
    noise_sigma = rng.uniform(*cfg.noise_sigma)
    gain = rng.uniform(*cfg.brightness)
    out = np.asarray(image, dtype=np.float64)
    if not (use_blur or use_noise or use_gain):
        return out.copy()
    if use_blur:
        out = blur(out, blur_sigma)
    if use_noise:
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    if use_gain:
        out = out * gain
    return np.clip(out, 0.0, 1.0)


def list_images(directory):
    if directory is None:
        return []
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def scene_crop(path, canvas, rng_seed):
    """Random canvas-sized crop of an image file, upscaled first if too small."""
    h, w = canvas
    rng = np.random.default_rng(rng_seed)
    with Image.open(path) as im:
        im = im.convert("RGB")
        scale = max(h / im.height, w / im.width, 1.0)
        if scale > 1.0:
            im = im.resize((int(np.ceil(im.width * scale)), int(np.ceil(im.height * scale))), Image.BILINEAR)
        y = int(rng.integers(0, im.height - h + 1))
        x = int(rng.integers(0, im.width - w + 1))
        arr = np.asarray(im.crop((x, y, x + w, y + h)), dtype=np.float64) / 255.0
    return arr


def _ratio_round(total, counts):
    return int(round(total * counts[0] / sum(counts)))


def split_counts(total, scene_domain=True):
    """Entry counts per (split, domain), preserving the reference corpus ratios."""
    clean = _ratio_round(total, CLEAN_SCENE_COUNTS) if scene_domain else total
    scene = total - clean
    pretrain = _ratio_round(total, PRETRAIN_FINETUNE_COUNTS)
    finetune = total - pretrain
    ft_clean = min(clean, _ratio_round(finetune, FINETUNE_CLEAN_SCENE_COUNTS))
    ft_scene = finetune - ft_clean
    if ft_scene > scene:
        ft_clean, ft_scene = finetune - scene, scene
    return {
        ("pretrain", "clean"): clean - ft_clean,
        ("pretrain", "scene"): scene - ft_scene,
        ("finetune", "clean"): ft_clean,
        ("finetune", "scene"): ft_scene,
    }


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    domain: str
    split: str
    params: str


@dataclass
class DatasetManifest:
    seed: int
    entries: list
    root: Path = None
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ConfigError("manifest contains duplicate entry paths")

    def select(self, split=None, domain=None):
        return [
            e
            for e in self.entries
            if (split is None or e.split == split) and (domain is None or e.domain == domain)
        ]

    def counts(self):
        out = {}
        for e in self.entries:
            out[(e.split, e.domain)] = out.get((e.split, e.domain), 0) + 1
        return out

    def sequence_dir(self, entry):
        return Path(self.root) / entry.path

    def to_json(self):
        doc = {
            "version": self.version,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {doc.get('version')}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        return cls(seed=doc["seed"], entries=entries, root=path.parent)


def _assignments(total, scene_domain, rng_seed):
    counts = split_counts(total, scene_domain)
    rng = np.random.default_rng(derive_seed(rng_seed, "assign"))
    out = []
    for split in ("pretrain", "finetune"):
        domains = ["clean"] * counts[(split, "clean")] + ["scene"] * counts[(split, "scene")]
        order = rng.permutation(len(domains))
        out.extend((split, domains[i]) for i in order)
    return out


def _check_writable(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK | os.X_OK):
        raise PermissionError(f"output directory is not writable: {out_dir}")
    return out_dir


def build_entry(index, split, domain, cfg, scenes, rng_seed, sim_cfg, ranges):
    """Render, degrade and turbulence-simulate one entry; returns (gt, sequence)."""
    seed = rng_seed + index
    rng = np.random.default_rng(derive_seed(seed, "sample"))
    sample = random_sample(rng, cfg)
    background = None
    if domain == "scene":
        path = scenes[int(rng.integers(len(scenes)))]
        background = scene_crop(path, cfg.canvas, derive_seed(seed, "crop"))
        # pick the text tone that contrasts with the crop
        dark = background.mean() > 0.5
        tone = rng.uniform(0.0, 0.2, 3) if dark else rng.uniform(0.8, 1.0, 3)
        sample = TextSample(
            sample.text, sample.font_id, sample.size_px, sample.orientation_deg,
            tuple(float(v) for v in tone), sample.bg,
        )
    gt = render_text_image(sample, cfg.canvas, derive_seed(seed, "render"), background)
    degraded = degrade(gt, derive_seed(seed, "degrade"), cfg.degrade)
    params = sample_params(ranges, derive_seed(seed, "params"))
    seq = simulate_sequence(degraded, params, cfg.n_frames, derive_seed(seed, "turb"), sim_cfg)
    seq.gt = gt
    seq.meta = {"text": sample.text, "font_id": sample.font_id, "domain": domain, "split": split}
    return seq


def build_dataset(cfg, scene_dir, out_dir, rng_seed, sim_cfg=SimConfig(), ranges=None):
    """Generate ``cfg.total`` sequences under ``out_dir`` and write manifest.json."""
    ranges = DEFAULT_RANGES if ranges is None else ranges
    assignments = _assignments(cfg.total, cfg.scene_domain, rng_seed)
    scenes = list_images(scene_dir)
    if cfg.scene_domain and any(d == "scene" for _, d in assignments) and not scenes:
        raise ConfigError(f"scene domain enabled but no readable images in {scene_dir!r}")
    out_dir = _check_writable(out_dir)

    entries = []
    for index, (split, domain) in enumerate(assignments):
        seq = build_entry(index, split, domain, cfg, scenes, rng_seed, sim_cfg, ranges)
        entry_id = f"{index:05d}"
        rel = f"{split}/{entry_id}"
        save_sequence(seq, out_dir / rel, extra={"entry_seed": rng_seed + index})
        entries.append(ManifestEntry(entry_id, rel, domain, split, f"{rel}/params.json"))

    manifest = DatasetManifest(seed=rng_seed, entries=entries, root=out_dir)
    manifest.save()
    return manifest
