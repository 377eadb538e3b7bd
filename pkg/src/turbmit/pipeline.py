"""Training loop and inference tricks.

Training: Adam with decoupled weight decay under a per-step cosine schedule,
L1 + SSIM loss, random crops and joint 90-degree rotations of input and
target.

Inference: the frame stack is tiled into overlapping windows blended with
linear ramps, each window optionally restored under a random 90-degree
rotation, and the whole procedure repeated with fresh frame subsets whose
outputs are averaged.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, FrameShortageError, InputError
from .metrics import LossConfig, combined_loss, psnr, ssim
from .model import draw_subset
from .utils import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-10
    weight_decay: float = 1e-4
    batch: int = 4
    epochs_pretrain: int = 108
    epochs_finetune: int = 140
    steps_per_epoch: int = None  # default: ceil(n_sequences / batch)
    rotation: bool = True
    random_crop: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.5

    def __post_init__(self):
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ConfigError("epoch counts must be >= 0")

    def steps_for(self, n_sequences, epochs):
        per_epoch = self.steps_per_epoch or math.ceil(n_sequences / self.batch)
        return epochs * per_epoch


@dataclass
class InferenceConfig:
    repeats: int = 20
    rotation_tta: bool = True
    rotation_mode: str = "random"  # or "exhaustive": average all four rotations
    small_patches: bool = True
    window: int = 128
    stride: int = 100
    frames_in: int = None  # default: the model's frames_in
    rng_seed: int = 0
    fixed_subset: bool = False  # reuse one frame subset for every repeat
    max_batch: int = 64

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.rotation_mode not in ("random", "exhaustive"):
            raise ConfigError(f"unknown rotation_mode {self.rotation_mode!r}")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("window and stride must be positive")


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(step, total_steps, cfg):
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def to_arrays(self):
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays, t):
        state = cls(t=t)
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                state.m[name] = np.array(arr)
            elif kind == "adam.v":
                state.v[name] = np.array(arr)
        return state


def adam_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"optimizer state for {name} has shape {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# training


def sample_training_pair(seq, frames_in, patch, rng, random_crop=True, rotation=True):
    """Stacked input (3*frames_in, p, p) and target (3, p, p) from one sequence."""
    idx = draw_subset(len(seq.frames), frames_in, derive_seed(int(rng.integers(2**62)), "subset"))
    frames = seq.frames[idx]
    h, w = frames.shape[1:3]
    if h < patch or w < patch:
        raise DimensionError(f"sequence {h}x{w} smaller than training patch {patch}")
    if random_crop:
        y, x = int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))
    else:
        y, x = (h - patch) // 2, (w - patch) // 2
    crop = frames[:, y : y + patch, x : x + patch].transpose(0, 3, 1, 2).reshape(-1, patch, patch)
    target = seq.gt[y : y + patch, x : x + patch].transpose(2, 0, 1)
    k = int(rng.integers(4)) if rotation else 0
    if k:
        crop = np.rot90(crop, k, axes=(1, 2))
        target = np.rot90(target, k, axes=(1, 2))
    return crop, target


@dataclass
class TrainResult:
    losses: list
    lrs: list
    state: AdamState
    steps: int


def train(model, sequences, cfg, rng_seed, epochs=None, state=None, start_step=0,
          loss_cfg=None, log_rows=None, step_offset=0, stop_step=None):
    """Fit ``model`` on in-memory FrameSequences; returns losses and optimizer state.

    One epoch visits every sequence once in random order. ``start_step``
    resumes a run part-way; the schedule position and sampling stream are
    recomputed for the skipped steps so a resumed run matches an
    uninterrupted one. ``stop_step`` ends the run early (exclusive) without
    changing the schedule.
    """
    if not sequences:
        raise InputError("training needs at least one sequence")
    epochs = cfg.epochs_pretrain if epochs is None else epochs
    loss_cfg = loss_cfg or LossConfig(alpha=cfg.alpha)
    mcfg = model.cfg
    patch = mcfg.patch
    total = cfg.steps_for(len(sequences), epochs)
    state = state or AdamState()
    dtype = next(iter(model.params.values())).dtype
    losses, lrs = [], []
    last_finite = None
    if total == 0:
        return TrainResult(losses, lrs, state, 0)

    order_rng = np.random.default_rng(derive_seed(rng_seed, "order"))
    queue = []
    end = total if stop_step is None else min(total, stop_step)
    for step in range(end):
        batch_idx = []
        for _ in range(cfg.batch):
            if not queue:
                queue = list(order_rng.permutation(len(sequences)))
            batch_idx.append(queue.pop())
        if step < start_step:
            continue
        rng = np.random.default_rng(derive_seed(rng_seed, "step", step))
        pairs = [
            sample_training_pair(sequences[i], mcfg.frames_in, patch, rng,
                                 cfg.random_crop, cfg.rotation)
            for i in batch_idx
        ]
        x = T.Tensor(np.stack([p[0] for p in pairs]).astype(dtype))
        y = T.Tensor(np.stack([p[1] for p in pairs]).astype(dtype))
        lr = cosine_lr(step, total, cfg)
        loss = combined_loss(model(x), y, loss_cfg)
        value = float(loss.item())
        if not np.isfinite(value):
            raise DivergenceError(step, lr, last_finite)
        last_finite = value
        T.backward(loss)
        adam_step(model.params, None, state, lr, cfg)
        model.zero_grad()
        losses.append(value)
        lrs.append(lr)
        if log_rows is not None:
            log_rows.append((step_offset + step, lr, value))
        if step % 100 == 0:
            log.debug("step %d/%d lr %.3e loss %.4f", step, total, lr, value)
    return TrainResult(losses, lrs, state, end)


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            writer.writerow([step, repr(float(lr)), repr(float(loss))])


# ---------------------------------------------------------------------------
# tiling


def axis_origins(dim, window, stride):
    """0, stride, 2*stride, ... plus a final origin clamped to dim - window."""
    if dim < window:
        raise DimensionError(f"extent {dim} is smaller than window {window}")
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return origins


def ramp_weights(window, stride):
    """Separable window weights that ramp linearly across the nominal overlap."""
    r = max(window - stride, 0)
    i = np.arange(window, dtype=np.float64)
    w1 = np.minimum(1.0, np.minimum((i + 1) / (r + 1), (window - i) / (r + 1)))
    return np.outer(w1, w1)


@dataclass
class PatchGrid:
    height: int
    width: int
    window: int
    stride: int
    origins: list
    weight: np.ndarray  # window x window ramp
    norm: np.ndarray  # height x width sum of scattered ramps

    def blend(self):
        """Per-patch normalized weights; scattered back they sum to 1 at every pixel."""
        win = self.window
        return np.stack([self.weight / self.norm[y : y + win, x : x + win] for y, x in self.origins])


def make_grid(height, width, window, stride):
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    ys = axis_origins(height, window, stride)
    xs = axis_origins(width, window, stride)
    origins = [(y, x) for y in ys for x in xs]
    weight = ramp_weights(window, stride)
    norm = np.zeros((height, width))
    for y, x in origins:
        norm[y : y + window, x : x + window] += weight
    grid = PatchGrid(height, width, window, stride, origins, weight, norm)
    total = np.zeros((height, width))
    for (y, x), b in zip(origins, grid.blend()):
        total[y : y + window, x : x + window] += b
    if not np.allclose(total, 1.0, rtol=0, atol=1e-12):
        raise ContractError("blend weights do not sum to one")
    return grid


def tile_patches(image, window, stride):
    """Cut a (..., H, W) array into overlapping window x window patches."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    grid = make_grid(h, w, window, stride)
    patches = np.stack([image[..., y : y + window, x : x + window] for y, x in grid.origins])
    return grid, patches


def stitch_patches(grid, patches):
    """Blend (n, ..., window, window) patches back into a (..., H, W) image."""
    patches = np.asarray(patches)
    if len(patches) != len(grid.origins):
        raise ContractError(f"{len(patches)} patches for a grid of {len(grid.origins)}")
    win = grid.window
    if patches.shape[-2:] != (win, win):
        raise ContractError(f"patch extent {patches.shape[-2:]} != window {win}")
    out = np.zeros(patches.shape[1:-2] + (grid.height, grid.width))
    for (y, x), patch, b in zip(grid.origins, patches, grid.blend()):
        out[..., y : y + win, x : x + win] += patch * b
    return out


def pad_to(image, height, width):
    """Reflect-pad a (..., H, W) array at the bottom/right to at least height x width."""
    h, w = image.shape[-2:]
    ph, pw = max(height - h, 0), max(width - w, 0)
    if ph == 0 and pw == 0:
        return image
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="reflect" if min(h, w) > 1 else "edge")


# ---------------------------------------------------------------------------
# rotation test-time augmentation


def _rotate(a, k):
    return np.rot90(a, k, axes=(-2, -1)) if k % 4 else a


def _run_batched(model_fn, batch, max_batch):
    if len(batch) <= max_batch:
        return np.asarray(model_fn(np.ascontiguousarray(batch)))
    parts = [model_fn(np.ascontiguousarray(batch[i : i + max_batch]))
             for i in range(0, len(batch), max_batch)]
    return np.concatenate(parts)


def rotation_tta(stack, model_fn, rng_seed, mode="random", k=None, max_batch=64):
    """Restore an (N, C, h, w) stack under a random multiple-of-90 rotation.

    The rotation is drawn from {0, 90, 180, 270} (or forced through ``k``),
    applied to the input, and undone on the output. ``mode="exhaustive"``
    averages all four rotations instead.
    """
    stack = np.asarray(stack)
    square = stack.shape[-1] == stack.shape[-2]
    if mode == "exhaustive":
        ks = (0, 1, 2, 3)
    elif k is None:
        ks = (int(np.random.default_rng(rng_seed).integers(4)),)
    else:
        ks = (int(k) % 4,)
    if not square and any(r % 2 for r in ks):
        raise DimensionError(f"rotation by 90/270 needs square patches, got {stack.shape[-2:]}")
    outs = [_rotate(_run_batched(model_fn, _rotate(stack, r), max_batch), -r) for r in ks]
    if len(outs) == 1:
        return outs[0]
    return np.mean(outs, axis=0)


# ---------------------------------------------------------------------------
# multi-inference


@dataclass
class InferenceResult:
    image: np.ndarray  # H, W, 3 clipped to [0, 1]
    repeats: list  # per-repeat H, W, 3 outputs, unclipped
    cumulative: list  # running mean after k repeats, unclipped


def _restore_patches(stack, model_fn, cfg, multiple, seed):
    """One pass over a (C, H, W) stack with tiling and per-patch rotation."""
    c, h, w = stack.shape
    win = cfg.window
    padded = pad_to(stack, max(h, win), max(w, win))
    grid, patches = tile_patches(padded, win, cfg.stride)
    if win % multiple:
        raise DimensionError(f"window {win} must be a multiple of {multiple}")
    restored = np.empty((len(patches), 3, win, win))
    if cfg.rotation_tta and cfg.rotation_mode == "exhaustive":
        restored[:] = rotation_tta(patches, model_fn, seed, mode="exhaustive", max_batch=cfg.max_batch)
    else:
        ks = np.zeros(len(patches), dtype=int)
        if cfg.rotation_tta:
            ks = np.array([np.random.default_rng(derive_seed(seed, "rot", i)).integers(4)
                           for i in range(len(patches))])
        for r in np.unique(ks):
            sel = np.flatnonzero(ks == r)
            restored[sel] = rotation_tta(patches[sel], model_fn, seed, k=r, max_batch=cfg.max_batch)
    return stitch_patches(grid, restored)[:, :h, :w]


def _restore_whole(stack, model_fn, cfg, multiple, seed):
    """One pass over the full (C, H, W) stack, padded to a square multiple."""
    c, h, w = stack.shape
    side = int(math.ceil(max(h, w) / multiple) * multiple)
    padded = pad_to(stack, side, side)[None]
    if cfg.rotation_tta:
        mode = cfg.rotation_mode
        out = rotation_tta(padded, model_fn, derive_seed(seed, "rot", 0), mode=mode)
    else:
        out = model_fn(np.ascontiguousarray(padded))
    return np.asarray(out)[0, :, :h, :w]


def multi_inference(sequence, model_fn, cfg, frames_in, multiple=1):
    """Average ``cfg.repeats`` restorations, each from a fresh frame subset.

    ``model_fn`` maps a (B, 3*frames_in, h, w) float array to (B, 3, h, w).
    Repeat k uses subset seed ``cfg.rng_seed + k``.
    """
    frames = np.asarray(sequence.frames if hasattr(sequence, "frames") else sequence)
    n = len(frames)
    if n < frames_in:
        raise FrameShortageError(frames_in, n)
    h, w = frames.shape[1:3]
    run = _restore_patches if cfg.small_patches else _restore_whole
    avg = None
    repeats, cumulative = [], []
    for k in range(1, cfg.repeats + 1):
        subset_seed = cfg.rng_seed + (1 if cfg.fixed_subset else k)
        idx = draw_subset(n, frames_in, subset_seed)
        stack = frames[idx].transpose(0, 3, 1, 2).reshape(-1, h, w)
        out = run(stack, model_fn, cfg, multiple, derive_seed(cfg.rng_seed, "repeat", k))
        out = out.transpose(1, 2, 0)
        # incremental mean: identical repeats leave the average bit-identical
        avg = out.copy() if avg is None else avg + (out - avg) / k
        repeats.append(out)
        cumulative.append(avg.copy())
    return InferenceResult(image=np.clip(avg, 0.0, 1.0), repeats=repeats, cumulative=cumulative)


def restore_sequence(model, sequence, cfg):
    frames_in = cfg.frames_in or model.cfg.frames_in
    if frames_in != model.cfg.frames_in:
        raise ConfigError(f"model takes {model.cfg.frames_in} frames, config asks {frames_in}")
    return multi_inference(sequence, model.predict, cfg, frames_in, model.cfg.multiple)


# ---------------------------------------------------------------------------
# reference outputs


def mean_frame(sequence):
    return np.mean(np.asarray(sequence.frames), axis=0)


def best_frame_psnr(sequence):
    return max(psnr(f, sequence.gt) for f in sequence.frames)


def evaluate(model, sequences, cfg):
    """Mean PSNR / SSIM of restored outputs plus the frame-based references."""
    rows = []
    for seq in sequences:
        res = restore_sequence(model, seq, cfg)
        rows.append({
            "psnr": psnr(res.image, seq.gt),
            "ssim": ssim(res.image, seq.gt),
            "best_frame_psnr": best_frame_psnr(seq),
            "mean_frame_psnr": psnr(mean_frame(seq), seq.gt),
        })
    summary = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    return summary, rows
