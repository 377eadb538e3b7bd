"""Multi-frame restorer: channel-attention encoder-decoder plus a frame-quality branch.

The reconstruction branch maps the channel-stacked input frames to a
3-channel correction F'. The quality branch scores each input frame in
(0, 1); the normalized scores weight the frames into R, and the output is
F = F' + R. With the final projection at zero and uniform scores the model
returns the plain mean frame.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, DimensionError, FormatError, FrameShortageError

MAGIC = b"ATMR"
FORMAT_VERSION = 1


@dataclass
class RestorerConfig:
    levels: int = 4
    blocks_per_level: list = field(default_factory=lambda: [1, 1, 2, 2])
    base_channels: int = 8
    heads_per_level: list = field(default_factory=lambda: [1, 2, 4, 8])
    frames_in: int = 20
    patch: int = 128
    ffn_expansion: float = 2.66
    refinement_blocks: int = 0
    quality_channels: int = 8
    zero_init_output: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.blocks_per_level = list(self.blocks_per_level)
        self.heads_per_level = list(self.heads_per_level)
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.blocks_per_level) != self.levels or len(self.heads_per_level) != self.levels:
            raise ConfigError(
                f"blocks_per_level and heads_per_level need {self.levels} entries"
            )
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigError("every level needs at least one block")
        if any(a > b for a, b in zip(self.blocks_per_level, self.blocks_per_level[1:])):
            raise ConfigError("blocks_per_level must be non-decreasing from top to bottom")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be even and >= 2")
        for lvl in range(self.levels):
            for dim in {self.level_dim(lvl), self.decoder_dim(lvl)}:
                if dim % self.heads_per_level[lvl]:
                    raise ConfigError(
                        f"level {lvl}: {dim} channels not divisible by "
                        f"{self.heads_per_level[lvl]} heads"
                    )
        if self.frames_in < 1:
            raise ConfigError("frames_in must be >= 1")
        if self.patch % self.multiple:
            raise ConfigError(f"patch {self.patch} must be a multiple of {self.multiple}")

    @classmethod
    def full_size(cls, **overrides):
        """Full-size layout: 48 channels, [4, 6, 6, 8] blocks, 4 refinement blocks."""
        base = dict(
            blocks_per_level=[4, 6, 6, 8], base_channels=48, heads_per_level=[1, 2, 4, 8],
            frames_in=20, patch=128, refinement_blocks=4,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def multiple(self):
        return 2 ** (self.levels - 1)

    def level_dim(self, lvl):
        return self.base_channels * 2**lvl

    def decoder_dim(self, lvl):
        # the top decoder keeps the concatenated width, as in the backbone
        if lvl == 0 and self.levels > 1:
            return 2 * self.base_channels
        return self.level_dim(lvl)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter layout


def _block_shapes(prefix, dim, expansion):
    hidden = int(dim * expansion)
    return [
        (prefix + "norm1.g", (dim,)),
        (prefix + "norm1.b", (dim,)),
        (prefix + "attn.qkv.w", (3 * dim, dim, 1, 1)),
        (prefix + "attn.qkv_dw.w", (3 * dim, 1, 3, 3)),
        (prefix + "attn.temp", None),
        (prefix + "attn.proj.w", (dim, dim, 1, 1)),
        (prefix + "norm2.g", (dim,)),
        (prefix + "norm2.b", (dim,)),
        (prefix + "ffn.in.w", (2 * hidden, dim, 1, 1)),
        (prefix + "ffn.dw.w", (2 * hidden, 1, 3, 3)),
        (prefix + "ffn.out.w", (dim, hidden, 1, 1)),
    ]


def _stage_shapes(name, n_blocks, dim, heads, expansion):
    out = []
    for b in range(n_blocks):
        for pname, shape in _block_shapes(f"{name}.b{b}.", dim, expansion):
            out.append((pname, (heads,) if shape is None else shape))
    return out


def parameter_shapes(cfg):
    """Ordered (name, shape) list for every parameter implied by ``cfg``."""
    c = cfg.level_dim
    top = cfg.levels - 1
    shapes = [("embed.w", (c(0), 3 * cfg.frames_in, 3, 3))]
    for lvl in range(top):
        shapes += _stage_shapes(f"enc{lvl}", cfg.blocks_per_level[lvl], c(lvl),
                                cfg.heads_per_level[lvl], cfg.ffn_expansion)
        shapes.append((f"down{lvl}.w", (c(lvl) // 2, c(lvl), 3, 3)))
    shapes += _stage_shapes("latent", cfg.blocks_per_level[top], c(top),
                            cfg.heads_per_level[top], cfg.ffn_expansion)
    for lvl in range(top - 1, -1, -1):
        shapes.append((f"up{lvl + 1}.w", (2 * c(lvl + 1), c(lvl + 1), 3, 3)))
        if lvl > 0:
            shapes.append((f"reduce{lvl}.w", (c(lvl), 2 * c(lvl), 1, 1)))
        shapes += _stage_shapes(f"dec{lvl}", cfg.blocks_per_level[lvl], cfg.decoder_dim(lvl),
                                cfg.heads_per_level[lvl], cfg.ffn_expansion)
    final = cfg.decoder_dim(0)
    shapes += _stage_shapes("refine", cfg.refinement_blocks, final, cfg.heads_per_level[0],
                            cfg.ffn_expansion)
    shapes.append(("output.w", (3, final, 3, 3)))
    q = cfg.quality_channels
    shapes += [
        ("quality.conv1.w", (q, 3, 3, 3)),
        ("quality.conv1.b", (q,)),
        ("quality.conv2.w", (q, q, 3, 3)),
        ("quality.conv2.b", (q,)),
        ("quality.fc.w", (1, q, 1, 1)),
        ("quality.fc.b", (1,)),
    ]
    return shapes


def init_params(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("g", "temp"):
            arr = np.ones(shape)
        elif leaf == "b" or (name == "output.w" and cfg.zero_init_output):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, shape)
        params[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# forward pass


def _block(p, pre, x, heads, eps):
    y = T.layer_norm(x, p[pre + "norm1.g"], p[pre + "norm1.b"], eps)
    qkv = T.depthwise_conv2d(T.conv2d(y, p[pre + "attn.qkv.w"]), p[pre + "attn.qkv_dw.w"], padding=1)
    q, k, v = T.chunk(qkv, 3)
    att = T.channel_attention(q, k, v, heads, p[pre + "attn.temp"])
    x = x + T.conv2d(att, p[pre + "attn.proj.w"])
    y = T.layer_norm(x, p[pre + "norm2.g"], p[pre + "norm2.b"], eps)
    h = T.depthwise_conv2d(T.conv2d(y, p[pre + "ffn.in.w"]), p[pre + "ffn.dw.w"], padding=1)
    h1, h2 = T.chunk(h, 2)
    return x + T.conv2d(T.gelu(h1) * h2, p[pre + "ffn.out.w"])


def _stage(p, name, n_blocks, x, heads, eps):
    for b in range(n_blocks):
        x = _block(p, f"{name}.b{b}.", x, heads, eps)
    return x


def restore_forward(x, params, cfg):
    """Reconstruction branch: N, 3*frames_in, H, W -> F' of shape N, 3, H, W."""
    n, c, h, w = x.shape
    if c != 3 * cfg.frames_in:
        raise DimensionError(f"expected {3 * cfg.frames_in} input channels, got {c}")
    if h % cfg.multiple or w % cfg.multiple:
        raise DimensionError(
            f"input {h}x{w}: height and width must be multiples of {cfg.multiple}"
        )
    p, eps, top = params, cfg.norm_eps, cfg.levels - 1
    heads, blocks = cfg.heads_per_level, cfg.blocks_per_level

    feat = T.conv2d(x, p["embed.w"], padding=1)
    skips = []
    for lvl in range(top):
        feat = _stage(p, f"enc{lvl}", blocks[lvl], feat, heads[lvl], eps)
        skips.append(feat)
        feat = T.pixel_unshuffle(T.conv2d(feat, p[f"down{lvl}.w"], padding=1), 2)
    feat = _stage(p, "latent", blocks[top], feat, heads[top], eps)
    for lvl in range(top - 1, -1, -1):
        feat = T.pixel_shuffle(T.conv2d(feat, p[f"up{lvl + 1}.w"], padding=1), 2)
        feat = T.concat([feat, skips[lvl]], axis=1)
        if lvl > 0:
            feat = T.conv2d(feat, p[f"reduce{lvl}.w"])
        feat = _stage(p, f"dec{lvl}", blocks[lvl], feat, heads[lvl], eps)
    feat = _stage(p, "refine", cfg.refinement_blocks, feat, heads[0], eps)
    return T.conv2d(feat, p["output.w"], padding=1)


class QualityScores:
    """Per-frame scores s in (0, 1) and their normalized weights s / sum(s)."""

    def __init__(self, scores):
        self.scores = scores
        self.weights = T.normalize_sum(scores)

    @property
    def numpy(self):
        return self.scores.data

    @property
    def weight_values(self):
        return self.weights.data


def quality_scores(frames, params):
    """Score each frame of an N, F, 3, H, W tensor with the shared quality head."""
    n, f, c, h, w = frames.shape
    p = params
    x = T.reshape(frames, (n * f, c, h, w))
    x = T.gelu(T.conv2d(x, p["quality.conv1.w"], p["quality.conv1.b"], padding=1))
    x = T.gelu(T.conv2d(x, p["quality.conv2.w"], p["quality.conv2.b"], stride=2, padding=1))
    x = T.conv2d(T.global_avg_pool(x), p["quality.fc.w"], p["quality.fc.b"])
    return QualityScores(T.sigmoid(T.reshape(x, (n, f))))


def residual_combine(frames, scores, f_prime):
    """F = F' + sum_i w_i * frame_i, with w the normalized quality scores."""
    n, f, c, h, w = frames.shape
    if f_prime.shape != (n, c, h, w):
        raise DimensionError(f"F' shape {f_prime.shape} does not match frames {(n, c, h, w)}")
    residual = T.weighted_frame_sum(frames, scores.weights)
    return f_prime + residual


def split_frames(x, frames_in):
    n, c, h, w = x.shape
    return T.reshape(x, (n, frames_in, c // frames_in, h, w))


def draw_subset(n_available, k, rng_seed):
    """k distinct frame indices in draw order."""
    if n_available < k:
        raise FrameShortageError(k, n_available)
    rng = np.random.default_rng(rng_seed)
    return rng.choice(n_available, size=k, replace=False)


def stack_frames(frames, frames_in, rng_seed, indices=None):
    """Channel-stack a random ``frames_in`` subset of H,W,3 frames -> 1, 3*frames_in, H, W."""
    frames = np.asarray(frames)
    if len(frames) < frames_in:
        raise FrameShortageError(frames_in, len(frames))
    if indices is None:
        indices = draw_subset(len(frames), frames_in, rng_seed)
    chosen = frames[np.asarray(indices)]
    stacked = chosen.transpose(0, 3, 1, 2).reshape(1, -1, *chosen.shape[1:3])
    return T.Tensor(np.ascontiguousarray(stacked))


class Restorer:
    """Parameters plus configuration; calling the model returns F (unclipped)."""

    def __init__(self, cfg, params=None, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = init_params(cfg, seed, dtype) if params is None else params

    def forward(self, x, params=None):
        """Returns (F, F', QualityScores) for an N, 3*frames_in, H, W tensor."""
        p = self.params if params is None else params
        f_prime = restore_forward(x, p, self.cfg)
        frames = split_frames(x, self.cfg.frames_in)
        scores = quality_scores(frames, p)
        return residual_combine(frames, scores, f_prime), f_prime, scores

    def __call__(self, x):
        return self.forward(x)[0]

    def _frozen(self):
        return {k: T.Tensor(v.data) for k, v in self.params.items()}

    def predict(self, x):
        """Graph-free inference on a numpy batch; returns unclipped N, 3, H, W."""
        dtype = next(iter(self.params.values())).dtype
        xt = T.Tensor(np.asarray(x, dtype=dtype))
        return self.forward(xt, self._frozen())[0].data

    def score(self, x):
        xt = T.Tensor(np.asarray(x, dtype=next(iter(self.params.values())).dtype))
        frames = split_frames(xt, self.cfg.frames_in)
        return quality_scores(frames, self._frozen()).scores.data

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        check_compatible(arrays, self.cfg)
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=t.dtype)
            t.zero_grad()

    @classmethod
    def from_checkpoint(cls, ckpt, dtype=np.float32):
        model = cls(ckpt.config, seed=0, dtype=dtype)
        model.load_state_dict(ckpt.params)
        return model


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: RestorerConfig
    step: int = 0
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # e.g. optimizer moments


def check_compatible(arrays, cfg):
    """Raise CompatibilityError naming the first parameter that disagrees with ``cfg``."""
    expected = dict(parameter_shapes(cfg))
    for name, arr in arrays.items():
        if name not in expected:
            raise CompatibilityError(f"parameter {name!r} is not part of this configuration")
        if tuple(np.shape(arr)) != tuple(expected[name]):
            raise CompatibilityError(
                f"parameter {name!r} has shape {tuple(np.shape(arr))}, "
                f"configuration expects {tuple(expected[name])}"
            )
    for name in expected:
        if name not in arrays:
            raise CompatibilityError(f"parameter {name!r} missing from checkpoint")


def _record(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model, step=0, meta=None, extra=None):
    """Write parameters (and optional extra arrays) as a binary ATMR file."""
    path = Path(path)
    records = [(k, v.data) for k, v in model.params.items()]
    records += [(k, v) for k, v in (extra or {}).items()]
    header = {
        "config": model.cfg.to_dict(),
        "step": int(step),
        "meta": meta or {},
        "n_params": len(model.params),
        "n_records": len(records),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for name, arr in records:
            fh.write(_record(name, arr))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path, expected=None):
    """Parse an ATMR file; nothing is mutated if parsing or validation fails."""
    data = Path(path).read_bytes()
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(rd.take(rd.u32()).decode("utf-8"))
        cfg = RestorerConfig(**header["config"])
        n_params, n_records = int(header["n_params"]), int(header["n_records"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc

    arrays = {}
    for _ in range(n_records):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        shape = rd.u32(rank) if rank > 1 else ((rd.u32(),) if rank == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        if name in arrays:
            raise FormatError(f"{path}: duplicate record {name!r}")
        arrays[name] = arr.astype(np.float32)
    if rd.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last record")

    names = list(arrays)
    params = {k: arrays[k] for k in names[:n_params]}
    extra = {k: arrays[k] for k in names[n_params:]}
    check_compatible(params, expected if expected is not None else cfg)
    return Checkpoint(params=params, config=cfg, step=int(header["step"]),
                      meta=header.get("meta", {}), extra=extra)
