"""Command-line entry point: ``turbmit synth|train|restore|eval|ablate``.

Exit codes: 0 success, 1 other input error, 2 config schema violation,
3 unwritable output, 4 training divergence, 5 frame shortage, 6 image size
mismatch. Failures also print one JSON object to stderr.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .datagen import DatasetManifest, build_dataset, build_entry, list_images
from .errors import (
    CompatibilityError, ConfigError, DimensionError, DivergenceError, FormatError,
    FrameShortageError, TurbmitError,
)
from .metrics import psnr, ssim
from .model import Restorer, draw_subset, load_checkpoint, save_checkpoint
from .pipeline import (
    AdamState, evaluate, mean_frame, restore_sequence, train,
    write_loss_csv,
)
from .turbsim import load_sequence
from .utils import derive_seed, read_png, write_png

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_UNWRITABLE = 3
EXIT_DIVERGED = 4
EXIT_FRAMES = 5
EXIT_SIZE = 6

# Reference accuracies (%) for the six ablation rows, kept for comparison only.
REFERENCE_ACCURACY = (35.0, 53.3, 84.6, 73.3, 86.0, 93.3)

SETTING_COLUMNS = ("pretraining", "fine-tuning", "small patches", "rotation", "multiple inferences")

# (label, pretraining, fine-tuning, small patches, rotation, multiple inferences)
ABLATION_ROWS = (
    ("mean-frame baseline", True, False, False, False, False),
    ("restorer", True, False, False, False, False),
    ("restorer", True, True, True, False, False),
    ("restorer", True, True, False, True, False),
    ("restorer", True, True, True, True, False),
    ("restorer", True, True, True, True, True),
)


class CliError(Exception):
    def __init__(self, code, kind, message, **context):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.context = context


def _ensure_writable(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_UNWRITABLE, "unwritable", f"cannot write to {path}: {exc.strerror}",
                       path=str(path))
    return path


def _run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _sim_parts(cfg):
    return cfg.turbsim.sim, cfg.turbsim.ranges.as_dict()


def _load_split(manifest, split):
    seqs = []
    for entry in manifest.select(split=split):
        seq = load_sequence(manifest.sequence_dir(entry))
        seq.frames = seq.frames.astype(np.float32)
        seqs.append(seq)
    return seqs


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    cfg = _run_config(args)
    out = _ensure_writable(args.out)
    scene_dir = args.scene_dir or cfg.scene_dir
    sim, ranges = _sim_parts(cfg)
    try:
        manifest = build_dataset(cfg.datagen, scene_dir, out, cfg.seed, sim, ranges)
    except PermissionError as exc:
        raise CliError(EXIT_UNWRITABLE, "unwritable", str(exc), path=str(out))
    counts = manifest.counts()
    clean = sum(v for (_, d), v in counts.items() if d == "clean")
    scene = sum(v for (_, d), v in counts.items() if d == "scene")
    print(f"wrote {len(manifest.entries)} sequences to {out}")
    for split in ("pretrain", "finetune"):
        for domain in ("clean", "scene"):
            print(f"  {split:8s} {domain:5s} {counts.get((split, domain), 0)}")
    pre = sum(v for (sp, _), v in counts.items() if sp == "pretrain")
    print(f"pretrain/finetune: {pre}/{len(manifest.entries) - pre}")
    print(f"clean/scene: {clean}/{scene}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _read_loss_rows(path, before_step):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["step"]), float(r["lr"]), float(r["loss"]))
                for r in reader if int(r["step"]) < before_step]


def run_training(cfg, manifest, out, resume=None, max_steps=None):
    """Pretrain then finetune; returns the final checkpoint path."""
    model = Restorer(cfg.model, seed=derive_seed(cfg.seed, "init"))
    phases = [("pretrain", cfg.train.epochs_pretrain), ("finetune", cfg.train.epochs_finetune)]
    ckpt_path = out / "model.ckpt"
    loss_path = out / "loss.csv"

    start_phase, start_step, state, global_step = 0, 0, None, 0
    if resume is not None:
        ck = load_checkpoint(resume, expected=cfg.model)
        model.load_state_dict(ck.params)
        meta = ck.meta
        global_step = ck.step
        names = [p for p, _ in phases]
        start_phase = names.index(meta.get("phase", "pretrain"))
        start_step = int(meta.get("phase_step", 0))
        if meta.get("phase_complete"):
            start_phase, start_step = start_phase + 1, 0
        else:
            state = AdamState.from_arrays(ck.extra, int(meta.get("adam_t", 0)))
    rows = _read_loss_rows(loss_path, global_step) if resume is not None else []

    meta = {"phase": "pretrain", "phase_step": 0, "phase_complete": False, "adam_t": 0,
            "seed": cfg.seed}
    extra = {}
    if resume is not None:
        meta, extra = dict(ck.meta), dict(ck.extra)
    for i, (phase, epochs) in enumerate(phases):
        if i < start_phase:
            continue
        seqs = _load_split(manifest, phase) if epochs else []
        if not seqs:
            continue
        begin = start_step if i == start_phase else 0
        phase_state = state if i == start_phase else None
        total = cfg.train.steps_for(len(seqs), epochs)
        stop = None
        if max_steps is not None:
            stop = begin + max(0, max_steps - global_step)
        res = train(model, seqs, cfg.train, derive_seed(cfg.seed, phase), epochs=epochs,
                    state=phase_state, start_step=begin, log_rows=rows,
                    step_offset=global_step - begin, stop_step=stop)
        global_step += res.steps - begin
        done = res.steps >= total
        meta = {"phase": phase, "phase_step": res.steps, "phase_total": total,
                "phase_complete": done, "adam_t": res.state.t, "seed": cfg.seed}
        extra = {} if done else res.state.to_arrays()
        if not done:
            break
    save_checkpoint(ckpt_path, model, step=global_step, meta=meta, extra=extra)
    write_loss_csv(loss_path, rows)
    return ckpt_path, rows


def cmd_train(args):
    cfg = _run_config(args)
    out = _ensure_writable(args.out)
    manifest = DatasetManifest.load(args.dataset)
    ckpt, rows = run_training(cfg, manifest, out, resume=args.resume, max_steps=args.max_steps)
    if rows:
        print(f"trained {len(rows)} steps, loss {rows[0][2]:.4f} -> {rows[-1][2]:.4f}")
    else:
        print("no training steps run")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# restore


def _inference_config(cfg, args):
    inf = cfg.inference
    updates = {}
    for name in ("repeats", "window", "stride"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "rotation", None) is not None:
        updates["rotation_tta"] = args.rotation
    if getattr(args, "whole_image", False):
        updates["small_patches"] = False
    if getattr(args, "seed", None) is not None:
        updates["rng_seed"] = args.seed
    return replace(inf, **updates) if updates else inf


def cmd_restore(args):
    cfg = load_config(args.config)
    inf = _inference_config(cfg, args)
    out = _ensure_writable(args.out)
    ck = load_checkpoint(args.checkpoint)
    model = Restorer.from_checkpoint(ck)
    seq = load_sequence(args.input)
    if len(seq.frames) < model.cfg.frames_in:
        raise FrameShortageError(model.cfg.frames_in, len(seq.frames))
    inf = replace(inf, frames_in=model.cfg.frames_in)
    res = restore_sequence(model, seq, inf)
    path = write_png(out / "restored.png", res.image)
    if args.dump_repeats:
        for k, img in enumerate(res.repeats, 1):
            write_png(out / f"repeat_{k:02d}.png", img)
    print(f"restored {args.input} with {inf.repeats} repeat(s) -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _pairs(restored, gt, degraded):
    restored, gt = Path(restored), Path(gt)
    degraded = Path(degraded) if degraded else None
    if restored.is_file():
        g = gt / "gt.png" if gt.is_dir() else gt
        d = degraded
        if d is None and gt.is_dir() and (gt / "frame_000.png").exists():
            d = gt / "frame_000.png"
        return [(restored.stem, restored, g, d)]
    pairs = []
    for r in sorted(restored.glob("*.png")):
        g = gt / r.name
        if not g.exists():
            raise CliError(EXIT_INPUT, "missing", f"no ground truth for {r.name} in {gt}")
        d = degraded / r.name if degraded and (degraded / r.name).exists() else None
        pairs.append((r.stem, r, g, d))
    if not pairs:
        raise CliError(EXIT_INPUT, "missing", f"no PNG files in {restored}")
    return pairs


def panel(degraded, restored, gt, gutter=4, fill=1.0):
    """Side-by-side degraded | restored | gt image with ``gutter``-pixel separators."""
    h, w = gt.shape[:2]
    out = np.full((h, 3 * w + 2 * gutter, 3), fill)
    for i, img in enumerate((degraded, restored, gt)):
        x = i * (w + gutter)
        out[:, x : x + w] = img
    return out


def cmd_eval(args):
    out = _ensure_writable(args.out)
    rows = []
    for name, r, g, d in _pairs(args.restored, args.gt, args.degraded):
        rest, truth = read_png(r), read_png(g)
        if rest.shape != truth.shape:
            raise DimensionError(f"{name}: restored {rest.shape[:2]} vs gt {truth.shape[:2]}")
        rows.append((name, psnr(rest, truth), ssim(rest, truth)))
        if d is not None:
            deg = read_png(d)
            if deg.shape != truth.shape:
                raise DimensionError(f"{name}: degraded {deg.shape[:2]} vs gt {truth.shape[:2]}")
            write_png(out / f"panel_{name}.png", panel(deg, rest, truth, args.gutter))
    mean_psnr = sum(r[1] for r in rows) / len(rows)
    mean_ssim = sum(r[2] for r in rows) / len(rows)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "psnr", "ssim"])
        for name, p, s in rows:
            writer.writerow([name, repr(float(p)), repr(float(s))])
        writer.writerow(["mean", repr(float(mean_psnr)), repr(float(mean_ssim))])
    print(f"{len(rows)} image(s): mean PSNR {mean_psnr:.3f} dB, mean SSIM {mean_ssim:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def heldout_sequences(cfg, n, seed, scene_dir=None):
    """Fresh sequences that share no seeds with the training set."""
    sim, ranges = _sim_parts(cfg)
    scenes = list_images(scene_dir) if scene_dir else []
    seqs = []
    for i in range(n):
        seq = build_entry(i, "heldout", "clean", cfg.datagen, scenes, seed, sim, ranges)
        seq.frames = seq.frames.astype(np.float32)
        seqs.append(seq)
    return seqs


def _baseline_scores(seqs, inf):
    p, s = [], []
    for seq in seqs:
        idx = draw_subset(len(seq.frames), inf.frames_in, inf.rng_seed + 1)
        img = np.clip(mean_frame(type(seq)(frames=seq.frames[idx])), 0, 1)
        p.append(psnr(img, seq.gt))
        s.append(ssim(img, seq.gt))
    return float(np.mean(p)), float(np.mean(s))


def cmd_ablate(args):
    cfg = _run_config(args)
    out = _ensure_writable(args.out)
    manifest = DatasetManifest.load(args.dataset)
    abl = cfg.ablation
    t0 = time.time()
    heldout = heldout_sequences(cfg, abl.eval_sequences, abl.eval_seed)

    models = {}
    pre_cfg = replace(cfg, train=replace(cfg.train, epochs_finetune=0))
    pre_dir = _ensure_writable(out / "pretrain")
    ck, _ = run_training(pre_cfg, manifest, pre_dir)
    models["pretrain"] = Restorer.from_checkpoint(load_checkpoint(ck))
    if cfg.train.epochs_finetune and manifest.select(split="finetune"):
        full_dir = _ensure_writable(out / "finetune")
        ck, _ = run_training(cfg, manifest, full_dir, resume=pre_dir / "model.ckpt")
        models["finetune"] = Restorer.from_checkpoint(load_checkpoint(ck))

    base_inf = replace(cfg.inference, frames_in=cfg.model.frames_in)
    results = []
    for i, (label, pre, fine, small, rot, multi) in enumerate(ABLATION_ROWS):
        row = {"row": i + 1, "model": label, **dict(zip(SETTING_COLUMNS, (pre, fine, small, rot, multi)))}
        over_budget = abl.time_budget_s and time.time() - t0 > abl.time_budget_s
        key = "finetune" if fine else "pretrain"
        if i >= abl.max_rows or over_budget or key not in models:
            row.update(psnr="", ssim="", status="skipped")
        elif label == "mean-frame baseline":
            p, s = _baseline_scores(heldout, base_inf)
            row.update(psnr=p, ssim=s, status="ok")
        else:
            inf = replace(base_inf, small_patches=small, rotation_tta=rot,
                          repeats=base_inf.repeats if multi else 1)
            summary, _ = evaluate(models[key], heldout, inf)
            row.update(psnr=summary["psnr"], ssim=summary["ssim"], status="ok")
        row["reference_accuracy"] = REFERENCE_ACCURACY[i]
        results.append(row)

    header = ["row", "model", *SETTING_COLUMNS, "psnr", "ssim", "status", "reference_accuracy"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in results:
            writer.writerow({k: ("yes" if v is True else "no" if v is False else v)
                             for k, v in row.items()})

    sweep_model = models.get("finetune", models["pretrain"])
    sweep = sweep_repeats(sweep_model, heldout, base_inf, abl.repeats_sweep)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["repeats", "psnr", "ssim"])
        for k, p, s in sweep:
            writer.writerow([k, repr(p), repr(s)])
    for row in results:
        shown = f"{row['psnr']:.3f} dB" if row["status"] == "ok" else "skipped"
        print(f"row {row['row']}: {row['model']:20s} {shown}")
    return EXIT_OK


def sweep_repeats(model, seqs, inf, counts):
    """Mean PSNR/SSIM after k averaged repeats, for each k in ``counts``."""
    counts = sorted(set(counts))
    inf = replace(inf, repeats=max(counts))
    per_k = {k: ([], []) for k in counts}
    for seq in seqs:
        res = restore_sequence(model, seq, inf)
        for k in counts:
            img = np.clip(res.cumulative[k - 1], 0.0, 1.0)
            per_k[k][0].append(psnr(img, seq.gt))
            per_k[k][1].append(ssim(img, seq.gt))
    return [(k, float(np.mean(per_k[k][0])), float(np.mean(per_k[k][1]))) for k in counts]


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="turbmit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"turbmit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic turbulence dataset")
    common(p)
    p.add_argument("--scene-dir", help="directory of background scene images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain and finetune a restorer")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one sequence directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of frame_*.png files")
    p.add_argument("--repeats", type=int)
    p.add_argument("--rotation", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--whole-image", action="store_true", help="skip patch tiling")
    p.add_argument("--dump-repeats", action="store_true", help="also write each repeat")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="score restored images against ground truth")
    p.add_argument("--restored", required=True, help="PNG file or directory")
    p.add_argument("--gt", required=True, help="PNG file, sequence directory, or directory")
    p.add_argument("--degraded", help="degraded PNG (or directory) for the panel")
    p.add_argument("--gutter", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the trick ablation grid and repeat sweep")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(code, kind, message, **context):
    doc = {"error": kind, "exit_code": code, "message": message, **context}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.context)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "divergence", str(exc), step=exc.step, lr=exc.lr,
                     last_finite_loss=exc.last_finite_loss)
    except FrameShortageError as exc:
        return _fail(EXIT_FRAMES, "frame_shortage", str(exc), needed=exc.needed,
                     available=exc.available)
    except DimensionError as exc:
        return _fail(EXIT_SIZE, "size_mismatch", str(exc))
    except PermissionError as exc:
        return _fail(EXIT_UNWRITABLE, "unwritable", str(exc))
    except (FormatError, CompatibilityError, TurbmitError, FileNotFoundError) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
