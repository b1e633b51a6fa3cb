"""Command-line entry points tying the pipeline together.

Results go to stdout, diagnostics to stderr; every command exits nonzero on
validation failure and accepts --seed wherever randomness is involved.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data
from .arena import (OracleJudge, PixelJudge, arena_run, block_semantics_table,
                    format_ranking, format_table, probe_run, proxy_maps,
                    rank_signals)
from .checkpoint import (load_checkpoint, pack_extractor, pack_model,
                         save_checkpoint, unpack_extractor, unpack_model)
from .config import (default_config, load_config, render_config,
                     to_unet_config, validate_config)
from .csm import gate_ratio_report
from .diffusion import UNet
from .metrics import psnr_y, ssim_y
from .ppm import read_ppm, write_ppm
from .signals import (STRATEGY, TASKS, Extractor, embedding_cosine, extract,
                      finetune, signal_target, train_teacher)
from .tensor import Rng, Tensor


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _positive_int(raw: str) -> int:
    val = int(raw)
    if val < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {val}")
    return val


def _load_scenes(path) -> list[data.ScenePair]:
    scenes = data.load_corpus(path)
    if not scenes:
        raise ValueError(f"corpus at {path} is empty")
    return scenes


def _check_corpus_matches(scenes, cfg) -> None:
    hr = scenes[0].hr
    if hr.shape[1] != cfg.data.size:
        raise ValueError(f"corpus scenes are {hr.shape[1]}px, config expects "
                         f"{cfg.data.size}px")
    if scenes[0].signals.seg.shape[0] != cfg.data.seg_classes:
        raise ValueError(
            f"corpus has {scenes[0].signals.seg.shape[0]} segment planes, "
            f"config expects {cfg.data.seg_classes}")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.scale != data.SCALE:
        raise ValueError(f"only {data.SCALE}x degradation is supported")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"{out} is not empty; pass --force to write anyway")
    data.write_corpus(out, args.count, args.seed, size=args.size,
                      seg_classes=args.seg_classes)
    print(f"wrote {args.count} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _build_embedder(cfg, seed: int, path: str | None) -> Extractor:
    if path is None:
        return Extractor("embed", Rng(seed).spawn(777),
                         seg_classes=cfg.data.seg_classes,
                         embed_dim=cfg.model.raw_embed_dim)
    ext = unpack_extractor(load_checkpoint(path))
    if ext.task != "embed":
        raise ValueError(f"--embedder must hold an embed extractor, got {ext.task!r}")
    if ext.embed_dim != cfg.model.raw_embed_dim:
        raise ValueError(f"embedder dim {ext.embed_dim} does not match "
                         f"raw_embed_dim {cfg.model.raw_embed_dim}")
    return ext


def _lr_at(step: int, base: float) -> float:
    """Constant lr with a late exponential taper (10x down per 2000 steps).

    A pure function of the step index so resumed runs stay bit-exact.
    """
    if step < 3000:
        return base
    return base * 10.0 ** (-(step - 3000) / 2000.0)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    validate_config(cfg)
    scenes = _load_scenes(args.data)
    _check_corpus_matches(scenes, cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = render_config(cfg)
    (out / "config.ini").write_text(resolved)
    _log(resolved.rstrip())

    if args.resume:
        model = unpack_model(load_checkpoint(args.resume))
        if model.cfg != to_unet_config(cfg):
            raise ValueError("checkpoint architecture does not match the config")
    else:
        model = UNet(to_unet_config(cfg), Rng(cfg.train.seed).spawn(1))
        if model.cfg.conditioning == "full":
            model.set_embedder(_build_embedder(cfg, cfg.train.seed, args.embedder))
    model.opt.lr = cfg.train.lr

    start = model.opt.t
    total = cfg.train.steps
    if start >= total:
        raise ValueError(f"checkpoint already trained {start} steps, "
                         f"config asks for {total}")
    root = Rng(cfg.train.seed)
    n = len(scenes)
    batch_size = min(cfg.train.batch_size, n)
    t0 = time.time()
    loss = float("nan")
    mode = "a" if args.resume else "w"
    ckpt_path = out / "checkpoint.mgsr"
    with open(out / "loss.log", mode, encoding="utf-8") as log:
        for step in range(start, total):
            model.opt.lr = _lr_at(step, cfg.train.lr)
            idx = root.spawn(2 * step).integers(0, n, batch_size)
            loss = model.train_step([scenes[int(j)] for j in idx],
                                    root.spawn(2 * step + 1))
            log.write(f"step {step} loss {loss:.6f}\n")
            if step % cfg.train.log_every == 0 or step == total - 1:
                _log(f"step {step} loss {loss:.4f} ({time.time() - t0:.0f}s)")
    save_checkpoint(ckpt_path, pack_model(model))
    print(f"trained {total - start} steps (total {total}); "
          f"final loss {loss:.6f}; checkpoint {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# train-extractor
# ---------------------------------------------------------------------------

def _map_mse(ext: Extractor, scenes, task: str) -> float:
    """Mean MSE of the extractor's map on upsampled degraded inputs."""
    total = 0.0
    for s in scenes:
        up = data.bicubic_upsample(s.lr.astype(np.float32), data.SCALE)
        _, sig = ext.forward(Tensor(up[None], requires_grad=False))
        total += float(np.mean((sig.data[0] - signal_target(task, s)) ** 2))
    return total / len(scenes)


def cmd_train_extractor(args) -> int:
    scenes = _load_scenes(args.data)
    strategy = args.strategy or STRATEGY[args.task]
    _log(f"teacher: {args.teacher_steps} steps on {len(scenes)} clean scenes")
    teacher = train_teacher(args.task, scenes, args.teacher_steps,
                            Rng(args.seed).spawn(1), width=args.width,
                            seg_classes=scenes[0].signals.seg.shape[0],
                            embed_dim=args.embed_dim)
    _log(f"alignment: {args.steps} steps, strategy {strategy}")
    student = finetune(args.task, teacher, scenes, args.steps,
                       Rng(args.seed).spawn(2), strategy=args.strategy,
                       rank=args.rank)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, pack_extractor(student))
    if args.task in ("edge", "depth", "seg"):
        before = _map_mse(teacher, scenes, args.task)
        after = _map_mse(student, scenes, args.task)
        gain = 100.0 * (before - after) / before if before else 0.0
        print(f"{args.task} extractor ({strategy}) saved to {out}; "
              f"degraded-input map MSE {before:.5f} -> {after:.5f} "
              f"({gain:+.1f}%)")
    else:
        cos_t = cos_s = 0.0
        for s in scenes:
            up = data.bicubic_upsample(s.lr.astype(np.float32), data.SCALE)
            cos_t += embedding_cosine(extract(teacher, up), extract(teacher, s.hr))
            cos_s += embedding_cosine(extract(student, up), extract(student, s.hr))
        print(f"embed extractor ({strategy}) saved to {out}; mean LR-HR "
              f"cosine {cos_t / len(scenes):.4f} -> {cos_s / len(scenes):.4f}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _neutral_signals(size: int, seg_classes: int) -> data.GuidanceSignals:
    """Uninformative guidance for raw images with no ground-truth maps."""
    flat = np.zeros((1, size, size), dtype=np.float32)
    return data.GuidanceSignals(
        hed=flat,
        depth=np.full((1, size, size), 0.5, dtype=np.float32),
        seg=np.full((seg_classes, size, size), 1.0 / seg_classes, dtype=np.float32))


def _scene_tags_from_manifest(path: Path) -> list[str]:
    manifest = path.parent / "manifest.txt"
    if not manifest.exists():
        return []
    for line in manifest.read_text().splitlines():
        parts = line.split()
        if parts and parts[0] == path.name:
            for part in parts[1:]:
                if part.startswith("tags="):
                    return [t for t in part[5:].split(",") if t]
    return []


def cmd_infer(args) -> int:
    model = unpack_model(load_checkpoint(args.model))
    cfg = model.cfg
    if args.lr_image:
        lr = read_ppm(args.lr_image)
        tags: list[str] = []
        signals = _neutral_signals(cfg.size, cfg.seg_classes)
    else:
        path = Path(args.scene)
        scene = data.scene_from_bytes(path.read_bytes(),
                                      tags=_scene_tags_from_manifest(path))
        lr, tags, signals = scene.lr, scene.tags, scene.signals
    lr_side = cfg.size // cfg.scale
    if lr.shape != (3, lr_side, lr_side):
        raise ValueError(f"model wants a (3, {lr_side}, {lr_side}) input, "
                         f"got {lr.shape}")
    sr = model.sample(lr, steps=args.steps, rng=Rng(args.seed), eta=args.eta,
                      tags=tags or None,
                      signals=signals if cfg.conditioning == "full" else None)
    write_ppm(args.out, sr)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = unpack_model(load_checkpoint(args.model))
    scenes = _load_scenes(args.data)
    rows = []
    for i, s in enumerate(scenes):
        sr = model.sample(
            s.lr, steps=args.steps, rng=Rng(args.seed).spawn(i), eta=args.eta,
            tags=s.tags or None,
            signals=s.signals if model.cfg.conditioning == "full" else None)
        up = np.clip(data.bicubic_upsample(s.lr.astype(np.float32), model.cfg.scale),
                     0.0, 1.0)
        rows.append((i, psnr_y(sr, s.hr), psnr_y(up, s.hr),
                     ssim_y(sr, s.hr), ssim_y(up, s.hr)))
        _log(f"scene {i}: psnr {rows[-1][1]:.2f} vs bicubic {rows[-1][2]:.2f}")
    head = f"{'scene':<7}{'psnr_sr':>9}{'psnr_bic':>10}{'ssim_sr':>9}{'ssim_bic':>10}"
    lines = [head]
    for i, p_sr, p_bic, s_sr, s_bic in rows:
        lines.append(f"{i:<7}{p_sr:>9.3f}{p_bic:>10.3f}{s_sr:>9.4f}{s_bic:>10.4f}")
    mp_sr, mp_bic, ms_sr, ms_bic = (float(np.mean([r[k] for r in rows]))
                                    for k in (1, 2, 3, 4))
    lines.append(f"{'mean':<7}{mp_sr:>9.3f}{mp_bic:>10.3f}{ms_sr:>9.4f}{ms_bic:>10.4f}")
    lines.append(f"psnr delta over bicubic: {mp_sr - mp_bic:+.3f} dB")
    print("\n".join(lines))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("scene,psnr_sr,psnr_bicubic,ssim_sr,ssim_bicubic\n")
            for i, p_sr, p_bic, s_sr, s_bic in rows:
                fh.write(f"{i},{p_sr:.6f},{p_bic:.6f},{s_sr:.6f},{s_bic:.6f}\n")
    return 0


# ---------------------------------------------------------------------------
# analytics commands
# ---------------------------------------------------------------------------

def cmd_rank_signals(args) -> int:
    model = unpack_model(load_checkpoint(args.model))
    if model.cfg.conditioning != "full":
        raise ValueError("signal ranking needs a conditioned model")
    scenes = _load_scenes(args.data)
    judge = (OracleJudge(proxy_maps(model.cfg.seg_classes))
             if args.judge == "oracle" else PixelJudge())
    matrix = arena_run(["hed", "depth", "seg"], scenes, judge, model,
                       steps=args.steps, eta=args.eta)
    print(format_ranking(rank_signals(matrix)), end="")
    if args.csv:
        Path(args.csv).write_text(matrix.to_text())
    return 0


def cmd_probe_blocks(args) -> int:
    model = unpack_model(load_checkpoint(args.model))
    if model.cfg.conditioning != "full":
        raise ValueError("block probing needs a conditioned model")
    scenes = _load_scenes(args.data)
    p1, p2 = args.p1.split(), args.p2.split()
    judgements = probe_run(model, scenes, p1, p2, steps=args.steps)
    print(f"P1: {' '.join(p1)}   P2: {' '.join(p2)}")
    print(format_table(block_semantics_table(judgements)), end="")
    return 0


def cmd_gate_report(args) -> int:
    model = unpack_model(load_checkpoint(args.model))
    print(f"{'index':<7}{'block':<8}{'width':>7}{'mean_abs_gate':>15}")
    for idx, name, width, ratio in gate_ratio_report(model):
        print(f"{idx:<7}{name:<8}{width:>7}{ratio:>15.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgsr",
                                description="toy guided super-resolution workbench")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a deterministic scene corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_positive_int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scale", type=int, default=data.SCALE)
    g.add_argument("--size", type=_positive_int, default=64)
    g.add_argument("--seg-classes", type=_positive_int, default=6)
    g.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the super-resolver")
    t.add_argument("--config", help="INI file; defaults apply when omitted")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--steps", type=_positive_int, help="override [train] steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--embedder", help="extractor checkpoint for image prompts")
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("train-extractor", help="teacher + prior-guided alignment")
    x.add_argument("--task", required=True, choices=TASKS)
    x.add_argument("--strategy", choices=("full", "lowrank"))
    x.add_argument("--rank", type=_positive_int, default=8)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--teacher-steps", type=_positive_int, default=800)
    x.add_argument("--steps", type=_positive_int, default=300)
    x.add_argument("--width", type=_positive_int, default=32)
    x.add_argument("--embed-dim", type=_positive_int, default=32)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_train_extractor)

    i = sub.add_parser("infer", help="super-resolve one input")
    i.add_argument("--model", required=True)
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--lr-image", help="PPM image (neutral guidance)")
    src.add_argument("--scene", help="scene record with ground-truth guidance")
    i.add_argument("--steps", type=_positive_int, default=50)
    i.add_argument("--eta", type=float, default=0.0)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM against the bicubic baseline")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--steps", type=_positive_int, default=50)
    e.add_argument("--eta", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv", help="also write rows as CSV")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rank-signals", help="pairwise guidance tournament")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--steps", type=_positive_int, default=8)
    r.add_argument("--eta", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--judge", choices=("oracle", "pixel"), default="oracle")
    r.add_argument("--csv", help="also write the win matrix")
    r.set_defaults(func=cmd_rank_signals)

    b = sub.add_parser("probe-blocks", help="wide/narrow prompt routing table")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--p1", default="red disc")
    b.add_argument("--p2", default="blue box")
    b.add_argument("--steps", type=_positive_int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_probe_blocks)

    gr = sub.add_parser("gate-report", help="per-block gate magnitude table")
    gr.add_argument("--model", required=True)
    gr.set_defaults(func=cmd_gate_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
