"""Operator command line: synth, train, render, eval, serve."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import pipeline as pl
from .background import generate_background
from .bundle import (
    SceneBundle,
    init_primitives,
    load_bundle,
    save_depth,
    save_image,
    scene_bounds_of,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import psnr, ssim
from .model import FieldBundle, SceneModel
from .trainer import TrainConfig, TrainView, align_camera_poses, make_optimizer, train

log = logging.getLogger("dynsplat")
REPORT_VERSION = 1


def build_scene_model(bundle: SceneBundle, cfg: TrainConfig) -> SceneModel:
    """Initialize a model from a bundle: primitives, background, fields, graph codes."""
    single_seq = len(bundle.graph.sequences) == 1
    voxel = cfg.voxel_size if single_seq else cfg.voxel_size_multi
    static, objects = init_primitives(bundle, voxel, cfg.init_opacity)
    bounds = scene_bounds_of(static.means.astype(np.float64))
    center = bounds.mean(axis=0)
    scale = 0.5 * float(np.linalg.norm(bounds[1] - bounds[0]))

    cameras = []
    seen = set()
    for view in bundle.views:
        key = (view.sequence, view.camera, round(view.time, 6))
        if key in seen:
            continue
        seen.add(key)
        pose, intr, _ = bundle.graph.resolve_camera(view.sequence, view.camera, view.time)
        cameras.append((pose, intr))
    if cfg.background_points > 0:
        bg = generate_background(bounds, cameras, static.means.astype(np.float64),
                                 n_per_sphere=cfg.background_points)
        log.info("background: %d primitives survive the filters", len(bg))
        static = static.concat(bg)

    mcfg = cfg.model_config()
    rng = np.random.default_rng(cfg.seed)
    fields = FieldBundle.create(mcfg, single_seq, rng)
    for seq in bundle.graph.sequences.values():
        seq.appearance = (rng.standard_normal((mcfg.code_dim // 2, mcfg.gamma_dim)) * 0.01
                          ).astype(np.float32)
        seq.geometry_mod = (rng.standard_normal((mcfg.code_dim // 2, mcfg.gamma_dim)) * 0.01
                            ).astype(np.float32)
    model = SceneModel(
        config=mcfg, graph=bundle.graph, static=static, objects=objects, fields=fields,
        scene_center=center, scene_scale=scale, scene_bounds=bounds,
    )
    log.info("model: %d static (+bg) primitives, %d objects, scene scale %.2f m",
             len(static), len(objects), scale)
    return model


def load_views(bundle: SceneBundle, split: str, holdout_every: int):
    """Materialize TrainViews for a split: train, holdout, or all."""
    views = []
    for view in bundle.views:
        held_out = view.index % holdout_every == 0
        if split == "train" and held_out:
            continue
        if split == "holdout" and not held_out:
            continue
        img = bundle.load_view_image(view)
        depth, valid = bundle.load_view_depth(view)
        views.append(TrainView(view.sequence, view.camera, view.time, img, depth, valid,
                               name=view.image_path))
    return views


def cmd_synth(args):
    from .synthetic import make_synthetic_bundle
    meta = make_synthetic_bundle(args.out, seed=args.seed, frames=args.frames, size=args.size)
    log.info("wrote synthetic bundle to %s (%d frames x %d px)", args.out,
             meta["frames"], meta["size"])
    return 0


def cmd_train(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg.steps = args.steps
    if args.threads is not None:
        cfg.threads = args.threads
    bundle = load_bundle(args.bundle)
    model = build_scene_model(bundle, cfg)
    views = load_views(bundle, "train", cfg.holdout_every)
    log.info("training on %d views for %d steps", len(views), cfg.steps)
    out = train(model, views, cfg, log=log.info)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.4dgf"
    save_checkpoint(ckpt, model, out["optim"], cfg.to_text(), cfg.config_hash(),
                    step=cfg.steps)
    log.info("saved checkpoint %s (%.1f min)", ckpt, out["elapsed"] / 60)
    return 0


def _load_trajectory(path):
    with open(path) as fh:
        frames = json.load(fh)
    if isinstance(frames, dict):
        frames = frames["frames"]
    out = []
    for rec in frames:
        q = geo.quat_normalize(np.asarray(rec["quat"], dtype=np.float64))
        pose = geo.RigidTransform(geo.quat_to_rotmat(q), np.asarray(rec["pos"], float))
        out.append((float(rec["time"]), pose))
    return out


def cmd_render(args):
    model, _ = load_checkpoint(args.ckpt)
    s = args.seq or sorted(model.graph.sequences)[0]
    seq = model.graph.sequences[s]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.trajectory:
        cam = next(iter(seq.cameras.values()))
        frames = [(t, pose, cam.intrinsics) for t, pose in _load_trajectory(args.trajectory)]
    else:
        cam_id = args.camera or sorted(seq.cameras)[0]
        pose, intr, _ = model.graph.resolve_camera(s, cam_id, args.time)
        frames = [(args.time, pose, intr)]
    for i, (t, pose, intr) in enumerate(frames):
        buf, cache = pl.render_view(model, s, t, pose=pose, intr=intr, threads=args.threads)
        save_image(out / f"frame_{i:06d}.png", buf.color)
        save_depth(out / f"depth_{i:06d}.png", buf.depth)
        log.info("rendered frame %d (t=%.3f) in %.1f ms", i, t,
                 1000 * sum(cache["timings"].values()))
    return 0


def cmd_eval(args):
    model, extras = load_checkpoint(args.ckpt)
    bundle = load_bundle(args.bundle)
    cfg = TrainConfig.from_text(extras["train_config"]) if extras["train_config"] \
        else TrainConfig()
    if args.threads is not None:
        cfg.threads = args.threads
    views = load_views(bundle, args.split, cfg.holdout_every)
    if not views:
        log.error("no views in split %r", args.split)
        return 1
    if args.align_poses:
        log.info("aligning evaluation camera poses (%d views)", len(views))
        align_camera_poses(model, views, cfg, steps=args.align_steps, log=log.info)

    per_seq = {}
    stage_totals = {k: 0.0 for k in pl.STAGES}
    n = 0
    for view in views:
        buf, cache = pl.render_view(model, view.sequence, view.time, camera=view.camera,
                                    threads=cfg.threads)
        rec = per_seq.setdefault(view.sequence, {"psnr": [], "ssim": []})
        rec["psnr"].append(psnr(buf.color, view.image))
        rec["ssim"].append(ssim(buf.color, view.image))
        for k in pl.STAGES:
            stage_totals[k] += cache["timings"][k]
        n += 1

    sequences = {
        s: {"psnr": float(np.mean(v["psnr"])), "ssim": float(np.mean(v["ssim"])),
            "lpips": None, "n_views": len(v["psnr"])}
        for s, v in sorted(per_seq.items())
    }
    total_ms = 1000.0 * sum(stage_totals.values()) / n
    timing = {k: 1000.0 * v / n for k, v in stage_totals.items()}
    report = {
        "report_version": REPORT_VERSION,
        "config_hash": extras.get("config_hash"),
        "split": args.split,
        "sequences": sequences,
        "mean": {
            "psnr": float(np.mean([v["psnr"] for v in sequences.values()])),
            "ssim": float(np.mean([v["ssim"] for v in sequences.values()])),
            "lpips": None,
        },
        "lpips_note": "unavailable: no pretrained perceptual network in this build",
        "timing_ms": {**timing, "total": total_ms},
        "fps": 1000.0 / total_ms if total_ms > 0 else 0.0,
        "primitives": model.total_primitives(),
    }
    stage_line = ", ".join(f"{k} {timing[k]:.1f}" for k in pl.STAGES)
    log.info("per-stage timing (ms/frame): %s; total %.1f (%.1f FPS)",
             stage_line, total_ms, report["fps"])
    for s, rec in sequences.items():
        log.info("%s: PSNR %.2f dB, SSIM %.4f (%d views, LPIPS unavailable)",
                 s, rec["psnr"], rec["ssim"], rec["n_views"])
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
        log.info("wrote report %s", args.out)
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
    return 0


def cmd_serve(args):
    from .viewer import ViewerServer
    model, _ = load_checkpoint(args.ckpt)
    server = ViewerServer(model, port=args.port, host=args.host, max_size=args.max_size,
                          threads=args.threads or 1, ui_dir=args.ui_dir)
    log.info("serving checkpoint %s on %s:%d", args.ckpt, args.host, args.port)
    server.serve_forever()
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="dynsplat",
        description="Dynamic urban scene reconstruction: synthesize data, train, "
                    "render, evaluate, and serve an interactive viewer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a procedural two-sequence scene bundle")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a model on a scene bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config", default=None, help="key = value training config file")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="override config steps")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", default=None)
    p.add_argument("--time", type=float, default=0.0, help="normalized time in [-1, 1]")
    p.add_argument("--camera", default=None)
    p.add_argument("--trajectory", default=None,
                   help="JSON list of {time, quat, pos} keyframe poses")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM report against a bundle split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=("train", "holdout", "all"), default="holdout")
    p.add_argument("--out", default=None, help="report JSON path (stdout otherwise)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--align-poses", action="store_true",
                   help="optimize evaluation camera poses before measuring")
    p.add_argument("--align-steps", type=int, default=200)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="interactive viewer service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-size", type=int, default=800)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--ui-dir", default=None, help="serve these static files over HTTP")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DYNSPLAT_LOG", "INFO").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s", exc)
        if os.environ.get("DYNSPLAT_LOG", "").upper() == "DEBUG":
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
