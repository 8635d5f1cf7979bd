"""Command line: gen-data, pretrain-codec, train, infer, eval, export-pointcloud.

Every command writes ``run_manifest.json`` next to its outputs. Exit codes:
0 success, 2 configuration or input validation error, 3 non-finite loss.
Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as Mx
from . import world as W
from .checkpoint import CheckpointError
from .codec import Codec, codec_training_frames, pretrain_codec
from .config import ACTIONS, Config, ConfigError, CodecConfig
from .netpbm import read_pgm16, read_ppm
from .rng import stream
from .rollout import evaluate, forecast
from .trainer import NonFiniteLoss, Trainer, load_codec, load_model, save_codec

log = logging.getLogger("worldmodel4d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir: Path, command: str, cfg: Config | None, seed: int | None,
                   outputs: list, started: float, extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config_hash": cfg.hash() if cfg is not None else None,
        "seed": seed,
        "git_describe": git_describe(),
        "outputs": sorted(str(p) for p in outputs),
        "timings": {"wall_clock_s": round(time.perf_counter() - started, 3),
                    "finished_unix": round(time.time(), 3)},
    }
    if extra:
        doc.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_config(path: str | None) -> Config:
    return Config() if path is None else Config.load(path)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = cfg.world.seed if args.seed is None else args.seed
    out = Path(args.out)
    manifest = W.write_dataset(out, cfg.world, count=args.count, seed=seed)
    outputs = [out / "manifest.json"] + [out / e["dir"] for e in manifest["sequences"]]
    write_manifest(out, "gen-data", cfg, seed, outputs, started)
    return EXIT_OK


def _split_frames(data: Path):
    train = W.load_dataset(data, "train")
    val = W.load_dataset(data, "val")
    if not train:
        raise UsageError(f"dataset {data} has no training sequences")
    return train, val


def cmd_pretrain_codec(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    seed = cfg.codec.seed if args.seed is None else args.seed
    cfg = replace(cfg, codec=replace(cfg.codec, seed=seed, steps=args.steps or cfg.codec.steps))
    train, val = _split_frames(Path(args.data))
    rgb, dep = codec_training_frames(train)
    frames = np.concatenate([rgb, dep])
    if val:
        vr, vd = codec_training_frames(val)
        heldout = np.concatenate([vr, vd])
    else:
        heldout = frames[-max(1, len(frames) // 10):]
    codec = Codec(cfg.codec, stream(seed, "codec-init"))
    history = pretrain_codec(codec, frames, heldout, cfg.codec.steps, stream(seed, "codec-data"),
                             lr=cfg.codec.lr, batch=cfg.codec.batch, eval_every=cfg.codec.eval_every)
    out = Path(args.out)
    save_codec(out, codec, cfg, history)
    write_manifest(out.parent, "pretrain-codec", cfg, seed, [out], started,
                   {"heldout_mse": [[s, v] for s, v in history]})
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = load_config(args.config)
    codec, codec_cfg = load_codec(args.codec)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    # the model's latent width must follow the codec that produced the latents
    cfg = replace(cfg, codec=codec_cfg.codec, train=replace(cfg.train, **overrides))
    cfg.validate()
    train, _ = _split_frames(Path(args.data))
    _check_frame_size(cfg, train[0].rgb.shape[-2:], f"dataset {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    trainer = Trainer(cfg, codec, train)
    trainer.run(cfg.train.steps, log_path=log_path, ckpt_dir=out, ckpt_every=cfg.train.ckpt_every)
    final = trainer.save(out / "final.uf4d")
    outputs = sorted(out.glob("*.uf4d")) + [log_path, out / "config.json"]
    write_manifest(out, "train", cfg, cfg.train.seed, outputs, started, {"final_checkpoint": str(final)})
    return EXIT_OK


def _check_frame_size(cfg: Config, hw, what: str) -> None:
    if tuple(hw) != (cfg.world.height, cfg.world.width):
        raise UsageError(f"{what} has frame size {hw[0]}x{hw[1]} but the checkpoint config expects "
                         f"{cfg.world.height}x{cfg.world.width}")


def to_metric(depth_norm: np.ndarray, depth_range) -> np.ndarray:
    lo, hi = depth_range
    return lo + np.clip(depth_norm, 0.0, 1.0) * (hi - lo)


def cmd_infer(args) -> int:
    started = time.perf_counter()
    lm = load_model(args.ckpt, use_ema=args.ema)
    cfg = lm.cfg
    rgb0 = read_ppm(args.frame)
    _check_frame_size(cfg, rgb0.shape[-2:], f"frame {args.frame}")
    M = args.frames or cfg.world.frames
    fc = forecast(cfg, lm.model, lm.codec, rgb0, args.action, args.seed, frames=M,
                  guidance_scale=args.guidance, trained_with_dropout=lm.meta.get("action_dropout", 0) > 0)
    out = Path(args.out)
    rgb = np.clip(fc.rgb[1:], 0.0, 1.0)
    depth = to_metric(fc.depth[1:], lm.meta["depth_range"])
    K = W.intrinsics_from(cfg.world)
    W.write_frames(out, rgb, depth, {"action": args.action, "seed": args.seed,
                                     "depth_range": lm.meta["depth_range"]}, first_index=1)
    (out / "intrinsics.json").write_text(json.dumps(K.to_dict(), indent=2, sort_keys=True))
    outputs = sorted(out.glob("rgb_*.ppm")) + sorted(out.glob("depth_*.pgm")) + [out / "depth.json", out / "intrinsics.json"]
    if args.ply:
        clouds = [Mx.backproject(depth[m, 0], rgb[m], K, frame_index=m + 1) for m in range(M - 1)]
        outputs += Mx.export_ply(Mx.PointCloud.merge(clouds), out / "scene.ply")
    write_manifest(out, "infer", cfg, args.seed, outputs, started, {"warnings": fc.warnings})
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    lm = load_model(args.ckpt, use_ema=args.ema)
    data = Path(args.data)
    seqs = W.load_dataset(data, "val") or W.load_dataset(data)
    if args.limit:
        seqs = seqs[:args.limit]
    _check_frame_size(lm.cfg, seqs[0].rgb.shape[-2:], f"dataset {data}")
    report = evaluate(lm.cfg, lm.model, lm.codec, seqs, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    write_manifest(out.parent, "eval", lm.cfg, args.seed, [out], started)
    return EXIT_OK


def _indexed(directory: Path, pattern: str) -> dict[int, Path]:
    return {int(p.stem.split("_")[-1]): p for p in directory.glob(pattern)}


def cmd_export_pointcloud(args) -> int:
    started = time.perf_counter()
    rgb_dir, depth_dir = Path(args.rgb), Path(args.depth)
    K = Mx.Intrinsics.from_dict(json.loads(Path(args.intrinsics).read_text()))
    sidecar = json.loads((depth_dir / "depth.json").read_text())
    rgbs, depths = _indexed(rgb_dir, "rgb_*.ppm"), _indexed(depth_dir, "depth_*.pgm")
    frames = [m for m in sidecar["frames"] if m in depths]
    if not frames:
        raise UsageError(f"no depth frames found in {depth_dir}")
    clouds = []
    for m in frames:
        depth = W.dequantize_depth(read_pgm16(depths[m]), sidecar["min"], sidecar["max"])
        rgb = read_ppm(rgbs[m]) if m in rgbs else None
        if rgb is not None and rgb.shape[-2:] != depth.shape:
            raise UsageError(f"frame {m}: rgb {rgb.shape[-2:]} and depth {depth.shape} differ in size")
        clouds.append(Mx.backproject(depth, rgb, K, frame_index=m))
    out = Path(args.out)
    written = Mx.export_ply(Mx.PointCloud.merge(clouds), out)
    write_manifest(out.parent, "export-pointcloud", None, None, written, started)
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="worldmodel4d", description="Joint RGB + depth video world model on a synthetic driving world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("pretrain-codec", help="fit the shared image/depth codec")
    c.add_argument("--config")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--steps", type=int)
    c.set_defaults(func=cmd_pretrain_codec)

    t = sub.add_parser("train", help="train the world model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--codec", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="forecast future RGB + depth from one frame")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--frame", required=True)
    i.add_argument("--action", required=True, choices=ACTIONS)
    i.add_argument("--frames", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--ply", action="store_true")
    i.add_argument("--ema", action="store_true", help="use the averaged weights")
    i.add_argument("--guidance", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="depth metrics and Frechet feature distance on held-out sequences")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)
    e.add_argument("--ema", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-pointcloud", help="back-project RGB + depth frames to PLY")
    x.add_argument("--rgb", required=True)
    x.add_argument("--depth", required=True)
    x.add_argument("--intrinsics", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_pointcloud)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        return _fail(EXIT_NUMERIC, "non_finite_loss", str(exc), step=exc.step,
                     diagnostic=str(exc.path) if exc.path else None)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
