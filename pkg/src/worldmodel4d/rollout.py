"""Sampling a 4D forecast from one frame, and evaluating forecasts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as D
from . import metrics as Mx
from . import tensor as T
from .codec import Codec
from .config import Config
from .mli import assemble
from .tensor import Tensor
from .world import SceneSequence


@dataclass
class Forecast:
    rgb: np.ndarray          # [M, 3, H, W]; frame 0 is the decoded condition
    depth: np.ndarray        # [M, 1, H, W] normalized depth from the depth latent
    z_x: np.ndarray
    z_d: np.ndarray | None
    warnings: list[str]


def make_denoiser(cfg: Config, model, use_mli: bool = True) -> D.Denoiser:
    sched = D.NoiseSchedule.from_config(cfg.diffusion)
    every = cfg.train.mli.outside_every_step

    def fn(x, t, action, final):
        with T.no_grad():
            vol = Tensor(x)
            if not use_mli:
                eps, _ = model.unet(vol, t, action)
                return eps.data, None
            out = assemble(vol, t, action, model.unet, model.head, float(sched.alpha_bar[t]),
                           apply_outside=final or every)
            return out.eps.data, out.z_d.data

    return fn


def forecast(cfg: Config, model, codec: Codec, rgb0: np.ndarray, action: str, seed: int,
             frames: int | None = None, guidance_scale: float | None = None, steps: int | None = None,
             use_mli: bool = True, trained_with_dropout: bool = True) -> Forecast:
    M = frames or cfg.world.frames
    with T.no_grad():
        cond = codec.encode_image(np.asarray(rgb0, dtype=np.float64)).z.data[0]
    vol = D.build_inference_volume(cond, M, seed)
    sched = D.NoiseSchedule.from_config(cfg.diffusion)
    scale = cfg.diffusion.guidance_scale if guidance_scale is None else guidance_scale
    ro = D.denoise_loop(vol, make_denoiser(cfg, model, use_mli), action, scale,
                        steps or cfg.diffusion.sample_steps, sched, trained_with_dropout)
    with T.no_grad():
        rgb = codec.decode_image(Tensor(ro.z_x)).data
        depth = codec.decode_depth(Tensor(ro.z_d)).data if ro.z_d is not None else None
    return Forecast(rgb, depth, ro.z_x, ro.z_d, ro.warnings)


def codec_features(codec: Codec, images: np.ndarray) -> np.ndarray:
    """Fixed feature embedding: encoder latents mean-pooled to a 2x2 grid, flattened."""
    with T.no_grad():
        z = codec.encode(Tensor(np.asarray(images, dtype=np.float64))).data
    n, c, h, w = z.shape
    pooled = z.reshape(n, c, 2, h // 2, 2, w // 2).mean(axis=(3, 5))
    return pooled.reshape(n, -1)


def evaluate(cfg: Config, model, codec: Codec, sequences: list[SceneSequence], seed: int = 0,
             use_mli: bool = True) -> dict:
    """Depth metrics per future-frame index and a Frechet feature distance.

    Each held-out sequence is rolled out from its first frame under its own
    action. Predicted depth is affinely aligned to the analytic depth over
    non-sky pixels before AbsRel and delta_k are computed.
    """
    M = cfg.world.frames
    per_frame = {k: [[] for _ in range(M - 1)] for k in ("absrel", "delta1", "delta2", "delta3")}
    generated, real = [], []
    for i, seq in enumerate(sequences):
        fc = forecast(cfg, model, codec, seq.rgb[0], seq.action, seed + i, frames=M, use_mli=use_mli)
        generated.append(np.clip(fc.rgb[1:], 0.0, 1.0))
        real.append(seq.rgb[1:])
        if fc.depth is None:
            continue
        for m in range(1, M):
            gt = seq.depth[m, 0]
            dm = Mx.depth_metrics(fc.depth[m, 0], gt, np.isfinite(gt))
            for k in per_frame:
                per_frame[k][m - 1].append(dm[k])
    report = {"sequences": len(sequences), "frames": M, "per_frame": {}, "mean": {}}
    for k, rows in per_frame.items():
        if rows and rows[0]:
            vals = [float(np.mean(r)) for r in rows]
            report["per_frame"][k] = vals
            report["mean"][k] = float(np.mean(vals))
    gen = np.concatenate(generated)
    ref = np.concatenate(real)
    report["frechet"] = Mx.frechet_feature_distance(gen, ref, lambda x: codec_features(codec, x))
    return report
