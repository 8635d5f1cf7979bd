"""Shared latent codec: one encoder and one decoder serve RGB frames and depth maps.

Depth enters the codec as a 3-channel image (the normalized map replicated
across channels) and leaves it as the channel mean of the decoded image, so
both modalities live in the same latent space.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import CodecConfig
from .optim import AdamW
from .tensor import Tensor

log = logging.getLogger(__name__)


class CodecShapeError(ValueError):
    pass


@dataclass
class LatentGrid:
    z: Tensor                      # [N, C, h, w], already divided by the codec's latent scale
    modality: str                  # "image" or "depth"
    depth_min: np.ndarray | None = None
    depth_max: np.ndarray | None = None
    degenerate: np.ndarray | None = None  # per frame: constant depth map fell back to 0.5

    @property
    def shape(self):
        return self.z.shape


def normalize_depth(depth: np.ndarray, valid: np.ndarray | None = None):
    """Per-frame min-max normalization of [N, 1, H, W] depth over valid pixels.

    Invalid pixels (sky) are placed at 1.0, the far end. A frame whose valid
    range is empty or zero becomes all-0.5 and is flagged.
    Returns (normalized, mins, maxs, degenerate_flags).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth)
    n = depth.shape[0]
    out = np.empty_like(depth)
    mins, maxs = np.zeros(n), np.zeros(n)
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        v = valid[i]
        if v.any():
            lo, hi = float(depth[i][v].min()), float(depth[i][v].max())
        else:
            lo = hi = 0.0
        mins[i], maxs[i] = lo, hi
        if hi > lo:
            out[i] = np.where(v, (np.where(v, depth[i], lo) - lo) / (hi - lo), 1.0)
        else:
            out[i] = 0.5
            flags[i] = True
    return out, mins, maxs, flags


def denormalize_depth(norm: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    shape = (-1,) + (1,) * (np.ndim(norm) - 1)
    mins = np.asarray(mins, dtype=np.float64).reshape(shape)
    maxs = np.asarray(maxs, dtype=np.float64).reshape(shape)
    return mins + np.asarray(norm) * (maxs - mins)


class Encoder(nn.Module):
    def __init__(self, rng, in_ch: int, width: int, latent: int, levels: int):
        self.stem = nn.Conv2d(rng, in_ch, width, 3)
        self.blocks = [nn.Conv2d(rng, width, width, 3) for _ in range(levels + 1)]
        self.out = nn.Conv2d(rng, width, latent, 1, init="small")

    def __call__(self, x: Tensor) -> Tensor:
        h = T.silu(self.stem(x))
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = T.resample(h, "down2")
            h = T.silu(block(h))
        return self.out(h)


class Decoder(nn.Module):
    def __init__(self, rng, latent: int, width: int, out_ch: int, levels: int):
        self.stem = nn.Conv2d(rng, latent, width, 3)
        self.blocks = [nn.Conv2d(rng, width, width, 3) for _ in range(levels + 1)]
        self.out = nn.Conv2d(rng, width, out_ch, 1, init="small")

    def __call__(self, z: Tensor) -> Tensor:
        h = T.silu(self.stem(z))
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = T.resample(h, "up2")
            h = T.silu(block(h))
        return self.out(h)


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        levels = int(round(math.log2(cfg.downsample)))
        if 2 ** levels != cfg.downsample:
            raise ValueError(f"codec downsample must be a power of two, got {cfg.downsample}")
        self.cfg = cfg
        self.factor = cfg.downsample
        self.latent_channels = cfg.latent_channels
        self.encoder = Encoder(rng, 3, cfg.width, cfg.latent_channels, levels)
        self.decoder = Decoder(rng, cfg.latent_channels, cfg.width, 3, levels)
        self.latent_scale = 1.0

    def encoder_for(self, modality: str) -> Encoder:
        if modality not in ("image", "depth"):
            raise ValueError(f"unknown modality {modality!r}")
        return self.encoder

    def decoder_for(self, modality: str) -> Decoder:
        if modality not in ("image", "depth"):
            raise ValueError(f"unknown modality {modality!r}")
        return self.decoder

    def _check(self, x: np.ndarray | Tensor, channels: int) -> None:
        shape = x.shape
        if len(shape) != 4 or shape[1] != channels:
            raise CodecShapeError(f"expected [N, {channels}, H, W], got {tuple(shape)}")
        H, W = shape[2:]
        if H % self.factor or W % self.factor:
            raise CodecShapeError(f"frame size {H}x{W} not divisible by the codec factor {self.factor}")

    def encode(self, x: Tensor, modality: str = "image") -> Tensor:
        self._check(x, 3)
        z = self.encoder_for(modality)(x)
        return z * (1.0 / self.latent_scale) if self.latent_scale != 1.0 else z

    def decode(self, z: Tensor, modality: str = "image") -> Tensor:
        z = z * self.latent_scale if self.latent_scale != 1.0 else z
        return self.decoder_for(modality)(z)

    # -- modality wrappers ----------------------------------------------------
    def encode_image(self, rgb) -> LatentGrid:
        single = np.ndim(rgb.data if isinstance(rgb, Tensor) else rgb) == 3
        x = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        if single:
            x = x.reshape((1,) + x.shape)
        return LatentGrid(self.encode(x, "image"), "image")

    def encode_depth(self, depth, valid: np.ndarray | None = None) -> LatentGrid:
        d = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
        if d.ndim == 3:
            d = d[None]
            valid = None if valid is None else np.asarray(valid)[None]
        self._check(d, 1)
        norm, lo, hi, flags = normalize_depth(d, valid)
        x = Tensor(np.repeat(norm, 3, axis=1))
        return LatentGrid(self.encode(x, "depth"), "depth", lo, hi, flags)

    def decode_image(self, z) -> Tensor:
        return self.decode(z.z if isinstance(z, LatentGrid) else z, "image")

    def decode_depth(self, z) -> Tensor:
        """Decode to a [N, 1, H, W] normalized depth map (channel mean of the decoder output)."""
        out = self.decode(z.z if isinstance(z, LatentGrid) else z, "depth")
        return out.mean(axis=1, keepdims=True)


def codec_training_frames(sequences) -> tuple[np.ndarray, np.ndarray]:
    """All RGB frames and all depth frames (normalized, replicated to 3 channels)."""
    rgb = np.concatenate([s.rgb for s in sequences])
    depth = np.concatenate([s.depth for s in sequences])
    norm, *_ = normalize_depth(depth)
    return rgb, np.repeat(norm, 3, axis=1)


def reconstruction_mse(codec: Codec, images: np.ndarray, batch: int = 64) -> float:
    total, n = 0.0, 0
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = images[i:i + batch]
            rec = codec.decode(codec.encode(Tensor(x))).data
            total += float(np.sum((rec - x) ** 2))
            n += x.size
    return total / n


def pretrain_codec(codec: Codec, train_frames: np.ndarray, heldout_frames: np.ndarray,
                   steps: int, rng: np.random.Generator, lr: float = 2e-3, batch: int = 8,
                   eval_every: int = 100) -> list[tuple[int, float]]:
    """Fit encoder and decoder on reconstruction MSE; returns held-out MSE per checkpoint.

    ``train_frames`` mixes RGB and replicated-depth images. The latent scale is
    set afterwards so encoded latents have unit standard deviation.
    """
    codec.latent_scale = 1.0
    codec.requires_grad_(True)
    opt = AdamW(codec.state_dict(), lr=lr, weight_decay=0.0)
    history = [(0, reconstruction_mse(codec, heldout_frames))]
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train_frames), size=batch)
        x = Tensor(train_frames[idx])
        loss = T.square(codec.decode(codec.encode(x)) - x).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            history.append((step, reconstruction_mse(codec, heldout_frames)))
            log.info("codec step %d heldout mse %.5f", step, history[-1][1])
    with T.no_grad():
        sample = train_frames[rng.permutation(len(train_frames))[:256]]
        z = codec.encoder(Tensor(sample)).data
    codec.latent_scale = float(z.std())
    codec.requires_grad_(False)
    return history
