"""Four-scale video denoising UNet over a [M, C, h, w] latent volume.

Frames are treated as the batch axis for spatial convolutions and mixed by a
residual frame-axis convolution after every block. The encoder and decoder
halves are separate calls so that a second decoder pass can be run with
feature injections while reusing the first pass's encoder state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ACTION_VOCAB, UNetConfig
from .tensor import ShapeError, Tensor

SCALES = (1.0, 0.5, 0.25, 0.125)


def timestep_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])[None, :]


class ResBlock(nn.Module):
    def __init__(self, rng, channels: int, temb_dim: int):
        self.norm = nn.ChannelNorm(channels)
        self.temb = nn.Linear(rng, temb_dim, channels, init="small")
        self.conv = nn.Conv2d(rng, channels, channels, 3, init="small")
        self.mix = nn.TemporalConv(rng, channels)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        c = x.shape[1]
        h = T.silu(self.norm(x)) + self.temb(temb).reshape(1, c, 1, 1)
        h = x + self.conv(h)
        return h + self.mix(h)


@dataclass
class EncoderState:
    taps: list[Tensor]        # post-block features at scales 1, 1/2, 1/4, 1/8
    temb: Tensor
    frame_mask: np.ndarray    # [M, 1, 1, 1], 0 on the condition frame
    vol: Tensor               # the noisy input volume, for the output skip


@dataclass
class FeatureTaps:
    enc: list[Tensor]
    dec: list[Tensor]

    def shapes(self) -> dict:
        return {f"{half}[{s}]": t.shape for half, taps in (("enc", self.enc), ("dec", self.dec))
                for s, t in zip(SCALES, taps)}


class TemporalUNet(nn.Module):
    def __init__(self, cfg: UNetConfig, latent_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.latent_channels = latent_channels
        ch = [cfg.base_channels * m for m in cfg.channel_mult]
        self.channels = ch
        C = latent_channels
        self.time1 = nn.Linear(rng, cfg.temb_dim, cfg.temb_dim)
        self.time2 = nn.Linear(rng, cfg.temb_dim, cfg.temb_dim, init="small")
        self.action = nn.Embedding(rng, len(ACTION_VOCAB), cfg.temb_dim)
        # noisy volume + broadcast condition frame + condition-frame indicator
        self.stem = nn.Conv2d(rng, 2 * C + 1, ch[0], 3)
        self.down = [nn.Conv2d(rng, ch[i - 1], ch[i], 1) for i in range(1, 4)]
        self.enc = [ResBlock(rng, ch[i], cfg.temb_dim) for i in range(4)]
        self.merge = [nn.Conv2d(rng, ch[i] + (ch[i + 1] if i < 3 else 0), ch[i], 1) for i in range(4)]
        self.dec = [ResBlock(rng, ch[i], cfg.temb_dim) for i in range(4)]
        self.out_norm = nn.ChannelNorm(ch[0])
        self.out = nn.Conv2d(rng, ch[0], C, 3, init="small")
        # per-channel gain on the noisy input, set by the timestep embedding; at
        # high noise eps is close to a rescaled copy of the input, which the
        # conv stack alone reproduces poorly
        self.skip = nn.Linear(rng, cfg.temb_dim, C, init="zero")

    def embed(self, t: float, action: str) -> Tensor:
        if action not in ACTION_VOCAB:
            raise ValueError(f"unknown action {action!r}; expected one of {ACTION_VOCAB}")
        h = T.silu(self.time1(Tensor(timestep_features(t, self.cfg.temb_dim))))
        h = self.time2(h) + self.action(ACTION_VOCAB.index(action))
        return T.silu(h)

    def _inject(self, h: Tensor, injections, key) -> Tensor:
        if not injections or key not in injections:
            return h
        inj = injections[key]
        if inj.shape != h.shape:
            raise ShapeError(f"injection at {key[0]} scale {SCALES[key[1]]}: got {inj.shape}, stage features are {h.shape}")
        return h + inj

    def encode(self, vol: Tensor, t: float, action: str, injections: dict | None = None) -> EncoderState:
        """``injections`` maps ("enc", scale_index) to tensors added to that stage's output."""
        M, C, h, w = vol.shape
        if C != self.latent_channels:
            raise ShapeError(f"volume has {C} channels, model expects {self.latent_channels}")
        if h % 8 or w % 8:
            raise ShapeError(f"latent extent {h}x{w} must be divisible by 8 for four scales")
        cond = np.broadcast_to(vol.data[:1], vol.shape)
        mask = np.zeros((M, 1, h, w))
        mask[0] = 1.0
        x = T.concat([vol, Tensor(cond), Tensor(mask)], axis=1)
        temb = self.embed(t, action)
        taps = []
        hcur = self.stem(x)
        for i in range(4):
            if i > 0:
                hcur = self.down[i - 1](T.resample(hcur, "down2"))
            hcur = self.enc[i](hcur, temb)
            hcur = self._inject(hcur, injections, ("enc", i))
            taps.append(hcur)
        frame_mask = np.ones((M, 1, 1, 1))
        frame_mask[0] = 0.0
        return EncoderState(taps, temb, frame_mask, vol)

    def decode(self, state: EncoderState, injections: dict | None = None) -> tuple[Tensor, list[Tensor]]:
        """Returns (eps_pred with a zero condition-frame slot, decoder taps finest first)."""
        dec = [None] * 4
        hcur = state.taps[3]
        for i in (3, 2, 1, 0):
            skip = state.taps[i]
            merged = skip if i == 3 else T.concat([T.resample(hcur, "up2"), skip], axis=1)
            hcur = self.merge[i](merged)
            hcur = self.dec[i](hcur, state.temb)
            hcur = self._inject(hcur, injections, ("dec", i))
            dec[i] = hcur
        C = self.latent_channels
        eps = self.out(T.silu(self.out_norm(hcur))) + state.vol * self.skip(state.temb).reshape(1, C, 1, 1)
        return eps * state.frame_mask, dec

    def __call__(self, vol: Tensor, t: float, action: str, injections: dict | None = None):
        """Full forward: (eps_pred, FeatureTaps)."""
        enc_inj = {k: v for k, v in (injections or {}).items() if k[0] == "enc"}
        dec_inj = {k: v for k, v in (injections or {}).items() if k[0] == "dec"}
        state = self.encode(vol, t, action, enc_inj)
        eps, dec = self.decode(state, dec_inj)
        return eps, FeatureTaps(state.taps, dec)
