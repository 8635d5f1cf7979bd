"""Multi-scale depth head with feedback into the image denoiser.

Depth layers walk the UNet feature taps from the coarsest active scale to
scale 1, each fusing (encoder tap, decoder tap, upsampled previous output).
Their intermediate outputs are fed back into the UNet stages (inside
feedback), and the final depth latent is fed into the clean image latent
estimate (outside feedback). All feedback layers default to 1x1 convolutions
with exactly-zero weights, so a fresh head leaves the image path untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import MLIConfig
from .tensor import Tensor
from .unet import SCALES, FeatureTaps, TemporalUNet


class FeedbackLayer(nn.Module):
    """``zero``: zero-initialized 1x1 conv; ``random``: randomly initialized 1x1 conv; ``direct``: identity."""

    def __init__(self, rng, channels: int, kind: str = "zero"):
        if kind not in ("zero", "random", "direct"):
            raise ValueError(f"unknown feedback type {kind!r}")
        self.kind = kind
        self.conv = None if kind == "direct" else nn.Conv2d(rng, channels, channels, 1,
                                                             init="zero" if kind == "zero" else "small")

    def __call__(self, x: Tensor) -> Tensor:
        return x if self.conv is None else self.conv(x)


class DepthLayer(nn.Module):
    def __init__(self, rng, cin: int, cout: int):
        self.conv = nn.Conv2d(rng, cin, cout, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(self.conv(x))


def active_indices(scales) -> list[int]:
    return sorted(SCALES.index(float(s)) for s in scales)


class MLIHead(nn.Module):
    def __init__(self, cfg: MLIConfig, unet_channels: list[int], latent_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.active = active_indices(cfg.scales)
        if self.active != list(range(len(self.active))):
            raise ValueError(f"interaction scales must run contiguously from 1, got {cfg.scales}")
        ch = unet_channels
        coarsest = self.active[-1]
        self.layers = [None] * 4
        for i in self.active:
            cin = 2 * ch[i] + (ch[i + 1] if i < coarsest else 0)
            self.layers[i] = DepthLayer(rng, cin, ch[i])
        # zero output: the UNet taps are O(1..4), and a random projection starts
        # z_d an order of magnitude off, which stalls the head at the mean
        self.proj = nn.Conv2d(rng, ch[0], latent_channels, 3, init="zero")
        self.inside_dec = [FeedbackLayer(rng, ch[i], cfg.feedback_type)
                           if cfg.inside and cfg.decoder_sites and i in self.active else None for i in range(4)]
        self.inside_enc = [FeedbackLayer(rng, ch[i], cfg.feedback_type)
                           if cfg.inside and cfg.encoder_sites and i in self.active else None for i in range(4)]
        self.outside = FeedbackLayer(rng, latent_channels, cfg.feedback_type) if cfg.outside else None

    def feedback_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if k.startswith(("inside_", "outside"))}

    def depth_head(self, taps: FeatureTaps) -> tuple[Tensor, dict[int, Tensor]]:
        """(z_d_hat [M, C, h, w], intermediates keyed by scale index)."""
        prev = None
        inter: dict[int, Tensor] = {}
        for i in reversed(self.active):
            parts = [taps.enc[i], taps.dec[i]]
            if prev is not None:
                parts.append(T.resample(prev, "up2"))
            prev = self.layers[i](T.concat(parts, axis=1))
            inter[i] = prev
        return self.proj(prev), inter

    def inside_feedback(self, x: Tensor, site: tuple[str, int]) -> Tensor:
        half, i = site
        layer = (self.inside_dec if half == "dec" else self.inside_enc)[i]
        if layer is None:
            raise KeyError(f"no inside feedback site at {half} scale {SCALES[i]}")
        return layer(x)

    def injections(self, inter: dict[int, Tensor]) -> dict:
        inj = {}
        for half, sites in (("enc", self.inside_enc), ("dec", self.inside_dec)):
            for i, layer in enumerate(sites):
                if layer is not None:
                    inj[(half, i)] = layer(inter[i])
        return inj

    def outside_feedback(self, z_x_hat: Tensor, z_d_hat: Tensor) -> Tensor:
        """Add the projected depth latent to a clean image latent estimate."""
        if self.outside is None:
            return z_x_hat
        return z_x_hat + self.outside(z_d_hat)

    def outside_eps(self, eps: Tensor, z_d_hat: Tensor, alpha_bar: float, frame_mask: np.ndarray) -> Tensor:
        """The same correction expressed on the noise prediction.

        Shifting x0 = (x_t - sqrt(1-ab) eps) / sqrt(ab) by y is the same as
        shifting eps by -sqrt(ab / (1-ab)) y; frame 0 stays zero.
        """
        if self.outside is None:
            return eps
        k = np.sqrt(alpha_bar / (1.0 - alpha_bar))
        return eps - self.outside(z_d_hat) * (frame_mask * k)


class PlainDepthHead(nn.Module):
    """Depth from the finest decoder features through a small conv stack, with no feedback."""

    def __init__(self, unet_channels: list[int], latent_channels: int, rng: np.random.Generator):
        c = unet_channels[0]
        self.hidden = nn.Conv2d(rng, c, c, 3)
        self.proj = nn.Conv2d(rng, c, latent_channels, 3, init="zero")

    def feedback_parameters(self) -> dict[str, Tensor]:
        return {}

    def depth_head(self, taps: FeatureTaps) -> tuple[Tensor, dict[int, Tensor]]:
        return self.proj(T.silu(self.hidden(taps.dec[0]))), {}

    def injections(self, inter) -> dict:
        return {}

    def outside_eps(self, eps, z_d_hat, alpha_bar, frame_mask):
        return eps


def build_head(cfg: MLIConfig, unet: TemporalUNet, latent_channels: int, rng: np.random.Generator):
    if cfg.head == "plain":
        return PlainDepthHead(unet.channels, latent_channels, rng)
    return MLIHead(cfg, unet.channels, latent_channels, rng)


@dataclass
class Assembled:
    eps: Tensor            # final noise prediction (inside and outside feedback applied)
    z_d: Tensor            # depth latent for all M frames
    eps_plain: Tensor      # first-pass prediction, before any feedback
    taps: FeatureTaps


def _detached(taps: FeatureTaps) -> FeatureTaps:
    return FeatureTaps([t.detach() for t in taps.enc], [t.detach() for t in taps.dec])


def assemble(vol: Tensor, t: int, action: str, unet: TemporalUNet, head, alpha_bar: float,
             apply_outside: bool = True, detach_taps: bool = False) -> Assembled:
    """Two-pass image/depth prediction.

    Pass 1 runs the UNet without injections to collect taps. The depth head
    turns the taps into a depth latent and per-scale intermediates, which are
    injected into a second decoder pass (and a second encoder pass only when
    encoder sites are enabled). Outside feedback is then applied to the
    resulting noise prediction.
    """
    state = unet.encode(vol, t, action)
    eps1, dec = unet.decode(state)
    taps = FeatureTaps(state.taps, dec)
    z_d, inter = head.depth_head(_detached(taps) if detach_taps else taps)
    inj = head.injections(inter)
    if inj:
        enc_inj = {k: v for k, v in inj.items() if k[0] == "enc"}
        dec_inj = {k: v for k, v in inj.items() if k[0] == "dec"}
        state2 = unet.encode(vol, t, action, enc_inj) if enc_inj else state
        eps, _ = unet.decode(state2, dec_inj)
    else:
        eps = eps1
    if apply_outside:
        eps = head.outside_eps(eps, z_d, alpha_bar, state.frame_mask)
    return Assembled(eps, z_d, eps1, taps)
