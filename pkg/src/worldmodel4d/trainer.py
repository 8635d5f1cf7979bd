"""World-model training: one sequence per step, four optimization modes.

``image_only``   image loss only, depth head never runs
``depth_only``   depth latent + SSI losses only
``detach_grad``  all losses, depth head sees detached UNet features
``joint``        all losses with gradients everywhere
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as D
from . import losses as L
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import Codec, normalize_depth
from .config import NULL_ACTION, CodecConfig, Config
from .mli import assemble, build_head
from .nn import Module
from .optim import AdamW, clip_grad_norm, ema_update
from .rng import Streams, stream
from .tensor import Tensor
from .unet import TemporalUNet
from .world import SceneSequence

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, report: dict, path: Path | None):
        self.step, self.report, self.path = step, report, path
        super().__init__(f"non-finite loss at step {step}: {report}")


class WorldModel(Module):
    def __init__(self, cfg: Config, rng: np.random.Generator):
        C = cfg.codec.latent_channels
        self.unet = TemporalUNet(cfg.unet, C, rng)
        self.head = build_head(cfg.train.mli, self.unet, C, rng)


@dataclass
class SequenceLatents:
    z_x: np.ndarray          # [M, C, h, w]
    z_d: np.ndarray          # [M, C, h, w]
    depth_norm: np.ndarray   # [M, 1, H, W] in [0, 1]
    valid: np.ndarray        # [M, 1, H, W]
    depth_min: np.ndarray
    depth_max: np.ndarray
    action: str


def encode_sequence(codec: Codec, seq: SceneSequence) -> SequenceLatents:
    with T.no_grad():
        z_x = codec.encode_image(seq.rgb).z.data
        zd = codec.encode_depth(seq.depth, seq.valid)
    norm, lo, hi, _ = normalize_depth(seq.depth, seq.valid)
    return SequenceLatents(z_x, zd.z.data, norm, seq.valid, lo, hi, seq.action)


def sample_action_dropout(action: str, rng: np.random.Generator, p: float = 0.15) -> str:
    return NULL_ACTION if rng.random() < p else action


def future_ssi(codec: Codec, z_d_future: Tensor, depth_norm: np.ndarray, valid: np.ndarray) -> tuple[Tensor, bool]:
    """Mean per-frame SSI loss of decoded depth over the future frames."""
    d_pred = codec.decode_depth(z_d_future)
    n = d_pred.shape[0]
    total, degenerate = None, False
    for i in range(n):
        loss, deg = L.ssi_loss(d_pred[i], depth_norm[i], valid[i])
        degenerate |= deg
        total = loss if total is None else total + loss
    return total * (1.0 / n), degenerate


def codec_from_blobs(codec_cfg: dict, blobs: dict, latent_scale: float) -> Codec:
    codec = Codec(CodecConfig(**codec_cfg))
    for name, p in codec.named_parameters():
        p.data = np.array(blobs[name])
    codec.latent_scale = float(latent_scale)
    codec.requires_grad_(False)
    return codec


def save_codec(path, codec: Codec, cfg: Config, history=()) -> Path:
    ck = Checkpoint(cfg.to_dict(), meta={"kind": "codec", "latent_scale": codec.latent_scale,
                                        "history": [list(h) for h in history]})
    ck.put_group("codec", {k: p.data for k, p in codec.named_parameters()})
    return save_checkpoint(path, ck)


def load_codec(path) -> tuple[Codec, Config]:
    ck = load_checkpoint(path)
    cfg = Config.from_dict(ck.config)
    return codec_from_blobs(ck.config["codec"], ck.group("codec"), ck.meta["latent_scale"]), cfg


class Trainer:
    def __init__(self, cfg: Config, codec: Codec, sequences: list[SceneSequence]):
        cfg.validate()
        self.cfg = cfg
        self.codec = codec.requires_grad_(False)
        self.schedule = D.NoiseSchedule.from_config(cfg.diffusion)
        self.streams = Streams(cfg.train.seed)
        self.model = WorldModel(cfg, self.streams["init"])
        self.params = self.model.state_dict()
        tc = cfg.train
        self.opt = AdamW(self.params, lr=tc.lr, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps,
                         weight_decay=tc.weight_decay)
        self.ema = {k: p.data.copy() for k, p in self.params.items()}
        self.step = 0
        self.latents = [encode_sequence(codec, s) for s in sequences]
        if not self.latents:
            raise ValueError("training needs at least one sequence")
        self.depth_range = [float(np.mean([l.depth_min.mean() for l in self.latents])),
                            float(np.mean([l.depth_max.mean() for l in self.latents]))]
        self._order: list[int] = []
        self._pos = 0

    # -- data order -----------------------------------------------------------
    def next_index(self) -> int:
        if self._pos >= len(self._order):
            self._order = [int(i) for i in self.streams["data"].permutation(len(self.latents))]
            self._pos = 0
        i = self._order[self._pos]
        self._pos += 1
        return i

    # -- one optimization step -------------------------------------------------
    def draw(self) -> tuple[int, int, np.ndarray, str]:
        idx = self.next_index()
        lat = self.latents[idx]
        t = int(self.streams["data"].integers(1, self.schedule.T + 1))
        eps = self.streams["noise"].standard_normal(lat.z_x[1:].shape)
        action = sample_action_dropout(lat.action, self.streams["dropout"], self.cfg.train.action_dropout)
        return idx, t, eps, action

    def losses(self, lat: SequenceLatents, t: int, eps: np.ndarray, action: str, depth_terms: bool = True):
        """(total loss Tensor, LossReport). ``depth_terms=False`` leaves L_d and L_ssi out of the sum."""
        tc = self.cfg.train
        mode = tc.mode
        ab = float(self.schedule.alpha_bar[t])
        vol = Tensor(D.forward_noise(lat.z_x, t, eps, self.schedule))
        if mode == "image_only":
            eps_hat, _ = self.model.unet(vol, t, action)
            z_d = None
        else:
            out = assemble(vol, t, action, self.model.unet, self.model.head, ab,
                           apply_outside=True, detach_taps=(mode == "detach_grad"))
            eps_hat, z_d = out.eps, out.z_d
        l_x = l_d = l_s = None
        degenerate = False
        if mode != "depth_only":
            z_hat = D.predict_x0(vol[1:], eps_hat[1:], ab)
            l_x = L.image_latent_loss(eps_hat[1:], Tensor(eps), z_hat, Tensor(lat.z_x[1:]),
                                      tc.struct_weight, struct_scale=ab)
        if z_d is not None and depth_terms:
            l_d = L.depth_latent_loss(z_d[1:], Tensor(lat.z_d[1:]))
            l_s, degenerate = future_ssi(self.codec, z_d[1:], lat.depth_norm[1:], lat.valid[1:])
        return L.total_loss(l_x, l_d, l_s, tc.lam, tc.depth_weight, degenerate)

    def heldout_losses(self, sequences: list[SceneSequence], timesteps=(10, 30, 50, 70, 90),
                       seed: int = 1234) -> dict:
        """Mean loss terms on other sequences at fixed timesteps and fixed noise, without dropout."""
        rng = stream(seed, "heldout")
        sums = {"l_x": 0.0, "l_d": 0.0, "l_ssi": 0.0, "total": 0.0}
        n = 0
        with T.no_grad():
            for seq in sequences:
                lat = encode_sequence(self.codec, seq)
                for t in timesteps:
                    t = min(int(t), self.schedule.T)
                    eps = rng.standard_normal(lat.z_x[1:].shape)
                    _, rep = self.losses(lat, t, eps, lat.action)
                    for k in sums:
                        sums[k] += getattr(rep, k)
                    n += 1
        return {k: v / n for k, v in sums.items()}

    def compute_gradients(self, lat, t, eps, action, depth_terms: bool = True):
        for p in self.params.values():
            p.grad = None
        total, report = self.losses(lat, t, eps, action, depth_terms)
        if not np.isfinite(report.total):
            return None, report
        total.backward()
        return total, report

    def train_step(self, diag_dir: Path | None = None) -> dict:
        start = time.perf_counter()
        idx, t, eps, action = self.draw()
        total, report = self.compute_gradients(self.latents[idx], t, eps, action)
        if total is None or not all(np.isfinite(p.grad).all() for p in self.params.values() if p.grad is not None):
            path = None
            if diag_dir is not None:
                path = self.save(Path(diag_dir) / f"diagnostic_step{self.step + 1:06d}.uf4d")
            raise NonFiniteLoss(self.step + 1, report.to_dict(), path)
        norm = clip_grad_norm(self.params, self.cfg.train.grad_clip)
        self.opt.step()
        ema_update({k: p.data for k, p in self.params.items()}, self.ema, self.cfg.train.ema_decay)
        self.step += 1
        return {"step": self.step, "seq": idx, "t": t, "action": action, **report.to_dict(),
                "grad_norm": norm, "time_s": round(time.perf_counter() - start, 6)}

    def run(self, steps: int, log_path: Path | None = None, ckpt_dir: Path | None = None,
            ckpt_every: int = 0, callback=None) -> list[dict]:
        records = []
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                rec = self.train_step(ckpt_dir)
                records.append(rec)
                if fh and rec["step"] % max(1, self.cfg.train.log_every) == 0:
                    # wall-clock stays out of the log so identical runs give identical bytes
                    fh.write(json.dumps({k: v for k, v in rec.items() if k != "time_s"}, sort_keys=True) + "\n")
                if ckpt_dir and ckpt_every and rec["step"] % ckpt_every == 0:
                    self.save(Path(ckpt_dir) / f"step{rec['step']:06d}.uf4d")
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        return records

    # -- checkpoints ---------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        ck = Checkpoint(self.cfg.to_dict(), self.step, self.streams.get_state(), {
            "kind": "world_model",
            "adam_t": self.opt.t,
            "order": self._order,
            "pos": self._pos,
            "latent_scale": self.codec.latent_scale,
            "depth_range": self.depth_range,
            "action_dropout": self.cfg.train.action_dropout,
        })
        ck.put_group("param", {k: p.data for k, p in self.params.items()})
        ck.put_group("ema", self.ema)
        ck.put_group("adam_m", self.opt.m)
        ck.put_group("adam_v", self.opt.v)
        ck.put_group("codec", {k: p.data for k, p in self.codec.named_parameters()})
        return ck

    def save(self, path) -> Path:
        return save_checkpoint(path, self.to_checkpoint())

    def load_state(self, ck: Checkpoint) -> None:
        for k, p in self.params.items():
            p.data = np.array(ck.blobs["param/" + k])
        self.ema = {k: np.array(v) for k, v in ck.group("ema").items()}
        self.opt.load_state(ck.meta["adam_t"], ck.group("adam_m"), ck.group("adam_v"))
        self.streams.set_state(ck.rng)
        self.step = int(ck.step)
        self._order = list(ck.meta["order"])
        self._pos = int(ck.meta["pos"])

    @classmethod
    def resume(cls, path, sequences: list[SceneSequence]) -> "Trainer":
        ck = load_checkpoint(path)
        cfg = Config.from_dict(ck.config)
        codec = codec_from_blobs(ck.config["codec"], ck.group("codec"), ck.meta["latent_scale"])
        tr = cls(cfg, codec, sequences)
        tr.load_state(ck)
        return tr


@dataclass
class LoadedModel:
    cfg: Config
    model: WorldModel
    codec: Codec
    meta: dict


def load_model(path, use_ema: bool = False) -> LoadedModel:
    """World model for inference; ``use_ema`` selects the averaged weights."""
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "world_model":
        raise ValueError(f"{path} is not a world-model checkpoint")
    cfg = Config.from_dict(ck.config)
    model = WorldModel(cfg, np.random.default_rng(0))
    src = ck.group("ema" if use_ema else "param")
    for k, p in model.named_parameters():
        p.data = np.array(src[k])
    model.requires_grad_(False)
    codec = codec_from_blobs(ck.config["codec"], ck.group("codec"), ck.meta["latent_scale"])
    return LoadedModel(cfg, model, codec, ck.meta)
