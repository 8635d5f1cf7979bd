"""Desk-scale trend experiment: train every optimization mode plus a plain-head
baseline on one shared codec, then probe action controllability."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import world as W
from .codec import Codec, codec_training_frames, pretrain_codec
from .config import MODES, Config, toy_config, with_train
from .rng import stream
from .rollout import forecast
from .trainer import Trainer

log = logging.getLogger(__name__)

PLAIN = {"mli": {"head": "plain", "inside": False, "outside": False}}


@dataclass
class RunResult:
    name: str
    totals: list[float]
    heldout: dict
    seconds: float
    trainer: Trainer = field(repr=False)


@dataclass
class TrendResult:
    cfg: Config
    codec: Codec
    codec_history: list
    train: list
    heldout: list
    runs: dict[str, RunResult]


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.convolve(v, np.ones(window) / window, mode="valid")


def loss_reduction(totals, window: int = 10) -> float:
    """1 - (final window mean) / (mean over the first ``window`` steps)."""
    ma = moving_average(totals, window)
    return 1.0 - ma[-1] / ma[0]


def train_run(name: str, cfg: Config, codec: Codec, train, heldout, steps: int) -> RunResult:
    start = time.perf_counter()
    tr = Trainer(cfg, codec, train)
    totals = []
    for _ in range(steps):
        rec = tr.train_step()
        totals.append(rec["total"])
        if rec["step"] % 200 == 0:
            log.info("%s step %d total %.4f (ma %.4f)", name, rec["step"], rec["total"], np.mean(totals[-200:]))
    held = tr.heldout_losses(heldout)
    return RunResult(name, totals, held, time.perf_counter() - start, tr)


def run_trend(cfg: Config | None = None, sequences: int = 200, steps: int = 2000,
              codec_steps: int | None = None, seed: int = 0, modes=MODES, baseline: bool = True) -> TrendResult:
    cfg = cfg or toy_config()
    seqs = W.make_sequences(cfg.world, sequences, seed=seed)
    n_train = int(round(sequences * cfg.world.split_ratio))
    train, heldout = seqs[:n_train], seqs[n_train:]

    codec = Codec(cfg.codec, stream(seed, "codec-init"))
    rgb, dep = codec_training_frames(train)
    hr, hd = codec_training_frames(heldout)
    history = pretrain_codec(codec, np.concatenate([rgb, dep]), np.concatenate([hr, hd]),
                             codec_steps or cfg.codec.steps, stream(seed, "codec-data"),
                             lr=cfg.codec.lr, batch=cfg.codec.batch, eval_every=cfg.codec.eval_every)

    runs = {}
    for mode in modes:
        runs[mode] = train_run(mode, with_train(cfg, mode=mode), codec, train, heldout, steps)
    if baseline:
        runs["plain"] = train_run("plain", with_train(cfg, mode="joint", **PLAIN), codec, train, heldout, steps)
    return TrendResult(cfg, codec, history, train, heldout, runs)


def controllability(trainer: Trainer, rgb0: np.ndarray, seed: int = 0, use_ema: bool = False) -> dict:
    """Roll out one condition frame under each action with the same noise seed."""
    model = trainer.model
    saved = None
    if use_ema:
        saved = {k: p.data for k, p in trainer.params.items()}
        for k, p in trainer.params.items():
            p.data = trainer.ema[k]
    try:
        frames = {a: np.clip(forecast(trainer.cfg, model, trainer.codec, rgb0, a, seed).rgb, 0.0, 1.0)
                  for a in ("stop", "straight", "left", "right")}
    finally:
        if saved is not None:
            for k, p in trainer.params.items():
                p.data = saved[k]
    diff = np.abs(frames["straight"][1:] - frames["left"][1:])
    change = {a: float(np.mean(np.abs(np.diff(f, axis=0)))) for a, f in frames.items()}
    return {"frames": frames,
            "frac_straight_vs_left": float(np.mean(diff.max(axis=1) >= 0.05)),
            "motion": change}
