"""Linear-beta DDPM schedule, epsilon-parameterized forward noising and a
deterministic DDIM sampler whose frame 0 is a clean conditioning latent."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import NULL_ACTION, DiffusionConfig
from .rng import stream


class NoiseSchedule:
    def __init__(self, T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2):
        if not (0 < beta_start <= beta_end < 1):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        self.T = int(T)
        # index 0 is the clean state; betas[t] for t = 1..T
        self.betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, self.T)])
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.T, cfg.beta_start, cfg.beta_end)

    def timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced sampling timesteps from T to 1."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        ts = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))[::-1]
        return [int(t) for t in ts]


def noise_frames(z0: np.ndarray, alpha_bar: float, eps: np.ndarray) -> np.ndarray:
    """Frames 1.. become sqrt(ab)*z0 + sqrt(1-ab)*eps; frame 0 is copied unchanged."""
    z0 = np.asarray(z0, dtype=np.float64)
    if eps.shape != z0[1:].shape:
        raise ValueError(f"eps shape {eps.shape} must match future frames {z0[1:].shape}")
    out = z0.copy()
    if alpha_bar == 1.0:
        return out
    out[1:] = np.sqrt(alpha_bar) * z0[1:] + np.sqrt(1.0 - alpha_bar) * eps
    return out


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    return noise_frames(z0, float(schedule.alpha_bar[t]), eps)


def predict_x0(x_t, eps, alpha_bar: float):
    """Clean-latent estimate implied by an epsilon prediction (works on arrays and Tensors)."""
    return (x_t - eps * np.sqrt(1.0 - alpha_bar)) * (1.0 / np.sqrt(alpha_bar))


def eps_from_x0(x_t: np.ndarray, x0: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (x_t - np.sqrt(alpha_bar) * x0) / np.sqrt(1.0 - alpha_bar)


def ddim_step(x_t: np.ndarray, eps: np.ndarray, ab_t: float, ab_prev: float) -> np.ndarray:
    """Deterministic (eta = 0) update of the future frames from ab_t to ab_prev."""
    x0 = predict_x0(x_t, eps, ab_t)
    if ab_prev == 1.0:
        return x0
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance, written so that scale 0 and 1 return a branch exactly."""
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def build_inference_volume(cond_latent: np.ndarray, M: int, seed: int) -> np.ndarray:
    """Frame 0 is ``cond_latent`` [C, h, w]; frames 1..M-1 are seeded standard normal noise."""
    cond = np.asarray(cond_latent, dtype=np.float64)
    if cond.ndim == 4 and cond.shape[0] == 1:
        cond = cond[0]
    if M < 2:
        raise ValueError(f"a rollout needs at least 2 frames, got {M}")
    noise = stream(seed, "noise").standard_normal((M - 1,) + cond.shape)
    return np.concatenate([cond[None], noise])


# model(vol, t, action, final) -> (eps [M, C, h, w], z_d_hat or None)
Denoiser = Callable[[np.ndarray, int, str, bool], tuple]


@dataclass
class Rollout:
    z_x: np.ndarray
    z_d: np.ndarray | None
    timesteps: list[int]
    warnings: list[str] = field(default_factory=list)


def denoise_loop(vol: np.ndarray, model: Denoiser, action: str, guidance_scale: float,
                 steps: int, schedule: NoiseSchedule, trained_with_dropout: bool = True) -> Rollout:
    """Run the DDIM reverse trajectory on frames 1..M-1 of ``vol``.

    Frame 0 is never written. The depth latent comes from the conditional
    branch of the final step only.
    """
    x = np.array(vol, dtype=np.float64, copy=True)
    warnings = []
    guided = guidance_scale != 1.0
    if guided and not trained_with_dropout:
        warnings.append("guidance requested but the model was trained without action dropout")
    ts = schedule.timesteps(steps)
    z_d = None
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        final = t_prev == 0
        eps, depth = model(x, t, action, final)
        if guided:
            eps_u, _ = model(x, t, NULL_ACTION, final)
            eps = cfg_combine(eps_u, eps, guidance_scale)
        x[1:] = ddim_step(x[1:], eps[1:], schedule.alpha_bar[t], schedule.alpha_bar[t_prev])
        if final:
            z_d = depth
    return Rollout(x, z_d, ts, warnings)
