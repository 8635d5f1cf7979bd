"""Training objective: L = L_x + w_d * L_d + lambda * L_ssi."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossReport:
    l_x: float
    l_d: float
    l_ssi: float
    total: float
    lam: float
    depth_weight: float = 1.0
    ssi_degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def mse(a: Tensor, b: Tensor) -> Tensor:
    return T.square(a - b).mean()


def spatial_gradients(z: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along the last two axes."""
    return z[..., :, 1:] - z[..., :, :-1], z[..., 1:, :] - z[..., :-1, :]


def image_latent_loss(eps_pred: Tensor, eps_true: Tensor, z_x_hat: Tensor, z_x: Tensor,
                      struct_weight: float = 0.1, struct_scale: float = 1.0) -> Tensor:
    """Noise MSE plus a structural term matching spatial gradients of the denoised latent.

    ``struct_scale`` multiplies the structural term; the trainer passes the
    signal fraction of the current timestep so that the amplified x0 estimate
    at high noise does not swamp the objective.
    """
    loss = mse(eps_pred, eps_true)
    if struct_weight:
        gx_hat, gy_hat = spatial_gradients(z_x_hat)
        gx, gy = spatial_gradients(z_x)
        struct = T.square(gx_hat - gx).mean() + T.square(gy_hat - gy).mean()
        loss = loss + struct * (struct_weight * struct_scale)
    return loss


def depth_latent_loss(z_d_hat: Tensor, z_d: Tensor) -> Tensor:
    return mse(z_d_hat, z_d)


def affine_fit(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float, bool]:
    """Least-squares (scale, shift) mapping ``pred`` onto ``gt`` over ``mask``.

    Solves the 2x2 normal equations in closed form. A constant prediction
    makes the system singular; then scale is 0, shift is mean(gt) and the
    third return value flags the fallback.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    p, g = pred[mask], gt[mask]
    n = p.size
    if n < 2:
        raise ValueError("affine fit needs at least 2 valid pixels")
    sp, sg = p.sum(), g.sum()
    det = n * (p * p).sum() - sp * sp
    if det <= 1e-12 * n * n * max(1.0, float(np.abs(p).max()) ** 2):
        return 0.0, float(g.mean()), True
    s = (n * (p * g).sum() - sp * sg) / det
    b = (sg - s * sp) / n
    return float(s), float(b), False


def ssi_loss(d_pred: Tensor, d_gt, valid=None) -> tuple[Tensor, bool]:
    """Scale- and shift-invariant depth loss with differentiable alignment.

    The optimal (s, b) are computed from ``d_pred`` with tensor ops, so the
    gradient accounts for the alignment. Returns (loss, degenerate_flag).
    """
    d_gt = np.asarray(d_gt.data if isinstance(d_gt, Tensor) else d_gt, dtype=np.float64)
    mask = np.ones(d_gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = float(mask.sum())
    if n < 2:
        raise ValueError("ssi_loss needs at least 2 valid pixels")
    w = Tensor(mask.astype(np.float64))
    g = np.where(mask, d_gt, 0.0)
    gt_t = Tensor(g)
    _, _, degenerate = affine_fit(d_pred.data, d_gt, mask)
    if degenerate:
        g_mean = g.sum() / n
        resid = T.absolute(Tensor(np.full(d_gt.shape, g_mean)) + d_pred * 0.0 - gt_t) * w
        return resid.sum() * (1.0 / n), True
    pm = d_pred * w
    sp = pm.sum()
    spp = T.square(pm).sum()
    spg = (pm * gt_t).sum()
    sg = float(g.sum())
    det = spp * n - T.square(sp)
    s = (spg * n - sp * sg) / det
    b = (sg - s * sp) * (1.0 / n)
    resid = T.absolute(d_pred * s + b - gt_t) * w
    return resid.sum() * (1.0 / n), False


def total_loss(l_x: Tensor | None, l_d: Tensor | None, l_ssi: Tensor | None, lam: float,
               depth_weight: float = 1.0, ssi_degenerate: bool = False) -> tuple[Tensor, LossReport]:
    """Combine the present terms. Missing terms count as zero in the report."""
    total = None
    for term, weight in ((l_x, 1.0), (l_d, depth_weight), (l_ssi, lam)):
        if term is None:
            continue
        part = term if weight == 1.0 else term * weight
        total = part if total is None else total + part
    vx = 0.0 if l_x is None else l_x.item()
    vd = 0.0 if l_d is None else l_d.item()
    vs = 0.0 if l_ssi is None else l_ssi.item()
    report = LossReport(l_x=vx, l_d=vd, l_ssi=vs, total=vx + depth_weight * vd + lam * vs,
                        lam=lam, depth_weight=depth_weight, ssi_degenerate=ssi_degenerate)
    return total, report
