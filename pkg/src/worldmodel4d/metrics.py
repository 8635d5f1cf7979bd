"""Depth metrics, Frechet feature distance and depth-to-point-cloud conversion."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .losses import affine_fit


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


# ---------------------------------------------------------------------------
# depth metrics
# ---------------------------------------------------------------------------

MIN_ALIGNED_DEPTH = 1e-6


def _prepare(d_pred, d_gt, mask, align: bool):
    d_pred = np.asarray(d_pred, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.shape != d_gt.shape:
        raise ValueError(f"prediction shape {d_pred.shape} != ground truth shape {d_gt.shape}")
    if mask is None:
        mask = np.isfinite(d_gt) & (d_gt > 0)
    mask = np.asarray(mask, dtype=bool) & np.isfinite(d_gt) & (d_gt > 0)
    if not mask.any():
        raise ValueError("no valid pixels")
    if align:
        s, b, _ = affine_fit(d_pred, d_gt, mask)
        d_pred = np.maximum(s * d_pred + b, MIN_ALIGNED_DEPTH)
    return d_pred[mask], d_gt[mask]


def absrel(d_pred, d_gt, mask=None, align: bool = True) -> float:
    """Mean |pred - gt| / gt over valid pixels, after affine alignment by default.

    Reported as a raw ratio (the x1e-2 scaling some tables use is not applied).
    """
    p, g = _prepare(d_pred, d_gt, mask, align)
    return float(np.mean(np.abs(p - g) / g))


def delta_k(d_pred, d_gt, mask=None, k: int = 1, align: bool = True) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) strictly below 1.25**k."""
    p, g = _prepare(d_pred, d_gt, mask, align)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < 1.25 ** k))


def depth_metrics(d_pred, d_gt, mask=None, align: bool = True) -> dict:
    return {
        "absrel": absrel(d_pred, d_gt, mask, align),
        "delta1": delta_k(d_pred, d_gt, mask, 1, align),
        "delta2": delta_k(d_pred, d_gt, mask, 2, align),
        "delta3": delta_k(d_pred, d_gt, mask, 3, align),
    }


# ---------------------------------------------------------------------------
# distribution distance
# ---------------------------------------------------------------------------

def gaussian_fit(features: np.ndarray, reg: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    d = features.shape[1]
    if features.shape[0] > 1:
        sigma = np.cov(features, rowvar=False).reshape(d, d)
    else:
        sigma = np.zeros((d, d))
    return mu, sigma + reg * np.eye(d)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^1/2).

    tr((Sa Sb)^1/2) equals the trace of the square root of the symmetric
    product Sa^1/2 Sb Sa^1/2, which is taken by eigendecomposition.
    """
    root_a = _psd_sqrt(sigma_a)
    middle = root_a @ sigma_b @ root_a
    w = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_feature_distance(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray],
                             feature_fn: Callable[[np.ndarray], np.ndarray], reg: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of ``feature_fn`` features of two image sets."""
    fa = feature_fn(np.stack(list(set_a)))
    fb = feature_fn(np.stack(list(set_b)))
    return frechet_distance(*gaussian_fit(fa, reg), *gaussian_fit(fb, reg))


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    xyz: np.ndarray          # [N, 3]
    rgb: np.ndarray          # [N, 3] in [0, 1]
    frame_index: np.ndarray  # [N] int

    def __post_init__(self):
        if len(self.xyz) and not np.all(self.xyz[:, 2] > 0):
            raise ValueError("point cloud contains points with z <= 0")

    def __len__(self) -> int:
        return len(self.xyz)

    def frame(self, m: int) -> "PointCloud":
        sel = self.frame_index == m
        return PointCloud(self.xyz[sel], self.rgb[sel], self.frame_index[sel])

    @staticmethod
    def merge(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return PointCloud(np.concatenate([c.xyz for c in clouds]), np.concatenate([c.rgb for c in clouds]),
                          np.concatenate([c.frame_index for c in clouds]))


def backproject(depth: np.ndarray, rgb: np.ndarray | None, K: Intrinsics, frame_index: int = 0,
                mask: np.ndarray | None = None) -> PointCloud:
    """Lift every valid pixel (u, v) with depth z to ((u-cx) z/fx, (v-cy) z/fy, z)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[0]
    H, W = depth.shape
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool).reshape(H, W)
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    if rgb is None:
        colors = np.ones((len(z), 3))
    else:
        colors = np.asarray(rgb, dtype=np.float64)[:, v, u].T
    return PointCloud(np.stack([x, y, z], axis=1), colors, np.full(len(z), frame_index, dtype=np.int64))


def reproject(pc: PointCloud, K: Intrinsics, height: int, width: int) -> np.ndarray:
    """Z-buffer the points back into an [H, W] depth map (inf where empty)."""
    out = np.full((height, width), np.inf)
    if not len(pc):
        return out
    x, y, z = pc.xyz.T
    u = np.rint(K.fx * x / z + K.cx).astype(np.int64)
    v = np.rint(K.fy * y / z + K.cy).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    np.minimum.at(out, (v[inside], u[inside]), z[inside])
    return out


def _ply_bytes(pc: PointCloud, with_frame: bool) -> bytes:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pc)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if with_frame:
        lines.append("property int frame_index")
    lines.append("end_header")
    cols = np.clip(np.round(pc.rgb * 255), 0, 255).astype(np.int64)
    for i in range(len(pc)):
        x, y, z = pc.xyz[i]
        row = f"{x:.6f} {y:.6f} {z:.6f} {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
        if with_frame:
            row += f" {int(pc.frame_index[i])}"
        lines.append(row)
    return ("\n".join(lines) + "\n").encode("ascii")


def export_ply(pc: PointCloud, path: str | Path, per_frame: bool = True) -> list[Path]:
    """Write the merged 4D cloud (with ``frame_index``) and, optionally, one file per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_ply_bytes(pc, with_frame=True))
    written = [path]
    if per_frame:
        for m in np.unique(pc.frame_index):
            fp = path.with_name(f"{path.stem}_frame{int(m):02d}{path.suffix}")
            fp.write_bytes(_ply_bytes(pc.frame(int(m)), with_frame=False))
            written.append(fp)
    return written


def read_ply(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Minimal ASCII PLY reader returning (property names, [N, P] values)."""
    text = Path(path).read_text().splitlines()
    if text[0] != "ply" or text[1] != "format ascii 1.0":
        raise ValueError("not an ASCII PLY 1.0 file")
    props, n, i = [], 0, 2
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        i += 1
    rows = [list(map(float, line.split())) for line in text[i + 1:i + 1 + n]]
    return props, np.array(rows).reshape(n, len(props))
