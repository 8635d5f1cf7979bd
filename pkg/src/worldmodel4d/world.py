"""Procedural driving world with exact per-pixel depth.

The scene is an infinite ground plane plus axis-aligned boxes resting on it,
seen from an ego camera that moves according to a discrete action. Every
surface is ray-cast analytically and merged through a z-buffer, so the depth
written for a pixel is always the depth of the surface whose colour was
written there.

World axes: X right, Y up, Z forward. Camera axes: x right, y down, z forward.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ACTIONS, WorldConfig
from .metrics import Intrinsics
from .netpbm import read_pgm16, read_ppm, write_pgm16, write_ppm
from .rng import stream

SKY = -1
GROUND = 0
DEPTH_CODE_MAX = 65535


@dataclass(frozen=True)
class Box:
    x: float           # centre X
    z: float           # centre Z
    width: float       # extent along X
    height: float      # extent along Y (bottom sits on the ground)
    length: float      # extent along Z
    color: tuple[float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)  # (vx, vz) per frame

    def bounds(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        cx = self.x + self.velocity[0] * frame
        cz = self.z + self.velocity[1] * frame
        lo = np.array([cx - self.width / 2, 0.0, cz - self.length / 2])
        hi = np.array([cx + self.width / 2, self.height, cz + self.length / 2])
        return lo, hi


@dataclass(frozen=True)
class Pose:
    x: float
    z: float
    yaw: float  # radians, positive turns toward +X (right)

    @property
    def forward(self) -> np.ndarray:
        return np.array([np.sin(self.yaw), 0.0, np.cos(self.yaw)])

    @property
    def right(self) -> np.ndarray:
        return np.array([np.cos(self.yaw), 0.0, -np.sin(self.yaw)])


def ego_trajectory(action: str, frames: int, speed: float, yaw_rate: float) -> list[Pose]:
    """Camera poses for ``frames`` steps; stop holds still, turns change yaw by ``yaw_rate`` per frame."""
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}; expected one of {ACTIONS}")
    v = 0.0 if action == "stop" else speed
    w = {"stop": 0.0, "straight": 0.0, "left": -yaw_rate, "right": yaw_rate}[action]
    poses = []
    x = z = 0.0
    for m in range(frames):
        yaw = w * m
        if w == 0.0:
            poses.append(Pose(0.0, v * m, 0.0))
            continue
        poses.append(Pose(x, z, yaw))
        x += v * np.sin(yaw)
        z += v * np.cos(yaw)
    return poses


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    action: str
    boxes: tuple[Box, ...]
    intrinsics: Intrinsics
    frames: int = 5
    height: int = 32
    width: int = 64
    camera_height: float = 1.5
    speed: float = 0.8
    yaw_rate: float = np.deg2rad(6.0)
    far: float = 40.0

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        for m, pose in enumerate(self.poses()):
            eye = np.array([pose.x, self.camera_height, pose.z])
            for i, box in enumerate(self.boxes):
                lo, hi = box.bounds(m)
                if np.all(eye >= lo - 0.3) and np.all(eye <= hi + 0.3):
                    raise ValueError(f"box {i} intersects the camera at frame {m}")

    def poses(self) -> list[Pose]:
        return ego_trajectory(self.action, self.frames, self.speed, self.yaw_rate)


@dataclass
class SceneSequence:
    rgb: np.ndarray        # [M, 3, H, W] in [0, 1]
    depth: np.ndarray      # [M, 1, H, W] metric depth, +inf for sky
    action: str
    intrinsics: Intrinsics
    meta: dict = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @property
    def frames(self) -> int:
        return self.rgb.shape[0]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _camera_rays(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    K = spec.intrinsics
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    return (u - K.cx) / K.fx, (v - K.cy) / K.fy


def _world_rays(spec: SceneSpec, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    dx, dy = _camera_rays(spec)
    # camera z component is 1, so the ray parameter equals camera-frame depth
    D = dx[..., None] * pose.right + pose.forward + dy[..., None] * np.array([0.0, -1.0, 0.0])
    origin = np.array([pose.x, spec.camera_height, pose.z])
    return origin, D


def ground_hit(spec: SceneSpec, pose: Pose) -> np.ndarray:
    _, dy = _camera_rays(spec)
    with np.errstate(divide="ignore"):
        t = np.where(dy > 0, spec.camera_height / np.where(dy > 0, dy, 1.0), np.inf)
    return np.where(t <= spec.far, t, np.inf)


def box_hit(spec: SceneSpec, pose: Pose, box: Box, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-box slab test. Returns (depth or inf, index of the entry axis)."""
    origin, D = _world_rays(spec, pose)
    lo, hi = box.bounds(frame)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / D
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = D == 0.0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 1e-9) & (near <= spec.far)
    return np.where(hit, near, np.inf), tmin.argmax(axis=-1)


def _ground_color(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    road = np.abs(X) < 3.5
    base = np.where(road[..., None], np.array([0.38, 0.38, 0.40]), np.array([0.26, 0.50, 0.22]))
    checker = ((np.floor(Z / 2.0) + np.floor(X / 2.0)) % 2 == 0)
    base = base + np.where(checker, 0.04, -0.04)[..., None]
    lane = (np.abs(np.abs(X) - 1.75) < 0.15) & (np.mod(Z, 4.0) < 2.0)
    edge = np.abs(np.abs(X) - 3.4) < 0.12
    return np.where((lane | edge)[..., None], np.array([0.92, 0.92, 0.88]), base)


def _sky_color(spec: SceneSpec) -> np.ndarray:
    v = np.arange(spec.height, dtype=np.float64)[:, None] / max(spec.height - 1, 1)
    top, horizon = np.array([0.40, 0.60, 0.92]), np.array([0.78, 0.86, 0.97])
    a = np.clip(v / max(spec.intrinsics.cy / spec.height, 1e-3) * 0.5, 0, 1)[..., None]
    col = top * (1 - a) + horizon * a
    return np.broadcast_to(col, (spec.height, spec.width, 3))


_FACE_SHADE = np.array([0.72, 1.0, 0.88])  # entry through an X, Y or Z face


def render_frame(spec: SceneSpec, frame: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffered render of one frame: (rgb [3,H,W], depth [H,W], surface id [H,W])."""
    pose = spec.poses()[frame]
    origin, D = _world_rays(spec, pose)
    zbuf = np.full((spec.height, spec.width), np.inf)
    color = np.array(_sky_color(spec))
    surface = np.full((spec.height, spec.width), SKY, dtype=np.int64)

    t = ground_hit(spec, pose)
    write = t < zbuf
    with np.errstate(invalid="ignore"):
        P = origin + t[..., None] * D
        gcol = _ground_color(P[..., 0], P[..., 2])
    zbuf = np.where(write, t, zbuf)
    color = np.where(write[..., None], gcol, color)
    surface = np.where(write, GROUND, surface)

    for i, box in enumerate(spec.boxes):
        t, axis = box_hit(spec, pose, box, frame)
        write = t < zbuf
        bcol = np.asarray(box.color)[None, None, :] * _FACE_SHADE[axis][..., None]
        zbuf = np.where(write, t, zbuf)
        color = np.where(write[..., None], bcol, color)
        surface = np.where(write, i + 1, surface)

    rgb = np.clip(color, 0.0, 1.0).transpose(2, 0, 1)
    return np.ascontiguousarray(rgb), zbuf, surface


def surface_depth(spec: SceneSpec, frame: int, surface_id: int) -> np.ndarray:
    """Depth of a single surface in isolation (inf where the ray misses it)."""
    pose = spec.poses()[frame]
    if surface_id == GROUND:
        return ground_hit(spec, pose)
    return box_hit(spec, pose, spec.boxes[surface_id - 1], frame)[0]


def generate(spec: SceneSpec) -> SceneSequence:
    rgbs, depths = [], []
    for m in range(spec.frames):
        rgb, depth, _ = render_frame(spec, m)
        rgbs.append(rgb)
        depths.append(depth[None])
    return SceneSequence(rgb=np.stack(rgbs), depth=np.stack(depths), action=spec.action,
                         intrinsics=spec.intrinsics, meta={"seed": spec.seed})


# ---------------------------------------------------------------------------
# random scenes and datasets
# ---------------------------------------------------------------------------

def intrinsics_from(cfg: WorldConfig) -> Intrinsics:
    return Intrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy)


def random_scene(cfg: WorldConfig, seed: int, index: int, action: str | None = None) -> SceneSpec:
    """Scene ``index`` of the dataset seeded by ``seed``; depends on nothing else."""
    rng = stream(seed, "world", index)
    chosen = ACTIONS[int(rng.integers(len(ACTIONS)))]
    action = action or chosen
    n = int(rng.integers(cfg.min_boxes, cfg.max_boxes + 1))
    common = dict(seed=int(seed) * 1_000_003 + int(index), action=action, intrinsics=intrinsics_from(cfg),
                  frames=cfg.frames, height=cfg.height, width=cfg.width, camera_height=cfg.camera_height,
                  speed=cfg.speed, yaw_rate=float(np.deg2rad(cfg.yaw_rate_deg)), far=cfg.far)
    boxes: list[Box] = []
    attempts = 0
    while len(boxes) < n and attempts < 200:
        attempts += 1
        lateral = rng.uniform(-9.0, 9.0)
        box = Box(
            x=float(lateral),
            z=float(rng.uniform(5.0, 30.0)),
            width=float(rng.uniform(1.2, 2.6)),
            height=float(rng.uniform(1.0, 3.0)),
            length=float(rng.uniform(1.5, 4.5)),
            color=tuple(float(c) for c in rng.uniform(0.1, 0.95, size=3)),
            velocity=(0.0, float(rng.uniform(-cfg.box_speed, cfg.box_speed))) if cfg.box_speed > 0 else (0.0, 0.0),
        )
        try:
            SceneSpec(boxes=tuple(boxes) + (box,), **common)
        except ValueError:
            continue
        boxes.append(box)
    return SceneSpec(boxes=tuple(boxes), **common)


def quantize_depth(depth: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map finite depth to codes 1..65535 over the sequence's (min, max); sky -> 0."""
    valid = np.isfinite(depth)
    if not valid.any():
        return np.zeros(depth.shape, dtype=np.int64), 0.0, 0.0
    lo, hi = float(depth[valid].min()), float(depth[valid].max())
    span = hi - lo
    codes = np.zeros(depth.shape, dtype=np.int64)
    if span > 0:
        codes[valid] = 1 + np.round((depth[valid] - lo) / span * (DEPTH_CODE_MAX - 1)).astype(np.int64)
    else:
        codes[valid] = 1
    return codes, lo, hi


def dequantize_depth(codes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    out = lo + (codes.astype(np.float64) - 1.0) / (DEPTH_CODE_MAX - 1) * (hi - lo)
    return np.where(codes > 0, out, np.inf)


def write_frames(out_dir: str | Path, rgb: np.ndarray, depth: np.ndarray,
                 extra_sidecar: dict | None = None, first_index: int = 0) -> dict:
    """Write rgb_XX.ppm / depth_XX.pgm files plus the depth.json sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codes, lo, hi = quantize_depth(depth)
    for m in range(rgb.shape[0]):
        idx = first_index + m
        write_ppm(out_dir / f"rgb_{idx:02d}.ppm", rgb[m])
        write_pgm16(out_dir / f"depth_{idx:02d}.pgm", codes[m, 0] if codes.ndim == 4 else codes[m])
    sidecar = {"min": lo, "max": hi, "sky_code": 0, "code_min": 1, "code_max": DEPTH_CODE_MAX,
               "frames": [first_index + m for m in range(rgb.shape[0])]}
    if extra_sidecar:
        sidecar.update(extra_sidecar)
    (out_dir / "depth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def read_frames(seq_dir: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    seq_dir = Path(seq_dir)
    sidecar = json.loads((seq_dir / "depth.json").read_text())
    rgb, depth = [], []
    for idx in sidecar["frames"]:
        rgb.append(read_ppm(seq_dir / f"rgb_{idx:02d}.ppm"))
        depth.append(dequantize_depth(read_pgm16(seq_dir / f"depth_{idx:02d}.pgm"), sidecar["min"], sidecar["max"])[None])
    return np.stack(rgb), np.stack(depth), sidecar


def write_dataset(out_dir: str | Path, cfg: WorldConfig, count: int | None = None,
                  split_ratio: float | None = None, seed: int | None = None) -> dict:
    """Render ``count`` sequences to disk and write ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = cfg.count if count is None else count
    split_ratio = cfg.split_ratio if split_ratio is None else split_ratio
    seed = cfg.seed if seed is None else seed
    n_train = int(round(count * split_ratio))
    entries = []
    for i in range(count):
        spec = random_scene(cfg, seed, i)
        seq = generate(spec)
        name = f"seq_{i:04d}"
        write_frames(out_dir / name, seq.rgb, seq.depth)
        entries.append({"id": i, "dir": name, "action": spec.action, "frames": spec.frames,
                        "split": "train" if i < n_train else "val",
                        "intrinsics": spec.intrinsics.to_dict()})
    manifest = {"format": "worldmodel4d-dataset", "version": 1, "count": count, "seed": seed,
                "split_ratio": split_ratio, "height": cfg.height, "width": cfg.width,
                "frames": cfg.frames, "sequences": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir: str | Path, split: str | None = None) -> list[SceneSequence]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    out = []
    for entry in manifest["sequences"]:
        if split is not None and entry["split"] != split:
            continue
        rgb, depth, _ = read_frames(data_dir / entry["dir"])
        out.append(SceneSequence(rgb=rgb, depth=depth, action=entry["action"],
                                 intrinsics=Intrinsics.from_dict(entry["intrinsics"]),
                                 meta={"id": entry["id"], "split": entry["split"]}))
    return out


def make_sequences(cfg: WorldConfig, count: int, seed: int, start: int = 0) -> list[SceneSequence]:
    """In-memory counterpart of :func:`write_dataset` (no quantization)."""
    return [generate(random_scene(cfg, seed, i)) for i in range(start, start + count)]
