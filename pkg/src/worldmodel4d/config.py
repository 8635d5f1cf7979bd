"""Run configuration: dataclasses serialized as one JSON document.

The document has five sections (``world``, ``codec``, ``unet``,
``diffusion``, ``train``) and is validated against :data:`CONFIG_SCHEMA`
before being turned into dataclasses. ``train.lambda`` is spelled
``lam`` on the Python side.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema

ACTIONS = ("stop", "straight", "left", "right")
NULL_ACTION = "null"
ACTION_VOCAB = ACTIONS + (NULL_ACTION,)
MODES = ("image_only", "depth_only", "detach_grad", "joint")
FEEDBACK_TYPES = ("zero", "random", "direct")
ALL_SCALES = (1.0, 0.5, 0.25, 0.125)


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    height: int = 32
    width: int = 64
    frames: int = 5
    fx: float = 32.0
    fy: float = 32.0
    cx: float = 32.0
    cy: float = 10.0
    camera_height: float = 1.5
    speed: float = 0.8
    yaw_rate_deg: float = 6.0
    far: float = 40.0
    min_boxes: int = 3
    max_boxes: int = 6
    box_speed: float = 0.0
    count: int = 200
    split_ratio: float = 0.9
    seed: int = 0


@dataclass
class CodecConfig:
    latent_channels: int = 8
    downsample: int = 4
    width: int = 24
    steps: int = 1200
    lr: float = 2e-3
    batch: int = 8
    eval_every: int = 100
    seed: int = 0


@dataclass
class UNetConfig:
    base_channels: int = 16
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 2, 2])
    temb_dim: int = 48


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    sample_steps: int = 20
    guidance_scale: float = 1.0


@dataclass
class MLIConfig:
    inside: bool = True
    outside: bool = True
    scales: list[float] = field(default_factory=lambda: list(ALL_SCALES))
    feedback_type: str = "zero"
    decoder_sites: bool = True
    encoder_sites: bool = False
    outside_every_step: bool = False
    head: str = "mli"


@dataclass
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    action_dropout: float = 0.15
    lam: float = 0.5
    depth_weight: float = 1.0
    struct_weight: float = 0.1
    mode: str = "joint"
    grad_clip: float = 1.0
    steps: int = 2000
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 500
    mli: MLIConfig = field(default_factory=MLIConfig)


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["lambda"] = d["train"].pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        try:
            jsonschema.validate(d, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        train = dict(d.get("train", {}))
        if "lambda" in train:
            train["lam"] = train.pop("lambda")
        mli = MLIConfig(**train.pop("mli", {}))
        cfg = cls(
            world=WorldConfig(**d.get("world", {})),
            codec=CodecConfig(**d.get("codec", {})),
            unet=UNetConfig(**d.get("unet", {})),
            diffusion=DiffusionConfig(**d.get("diffusion", {})),
            train=TrainConfig(mli=mli, **train),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def validate(self) -> None:
        w, c = self.world, self.codec
        s = c.downsample
        if w.height % (s * 8) or w.width % (s * 8):
            raise ConfigError(f"frame size {w.height}x{w.width} must be divisible by {s * 8} (codec x 4 UNet scales)")
        if len(self.unet.channel_mult) != 4:
            raise ConfigError("unet.channel_mult must list exactly 4 scales")
        sc = sorted(self.train.mli.scales, reverse=True)
        if not sc or sc[0] != 1.0 or any(v not in ALL_SCALES for v in sc):
            raise ConfigError(f"mli.scales must be a subset of {ALL_SCALES} containing 1, got {self.train.mli.scales}")
        if sc != list(ALL_SCALES[:len(sc)]):
            raise ConfigError(f"mli.scales must be contiguous from scale 1, got {self.train.mli.scales}")
        if not (0 < self.diffusion.beta_start <= self.diffusion.beta_end < 1):
            raise ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1")
        if self.diffusion.sample_steps > self.diffusion.T:
            raise ConfigError("diffusion.sample_steps must not exceed diffusion.T")
        if w.min_boxes > w.max_boxes:
            raise ConfigError("world.min_boxes must not exceed world.max_boxes")


def with_train(cfg: Config, **kwargs) -> Config:
    """Copy of ``cfg`` with train fields (and ``mli`` sub-fields via ``mli={...}``) replaced."""
    mli_kw = kwargs.pop("mli", None)
    train = replace(cfg.train, **kwargs)
    if mli_kw:
        train = replace(train, mli=replace(cfg.train.mli, **mli_kw))
    return replace(cfg, train=train)


def toy_config(**train_overrides) -> Config:
    """Desk-scale settings used by the acceptance suite and scripts.

    Training from scratch needs a larger step size than the fine-tuning rate
    that ``TrainConfig`` defaults to.
    """
    cfg = Config()
    return with_train(cfg, **{"lr": 1e-3, "ema_decay": 0.99, **train_overrides})


def ablation_table() -> dict[str, dict]:
    """Train-section overrides for every ablation row (optimization mode, depth
    decoder, interaction scales, feedback direction, feedback layer type)."""
    rows: dict[str, dict] = {}
    for mode in MODES:
        rows[f"a/{mode}"] = {"mode": mode}
    rows["b/convention"] = {"mli": {"head": "plain", "inside": False, "outside": False}}
    rows["b/shared_latent"] = {}
    rows["c/1"] = {"mli": {"scales": [1.0]}}
    rows["c/1-1/2-1/4"] = {"mli": {"scales": [1.0, 0.5, 0.25]}}
    rows["c/1-1/2-1/4-1/8"] = {"mli": {"scales": list(ALL_SCALES)}}
    for inside in (False, True):
        for outside in (False, True):
            rows[f"d/in={int(inside)},out={int(outside)}"] = {"mli": {"inside": inside, "outside": outside}}
    for ft in FEEDBACK_TYPES:
        rows[f"e/{ft}"] = {"mli": {"feedback_type": ft}}
    return rows


def _props(dc) -> dict:
    out = {}
    for f in fields(dc):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t == "int":
            out[f.name] = {"type": "integer"}
        elif t == "float":
            out[f.name] = {"type": "number"}
        elif t == "bool":
            out[f.name] = {"type": "boolean"}
        elif t == "str":
            out[f.name] = {"type": "string"}
        elif t.startswith("list[int]"):
            out[f.name] = {"type": "array", "items": {"type": "integer", "minimum": 1}}
        elif t.startswith("list[float]"):
            out[f.name] = {"type": "array", "items": {"type": "number"}}
    return out


def _section(dc, **extra) -> dict:
    props = _props(dc)
    props.update(extra)
    return {"type": "object", "properties": props, "additionalProperties": False}


_train_props = _props(TrainConfig)
_train_props.pop("lam", None)
_train_props["lambda"] = {"type": "number", "minimum": 0}
_train_props["mode"] = {"enum": list(MODES)}
_train_props["lr"] = {"type": "number", "exclusiveMinimum": 0}
_train_props["action_dropout"] = {"type": "number", "minimum": 0, "maximum": 1}
_train_props["ema_decay"] = {"type": "number", "minimum": 0, "maximum": 1}
_train_props["steps"] = {"type": "integer", "minimum": 0}
_mli_section = _section(MLIConfig, feedback_type={"enum": list(FEEDBACK_TYPES)}, head={"enum": ["mli", "plain"]})
_train_props["mli"] = _mli_section

CONFIG_SCHEMA: dict = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "world": _section(WorldConfig, frames={"type": "integer", "minimum": 2},
                          height={"type": "integer", "minimum": 8}, width={"type": "integer", "minimum": 8},
                          fx={"type": "number", "exclusiveMinimum": 0}, fy={"type": "number", "exclusiveMinimum": 0},
                          split_ratio={"type": "number", "minimum": 0, "maximum": 1},
                          count={"type": "integer", "minimum": 1}),
        "codec": _section(CodecConfig),
        "unet": _section(UNetConfig),
        "diffusion": _section(DiffusionConfig, T={"type": "integer", "minimum": 1},
                              sample_steps={"type": "integer", "minimum": 1}),
        "train": {"type": "object", "properties": _train_props, "additionalProperties": False},
    },
}
