import numpy as np
import pytest

from worldmodel4d.codec import Codec
from worldmodel4d.config import CodecConfig, Config, UNetConfig, WorldConfig, with_train
from worldmodel4d import world as W


def tiny_config(**train) -> Config:
    """Small enough for per-test model construction: 16x32 frames, 3 frames, 8x16 latents."""
    cfg = Config(
        world=WorldConfig(height=16, width=32, frames=3, fx=16.0, fy=16.0, cx=16.0, cy=5.0, count=6),
        codec=CodecConfig(latent_channels=4, downsample=2, width=8, steps=20, eval_every=10),
        unet=UNetConfig(base_channels=4, channel_mult=[1, 2, 2, 2], temb_dim=8),
    )
    return with_train(cfg, **{"lr": 1e-3, "ema_decay": 0.9, **train})


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_sequences(tiny_cfg):
    return W.make_sequences(tiny_cfg.world, 4, seed=0)


@pytest.fixture(scope="session")
def tiny_codec(tiny_cfg):
    codec = Codec(tiny_cfg.codec, np.random.default_rng(0))
    codec.latent_scale = 0.5
    return codec.requires_grad_(False)


ACCEPTANCE: list[str] = []


@pytest.fixture()
def record():
    """Collect one PASS/FAIL line per acceptance criterion, printed at the end of the run."""
    def _record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
