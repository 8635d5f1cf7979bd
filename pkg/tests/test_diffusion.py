import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldmodel4d import diffusion as D

SHAPE = (4, 3, 2, 5)


def test_schedule_invariants():
    s = D.NoiseSchedule(100, 1e-3, 0.2)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.betas[1] <= s.betas[-1] < 1
    assert s.betas[1] == 1e-3 and s.betas[100] == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        D.NoiseSchedule(10, 0.3, 0.2)


def test_timesteps_descend_to_one():
    s = D.NoiseSchedule(100)
    ts = s.timesteps(20)
    assert ts[0] == 100 and ts[-1] == 1 and len(ts) == 20
    assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ValueError):
        s.timesteps(101)


def test_forward_noise_limits_and_formula():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=SHAPE)
    eps = rng.normal(size=(SHAPE[0] - 1,) + SHAPE[1:])
    assert np.array_equal(D.noise_frames(z0, 1.0, eps), z0)
    pure = D.noise_frames(z0, 0.0, eps)
    assert np.array_equal(pure[1:], eps) and np.array_equal(pure[0], z0[0])
    quarter = D.noise_frames(z0, 0.25, eps)
    assert np.array_equal(quarter[0], z0[0])
    np.testing.assert_allclose(quarter[1:], 0.5 * z0[1:] + np.sqrt(0.75) * eps, rtol=0, atol=1e-15)


def test_forward_noise_checks_t():
    s = D.NoiseSchedule(10)
    z0 = np.zeros(SHAPE)
    with pytest.raises(ValueError):
        D.forward_noise(z0, 0, np.zeros((3,) + SHAPE[1:]), s)


def test_cfg_combine():
    rng = np.random.default_rng(1)
    u, c = rng.normal(size=SHAPE), rng.normal(size=SHAPE)
    assert np.array_equal(D.cfg_combine(u, c, 1.0), c)
    assert np.array_equal(D.cfg_combine(u, c, 0.0), u)
    assert np.array_equal(D.cfg_combine(np.zeros(SHAPE), c, 2.0), 2 * c)


@pytest.mark.parametrize("t", [1, 2, 17, 50, 99, 100])
def test_oracle_denoiser_recovers_z0(t):
    s = D.NoiseSchedule(100)
    rng = np.random.default_rng(t)
    z0 = rng.normal(size=SHAPE)
    eps = rng.normal(size=(SHAPE[0] - 1,) + SHAPE[1:])
    x_t = D.forward_noise(z0, t, eps, s)
    ab = s.alpha_bar[t]
    eps_hat = D.eps_from_x0(x_t[1:], z0[1:], ab)
    back = D.ddim_step(x_t[1:], eps_hat, ab, 1.0)
    assert np.max(np.abs(back - z0[1:])) <= 1e-9


def _oracle_model(z0, schedule):
    def model(x, t, action, final):
        eps = np.zeros_like(x)
        eps[1:] = D.eps_from_x0(x[1:], z0[1:], schedule.alpha_bar[t])
        return eps, np.full_like(x, 7.0) if final else None
    return model


def test_loop_with_oracle_lands_on_z0_and_keeps_condition():
    s = D.NoiseSchedule(100)
    rng = np.random.default_rng(3)
    z0 = rng.normal(size=SHAPE)
    vol = D.build_inference_volume(z0[0], SHAPE[0], seed=5)
    cond = vol[0].copy()
    ro = D.denoise_loop(vol, _oracle_model(z0, s), "straight", 1.0, 20, s)
    assert ro.z_x[0].tobytes() == cond.tobytes()
    assert np.max(np.abs(ro.z_x[1:] - z0[1:])) <= 1e-9
    assert np.all(ro.z_d == 7.0)
    assert ro.timesteps[-1] == 1


def test_condition_frame_untouched_by_any_model():
    s = D.NoiseSchedule(50)
    vol = D.build_inference_volume(np.random.default_rng(4).normal(size=SHAPE[1:]), 4, seed=1)
    cond = vol[0].copy()

    def wild(x, t, action, final):
        return np.random.default_rng(t).normal(size=x.shape) * 100, None

    ro = D.denoise_loop(vol, wild, "left", 3.0, 10, s)
    assert ro.z_x[0].tobytes() == cond.tobytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_inference_volume_seeded(seed):
    cond = np.ones(SHAPE[1:])
    a = D.build_inference_volume(cond, 4, seed)
    b = D.build_inference_volume(cond, 4, seed)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(a[0], cond)


def test_guidance_without_dropout_warns():
    s = D.NoiseSchedule(10)
    vol = D.build_inference_volume(np.zeros(SHAPE[1:]), 3, 0)
    zero = lambda x, t, a, f: (np.zeros_like(x), None)
    assert D.denoise_loop(vol, zero, "stop", 2.0, 5, s, trained_with_dropout=False).warnings
    assert not D.denoise_loop(vol, zero, "stop", 1.0, 5, s, trained_with_dropout=False).warnings


def test_guidance_queries_null_branch():
    s = D.NoiseSchedule(10)
    seen = []

    def model(x, t, action, final):
        seen.append(action)
        return np.zeros_like(x), None

    D.denoise_loop(D.build_inference_volume(np.zeros(SHAPE[1:]), 3, 0), model, "left", 1.5, 3, s)
    assert seen.count("null") == 3 and seen.count("left") == 3
