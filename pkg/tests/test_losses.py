import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldmodel4d import losses as L
from worldmodel4d.tensor import Tensor, grad_check


def normal_equations_oracle(p, g):
    """Brute-force: build and solve the 2x2 system by Cramer's rule with python floats."""
    p, g = list(map(float, p)), list(map(float, g))
    n = len(p)
    a11, a12, a22 = sum(x * x for x in p), sum(p), float(n)
    r1, r2 = sum(x * y for x, y in zip(p, g)), sum(g)
    det = a11 * a22 - a12 * a12
    s = (r1 * a22 - a12 * r2) / det
    b = (a11 * r2 - a12 * r1) / det
    return sum(abs(s * x + b - y) for x, y in zip(p, g)) / n


def test_image_latent_loss_examples():
    rng = np.random.default_rng(0)
    eps = Tensor(rng.normal(size=(4, 2, 3, 5)))
    z = Tensor(rng.normal(size=(4, 2, 3, 5)))
    assert L.image_latent_loss(eps, eps, z, z).item() == 0.0
    c = 0.3
    shifted = L.image_latent_loss(Tensor(eps.data + c), eps, z, z, struct_weight=0.0).item()
    assert shifted == pytest.approx(c * c, abs=1e-15)
    offset = L.image_latent_loss(eps, eps, Tensor(z.data + 2.5), z, struct_weight=0.1).item()
    assert offset == pytest.approx(0.0, abs=1e-24)


def test_ssi_example_frozen_value():
    # exact rational solution: s = 23/10, b = -1/2, mean residual 1/4
    p, g = [1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 9.0]
    assert normal_equations_oracle(p, g) == pytest.approx(0.25, abs=1e-14)
    loss, degenerate = L.ssi_loss(Tensor(p), np.array(g))
    assert not degenerate
    assert loss.item() == pytest.approx(0.25, abs=1e-12)
    s, b, _ = L.affine_fit(np.array(p), np.array(g))
    assert s == pytest.approx(2.3, abs=1e-12) and b == pytest.approx(-0.5, abs=1e-12)


def test_ssi_zero_on_exact_affine_prediction():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 10, size=(1, 6, 7))
    loss, _ = L.ssi_loss(Tensor(0.3 * gt - 2.0), gt)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_ssi_degenerate_fallback():
    gt = np.array([1.0, 2.0, 4.0, 9.0])
    loss, degenerate = L.ssi_loss(Tensor(np.full(4, 0.7)), gt)
    assert degenerate
    assert loss.item() == pytest.approx(np.mean(np.abs(gt - gt.mean())), abs=1e-15)


def test_ssi_respects_mask():
    gt = np.array([1.0, 2.0, 3.0, 100.0])
    pred = np.array([2.0, 4.0, 6.0, -5.0])
    mask = np.array([True, True, True, False])
    loss, _ = L.ssi_loss(Tensor(pred), gt, mask)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.01, 50.0), b=st.floats(-20.0, 20.0))
def test_ssi_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.1, 5.0, size=(1, 5, 6))
    gt = rng.uniform(1.0, 20.0, size=(1, 5, 6))
    base = L.ssi_loss(Tensor(d), gt)[0].item()
    moved = L.ssi_loss(Tensor(a * d + b), gt)[0].item()
    assert moved == pytest.approx(base, abs=1e-9)
    assert base >= 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssi_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.normal(size=12), rng.normal(size=12)
    assert L.ssi_loss(Tensor(p), g)[0].item() == pytest.approx(normal_equations_oracle(p, g), abs=1e-12)


def test_total_loss_identity():
    lx, ld, ls = Tensor(0.37), Tensor(1.25), Tensor(0.81)
    _, rep = L.total_loss(lx, ld, ls, lam=0.5)
    assert rep.total == rep.l_x + rep.l_d + rep.lam * rep.l_ssi
    assert rep.to_dict()["lambda"] == 0.5


@pytest.mark.parametrize("which", ["image", "depth", "ssi"])
def test_losses_grad_check(which):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        if which == "image":
            eps_t, z = Tensor(rng.normal(size=(2, 2, 3, 4))), Tensor(rng.normal(size=(2, 2, 3, 4)))
            f = lambda e, zh: L.image_latent_loss(e, eps_t, zh, z, struct_weight=0.1)
            inputs = [Tensor(rng.normal(size=(2, 2, 3, 4))), Tensor(rng.normal(size=(2, 2, 3, 4)))]
        elif which == "depth":
            target = Tensor(rng.normal(size=(2, 2, 3, 4)))
            f = lambda zh: L.depth_latent_loss(zh, target)
            inputs = [Tensor(rng.normal(size=(2, 2, 3, 4)))]
        else:
            gt = rng.uniform(1, 5, size=(1, 4, 5))
            mask = rng.uniform(size=gt.shape) > 0.2
            f = lambda d: L.ssi_loss(d, gt, mask)[0]
            inputs = [Tensor(rng.uniform(0, 1, size=(1, 4, 5)))]
        report = grad_check(f, inputs, h=1e-5, tol=1e-4)
        assert report.passed, (which, seed, report)
