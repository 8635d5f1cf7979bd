import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldmodel4d import tensor as T
from worldmodel4d.tensor import Tensor, grad_check


def central_diff(f, x, h=1e-5):
    """Independent oracle: plain numpy central differences of a numpy function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_elementwise_examples():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(T.elementwise(a, b, "add").data, [4.0, 6.0])
    np.testing.assert_array_equal(T.elementwise(a, Tensor([0.0, 0.0]), "mul").data, [0.0, 0.0])


def test_grad_of_sum_product_matches_finite_differences():
    b = np.array([3.0, 5.0])
    expected = central_diff(lambda a: float(np.sum(a * b)), [1.0, 2.0])
    np.testing.assert_allclose(expected, [3.0, 5.0], atol=1e-9)
    a = Tensor([1.0, 2.0], requires_grad=True)
    (a * Tensor(b)).sum().backward()
    np.testing.assert_allclose(a.grad, expected, atol=1e-9)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2,\).*\(3,\)|\(3,\).*\(2,\)"):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_conv2d_hand_example():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, pad=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0 and out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv2d_zero_and_identity_kernels():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    zero = T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), pad=1)
    assert np.all(zero.data == 0.0)
    x1 = Tensor(rng.normal(size=(2, 1, 5, 4)))
    ident = T.conv2d(x1, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(ident.data, x1.data)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_non_integral_extent_errors():
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=0)
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_resample_examples():
    x = Tensor([[1.0, 3.0], [5.0, 7.0]])
    np.testing.assert_array_equal(T.resample(x, "down2").data, [[4.0]])
    rng = np.random.default_rng(2)
    y = Tensor(rng.normal(size=(2, 3, 4, 6)))
    np.testing.assert_array_equal(T.resample(T.resample(y, "up2"), "down2").data, y.data)


def test_resample_up2_gradient_is_all_fours():
    x0 = np.random.default_rng(3).normal(size=(1, 1, 3, 2))
    up = lambda a: np.repeat(np.repeat(a, 2, axis=-2), 2, axis=-1)
    expected = central_diff(lambda a: float(up(a).sum()), x0)
    np.testing.assert_allclose(expected, 4.0, atol=1e-8)
    x = Tensor(x0, requires_grad=True)
    T.resample(x, "up2").sum().backward()
    np.testing.assert_array_equal(x.grad, np.full_like(x0, 4.0))


def test_temporal_conv_mixes_frames_only():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 5, 3, 4))
    w = rng.normal(size=(2, 2, 3))
    out = T.temporal_conv1d(Tensor(x), Tensor(w)).data
    # reflect-padded reference along the frame axis
    xp = np.concatenate([x[:, :, 1:2], x, x[:, :, 3:4]], axis=2)
    ref = np.zeros_like(out)
    for m in range(5):
        for j in range(3):
            ref[:, :, m] += np.einsum("oc,bchw->bohw", w[:, :, j], xp[:, :, m + j])
    np.testing.assert_allclose(out, ref, atol=1e-12)
    # perturbing one spatial location only changes that location
    x2 = x.copy()
    x2[0, :, :, 1, 2] += 1.0
    diff = np.abs(T.temporal_conv1d(Tensor(x2), Tensor(w)).data - out).sum(axis=(0, 1, 2))
    assert diff[1, 2] > 0 and np.count_nonzero(diff) == 1


def test_backward_requires_scalar_and_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    with pytest.raises(T.AutodiffError):
        Tensor([1.0]).sum().backward()


def test_check_finite():
    with pytest.raises(T.NonFiniteError):
        Tensor([1.0, np.nan]).check_finite()


def _primitive_cases(rng):
    """(function, inputs) pairs covering every primitive op."""
    a = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(3, 3, 3, 3)) * 0.3
    b = rng.normal(size=3)
    wt = rng.normal(size=(3, 3, 3)) * 0.3
    v = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))
    probe = rng.normal(size=(2, 3, 4, 4))
    p = Tensor(probe)
    return {
        "add": (lambda x, y: ((x + y) * p).sum(), [a, rng.normal(size=a.shape)]),
        "sub": (lambda x, y: ((x - y) * p).sum(), [a, rng.normal(size=(1, 3, 1, 1))]),
        "mul": (lambda x, y: (x * y).sum(), [a, rng.normal(size=a.shape)]),
        "div": (lambda x, y: (x / y).sum(), [a, rng.uniform(1.0, 2.0, size=a.shape)]),
        "conv2d": (lambda x, k, c: (T.conv2d(x, k, c, pad=1) * p[:, :, :, :]).sum(), [a, w, b]),
        "conv2d_stride2": (lambda x, k: T.square(T.conv2d(x, k, None, stride=2, pad=1)).sum(),
                           [rng.normal(size=(2, 3, 5, 5)), w]),
        "temporal_conv1d": (lambda x, k, c: (T.temporal_conv1d(x, k, c, frame_axis=0) * Tensor(probe[:, :, :2, :2].repeat(2, axis=0))).sum(),
                            [rng.normal(size=(4, 3, 2, 2)), wt, b]),
        "down2": (lambda x: (T.resample(x, "down2") * Tensor(probe[:, :, :2, :2])).sum(), [a]),
        "up2": (lambda x: T.square(T.resample(x, "up2")).sum(), [a]),
        "silu": (lambda x: (T.silu(x) * p).sum(), [a]),
        "sigmoid": (lambda x: (T.sigmoid(x) * p).sum(), [a]),
        "channel_norm": (lambda x, g, c: (T.channel_norm(x, g, c) * p).sum(),
                         [a, rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)]),
        "matmul": (lambda x, y: T.square(x @ y).sum(), [v, m]),
        "concat_slice": (lambda x, y: (T.concat([x, y], axis=1)[:, 1:5] * Tensor(probe[:, 0, :, :])).sum(),
                         [rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 3, 4))]),
        "abs": (lambda x: (T.absolute(x) * p).sum(), [a]),
        "mean_reshape_transpose": (lambda x: T.square(x.transpose(0, 2, 1, 3).reshape(2, 4, 12).mean(axis=2)).sum(), [a]),
    }


@pytest.mark.parametrize("op", list(_primitive_cases(np.random.default_rng(0)).keys()))
def test_grad_check_primitives_over_seeds(op):
    for seed in range(20):
        fn, arrays = _primitive_cases(np.random.default_rng(seed))[op]
        inputs = [Tensor(arr.copy()) for arr in arrays]
        report = grad_check(fn, inputs, h=1e-5, tol=1e-4)
        assert report.passed, (op, seed, report)


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(1, 2, 4, 4))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)))

    def grad_of(fn):
        x = Tensor(x0.copy(), requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: T.silu(T.conv2d(x, w, pad=1)).sum()
    g = lambda x: T.square(T.resample(x, "down2")).sum()
    a, b = 1.7, -0.4
    combined = grad_of(lambda x: f(x) * a + g(x) * b)
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 3, 3)), requires_grad=True)
        out = T.silu(T.conv2d(x, w, pad=1)).mean()
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    r1, r2 = run(), run()
    for u, v in zip(r1, r2):
        assert u.tobytes() == v.tobytes()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_up_down_adjoint_pair(h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w))
    y = rng.normal(size=(2 * h, 2 * w))
    up = T.resample(Tensor(x), "up2").data
    down = T.resample(Tensor(y), "down2").data
    # <up(x), y> == 4 <x, down(y)>
    assert np.isclose(np.sum(up * y), 4.0 * np.sum(x * down), atol=1e-10)
