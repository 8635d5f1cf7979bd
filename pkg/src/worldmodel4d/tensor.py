"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a local backward closure on the output
tensor. ``Tensor.backward`` walks the recorded graph in reverse topological
order, so each node is visited exactly once per call. Leaf tensors that
require gradients accumulate into ``.grad`` across calls until
``zero_grad`` is used.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "AutodiffError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "elementwise",
    "matmul",
    "conv2d",
    "temporal_conv1d",
    "resample",
    "silu",
    "sigmoid",
    "channel_norm",
    "concat",
    "square",
    "absolute",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


# creation counter; backward visits nodes newest-first so that every node's
# incoming gradients are summed in a fixed order, independent of graph shape
_SEQ = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name
        self._seq = next(_SEQ)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def check_finite(self) -> Tensor:
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NonFiniteError(f"tensor {self.name or ''} of shape {self.shape} has {bad} non-finite values")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise AutodiffError("loss does not depend on any tensor with requires_grad=True")
        order = sorted(_toposort(self), key=lambda n: n._seq)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_SEQ)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _commutative_order(a: Tensor, b: Tensor, kind: str) -> tuple[Tensor, Tensor]:
    if a.shape == b.shape:
        return a, b
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out == a.shape:
        return a, b
    if out == b.shape:
        return b, a
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are incompatible")


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out != a.shape:
        raise ShapeError(f"{kind}: shape {b.shape} does not broadcast onto {a.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a, b = _commutative_order(a, b, "add")

    def backward(g):
        return (g if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (g if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a, b = _commutative_order(a, b, "mul")

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (g / b.data if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, b, kind: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                parts.append(g[tuple(sl)])
            else:
                parts.append(None)
        return parts

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# convolutions and resampling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2D cross-correlation on [B, Cin, H, W] inputs."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    span_h, span_w = H + 2 * pad - k, W + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: non-integral output extent for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    if k == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    else:
        cols = _im2col(x.data, k, stride, pad, Ho, Wo)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = w2.T @ g2
            if k == 1 and stride == 1 and pad == 0:
                gx = np.ascontiguousarray(gcols.reshape(cin, B, H, W).transpose(1, 0, 2, 3))
            else:
                gx = _col2im(gcols, x.shape, k, stride, pad, Ho, Wo)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    """Patch matrix of shape [Cin*k*k, B*Ho*Wo], built from k*k strided slice copies."""
    B, C, _, _ = x.shape
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(C * k * k, -1)


def _col2im(gcols: np.ndarray, shape, k: int, stride: int, pad: int, Ho: int, Wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch gradients back onto the input."""
    B, C, H, W = shape
    gc = gcols.reshape(C, k, k, B, Ho, Wo)
    gxp = np.zeros((C, B, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gc[:, i, j]
    return np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3))


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def temporal_conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                    frame_axis: int = 2, channel_axis: int = 1) -> Tensor:
    """Mix channels across neighbouring frames with a reflect-padded 1D kernel.

    ``w`` has shape [Cout, Cin, k]. The default axes follow the [B, C, M, H, W]
    video layout; pass ``frame_axis=0, channel_axis=1`` for [M, C, H, W].
    Spatial positions never interact.
    """
    cout, cin, k = w.shape
    if k % 2 != 1:
        raise ShapeError(f"temporal_conv1d: kernel size must be odd, got {k}")
    xd = np.moveaxis(x.data, (frame_axis, channel_axis), (0, 1))
    moved_shape = xd.shape
    M, C = moved_shape[0], moved_shape[1]
    if C != cin:
        raise ShapeError(f"temporal_conv1d: input channels {C} != weight in-channels {cin}")
    if M <= k // 2 and M > 1:
        raise ShapeError(f"temporal_conv1d: {M} frames too few for reflect padding with k={k}")
    xr = xd.reshape(M, C, -1)
    idx = _reflect_index(M, k // 2)
    xp = xr[idx]
    out = np.zeros((M, cout, xr.shape[2]))
    for j in range(k):
        out += np.einsum("oc,mcr->mor", w.data[:, :, j], xp[j:j + M], optimize=True)
    if bias is not None:
        out += bias.data[None, :, None]
    out_shape = (M, cout) + moved_shape[2:]
    result = np.moveaxis(out.reshape(out_shape), (0, 1), (frame_axis, channel_axis))
    result = np.ascontiguousarray(result)

    def backward(g):
        gm = np.moveaxis(g, (frame_axis, channel_axis), (0, 1)).reshape(M, cout, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.stack([np.einsum("mor,mcr->oc", gm, xp[j:j + M], optimize=True) for j in range(k)], axis=-1)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + M] += np.einsum("oc,mor->mcr", w.data[:, :, j], gm, optimize=True)
            gxr = np.zeros_like(xr)
            np.add.at(gxr, idx, gxp)
            gx = np.ascontiguousarray(np.moveaxis(gxr.reshape(moved_shape), (0, 1), (frame_axis, channel_axis)))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(result, parents, backward)


def resample(x: Tensor, mode: str) -> Tensor:
    """``down2``: 2x2 mean pooling. ``up2``: nearest-neighbour duplication.

    Both act on the last two axes and their backward rules are exact adjoints.
    """
    *lead, H, W = x.shape
    if mode == "down2":
        if H % 2 or W % 2:
            raise ShapeError(f"down2 needs even spatial extents, got {x.shape}")
        out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

        def backward(g):
            return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

        return _result(out, (x,), backward)
    if mode == "up2":
        out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

        def backward(g):
            return (g.reshape(*lead, H, 2, W, 2).sum(axis=(-3, -1)),)

        return _result(out, (x,), backward)
    raise ValueError(f"unknown resample mode {mode!r}")


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel (axis 1) to zero mean, unit variance over all other axes."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"channel_norm: affine shapes {gamma.shape}, {beta.shape} do not match {C} channels")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    n = x.data.size // C

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_input: int
    worst_index: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = (0.0, 0, ())
    with no_grad():
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = analytic[k].reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if err > worst[0]:
                    worst = (err, k, np.unravel_index(i, t.shape))
    for t in inputs:
        t.grad = None
    return GradCheckReport(max_rel_error=float(worst[0]), tol=tol, worst_input=worst[1],
                           worst_index=tuple(int(i) for i in worst[2]))
