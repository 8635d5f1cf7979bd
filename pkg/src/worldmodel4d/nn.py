"""Small parameter containers on top of :mod:`worldmodel4d.tensor`."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters and submodules, like torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int = 3,
                 stride: int = 1, init: str = "he"):
        fan_in = cin * k * k
        if init == "zero":
            w = np.zeros((cout, cin, k, k))
        elif init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        elif init == "small":
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(cout, cin, k, k))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = param(w)
        self.bias = param(np.zeros(cout))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, din: int, dout: int, init: str = "he"):
        scale = np.sqrt(2.0 / din) if init == "he" else np.sqrt(1.0 / din)
        w = np.zeros((din, dout)) if init == "zero" else rng.normal(0.0, scale, size=(din, dout))
        self.weight = param(w)
        self.bias = param(np.zeros((1, dout)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class ChannelNorm(Module):
    def __init__(self, channels: int):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_norm(x, self.gamma, self.beta)


class TemporalConv(Module):
    """Frame-axis convolution for [M, C, H, W] feature stacks, k=3 by default."""

    def __init__(self, rng: np.random.Generator, channels: int, k: int = 3, init: str = "small"):
        if init == "zero":
            w = np.zeros((channels, channels, k))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / (channels * k)), size=(channels, channels, k))
        self.weight = param(w)
        self.bias = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.temporal_conv1d(x, self.weight, self.bias, frame_axis=0, channel_axis=1)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, vocab: int, dim: int, scale: float = 0.5):
        self.table = param(rng.normal(0.0, scale, size=(vocab, dim)))

    def __call__(self, index: int) -> Tensor:
        return self.table[index:index + 1]


def copy_parameters(dst: Module, src: Module) -> None:
    """Copy parameter values from ``src`` into ``dst`` (matching names)."""
    src_params = src.state_dict()
    for name, p in dst.named_parameters():
        p.data = src_params[name].data.copy()
