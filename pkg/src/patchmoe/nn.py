"""Parameter containers and the small layer set built on :mod:`patchmoe.tensor`."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Param, Tensor


class Module:
    """Base class that discovers parameters and buffers by attribute walk.

    Attribute order is insertion order, so parameter names are stable and
    checkpoints are reproducible.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, value in vars(self).items():
            yield from _walk_params(value, f"{prefix}{key}")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            yield from _walk_buffers(value, f"{prefix}{key}")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            yield from _walk_modules(value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_params(value, name):
    if isinstance(value, Param):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(item, f"{name}.{i}")


def _walk_buffers(value, name):
    if isinstance(value, BatchNormState):
        yield name + ".running_mean", value.running_mean
        yield name + ".running_var", value.running_var
    elif isinstance(value, Module):
        yield from value.named_buffers(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_buffers(item, f"{name}.{i}")


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk_modules(item)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 2.0) -> np.ndarray:
    """Uniform init with variance ``gain / fan_in`` (gain 2 suits ReLU layers)."""
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, gain: float = 2.0):
        w = np.zeros((cout, cin)) if zero_init else kaiming_uniform(rng, (cout, cin), cin, gain)
        self.weight = Param(w)
        self.bias = Param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class DWConv3x3(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.weight = Param(kaiming_uniform(rng, (channels, 3, 3), 9))
        self.bias = Param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.dwconv3x3(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None, eps: float = 1e-5):
        self.groups = T.default_groups(channels) if groups is None else groups
        if channels % self.groups:
            raise T.ConfigurationError(f"{channels} channels not divisible into {self.groups} groups")
        self.eps = eps
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.state = BatchNormState(channels, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training)
