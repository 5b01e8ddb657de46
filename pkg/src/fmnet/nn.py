"""Tiny module system: named parameter trees and a same-padded conv layer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, ShapeError


class Module:
    """Attribute-registered parameter container.

    Assigning a ``Tensor`` with ``requires_grad`` registers a parameter, a
    ``Module`` registers a child.  Lists are not registered; use
    :meth:`add_module` or :class:`ModuleList`.  Iteration order is assignment order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module", attr: str | None = None) -> "Module":
        """Register ``module`` under ``name``; optionally expose it as attribute ``attr``."""
        self._children[name] = module
        if attr is not None:
            object.__setattr__(self, attr, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise DataError("state is missing parameters", missing=missing)
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name} shape mismatch", expected=p.shape, got=state[name].shape)
            p.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


HE_GAIN = float(np.sqrt(6.0))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """k x k same-padded convolution; kernel ~ U(+-gain/sqrt(fan_in)), bias zero.

    ``gain=sqrt(6)`` is the He-uniform bound, which keeps activation variance
    roughly constant through a stack of conv+relu layers.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, stride: int = 1,
                 gain: float = 1.0):
        super().__init__()
        self.stride = stride
        fan_in = c_in * kernel * kernel
        self.w = Tensor(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in, gain), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.w, self.b, stride=self.stride)

    def zero_(self) -> "Conv2d":
        self.w.data[...] = 0.0
        self.b.data[...] = 0.0
        return self
