"""Sinusoidal frame-position embeddings shaped like feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError


@lru_cache(maxsize=256)
def _embedding(pos: int, h: int, w: int, c: int) -> np.ndarray:
    k = np.arange(c // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * k / c)
    column = np.empty(c)
    column[0::2] = np.sin(angle)
    column[1::2] = np.cos(angle)
    out = np.broadcast_to(column[:, None, None], (c, h, w)).copy()
    out.setflags(write=False)
    return out


def positional_embedding(pos: int, h: int, w: int, c: int) -> Tensor:
    """Embedding for frame ``pos``: channel 2k = sin(pos / 10000^(2k/c)), 2k+1 = cos(...).

    The value is the same at every spatial location (x, y).
    """
    if c % 2:
        raise ConfigError("channel count must be even for positional embeddings", c=c)
    if pos < 0:
        raise ConfigError("position must be non-negative", pos=pos)
    return Tensor(_embedding(int(pos), int(h), int(w), int(c)))


def embedding_stack(positions: Sequence[int], h: int, w: int, c: int) -> np.ndarray:
    return np.stack([positional_embedding(p, h, w, c).data for p in positions])


@dataclass
class FeatureSequence:
    """Per-frame feature maps stacked as ``[M, c, h, w]`` plus their clip positions."""

    maps: Tensor
    positions: tuple[int, ...]

    def __post_init__(self):
        self.positions = tuple(int(p) for p in self.positions)
        if self.maps.ndim != 4:
            raise ShapeError("feature sequence must be [M, c, h, w]", shape=self.maps.shape)
        if len(self.positions) != self.maps.shape[0]:
            raise ShapeError("one position per map", maps=self.maps.shape[0], positions=len(self.positions))
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ShapeError("positions must be strictly increasing", positions=self.positions)

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.maps.shape[1:]


def add_positional(seq: FeatureSequence, positions: Sequence[int] | None = None) -> FeatureSequence:
    """p_i = f_i + PE(pos_i) using each frame's position in the original clip."""
    positions = seq.positions if positions is None else tuple(positions)
    if len(positions) != len(seq):
        raise ShapeError("positions length must match sequence length", seq=len(seq), positions=len(positions))
    c, h, w = seq.dims
    pe = Tensor(embedding_stack(positions, h, w, c))
    return FeatureSequence(ag.add(seq.maps, pe), positions)
