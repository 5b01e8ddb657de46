"""Frame mask plans, sequence splitting, and completion with a shared mask token."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .nn import Module, uniform_init
from .posenc import FeatureSequence, embedding_stack


@dataclass(frozen=True)
class MaskPlan:
    n_frames: int
    retained: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "retained", tuple(int(i) for i in self.retained))
        r = self.retained
        if not 1 <= len(r) <= self.n_frames:
            raise ConfigError("need between 1 and N retained frames", n_frames=self.n_frames, retained=r)
        if any(b <= a for a, b in zip(r, r[1:])) or r[0] < 0 or r[-1] >= self.n_frames:
            raise ConfigError("retained indices must be strictly increasing in [0, N-1]", retained=r)

    @property
    def ratio(self) -> float:
        return (self.n_frames - len(self.retained)) / self.n_frames

    @property
    def masked(self) -> tuple[int, ...]:
        keep = set(self.retained)
        return tuple(i for i in range(self.n_frames) if i not in keep)

    def log_line(self) -> str:
        keep = ",".join(str(i) for i in self.retained)
        return f"mask N={self.n_frames} keep={keep} ratio={100.0 * self.ratio:.2f}"


def _check(n_frames: int, n_retain: int) -> None:
    if n_frames < 1 or not 1 <= n_retain <= n_frames:
        raise ConfigError("n_retain must lie in [1, N]", n_frames=n_frames, n_retain=n_retain)


def identity_plan(n_frames: int) -> MaskPlan:
    return MaskPlan(n_frames, tuple(range(n_frames)))


def random_mask_plan(n_frames: int, n_retain: int, rng_seed) -> MaskPlan:
    """Retain ``n_retain`` frames drawn uniformly without replacement.

    ``rng_seed`` may be an int seed or a ``numpy.random.Generator`` (consumed).
    """
    _check(n_frames, n_retain)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.choice(n_frames, size=n_retain, replace=False)
    return MaskPlan(n_frames, tuple(sorted(int(i) for i in keep)))


def uniform_mask_plan(n_frames: int, n_retain: int) -> MaskPlan:
    """Evenly spaced retention: index k -> floor((k+1) N / (n_retain+1)) - 1.

    N=12 keeps {3, 7}.  Keeping every frame is the identity plan (the spacing
    formula would run off the front of the clip in that case).
    """
    _check(n_frames, n_retain)
    if n_retain == n_frames:
        return identity_plan(n_frames)
    keep = [(k + 1) * n_frames // (n_retain + 1) - 1 for k in range(n_retain)]
    return MaskPlan(n_frames, tuple(keep))


class MaskToken(Module):
    """The single learnable map that stands in for every masked frame."""

    def __init__(self, c: int, h: int, w: int, rng: np.random.Generator):
        super().__init__()
        self.value = Tensor(uniform_init(rng, (c, h, w), c * 9), requires_grad=True)


def apply_mask(p_full: FeatureSequence, plan: MaskPlan) -> FeatureSequence:
    if len(p_full) != plan.n_frames:
        raise ShapeError("sequence length differs from plan", seq=len(p_full), plan=plan.n_frames)
    if plan.retained == tuple(range(plan.n_frames)):
        return p_full
    idx = np.array(plan.retained)
    return FeatureSequence(p_full.maps[idx], tuple(p_full.positions[i] for i in plan.retained))


def fill_masked(t_um: FeatureSequence, plan: MaskPlan, token: MaskToken) -> Tensor:
    """Full-length ``[N, c, h, w]`` stack before re-embedding: retained slots keep
    their encoder output, every masked slot is the same token tensor."""
    if len(t_um) != len(plan.retained):
        raise ShapeError("encoder output length differs from retained count",
                         got=len(t_um), retained=len(plan.retained))
    if t_um.dims != token.value.shape:
        raise ShapeError("token shape differs from feature maps", token=token.value.shape, maps=t_um.dims)
    slot = {pos: k for k, pos in enumerate(plan.retained)}
    frames = [t_um.maps[slot[i]] if i in slot else token.value for i in range(plan.n_frames)]
    return ag.stack(frames, axis=0)


def complete_sequence(t_um: FeatureSequence, plan: MaskPlan, token: MaskToken) -> FeatureSequence:
    """Fill masked slots with the token, then add embeddings for positions 0..N-1 to all slots."""
    full = fill_masked(t_um, plan, token)
    c, h, w = t_um.dims
    positions = tuple(range(plan.n_frames))
    pe = Tensor(embedding_stack(positions, h, w, c))
    return FeatureSequence(ag.add(full, pe), positions)
