"""SGD training with per-step random frame masking, and clip/video inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DomainError, ShapeError
from .losses import LossConfig, MetricsReport, OPWConfig, VideoMetrics, depth_metrics, opw_pairs, sequence_loss
from .masking import MaskPlan, identity_plan, random_mask_plan, uniform_mask_plan
from .model import FMNet
from .synthetic import Clip, stream_seed

logger = logging.getLogger(__name__)


class SGD:
    """Plain gradient descent with step decay: lr * decay ** (step // decay_every).

    With ``clip_norm > 0`` the whole gradient is rescaled to at most that global
    L2 norm before the update.  This is stateless, so the optimizer stays plain SGD.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, decay: float = 0.1, decay_every: int = 0,
                 clip_norm: float = 0.0):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative", lr=lr)
        self.params = list(params)
        self.clip_norm = clip_norm
        self.lr0 = lr
        self.decay = decay
        self.decay_every = decay_every
        self.step_count = 0

    @property
    def lr(self) -> float:
        if self.decay_every <= 0:
            return self.lr0
        return self.lr0 * self.decay ** (self.step_count // self.decay_every)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))

    def step(self) -> None:
        lr = self.lr
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p in self.params:
            if p.grad is not None and lr != 0.0:
                p.data = p.data - (lr * scale) * p.grad
        self.step_count += 1


def plan_for(mode: str, n_frames: int, n_retain: int, rng: np.random.Generator | None) -> MaskPlan:
    if mode == "random":
        return random_mask_plan(n_frames, n_retain, rng)
    if mode == "uniform":
        return uniform_mask_plan(n_frames, n_retain)
    if mode == "none":
        return identity_plan(n_frames)
    raise ConfigError(f"unknown mask mode {mode!r}")


def train_step(model: FMNet, batch: Sequence[tuple[np.ndarray, np.ndarray]], plans: Sequence[MaskPlan | None],
               optimizer: SGD, loss_cfg: LossConfig | None = None) -> float:
    """One update on a batch of (frames [N,3,H,W], depth [N,1,H,W]) windows.

    The loss averages the per-frame loss over every frame of every window.  A
    non-finite loss raises before any parameter is touched.
    """
    cfg = model.cfg
    loss_cfg = loss_cfg or LossConfig(cfg.loss_lambda, cfg.loss_alpha)
    optimizer.zero_grad()
    losses = []
    for (frames, depth), plan in zip(batch, plans):
        pred = model.forward(frames, plan)
        losses.append(sequence_loss(pred, depth, loss_cfg))
    loss = ag.mean(ag.stack(losses))
    value = loss.item()
    if not math.isfinite(value):
        raise DomainError("non-finite training loss; parameters left unchanged", loss=value)
    ag.backward(loss)
    optimizer.step()
    return value


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    plans: list[str] = field(default_factory=list)


def sample_window(clip: Clip, n_frames: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    T = len(clip)
    if T < n_frames:
        raise ShapeError("clip shorter than the model window", clip=T, window=n_frames)
    t0 = int(rng.integers(0, T - n_frames + 1))
    return clip.frames[t0:t0 + n_frames], clip.depth[t0:t0 + n_frames]


def train(model: FMNet, clips: Sequence[Clip], steps: int, seed: int | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train for ``steps`` updates.  Data order and mask plans use separate seeded streams."""
    cfg = model.cfg
    seed = cfg.seed if seed is None else seed
    data_rng = np.random.default_rng(stream_seed(seed, "data"))
    mask_rng = np.random.default_rng(stream_seed(seed, "mask"))
    opt = SGD(model.parameters(), cfg.lr, cfg.lr_decay, cfg.lr_decay_every, cfg.grad_clip)
    result = TrainResult()
    for step in range(steps):
        batch, plans = [], []
        for _ in range(cfg.batch_size):
            clip = clips[int(data_rng.integers(0, len(clips)))]
            batch.append(sample_window(clip, cfg.n_frames, data_rng))
            if cfg.variant == "fmnet":
                plan = plan_for(cfg.train_mask, cfg.n_frames, cfg.n_retain, mask_rng)
            else:
                plan = identity_plan(cfg.n_frames)
            plans.append(plan)
            result.plans.append(plan.log_line())
        loss = train_step(model, batch, plans, opt)
        result.losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return result


# ---------------------------------------------------------------------------
# inference


def window_starts(T: int, n: int) -> list[int]:
    """Non-overlapping windows of n frames; a remainder is covered by a final window ending at T."""
    if T < n:
        raise ShapeError("video shorter than the model window", frames=T, window=n)
    starts = list(range(0, T - n + 1, n))
    if starts[-1] + n < T:
        starts.append(T - n)
    return starts


def predict_video(model: FMNet, frames: np.ndarray, infer_mask: str = "uniform", n_retain: int | None = None,
                  seed: int = 0) -> np.ndarray:
    """Depth for every frame of a video, processed in consecutive N-frame sequences."""
    cfg = model.cfg
    n = cfg.n_frames
    n_retain = cfg.n_retain if n_retain is None else n_retain
    rng = np.random.default_rng(stream_seed(seed, "infer-mask"))
    T = frames.shape[0]
    out = np.zeros((T, 1) + frames.shape[2:])
    done = 0
    with ag.no_grad():
        for t0 in window_starts(T, n):
            plan = plan_for(infer_mask, n, n_retain, rng) if cfg.variant == "fmnet" else identity_plan(n)
            depth = model.forward(frames[t0:t0 + n], plan).data
            # an overlapping tail window only fills frames not yet predicted
            out[done:t0 + n] = depth[done - t0:]
            done = t0 + n
    return out


def evaluate(model: FMNet | None, clips: Sequence[Clip], infer_mask: str = "uniform", n_retain: int | None = None,
             seed: int = 0, opw_cfg: OPWConfig = OPWConfig(),
             predictor: Callable[[Clip], np.ndarray] | None = None) -> MetricsReport:
    """Depth metrics and OPW per video; ``predictor`` overrides the model (e.g. oracle depth)."""
    report = MetricsReport()
    preds, gts = [], []
    for clip in clips:
        if predictor is not None:
            depth = predictor(clip)
        else:
            depth = predict_video(model, clip.frames, infer_mask, n_retain, seed)
        report.videos.append(VideoMetrics(clip.clip_id, depth_metrics(depth, clip.depth),
                                          opw_pairs(depth, clip.flow, clip.frames, opw_cfg)))
        preds.append(depth)
        gts.append(clip.depth)
    report.total_depth = depth_metrics(np.concatenate(preds), np.concatenate(gts))
    return report
