"""Scale-invariant log-depth loss, depth accuracy metrics, and the OPW consistency metric."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, sample_bilinear_array
from .errors import ConfigError, DataError, ShapeError

RADICAND_FLOOR = 1e-18


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.85
    alpha: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0 or self.alpha <= 0:
            raise ConfigError("need 0 <= lambda <= 1 and alpha > 0", lam=self.lam, alpha=self.alpha)


@dataclass(frozen=True)
class OPWConfig:
    beta: float = 50.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive", beta=self.beta)


# ---------------------------------------------------------------------------
# training loss


def per_frame_scale_invariant(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Loss for each frame of ``pred`` [N, 1, H, W] against ``gt``; returns shape [N].

    u = log d - log d* over valid pixels (d* > 0); per frame
    L = alpha * sqrt(mean(u^2) - lambda * mean(u)^2).  A radicand below 1e-18
    contributes exactly 0 (and no gradient).
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 4:
        raise ShapeError("prediction and ground truth must both be [N, 1, H, W]", pred=pred.shape, gt=gt.shape)
    n_frames = gt.shape[0]
    valid = (gt > 0).reshape(n_frames, -1)
    counts = valid.sum(axis=1).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("a frame has no valid ground-truth pixels", frames=np.flatnonzero(counts == 0).tolist())
    log_gt = np.log(np.where(gt > 0, gt, 1.0)).reshape(n_frames, -1)
    u = ag.mul(ag.sub(ag.log(pred).reshape(n_frames, -1), Tensor(log_gt)), Tensor(valid.astype(np.float64)))
    inv_n = Tensor(1.0 / counts)
    mean_sq = ag.mul(ag.tsum(ag.square(u), axis=1), inv_n)
    mean_u = ag.mul(ag.tsum(u, axis=1), inv_n)
    radicand = ag.sub(mean_sq, ag.scale(ag.square(mean_u), cfg.lam))
    ok = np.flatnonzero(radicand.data >= RADICAND_FLOOR)
    losses = [Tensor(0.0)] * n_frames
    if ok.size:
        root = ag.scale(ag.sqrt(radicand[ok]), cfg.alpha)
        for k, i in enumerate(ok):
            losses[i] = root[k]
    return ag.stack(losses)


def scale_invariant_loss(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Scalar loss for one depth pair ``pred`` [1, H, W] vs ``gt`` [1, H, W]."""
    if pred.ndim != 3:
        raise ShapeError("expected a single [1, H, W] depth map", shape=pred.shape)
    return per_frame_scale_invariant(pred.reshape((1,) + pred.shape), np.asarray(gt)[None], cfg)[0]


def sequence_loss(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of the per-frame losses over every frame, masked or not."""
    return ag.mean(per_frame_scale_invariant(pred, gt, cfg))


# ---------------------------------------------------------------------------
# depth accuracy


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """REL, RMSE, log10, and threshold accuracies d1..d3 over pixels with gt > 0."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth shapes differ", pred=pred.shape, gt=gt.shape)
    valid = gt > 0
    if not valid.any():
        raise DataError("no valid ground-truth pixels")
    d, t = pred[valid], gt[valid]
    if np.any(d <= 0):
        raise DataError("predicted depth must be positive on valid pixels")
    ratio = np.maximum(d / t, t / d)
    return {
        "REL": float(np.mean(np.abs(d - t) / t)),
        "RMSE": float(np.sqrt(np.mean((d - t) ** 2))),
        "log10": float(np.mean(np.abs(np.log10(d) - np.log10(t)))),
        "d1": float(np.mean(ratio < 1.25)),
        "d2": float(np.mean(ratio < 1.25 ** 2)),
        "d3": float(np.mean(ratio < 1.25 ** 3)),
    }


# ---------------------------------------------------------------------------
# temporal consistency


def visibility_weight(frame_t1: np.ndarray, frame_t: np.ndarray, flow_back: np.ndarray,
                      cfg: OPWConfig = OPWConfig()) -> np.ndarray:
    """exp(-beta * ||F_{t+1} - warp(F_t)||^2) per pixel, squared norm over colour channels."""
    warped = sample_bilinear_array(frame_t, flow_back)
    err = np.sum((frame_t1 - warped) ** 2, axis=0)
    return np.exp(-cfg.beta * err)


def opw_terms(d_t, d_t1, flow_back, frame_t, frame_t1, cfg: OPWConfig = OPWConfig()) -> np.ndarray:
    """Per-pixel M * |d_{t+1} - warp(d_t)|, shape [H, W]; OPW_t is its mean."""
    d_t, d_t1 = np.asarray(d_t, dtype=np.float64), np.asarray(d_t1, dtype=np.float64)
    frame_t, frame_t1 = np.asarray(frame_t, dtype=np.float64), np.asarray(frame_t1, dtype=np.float64)
    flow_back = np.asarray(flow_back, dtype=np.float64)
    h, w = d_t.shape[-2:]
    if d_t.shape != (1, h, w) or d_t1.shape != (1, h, w):
        raise ShapeError("depths must be [1, H, W]", d_t=d_t.shape, d_t1=d_t1.shape)
    if frame_t.shape != (3, h, w) or frame_t1.shape != (3, h, w) or flow_back.shape != (2, h, w):
        raise ShapeError("frames must be [3, H, W] and flow [2, H, W]",
                         frame=frame_t.shape, flow=flow_back.shape)
    vis = visibility_weight(frame_t1, frame_t, flow_back, cfg)
    warped = sample_bilinear_array(d_t, flow_back)[0]
    return vis * np.abs(d_t1[0] - warped)


def opw_pair(d_t, d_t1, flow_back, frame_t, frame_t1, cfg: OPWConfig = OPWConfig()) -> float:
    """OPW_t: visibility-weighted mean absolute depth change along the backward flow."""
    return float(np.mean(opw_terms(d_t, d_t1, flow_back, frame_t, frame_t1, cfg)))


def opw_pairs(depths, flows, frames, cfg: OPWConfig = OPWConfig()) -> list[float]:
    """OPW_t for t = 0..T-2; ``flows[t]`` maps frame t+1 back to frame t."""
    depths, flows, frames = np.asarray(depths), np.asarray(flows), np.asarray(frames)
    T = depths.shape[0]
    if T < 2:
        raise DataError("OPW needs at least two frames", frames=T)
    if flows.shape[0] != T - 1 or frames.shape[0] != T:
        raise ShapeError("need T frames and T-1 flows", depths=depths.shape, flows=flows.shape, frames=frames.shape)
    return [opw_pair(depths[t], depths[t + 1], flows[t], frames[t], frames[t + 1], cfg) for t in range(T - 1)]


def opw_video(depths, flows, frames, cfg: OPWConfig = OPWConfig()) -> float:
    return math.fsum(opw_pairs(depths, flows, frames, cfg))


def opw_dataset(video_opws: Sequence[float]) -> float:
    return math.fsum(video_opws)


# ---------------------------------------------------------------------------
# reports


@dataclass
class VideoMetrics:
    video_id: str
    depth: dict[str, float]
    opw_t: list[float]

    @property
    def opw(self) -> float:
        return math.fsum(self.opw_t)

    @property
    def mean_opw_t(self) -> float:
        return self.opw / len(self.opw_t)


@dataclass
class MetricsReport:
    videos: list[VideoMetrics] = field(default_factory=list)
    total_depth: dict[str, float] = field(default_factory=dict)

    @property
    def opw(self) -> float:
        return opw_dataset([v.opw for v in self.videos])

    @property
    def mean_opw_t(self) -> float:
        pairs = [x for v in self.videos for x in v.opw_t]
        return math.fsum(pairs) / len(pairs)

    COLUMNS = ("video_id", "REL", "RMSE", "log10", "d1", "d2", "d3", "OPW", "mean_OPWt")

    def rows(self) -> list[list[str]]:
        def fmt(x: float) -> str:
            return repr(float(x))

        out = []
        for v in self.videos:
            out.append([v.video_id] + [fmt(v.depth[k]) for k in self.COLUMNS[1:7]] + [fmt(v.opw), fmt(v.mean_opw_t)])
        out.append(["_total"] + [fmt(self.total_depth[k]) for k in self.COLUMNS[1:7]]
                   + [fmt(self.opw), fmt(self.mean_opw_t)])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            writer.writerows(self.rows())

    def write_pairs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("video_id", "t", "OPW_t"))
            for v in self.videos:
                for t, x in enumerate(v.opw_t):
                    writer.writerow((v.video_id, t, repr(float(x))))
