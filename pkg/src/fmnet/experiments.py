"""Ablation runs: variants, training and inference masking ratios, sampling strategy, encoder cost."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .masking import identity_plan, uniform_mask_plan
from .model import FMNetConfig, build_model
from .synthetic import Clip
from .training import evaluate, train

ROW_FIELDS = ("sweep", "arm", "seed", "n_retain", "ratio", "infer_mask", "REL", "RMSE", "OPW", "train_s")


@dataclass
class Budget:
    """Equal training budget shared by every arm of a sweep."""

    steps: int = 600
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


def _row(sweep, arm, cfg, seed, report, infer_mask, n_retain, train_s) -> dict:
    n = cfg.n_frames
    return {"sweep": sweep, "arm": arm, "seed": seed, "n_retain": n_retain, "ratio": round((n - n_retain) / n, 4),
            "infer_mask": infer_mask, "REL": report.total_depth["REL"], "RMSE": report.total_depth["RMSE"],
            "OPW": report.opw, "train_s": round(train_s, 3)}


def train_and_eval(cfg: FMNetConfig, train_clips: Sequence[Clip], test_clips: Sequence[Clip], steps: int,
                   infer: Sequence[tuple[str, int]] = (("uniform", -1),)):
    """Train one model, then evaluate it once per (infer_mask, n_retain); -1 means the trained retain."""
    model = build_model(cfg)
    t0 = time.perf_counter()
    train(model, train_clips, steps)
    elapsed = time.perf_counter() - t0
    reports = []
    for mask, keep in infer:
        keep = cfg.n_retain if keep < 0 else keep
        reports.append((mask, keep, evaluate(model, test_clips, infer_mask=mask, n_retain=keep, seed=cfg.seed)))
    return model, elapsed, reports


def variant_ablation(base: FMNetConfig, train_clips, test_clips, budget: Budget) -> list[dict]:
    rows = []
    for variant in ("baseline", "transformer", "fmnet"):
        for seed in budget.seeds:
            cfg = replace(base, variant=variant, seed=seed)
            _, secs, reports = train_and_eval(cfg, train_clips, test_clips, budget.steps)
            for mask, keep, rep in reports:
                keep = keep if variant == "fmnet" else cfg.n_frames
                rows.append(_row("variant", variant, cfg, seed, rep, mask if variant == "fmnet" else "none",
                                 keep, secs))
    return rows


def train_ratio_sweep(base: FMNetConfig, train_clips, test_clips, budget: Budget,
                      retains: Sequence[int] = (1, 2, 4, 6, 12)) -> list[dict]:
    rows = []
    for keep in retains:
        for seed in budget.seeds:
            cfg = replace(base, variant="fmnet", n_retain=keep, seed=seed)
            _, secs, reports = train_and_eval(cfg, train_clips, test_clips, budget.steps)
            for mask, k, rep in reports:
                rows.append(_row("train_ratio", f"retain={keep}", cfg, seed, rep, mask, k, secs))
    return rows


def inference_ratio_sweep(base: FMNetConfig, train_clips, test_clips, budget: Budget,
                          retains: Sequence[int] = (1, 2, 4, 6, 12)) -> list[dict]:
    """One model per seed trained at ``base.n_retain``; evaluated at every inference retain.

    retain = N is inference without masking (ratio 0).
    """
    rows = []
    infer = tuple(("uniform", k) for k in retains)
    for seed in budget.seeds:
        cfg = replace(base, variant="fmnet", seed=seed)
        _, secs, reports = train_and_eval(cfg, train_clips, test_clips, budget.steps, infer)
        for mask, k, rep in reports:
            rows.append(_row("infer_ratio", f"infer_retain={k}", cfg, seed, rep, mask, k, secs))
    return rows


def sampling_ablation(base: FMNetConfig, train_clips, test_clips, budget: Budget) -> list[dict]:
    """Random against uniform training masks at the same retain count."""
    rows = []
    for strategy in ("random", "uniform"):
        for seed in budget.seeds:
            cfg = replace(base, variant="fmnet", train_mask=strategy, seed=seed)
            _, secs, reports = train_and_eval(cfg, train_clips, test_clips, budget.steps)
            for mask, k, rep in reports:
                rows.append(_row("sampling", strategy, cfg, seed, rep, mask, k, secs))
    return rows


def medians(rows: Sequence[dict], key: str = "OPW") -> dict[str, float]:
    by_arm: dict[str, list[float]] = {}
    for r in rows:
        by_arm.setdefault(r["arm"], []).append(float(r[key]))
    return {arm: float(np.median(v)) for arm, v in by_arm.items()}


def write_rows(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


# ---------------------------------------------------------------------------
# cost


def encoder_attention_ops(cfg: FMNetConfig, n_retain: int) -> int:
    """Multiply-accumulates inside the encoder's attention stage for one clip forward."""
    model = build_model(replace(cfg, variant="fmnet"))
    frames = np.zeros((cfg.n_frames, 3, cfg.height, cfg.width))
    plan = identity_plan(cfg.n_frames) if n_retain == cfg.n_frames else uniform_mask_plan(cfg.n_frames, n_retain)
    with ag.no_grad(), ag.count_ops() as counter:
        model.forward(frames, plan)
    return int(counter["encoder/attention"])


def forward_seconds(cfg: FMNetConfig, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall-clock for one no-grad clip forward."""
    model = build_model(cfg)
    frames = np.random.default_rng(0).uniform(size=(cfg.n_frames, 3, cfg.height, cfg.width))
    plan = uniform_mask_plan(cfg.n_frames, cfg.n_retain)
    best = float("inf")
    with ag.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(frames, plan)
            best = min(best, time.perf_counter() - t0)
    return best
