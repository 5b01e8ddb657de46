"""Command-line front end: ``gen``, ``train``, ``eval`` and ``ablate``.

Every run writes ``run.json`` with the resolved configuration into its output
directory.  Exit codes: 0 success, 1 structured runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigError, DataError, DomainError, FMNetError
from .model import FMNetConfig, build_model, load_checkpoint, save_checkpoint
from .svg import write_line_plot
from .synthetic import SceneDistribution, build_dataset, load_dataset
from .training import evaluate, train

log = logging.getLogger("fmnet")

SWEEPS = ("variant", "train_ratio", "infer_ratio", "sampling")


# ---------------------------------------------------------------------------
# helpers


def _write_run_json(out: Path, args: argparse.Namespace, **resolved) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"args": echo, **resolved}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError("config file not found", path=str(path)) from None
    except json.JSONDecodeError as e:
        raise ConfigError("config file is not valid JSON", path=str(path), detail=str(e)) from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object", path=str(path))
    return doc


_FLAG_TO_FIELD = {"variant": "variant", "n": "n_frames", "retain": "n_retain", "channels": "channels",
                  "lr": "lr", "lr_decay_every": "lr_decay_every", "train_mask": "train_mask",
                  "enc_depth": "enc_depth", "grad_clip": "grad_clip"}


def resolve_model_config(args: argparse.Namespace, dataset=None) -> FMNetConfig:
    """Defaults, then the ``--config`` JSON, then explicit flags; image size follows the dataset."""
    d = FMNetConfig().to_dict()
    d.update(_read_config(args.config))
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            d[name] = value
    if "extractor_channels" not in _read_config(args.config) and getattr(args, "channels", None) is not None:
        d["extractor_channels"] = [max(args.channels // 2, 1), args.channels]
    d["seed"] = args.seed
    if dataset is not None:
        dist = dataset.manifest["distribution"]
        d["height"], d["width"] = dist["height"], dist["width"]
    return FMNetConfig.from_dict(d)


def _dataset(path):
    if path is None:
        raise ConfigError("--data is required")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    dist = SceneDistribution(height=args.size, width=args.size, length=args.length, noise=args.noise)
    n_test = min(args.test, args.clips)
    build_dataset(args.out, n_train=args.clips - n_test, n_test=n_test, seed=args.seed, dist=dist,
                  overwrite=args.overwrite)
    # run.json sits beside the manifest, so it is rewritten along with it
    _write_run_json(Path(args.out), args, distribution=dist.to_dict())
    print(f"wrote {args.clips} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = _dataset(args.data)
    cfg = resolve_model_config(args, ds)
    out = Path(args.out)
    _write_run_json(out, args, model=cfg.to_dict())
    model = build_model(cfg)
    clips = ds.split("train")
    rows = []

    def on_step(step, loss):
        rows.append((step, loss))
        if args.checkpoint_every and (step + 1) % args.checkpoint_every == 0:
            save_checkpoint(model, out / f"ckpt_{step + 1:06d}", step + 1)

    try:
        result = train(model, clips, args.steps, callback=on_step)
    except DomainError as e:
        _write_loss_csv(out / "loss.csv", rows)
        raise DomainError(f"training aborted at step {len(rows)}: {e}", step=len(rows), **e.context) from None
    _write_loss_csv(out / "loss.csv", rows, result.plans)
    save_checkpoint(model, out / "model", args.steps)
    print(f"trained {cfg.variant} for {args.steps} steps; final loss {rows[-1][1]:.4f}" if rows else "no steps run")
    return 0


def _write_loss_csv(path: Path, rows, plans=None) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss", "plan"))
        for i, (step, loss) in enumerate(rows):
            w.writerow((step, repr(float(loss)), plans[i] if plans else ""))


def cmd_eval(args) -> int:
    ds = _dataset(args.data)
    clips = ds.split(args.split)
    out = Path(args.out)
    if args.oracle_depth:
        report = evaluate(None, clips, predictor=lambda c: c.depth)
        resolved = {"mode": "oracle-depth"}
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --oracle-depth is given")
        model, step = load_checkpoint(args.checkpoint)
        if args.n is not None and args.n != model.cfg.n_frames:
            raise ConfigError("sequence length differs from the checkpoint", flag=args.n,
                              checkpoint=model.cfg.n_frames)
        dist = ds.manifest["distribution"]
        if (dist["height"], dist["width"]) != (model.cfg.height, model.cfg.width):
            raise ConfigError("dataset image size differs from the checkpoint",
                              dataset=[dist["height"], dist["width"]], checkpoint=[model.cfg.height, model.cfg.width])
        report = evaluate(model, clips, infer_mask=args.infer_mask, n_retain=args.retain, seed=args.seed)
        resolved = {"mode": "model", "model": model.cfg.to_dict(), "checkpoint_step": step}
    _write_run_json(out, args, **resolved)
    report.write_csv(out / "metrics.csv")
    report.write_pairs_csv(out / "opw_pairs.csv")
    print(f"OPW={report.opw:.6g} REL={report.total_depth['REL']:.6g} RMSE={report.total_depth['RMSE']:.6g}")
    return 0


def cmd_ablate(args) -> int:
    ds = _dataset(args.data)
    base = resolve_model_config(args, ds)
    budget = ex.Budget(steps=args.steps, seeds=tuple(args.seed + k for k in range(args.seeds)))
    sweeps = args.sweeps.split(",")
    unknown = sorted(set(sweeps) - set(SWEEPS))
    if unknown:
        raise ConfigError("unknown sweep", sweeps=unknown, known=list(SWEEPS))
    out = Path(args.out)
    _write_run_json(out, args, model=base.to_dict(), steps=budget.steps, seeds=list(budget.seeds))
    train_clips, test_clips = ds.split("train"), ds.split("test")
    summary = []
    n = base.n_frames
    retains = tuple(sorted({1, 2, 4, 6, n} & set(range(1, n + 1))))
    for sweep in sweeps:
        if sweep == "variant":
            rows = ex.variant_ablation(base, train_clips, test_clips, budget)
        elif sweep == "train_ratio":
            rows = ex.train_ratio_sweep(base, train_clips, test_clips, budget, retains)
        elif sweep == "infer_ratio":
            rows = ex.inference_ratio_sweep(base, train_clips, test_clips, budget, retains)
        else:
            rows = ex.sampling_ablation(base, train_clips, test_clips, budget)
        ex.write_rows(out / f"{sweep}.csv", rows)
        for key in ("OPW", "RMSE"):
            for arm, value in ex.medians(rows, key).items():
                summary.append((sweep, arm, key, value))
        if sweep in ("train_ratio", "infer_ratio"):
            _ratio_plots(out, sweep, rows)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sweep", "arm", "metric", "median"))
        w.writerows((s, a, k, repr(float(v))) for s, a, k, v in summary)
    for s, a, k, v in summary:
        if k == "OPW":
            print(f"{s:12s} {a:18s} median OPW {v:.4f}")
    return 0


def _ratio_plots(out: Path, sweep: str, rows) -> None:
    for key in ("OPW", "RMSE"):
        by_ratio: dict[float, list[float]] = {}
        for r in rows:
            by_ratio.setdefault(100.0 * r["ratio"], []).append(float(r[key]))
        xs = sorted(by_ratio)
        ys = [float(np.median(by_ratio[x])) for x in xs]
        write_line_plot(out / f"{sweep}_{key}.svg", {f"median {key}": (xs, ys)}, title=f"{sweep}: {key}",
                        xlabel="masking ratio (%)", ylabel=key)


# ---------------------------------------------------------------------------
# parser


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="per-run seed for every random sub-stream")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--config", type=Path, help="JSON file with model configuration fields")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--data", type=Path, help="dataset directory from `gen`")
    model.add_argument("--variant", choices=("baseline", "transformer", "fmnet"))
    model.add_argument("--n", type=_positive, help="frames per sequence")
    model.add_argument("--retain", type=_positive, help="frames kept by the mask")
    model.add_argument("--channels", type=_positive)
    model.add_argument("--enc-depth", dest="enc_depth", type=_positive)
    model.add_argument("--lr", type=float)
    model.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    model.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient norm cap (0 = off)")
    model.add_argument("--train-mask", dest="train_mask", choices=("random", "uniform"))

    p = argparse.ArgumentParser(prog="fmnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("--clips", type=_positive, default=70)
    g.add_argument("--test", type=int, default=10, help="clips held out as the test split")
    g.add_argument("--size", type=_positive, default=32)
    g.add_argument("--length", type=_positive, default=24)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common, model], help="train one variant")
    t.add_argument("--steps", type=int, default=600)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="depth metrics and OPW on a split")
    e.add_argument("--data", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--split", default="test")
    e.add_argument("--n", type=_positive, help="expected frames per sequence (checked against the checkpoint)")
    e.add_argument("--retain", type=_positive, help="inference retain count (default: the trained one)")
    e.add_argument("--infer-mask", dest="infer_mask", choices=("uniform", "random", "none"), default="uniform")
    e.add_argument("--oracle-depth", dest="oracle_depth", action="store_true",
                   help="score the ground-truth depth instead of a model")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common, model], help="variant, ratio and sampling sweeps")
    a.add_argument("--steps", type=int, default=600)
    a.add_argument("--seeds", type=_positive, default=5, help="number of seeds, starting at --seed")
    a.add_argument("--sweeps", default=",".join(SWEEPS))
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FMNetError as e:
        detail = json.dumps(e.context, sort_keys=True, default=str) if e.context else ""
        print(f"error: {e} {detail}".rstrip(), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
