"""Command-line entry point: index, train, evaluate, bench, infer, extract-spectra."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from . import config as cfgmod
from . import plots
from .data import (
    DatasetIndex,
    IndexingError,
    PlanError,
    build_index,
    fixed_split,
    fraction_split,
)
from .evalbench import bench_timing, evaluate, render_report, roc_to_csv
from .metrics import metrics_report, roc_curve
from .models import BACKBONE_BUILDERS, FreqBranchConfig, build_model
from .preprocess import DecodeError, transform_image
from .seeding import derive_seed
from .spectral import (
    amplitude_phase,
    fft2,
    luminance,
    spectral_stack,
    to_grayscale_maps,
)
from .training import Trainer, TrainingDivergedError

log = logging.getLogger("dfdlab")

HISTORY_FORMAT = "dfdlab-history/1"
BENCH_FORMAT = "dfdlab-bench/1"


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML config file (flags override its values)")
    p.add_argument("--seed", type=int, default=None, help="master seed for this run")
    p.add_argument(
        "--out", required=out_required, help="output directory for run artifacts"
    )


def _resolve_config(args, overrides: dict | None = None) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(getattr(args, "config", None), overrides)
    if getattr(args, "seed", None) is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    return cfg


def _prepare_out(args, cfg: cfgmod.RunConfig) -> Path:
    """Create the run directory and snapshot the resolved config first."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(cfg, out / "config.yaml")
    (out / "reports").mkdir(exist_ok=True)
    return out


# --------------------------------------------------------------------------
# index


def cmd_index(args) -> int:
    if args.split_all:
        rule = fixed_split(args.split_all)
    else:
        try:
            parts = [float(x) for x in args.split.split(",")]
            if len(parts) != 3:
                raise ValueError("need exactly three fractions")
        except ValueError as e:
            return _fail(f"bad --split {args.split!r}: {e}")
        rule = fraction_split(*parts, seed=args.seed or 0)
    try:
        index, report = build_index(args.roots, rule)
    except IndexingError as e:
        return _fail(str(e))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    out.with_suffix(out.suffix + ".report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    counts = index.counts()
    for split in ("train", "val", "test"):
        real = counts.get((split, 1), 0)
        fake = counts.get((split, 0), 0)
        print(f"{split}: {real} real, {fake} fake")
    print(f"indexed {len(index)} files ({len(report.excluded)} excluded) -> {out}")
    return 0


# --------------------------------------------------------------------------
# train


def _model_overrides(args) -> dict:
    model: dict = {}
    if args.backbone:
        model["backbone_id"] = args.backbone
    if args.pretrained is not None:
        model["pretrained"] = args.pretrained
    overrides: dict = {"model": model} if model else {}
    if args.epochs is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if args.amp is not None:
        overrides.setdefault("amp", {})["enabled"] = args.amp
    return overrides


def cmd_train(args) -> int:
    cfg = _resolve_config(args, _model_overrides(args))
    if args.model == "hybrid" and cfg.model.freq_branch is None:
        cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, freq_branch=FreqBranchConfig())
        )
    if args.model == "plain" and cfg.model.freq_branch is not None:
        cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, freq_branch=None)
        )
    out = _prepare_out(args, cfg)
    try:
        index = DatasetIndex.load(args.index)
    except IndexingError as e:
        return _fail(str(e))

    try:
        if args.resume:
            trainer = ckpt.restore_trainer(args.resume, index)
            if args.epochs is not None:
                # the budget for the whole run, not just the remainder
                trainer.training_config = dataclasses.replace(
                    trainer.training_config, epochs=args.epochs
                )
            print(f"resumed from {args.resume} at epoch {trainer.epoch}")
        else:
            torch.manual_seed(derive_seed(cfg.train.seed, "model-init"))
            model = build_model(cfg.model)
            trainer = Trainer(
                model=model,
                model_config=cfg.model,
                index=index,
                epoch_spec=cfg.epoch_spec,
                preprocess_config=cfg.preprocess,
                optimizer_config=cfg.optimizer,
                scheduler_config=cfg.scheduler,
                amp_config=cfg.amp,
                training_config=cfg.train,
            )

        def show(row: dict) -> None:
            print(
                f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}  "
                f"val_loss {row['val_loss']:.4f}  lr {row['lr']:g}"
            )

        trainer.fit(
            epochs=args.epochs, checkpoint_dir=out / "checkpoints", log_fn=show
        )
    except (ckpt.CheckpointError, PlanError, DecodeError, TrainingDivergedError) as e:
        return _fail(str(e))

    lines = [json.dumps({"format": HISTORY_FORMAT})]
    lines += [json.dumps(row, sort_keys=True) for row in trainer.history]
    (out / "history.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if trainer.history:
        plots.plot_history(trainer.history, out / "reports" / "history.png")
    print(f"done: {trainer.epoch} epochs, best val_loss {trainer.best_val_loss:.4f}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    try:
        model, payload = ckpt.load_model(args.checkpoint)
    except ckpt.CheckpointError as e:
        return _fail(str(e))
    if args.config is None:
        # fall back to the preprocessing the checkpoint was trained with
        cfg = dataclasses.replace(
            cfg,
            preprocess=ckpt.preprocess_config_from_dict(payload["preprocess_config"]),
        )
    threshold = args.threshold if args.threshold is not None else cfg.eval_threshold
    cfg = dataclasses.replace(cfg, eval_threshold=threshold)
    out = _prepare_out(args, cfg)

    try:
        index = DatasetIndex.load(args.index)
        scores, labels = evaluate(
            model, index, args.split, cfg.preprocess, cfg.eval_batch_size
        )
        report = metrics_report(scores, labels, threshold)
    except (IndexingError, DecodeError, ValueError) as e:
        return _fail(str(e))

    name = args.name or payload["model_config"]["backbone_id"]
    text, payload_out = render_report([(name, report)])
    print(text)
    reports = out / "reports"
    (reports / "metrics.json").write_text(
        json.dumps(payload_out, indent=2) + "\n", encoding="utf-8"
    )
    curve = roc_curve(scores, labels)
    (reports / "roc.csv").write_text(roc_to_csv(curve), encoding="utf-8")
    plots.plot_roc(curve, report.auc, reports / "roc.png")
    return 0


# --------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    named = []
    try:
        for path in args.checkpoints:
            model, payload = ckpt.load_model(path)
            mc = payload["model_config"]
            name = mc["backbone_id"] + ("+freq" if mc["freq_branch"] else "")
            runs = [
                bench_timing(
                    model,
                    n_files=args.n_files,
                    batch_size=args.batch_size,
                    warmup_batches=args.warmup_batches,
                    config=cfg.preprocess,
                    seed=(args.seed or 0),
                )
                for _ in range(args.repeats)
            ]
            runs.sort(key=lambda r: r.total_seconds)
            named.append((name, runs[len(runs) // 2]))
    except (ckpt.CheckpointError, ValueError) as e:
        return _fail(str(e))

    width = max(len(n) for n, _ in named)
    print(f"{'Model':<{width}}  {'Evaluation Time (s)':>20}")
    for n, rep in named:
        print(f"{n:<{width}}  {rep.total_seconds:>20.2f}")
    payload_out = {
        "format": BENCH_FORMAT,
        "rows": [{"name": n, **rep.to_dict()} for n, rep in named],
    }
    (out / "reports" / "bench.json").write_text(
        json.dumps(payload_out, indent=2) + "\n", encoding="utf-8"
    )
    plots.plot_timing(
        [(n, rep.to_dict()) for n, rep in named], out / "reports" / "bench.png"
    )
    return 0


# --------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    try:
        model, payload = ckpt.load_model(args.checkpoint)
    except ckpt.CheckpointError as e:
        return _fail(str(e))
    if args.config is None:
        cfg = dataclasses.replace(
            cfg,
            preprocess=ckpt.preprocess_config_from_dict(payload["preprocess_config"]),
        )
    threshold = args.threshold if args.threshold is not None else cfg.eval_threshold
    hybrid = payload["model_config"]["freq_branch"] is not None

    failures = 0
    with torch.no_grad():
        for path in args.images:
            try:
                with Image.open(path) as img:
                    img.load()
                t = transform_image(img, cfg.preprocess, augment=False, draw_seed=0)
            except Exception as e:
                print(f"error: {path}: {e}", file=sys.stderr)
                failures += 1
                continue
            image_batch = torch.from_numpy(t.data[None])
            if hybrid:
                freq = torch.from_numpy(spectral_stack(t.data)[None])
                logit = model(image_batch, freq)
            else:
                logit = model(image_batch)
            prob = float(torch.sigmoid(logit.float().reshape(())))
            verdict = "real" if prob >= threshold else "fake"
            if args.format == "records":
                print(f"{path}|{prob:.6f}|{verdict}")
            else:
                print(f"{path}  p(real)={prob:.4f}  verdict={verdict}")
    return 1 if failures else 0


# --------------------------------------------------------------------------
# extract-spectra


def cmd_extract_spectra(args) -> int:
    out = Path(args.out)
    spectra_dir = out / "spectra"
    spectra_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        try:
            with Image.open(path) as img:
                img.load()
            img = img.convert("RGB")
            if args.size:
                img = img.resize((args.size, args.size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
            feats = amplitude_phase(fft2(luminance(arr)))
            amp_map, phase_map = to_grayscale_maps(feats)
        except Exception as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            failures += 1
            continue
        stem = Path(path).stem
        amp_path = spectra_dir / f"{stem}.amplitude.png"
        phase_path = spectra_dir / f"{stem}.phase.png"
        Image.fromarray(amp_map, mode="L").save(amp_path)
        Image.fromarray(phase_map, mode="L").save(phase_path)
        print(f"{path} -> {amp_path}, {phase_path}")
    return 1 if failures else 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfdlab",
        description="Train and evaluate real-vs-fake image classifiers, "
        "including a frequency-domain hybrid.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="scan corpus roots into an index file")
    p.add_argument("roots", nargs="+", help="directories containing real/ and fake/")
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--seed", type=int, default=None, help="seed for the split hash")
    p.add_argument(
        "--split",
        default="0.8,0.1,0.1",
        help="train,val,test fractions (default 0.8,0.1,0.1)",
    )
    p.add_argument(
        "--split-all",
        choices=("train", "val", "test"),
        help="assign every sample to one split instead of fractions",
    )
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="train a classifier from an index")
    _add_common(p)
    p.add_argument("--index", required=True, help="index file from `dfdlab index`")
    p.add_argument(
        "--model",
        choices=("plain", "hybrid"),
        default="plain",
        help="plain spatial classifier or spatial+frequency hybrid",
    )
    p.add_argument(
        "--backbone",
        choices=tuple(sorted(BACKBONE_BUILDERS)),
        default=None,
        help="spatial backbone",
    )
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument(
        "--amp", action=argparse.BooleanOptionalAction, default=None,
        help="mixed precision with dynamic loss scaling",
    )
    p.add_argument(
        "--pretrained", action=argparse.BooleanOptionalAction, default=None,
        help="start from published backbone weights",
    )
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split and report metrics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--name", default=None, help="row label in the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time evaluation for one or more checkpoints")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--n-files", type=int, default=3072)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--warmup-batches", type=int, default=2)
    p.add_argument("--repeats", type=int, default=1, help="report the median run")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("infer", help="classify individual image files")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument(
        "--format", choices=("text", "records"), default="text",
        help="records = pipe-delimited path|probability|verdict",
    )
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser(
        "extract-spectra", help="write log-amplitude and phase images"
    )
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="accepted for uniformity")
    p.add_argument(
        "--size", type=int, default=None,
        help="resize to this square size first (default: native size)",
    )
    p.set_defaults(func=cmd_extract_spectra)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
