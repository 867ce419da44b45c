"""``hsia`` command-line entry point.

Exit codes: 0 success, 2 configuration / shape / data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .checkpoint import FormatError, WeightImportError, import_weights, load_ntw, save_model, save_ntw
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import CubeFormatError, load_cube, save_cube
from .decoder import NumericalError
from .metrics import (
    LabelError,
    band_ablation,
    evaluate,
    improvement_error_map,
    metrics,
    write_ablation_csv,
    write_metrics_csv,
    write_ppm,
)
from .model import build_model
from .tensor import ContractError, ShapeError
from .train import predictor, train, train_split, val_split, write_loss_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_ERRORS = (ConfigError, ShapeError, ContractError, WeightImportError, FormatError, CubeFormatError,
                 LabelError, FileNotFoundError)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scenes(data: str | None, cfg: RunConfig):
    """HSC1 files from a directory (or one file); the synthetic validation split when ``data`` is None."""
    if data is None:
        return [(f"val_{i:04d}", scene) for i, scene in enumerate(val_split(cfg))]
    path = Path(data)
    files = sorted(path.glob("*.hsc")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .hsc files under {path}")
    return [(f.stem, load_cube(f)) for f in files]


def _trained_model(checkpoint: str, cfg: RunConfig):
    model = build_model(cfg.data.bands, cfg.data.classes, cfg.model, cfg.seed)
    unknown = import_weights(model, load_ntw(checkpoint))
    if unknown:
        raise WeightImportError(unknown)
    missing = set(model.state_dict()) - set(load_ntw(checkpoint))
    if missing:
        raise WeightImportError(sorted(missing)[:5])
    return model.eval()


def _config_for_checkpoint(args) -> RunConfig:
    """An explicit --config wins; otherwise reuse the config saved beside the checkpoint."""
    if args.config is None:
        saved = Path(args.checkpoint).with_name("config.txt")
        if saved.exists():
            args.config = str(saved)
    return _run_config(args)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(cfg)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    log_every = max(1, cfg.optim.log_every)

    def report(row):
        if not args.quiet and (row["step"] % log_every == 0 or row["step"] == 1):
            print(f"step {row['step']:>5}  lr {row['lr']:.3e}  l_seg {row['l_seg']:.4f}  "
                  f"l_aux {row['l_aux']:.4f}  l_total {row['l_total']:.4f}", flush=True)

    result = train(cfg, steps=args.steps, on_step=report)
    write_loss_csv(out / "loss.csv", result.log)
    save_model(out / "checkpoint.ntw", result.model)
    save_ntw(out / "frozen_init.ntw", result.initial_frozen)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    out = _out_dir(cfg)
    model = _trained_model(args.checkpoint, cfg)
    predict = predictor(model)
    scenes = _load_scenes(args.data, cfg)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for name, (cube, labels) in scenes:
        pred = predict(cube.data)
        (pred_dir / f"{name}.pgm").write_bytes(
            f"P5\n{pred.shape[1]} {pred.shape[0]}\n255\n".encode("ascii") + pred.astype(np.uint8).tobytes())
        write_ppm(pred_dir / f"{name}_errors.ppm", improvement_error_map(pred, pred, labels))
    m = metrics(evaluate(predict, [s for _, s in scenes], cfg.data.classes))
    write_metrics_csv(out / "metrics.csv", m)
    print(f"mIoU {m.miou:.4f}  aAcc {m.aacc:.4f}  mAcc {m.macc:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config_for_checkpoint(args)
    out = _out_dir(cfg)
    model = _trained_model(args.checkpoint, cfg)
    scenes = [s for _, s in _load_scenes(args.data, cfg)]
    base, drops = band_ablation(predictor(model), scenes, cfg.data.classes, range(cfg.data.bands))
    write_ablation_csv(out / "ablation.csv", drops)
    write_metrics_csv(out / "metrics.csv", base)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    results = []
    if args.ops or not args.full:
        results += gradcheck.run_op_suite(cfg.seed)
    if args.full or not args.ops:
        results += gradcheck.check_network(cfg.seed)
    text = gradcheck.format_results(results)
    print(text)
    if args.out is not None:
        (_out_dir(cfg) / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(cfg)
    splits = {"train": train_split, "val": val_split}
    rows = []
    for split in args.split:
        for i, (cube, labels) in enumerate(splits[split](cfg)):
            path = out / f"{split}_{i:04d}.hsc"
            save_cube(path, cube, labels)
            raw = path.read_bytes()
            rows.append(f"{path.name},{hashlib.sha256(raw).hexdigest()},{len(raw)}")
    (out / "manifest.csv").write_text("file,sha256,bytes\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (every artifact is written under it)")
    common.add_argument("--profile", choices=("desk", "full"), default="desk")

    parser = argparse.ArgumentParser(prog="hsia", description="Hyperspectral ViT-adapter segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoint + loss log")
    p.add_argument("--steps", type=int, help="stop after this many steps (schedule unchanged)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "metrics and per-image predictions"),
                             ("ablate-bands", cmd_ablate, "per-band, per-class IoU drop")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("checkpoint")
        p.add_argument("data", nargs="?", help="HSC1 file or directory; default: synthetic validation split")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", action="store_true", help="per-op checks only")
    p.add_argument("--full", action="store_true", help="end-to-end network check only")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", parents=[common], help="write synthetic HSC1 scenes and a manifest")
    p.add_argument("--split", nargs="+", choices=("train", "val"), default=["train", "val"])
    p.set_defaults(func=cmd_synth)
    return parser


def _threads() -> int | None:
    raw = os.environ.get("HSIA_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HSIA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("HSIA_THREADS must be at least 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
