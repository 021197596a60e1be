"""Command-line entry point: generate / train / eval / ablate / gradcheck.

Exit codes (documented contract):
  0  success
  1  runtime failure (missing or unreadable inputs, I/O errors)
  2  usage or configuration error
  3  file format or version mismatch (dataset or checkpoint)
  4  training divergence (non-finite gradients or runaway loss)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as mdl
from . import phantom, training
from .config import ConfigError, RunConfig, load_config
from .model import CheckpointVersionError, ResRNNConfig
from .phantom import DatasetVersionError, SpecRanges
from .training import TrainConfig, TrainingDiverged

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_DIVERGED = 4

VARIANT_FLAGS = {
    "cnn": "cnn",
    "rnn-plain": "rnn_plain",
    "rnn-circle": "rnn_circle",
    "resrnn-plain": "resrnn_plain",
    "resrnn-circle": "resrnn_circle",
}

log = logging.getLogger("resrnn")


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("RWT_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rwt",
        description="Frame-wise regional wall thickness estimation on synthetic cine phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file; flags override it")
        p.add_argument("--out", help="output directory (or file for generate)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--workers", type=int, help="parallel fold workers (0 = all cores)")

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(g)
    g.add_argument("--subjects", type=int, help="number of subjects to generate")

    t = sub.add_parser("train", help="train one variant on a dataset file")
    common(t)
    t.add_argument("--data", required=True, help="dataset file from 'generate'")
    t.add_argument("--variant", choices=sorted(VARIANT_FLAGS), help="model variant")
    t.add_argument("--depth", type=int, help="temporal circle depth override")
    t.add_argument("--iters", type=int, help="training iterations override")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--spacing-mm", type=float, help="pixel spacing for millimetre columns")

    a = sub.add_parser("ablate", help="cross-validate all five variants on shared folds")
    common(a)
    a.add_argument("--data", required=True)
    a.add_argument("--spacing-mm", type=float)
    a.add_argument("--iters", type=int, help="training iterations override")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    common(c)
    c.add_argument("--threshold", type=float, default=1e-4)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("phantom", "seed", args.seed)
        cfg.set("train", "seed", args.seed)
    if getattr(args, "workers", None) is not None:
        cfg.set("run", "workers", args.workers)
    if getattr(args, "subjects", None) is not None:
        cfg.set("phantom", "subjects", args.subjects)
    if getattr(args, "variant", None) is not None:
        cfg.set("model", "variant", VARIANT_FLAGS[args.variant])
    if getattr(args, "depth", None) is not None:
        cfg.set("model", "temporal_depth", args.depth)
    if getattr(args, "iters", None) is not None:
        cfg.set("train", "max_iters", args.iters)
    if getattr(args, "spacing_mm", None) is not None:
        cfg.set("run", "spacing_mm", args.spacing_mm)
    return cfg


def _model_config(cfg: RunConfig) -> ResRNNConfig:
    m = cfg.values["model"]
    return ResRNNConfig(frames=m["frames"], regions=m["regions"],
                        input_size=m["input_size"], embed_dim=m["embed_dim"],
                        variant=m["variant"], temporal_depth=m["temporal_depth"],
                        spatial_depth=m["spatial_depth"], use_spatial=m["use_spatial"])


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.values["train"]
    return TrainConfig(base_lr=t["base_lr"], weight_decay=t["weight_decay"],
                       momentum=t["momentum"], lr_gamma=t["lr_gamma"],
                       lr_step=t["lr_step"], max_iters=t["max_iters"],
                       batch_subjects=t["batch_subjects"], grad_clip=t["grad_clip"],
                       seed=t["seed"], log_every=t["log_every"])


def _spec_ranges(cfg: RunConfig) -> SpecRanges:
    p = cfg.values["phantom"]
    return SpecRanges(inner_radius=(p["inner_radius_min"], p["inner_radius_max"]),
                      base_thickness=(p["base_thickness_min"], p["base_thickness_max"]),
                      amplitude=(p["amplitude_min"], p["amplitude_max"]),
                      noise_sigma=(p["noise_sigma_min"], p["noise_sigma_max"]),
                      contraction=(p["contraction_min"], p["contraction_max"]),
                      phase=(p["phase_min"], p["phase_max"]))


def _workers(cfg: RunConfig) -> int:
    w = cfg.get("run", "workers")
    return os.cpu_count() or 1 if w == 0 else w


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    (out_dir / "resolved_config.ini").write_text(cfg.to_ini())


def _load_dataset(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return phantom.read_dataset(path)


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    n = cfg.get("phantom", "subjects")
    if n < 1:
        raise UsageError(f"--subjects must be >= 1, got {n}")
    if not args.out:
        raise UsageError("--out is required for generate")
    subjects = phantom.generate_dataset(
        n, cfg.get("phantom", "seed"), ranges=_spec_ranges(cfg),
        image_size=cfg.get("phantom", "image_size"), frames=cfg.get("phantom", "frames"))
    phantom.write_dataset(args.out, subjects)
    out_dir = Path(args.out).resolve().parent
    (out_dir / (Path(args.out).name + ".resolved_config.ini")).write_text(cfg.to_ini())
    log.info("wrote %d subjects (%d frames) to %s", n, n * cfg.get("phantom", "frames"), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    dataset = _load_dataset(args.data)
    model_cfg = _model_config(cfg)
    params, curve = training.train(dataset, model_cfg, _train_config(cfg))
    mdl.save_checkpoint(out / "checkpoint.rwtc", model_cfg, params)
    with open(out / "loss_curve.tsv", "w") as fh:
        fh.write("iteration\tloss\n")
        for it, value in curve:
            fh.write(f"{it}\t{value:.8f}\n")
    log.info("trained %s for %d iterations; final loss %.6f",
             model_cfg.variant, _train_config(cfg).max_iters, curve[-1][1])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    dataset = _load_dataset(args.data)
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model_cfg, params = mdl.load_checkpoint(args.checkpoint)
    report = training.evaluate(params, model_cfg, dataset,
                               spacing_mm=cfg.get("run", "spacing_mm"))
    (out / "metrics.tsv").write_text(report.table_text())
    (out / "frame_curve.tsv").write_text(report.frame_curve_text())
    log.info("overall MAE %.6f normalized (%.3f px)", report.overall_mae(),
             report.overall_mae() * report.image_size)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _echo_config(cfg, out)
    dataset = _load_dataset(args.data)
    spacing = cfg.get("run", "spacing_mm")
    reports = training.run_ablation(dataset, _model_config(cfg), _train_config(cfg),
                                    spacing_mm=spacing, workers=_workers(cfg))
    (out / "ablation.tsv").write_text(
        training.ablation_table(reports, image_size=dataset[0].spec.image_size,
                                spacing_mm=spacing))
    for variant, report in reports.items():
        (out / f"metrics_{variant}.tsv").write_text(report.table_text())
        (out / f"frame_curve_{variant}.tsv").write_text(report.frame_curve_text())
    log.info("ablation finished; table written to %s", out / "ablation.tsv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    result = training.model_gradcheck(seed=cfg.get("train", "seed"))
    worst = max(result.values())
    for name, err in sorted(result.items()):
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{status}\t{name}\t{err:.3e}")
    print(f"max relative error {worst:.3e} (threshold {args.threshold:.1e})")
    if args.out:
        out = _out_dir(args)
        _echo_config(cfg, out)
        (out / "gradcheck.tsv").write_text(
            "\n".join(f"{k}\t{v:.6e}" for k, v in sorted(result.items())) + "\n")
    return EXIT_OK if worst < args.threshold else EXIT_RUNTIME


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DatasetVersionError, CheckpointVersionError,
            phantom.DatasetError, mdl.CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_FORMAT
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (OSError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
