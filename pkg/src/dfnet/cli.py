"""Command-line front end: data generation, training, inference, evaluation.

Every command takes ``--config`` (flat key=value file, see dfnet.config),
``--seed``, and ``--out``, and writes a ``manifest.txt`` beside its outputs.
The manifest is the fully resolved configuration plus ``meta.*`` lines for
the command name, the seed, and library versions, so it can be fed back in
as a config file to reproduce the run.

Exit codes: 0 success; 2 for configuration, usage, or file-format problems;
3 when training or inference hits non-finite values.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import PIL
import scipy

from . import __version__
from .config import RunConfig, config_lines, default_config, load_config
from .data import Sample, generate_synthetic
from .errors import (ConfigError, FormatError, NumericError, TrainingDiverged,
                     UsageError)
from .metrics import (evaluate_pairs, format_report, load_eval_pairs,
                      write_curve_csv)
from .model import build_model, forward
from .pngio import read_binary_mask, read_rgb, write_grayscale, write_rgb
from .tensor import Tensor
from .train import (ablation_csv_lines, history_csv_lines,
                    load_training_state, run_ablation, run_lambda_sweep,
                    save_training_state, sweep_csv_lines, train)

log = logging.getLogger(__name__)


def _ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else default_config()


def write_manifest(out_dir: Path, cfg: RunConfig, command: str,
                   seed: "int | None") -> Path:
    meta = dict(cfg.meta)
    meta["command"] = command
    if seed is not None:
        meta["seed"] = str(seed)
    meta["version_dfnet"] = __version__
    meta["version_numpy"] = np.__version__
    meta["version_scipy"] = scipy.__version__
    meta["version_pillow"] = PIL.__version__
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(config_lines(replace(cfg, meta=meta))) + "\n",
                    encoding="utf-8")
    return path


def _write_lines(path: Path, lines) -> None:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_dir_samples(images_dir, masks_dir, size) -> "list[Sample]":
    """Stem-paired image/mask PNGs, resized to the model input size."""
    images = {p.stem: p for p in sorted(Path(images_dir).glob("*.png"))}
    masks = {p.stem: p for p in sorted(Path(masks_dir).glob("*.png"))}
    for stem in sorted(set(images) ^ set(masks)):
        log.warning("dataset: no %s counterpart for %s",
                    "mask" if stem in images else "image", stem)
    common = sorted(set(images) & set(masks))
    if not common:
        raise UsageError(f"no image/mask pairs between {images_dir} "
                         f"and {masks_dir}")
    samples = []
    for stem in common:
        mask = read_binary_mask(masks[stem], size=size)
        if not mask.any():
            log.warning("dataset: skipping %s (empty mask after resize)", stem)
            continue
        samples.append(Sample(image=read_rgb(images[stem], size=size),
                              mask=mask, name=stem))
    if not samples:
        raise UsageError(f"all masks under {masks_dir} are empty")
    return samples


def _training_samples(cfg: RunConfig) -> "list[Sample]":
    if cfg.train_images:
        return _load_dir_samples(cfg.train_images, cfg.train_masks,
                                 cfg.model.input_size)
    train_split, _ = generate_synthetic(cfg.data)
    return train_split


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
    out = _ensure_out(args)
    splits = zip(("train", "test"), generate_synthetic(cfg.data))
    for split, samples in splits:
        images_dir = out / split / "images"
        masks_dir = out / split / "masks"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_rgb(images_dir / f"{s.name}.png", s.image)
            write_grayscale(masks_dir / f"{s.name}.png",
                            s.mask.astype(np.float64))
        log.info("gen-data: wrote %d %s samples", len(samples), split)
    write_manifest(out, cfg, "gen-data", cfg.data.seed)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    seed = 0 if args.seed is None else args.seed
    out = _ensure_out(args)
    samples = _training_samples(cfg)
    model = build_model(cfg.model, seed=seed)
    optim = cfg.make_optim()
    schedule = cfg.make_schedule()
    records = train(model, samples, epochs=cfg.epochs,
                    batch_size=cfg.batch_size, seed=seed, loss_cfg=cfg.loss,
                    loss_kind=cfg.loss_kind, optim=optim, schedule=schedule,
                    augment_cfg=cfg.augment)
    save_training_state(out / "model.dfnc", model, optim, schedule,
                        next_epoch=cfg.epochs)
    _write_lines(out / "history.csv", history_csv_lines(records))
    write_manifest(out, cfg, "train", seed)
    log.info("train: wrote %s and %s", out / "model.dfnc", out / "history.csv")
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    out = _ensure_out(args)
    model = build_model(cfg.model, seed=0)
    load_training_state(args.checkpoint, model)
    paths = sorted(Path(args.images).glob("*.png"))
    if not paths:
        raise UsageError(f"no PNG images under {args.images}")
    written = 0
    for path in paths:
        try:
            image = read_rgb(path, size=cfg.model.input_size)
        except FormatError as exc:
            log.warning("infer: skipping %s: %s", path.name, exc)
            continue
        batch = image[np.newaxis].astype(model.dtype)
        saliency = forward(model, Tensor(batch)).data[0, 0]
        write_grayscale(out / f"{path.stem}.png",
                        np.asarray(saliency, dtype=np.float64))
        written += 1
    if written == 0:
        raise UsageError(f"no readable images under {args.images}")
    write_manifest(out, cfg, "infer", args.seed)
    log.info("infer: wrote %d saliency maps to %s", written, out)
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _ensure_out(args)
    pairs = load_eval_pairs(args.pred, args.gt)
    report = evaluate_pairs(pairs)
    text = format_report(report)
    print(text, end="")
    (out / "report.txt").write_text(text, encoding="utf-8")
    write_curve_csv(report.pr_curve, out / "curves.csv")
    write_manifest(out, cfg, "eval", args.seed)
    return 0


def cmd_curves(args) -> int:
    cfg = _run_config(args)
    out = _ensure_out(args)
    pairs = load_eval_pairs(args.pred, args.gt)
    report = evaluate_pairs(pairs)
    write_curve_csv(report.pr_curve, out / "curves.csv")
    write_manifest(out, cfg, "curves", args.seed)
    log.info("curves: wrote %s", out / "curves.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = _ensure_out(args)
    train_split, test_split = generate_synthetic(cfg.data)
    rows = run_ablation(train_split, test_split, variants=cfg.variants,
                        seeds=cfg.seeds, base_config=cfg.model,
                        loss_cfg=cfg.loss, epochs=cfg.epochs,
                        batch_size=cfg.batch_size, augment_cfg=cfg.augment,
                        learning_rate=cfg.learning_rate,
                        momentum=cfg.momentum)
    _write_lines(out / "ablation.csv", ablation_csv_lines(rows))
    write_manifest(out, cfg, "ablate", None)
    return 0


def cmd_lambda_sweep(args) -> int:
    cfg = _run_config(args)
    seed = 0 if args.seed is None else args.seed
    out = _ensure_out(args)
    train_split, test_split = generate_synthetic(cfg.data)
    rows = run_lambda_sweep(train_split, test_split,
                            values=cfg.lambda_values, seed=seed,
                            base_config=cfg.model, loss_cfg=cfg.loss,
                            epochs=cfg.epochs, batch_size=cfg.batch_size,
                            augment_cfg=cfg.augment,
                            learning_rate=cfg.learning_rate,
                            momentum=cfg.momentum)
    _write_lines(out / "sweep.csv", sweep_csv_lines(rows))
    write_manifest(out, cfg, "lambda-sweep", seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfnet",
        description="Salient-object detection: train, infer, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="run seed (default 0; for "
                       "gen-data it overrides data.seed)")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data,
        "write a synthetic image/mask dataset as PNG directories")
    add("train", cmd_train,
        "train a model; writes model.dfnc and history.csv")
    infer = add("infer", cmd_infer,
                "write one saliency PNG per input image")
    infer.add_argument("--checkpoint", required=True,
                       help="model.dfnc from a training run")
    infer.add_argument("--images", required=True, help="input PNG directory")
    for name, func, help_text in (
            ("eval", cmd_eval, "score predictions against ground-truth masks"),
            ("curves", cmd_curves, "export the 257-point PR/F curve CSV")):
        p = add(name, func, help_text)
        p.add_argument("--pred", required=True,
                       help="predicted saliency PNG directory")
        p.add_argument("--gt", required=True,
                       help="ground-truth mask PNG directory")
    add("ablate", cmd_ablate,
        "train every configured variant/seed; writes ablation.csv")
    add("lambda-sweep", cmd_lambda_sweep,
        "train across the configured MAE-weight grid; writes sweep.csv")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
