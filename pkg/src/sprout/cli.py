"""``sprout`` command-line entry point.

Exit status: 0 on success, 2 on usage errors (usage text on stderr), 1 on
runtime failures with a single ``error: <category>: <detail>`` line.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from sprout.errors import ArgumentError, IngestError, SproutError

log = logging.getLogger("sprout")

DEFAULT_SEED = 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _int_or_float(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _tap(text: str):
    return "head" if text == "head" else int(text)


def _configure_threads():
    raw = os.environ.get("SPROUT_THREADS")
    if raw:
        try:
            torch.set_num_threads(max(1, int(raw)))
        except ValueError:
            raise ArgumentError(f"SPROUT_THREADS must be an integer, got {raw!r}") from None


def _model_image_size(ckpt) -> int | None:
    raw = ckpt.train_settings.get("image_size")
    return int(raw) if raw else None


def _load_backbone(path, use_ema: bool):
    from sprout.checkpoint import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt, use_ema=use_ema)


def _image_batches(images: torch.Tensor, batch: int = 32):
    return [images[i : i + batch] for i in range(0, images.shape[0], batch)]


# -- subcommands ---------------------------------------------------------------


def cmd_pretrain(args):
    from sprout.trainer import load_config, train_loop

    config = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    log_path = args.log or f"{args.out}.loss.tsv"
    train_loop(args.data, config, args.out, resume=args.resume, log_path=log_path, warn_saturation=args.warn_saturation)
    return 0


def cmd_curate(args):
    from sprout.curation import CurationConfig, run_pipeline
    from sprout.imageio import atomic_write_text

    config = CurationConfig(
        exposure_low=args.exposure_low,
        exposure_high=args.exposure_high,
        max_fraction=args.max_fraction,
        blur_threshold=args.blur_threshold,
        flat_std=args.flat_std,
        dedup_threshold=args.dedup_threshold,
        variance_threshold=args.variance_threshold,
        content_threshold=args.content_threshold,
        embedder=args.embedder,
        classifier=args.classifier,
    )
    manifest = run_pipeline(args.in_dir, config)
    atomic_write_text(args.out, manifest.to_text())
    print(
        f"kept={manifest.count('kept')} removed={manifest.count('removed')} errored={manifest.count('errored')}"
    )
    return 0


def _load_eval_images(args, ckpt):
    from sprout.imageio import load_image_tensor

    size = args.size or _model_image_size(ckpt)
    return load_image_tensor(args.data, size=size, limit=args.max_images)


def cmd_select_timestep(args):
    from sprout.diffusion import make_schedule
    from sprout.erank import parse_grid, select_timestep
    from sprout.imageio import atomic_write_text

    grid = parse_grid(args.grid)
    ckpt, model = _load_backbone(args.ckpt, args.ema)
    images = _load_eval_images(args, ckpt)
    sched = make_schedule(ckpt.train_settings.get("schedule", "linear-interp"))
    report = select_timestep(model, _image_batches(images), grid, sched, args.pooling, args.seed, args.layer)
    atomic_write_text(args.report, report.to_text())
    print(f"t_star {report.t_star!r}")
    return 0


def cmd_extract(args):
    from sprout.diffusion import make_schedule
    from sprout.erank import collect_features
    from sprout.sprf import write_features

    ckpt, model = _load_backbone(args.ckpt, args.ema)
    images = _load_eval_images(args, ckpt)
    sched = make_schedule(ckpt.train_settings.get("schedule", "linear-interp"))
    feats = collect_features(model, _image_batches(images), args.t, sched, args.pooling, args.seed, args.layer)
    write_features(args.out, feats.data.astype(np.float32))
    print(f"N={feats.data.shape[0]} D={feats.data.shape[1]}")
    return 0


def load_seg_dir(directory):
    """``DIR/images/<name>.png`` paired with ``DIR/labels/<name>.png``."""
    from sprout.imageio import list_images, load_label, load_rgb
    from sprout.probe import SegSample

    root = Path(directory)
    images = list_images(root / "images")
    if not images:
        raise IngestError(f"no images under {root / 'images'}")
    samples, names = [], []
    for p in images:
        label_path = root / "labels" / (p.stem + ".png")
        if not label_path.exists():
            raise IngestError(f"missing label map {label_path}")
        label = load_label(label_path)
        if label.ndim != 2:
            raise IngestError(f"label map {label_path} must be single-channel")
        samples.append(SegSample(load_rgb(p), label))
        names.append(p.stem)
    return samples, names


def cmd_probe(args):
    from sprout.diffusion import make_schedule
    from sprout.erank import ErankReport
    from sprout.imageio import atomic_write_text, save_png
    from sprout.probe import (
        DEFAULT_PROBE_T,
        compute_miou,
        fit_probe,
        predict_logits,
        sliding_window_infer,
    )

    if args.t is not None and args.erank_report:
        raise ArgumentError("pass either --t or --erank-report, not both")
    t = args.t
    if args.erank_report:
        t = ErankReport.from_text(Path(args.erank_report).read_text(encoding="utf-8")).t_star
    if t is None:
        t = DEFAULT_PROBE_T
    ckpt, model = _load_backbone(args.ckpt, args.ema)
    sched = make_schedule(ckpt.train_settings.get("schedule", "linear-interp"))
    train, _ = load_seg_dir(args.train)
    val, names = load_seg_dir(args.val)
    head = fit_probe(
        model, train, args.classes, t=t, epochs=args.epochs, lr=args.lr, sched=sched,
        seed=args.seed, tap=args.tap, finetune=args.finetune,
    )
    preds = []
    for s in val:
        h, w = s.label.shape
        if h >= args.window and w >= args.window:
            pred = sliding_window_infer(model, head, s.image, args.window, args.stride, t, sched, args.seed, args.tap)
        else:
            pred = predict_logits(model, head, s.image, t, sched, args.seed, args.tap).argmax(0).numpy().astype(np.uint8)
        preds.append(pred)
    result = compute_miou(preds, [s.label for s in val], args.classes)
    atomic_write_text(args.report, result.to_text())
    if args.pred_dir:
        out = Path(args.pred_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, pred in zip(names, preds):
            save_png(out / f"{name}.png", pred)
    print(f"miou {result.miou!r}")
    return 0


def cmd_visualize(args):
    from sprout.diffusion import make_schedule
    from sprout.imageio import load_rgb, save_png
    from sprout.probe import backbone_features, noisy_input, pca_visualize

    ckpt, model = _load_backbone(args.ckpt, args.ema)
    rgb = load_rgb(args.image)
    f = model.config.down_factor
    h, w = (rgb.shape[0] // f) * f, (rgb.shape[1] // f) * f
    if h == 0 or w == 0:
        raise ArgumentError(f"image smaller than the down factor {f}")
    top, left = (rgb.shape[0] - h) // 2, (rgb.shape[1] - w) // 2
    rgb = rgb[top : top + h, left : left + w]
    sched = make_schedule(ckpt.train_settings.get("schedule", "linear-interp"))
    with torch.no_grad():
        feats = backbone_features(model, noisy_input(rgb, args.t, sched, args.seed), args.t, args.layer)[0]
    vis = pca_visualize(feats.double().numpy())
    scale = args.scale if args.scale is not None else f
    out = np.repeat(np.repeat(vis.rgb, scale, axis=0), scale, axis=1)
    save_png(args.out, out)
    if vis.degenerate:
        print("degenerate: features have zero variance, wrote mid-gray", file=sys.stderr)
    return 0


def cmd_estimate_budget(args):
    from sprout.trainer import estimate_steps

    print(estimate_steps(args.n_ref, args.s_ref, args.n_target))
    return 0


def cmd_make_textures(args):
    from sprout.synthetic import write_corpus

    write_corpus(args.out, args.n, args.size, args.seed, with_labels=args.labels)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sprout", description="Pixel-space diffusion pre-training toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_flag(sp):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed (default 0)")

    def backbone_flags(sp):
        sp.add_argument("--ckpt", required=True, help="SPCK checkpoint")
        sp.add_argument("--ema", action="store_true", help="use EMA weights")

    sp = sub.add_parser("pretrain", help="denoising pre-training")
    sp.add_argument("--config", required=True, help="key = value training config")
    sp.add_argument("--data", required=True, help="image directory")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--log", help="loss log path (default <out>.loss.tsv)")
    sp.add_argument("--warn-saturation", type=int, metavar="N", help="warn when the dataset exceeds N images")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("curate", help="three-stage dataset filtration")
    sp.add_argument("--in", dest="in_dir", required=True, help="image directory")
    sp.add_argument("--out", required=True, help="manifest path")
    sp.add_argument("--exposure-low", type=float, default=0.02)
    sp.add_argument("--exposure-high", type=float, default=0.98)
    sp.add_argument("--max-fraction", type=float, default=0.60)
    sp.add_argument("--blur-threshold", type=float, default=25.0)
    sp.add_argument("--flat-std", type=float, default=1.0)
    sp.add_argument("--dedup-threshold", type=float, default=0.95)
    sp.add_argument("--variance-threshold", type=float, default=1e-3)
    sp.add_argument("--content-threshold", type=float, default=0.5)
    sp.add_argument("--embedder", default="pixel-stats")
    sp.add_argument("--classifier", default="accept-all")
    sp.set_defaults(func=cmd_curate)

    for name, func in (("select-timestep", cmd_select_timestep), ("extract", cmd_extract)):
        sp = sub.add_parser(name)
        backbone_flags(sp)
        sp.add_argument("--data", required=True, help="image directory")
        if name == "select-timestep":
            sp.add_argument("--grid", default="0:1:11", help="A:B:N evenly spaced, inclusive")
            sp.add_argument("--report", required=True)
        else:
            sp.add_argument("--t", type=float, required=True)
            sp.add_argument("--out", required=True, help="SPRF feature file")
        sp.add_argument("--pooling", choices=("image-mean", "token"), default="image-mean")
        sp.add_argument("--layer", type=_tap, default=None, help="trunk block index or 'head'")
        sp.add_argument("--max-images", type=int, default=256)
        sp.add_argument("--size", type=int, default=None, help="resize images to SxS")
        seed_flag(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("probe", help="single-conv segmentation probe")
    backbone_flags(sp)
    sp.add_argument("--train", required=True, help="dir with images/ and labels/")
    sp.add_argument("--val", required=True, help="dir with images/ and labels/")
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--t", type=float, default=None)
    sp.add_argument("--erank-report", help="take t from this report's t_star")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--window", type=int, default=256)
    sp.add_argument("--stride", type=int, default=128)
    sp.add_argument("--tap", type=_tap, default=None, help="trunk block index or 'head'")
    sp.add_argument("--finetune", action="store_true", help="update backbone weights too")
    sp.add_argument("--pred-dir", help="write class-index PNGs here")
    seed_flag(sp)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("visualize", help="PCA-to-RGB feature map")
    backbone_flags(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layer", type=_tap, default=None)
    sp.add_argument("--scale", type=int, default=None, help="nearest upscaling (default: down factor)")
    seed_flag(sp)
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("estimate-budget", help="sqrt-rule step estimate")
    sp.add_argument("--n-ref", type=_int_or_float, required=True)
    sp.add_argument("--s-ref", type=_int_or_float, required=True)
    sp.add_argument("--n-target", type=_int_or_float, required=True)
    sp.set_defaults(func=cmd_estimate_budget)

    sp = sub.add_parser("make-textures", help="write a synthetic two-texture corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--labels", action="store_true", help="also write label maps")
    seed_flag(sp)
    sp.set_defaults(func=cmd_make_textures)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _configure_threads()
        return args.func(args)
    except SproutError as exc:
        detail = " ".join(str(exc).split())
        print(f"error: {exc.category}: {detail}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
