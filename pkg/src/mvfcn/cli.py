"""Batch command-line interface.

Subcommands: summary, train, infer, binarize, eval. Exit codes are a
stable scripting contract: 0 success, 2 usage/config errors, 3 data
errors, 4 checkpoint errors.
"""

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .graph import build_mvfcn, forward, infer_shapes, summary
from .io import (
    GtMapping,
    RunConfig,
    apply_state,
    discover_dataset,
    ensure_rgb,
    load_checkpoint,
    load_gt,
    load_image,
    load_scoremap,
    parse_config,
    save_checkpoint,
    save_image,
    save_scoremap,
)
from .metrics import evaluate_sequence, format_report
from .postproc import otsu_threshold, remove_small_regions, threshold_global
from .rng import EngineRng
from .tensor import INFER, resize_nearest
from .train import AugmentConfig, Sample, TrainConfig, train_loop

NETWORK_INPUT = (240, 320)


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise ConfigError(f"input size must look like 240x320, got {text!r}")
    h, w = int(m.group(1)), int(m.group(2))
    if h % 16 or w % 16:
        raise ConfigError(f"input size {h}x{w} must be divisible by 16")
    return h, w


def cmd_summary(args) -> int:
    h, w = _parse_size(args.input_size)
    graph = build_mvfcn()
    infer_shapes(graph, (3, h, w))  # fail fast before printing anything
    print(summary(graph, (3, h, w)))
    return 0


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        base_lr=cfg.base_lr,
        lr_decay_factor=cfg.lr_decay_factor,
        lr_decay_every=cfg.lr_decay_every,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        dropout_rate=cfg.dropout_rate,
        seed=cfg.seed,
        augment=AugmentConfig(
            max_rotation_deg=cfg.max_rotation_deg,
            shift_fraction=cfg.shift_fraction,
            zoom_fraction=cfg.zoom_fraction,
            enabled=cfg.augment,
        ),
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
        bn_momentum=cfg.bn_momentum,
        split_ratio=cfg.split_ratio,
    )


def load_samples(manifest, size, mapping: GtMapping, normalize: bool = True):
    """Load every annotated frame, resized to the network input size."""
    roi_global = None
    if manifest.roi_path is not None:
        roi_global = load_image(manifest.roi_path)[0, 0] >= 0.5
    samples = []
    for frame in manifest.frames:
        image = ensure_rgb(load_image(frame.image_path))[0]
        if not normalize:
            image = image * 255.0
        gt, roi = load_gt(frame.gt_path, mapping)
        if roi_global is not None:
            roi = roi * roi_global
        image = resize_nearest(image, *size).astype(np.float32)
        gt = resize_nearest(gt, *size)
        roi = resize_nearest(roi, *size)
        samples.append(Sample(image=image, gt=gt, roi=roi))
    return samples


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    manifest = discover_dataset(args.data)
    samples = load_samples(manifest, (cfg.input_height, cfg.input_width),
                           cfg.gt_mapping(), cfg.normalize_inputs)
    init = None
    if args.init is not None:
        # structural validation happens once train_loop owns the live graph
        init = load_checkpoint(args.init)
    result = train_loop(samples, _train_config(cfg), init=init)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.best)
    history_path = out.with_name(out.name + ".history.txt")
    history_path.write_text(result.history.as_table() + "\n", encoding="utf-8")
    final = result.history.rows[-1]
    print(f"trained {manifest.name}: {len(result.history)} epochs")
    print(f"final train FoM {final.train_fom:.4f}, val FoM {final.val_fom:.4f}")
    print(f"checkpoint: {out}")
    print(f"history: {history_path}")
    return 0


def cmd_infer(args) -> int:
    graph = build_mvfcn()
    graph.initialize_parameters(EngineRng(0))  # placeholder, overwritten below
    payload = load_checkpoint(args.ckpt, graph)
    apply_state(graph, payload)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for item in args.inputs:
        tensor = ensure_rgb(load_image(item))
        tensor = resize_nearest(tensor, *NETWORK_INPUT).astype(np.float32)
        score, _ = forward(graph, tensor, mode=INFER)
        score2d = score[0, 0]
        stem = Path(item).stem
        save_image(score2d, out_dir / f"{stem}.pgm")
        if args.save_scores:
            save_scoremap(score2d, out_dir / f"{stem}.f32")
        print(f"{item} -> {out_dir / (stem + '.pgm')}")
    return 0


def _parse_method(text: str):
    if text == "otsu":
        return "otsu", None
    m = re.fullmatch(r"global:([0-9.eE+-]+)", text)
    if m:
        try:
            tau = float(m.group(1))
        except ValueError:
            tau = -1.0
        if 0.0 <= tau <= 1.0:
            return "global", tau
    raise ConfigError(f"method must be 'otsu' or 'global:TAU' with TAU in [0,1], got {text!r}")


def _indexed_files(directory: Path, suffixes) -> list[tuple[int, Path]]:
    out = {}
    for entry in sorted(directory.iterdir()):
        if entry.suffix.lower() not in suffixes:
            continue
        digits = re.findall(r"\d+", entry.stem)
        if not digits:
            continue
        out[int(digits[-1])] = entry
    return sorted(out.items())


def cmd_binarize(args) -> int:
    method, tau = _parse_method(args.method)
    if args.min_area < 0:
        raise ConfigError("--min-area must be non-negative")
    scores_dir = Path(args.scores)
    if not scores_dir.is_dir():
        raise DataError(f"{scores_dir} is not a directory")
    sidecars = dict(_indexed_files(scores_dir, (".f32",)))
    maps = dict(_indexed_files(scores_dir, (".pgm",)))
    indices = sorted(set(sidecars) | set(maps))
    if not indices:
        raise DataError(f"{scores_dir} holds no score maps")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for idx in indices:
        if idx in sidecars:  # exact float copy wins over the 8-bit image
            score = load_scoremap(sidecars[idx])
            stem = sidecars[idx].stem
        else:
            score = load_image(maps[idx])[0, 0]
            stem = maps[idx].stem
        frame_tau = tau if method == "global" else otsu_threshold(score).tau
        mask = threshold_global(score, frame_tau)
        if args.min_area > 0:
            mask = remove_small_regions(mask, args.min_area, args.connectivity)
        save_image(mask, out_dir / f"{stem}.pgm")
        if method == "otsu":
            print(f"frame {idx}: tau={frame_tau:.6f}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise DataError("prediction and ground-truth paths must be directories")
    preds = _indexed_files(pred_dir, (".pgm",))
    gts = _indexed_files(gt_dir, (".pgm",))
    if len(preds) != len(gts) or [i for i, _ in preds] != [i for i, _ in gts]:
        raise DataError(
            f"prediction/ground-truth misalignment: {len(preds)} vs {len(gts)} frames"
        )
    roi_global = None
    if args.roi is not None:
        roi_global = load_image(args.roi)[0, 0] >= 0.5
    pred_masks = []
    gt_masks = []
    rois = []
    for (_, ppath), (_, gpath) in zip(preds, gts):
        pred = load_image(ppath)[0, 0] >= 0.5
        gt, roi = load_gt(gpath)
        if gt.shape != pred.shape:  # score at network size, gt native
            gt = resize_nearest(gt, *pred.shape)
            roi = resize_nearest(roi, *pred.shape)
        if roi_global is not None:
            rg = roi_global
            if rg.shape != pred.shape:
                rg = resize_nearest(rg, *pred.shape)
            roi = roi * rg
        pred_masks.append(pred)
        gt_masks.append(gt)
        rois.append(roi)
    report = evaluate_sequence(pred_masks, gt_masks, rois)
    for i, value in enumerate(report.frame_foms, start=1):
        print(f"frame {i}: fom={value:.4f}")
    print(f"aggregate: precision={report.precision:.4f} recall={report.recall:.4f} "
          f"fom={report.fom:.4f} (mean-of-frames {report.mean_fom:.4f})")
    report_path = Path(args.report)
    report_path.write_text(format_report(report) + "\n", encoding="utf-8")
    print(f"report: {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfcn",
        description="Foreground segmentation engine: model summary, training, "
                    "inference, binarization, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="print the layer table and parameter count")
    p.add_argument("--input-size", default="240x320", metavar="HxW")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("train", help="train on one sequence")
    p.add_argument("--data", required=True, metavar="ROOT")
    p.add_argument("--config", required=True, metavar="FILE")
    p.add_argument("--init", metavar="CKPT", help="donor checkpoint for transfer learning")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="emit score maps for input images")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--in", dest="inputs", required=True, nargs="+", metavar="IMAGE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--save-scores", action="store_true",
                   help="also write exact float32 sidecars")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("binarize", help="threshold score maps into masks")
    p.add_argument("--scores", required=True, metavar="DIR")
    p.add_argument("--method", required=True, metavar="global:TAU|otsu")
    p.add_argument("--min-area", type=int, default=50)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--roi", metavar="FILE")
    p.add_argument("--report", default="eval_report.txt", metavar="FILE")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
