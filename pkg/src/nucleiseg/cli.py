"""Command-line front end.

Subcommands::

    nucleiseg eval --gt DIR --pred DIR [--json] [--out REPORT.json] [--workers N]
    nucleiseg postprocess DETECTIONS.jsonl --out PATCH.npy [--height H --width W]
    nucleiseg score DETECTIONS.jsonl
    nucleiseg check FILE.npy [FILE.npy ...]
    nucleiseg schedule ITER

Exit status is 0 on success and 2 on any input error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .io import (
    FormatError,
    dumps_report,
    read_detections,
    read_label_patch,
    render_table,
    write_label_patch,
)
from .labelmap import CONIC_PATCH_SIZE, DEFAULT_NUM_CLASSES, IntegrityError
from .metrics import PatchStats, aggregate, patch_stats
from .probloss import ScheduleConfig, lr_schedule
from .roi import DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD, detections_to_labelpatch, nms

EXIT_OK = 0
EXIT_INPUT = 2
PATCH_SUFFIX = ".npy"


class InputError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def pair_files(gt_dir: Path, pred_dir: Path) -> list[tuple[Path, Path]]:
    """Match patch files by exact name, sorted ascending."""
    for d in (gt_dir, pred_dir):
        if not d.is_dir():
            raise InputError(f"not a directory: {d}")
    gt = {p.name for p in gt_dir.iterdir() if p.suffix == PATCH_SUFFIX}
    pred = {p.name for p in pred_dir.iterdir() if p.suffix == PATCH_SUFFIX}
    if gt - pred:
        raise InputError(f"no prediction for ground-truth patch {min(gt - pred)}")
    if pred - gt:
        raise InputError(f"no ground truth for predicted patch {min(pred - gt)}")
    if not gt:
        raise InputError(f"no {PATCH_SUFFIX} patches found in {gt_dir}")
    return [(gt_dir / n, pred_dir / n) for n in sorted(gt)]


def _pair_stats(args: tuple[Path, Path, int]) -> PatchStats:
    gt_path, pred_path, num_classes = args
    gt = read_label_patch(gt_path, num_classes)
    pred = read_label_patch(pred_path, num_classes)
    if gt.shape != pred.shape:
        raise FormatError(f"{pred_path.name}: shape {pred.shape} differs from ground truth {gt.shape}")
    return patch_stats(gt, pred, num_classes)


def evaluate_dirs(gt_dir: Path, pred_dir: Path, num_classes: int = DEFAULT_NUM_CLASSES, workers: int = 1):
    pairs = pair_files(Path(gt_dir), Path(pred_dir))
    jobs = [(g, p, num_classes) for g, p in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map preserves submission order, so pooling order is fixed
            stats = list(pool.map(_pair_stats, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        stats = [_pair_stats(j) for j in jobs]
    return aggregate(stats, num_classes)


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.gt, args.pred, args.classes, args.workers)
    doc = dumps_report(report)
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
    sys.stdout.write(doc if args.json else render_table(report))
    return EXIT_OK


def cmd_postprocess(args) -> int:
    dets = read_detections(args.detections, args.classes)
    kept = nms(dets, args.iou_thresh)
    patch = detections_to_labelpatch(
        kept, args.height, args.width, score_threshold=args.score_thresh, num_classes=args.classes
    )
    write_label_patch(patch, args.out)
    n = int(patch.instance_map.max())
    print(f"{args.out}: {n} instances from {len(dets)} detections ({len(kept)} after NMS)")
    return EXIT_OK


def cmd_score(args) -> int:
    dets = read_detections(args.detections, args.classes)
    print("index\tlabel\tscore\tposterior")
    for i, d in enumerate(dets):
        posterior = ",".join(_fmt(p) for p in d.fused)
        print(f"{i}\t{d.label}\t{_fmt(d.score)}\t{posterior}")
    return EXIT_OK


def cmd_check(args) -> int:
    failed = 0
    for path in args.paths:
        try:
            patch = read_label_patch(path, args.classes)
        except (OSError, FormatError, IntegrityError) as exc:
            failed += 1
            print(f"FAIL {path}: {exc}")
        else:
            print(f"ok   {path}: {patch.height}x{patch.width}")
    return EXIT_OK if failed == 0 else EXIT_INPUT


def cmd_schedule(args) -> int:
    print(_fmt(lr_schedule(args.iter, ScheduleConfig())))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nucleiseg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def classes_flag(p):
        p.add_argument("--classes", type=int, default=DEFAULT_NUM_CLASSES, help="number of nucleus classes")

    p = sub.add_parser("eval", help="PQ / multi-PQ of predicted patches against ground truth")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    p.add_argument("--out", type=Path, help="also write the JSON report here")
    p.add_argument("--workers", type=int, default=1)
    classes_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("postprocess", help="turn detections into a label patch")
    p.add_argument("detections", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--height", type=int, default=CONIC_PATCH_SIZE)
    p.add_argument("--width", type=int, default=CONIC_PATCH_SIZE)
    p.add_argument("--score-thresh", type=float, default=DEFAULT_SCORE_THRESHOLD)
    p.add_argument("--iou-thresh", type=float, default=DEFAULT_NMS_IOU)
    classes_flag(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("score", help="print fused class posteriors of detections")
    p.add_argument("detections", type=Path)
    classes_flag(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("check", help="validate label patch files")
    p.add_argument("paths", nargs="+", type=Path)
    classes_flag(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("schedule", help="learning rate at a training iteration")
    p.add_argument("iter", type=int)
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        _err("--workers must be >= 1")
        return EXIT_INPUT
    try:
        return args.func(args)
    except (InputError, FormatError, IntegrityError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
