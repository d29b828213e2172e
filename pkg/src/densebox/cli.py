"""Command line: ``densebox synth | train | detect | eval``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Any ``--section.key=value`` argument overrides the JSON config.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .geometry import Detection
from .groundtruth import load_annotation
from .imaging import draw_boxes, read_ppm, write_ppm
from .inference import detect, detections_to_json, load_detections
from .metrics import dump_report, eval_report, render_pr_curve
from .model import load_model
from .synth import load_manifest, load_split, write_dataset
from .trainer import CHECKPOINT_NAME, NumericFailure, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("densebox")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve(args, overrides: list[str]) -> RunConfig:
    extra = list(overrides)
    if getattr(args, "seed", None) is not None:
        extra.append(f"seed={args.seed}")
    if getattr(args, "score_thresh", None) is not None:
        extra.append(f"pyramid.score_threshold={args.score_thresh}")
    if getattr(args, "iou", None) is not None:
        extra.append(f"eval_iou={args.iou}")
    if getattr(args, "use_refine", False):
        extra.append("use_refine=true")
    return load_config(args.config, extra)


def cmd_synth(cfg: RunConfig, out_dir: Path, count: int | None = None) -> dict:
    n = cfg.n_scenes if count is None else count
    try:
        manifest = write_dataset(out_dir, n, cfg.scene, cfg.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out_dir}: {exc}") from exc
    (Path(out_dir) / "config.json").write_text(cfg.dumps())
    n_obj = sum(e["n_objects"] for e in manifest["scenes"])
    print(f"scenes={n} objects={n_obj} out={out_dir}")
    return manifest


def _manifest(path: Path) -> dict:
    try:
        return load_manifest(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read dataset manifest at {path}: {exc}") from exc


def cmd_train(cfg: RunConfig, data: Path, out_dir: Path) -> dict:
    manifest = _manifest(data)
    scenes = [s for _, s in load_split(manifest, "train")]
    if not scenes:
        raise DataError(f"dataset {data} has no training scenes")
    result = train(cfg, scenes, out_dir)
    final = result.records[-1] if result.records else {}
    summary = {"iterations": len(result.records), "checkpoint": str(result.checkpoint), **final}
    print(json.dumps(summary, sort_keys=True))
    return summary


def _gather_images(data: Path | None, split: str, images: list[str]) -> dict[str, Path]:
    out: dict[str, Path] = {}
    if data is not None:
        manifest = _manifest(data)
        root = Path(manifest["root"])
        for e in manifest["scenes"]:
            if e["split"] == split:
                out[e["key"]] = root / e["image"]
    for p in images:
        out[Path(p).stem] = Path(p)
    return out


def cmd_detect(cfg: RunConfig, checkpoint: Path, images: dict[str, Path], out: Path, overlay: Path | None = None) -> dict:
    if checkpoint.is_dir():
        checkpoint = checkpoint / CHECKPOINT_NAME
    try:
        model = load_model(checkpoint, expected=cfg.model)
    except OSError as exc:
        raise DataError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"checkpoint {checkpoint} does not match config: {exc}") from exc
    results: dict[str, list[Detection]] = {}
    for key in sorted(images):
        try:
            img = read_ppm(images[key])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {images[key]}: {exc}") from exc
        results[key] = detect(img, model, cfg.pyramid, use_refine=cfg.use_refine)
        if overlay is not None:
            overlay.mkdir(parents=True, exist_ok=True)
            write_ppm(overlay / f"{key}.ppm", draw_boxes(img, [d.bbox.as_list() for d in results[key]]))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(detections_to_json(results))
    (out.parent / "config.json").write_text(cfg.dumps())
    print(f"images={len(results)} detections={sum(len(v) for v in results.values())} out={out}")
    return results


def cmd_eval(cfg: RunConfig, detections: Path, annotations: dict[str, Path], out: Path | None, curve: Path | None = None) -> dict:
    try:
        dets = load_detections(detections)
        gts = {k: [o.box for o in load_annotation(p)] for k, p in annotations.items()}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read evaluation inputs: {exc}") from exc
    missing_det = sorted(set(gts) - set(dets))
    missing_gt = sorted(set(dets) - set(gts))
    if missing_det or missing_gt:
        raise DataError(f"unmatched image keys: no detections for {missing_det}, no annotations for {missing_gt}")
    try:
        report = eval_report(dets, gts, cfg.eval_iou)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = dump_report(report)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        (out.parent / "config.json").write_text(cfg.dumps())
    if curve is not None:
        render_pr_curve(curve, report)
    print(f"iou={report['iou_threshold']} ap={report['ap']:.6f} n_gt={report['n_gt']} n_det={report['n_det']}")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densebox", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="JSON run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    common(s)
    s.add_argument("--count", type=int, default=None)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", type=Path, required=True)

    d = sub.add_parser("detect", help="run pyramid detection")
    common(d)
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--data", type=Path, default=None, help="dataset directory (uses --split)")
    d.add_argument("--split", default="test")
    d.add_argument("--score-thresh", type=float, default=None)
    d.add_argument("--use-refine", action="store_true")
    d.add_argument("--overlay", type=Path, default=None, help="directory for PPM overlays")
    d.add_argument("images", nargs="*", help="PPM images")

    e = sub.add_parser("eval", help="evaluate detections")
    e.add_argument("--config", type=Path, default=None)
    e.add_argument("--detections", type=Path, required=True)
    e.add_argument("--data", type=Path, default=None, help="dataset directory (uses --split)")
    e.add_argument("--split", default="test")
    e.add_argument("--iou", type=float, default=None)
    e.add_argument("--out", type=Path, default=None)
    e.add_argument("--pr-curve", type=Path, default=None, help="PPM rendering of the PR curve")
    e.add_argument("annotations", nargs="*", help="annotation JSON files")
    return p


def _is_override(arg: str) -> bool:
    key = arg[2:].split("=", 1)[0]
    return "." in key or key in ("n_scenes", "eval_iou")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    overrides = [a for a in argv if a.startswith("--") and "=" in a and _is_override(a)]
    rest = [a for a in argv if a not in overrides]
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
        cfg = _resolve(args, overrides)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, TypeError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.verb == "synth":
            cmd_synth(cfg, args.out, args.count)
        elif args.verb == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.verb == "detect":
            images = _gather_images(args.data, args.split, args.images)
            cmd_detect(cfg, args.checkpoint, images, args.out, args.overlay)
        elif args.verb == "eval":
            if args.data is not None:
                manifest = _manifest(args.data)
                root = Path(manifest["root"])
                ann = {e["key"]: root / e["annotation"] for e in manifest["scenes"] if e["split"] == args.split}
            else:
                ann = {}
            ann.update({Path(p).stem: Path(p) for p in args.annotations})
            cmd_eval(cfg, args.detections, ann, args.out, args.pr_curve)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
