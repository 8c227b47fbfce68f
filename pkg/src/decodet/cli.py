"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig, load_doc
from .formats import (
    DataError,
    read_boxes,
    read_detections,
    read_ground_truth,
    read_taxonomy,
    read_tensor,
    write_detections,
    write_json,
)
from .pipeline import bench_csv, loss_check, run_bench_nms, run_cluster, run_detect, run_eval
from .postprocess import NmsClusters
from .scenario import load_dataset, write_dataset

log = logging.getLogger("decodet")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# keys a scenario directory pins; a config may repeat them but not contradict them
SCENARIO_KEYS = ("num_classes", "num_superclasses", "grid", "feature_stride", "image_width", "image_height", "scales")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config(p):
    p.add_argument("--config", type=Path, help="YAML key-value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _load_config(args) -> PipelineConfig:
    try:
        return PipelineConfig.load(args.config, args.overrides)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from None


def _emit(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def _scenario_config(args):
    """Config for a scenario dir: geometry comes from the scenario unless the config pins it identically."""
    meta_path = args.scenario / "scenario.json"
    if not meta_path.exists():
        raise DataError(f"{args.scenario}: not a scenario directory (missing scenario.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        doc = load_doc(args.config, args.overrides)
    except (OSError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    for key in SCENARIO_KEYS:
        if key in doc and doc[key] != meta[key]:
            raise DataError(f"{meta_path}: field {key!r} = {meta[key]!r} conflicts with config value {doc[key]!r}")
        doc[key] = meta[key]
    try:
        return PipelineConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"config: {exc}") from None


# ---------------------------------------------------------------------------


def cmd_cluster(args):
    features = read_tensor(args.features)
    if features.ndim != 2:
        raise DataError(f"{args.features}: dims {list(features.shape)} are not C x D")
    if not 1 <= args.k <= features.shape[0]:
        raise DataError(f"K={args.k} must lie in [1, C={features.shape[0]}]")
    taxonomy = run_cluster(features, args.k, seed=args.seed, max_iters=args.max_iters)
    _emit(taxonomy.to_json(), args.out)


def cmd_simulate(args):
    cfg = _load_config(args)
    write_dataset(args.out, cfg, args.images, args.objects)
    log.info("wrote %d images to %s", args.images, args.out)


def cmd_detect(args):
    if args.scenario is not None:
        cfg = _scenario_config(args)
        _meta, taxonomy, _gts, images = load_dataset(args.scenario)
        images = images()
    else:
        missing = [n for n in ("detection_map", "regression_map", "class_map", "rois") if getattr(args, n) is None]
        if missing:
            raise UsageError("without --scenario, need --" + ", --".join(m.replace("_", "-") for m in missing))
        cfg = _load_config(args)
        taxonomy = read_taxonomy(args.taxonomy) if args.taxonomy else None
        if taxonomy is None:
            if cfg.num_superclasses != 1:
                raise UsageError("--taxonomy is required when num_superclasses > 1")
            from .taxonomy import Taxonomy

            taxonomy = Taxonomy.objectness(cfg.num_classes)
        per_scale = [(1.0, read_tensor(args.detection_map), read_tensor(args.regression_map), read_tensor(args.class_map))]
        for name, arr in zip(("detection map", "regression map", "classification map"), per_scale[0][1:]):
            if arr.ndim != 3:
                raise DataError(f"{name}: dims {list(arr.shape)} are not (channels, height, width)")
        images = [(args.image, read_boxes(args.rois), per_scale)]

    clusters = None
    if args.nms_clusters_file is not None:
        clusters = NmsClusters(read_taxonomy(args.nms_clusters_file).assignment)
        cfg.nms_mode = "clustered"
    try:
        dets = run_detect(cfg, images, taxonomy, clusters)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from None
    if args.out is None:
        for d in dets:
            sys.stdout.write(json.dumps(d.to_dict()) + "\n")
    else:
        write_detections(args.out, dets)


def cmd_nms_bench(args):
    rows, _ = run_bench_nms(args.detections, args.classes, args.clusters, args.repetitions, args.seed, args.iou)
    _emit(bench_csv(rows), args.out)


def cmd_eval(args):
    dets = read_detections(args.detections, args.num_classes)
    gts = read_ground_truth(args.gt, args.num_classes)
    if args.num_classes is None:
        known = {g.class_id for g in gts}
        unknown = sorted({d.class_id for d in dets} - known)
        if unknown and args.strict_classes:
            raise DataError(f"{args.detections}: field 'class' has ids absent from ground truth: {unknown[:10]}")
    report = run_eval(dets, gts, args.iou)
    _emit(json.dumps(report.to_dict(), indent=1) + "\n", args.out)


def cmd_loss_check(args):
    cfg = _scenario_config(args)
    _meta, taxonomy, gts, images = load_dataset(args.scenario)
    for image, proposals, per_scale in images():
        if image == args.image:
            break
    else:
        raise DataError(f"{args.scenario}: no image {args.image}")
    targets, report = loss_check(cfg, taxonomy, proposals, per_scale, [g for g in gts if g.image == args.image])
    if args.targets_out is not None:
        write_json(args.targets_out, targets.to_dict())
    _emit(json.dumps(report.to_dict(), indent=1) + "\n", args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decodet", description="Decoupled detection post-processing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cluster", help="build a super-class taxonomy from class features")
    p.add_argument("--features", type=Path, required=True, help="C x D tensor file")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("simulate", help="write a synthetic scenario directory")
    _add_config(p)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="run the detection pipeline")
    _add_config(p)
    p.add_argument("--scenario", type=Path, help="scenario directory written by 'simulate'")
    p.add_argument("--detection-map", type=Path)
    p.add_argument("--regression-map", type=Path)
    p.add_argument("--class-map", type=Path)
    p.add_argument("--rois", type=Path, help="JSON-lines of {\"box\": [...]} proposals")
    p.add_argument("--taxonomy", type=Path)
    p.add_argument("--image", type=int, default=0, help="image id written with explicit map files")
    p.add_argument("--nms-clusters-file", type=Path, help="taxonomy JSON whose assignment is used as NMS clusters")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("nms-bench", help="time clustered NMS against the number of clusters")
    p.add_argument("--detections", type=int, default=10000)
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--clusters", type=_int_list, default=[1000, 200, 100, 50, 20])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iou", type=float, default=0.3)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_nms_bench)

    p = sub.add_parser("eval", help="VOC-style mAP of detections against ground truth")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--num-classes", type=int, help="reject class ids >= this value")
    p.add_argument("--strict-classes", action="store_true", help="reject detection classes absent from ground truth")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss-check", help="label assignment and loss on one scenario image")
    _add_config(p)
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--image", type=int, default=0)
    p.add_argument("--targets-out", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_loss_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"decodet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"decodet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"decodet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
