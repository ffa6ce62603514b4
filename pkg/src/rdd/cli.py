"""``rdd`` command-line entry point.

Each subcommand prints exactly one JSON document on stdout; logs go to
stderr. Exit codes: 0 success, 1 domain failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("rdd")


class UsageError(Exception):
    pass


def _existing(kind: str = "path"):
    def check(value: str) -> Path:
        p = Path(value)
        if kind == "dir" and not p.is_dir():
            raise argparse.ArgumentTypeError(f"directory not found: {value}")
        if kind == "file" and not p.is_file():
            raise argparse.ArgumentTypeError(f"file not found: {value}")
        if kind == "path" and not p.exists():
            raise argparse.ArgumentTypeError(f"path not found: {value}")
        return p
    return check


def _creatable(value: str) -> Path:
    p = Path(value)
    parent = p if p.is_dir() else p.parent
    while not parent.exists() and parent != parent.parent:
        parent = parent.parent
    if not os.access(parent, os.W_OK):
        raise argparse.ArgumentTypeError(f"cannot create {value}")
    return p


def _unit_interval(value: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is not in [0, 1]")
    return v


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdd", description="Road damage detection toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("stats", help="per-folder damage-class counts")
    p.add_argument("--root", type=_existing("dir"), required=True)
    p.add_argument("--out", type=_creatable, help="directory for stats.json, stats.csv and figures")
    p.add_argument("--write-index", action="store_true", help="cache dims/counts in <root>/index.json")

    p = sub.add_parser("crop-norway", help="crop Norway images to the lower-left square")
    p.add_argument("--in", dest="src", type=_existing("dir"), required=True, help="folder with images/ and labels/")
    p.add_argument("--out", type=_creatable, required=True, help="output folder (conventionally Norway1)")
    p.add_argument("--side", type=int, default=1824)
    p.add_argument("--labels-only", action="store_true", help="do not write cropped images")

    p = sub.add_parser("split", help="train/validation plan for one target folder")
    p.add_argument("--root", type=_existing("dir"), required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=_creatable, help="directory for train.txt / val.txt")

    p = sub.add_parser("augment", help="augmentation tools")
    asub = p.add_subparsers(dest="augment_command", required=True, metavar="ACTION")
    a = asub.add_parser("preview", help="render augmented samples with boxes")
    a.add_argument("--root", type=_existing("dir"), required=True)
    a.add_argument("--folder", action="append", help="restrict to folder(s)")
    a.add_argument("--preset", choices=["default", "experimented", "zero"], default="experimented")
    a.add_argument("--config", type=_existing("file"), help="key: value hyperparameter file")
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--size", type=int, default=640)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", type=_creatable, required=True)

    p = sub.add_parser("eval", help="F1 and mAP@0.5 of predictions against labels")
    p.add_argument("--gt", type=_existing("dir"), required=True, help="dataset root, folder, or labels/ dir")
    p.add_argument("--pred", type=_existing("file"), required=True, help="prediction CSV")
    p.add_argument("--iou", type=_unit_interval, default=0.5)
    p.add_argument("--conf", type=_unit_interval, default=0.25)
    p.add_argument("--out", type=_creatable, help="directory for report.json and PR curves")

    p = sub.add_parser("ensemble", help="fuse prediction CSVs from several models")
    p.add_argument("--pred", type=_existing("file"), action="append", required=True)
    p.add_argument("--config", type=_existing("file"), help="fusion key: value file")
    p.add_argument("--mode", choices=["wbf", "nms"])
    p.add_argument("--iou", type=_unit_interval)
    p.add_argument("--weights", type=_float_list)
    p.add_argument("--no-participation-scaling", action="store_true")
    p.add_argument("--out", type=_creatable, help="fused prediction CSV")

    p = sub.add_parser("ca-check", help="coordinate attention shape and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("collect", help="download street-view images along a route")
    p.add_argument("--route", type=_existing("file"), required=True, help="JSON list of [lat, lng]")
    p.add_argument("--spacing", type=float, default=10.0, help="metres between samples")
    p.add_argument("--headings", type=_float_list, default=[90.0, 270.0])
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--fov", type=float, default=90.0)
    p.add_argument("--cache", type=_creatable, default=Path("streetview_cache"))
    p.add_argument("--endpoint", default=None)
    p.add_argument("--rate", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--dry-run", action="store_true", help="only plan requests")
    return parser


def parse(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        build_parser().error("--jobs must be >= 1")
    return args


# ---------------------------------------------------------------------------
# commands

def _ground_truth_records(path: Path, jobs: int):
    from . import dataset

    if path.name == "labels" and (path.parent / "images").is_dir():
        path = path.parent
    if (path / "images").is_dir():
        return dataset.load_dataset(path.parent, [path.name], jobs=jobs)
    return dataset.load_dataset(path, jobs=jobs)


def cmd_stats(args) -> dict:
    from . import dataset, plotting

    records = dataset.load_dataset(args.root, jobs=args.jobs)
    report = dataset.stats(records)
    outputs = []
    if args.write_index:
        outputs.append(str(dataset.write_index(args.root, records)))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "stats.json").write_text(json.dumps(report, indent=1))
        (args.out / "stats.csv").write_text(dataset.stats_csv(report))
        outputs += [str(args.out / "stats.json"), str(args.out / "stats.csv")]
        if report["folders"]:
            outputs.append(str(plotting.damage_distribution(report, args.out / "damage_distribution.png")))
            outputs.append(str(plotting.usable_images(report, args.out / "usable_images.png")))
    return {"command": "stats", **report, "outputs": outputs}


def cmd_crop_norway(args) -> dict:
    import cv2

    from . import dataset

    records = dataset.load_dataset(args.src.parent, [args.src.name], jobs=args.jobs)
    out_root, out_name = args.out.parent, args.out.name
    total = dataset.CropCounts()
    for rec in records:
        image = None
        if not args.labels_only:
            img_path = next((args.src / "images" / f"{rec.id}{s}" for s in dataset.IMAGE_SUFFIXES
                             if (args.src / "images" / f"{rec.id}{s}").exists()), None)
            image = cv2.imread(str(img_path)) if img_path else None
            if image is None:
                raise OSError(f"cannot read image for {rec.id}")
        new_rec, cropped, counts = dataset.norway_crop(rec, image, args.side, folder=out_name)
        total = total + counts
        dataset.write_record(out_root, new_rec, cropped)
    log.info("cropped %d images: %s", len(records), total.as_dict())
    return {"command": "crop-norway", "images": len(records), "side": args.side,
            **total.as_dict(), "out": str(args.out)}


def cmd_split(args) -> dict:
    from . import dataset

    records = dataset.load_dataset(args.root, jobs=args.jobs)
    plan = dataset.split_train_val(dataset.usable_ids_by_folder(records), args.target, args.seed)
    outputs = []
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for name, ids in (("train.txt", plan.train_ids), ("val.txt", plan.val_ids)):
            (args.out / name).write_text("".join(f"{i}\n" for i in sorted(ids)))
            outputs.append(str(args.out / name))
    d = plan.as_dict()
    return {"command": "split", **d, "n_val": len(plan.val_ids), "n_train": len(plan.train_ids), "outputs": outputs}


def _load_samples(root: Path, folders, jobs: int):
    import cv2

    from . import augment, dataset

    records = [r for r in dataset.load_dataset(root, folders, jobs=jobs) if r.annotations]
    samples = []
    for rec in records:
        path = next((root / rec.folder / "images" / f"{rec.id}{s}" for s in dataset.IMAGE_SUFFIXES
                     if (root / rec.folder / "images" / f"{rec.id}{s}").exists()))
        img = cv2.imread(str(path))
        if img is None:
            raise OSError(f"cannot read {path}")
        pb = rec.pixel_boxes()
        samples.append(augment.Sample(img, [b.as_tuple() for _, b in pb], [int(c) for c, _ in pb], rec.id))
    if not samples:
        raise ValueError(f"no usable images under {root}")
    return samples


def cmd_augment(args) -> dict:
    from . import augment, plotting

    cfg = augment.PRESETS[args.preset]
    if args.config:
        cfg = augment.load_config(args.config, base=cfg)
    sources = _load_samples(args.root, args.folder, args.jobs)
    out = augment.generate(cfg, sources, args.seed, args.n, args.size, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    grid = plotting.augment_grid(out, args.out / "augment_preview.png")
    prov_path = args.out / "augment_preview.json"
    prov = [
        {**s.provenance, "boxes": s.boxes.tolist(), "classes": s.classes.tolist()} for s in out
    ]
    prov_path.write_text(json.dumps(prov, indent=1, default=float))
    return {
        "command": "augment preview", "n": args.n, "size": args.size, "seed": args.seed,
        "config": cfg.as_dict(),
        "samples": [{"index": s.provenance["index"], "boxes": len(s.boxes), "ops": s.provenance["ops"]} for s in out],
        "outputs": [str(grid), str(prov_path)],
    }


def cmd_eval(args) -> dict:
    from . import evalmetrics, plotting

    records = _ground_truth_records(args.gt, args.jobs)
    gts = evalmetrics.ground_truth_from_records(records)
    dets = evalmetrics.read_predictions(args.pred)
    folders = {r.id: r.folder for r in records}
    report = evalmetrics.evaluate(dets, gts, args.iou, args.conf, folders if len(set(folders.values())) > 1 else None)
    outputs = []
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(json.dumps(report, indent=1))
        outputs.append(str(args.out / "report.json"))
        curves = {}
        for c in evalmetrics.DamageClass:
            gc = [g for g in gts if g.cls == c]
            if gc:
                curves[c.code] = evalmetrics.average_precision([d for d in dets if d.cls == c], gc, args.iou)
        if curves:
            outputs.append(str(plotting.pr_curves(curves, args.out / "pr_curves.png", title=f"IoU {args.iou:g}")))
    overall = report["Overall"]
    return {"command": "eval", **report, "map50": overall["map50"], "f1": overall["f1"], "outputs": outputs}


def cmd_ensemble(args) -> dict:
    from . import ensemble, evalmetrics

    cfg = ensemble.FusionConfig.load(args.config) if args.config else ensemble.FusionConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.iou is not None:
        overrides["iou_thr"] = args.iou
    if args.no_participation_scaling:
        overrides["participation_scaling"] = False
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    if args.weights and len(args.weights) != len(args.pred):
        raise UsageError("--weights needs one value per --pred")
    providers = [ensemble.CSVProvider(p) for p in args.pred]
    sources = [
        ensemble.DetectionSource(p.stem, prov, args.weights[i] if args.weights else 1.0)
        for i, (p, prov) in enumerate(zip(args.pred, providers))
    ]
    image_ids = set().union(*(p.image_ids() for p in providers))
    fused, provenance = ensemble.ensemble_run(sources, sorted(image_ids), cfg, jobs=args.jobs)
    if args.out:
        evalmetrics.write_predictions(fused, args.out)
    return {"command": "ensemble", "mode": cfg.mode, "iou_thr": cfg.iou_thr,
            "sources": [s.name for s in sources], "images": len(image_ids),
            "detections": len(fused), "provenance": provenance,
            "out": str(args.out) if args.out else None}


def cmd_ca_check(args) -> dict:
    from . import coord_attention

    result = coord_attention.self_check(args.seed, args.instances, tol=args.tol)
    return {"command": "ca-check", **result}


def cmd_collect(args) -> dict:
    from . import collector

    key = os.environ.get(collector.API_KEY_ENV, "")
    route = collector.load_route(args.route)
    reqs = collector.sample_route(route, args.spacing, args.headings, api_key=key,
                                  size=(args.size, args.size), pitch=args.pitch, fov=args.fov)
    policy = collector.FetchPolicy(
        max_requests_per_second=args.rate, max_retries=args.retries, cache_dir=args.cache,
        **({"endpoint_base": args.endpoint} if args.endpoint else {}),
    )
    if args.dry_run:
        records = [{"hash": collector.request_hash(r, policy.endpoint_base), "status": "planned",
                    "location": list(r.location), "heading": r.heading} for r in reqs]
        return {"command": "collect", "requests": len(reqs), "fetched": 0, "cached": 0, "failed": 0,
                "dry_run": True, "records": records}
    if not key:
        raise UsageError(f"set {collector.API_KEY_ENV} to download images")
    results = collector.Fetcher(policy).fetch_many(reqs, jobs=args.jobs)
    counts = {s: sum(r.status == s for r in results) for s in ("fetched", "cached", "failed")}
    return {"command": "collect", "requests": len(reqs), **counts, "dry_run": False,
            "records": [r.summary() for r in results]}


COMMANDS = {
    "stats": cmd_stats,
    "crop-norway": cmd_crop_norway,
    "split": cmd_split,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "ensemble": cmd_ensemble,
    "ca-check": cmd_ca_check,
    "collect": cmd_collect,
}


def execute(args: argparse.Namespace) -> tuple[int, dict]:
    try:
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        return 2, {"ok": False, "error": str(exc), "type": "UsageError"}
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1, {"ok": False, "error": str(exc), "type": type(exc).__name__}
    if args.command == "ca-check" and not result["pass"]:
        return 1, result
    return 0, result


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except SystemExit as exc:
        code = int(exc.code or 0)
        if code:
            doc = {"ok": False, "error": "invalid command line; usage on stderr", "type": "UsageError"}
            sys.stdout.write(json.dumps(doc) + "\n")
        return code
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    code, doc = execute(args)
    sys.stdout.write(json.dumps(doc, default=float, allow_nan=False) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
