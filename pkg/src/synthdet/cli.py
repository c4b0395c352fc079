"""Command-line entry point: ``synthdet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 runtime error (possibly with partial output).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .errors import DataError, SynthError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("synthdet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class JsonLogFormatter(logging.Formatter):
    FIELDS = ("stage", "frame", "composites", "excluded", "errors", "reason", "frames", "mode", "view")

    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        for f in self.FIELDS:
            if hasattr(record, f):
                out[f] = getattr(record, f)
        return json.dumps(out, sort_keys=True)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger("synthdet")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    from .generator import RunConfig, generate_dataset

    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config.master_seed = args.seed
    if args.output is not None:
        config.output_dir = Path(args.output)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    manifest = generate_dataset(config, jobs=jobs)
    print(json.dumps({"output_dir": str(config.output_dir), "composites": len(manifest["composites"]),
                      "excluded": len(manifest["excluded"]), "errors": len(manifest["errors"])}))
    return EXIT_RUNTIME if manifest["errors"] else EXIT_OK


def cmd_stats(args) -> int:
    from .generator import load_run_manifest, run_stats

    print(json.dumps(run_stats(load_run_manifest(args.run)), indent=2, sort_keys=True))
    return EXIT_OK


def _draw_boxes(rgb: np.ndarray, objects: list[dict]) -> np.ndarray:
    bgr = cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)
    for o in objects:
        x0, y0, x1, y1 = o["bbox"]
        cv2.rectangle(bgr, (x0, y0), (x1 - 1, y1 - 1), (0, 0, 255), 1)
        cv2.putText(bgr, o["label"], (x0, max(y0 - 2, 8)), cv2.FONT_HERSHEY_PLAIN, 0.7, (0, 0, 255), 1)
    return bgr


def cmd_inspect(args) -> int:
    from .dataset_io import load_frame, manifest_entries, read_rgb
    from .errors import MissingFile

    if args.run:
        if not args.id:
            raise UsageError("inspect --run requires --id")
        run = Path(args.run)
        ann_path = run / "annotations" / f"{args.id}.json"
        if not ann_path.is_file():
            raise MissingFile(f"no annotation for composite {args.id!r} in {run}")
        ann = json.loads(ann_path.read_text())
        img = _draw_boxes(read_rgb(run / ann["image"]), ann["objects"])
        out = Path(args.output) if args.output else run / "inspect" / f"{args.id}.png"
    elif args.manifest:
        from .geometry import GeometryParams, extract_support_surfaces
        from .placement import derive_seed
        from .semantics import SemanticConfig, placement_region, validate_surfaces

        if not args.frame or not args.output:
            raise UsageError("inspect --manifest requires --frame and --output")
        entries = {e["id"]: e for e in manifest_entries(args.manifest)}
        if args.frame not in entries:
            raise MissingFile(f"frame {args.frame!r} not in {args.manifest}")
        frame = load_frame(entries[args.frame], Path(args.manifest).parent)
        rng = np.random.default_rng(derive_seed(args.seed or 0, frame.frame_id, "geometry"))
        surfaces = extract_support_surfaces(frame, rng, GeometryParams())
        if frame.labels is not None:
            surfaces = validate_surfaces(surfaces, frame.labels, SemanticConfig())
        img = frame.rgb.astype(np.float64)
        palette = [(255, 0, 0), (0, 200, 255), (255, 200, 0), (200, 0, 255), (0, 255, 100)]
        for i, s in enumerate(surfaces):
            color = np.asarray(palette[i % len(palette)], dtype=np.float64)
            img[s.support_mask] = 0.5 * img[s.support_mask] + 0.5 * color
        region = placement_region(surfaces, frame.shape, SemanticConfig().margin_px)
        img[region] = 0.5 * img[region] + 0.5 * np.array([0, 255, 0])
        img = cv2.cvtColor(np.clip(img, 0, 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        out = Path(args.output)
        print(json.dumps([{"extent_px": s.extent_px, "normal": s.plane.normal, "offset": s.plane.offset,
                           "semantic_valid": s.semantic_valid} for s in surfaces]))
    else:
        raise UsageError("inspect needs either --run/--id or --manifest/--frame")
    out.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(out), img)
    print(str(out))
    return EXIT_OK


def cmd_blend(args) -> int:
    from .blending import BlendMode, BlendRequest, blend, pad_crop
    from .dataset_io import read_mask, read_rgb, write_rgb

    src = read_rgb(args.source)
    mask = read_mask(args.mask)
    dst = read_rgb(args.dest)
    req = BlendRequest(src, mask, dst, (args.y, args.x), BlendMode(args.mode))
    write_rgb(args.output, blend(pad_crop(req)))
    print(str(args.output))
    return EXIT_OK


def _parse_ious(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--iou expects comma-separated numbers, got {text!r}") from None
    if not vals or not all(0 < v <= 1 for v in vals):
        raise UsageError(f"--iou values must lie in (0, 1], got {text!r}")
    return vals


def cmd_evaluate(args) -> int:
    from . import evaluation as ev

    ious = _parse_ious(args.iou)
    if args.proposals:
        if len(args.gt) != len(args.proposals):
            raise UsageError("give one --gt per --proposals file")
        names = args.names.split(",") if args.names else [Path(g).stem or Path(g).name for g in args.gt]
        if len(names) != len(args.gt):
            raise UsageError("--names must list one name per dataset")
        datasets = {n: (ev.load_proposals(p), ev.gt_boxes_by_image(ev.load_ground_truth(g)))
                    for n, p, g in zip(names, args.proposals, args.gt)}
        table = ev.recall_table(datasets, ious)
        print(ev.format_recall_table(table))
        result = {"recall": {str(k): v for k, v in table.items()}}
    else:
        if not args.dets or len(args.gt) != 1:
            raise UsageError("evaluate needs --dets and exactly one --gt (or --proposals)")
        gts = ev.load_ground_truth(args.gt[0])
        dets = ev.load_detections(args.dets)
        results = [ev.evaluate_detections(dets, gts, t, args.metric == "voc07") for t in ious]
        for r in results:
            print(f"IoU {r['iou']}")
            print(ev.format_ap_table(r))
        result = results[0] if len(results) == 1 else {"results": results}
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _refine_one(job) -> str:
    from .dataset_io import load_view, write_mask
    from .mask_refine import refine_mask

    inst_dir, vid, params = job
    view = load_view(inst_dir, vid)
    refined = refine_mask(view.rgb, view.mask, params)
    write_mask(Path(inst_dir) / f"{vid}.mask_refined.png", refined)
    return f"{Path(inst_dir).name}/{vid}"


def cmd_refine_masks(args) -> int:
    from .errors import MissingFile
    from .mask_refine import RefineParams

    root = Path(args.library)
    if not root.is_dir():
        raise MissingFile(f"missing object library directory: {root}")
    params = RefineParams(r_fg=args.r_fg, r_bg=args.r_bg, lam=args.lam, hist_bins=args.hist_bins)
    jobs = [(str(d), p.name[: -len(".rgb.png")], params)
            for d in sorted(x for x in root.iterdir() if x.is_dir())
            for p in sorted(d.glob("*.rgb.png"))]
    n_jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            done = list(ex.map(_refine_one, jobs))
    else:
        done = [_refine_one(j) for j in jobs]
    for d in done:
        log.info("mask refined", extra={"stage": "refine-masks", "view": d})
    print(json.dumps({"refined": len(done)}))
    return EXIT_OK


def cmd_validate(args) -> int:
    from .dataset_io import load_object_library, load_scene_collection

    if not args.manifest and not args.library:
        raise UsageError("validate needs --manifest and/or --library")
    report = {}
    if args.manifest:
        frames = load_scene_collection(args.manifest)
        report["frames"] = len(frames)
        report["frames_without_labels"] = [f.frame_id for f in frames if f.labels is None]
    if args.library:
        lib = load_object_library(args.library)
        report["instances"] = {k: len(v) for k, v in lib.instances.items()}
        report["median_depth_m"] = lib.median_depth
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_toy(args) -> int:
    from .toy import write_toy_dataset

    path = write_toy_dataset(args.output, n_frames=args.frames, seed=args.seed or 0, mode=args.mode,
                             composites_per_frame=args.k)
    print(str(path))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synthdet", description="Synthesize and evaluate composite detection datasets.")
    p.add_argument("--version", action="version", version=f"synthdet {__version__}")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="generate a composite dataset from a run config")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int)
    g.add_argument("--output", help="override the config's output directory")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", help="summarize a finished run")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_stats)

    i = sub.add_parser("inspect", help="render box overlays of a composite or support masks of a frame")
    i.add_argument("--run")
    i.add_argument("--id")
    i.add_argument("--manifest")
    i.add_argument("--frame")
    i.add_argument("--seed", type=int)
    i.add_argument("--output")
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("evaluate", help="score detections (AP/mAP) or proposals (recall)")
    e.add_argument("--gt", action="append", default=[], help="run directory or GT JSONL; repeatable")
    e.add_argument("--dets")
    e.add_argument("--proposals", action="append", default=[])
    e.add_argument("--names", help="comma-separated dataset names for the recall table")
    e.add_argument("--iou", default="0.5")
    e.add_argument("--metric", choices=["all_points", "voc07"], default="all_points")
    e.add_argument("--output", help="write machine-readable JSON here")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("refine-masks", help="write GraphCut-refined masks next to the originals")
    r.add_argument("--library", required=True)
    r.add_argument("--jobs", type=int)
    r.add_argument("--r-fg", type=int, default=5)
    r.add_argument("--r-bg", type=int, default=9)
    r.add_argument("--lam", type=float, default=50.0)
    r.add_argument("--hist-bins", type=int, default=8)
    r.set_defaults(func=cmd_refine_masks)

    v = sub.add_parser("validate", help="lint a scene manifest and/or an object library")
    v.add_argument("--manifest")
    v.add_argument("--library")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("blend", help="debug: blend one masked crop into an image")
    b.add_argument("--source", required=True)
    b.add_argument("--mask", required=True)
    b.add_argument("--dest", required=True)
    b.add_argument("--x", type=int, required=True)
    b.add_argument("--y", type=int, required=True)
    b.add_argument("--mode", choices=["SI", "BL"], default="BL")
    b.add_argument("--output", required=True)
    b.set_defaults(func=cmd_blend)

    t = sub.add_parser("toy", help="write a procedural toy dataset and run config")
    t.add_argument("--output", required=True)
    t.add_argument("--frames", type=int, default=10)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", default="SP-BL-SS")
    t.add_argument("-k", type=int, default=4, help="composites per frame")
    t.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"synthdet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, json.JSONDecodeError) as e:
        print(f"synthdet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (SynthError, OSError, RuntimeError) as e:
        print(f"synthdet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
