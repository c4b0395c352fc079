"""End-to-end synthesis of a composite detection dataset."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from xml.etree import ElementTree as ET

import numpy as np

from . import __version__
from .blending import BlendMode, BlendRequest, PoissonParams, blend, pad_crop
from .dataset_io import ObjectLibrary, load_frame, load_object_library, manifest_entries, write_rgb
from .errors import MissingFile, NoValidPlacement
from .geometry import GeometryParams, extract_support_surfaces
from .placement import (
    CompositePlan,
    GenerationParams,
    Positioning,
    derive_seed,
    sample_placements,
    scale_view,
)
from .semantics import SemanticConfig, placement_region, validate_surfaces

log = logging.getLogger("synthdet.generator")

BBOX_CONVENTION = "[x_min, y_min, x_max, y_max] in pixels; min inclusive, max exclusive"
PLAN_RETRIES = 5


@dataclass
class RunConfig:
    scene_manifest: Path
    object_library: Path
    output_dir: Path
    params: GenerationParams = field(default_factory=GenerationParams)
    composites_per_frame: int = 4
    master_seed: int = 0
    geometry: GeometryParams = field(default_factory=GeometryParams)
    semantics: SemanticConfig = field(default_factory=SemanticConfig)
    blend: PoissonParams = field(default_factory=PoissonParams)
    use_refined_masks: bool = False
    write_voc: bool = False

    def __post_init__(self):
        self.scene_manifest = Path(self.scene_manifest)
        self.object_library = Path(self.object_library)
        self.output_dir = Path(self.output_dir)
        if self.composites_per_frame < 1:
            raise ValueError("composites_per_frame must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        base = Path(base_dir)
        d = dict(d)
        known = {"scene_manifest", "object_library", "output_dir", "params", "composites_per_frame",
                 "master_seed", "geometry", "semantics", "blend", "use_refined_masks", "write_voc"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("scene_manifest", "object_library", "output_dir"):
            if key not in d:
                raise ValueError(f"config lacks required key {key!r}")
            d[key] = base / d[key]
        d["params"] = GenerationParams.from_dict(d.get("params"))
        d["geometry"] = GeometryParams.from_dict(d.get("geometry"))
        d["semantics"] = SemanticConfig.from_dict(d.get("semantics"))
        d["blend"] = PoissonParams.from_dict(d.get("blend"))
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"missing config file: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        sem = self.semantics
        return {
            "scene_manifest": str(self.scene_manifest),
            "object_library": str(self.object_library),
            "output_dir": str(self.output_dir),
            "params": self.params.to_dict(),
            "composites_per_frame": self.composites_per_frame,
            "master_seed": self.master_seed,
            "geometry": vars(self.geometry).copy(),
            "semantics": {"valid_class_ids": sorted(sem.valid_class_ids),
                          "min_overlap_frac": sem.min_overlap_frac,
                          "margin_px": sem.margin_px, "enabled": sem.enabled},
            "blend": vars(self.blend).copy(),
            "use_refined_masks": self.use_refined_masks,
            "write_voc": self.write_voc,
        }


@dataclass
class CompositeRecord:
    composite_id: str
    frame_id: str
    seed: int
    mode: str
    objects: list[dict]
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        # timing stays out so manifests are reproducible byte for byte
        return {"composite_id": self.composite_id, "frame_id": self.frame_id, "seed": self.seed,
                "mode": self.mode, "objects": self.objects}


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def to_voc_xml(annotation: dict) -> str:
    """Pascal-VOC style XML; VOC boxes are 1-based with inclusive max edges."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = Path(annotation["image"]).name
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(annotation["width"])
    ET.SubElement(size, "height").text = str(annotation["height"])
    ET.SubElement(size, "depth").text = "3"
    for obj in annotation["objects"]:
        o = ET.SubElement(root, "object")
        ET.SubElement(o, "name").text = obj["label"]
        ET.SubElement(o, "difficult").text = "0"
        bb = ET.SubElement(o, "bndbox")
        x0, y0, x1, y1 = obj["bbox"]
        for tag, val in (("xmin", x0 + 1), ("ymin", y0 + 1), ("xmax", x1), ("ymax", y1)):
            ET.SubElement(bb, tag).text = str(val)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def render_plan(frame_rgb: np.ndarray, plan: CompositePlan, library: ObjectLibrary,
                appearance: str, blend_params: PoissonParams) -> np.ndarray:
    """Execute a plan: paste or blend every placement in order."""
    out = frame_rgb.copy()
    for p in plan.placements:
        view = library.instances[p.instance_id][p.view_index].cropped_to_mask()
        rgb, mask = scale_view(view, p.size)
        req = BlendRequest(rgb, mask, out, (p.bbox[1], p.bbox[0]), BlendMode(appearance))
        out = blend(pad_crop(req), blend_params)
    return out


def plan_frame(frame, library: ObjectLibrary, config: RunConfig) -> tuple[Optional[list[CompositePlan]], str]:
    """All K plans for one frame, or ``(None, reason)`` when the frame is excluded."""
    params = config.params
    pmask = None
    if params.positioning is Positioning.SP:
        if config.semantics.enabled and frame.labels is None:
            return None, "labels_missing"
        rng = np.random.default_rng(derive_seed(config.master_seed, frame.frame_id, "geometry"))
        surfaces = extract_support_surfaces(frame, rng, config.geometry)
        surfaces = validate_surfaces(surfaces, frame.labels, config.semantics)
        pmask = placement_region(surfaces, frame.shape, config.semantics.margin_px)
        if not pmask.any():
            return None, "no_support_surface"
    plans = []
    for k in range(config.composites_per_frame):
        for attempt in range(PLAN_RETRIES):
            seed = derive_seed(config.master_seed, frame.frame_id, k, attempt)
            try:
                plans.append(sample_placements(frame, pmask, library, params,
                                               np.random.default_rng(seed), seed))
                break
            except NoValidPlacement:
                continue
        else:
            return None, "no_valid_placement"
    return plans, ""


# per-process state for worker pools
_STATE: dict = {}


def _init_worker(config: RunConfig) -> None:
    _STATE["config"] = config
    _STATE["library"] = load_object_library(config.object_library, config.use_refined_masks)
    _STATE["base"] = config.scene_manifest.parent


def _process_frame(entry: dict) -> dict:
    config: RunConfig = _STATE["config"]
    library: ObjectLibrary = _STATE["library"]
    fid = str(entry["id"])
    t0 = time.perf_counter()
    try:
        frame = load_frame(entry, _STATE["base"])
        plans, reason = plan_frame(frame, library, config)
        if plans is None:
            return {"frame_id": fid, "status": "excluded", "reason": reason, "records": []}
        H, W = frame.shape
        records = []
        for k, plan in enumerate(plans):
            t1 = time.perf_counter()
            cid = f"{fid}_{k:02d}"
            img = render_plan(frame.rgb, plan, library, config.params.appearance, config.blend)
            image_rel = f"images/{cid}.png"
            write_rgb(config.output_dir / image_rel, img)
            objects = [{"label": p.instance_id, "bbox": list(p.bbox),
                        "view": {"azimuth": p.azimuth_idx, "elevation": p.elevation_idx,
                                 "index": p.view_index},
                        "scale": p.scale, "depth": p.depth, "anchor": list(p.anchor)}
                       for p in plan.placements]
            ann = {"bbox_convention": BBOX_CONVENTION, "image": image_rel, "width": W, "height": H,
                   "composite_id": cid, "frame_id": fid, "seed": plan.seed,
                   "mode": config.params.tag, "objects": objects}
            _dump_json(config.output_dir / "annotations" / f"{cid}.json", ann)
            if config.write_voc:
                _write_text(config.output_dir / "annotations_voc" / f"{cid}.xml", to_voc_xml(ann))
            records.append(CompositeRecord(cid, fid, plan.seed, config.params.tag, objects,
                                           {"seconds": time.perf_counter() - t1}))
        return {"frame_id": fid, "status": "used", "reason": "", "records": records,
                "seconds": time.perf_counter() - t0}
    except Exception as e:  # noqa: BLE001 - one bad frame must not abort the run
        return {"frame_id": fid, "status": "error", "reason": f"{type(e).__name__}: {e}", "records": []}


def generate_dataset(config: RunConfig, jobs: int = 1) -> dict:
    """Generate the dataset described by ``config``; returns the run manifest."""
    for p in (config.scene_manifest, config.object_library):
        if not p.exists():
            raise MissingFile(f"missing input path: {p}")
    entries = manifest_entries(config.scene_manifest)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    log.info("run start", extra={"stage": "generate", "frames": len(entries), "mode": config.params.tag})

    t0 = time.perf_counter()
    if jobs <= 1 or len(entries) <= 1:
        _init_worker(config)
        results = [_process_frame(e) for e in entries]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(config,)) as ex:
            results = list(ex.map(_process_frame, entries))

    records, excluded, errors, timing = [], [], [], {}
    for res in results:
        fid = res["frame_id"]
        if res["status"] == "used":
            records.extend(res["records"])
            timing[fid] = {"seconds": res["seconds"],
                           "composites": {r.composite_id: r.timing for r in res["records"]}}
            log.info("frame done", extra={"stage": "generate", "frame": fid,
                                          "composites": len(res["records"])})
        else:
            excluded.append({"frame_id": fid, "reason": res["reason"]})
            if res["status"] == "error":
                errors.append({"frame_id": fid, "error": res["reason"]})
                log.error(res["reason"], extra={"stage": "generate", "frame": fid})
            else:
                log.info("frame excluded", extra={"stage": "generate", "frame": fid,
                                                  "reason": res["reason"]})

    manifest = {
        "version": __version__,
        "bbox_convention": BBOX_CONVENTION,
        "config": config.to_dict(),
        "frames_in_manifest": len(entries),
        "composites": [r.to_dict() for r in records],
        "excluded": excluded,
        "errors": errors,
    }
    _dump_json(out / "manifest.json", manifest)
    _dump_json(out / "stats.json", run_stats(manifest))
    _dump_json(out / "timing.json", {"total_seconds": time.perf_counter() - t0, "frames": timing})
    _write_text(out / "errors.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in errors))
    log.info("run done", extra={"stage": "generate", "composites": len(records),
                                "excluded": len(excluded), "errors": len(errors)})
    return manifest


SIZE_BINS = (16, 32, 64, 128, 256)


def _size_bin(bbox) -> str:
    side = ((bbox[2] - bbox[0]) * (bbox[3] - bbox[1])) ** 0.5
    lo = 0
    for hi in SIZE_BINS:
        if side < hi:
            return f"{lo}-{hi}"
        lo = hi
    return f">={SIZE_BINS[-1]}"


def run_stats(manifest: dict) -> dict:
    """Summary counts of a run manifest."""
    comps = manifest.get("composites", [])
    excluded = manifest.get("excluded", [])
    per_class: dict[str, int] = {}
    hist = {f"{lo}-{hi}": 0 for lo, hi in zip((0,) + SIZE_BINS[:-1], SIZE_BINS)}
    hist[f">={SIZE_BINS[-1]}"] = 0
    n_inst = 0
    for c in comps:
        for o in c["objects"]:
            n_inst += 1
            per_class[o["label"]] = per_class.get(o["label"], 0) + 1
            hist[_size_bin(o["bbox"])] += 1
    n_frames = manifest.get("frames_in_manifest", 0)
    return {
        "frames_in_manifest": n_frames,
        "frames_used": n_frames - len(excluded),
        "frames_excluded": len(excluded),
        "excluded_by_reason": _count_by(excluded, "reason"),
        "composites": len(comps),
        "instances_total": n_inst,
        "instances_per_class": dict(sorted(per_class.items())),
        "bbox_size_histogram": hist,
        "mean_objects_per_composite": n_inst / len(comps) if comps else 0.0,
    }


def _count_by(items: list[dict], key: str) -> dict:
    out: dict = {}
    for it in items:
        r = it[key].split(":")[0]
        out[r] = out.get(r, 0) + 1
    return dict(sorted(out.items()))


def load_run_manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise MissingFile(f"missing run manifest: {path}")
    return json.loads(path.read_text())
