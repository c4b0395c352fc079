"""Loading and validation of background scenes and object-view libraries.

On-disk conventions:

* color rasters are 8-bit RGB PNG,
* depth rasters are 16-bit grayscale PNG in millimeters (0 = missing),
* label rasters are 16-bit grayscale PNG holding NYUD40 class ids,
* masks are 8-bit PNG, any nonzero value is foreground.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInstance,
    MalformedManifest,
    MaskAllBackground,
    MissingFile,
    NoValidDepth,
)

VIEW_ID_RE = re.compile(r"^e(?P<elev>\d+)_a(?P<azim>\d+)$")


def view_id(elevation_idx: int, azimuth_idx: int) -> str:
    return f"e{elevation_idx:02d}_a{azimuth_idx:03d}"


def parse_view_id(vid: str) -> tuple[int, int]:
    """Return ``(elevation_idx, azimuth_idx)`` encoded in a view id."""
    m = VIEW_ID_RE.match(vid)
    if m is None:
        raise MalformedManifest(f"view id {vid!r} does not match 'e<elev>_a<azim>'")
    return int(m.group("elev")), int(m.group("azim"))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise MalformedManifest(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise MalformedManifest(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedManifest(f"bad intrinsics block {d!r}: {e}") from None

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    frame_id: str
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    labels: Optional[np.ndarray] = None
    gravity_up: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3) or self.rgb.dtype != np.uint8:
            raise DimensionMismatch(
                f"frame {self.frame_id}: rgb is {self.rgb.shape} {self.rgb.dtype}, expected ({h}, {w}, 3) uint8"
            )
        if self.depth.shape != (h, w):
            raise DimensionMismatch(f"frame {self.frame_id}: depth is {self.depth.shape}, expected {(h, w)}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise DimensionMismatch(f"frame {self.frame_id}: depth must be finite and >= 0")
        if self.labels is not None and self.labels.shape != (h, w):
            raise DimensionMismatch(f"frame {self.frame_id}: labels is {self.labels.shape}, expected {(h, w)}")
        object.__setattr__(self, "rgb", _frozen(self.rgb))
        object.__setattr__(self, "depth", _frozen(self.depth.astype(np.float64)))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, eq=False)
class ObjectView:
    instance_id: str
    azimuth_idx: int
    elevation_idx: int
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = self.mask.shape
        if self.rgb.shape[:2] != shape or self.depth.shape != shape:
            raise DimensionMismatch(
                f"view {self.instance_id}/{self.view_id}: rgb {self.rgb.shape}, depth {self.depth.shape}, "
                f"mask {shape} disagree"
            )
        mask = self.mask.astype(bool)
        if not mask.any():
            raise MaskAllBackground(f"view {self.instance_id}/{self.view_id} has an all-background mask")
        if not np.any(self.depth[mask] > 0):
            raise NoValidDepth(f"view {self.instance_id}/{self.view_id} has no valid depth under its mask")
        object.__setattr__(self, "rgb", _frozen(self.rgb))
        object.__setattr__(self, "depth", _frozen(self.depth.astype(np.float64)))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def view_id(self) -> str:
        return view_id(self.elevation_idx, self.azimuth_idx)

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    def cropped_to_mask(self) -> "ObjectView":
        """The same view cut down to the bounding box of its mask."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        if sl[0].stop - sl[0].start == self.height and sl[1].stop - sl[1].start == self.width:
            return self
        return ObjectView(self.instance_id, self.azimuth_idx, self.elevation_idx,
                          self.rgb[sl], self.depth[sl], self.mask[sl])


@dataclass(frozen=True)
class ObjectLibrary:
    instances: dict[str, list[ObjectView]]
    median_depth: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for iid, views in self.instances.items():
            if not views:
                raise EmptyInstance(f"instance {iid!r} has no views")
            if not self.median_depth.get(iid, 0) > 0:
                raise NoValidDepth(f"instance {iid!r} has no positive median depth")

    @property
    def instance_ids(self) -> list[str]:
        return sorted(self.instances)

    @classmethod
    def from_views(cls, instances: dict[str, list[ObjectView]]) -> "ObjectLibrary":
        medians = {}
        for iid, views in instances.items():
            if not views:
                raise EmptyInstance(f"instance {iid!r} has no views")
            medians[iid] = compute_median_depth(views)
        return cls(instances=dict(instances), median_depth=medians)


def compute_median_depth(views: list[ObjectView]) -> float:
    """Median of all valid masked depth pixels pooled over every view, in meters."""
    if not views:
        raise NoValidDepth("no views given")
    pooled = [v.depth[v.mask & (v.depth > 0)] for v in views]
    pooled = np.concatenate(pooled) if pooled else np.empty(0)
    if pooled.size == 0:
        raise NoValidDepth("every masked pixel has missing depth")
    return float(np.median(pooled))


# ---------------------------------------------------------------- raster io

def _imread(path: Path, flags: int) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    img = cv2.imread(str(path), flags)
    if img is None:
        raise MissingFile(f"unreadable image: {path}")
    return img


def read_rgb(path) -> np.ndarray:
    img = _imread(Path(path), cv2.IMREAD_COLOR)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def read_depth(path) -> np.ndarray:
    """Depth PNG in millimeters to float meters."""
    img = _imread(Path(path), cv2.IMREAD_UNCHANGED)
    if img.ndim != 2:
        raise DimensionMismatch(f"{path}: depth raster must be single-channel, got shape {img.shape}")
    return img.astype(np.float64) / 1000.0


def read_labels(path) -> np.ndarray:
    img = _imread(Path(path), cv2.IMREAD_UNCHANGED)
    if img.ndim != 2:
        raise DimensionMismatch(f"{path}: label raster must be single-channel, got shape {img.shape}")
    return img.astype(np.uint16)


def read_mask(path) -> np.ndarray:
    img = _imread(Path(path), cv2.IMREAD_UNCHANGED)
    if img.ndim == 3:
        img = img.max(axis=2)
    return img > 0


def _imwrite(path: Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # temp + rename so concurrent readers never see a partial file
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp.png")
    if not cv2.imwrite(str(tmp), img):
        raise OSError(f"failed to write {path}")
    os.replace(tmp, path)


def write_rgb(path, rgb: np.ndarray) -> None:
    _imwrite(path, cv2.cvtColor(np.asarray(rgb, dtype=np.uint8), cv2.COLOR_RGB2BGR))


def write_depth(path, depth_m: np.ndarray) -> None:
    mm = np.rint(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    if mm.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("depth exceeds 65.535 m and cannot be stored as 16-bit millimeters")
    _imwrite(path, mm.astype(np.uint16))


def write_labels(path, labels: np.ndarray) -> None:
    _imwrite(path, np.asarray(labels, dtype=np.uint16))


def write_mask(path, mask: np.ndarray) -> None:
    _imwrite(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


# ---------------------------------------------------------------- scenes

def _read_manifest(manifest_path: Path) -> dict:
    if not manifest_path.is_file():
        raise MissingFile(f"missing manifest: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise MalformedManifest(f"{manifest_path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise MalformedManifest(f"{manifest_path}: expected an object with a 'frames' list")
    ids = set()
    for i, entry in enumerate(doc["frames"]):
        if not isinstance(entry, dict):
            raise MalformedManifest(f"{manifest_path}: frame #{i} is not an object")
        for key in ("id", "rgb", "depth", "intrinsics"):
            if key not in entry:
                raise MalformedManifest(f"{manifest_path}: frame #{i} lacks required field {key!r}")
        if entry["id"] in ids:
            raise MalformedManifest(f"{manifest_path}: duplicate frame id {entry['id']!r}")
        ids.add(entry["id"])
        up = entry.get("gravity_up")
        if up is not None and (not isinstance(up, list) or len(up) != 3):
            raise MalformedManifest(f"{manifest_path}: frame {entry['id']!r} gravity_up must be a 3-list")
    return doc


def manifest_entries(manifest_path) -> list[dict]:
    """Validated frame entries of a scene manifest, in manifest order."""
    return list(_read_manifest(Path(manifest_path))["frames"])


def load_frame(entry: dict, base_dir) -> RgbdFrame:
    """Load one manifest frame entry; paths resolve against ``base_dir``."""
    base = Path(base_dir)
    fid = str(entry["id"])
    intr = CameraIntrinsics.from_dict(entry["intrinsics"])
    rgb = read_rgb(base / entry["rgb"])
    depth = read_depth(base / entry["depth"])
    labels = read_labels(base / entry["labels"]) if entry.get("labels") else None
    up = entry.get("gravity_up")
    return RgbdFrame(fid, rgb, depth, intr, labels,
                     tuple(float(x) for x in up) if up is not None else None)


def load_scene_collection(manifest_path) -> list[RgbdFrame]:
    manifest_path = Path(manifest_path)
    entries = manifest_entries(manifest_path)
    return [load_frame(e, manifest_path.parent) for e in entries]


def save_scene_collection(frames: list[RgbdFrame], manifest_path) -> None:
    """Write frames and a manifest that ``load_scene_collection`` reads back losslessly."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    entries = []
    for fr in frames:
        entry = {"id": fr.frame_id, "rgb": f"{fr.frame_id}.rgb.png", "depth": f"{fr.frame_id}.depth.png",
                 "intrinsics": fr.intrinsics.to_dict()}
        write_rgb(base / entry["rgb"], fr.rgb)
        write_depth(base / entry["depth"], fr.depth)
        if fr.labels is not None:
            entry["labels"] = f"{fr.frame_id}.labels.png"
            write_labels(base / entry["labels"], fr.labels)
        if fr.gravity_up is not None:
            entry["gravity_up"] = list(fr.gravity_up)
        entries.append(entry)
    base.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps({"frames": entries}, indent=2))


# ---------------------------------------------------------------- objects

def _view_ids(inst_dir: Path) -> list[str]:
    return sorted(p.name[: -len(".rgb.png")] for p in inst_dir.glob("*.rgb.png"))


def load_view(inst_dir, vid: str, use_refined_mask: bool = False) -> ObjectView:
    inst_dir = Path(inst_dir)
    elev, azim = parse_view_id(vid)
    mask_path = inst_dir / f"{vid}.mask.png"
    refined = inst_dir / f"{vid}.mask_refined.png"
    if use_refined_mask and refined.is_file():
        mask_path = refined
    rgb = read_rgb(inst_dir / f"{vid}.rgb.png")
    depth = read_depth(inst_dir / f"{vid}.depth.png")
    mask = read_mask(mask_path)
    return ObjectView(inst_dir.name, azim, elev, rgb, depth, mask)


def load_object_library(library_path, use_refined_masks: bool = False) -> ObjectLibrary:
    root = Path(library_path)
    if not root.is_dir():
        raise MissingFile(f"missing object library directory: {root}")
    instances: dict[str, list[ObjectView]] = {}
    for inst_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        vids = _view_ids(inst_dir)
        if not vids:
            raise EmptyInstance(f"instance directory {inst_dir} contains no views")
        instances[inst_dir.name] = [load_view(inst_dir, v, use_refined_masks) for v in vids]
    if not instances:
        raise EmptyInstance(f"object library {root} contains no instance directories")
    return ObjectLibrary.from_views(instances)


def save_view(library_path, view: ObjectView) -> None:
    inst_dir = Path(library_path) / view.instance_id
    write_rgb(inst_dir / f"{view.view_id}.rgb.png", view.rgb)
    write_depth(inst_dir / f"{view.view_id}.depth.png", view.depth)
    write_mask(inst_dir / f"{view.view_id}.mask.png", view.mask)
