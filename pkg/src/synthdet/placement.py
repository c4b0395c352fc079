"""Planning object placements for one composite image."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import cv2
import numpy as np

from .dataset_io import ObjectLibrary, ObjectView, RgbdFrame
from .errors import InvalidDepth, NoValidPlacement

RS_SCALES = tuple(round(0.2 + 0.1 * i, 1) for i in range(9))


class Positioning(str, Enum):
    RP = "RP"
    SP = "SP"


class ScaleMode(str, Enum):
    RS = "RS"
    SS = "SS"


@dataclass(frozen=True)
class GenerationParams:
    positioning: Positioning = Positioning.SP
    appearance: str = "BL"
    scale_mode: ScaleMode = ScaleMode.SS
    max_overlap: float = 0.4
    objects_per_image: tuple[int, int] = (2, 6)
    rs_scales: tuple[float, ...] = RS_SCALES
    max_attempts_per_object: int = 25
    min_px: int = 10
    # "min": intersection / smaller box area; "union": intersection / union
    overlap_denominator: str = "min"
    depth_window: int = 5

    def __post_init__(self):
        object.__setattr__(self, "positioning", Positioning(self.positioning))
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        if self.appearance not in ("SI", "BL"):
            raise ValueError(f"appearance must be SI or BL, got {self.appearance!r}")
        object.__setattr__(self, "objects_per_image", tuple(int(x) for x in self.objects_per_image))
        object.__setattr__(self, "rs_scales", tuple(float(x) for x in self.rs_scales))
        lo, hi = self.objects_per_image
        if not 0 <= self.max_overlap < 1:
            raise ValueError("max_overlap must be in [0, 1)")
        if lo < 1 or hi < lo:
            raise ValueError(f"objects_per_image must be [min >= 1, max >= min], got {self.objects_per_image}")
        if not self.rs_scales or not all(0 < s <= 1 for s in self.rs_scales):
            raise ValueError("rs_scales must be a non-empty subset of (0, 1]")
        if self.overlap_denominator not in ("min", "union"):
            raise ValueError("overlap_denominator must be 'min' or 'union'")

    @property
    def tag(self) -> str:
        return f"{self.positioning.value}-{self.appearance}-{self.scale_mode.value}"

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "GenerationParams":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positioning"] = self.positioning.value
        d["scale_mode"] = self.scale_mode.value
        d["objects_per_image"] = list(self.objects_per_image)
        d["rs_scales"] = list(self.rs_scales)
        return d


@dataclass(frozen=True)
class PlacementSpec:
    instance_id: str
    view_index: int
    azimuth_idx: int
    elevation_idx: int
    anchor: tuple[int, int]          # (u, v) = (col, row)
    depth: Optional[float]           # scene depth at the anchor, SS mode only
    scale: float
    size: tuple[int, int]            # (w_hat, h_hat)
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max; max exclusive

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id, "view_index": self.view_index,
            "view": {"azimuth": self.azimuth_idx, "elevation": self.elevation_idx},
            "anchor": list(self.anchor), "depth": self.depth, "scale": self.scale,
            "size": list(self.size), "bbox": list(self.bbox),
        }


@dataclass(frozen=True)
class CompositePlan:
    frame_id: str
    placements: tuple[PlacementSpec, ...]
    params: GenerationParams
    seed: int


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts, independent of process and order of use."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def selective_scale(w: int, h: int, z_bar: float, z: float) -> tuple[int, int]:
    """Scaled size ``(round(w * z_bar / z), round(h * z_bar / z))``, each at least 1."""
    if w < 1 or h < 1:
        raise ValueError(f"object size must be positive, got {w}x{h}")
    if not z_bar > 0:
        raise ValueError(f"median object depth must be positive, got {z_bar}")
    if not z > 0:
        raise InvalidDepth(f"scene depth at the anchor must be positive, got {z}")
    return max(1, round(w * z_bar / z)), max(1, round(h * z_bar / z))


def box_area(b) -> int:
    return max(0, b[2] - b[0]) * max(0, b[3] - b[1])


def intersection_area(a, b) -> int:
    return max(0, min(a[2], b[2]) - max(a[0], b[0])) * max(0, min(a[3], b[3]) - max(a[1], b[1]))


def bbox_overlap_frac(a, b, denominator: str = "min") -> float:
    """Intersection area over the smaller box area (or over the union)."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    if denominator == "union":
        return inter / (box_area(a) + box_area(b) - inter)
    return inter / min(box_area(a), box_area(b))


def anchor_bbox(anchor: tuple[int, int], size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Box of ``size`` horizontally centered on the anchor with its bottom row at the anchor row."""
    u, v = anchor
    w, h = size
    x0 = u - w // 2
    return x0, v + 1 - h, x0 + w, v + 1


def in_bounds(b, width: int, height: int) -> bool:
    return b[0] >= 0 and b[1] >= 0 and b[2] <= width and b[3] <= height


def depth_at(depth: np.ndarray, u: int, v: int, window: int = 5) -> float:
    """Median of valid depths in a window around ``(u, v)``; 0 when none."""
    r = window // 2
    patch = depth[max(v - r, 0): v + r + 1, max(u - r, 0): u + r + 1]
    vals = patch[patch > 0]
    return float(np.median(vals)) if vals.size else 0.0


def scale_view(view: ObjectView, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Resize a view's color and mask to ``size = (w, h)``."""
    w, h = size
    interp = cv2.INTER_AREA if w < view.width else cv2.INTER_LINEAR
    rgb = cv2.resize(np.ascontiguousarray(view.rgb), (w, h), interpolation=interp)
    mask = cv2.resize(view.mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) > 0
    return rgb, mask


def sample_placements(frame: RgbdFrame, placement_mask: Optional[np.ndarray], library: ObjectLibrary,
                      params: GenerationParams, rng: np.random.Generator, seed: int = 0) -> CompositePlan:
    """Draw one composite plan.

    Per object: instance, then view (cropped to its mask), then the scale
    for RS; anchors (and SS scales) are redrawn on each attempt. A candidate
    is rejected when its box leaves the image, is below ``min_px`` on a side,
    overlaps an accepted box by more than ``max_overlap``, or would leave any
    object (itself or an earlier one) with fewer than ``min_px**2`` visible
    mask pixels.
    """
    H, W = frame.shape
    if params.positioning is Positioning.SP:
        if placement_mask is None or not placement_mask.any():
            raise NoValidPlacement(f"frame {frame.frame_id}: empty placement mask")
        cand_v, cand_u = np.nonzero(placement_mask)
    else:
        cand_v = cand_u = None
    ids = library.instance_ids
    lo, hi = params.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))
    min_vis = params.min_px ** 2

    owner = np.full((H, W), -1, dtype=np.int32)
    accepted: list[PlacementSpec] = []
    visible = np.zeros(0, dtype=np.int64)
    for _ in range(n_objects):
        iid = ids[int(rng.integers(len(ids)))]
        views = library.instances[iid]
        vidx = int(rng.integers(len(views)))
        view = views[vidx].cropped_to_mask()
        rs = float(params.rs_scales[int(rng.integers(len(params.rs_scales)))]) \
            if params.scale_mode is ScaleMode.RS else None

        for _attempt in range(params.max_attempts_per_object):
            if cand_u is not None:
                k = int(rng.integers(cand_u.size))
                u, v = int(cand_u[k]), int(cand_v[k])
            else:
                u, v = int(rng.integers(W)), int(rng.integers(H))
            if params.scale_mode is ScaleMode.SS:
                z = depth_at(frame.depth, u, v, params.depth_window)
                if z <= 0:
                    continue
                z_bar = library.median_depth[iid]
                size = selective_scale(view.width, view.height, z_bar, z)
                scale = z_bar / z
            else:
                z = None
                scale = rs
                size = (max(1, round(view.width * scale)), max(1, round(view.height * scale)))
            if size[0] < params.min_px or size[1] < params.min_px:
                continue
            box = anchor_bbox((u, v), size)
            if not in_bounds(box, W, H):
                continue
            if any(bbox_overlap_frac(box, p.bbox, params.overlap_denominator) > params.max_overlap
                   for p in accepted):
                continue
            _, smask = scale_view(view, size)
            x0, y0, x1, y1 = box
            if int(smask.sum()) < min_vis:
                continue
            win = owner[y0:y1, x0:x1]
            covered = np.bincount(win[smask & (win >= 0)], minlength=len(accepted))
            if np.any(visible - covered < min_vis):
                continue
            visible = np.append(visible - covered, int(smask.sum()))
            win[smask] = len(accepted)
            accepted.append(PlacementSpec(iid, vidx, view.azimuth_idx, view.elevation_idx, (u, v),
                                          z, float(scale), size, box))
            break
    if not accepted:
        raise NoValidPlacement(f"frame {frame.frame_id}: no object could be placed")
    return CompositePlan(frame.frame_id, tuple(accepted), params, seed)


def visible_masks(plan: CompositePlan, library: ObjectLibrary, shape: tuple[int, int]) -> list[np.ndarray]:
    """Per placement, the full-image mask of its pixels not covered by later placements."""
    owner = np.full(shape, -1, dtype=np.int32)
    for i, p in enumerate(plan.placements):
        view = library.instances[p.instance_id][p.view_index].cropped_to_mask()
        _, smask = scale_view(view, p.size)
        x0, y0, x1, y1 = p.bbox
        owner[y0:y1, x0:x1][smask] = i
    return [owner == i for i in range(len(plan.placements))]
