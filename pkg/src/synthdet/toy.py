"""Procedural RGB-D backgrounds and object libraries for demos and tests.

Scenes are ray-cast from a level camera: a floor, a back wall and
(optionally) a table with a horizontal top and a vertical front face.
Labels use NYUD40 ids (wall 1, floor 2, table 7).
"""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .dataset_io import CameraIntrinsics, ObjectView, RgbdFrame, save_scene_collection, save_view

WALL, FLOOR, TABLE = 1, 2, 7
VARIANTS = ("kitchen", "floor_only", "wall", "no_depth")


def toy_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    f = 1.0 * width
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def render_scene(frame_id: str, rng: np.random.Generator, variant: str = "kitchen",
                 intr: CameraIntrinsics | None = None, noise_m: float = 0.001) -> RgbdFrame:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    intr = intr or toy_intrinsics()
    H, W = intr.height, intr.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    dx, dy = (u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy

    y_table = rng.uniform(0.30, 0.40)
    y_floor = y_table + 0.75
    z_wall = rng.uniform(3.0, 3.5)
    z_near, z_far = rng.uniform(1.1, 1.3), rng.uniform(2.0, 2.3)
    half_w = rng.uniform(0.5, 0.8)
    x_shift = rng.uniform(-0.2, 0.2)

    depth = np.full((H, W), np.inf)
    labels = np.zeros((H, W), dtype=np.uint16)
    part = np.zeros((H, W), dtype=np.uint8)  # 1 wall, 2 floor, 3 table top, 4 table front

    def hit(z, ok, lab, pid):
        closer = ok & (z > 0) & (z < depth)
        depth[closer] = z[closer]
        labels[closer] = lab
        part[closer] = pid

    hit(np.full((H, W), z_wall), np.ones((H, W), bool), WALL, 1)
    if variant != "wall":
        with np.errstate(divide="ignore", invalid="ignore"):
            z_fl = np.where(dy > 0, y_floor / dy, np.inf)
        hit(z_fl, (dy > 0) & (z_fl < z_wall), FLOOR, 2)
    if variant in ("kitchen", "no_depth"):
        with np.errstate(divide="ignore", invalid="ignore"):
            z_top = np.where(dy > 0, y_table / dy, np.inf)
        x_top = dx * z_top - x_shift
        hit(z_top, (dy > 0) & (z_top >= z_near) & (z_top <= z_far) & (np.abs(x_top) <= half_w), TABLE, 3)
        y_front = dy * z_near
        x_front = dx * z_near - x_shift
        hit(np.full((H, W), z_near), (y_front >= y_table) & (y_front <= y_floor) & (np.abs(x_front) <= half_w),
            TABLE, 4)

    depth = np.where(np.isfinite(depth), depth, 0.0)
    depth = np.where(depth > 0, depth + rng.normal(0, noise_m, depth.shape), 0.0)
    depth = np.clip(np.rint(depth * 1000) / 1000, 0, None)

    base = {1: (200, 190, 170), 2: (120, 110, 100), 3: (150, 95, 60), 4: (110, 70, 45)}
    rgb = np.zeros((H, W, 3), dtype=np.float64)
    for pid, col in base.items():
        rgb[part == pid] = col
    rgb += rng.normal(0, 6, rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if variant == "no_depth":
        depth = np.zeros_like(depth)
    return RgbdFrame(frame_id, rgb, depth, intr, labels)


def make_object_view(instance_id: str, color, shape: str, elevation: int, azimuth: int,
                     rng: np.random.Generator, size=(64, 44), z_bar: float = 0.9) -> ObjectView:
    h, w = size
    rgb = np.full((h, w, 3), 245, dtype=np.uint8)
    mask = np.zeros((h, w), dtype=np.uint8)
    margin = 3
    if shape == "ellipse":
        cv2.ellipse(mask, (w // 2, h // 2), (w // 2 - margin, h // 2 - margin), 0, 0, 360, 1, -1)
    elif shape == "box":
        mask[margin:h - margin, margin:w - margin] = 1
    else:  # bottle: narrow neck on a wide body
        mask[h // 3:h - margin, margin:w - margin] = 1
        mask[margin:h // 3, w // 3:w - w // 3] = 1
    mask = mask.astype(bool)
    stripes = ((np.arange(h)[:, None] + 4 * azimuth + 2 * elevation) // 6) % 2
    col = np.asarray(color, dtype=np.float64)
    body = np.where(np.broadcast_to(stripes, (h, w))[..., None] == 1, col, col * 0.6)
    rgb[mask] = np.clip(body[mask], 0, 255).astype(np.uint8)
    depth = np.where(mask, z_bar + rng.normal(0, 0.01, (h, w)), 0.0)
    depth = np.clip(np.rint(depth * 1000) / 1000, 0, None)
    return ObjectView(instance_id, azimuth, elevation, rgb, depth, mask)


TOY_OBJECTS = (
    ("red_can", (200, 40, 40), "ellipse"),
    ("green_box", (40, 170, 60), "box"),
    ("blue_bottle", (40, 70, 200), "bottle"),
)


def make_library_views(rng: np.random.Generator, n_elev: int = 2, n_azim: int = 4) -> dict[str, list[ObjectView]]:
    out = {}
    for iid, color, shape in TOY_OBJECTS:
        out[iid] = [make_object_view(iid, color, shape, e, a, rng)
                    for e in range(n_elev) for a in range(n_azim)]
    return out


def write_toy_dataset(root, n_frames: int = 10, seed: int = 0, variants=None, mode: str = "SP-BL-SS",
                      composites_per_frame: int = 4) -> Path:
    """Write scenes, a library and a run config under ``root``; returns the config path.

    ``variants`` lists one variant name per frame; by default every fifth
    frame is wall-only (no support surface) and the rest are kitchens.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    if variants is None:
        variants = ["wall" if i % 5 == 4 else "kitchen" for i in range(n_frames)]
    frames = [render_scene(f"bg{i:03d}", rng, variants[i]) for i in range(n_frames)]
    save_scene_collection(frames, root / "scenes" / "manifest.json")
    for views in make_library_views(rng).values():
        for view in views:
            save_view(root / "library", view)
    pos, app, sc = mode.split("-")
    config = {
        "scene_manifest": "scenes/manifest.json",
        "object_library": "library",
        "output_dir": "run",
        "composites_per_frame": composites_per_frame,
        "master_seed": seed,
        "params": {"positioning": pos, "appearance": app, "scale_mode": sc},
    }
    path = root / "run.json"
    path.write_text(json.dumps(config, indent=2))
    return path
