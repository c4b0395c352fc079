"""Support-surface extraction from RGB-D frames.

Pipeline: backproject depth to an organized cloud, estimate per-pixel normals,
grow regions over smooth neighbors, fit a plane to each region with RANSAC,
then keep large planes whose normal agrees with gravity, merging coplanar
fragments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dataset_io import CameraIntrinsics, RgbdFrame


@dataclass(frozen=True)
class PlaneModel:
    """Plane ``normal . X + offset = 0`` with the normal facing the camera."""

    normal: tuple[float, float, float]
    offset: float

    @property
    def n(self) -> np.ndarray:
        return np.asarray(self.normal, dtype=np.float64)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.n + self.offset)


@dataclass(frozen=True, eq=False)
class SupportSurface:
    plane: PlaneModel
    support_mask: np.ndarray
    extent_px: int
    semantic_valid: bool = False


@dataclass(frozen=True)
class GravityModel:
    up: tuple[float, float, float] = (0.0, -1.0, 0.0)
    angle_tol_deg: float = 15.0

    def __post_init__(self):
        up = np.asarray(self.up, dtype=np.float64)
        norm = np.linalg.norm(up)
        if norm == 0:
            raise ValueError("gravity up vector must be non-zero")
        object.__setattr__(self, "up", tuple(float(x) for x in up / norm))
        if not 0 < self.angle_tol_deg < 90:
            raise ValueError(f"angle_tol_deg must be in (0, 90), got {self.angle_tol_deg}")


@dataclass(frozen=True)
class GeometryParams:
    normal_window: int = 5
    seg_angle_tol_deg: float = 10.0
    seg_dist_tol_m: float = 0.02
    min_region_px: int = 50
    ransac_iterations: int = 200
    inlier_dist_m: float = 0.02
    min_inlier_frac: float = 0.5
    angle_tol_deg: float = 15.0
    # fraction of the image area
    min_extent_frac: float = 0.005
    merge_angle_tol_deg: float = 5.0
    merge_dist_tol_m: float = 0.03

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "GeometryParams":
        return cls(**(d or {}))


# ---------------------------------------------------------------- cloud

def backproject(frame_or_depth, intrinsics: Optional[CameraIntrinsics] = None) -> np.ndarray:
    """Organized H x W x 3 cloud; pixels with zero depth are NaN."""
    if isinstance(frame_or_depth, RgbdFrame):
        depth, intr = frame_or_depth.depth, frame_or_depth.intrinsics
    else:
        depth, intr = np.asarray(frame_or_depth, dtype=np.float64), intrinsics
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    z = np.where(depth > 0, depth, np.nan)
    return np.dstack(((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z))


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of camera-frame points (..., 3)."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return np.stack((x * intr.fx / z + intr.cx, y * intr.fy / z + intr.cy), axis=-1)


def valid_mask(cloud: np.ndarray) -> np.ndarray:
    return np.isfinite(cloud[..., 2])


def compute_normals(cloud: np.ndarray, window: int = 5) -> np.ndarray:
    """Per-pixel unit normals from a total-least-squares fit over a window.

    Pixels whose window holds fewer than 3 valid points, or whose neighbors
    are collinear, get NaN. Normals are oriented so that ``n . X < 0``.
    """
    valid = valid_mask(cloud)
    h, w = valid.shape
    out = np.full((h, w, 3), np.nan)
    if not valid.any():
        return out
    # shift to the global centroid to limit cancellation in the moment sums
    center = np.nanmean(cloud.reshape(-1, 3), axis=0)
    pts = np.where(valid[..., None], cloud - center, 0.0)
    wv = valid.astype(np.float64)

    def box(a):
        return ndimage.uniform_filter(a, size=window, mode="constant", cval=0.0) * window * window

    cnt = np.rint(box(wv))
    sums = [box(pts[..., i]) for i in range(3)]
    cov = np.empty((h, w, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            s = box(pts[..., i] * pts[..., j])
            with np.errstate(invalid="ignore", divide="ignore"):
                c = s / cnt - sums[i] * sums[j] / cnt**2
            cov[..., i, j] = c
            cov[..., j, i] = c
    ok = valid & (cnt >= 3)
    evals, evecs = np.linalg.eigh(cov[ok])
    n = evecs[:, :, 0]
    # rank < 2 means the neighborhood is a line or a point
    ok_rank = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300)
    x = cloud[ok]
    sign = np.where(np.einsum("ij,ij->i", n, x) > 0, -1.0, 1.0)
    n = n * sign[:, None]
    n[~ok_rank] = np.nan
    out[ok] = n
    return out


# ---------------------------------------------------------------- regions

def oversegment(frame: RgbdFrame, cloud: np.ndarray, normals: np.ndarray,
                params: GeometryParams = GeometryParams()) -> list[np.ndarray]:
    """Group valid pixels into smooth 4-connected regions.

    Two neighbors join when the angle between their normals is at most
    ``seg_angle_tol_deg`` and their plane offsets ``-n . X`` differ by at
    most ``seg_dist_tol_m``. Regions below ``min_region_px`` are dropped.
    Returns one boolean mask per region, largest first.
    """
    h, w = cloud.shape[:2]
    valid = valid_mask(cloud)
    if not valid.any():
        return []
    nok = valid & np.all(np.isfinite(normals), axis=-1)
    safe_n = np.where(nok[..., None], normals, 0.0)
    offs = -np.einsum("ijk,ijk->ij", safe_n, np.where(valid[..., None], cloud, 0.0))
    cos_tol = np.cos(np.deg2rad(params.seg_angle_tol_deg))
    idx = np.arange(h * w).reshape(h, w)

    rows, cols = [], []
    for (a, b) in (((slice(None), slice(0, -1)), (slice(None), slice(1, None))),
                   ((slice(0, -1), slice(None)), (slice(1, None), slice(None)))):
        both = nok[a] & nok[b]
        cosang = np.einsum("ijk,ijk->ij", safe_n[a], safe_n[b])
        join = both & (cosang >= cos_tol) & (np.abs(offs[a] - offs[b]) <= params.seg_dist_tol_m)
        rows.append(idx[a][join])
        cols.append(idx[b][join])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(h, w)
    comp_valid = comp[valid]
    counts = np.bincount(comp_valid, minlength=h * w)
    keep = np.flatnonzero(counts >= params.min_region_px)
    keep = keep[np.argsort(-counts[keep], kind="stable")]
    return [(comp == k) & valid for k in keep]


# ---------------------------------------------------------------- planes

def _tls_plane(pts: np.ndarray, return_spread: bool = False):
    c = pts.mean(axis=0)
    d = pts - c
    evals, evecs = np.linalg.eigh(d.T @ d)
    n = evecs[:, 0]
    if n @ c > 0:
        n = -n
    if return_spread:
        # std along the weaker in-plane axis
        return n, float(-n @ c), float(np.sqrt(max(evals[1], 0.0) / len(pts)))
    return n, float(-n @ c)


def fit_plane_ransac(region: np.ndarray, cloud: np.ndarray, rng: np.random.Generator,
                     iterations: int = 200, inlier_dist_m: float = 0.02,
                     min_inlier_frac: float = 0.5):
    """RANSAC plane fit over the valid pixels of ``region``.

    Returns ``(PlaneModel, inlier_mask)`` or ``None`` when the best
    refit plane explains less than ``min_inlier_frac`` of the region, or
    when its inliers are nearly collinear (spread across the weaker in-plane
    axis below ``inlier_dist_m``), which leaves the tilt undetermined.
    Collinear samples are redrawn.
    """
    sel = region & valid_mask(cloud)
    pix = np.flatnonzero(sel)
    n_pts = pix.size
    if n_pts < 3:
        return None
    pts = cloud.reshape(-1, 3)[pix]
    scale = float(np.ptp(pts, axis=0).max()) or 1.0

    best_count, best = -1, None
    for _ in range(iterations):
        for _retry in range(100):
            i = rng.choice(n_pts, size=3, replace=False)
            p0, p1, p2 = pts[i]
            n = np.cross(p1 - p0, p2 - p0)
            nn = np.linalg.norm(n)
            if nn > 1e-9 * scale * scale:
                break
        else:
            return None
        n = n / nn
        cnt = int(np.count_nonzero(np.abs((pts - p0) @ n) <= inlier_dist_m))
        if cnt > best_count:
            best_count, best = cnt, (n, float(-n @ p0))

    n, d = best
    inl = np.abs(pts @ n + d) <= inlier_dist_m
    n, d = _tls_plane(pts[inl])
    inl = np.abs(pts @ n + d) <= inlier_dist_m
    if inl.sum() < 3 or inl.sum() / n_pts < min_inlier_frac:
        return None
    if _tls_plane(pts[inl], return_spread=True)[2] < inlier_dist_m:
        return None
    mask = np.zeros(cloud.shape[:2], dtype=bool)
    mask.reshape(-1)[pix[inl]] = True
    return PlaneModel(tuple(float(x) for x in n), d), mask


def _angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0))))


def select_support_surfaces(fits: list, cloud: np.ndarray, gravity: GravityModel,
                            min_extent_px: int, params: GeometryParams = GeometryParams()
                            ) -> list[SupportSurface]:
    """Keep gravity-aligned, large planes and merge coplanar ones.

    Merged surfaces are refit on the union of their inliers; the support
    mask is then restricted to points within ``inlier_dist_m`` of the refit.
    """
    up = np.asarray(gravity.up)
    kept = [(pl, m) for pl, m in fits
            if _angle_deg(pl.n, up) <= gravity.angle_tol_deg and int(m.sum()) >= min_extent_px]
    if not kept:
        return []
    # union-find over pairwise coplanarity
    parent = list(range(len(kept)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            a, b = kept[i][0], kept[j][0]
            if (_angle_deg(a.n, b.n) <= params.merge_angle_tol_deg
                    and abs(a.offset - b.offset) <= params.merge_dist_tol_m):
                parent[find(j)] = find(i)

    groups: dict[int, list[int]] = {}
    for i in range(len(kept)):
        groups.setdefault(find(i), []).append(i)

    flat = cloud.reshape(-1, 3)
    out = []
    for members in groups.values():
        if len(members) == 1:
            plane, mask = kept[members[0]]
        else:
            union = np.logical_or.reduce([kept[i][1] for i in members])
            n, d = _tls_plane(flat[union.reshape(-1)])
            plane = PlaneModel(tuple(float(x) for x in n), d)
            mask = np.zeros_like(union)
            pix = np.flatnonzero(union)
            close = plane.distance(flat[pix]) <= params.inlier_dist_m
            mask.reshape(-1)[pix[close]] = True
        extent = int(mask.sum())
        if extent >= min_extent_px and _angle_deg(plane.n, up) <= gravity.angle_tol_deg:
            out.append(SupportSurface(plane, mask, extent))
    out.sort(key=lambda s: -s.extent_px)
    return out


def extract_support_surfaces(frame: RgbdFrame, rng: np.random.Generator,
                             params: GeometryParams = GeometryParams(),
                             gravity: Optional[GravityModel] = None) -> list[SupportSurface]:
    """Run the full geometry pipeline on one frame."""
    if gravity is None:
        up = frame.gravity_up if frame.gravity_up is not None else (0.0, -1.0, 0.0)
        gravity = GravityModel(up, params.angle_tol_deg)
    cloud = backproject(frame)
    normals = compute_normals(cloud, params.normal_window)
    fits = []
    for region in oversegment(frame, cloud, normals, params):
        fit = fit_plane_ransac(region, cloud, rng, params.ransac_iterations,
                               params.inlier_dist_m, params.min_inlier_frac)
        if fit is not None:
            fits.append(fit)
    h, w = frame.shape
    min_extent = max(1, int(np.ceil(params.min_extent_frac * h * w)))
    return select_support_surfaces(fits, cloud, gravity, min_extent, params)


def with_validity(surface: SupportSurface, valid: bool) -> SupportSurface:
    return replace(surface, semantic_valid=valid)
