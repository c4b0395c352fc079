"""Compositing an object crop into a background image.

Two modes: ``SI`` pastes masked pixels directly; ``BL`` solves the discrete
Poisson equation over the pasted region with the crop's gradients as the
guidance field and the background as Dirichlet boundary.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import NonConvergenceWarning, OutOfBounds


class BlendMode(str, Enum):
    SI = "SI"
    BL = "BL"


@dataclass(frozen=True)
class PoissonParams:
    max_iters: int = 5000
    tol: float = 0.1
    omega: float = 1.9
    check_every: int = 10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.omega < 2:
            raise ValueError("omega must be in (0, 2)")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PoissonParams":
        return cls(**(d or {}))


@dataclass(frozen=True, eq=False)
class BlendRequest:
    source: np.ndarray       # h x w x 3 uint8, already scaled
    mask: np.ndarray         # h x w bool
    destination: np.ndarray  # H x W x 3 uint8
    top_left: tuple[int, int]  # (row, col) of the crop origin in the destination
    mode: BlendMode = BlendMode.SI

    def window(self) -> tuple[slice, slice]:
        r, c = self.top_left
        h, w = self.mask.shape
        H, W = self.destination.shape[:2]
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise OutOfBounds(f"crop {h}x{w} at (row={r}, col={c}) exceeds destination {H}x{W}")
        return slice(r, r + h), slice(c, c + w)


def simple_superimpose(req: BlendRequest) -> np.ndarray:
    win = req.window()
    out = req.destination.copy()
    m = req.mask.astype(bool)
    out[win][m] = req.source[m]
    return out


def placed_mask(req: BlendRequest) -> np.ndarray:
    """The request's mask in destination coordinates."""
    win = req.window()
    full = np.zeros(req.destination.shape[:2], dtype=bool)
    full[win] = req.mask
    return full


def guidance_image(req: BlendRequest) -> np.ndarray:
    """Source crop pasted into destination coordinates; destination elsewhere.

    With this guidance, a source identical to the destination window solves
    the system exactly. Mask pixels on the crop edge see a source-to-destination
    jump; use :func:`pad_crop` first to avoid that.
    """
    win = req.window()
    g = req.destination.astype(np.float64).copy()
    g[win] = req.source
    return g


def pad_crop(req: BlendRequest) -> BlendRequest:
    """Equivalent request whose crop gains a 1 px edge-replicated margin where it fits.

    The mask is padded with background, so the placed pixels are unchanged,
    but every guidance gradient at the mask edge now comes from the source.
    """
    req.window()
    H, W = req.destination.shape[:2]
    r, c = req.top_left
    h, w = req.mask.shape
    top, left = int(r > 0), int(c > 0)
    bottom, right = int(r + h < H), int(c + w < W)
    pads = ((top, bottom), (left, right))
    return BlendRequest(np.pad(req.source, pads + ((0, 0),), mode="edge"),
                        np.pad(req.mask.astype(bool), pads), req.destination,
                        (r - top, c - left), req.mode)


def unknown_pixels(region: np.ndarray) -> np.ndarray:
    """Region pixels with all four neighbors inside the image; the rest stay pinned."""
    u = region.astype(bool).copy()
    u[0, :] = u[-1, :] = False
    u[:, 0] = u[:, -1] = False
    return u


def _neighbor_sum(f: np.ndarray) -> np.ndarray:
    s = np.zeros_like(f)
    s[1:] += f[:-1]
    s[:-1] += f[1:]
    s[:, 1:] += f[:, :-1]
    s[:, :-1] += f[:, 1:]
    return s


def _laplacian(f: np.ndarray) -> np.ndarray:
    return 4.0 * f - _neighbor_sum(f)


def poisson_residual(f: np.ndarray, guide: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Per-pixel residual of the discrete Poisson system on the unknown pixels.

    ``f`` is the full composite (destination outside the unknowns). For an
    unknown p the equation ``4 f_p - sum_q f_q = 4 g_p - sum_q g_q`` is the
    same as moving the known-neighbor terms of ``f`` to the right-hand side.
    """
    unk = unknown_pixels(region)
    r = _laplacian(guide) - _laplacian(f)
    return np.where(unk[..., None] if f.ndim == 3 else unk, r, 0.0)


def solve_poisson(guide: np.ndarray, dest: np.ndarray, region: np.ndarray,
                  params: PoissonParams = PoissonParams()) -> tuple[np.ndarray, bool]:
    """Red-black SOR solve; returns the unclamped float composite and a convergence flag."""
    dest = dest.astype(np.float64)
    guide = guide.astype(np.float64)
    unk = unknown_pixels(region)
    f = dest.copy()
    if not unk.any():
        return f, True
    rows = np.flatnonzero(unk.any(axis=1))
    cols = np.flatnonzero(unk.any(axis=0))
    # one-pixel frame around the unknowns always lies inside the image
    win = (slice(rows[0] - 1, rows[-1] + 2), slice(cols[0] - 1, cols[-1] + 2))
    fw, gw, uw = f[win].copy(), guide[win], unk[win]
    lap_g = _laplacian(gw)
    lap_g_u = lap_g[uw]

    # start from the guidance shifted to match the boundary mean
    boundary = ~uw & _dilate4(uw)
    shift = fw[boundary].mean(axis=0) - gw[boundary].mean(axis=0)
    fw[uw] = gw[uw] + shift

    ii, jj = np.indices(uw.shape)
    parity = (ii + jj + win[0].start + win[1].start) % 2
    colors = [uw & (parity == 0), uw & (parity == 1)]
    omega = params.omega
    converged = False
    for it in range(1, params.max_iters + 1):
        for cm in colors:
            nb = _neighbor_sum(fw)
            gs = (nb[cm] + lap_g[cm]) / 4.0
            fw[cm] += omega * (gs - fw[cm])
        if it % params.check_every == 0 or it == params.max_iters:
            res = lap_g_u - _laplacian(fw)[uw]
            if np.abs(res).max() <= params.tol:
                converged = True
                break
    f[win] = fw
    return f, converged


def _dilate4(m: np.ndarray) -> np.ndarray:
    out = m.copy()
    out[1:] |= m[:-1]
    out[:-1] |= m[1:]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def seamless_clone(req: BlendRequest, params: PoissonParams = PoissonParams()) -> np.ndarray:
    region = placed_mask(req)
    guide = guidance_image(req)
    f, converged = solve_poisson(guide, req.destination, region, params)
    if not converged:
        warnings.warn(f"Poisson solve did not reach tol={params.tol} in {params.max_iters} sweeps",
                      NonConvergenceWarning, stacklevel=2)
    out = req.destination.copy()
    unk = unknown_pixels(region)
    out[unk] = np.clip(np.rint(f[unk]), 0, 255).astype(np.uint8)
    return out


def blend(req: BlendRequest, params: PoissonParams = PoissonParams()) -> np.ndarray:
    if BlendMode(req.mode) is BlendMode.SI:
        return simple_superimpose(req)
    return seamless_clone(req, params)


def dense_poisson_solve(guide: np.ndarray, dest: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Direct solve of the same system, assembled pixel by pixel. Test oracle only.

    For every unknown p: ``|N(p)| f_p - sum_{q in N(p), q unknown} f_q
    = sum_{q in N(p), q known} dest_q + sum_{q in N(p)} (g_p - g_q)``.
    """
    guide = np.asarray(guide, dtype=np.float64)
    dest = np.asarray(dest, dtype=np.float64)
    H, W = region.shape
    unk = [(i, j) for i in range(H) for j in range(W)
           if region[i, j] and 0 < i < H - 1 and 0 < j < W - 1]
    index = {p: k for k, p in enumerate(unk)}
    n = len(unk)
    out = dest.copy()
    if n == 0:
        return out
    A = np.zeros((n, n))
    b = np.zeros((n,) + dest.shape[2:])
    for k, (i, j) in enumerate(unk):
        nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
        A[k, k] = len(nbrs)
        for q in nbrs:
            b[k] += guide[i, j] - guide[q]
            if q in index:
                A[k, index[q]] = -1.0
            else:
                b[k] += dest[q]
    x = np.linalg.solve(A, b)
    for k, p in enumerate(unk):
        out[p] = x[k]
    return out
