"""GraphCut refinement of object masks.

Binary segmentation with histogram color unaries and contrast-sensitive
Potts pairwise terms on the 4-neighbor grid, solved exactly with a
shortest-augmenting-path max-flow.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptySeedRegion, RefinementWarning

FOUR = ndimage.generate_binary_structure(2, 1)


class FlowNetwork:
    """Directed graph with residual capacities stored on paired arcs.

    Arc ``e`` and its reverse ``e ^ 1`` are created together by
    :meth:`add_edge`. :meth:`max_flow` runs Dinic's algorithm: each phase
    augments along shortest paths of the residual graph only.
    """

    def __init__(self, n_nodes: int):
        self.n = n_nodes
        self.adj: list[list[int]] = [[] for _ in range(n_nodes)]
        self.head: list[int] = []
        self.cap: list[float] = []
        self.orig: list[float] = []

    def add_edge(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> int:
        if cap < 0 or rev_cap < 0:
            raise ValueError("capacities must be non-negative")
        e = len(self.head)
        self.head += [v, u]
        self.cap += [float(cap), float(rev_cap)]
        self.orig += [float(cap), float(rev_cap)]
        self.adj[u].append(e)
        self.adj[v].append(e + 1)
        return e

    def _levels(self, s: int, t: int) -> Optional[list[int]]:
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        head, cap, adj = self.head, self.cap, self.adj
        while q:
            u = q.popleft()
            for e in adj[u]:
                v = head[e]
                if level[v] < 0 and cap[e] > 0:
                    level[v] = level[u] + 1
                    q.append(v)
        return level if level[t] >= 0 else None

    def _blocking_flow(self, s: int, t: int, level: list[int]) -> float:
        head, cap, adj = self.head, self.cap, self.adj
        it = [0] * self.n
        total = 0.0
        path: list[int] = []
        u = s
        while True:
            if u == t:
                f = min(cap[e] for e in path)
                cut_at = None
                for i, e in enumerate(path):
                    cap[e] -= f
                    cap[e ^ 1] += f
                    if cut_at is None and cap[e] <= 0:
                        cut_at = i
                total += f
                # resume from the tail of the first saturated arc
                del path[cut_at:]
                u = head[path[-1]] if path else s
                continue
            lst = adj[u]
            advanced = False
            while it[u] < len(lst):
                e = lst[it[u]]
                v = head[e]
                if cap[e] > 0 and level[v] == level[u] + 1:
                    path.append(e)
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if advanced:
                continue
            if u == s:
                return total
            level[u] = -1
            e = path.pop()
            u = head[e ^ 1]
            it[u] += 1

    def max_flow(self, s: int, t: int) -> float:
        if s == t:
            raise ValueError("source and sink must differ")
        total = 0.0
        while True:
            level = self._levels(s, t)
            if level is None:
                return total
            total += self._blocking_flow(s, t, level)

    def source_side(self, s: int) -> np.ndarray:
        """Nodes reachable from ``s`` in the residual graph (call after max_flow)."""
        seen = np.zeros(self.n, dtype=bool)
        seen[s] = True
        q = deque([s])
        head, cap, adj = self.head, self.cap, self.adj
        while q:
            u = q.popleft()
            for e in adj[u]:
                v = head[e]
                if not seen[v] and cap[e] > 0:
                    seen[v] = True
                    q.append(v)
        return seen

    def cut_capacity(self, side: np.ndarray) -> float:
        """Sum of original capacities of arcs leaving ``side``."""
        total = 0.0
        for e in range(len(self.head)):
            u, v = self.head[e ^ 1], self.head[e]
            if side[u] and not side[v]:
                total += self.orig[e]
        return total


@dataclass(frozen=True)
class RefineParams:
    r_fg: int = 5
    r_bg: int = 9
    lam: float = 50.0
    beta_auto: bool = True
    beta: float = 0.0
    hist_bins: int = 8
    hole_fill_px: int = 64
    sentinel: float = 1e9

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RefineParams":
        return cls(**(d or {}))


@dataclass(frozen=True, eq=False)
class TrimapSeeds:
    sure_fg: np.ndarray
    sure_bg: np.ndarray

    @property
    def unknown(self) -> np.ndarray:
        return ~(self.sure_fg | self.sure_bg)


@dataclass(frozen=True, eq=False)
class SegGraph:
    """Grid graph: terminal capacities per pixel plus symmetric 4-neighbor capacities.

    ``source_cap`` is the s->p capacity (paid when p ends up background),
    ``sink_cap`` the p->t capacity (paid when p ends up foreground).
    ``right[i, j]`` links (i, j)-(i, j+1); ``down[i, j]`` links (i, j)-(i+1, j).
    """

    source_cap: np.ndarray
    sink_cap: np.ndarray
    right: np.ndarray
    down: np.ndarray
    seeds: TrimapSeeds

    @property
    def shape(self) -> tuple[int, int]:
        return self.source_cap.shape


def _disk(r: int) -> np.ndarray:
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def make_trimap(mask: np.ndarray, r_fg: int, r_bg: int) -> TrimapSeeds:
    mask = mask.astype(bool)
    fg = ndimage.binary_erosion(mask, structure=_disk(r_fg), border_value=1) if r_fg > 0 else mask.copy()
    grown = ndimage.binary_dilation(mask, structure=_disk(r_bg)) if r_bg > 0 else mask
    return TrimapSeeds(fg & mask, ~grown)


def _seeds_with_fallback(mask: np.ndarray, params: RefineParams) -> TrimapSeeds:
    r_fg, r_bg = params.r_fg, params.r_bg
    for attempt in range(2):
        seeds = make_trimap(mask, r_fg, r_bg)
        if seeds.sure_fg.any() and seeds.sure_bg.any():
            return seeds
        r_fg, r_bg = r_fg // 2, r_bg // 2
    raise EmptySeedRegion(
        f"no {'foreground' if not seeds.sure_fg.any() else 'background'} seeds left "
        f"after shrinking radii to r_fg={r_fg * 2}, r_bg={r_bg * 2}"
    )


def color_histogram_nll(rgb: np.ndarray, sel: np.ndarray, bins: int) -> np.ndarray:
    """Per-pixel -log p(color) under a Laplace-smoothed ``bins**3`` histogram of ``rgb[sel]``."""
    q = (rgb.astype(np.int64) * bins) // 256
    idx = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
    counts = np.bincount(idx[sel], minlength=bins ** 3).astype(np.float64)
    prob = (counts + 1.0) / (counts.sum() + bins ** 3)
    return -np.log(prob[idx])


def build_seg_graph(rgb: np.ndarray, mask: np.ndarray, params: RefineParams = RefineParams()) -> SegGraph:
    mask = np.asarray(mask, dtype=bool)
    if rgb.shape[:2] != mask.shape:
        raise ValueError(f"crop {rgb.shape[:2]} and mask {mask.shape} differ in size")
    if not mask.any():
        raise EmptySeedRegion("input mask is empty")
    seeds = _seeds_with_fallback(mask, params)
    nll_fg = color_histogram_nll(rgb, seeds.sure_fg, params.hist_bins)
    nll_bg = color_histogram_nll(rgb, seeds.sure_bg, params.hist_bins)
    # labeling p foreground cuts p->t, labeling it background cuts s->p
    source_cap = np.where(seeds.sure_fg, params.sentinel, np.where(seeds.sure_bg, 0.0, nll_bg))
    sink_cap = np.where(seeds.sure_bg, params.sentinel, np.where(seeds.sure_fg, 0.0, nll_fg))

    c = rgb.astype(np.float64)
    d_right = np.sum((c[:, 1:] - c[:, :-1]) ** 2, axis=-1)
    d_down = np.sum((c[1:] - c[:-1]) ** 2, axis=-1)
    if params.beta_auto:
        mean = (d_right.sum() + d_down.sum()) / max(d_right.size + d_down.size, 1)
        beta = 1.0 / (2.0 * mean) if mean > 0 else 0.0
    else:
        beta = params.beta
    return SegGraph(source_cap, sink_cap,
                    params.lam * np.exp(-beta * d_right),
                    params.lam * np.exp(-beta * d_down), seeds)


def seg_graph_network(graph: SegGraph) -> tuple[FlowNetwork, int, int, float]:
    """Flow network for ``graph`` with terminal arcs pre-saturated.

    Pushing ``min(s->p, p->t)`` straight through every pixel is a valid
    partial flow; only the remainders go into the network. Returns
    ``(network, s, t, pre_pushed_flow)``.
    """
    h, w = graph.shape
    n = h * w
    s, t = n, n + 1
    net = FlowNetwork(n + 2)
    src = graph.source_cap.ravel()
    snk = graph.sink_cap.ravel()
    both = np.minimum(src, snk)
    pre = float(both.sum())
    rs, rt = src - both, snk - both
    for p in np.flatnonzero(rs > 0):
        net.add_edge(s, int(p), float(rs[p]))
    for p in np.flatnonzero(rt > 0):
        net.add_edge(int(p), t, float(rt[p]))
    idx = np.arange(n).reshape(h, w)
    for a, b, cap in ((idx[:, :-1], idx[:, 1:], graph.right), (idx[:-1], idx[1:], graph.down)):
        for u, v, c in zip(a.ravel().tolist(), b.ravel().tolist(), cap.ravel().tolist()):
            if c > 0:
                net.add_edge(u, v, c, c)
    return net, s, t, pre


def max_flow_min_cut(graph: SegGraph) -> tuple[float, np.ndarray]:
    """Maximum flow value and the foreground (source-side) mask of a minimum cut."""
    net, s, t, pre = seg_graph_network(graph)
    flow = pre + net.max_flow(s, t)
    side = net.source_side(s)
    return flow, side[: s].reshape(graph.shape)


def cut_energy(graph: SegGraph, fg: np.ndarray) -> float:
    """Capacity of the s-t cut induced by labeling ``fg`` as source side."""
    fg = fg.astype(bool)
    e = graph.sink_cap[fg].sum() + graph.source_cap[~fg].sum()
    e += graph.right[fg[:, :-1] != fg[:, 1:]].sum()
    e += graph.down[fg[:-1] != fg[1:]].sum()
    return float(e)


def _postprocess(fg: np.ndarray, seeds: TrimapSeeds, hole_fill_px: int) -> np.ndarray:
    lab, n = ndimage.label(fg, structure=FOUR)
    if n > 1:
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        keep = np.zeros(n + 1, dtype=bool)
        keep[int(np.argmax(sizes))] = True
        # components holding hard foreground seeds cannot be dropped
        keep[np.unique(lab[seeds.sure_fg])] = True
        keep[0] = False
        fg = keep[lab]
    if hole_fill_px > 0:
        holes, nh = ndimage.label(~fg, structure=FOUR)
        if nh:
            sizes = np.bincount(holes.ravel(), minlength=nh + 1)
            border = np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
            fill = sizes < hole_fill_px
            fill[0] = False
            fill[border] = False
            fill[np.unique(holes[seeds.sure_bg])] = False
            fg = fg | fill[holes]
    return fg


def refine_mask(rgb: np.ndarray, mask: np.ndarray, params: RefineParams = RefineParams()) -> np.ndarray:
    """Refined boolean mask; falls back to the input mask with a RefinementWarning."""
    mask = np.asarray(mask, dtype=bool)
    try:
        graph = build_seg_graph(rgb, mask, params)
    except EmptySeedRegion as e:
        warnings.warn(f"mask refinement skipped: {e}", RefinementWarning, stacklevel=2)
        return mask.copy()
    _, fg = max_flow_min_cut(graph)
    fg = _postprocess(fg, graph.seeds, params.hole_fill_px)
    if not fg.any():
        warnings.warn("mask refinement produced an empty mask; keeping the input",
                      RefinementWarning, stacklevel=2)
        return mask.copy()
    return fg
