"""Connectivity clusters of a loop soup and enlarged obstacles.

Discretized traces of independent Brownian objects almost surely miss
each other even though the continuum objects intersect, so intersection
is replaced by a proximity relation: two polylines touch when some
segment pair comes within a tolerance.  Two modes are supported:

* absolute (default): tolerance is the constant ``h``;
* scaled: tolerance between two segments is ``h * min(scale_a, scale_b)``
  with the per-segment scale min(max(1, |midpoint|), sqrt(duration))
  for loops and min(max(1, |midpoint|), cap) for paths.  This keeps the
  relation meaningful across the exponentially wide annuli where the
  step size itself grows like the squared distance from the origin.

A cluster is a maximal connected set of loops under the transitive
closure of the touch relation.  The enlargement of an obstacle set V is
V together with every cluster that touches V; a fresh path avoids the
enlargement when it touches neither the base obstacles nor any loop of
an attached cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import ProximityGrid, polyline_point_distance
from .paths import path_seg_scales
from .soup import LoopSoup

__all__ = [
    "ClusterIndex",
    "Enlargement",
    "build_clusters",
    "enlarge",
    "avoidance_test",
    "cluster_summary",
    "SurveyRow",
    "cluster_diameter_survey",
]

# one-sided usable cell range at the finest grid level; the kernel packs
# cell indices into 2**18 - 2 per axis, keep slack below that
_PACK_CELLS = 260000.0


def _loop_scales(loop, scaled):
    if not scaled:
        return np.ones(loop.n_points - 1)
    return path_seg_scales(loop.pts, cap=math.sqrt(loop.duration))


def _path_scales(pts, scaled, cap=math.inf):
    if not scaled:
        return np.ones(pts.shape[0] - 1)
    return path_seg_scales(pts, cap=cap)


def grid_from_objects(h, objects):
    """ProximityGrid sized for and filled with the given objects.

    ``objects`` is a sequence of (pts, seg_scales, tag, aux).  Cell size
    and level range are chosen from the data: the finest cell matches the
    smallest inflated object but never drops below the packing floor for
    the coordinate range, the coarsest covers the largest object.
    """
    objects = list(objects)
    d_lo = math.inf
    d_hi = 0.0
    coord = 1.0
    for pts, scales, _, _ in objects:
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        tol = h * float(scales.max())
        d = float(np.sqrt(((hi - lo) ** 2).sum())) + 2.0 * tol
        d_lo = min(d_lo, d)
        d_hi = max(d_hi, d)
        coord = max(coord, float(np.abs(np.stack([lo, hi])).max()) + tol)
    if not objects:
        d_lo = d_hi = h
    cell0 = max(d_lo, coord / _PACK_CELLS, 1e-9)
    n_lvl = 1
    if d_hi > cell0:
        n_lvl = min(64, int(math.ceil(math.log(d_hi / cell0))) + 1)
    grid = ProximityGrid(h, cell0, 0, n_lvl - 1)
    for pts, scales, tag, aux in objects:
        grid.add_object(pts, scales, tag, aux)
    grid.build()
    return grid


def _union_labels(n, ei, ej):
    """Smallest-member-index labels of the graph's connected components.

    Union by size with path compression; output is deterministic and
    independent of edge order.
    """
    parent = np.arange(n, dtype=np.int64)
    size = np.ones(n, dtype=np.int64)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in zip(ei, ej):
        ra = find(int(a))
        rb = find(int(b))
        if ra == rb:
            continue
        if size[ra] < size[rb]:
            ra, rb = rb, ra
        parent[rb] = ra
        size[ra] += size[rb]
    labels = np.empty(n, dtype=np.int64)
    first = {}
    for i in range(n):
        r = find(i)
        if r not in first:
            first[r] = i
        labels[i] = first[r]
    return labels


@dataclass(frozen=True, eq=False)
class ClusterIndex:
    """Loop-soup connectivity under the tolerance touch relation.

    ``cluster_of[i]`` is the smallest loop index in loop i's cluster.
    The spatial grid is kept for obstacle queries against the same soup.
    """

    soup: LoopSoup
    h: float
    scaled: bool
    grid: ProximityGrid = field(repr=False)
    edges: tuple = field(repr=False)
    cluster_of: np.ndarray = field(repr=False)
    seg_scales: tuple = field(repr=False)

    @property
    def n_loops(self):
        return len(self.soup.loops)

    @property
    def n_clusters(self):
        return len(np.unique(self.cluster_of)) if self.n_loops else 0

    def members(self, cid):
        """Ascending loop indices of one cluster."""
        return np.nonzero(self.cluster_of == cid)[0]

    def clusters(self):
        """Dict cluster id -> ascending member indices."""
        out = {}
        for i, c in enumerate(self.cluster_of):
            out.setdefault(int(c), []).append(i)
        return {c: np.array(m, dtype=np.int64) for c, m in out.items()}


def build_clusters(soup, h, *, scaled=False):
    """Cluster the soup's loops at tolerance h.

    The spatial grid proposes candidate pairs; every reported pair is
    verified by exact segment distances, so the partition equals the
    brute-force all-pairs partition.
    """
    if h <= 0.0:
        raise ValueError("tolerance h must be positive")
    loops = soup.loops
    n = len(loops)
    scales = tuple(_loop_scales(lp, scaled) for lp in loops)
    grid = grid_from_objects(
        h, ((lp.pts, s, i, 0) for i, (lp, s) in enumerate(zip(loops, scales))))
    if n:
        ei, ej = grid.collect_self_edges(0, n)
    else:
        ei = ej = np.zeros(0, dtype=np.int64)
    labels = _union_labels(n, ei, ej)
    return ClusterIndex(soup=soup, h=float(h), scaled=bool(scaled), grid=grid,
                        edges=(ei, ej), cluster_of=labels, seg_scales=scales)


def _as_pts(obj):
    pts = getattr(obj, "pts", obj)
    return np.ascontiguousarray(pts, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Enlargement:
    """An obstacle set together with the clusters it touches."""

    base: tuple
    base_scales: tuple = field(repr=False)
    base_grid: ProximityGrid = field(repr=False)
    idx: ClusterIndex = field(repr=False)
    attached: frozenset = field(default_factory=frozenset)

    @property
    def h(self):
        return self.idx.h

    @property
    def attached_loops(self):
        """Ascending indices of all loops in attached clusters."""
        if not self.attached:
            return np.zeros(0, dtype=np.int64)
        mask = np.isin(self.idx.cluster_of, np.fromiter(
            self.attached, dtype=np.int64))
        return np.nonzero(mask)[0]


# base paths go into their own grid in bounded pieces so that candidate
# pruning keeps working for paths that span many orders of magnitude
_PIECE_SEGS = 64


def _base_pieces(paths_pts, paths_scales):
    for t, (pts, scales) in enumerate(zip(paths_pts, paths_scales)):
        n_seg = pts.shape[0] - 1
        for aux, a in enumerate(range(0, n_seg, _PIECE_SEGS)):
            b = min(a + _PIECE_SEGS, n_seg)
            yield pts[a:b + 1], scales[a:b], t, aux


def enlarge(V, idx, *, path_scale_cap=math.inf):
    """Enlargement of the obstacle set V by the clusters it touches.

    V is a sequence of SampledPath objects or (m,3) point arrays.  A
    cluster is attached when any of its loops comes within tolerance of
    any obstacle; maximality of clusters makes a single hop sufficient.
    Single-point obstacles are kept as degenerate two-point polylines.
    """
    paths = []
    for p in V:
        pts = _as_pts(p)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("obstacle paths must be (m,3) point arrays")
        if pts.shape[0] == 1:
            pts = np.vstack([pts, pts])
        paths.append(pts)
    scales = [_path_scales(p, idx.scaled, cap=path_scale_cap)
              for p in paths]
    attached = set()
    for pts, s in zip(paths, scales):
        tags, _, _ = idx.grid.query_contacts(pts, s)
        attached.update(int(c) for c in idx.cluster_of[tags])
    base_grid = grid_from_objects(idx.h, _base_pieces(paths, scales))
    return Enlargement(base=tuple(paths), base_scales=tuple(scales),
                       base_grid=base_grid, idx=idx,
                       attached=frozenset(attached))


def avoidance_test(P, E, *, path_scale_cap=math.inf):
    """True iff P stays clear of every base obstacle and attached loop."""
    pts = _as_pts(P)
    if pts.shape[0] < 2:
        pts = np.vstack([pts, pts])
    s = _path_scales(pts, E.idx.scaled, cap=path_scale_cap)
    if E.base_grid.query_any(pts, s):
        return False
    tags, _, _ = E.idx.grid.query_contacts(pts, s)
    return not any(int(c) in E.attached for c in E.idx.cluster_of[tags])


# ---------------------------------------------------------------------------
# cluster geometry summaries


def _vertex_diameter(pts, upper_cap=math.inf):
    """Max pairwise distance of a vertex set.

    With a finite ``upper_cap`` the result is only guaranteed to sit on
    the correct side of the cap: the max per-axis range (a lower bound)
    and the bounding-box diagonal (an upper bound) short-circuit the
    quadratic scan whenever they decide the comparison.
    """
    n = pts.shape[0]
    if n <= 1:
        return 0.0
    if n == 2:
        d = pts[0] - pts[1]
        return float(np.sqrt((d * d).sum()))
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if math.isfinite(upper_cap):
        lo_bound = float((hi - lo).max())
        if lo_bound > upper_cap:
            return lo_bound
        up_bound = float(np.sqrt(((hi - lo) ** 2).sum()))
        if up_bound <= upper_cap:
            return up_bound
    step = 1
    if n > 20000:
        # strided subsample bounds the quadratic scan; the box bounds
        # above already decided every case the surveys care about
        step = int(math.ceil(n / 20000.0))
    sub = pts[::step]
    best = 0.0
    for i in range(0, sub.shape[0], 512):
        blk = sub[i:i + 512]
        d2 = ((blk[:, None, :] - sub[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def cluster_summary(idx):
    """Per-cluster rows (cluster id, size, vertex diameter), id order."""
    rows = []
    for cid, mem in sorted(idx.clusters().items()):
        pts = np.vstack([idx.soup.loops[i].pts for i in mem])
        rows.append((cid, len(mem), _vertex_diameter(pts)))
    return rows


def _sphere_gaps(loops):
    """Exact distance from each loop trace to the unit sphere.

    The trace is connected, so its radius range is the interval
    [min distance to origin, max vertex norm] and the distance to the
    sphere |x| = 1 follows from that interval alone.
    """
    gaps = np.empty(len(loops))
    origin = np.zeros(3)
    for i, lp in enumerate(loops):
        m = polyline_point_distance(lp.pts, origin)
        gaps[i] = max(m - 1.0, 1.0 - lp.max_radius, 0.0)
    return gaps


@dataclass(frozen=True)
class SurveyRow:
    alpha: float
    n_soups: int
    n_small: int
    prob: float
    stderr: float


def cluster_diameter_survey(stream, alpha_list, delta_target, window, *,
                            n_soups, h, delta, t_min=None, t_max=None,
                            scaled=False):
    """Probability that every cluster meeting the unit sphere stays small.

    For each thinning level alpha the estimated probability that all
    clusters touching the unit sphere (within tolerance h) have vertex
    diameter at most delta_target, with binomial stderr.  All levels are
    evaluated on shared soups through mark thinning, so the estimates are
    pathwise nonincreasing in alpha.

    The soup is rooted in ``window`` (a region object with a
    sample_points method); loops rooted outside the window are a
    documented truncation, so the window must enclose the unit sphere
    with generous margin.
    """
    from .soup import SoupConfig, sample_soup

    alphas = sorted(float(a) for a in alpha_list)
    if not alphas or alphas[0] < 0.0:
        raise ValueError("alpha_list must be nonempty and nonnegative")
    if any(a > 0.5 for a in alphas):
        raise ValueError("survey is defined for subcritical alpha <= 0.5")
    if t_max is None:
        rad = getattr(window, "radius", None)
        if rad is None:
            raise ValueError("pass t_max explicitly for non-ball windows")
        t_max = (4.0 * float(rad)) ** 2
    a_max = alphas[-1]
    n_ok = {a: 0 for a in alphas}
    for i in range(n_soups):
        sub = stream.child(17, i)
        if a_max == 0.0:
            for a in alphas:
                n_ok[a] += 1
            continue
        cfg = SoupConfig(alpha=a_max, root_region=window,
                         t_min=t_min if t_min is not None else (h / 6.0) ** 2,
                         t_max=t_max, delta=delta)
        soup = sample_soup(cfg, sub)
        n = len(soup.loops)
        if n == 0:
            for a in alphas:
                n_ok[a] += 1
            continue
        scales = [_loop_scales(lp, scaled) for lp in soup.loops]
        grid = grid_from_objects(h, ((lp.pts, s, j, 0) for j, (lp, s) in
                                     enumerate(zip(soup.loops, scales))))
        ei, ej = grid.collect_self_edges(0, n)
        gaps = _sphere_gaps(soup.loops)
        marks = soup.marks()
        if scaled:
            tol0 = h * np.minimum(
                1.0, np.sqrt([lp.duration for lp in soup.loops]))
        else:
            tol0 = np.full(n, h)
        for a in alphas:
            if a == 0.0:
                n_ok[a] += 1
                continue
            alive = marks < a / a_max
            keep = alive[ei] & alive[ej]
            labels = _union_labels(n, ei[keep], ej[keep])
            touching = np.unique(labels[alive & (gaps <= tol0)])
            ok = True
            for cid in touching:
                mem = np.nonzero(alive & (labels == cid))[0]
                pts = np.vstack([soup.loops[j].pts for j in mem])
                if _vertex_diameter(pts, upper_cap=delta_target) \
                        > delta_target:
                    ok = False
                    break
            if ok:
                n_ok[a] += 1
    rows = []
    for a in alphas:
        p = n_ok[a] / n_soups
        se = math.sqrt(p * (1.0 - p) / n_soups)
        rows.append(SurveyRow(alpha=a, n_soups=n_soups, n_small=n_ok[a],
                              prob=p, stderr=se))
    return rows
