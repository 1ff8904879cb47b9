"""Cut-box scan over a confined loop in an independent soup.

A single Brownian loop is confined near the origin and conditioned to
hit the fixed scan box [-1/16, 1/16]^3.  For every dyadic level n the
box splits into 2^(3(n-3)) closed subcubes of side 2^-n.  Around each
cube hit by the trace sits a spherical shell with inner radius 2^-n and
outer radius 2^-j - 2^-n; the trace decomposes into a first inward shell
crossing, a middle piece, and a last outward crossing.  The cube is a
cut box (is_K) when the two distinguished crossings, each enlarged by
the soup clusters it touches inside the shell, stay disjoint at the
package's scale-relative tolerance; is_F additionally requires at least
four shell crossings.  Counts per level feed a log2 slope fit for the
cut-point dimension and a dyadic pair-count second-moment check.

Resolution is graded: the trace is refined in place (midpoint bridging)
only inside the ball that contains every possible shell, and each cube
reads the trace through per-level views whose spacing matches the local
tolerance h * max(2^-n, distance-to-center).  Soups are sampled in
cube-relative units with the duration floor graded the same way, so one
machinery serves every level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import piece_pair_disjoint
from .clusters import _union_labels, grid_from_objects
from .geometry import Annulus, Cube, hit_tolerance
from .paths import path_seg_scales, sample_bridge
from .rng import RngStream
from .soup import (GradedSoupConfig, _build_loops, duration_inverse_cdf,
                   filter_loops, loop_steps, sample_graded_points,
                   sample_soup_graded)

__all__ = [
    "SCAN_BOX", "FixedDurationBridge", "TruncatedBubbleApprox",
    "sample_scan_loop", "CrossingSplit", "locate_crossings",
    "CutScanConfig", "CutBoxRecord", "LevelCount", "PairCount",
    "CutScanResult", "scan_cutboxes", "DimensionEstimate",
    "dimension_estimate", "SecondMomentReport", "second_moment_check",
    "per_cube_bound", "pair_bound",
]

# the fixed scan box; every cube lattice is a dyadic partition of it
SCAN_BOX = Cube(center=np.zeros(3), half=1.0 / 16.0)

# level-lev lookups never reach farther than ~10 * 2^-lev from the box
# (the outer shell radius measured from a center inside it), so trace
# refinement and the per-level trees are cropped to this margin
_CROP_FACTOR = 10.5


# ---------------------------------------------------------------------------
# loop laws


@dataclass(frozen=True)
class FixedDurationBridge:
    """Closed bridge of fixed duration, conditioned to hit the scan box."""

    duration: float = 1.0
    root: tuple = (0.4375, 0.0, 0.0)

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        r = np.asarray(self.root, dtype=np.float64)
        if r.shape != (3,):
            raise ValueError("root must be a 3-vector")
        if float(np.sqrt(r @ r)) < 0.25:
            # the crossing logic needs the root outside every shell
            raise ValueError("root must lie at radius >= 1/4")
        object.__setattr__(self, "root", tuple(float(v) for v in r))

    def draw(self, gen, dt):
        root = np.asarray(self.root, dtype=np.float64)
        steps = max(8, int(round(self.duration / dt)))
        pts = sample_bridge(root, root, self.duration, steps, gen)
        return pts, self.duration


@dataclass(frozen=True)
class TruncatedBubbleApprox:
    """Near-boundary rooted bridge kept inside a containment ball.

    The root sits ``standoff`` inside the ball of radius
    ``contain_radius`` along ``axis``; durations follow the t^(-5/2)
    density truncated to [duration_lo, duration_hi].  Draws whose trace
    leaves the slack-inflated ball are rejected.  The standoff keeps the
    acceptance rate workable: a root placed exactly on the boundary is
    expelled immediately at any usable resolution.
    """

    contain_radius: float = 0.5
    axis: tuple = (1.0, 0.0, 0.0)
    standoff: float = 1.0 / 16.0
    duration_lo: float = 0.25
    duration_hi: float = 4.0
    max_tries: int = 500_000

    def __post_init__(self):
        if not 0.25 <= self.contain_radius <= 0.5:
            raise ValueError("contain_radius must lie in [1/4, 1/2]")
        if not 0.0 < self.standoff < self.contain_radius:
            raise ValueError("standoff must lie in (0, contain_radius)")
        if self.contain_radius - self.standoff < 0.25:
            raise ValueError("root radius must stay >= 1/4")
        if not 0.0 < self.duration_lo < self.duration_hi:
            raise ValueError("need 0 < duration_lo < duration_hi")
        if self.max_tries < 1:
            raise ValueError("max_tries must be positive")
        a = np.asarray(self.axis, dtype=np.float64)
        na = float(np.sqrt(a @ a))
        if a.shape != (3,) or na == 0.0:
            raise ValueError("axis must be a nonzero 3-vector")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / na))

    @property
    def root(self):
        a = np.asarray(self.axis)
        return tuple(a * (self.contain_radius - self.standoff))

    def draw(self, gen, dt):
        t = duration_inverse_cdf(
            min(max(gen.random(), 1e-12), 1.0 - 1e-12),
            self.duration_lo, self.duration_hi)
        root = np.asarray(self.root, dtype=np.float64)
        steps = max(8, int(round(t / dt)))
        pts = sample_bridge(root, root, t, steps, gen)
        return pts, t


def sample_scan_loop(law, delta, stream, *, scan_box=SCAN_BOX):
    """Rejection-sample one loop trace at coarse resolution ``delta``.

    Returns (pts, duration, tries).  The trace is kept when it hits the
    scan box; the bubble-style law additionally requires containment in
    its ball inflated by an eighth of a coarse step.  Both conditions
    are evaluated on the coarse trace; later refinement only inserts
    vertices, so the box hit is preserved exactly.
    """
    gen = stream.generator()
    contain = getattr(law, "contain_radius", None)
    slack = math.sqrt(delta) / 8.0
    max_tries = getattr(law, "max_tries", 500_000)
    for tries in range(1, max_tries + 1):
        pts, t = law.draw(gen, delta)
        if contain is not None:
            rad2 = (pts * pts).sum(axis=1)
            if rad2.max() > (contain + slack) ** 2:
                continue
        if bool(scan_box.contains_mask(pts).any()):
            return pts, t, tries
    raise RuntimeError("loop law rejection budget exhausted")


# ---------------------------------------------------------------------------
# graded trace refinement


@dataclass(eq=False)
class _ScanTrace:
    """Loop trace with region-graded resolution and per-level views.

    ``row_round[i]`` is the refinement round that created row i (0 for
    the coarse draw); the view for dyadic level ``lev`` consists of the
    rows with round <= ``k_of[lev]`` and is uniformly spaced inside the
    refinement region.
    """

    pts: np.ndarray
    row_round: np.ndarray
    duration: float
    k_of: dict
    trees: dict = field(default_factory=dict)
    views: dict = field(default_factory=dict)

    def view_rows(self, lev):
        if lev not in self.views:
            self.views[lev] = np.flatnonzero(self.row_round <= self.k_of[lev])
        return self.views[lev]

    def tree(self, lev):
        if lev not in self.trees:
            rows = self.view_rows(lev)
            near = _box_dist(self.pts[rows]) <= _CROP_FACTOR * 2.0 ** -lev
            sel = rows[near]
            self.trees[lev] = (cKDTree(self.pts[sel]), sel)
        return self.trees[lev]


def _box_dist(pts):
    """Sup-norm distance to the scan box, zero inside."""
    return np.maximum(np.abs(pts).max(axis=1) - SCAN_BOX.half, 0.0)


def _round_depth(duration, n_base, lev):
    """Rounds needed before the level's view spacing is <= 4^-(lev+1)."""
    need = duration * 4.0 ** (lev + 1) / n_base
    if need <= 1.0:
        return 0
    return int(math.ceil(math.log2(need)))


def _refine_window(pts, row_round, seg_dt, round_k, margin, gen):
    """One midpoint-bridging round on segments near the scan box.

    A segment is split when either endpoint sits within ``margin`` of
    the box plus a wander allowance of 12 sqrt(dt): children of farther
    segments cannot reach the window any later round will look at.
    """
    a, b = pts[:-1], pts[1:]
    reach = margin + 12.0 * np.sqrt(seg_dt)
    mask = (_box_dist(a) <= reach) | (_box_dist(b) <= reach)
    n_new = int(mask.sum())
    if n_new == 0:
        return pts, row_round, seg_dt
    mid = 0.5 * (a[mask] + b[mask])
    mid += gen.standard_normal((n_new, 3)) * np.sqrt(seg_dt[mask] / 4.0)[:, None]

    n_old = pts.shape[0]
    shift = np.zeros(n_old, dtype=np.int64)
    shift[1:] = np.cumsum(mask)
    out_pts = np.empty((n_old + n_new, 3))
    out_round = np.empty(n_old + n_new, dtype=np.uint8)
    old_pos = np.arange(n_old) + shift
    out_pts[old_pos] = pts
    out_round[old_pos] = row_round
    mid_pos = old_pos[:-1][mask] + 1
    out_pts[mid_pos] = mid
    out_round[mid_pos] = round_k

    out_dt = np.empty(n_old - 1 + n_new)
    seg_pos = old_pos[:-1]
    out_dt[seg_pos] = np.where(mask, seg_dt / 2.0, seg_dt)
    out_dt[mid_pos] = seg_dt[mask] / 2.0
    return out_pts, out_round, out_dt


def _trace_for_scan(pts0, duration, levels, stream):
    """Refine the coarse draw until every requested view is resolved.

    Round k only matters to levels whose view still needs it, so its
    window is the crop margin of the coarsest such level; the windows
    shrink with k and keep the row count near the final view size.
    """
    n_base = pts0.shape[0] - 1
    k_of = {lev: _round_depth(duration, n_base, lev) for lev in levels}
    k_max = max(k_of.values()) if k_of else 0
    pts = np.asarray(pts0, dtype=np.float64)
    row_round = np.zeros(pts.shape[0], dtype=np.uint8)
    seg_dt = np.full(pts.shape[0] - 1, duration / n_base)
    for k in range(1, k_max + 1):
        lev_min = min(lev for lev in levels if k_of[lev] >= k)
        margin = _CROP_FACTOR * 2.0 ** -lev_min
        gen = stream.child(1, k).generator()
        pts, row_round, seg_dt = _refine_window(pts, row_round, seg_dt, k,
                                                margin, gen)
    return _ScanTrace(pts=pts, row_round=row_round, duration=duration,
                      k_of=dict(k_of))


# ---------------------------------------------------------------------------
# shell-crossing decomposition


class _ShellEvents(NamedTuple):
    crossings: int
    s1_key: int
    t1_key: int
    s2_key: int
    t2_key: int
    v_key: int


def _shell_events(out_keys, in_keys, v_row):
    """Order statistics of inner/outer boundary visits.

    Keys are 2*row for real visits and odd values for virtual outer
    visits (trace outside the lookup ball).  Returns None when the trace
    never reaches the inner boundary.
    """
    if in_keys.size == 0:
        return None
    keys = np.concatenate([out_keys, in_keys])
    labs = np.concatenate([np.ones(out_keys.size, dtype=np.int8),
                           -np.ones(in_keys.size, dtype=np.int8)])
    order = np.argsort(keys, kind="stable")
    labs = labs[order]
    crossings = int((labs[1:] != labs[:-1]).sum())
    v_key = 2 * int(v_row)
    before = out_keys[out_keys < v_key]
    s1 = int(before.max()) if before.size else -1
    t1 = int(in_keys[in_keys >= s1].min())
    s2 = int(in_keys.max())
    after = out_keys[out_keys > s2]
    if not after.size:
        return None
    t2 = int(after.min())
    return _ShellEvents(crossings, s1, t1, s2, t2, v_key)


def _piece_range(start_key, end_key):
    # (s+1)//2 maps both a real key 2r and a virtual key 2r-1 to row r;
    # end_key//2 maps 2r and 2r+1 to row r
    return (start_key + 1) // 2, end_key // 2


@dataclass(frozen=True)
class CrossingSplit:
    """First inward and last outward shell crossings of one trace."""

    approach: np.ndarray
    retreat: np.ndarray
    middle: np.ndarray
    crossings: int
    approach_start: int
    approach_end: int
    hit_row: int
    retreat_start: int
    retreat_end: int


def locate_crossings(trace, cube, j, n, *, tol_in=None, tol_out=None):
    """Decompose a uniformly sampled trace around one scan cube.

    The shell has inner radius 2^-n and outer radius 2^-j - 2^-n around
    the cube center.  Boundary visits are read off the polyline with the
    given inflation tolerances (defaults: a quarter of the nominal
    vertex spacing at each boundary's own scale).  Raises ValueError
    when the trace misses the cube or starts or ends inside the lookup
    ball.
    """
    pts = np.asarray(getattr(trace, "pts", trace), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("trace must be an (m,3) point array")
    j = int(j)
    n = int(n)
    if j < 4 or n < j + 4:
        raise ValueError("need j >= 4 and n >= j + 4")
    if abs(2.0 * cube.half - 2.0 ** -n) > 1e-12 * 2.0 ** -n:
        raise ValueError("cube side must be 2^-n")
    r_in = 2.0 ** -n
    r_out = 2.0 ** -j - 2.0 ** -n
    r_sel = r_out + 2.0 ** -(j + 2)
    if tol_in is None:
        tol_in = 2.0 ** -(n + 2)
    if tol_out is None:
        tol_out = 2.0 ** -(j + 4)

    rel = pts - cube.center
    d = np.sqrt((rel * rel).sum(axis=1))
    if d[0] <= r_sel or d[-1] <= r_sel:
        raise ValueError("trace must start and end outside the outer shell")
    inside = cube.signed_dists(pts) <= 0.0
    if not inside.any():
        raise ValueError("trace does not hit the cube")
    v_row = int(np.flatnonzero(inside)[0])

    cand = np.flatnonzero(d <= r_sel)
    gap_before = np.empty(cand.size, dtype=bool)
    gap_before[0] = True
    gap_before[1:] = np.diff(cand) > 1
    out_real = cand[d[cand] >= r_out - tol_out]
    out_keys = np.concatenate([
        2 * out_real,
        2 * cand[gap_before] - 1,
        np.array([2 * cand[-1] + 1], dtype=np.int64)]).astype(np.int64)
    in_keys = (2 * cand[d[cand] <= r_in + tol_in]).astype(np.int64)

    ev = _shell_events(np.unique(out_keys), np.unique(in_keys), v_row)
    if ev is None:
        raise ValueError("trace does not reach the inner boundary")
    a0, a1 = _piece_range(ev.s1_key, ev.t1_key)
    b0, b1 = _piece_range(ev.s2_key, ev.t2_key)
    a0 = max(a0, 0)
    return CrossingSplit(
        approach=pts[a0:a1 + 1].copy(),
        retreat=pts[b0:b1 + 1].copy(),
        middle=pts[a1:b0 + 1].copy(),
        crossings=ev.crossings,
        approach_start=a0, approach_end=a1, hit_row=v_row,
        retreat_start=b0, retreat_end=b1)


# ---------------------------------------------------------------------------
# scan configuration and result tables


_MODES = ("per_cube", "global_soup")


@dataclass(frozen=True)
class CutScanConfig:
    """One cut-box scan campaign.

    ``delta`` is the coarse trace resolution used for the rejection
    draw; per-level refinement always goes as fine as the deepest cube
    level needs.  ``h`` is the usual scale-relative contact tolerance.
    ``mode`` selects independent per-cube shell soups or one shared
    pool per level restricted to each shell.
    """

    j: int
    n_range: tuple
    alpha: float
    delta: float
    h: float
    replicas: int
    seed: RngStream
    loop_law: object = field(default_factory=TruncatedBubbleApprox)
    mode: str = "per_cube"
    max_cubes_per_level: Optional[int] = None
    keep_records: bool = True

    def __post_init__(self):
        if int(self.j) != self.j or self.j < 4:
            raise ValueError("j must be an integer >= 4")
        object.__setattr__(self, "j", int(self.j))
        ns = tuple(int(n) for n in self.n_range)
        if not ns or any(float(a) != float(b)
                         for a, b in zip(ns, self.n_range)):
            raise ValueError("n_range must be nonempty integers")
        if any(n < self.j + 4 for n in ns):
            raise ValueError("every n must satisfy n >= j + 4")
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_range must be strictly increasing")
        object.__setattr__(self, "n_range", ns)
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.h <= 0.0:
            raise ValueError("h must be positive")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if not isinstance(self.seed, RngStream):
            raise TypeError("seed must be an RngStream")
        if not isinstance(self.loop_law,
                          (FixedDurationBridge, TruncatedBubbleApprox)):
            raise TypeError("unsupported loop law")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.max_cubes_per_level is not None \
                and self.max_cubes_per_level < 1:
            raise ValueError("max_cubes_per_level must be positive")


class CutBoxRecord(NamedTuple):
    """Outcome for one scanned cube at one thinning level."""

    replica: int
    n: int
    cube_id: int
    alpha: float
    hit: bool
    crossings: int
    is_K: bool
    is_F: bool


@dataclass(frozen=True)
class LevelCount:
    replica: int
    j: int
    n: int
    alpha: float
    cubes_total: int
    cubes_hit: int
    cubes_scanned: int
    K_count: int
    F_count: int


@dataclass(frozen=True)
class PairCount:
    """Cut-cube pairs of one replica binned by dyadic center distance.

    ``weight`` rescales subsampled scans: counting pairs among a
    fraction f of the hit cubes sees ~f^2 of them, so each observed
    pair stands for 1/f^2.
    """

    replica: int
    j: int
    n: int
    m: int
    alpha: float
    k_pairs: int
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class CutScanResult:
    config: CutScanConfig
    alphas: tuple
    counts: tuple
    records: tuple
    pair_counts: tuple

    def to_count_rows(self):
        return [{"replica": c.replica, "j": c.j, "n": c.n,
                 "cubes_total": c.cubes_total, "cubes_hit": c.cubes_hit,
                 "K_count": c.K_count, "F_count": c.F_count,
                 "alpha": c.alpha, "cubes_scanned": c.cubes_scanned}
                for c in self.counts]

    def to_pair_rows(self):
        return [{"replica": p.replica, "j": p.j, "n": p.n, "m": p.m,
                 "alpha": p.alpha, "k_pairs": p.k_pairs,
                 "weight": p.weight}
                for p in self.pair_counts]


# ---------------------------------------------------------------------------
# shell soups


def _annulus_soup_unit(alpha, span, delta, h, stream):
    """Shell soup in cube-relative units: loops kept inside [1, span]."""
    cfg = GradedSoupConfig(alpha=alpha, rho_max=math.log(span), delta=delta,
                           h=h, exclusion_radius=None, include_interior=False)
    soup = sample_soup_graded(cfg, stream)
    shell = Annulus(np.zeros(3), 1.0, span)
    kept = filter_loops(soup.loops, shell, None, hit_tolerance(delta))
    return [(lp.pts, lp.duration, lp.mark) for lp in kept]


def _k_eval(g1u, g2u, entries, alphas, alpha_max, h):
    """is_K per thinning level for one cube, unit-frame inputs.

    ``entries`` are (pts, duration, mark) triples of the shell soup at
    alpha_max; thinning keeps a loop at alpha when mark < alpha /
    alpha_max, so outcomes are coupled and antitone across the grid.
    """
    if g1u.shape[0] < 2:
        g1u = np.vstack([g1u, g1u])
    if g2u.shape[0] < 2:
        g2u = np.vstack([g2u, g2u])
    if not piece_pair_disjoint(g1u, g2u, (0.0, 0.0, 0.0), h, h):
        return [False] * len(alphas)
    if not entries or alpha_max <= 0.0:
        return [True] * len(alphas)
    s1 = path_seg_scales(g1u)
    s2 = path_seg_scales(g2u)
    scales = [path_seg_scales(p, cap=math.sqrt(t)) for p, t, _ in entries]
    grid = grid_from_objects(
        h, ((p, sc, i, 0) for i, ((p, _, _), sc)
            in enumerate(zip(entries, scales))))
    ei, ej = grid.collect_self_edges(0, len(entries))
    touch1 = np.unique(grid.query_contacts(g1u, s1)[0])
    touch2 = np.unique(grid.query_contacts(g2u, s2)[0])
    if touch1.size == 0 or touch2.size == 0:
        return [True] * len(alphas)
    marks = np.array([m for _, _, m in entries])
    out = []
    for a in alphas:
        alive = marks < (a / alpha_max)
        live1 = touch1[alive[touch1]]
        live2 = touch2[alive[touch2]]
        if live1.size == 0 or live2.size == 0:
            out.append(True)
            continue
        keep = alive[ei] & alive[ej]
        labels = _union_labels(len(entries), ei[keep], ej[keep])
        a1 = set(int(l) for l in labels[live1])
        out.append(a1.isdisjoint(int(l) for l in labels[live2]))
    return out


# ---------------------------------------------------------------------------
# the scan


def _cube_lattice_keys(pts, n):
    """Flat cube index per point; caller guarantees points in the box."""
    m_side = 2 ** (n - 3)
    iv = np.floor((pts + SCAN_BOX.half) * 2.0 ** n).astype(np.int64)
    np.clip(iv, 0, m_side - 1, out=iv)
    return (iv[:, 0] * m_side + iv[:, 1]) * m_side + iv[:, 2]


def _key_centers(keys, n):
    m_side = 2 ** (n - 3)
    k = np.asarray(keys, dtype=np.int64)
    iv = np.stack([k // (m_side * m_side),
                   (k // m_side) % m_side,
                   k % m_side], axis=1)
    return -SCAN_BOX.half + (iv + 0.5) * 2.0 ** -n


def _shell_specs(j, n, r_sel):
    """(tree level, query radius, d-range) covering the lookup ball."""
    specs = []
    for m in range(j, n - 3):
        hi = r_sel if m == j else 2.0 ** -m
        specs.append((m + 3, hi, 2.0 ** -(m + 1), hi))
    inner_hi = 2.0 ** -(n - 4) / 2.0 if n - 3 > j else 2.0 ** -(j + 1)
    specs.append((n, inner_hi, 0.0, inner_hi))
    return specs


def _gap_flags(rows, view):
    pos = np.searchsorted(view, rows)
    flags = np.empty(rows.size, dtype=bool)
    flags[0] = True
    flags[1:] = np.diff(pos) > 1
    return flags


def _scan_level(trace, cfg, n, rep, alphas, soup_fn, subsample_stream):
    """All per-cube work for one replica at one cube level."""
    j = cfg.j
    r_in = 2.0 ** -n
    r_out = 2.0 ** -j - 2.0 ** -n
    r_sel = r_out + 2.0 ** -(j + 2)
    tol_in = 2.0 ** -(n + 2)
    tol_out = 2.0 ** -(j + 4)
    scale = 2.0 ** n

    tree_n, rows_n = trace.tree(n)
    in_box = np.abs(trace.pts[rows_n]).max(axis=1) <= SCAN_BOX.half
    box_rows = rows_n[in_box]
    cubes_total = 8 ** (n - 3)
    if box_rows.size == 0:
        count = [LevelCount(rep, j, n, a, cubes_total, 0, 0, 0, 0)
                 for a in alphas]
        return count, [], [], {a: [] for a in alphas}
    keys = _cube_lattice_keys(trace.pts[box_rows], n)
    uniq, first = np.unique(keys, return_index=True)
    v_rows = box_rows[first]
    cubes_hit = int(uniq.size)

    pick = np.arange(uniq.size)
    if cfg.max_cubes_per_level is not None \
            and uniq.size > cfg.max_cubes_per_level:
        gen = subsample_stream.generator()
        pick = np.sort(gen.choice(uniq.size, cfg.max_cubes_per_level,
                                  replace=False))
    centers = _key_centers(uniq[pick], n)
    v_rows = v_rows[pick]
    scanned_keys = uniq[pick]

    coarse_lev = j + 3
    tree_c, rows_c = trace.tree(coarse_lev)
    view_c = trace.view_rows(coarse_lev)
    specs = _shell_specs(j, n, r_sel)

    records = []
    k_counts = {a: 0 for a in alphas}
    f_counts = {a: 0 for a in alphas}
    k_centers = {a: [] for a in alphas}
    # query in center chunks: hit lists for the whole lattice at once
    # would dwarf the trace itself at deep levels
    chunk = 256
    for lo in range(0, centers.shape[0], chunk):
        hi = min(lo + chunk, centers.shape[0])
        cchunk = centers[lo:hi]
        coarse_hits = tree_c.query_ball_point(cchunk, r_sel)
        shell_hits = []
        for lev, q_r, _, _ in specs:
            t, _ = trace.tree(lev)
            shell_hits.append(t.query_ball_point(cchunk, q_r))
        _scan_chunk(trace, cfg, n, rep, alphas, soup_fn, lo, centers,
                    v_rows, scanned_keys, coarse_hits, shell_hits, specs,
                    rows_c, view_c, r_in, r_out, r_sel, tol_in, tol_out,
                    scale, records, k_counts, f_counts, k_centers)

    counts = [LevelCount(rep, j, n, float(a), cubes_total, cubes_hit,
                         int(centers.shape[0]), k_counts[a], f_counts[a])
              for a in alphas]
    return counts, records, scanned_keys, k_centers


def _scan_chunk(trace, cfg, n, rep, alphas, soup_fn, lo, centers, v_rows,
                scanned_keys, coarse_hits, shell_hits, specs, rows_c,
                view_c, r_in, r_out, r_sel, tol_in, tol_out, scale,
                records, k_counts, f_counts, k_centers):
    for off in range(len(coarse_hits)):
        ci = lo + off
        v_c = centers[ci]
        crows = rows_c[coarse_hits[off]]
        crows.sort()
        if crows.size == 0:
            continue
        rel = trace.pts[crows] - v_c
        d_c = np.sqrt((rel * rel).sum(axis=1))
        gaps = _gap_flags(crows, view_c)
        out_keys = np.concatenate([
            2 * crows[d_c >= r_out - tol_out],
            2 * crows[gaps] - 1,
            np.array([2 * crows[-1] + 1], dtype=np.int64)])

        union_parts = []
        in_keys = np.zeros(0, dtype=np.int64)
        for (lev, _, d_lo, d_hi), hits in zip(specs, shell_hits):
            rows = trace.tree(lev)[1][hits[off]]
            if rows.size == 0:
                continue
            rel = trace.pts[rows] - v_c
            dd = np.sqrt((rel * rel).sum(axis=1))
            if lev == n:
                in_keys = 2 * rows[dd <= r_in + tol_in]
            keep = dd < d_hi if d_lo == 0.0 else (dd >= d_lo) & (dd <= d_hi)
            union_parts.append(rows[keep])
        union = np.unique(np.concatenate(union_parts)) if union_parts \
            else np.zeros(0, dtype=np.int64)

        ev = _shell_events(np.unique(out_keys), np.unique(np.asarray(
            in_keys, dtype=np.int64)), v_rows[ci])
        if ev is None:
            continue
        a0, a1 = _piece_range(ev.s1_key, ev.t1_key)
        b0, b1 = _piece_range(ev.s2_key, ev.t2_key)
        g1 = trace.pts[union[np.searchsorted(union, max(a0, 0), "left"):
                             np.searchsorted(union, a1, "right")]]
        g2 = trace.pts[union[np.searchsorted(union, b0, "left"):
                             np.searchsorted(union, b1, "right")]]
        if g1.shape[0] == 0 or g2.shape[0] == 0:
            continue
        g1u = (g1 - v_c) * scale
        g2u = (g2 - v_c) * scale
        entries = soup_fn(int(scanned_keys[ci]), v_c) \
            if max(alphas) > 0.0 else []
        kk = _k_eval(g1u, g2u, entries, alphas, max(alphas), cfg.h)
        for a, is_k in zip(alphas, kk):
            is_f = bool(is_k and ev.crossings >= 4)
            k_counts[a] += int(is_k)
            f_counts[a] += int(is_f)
            if is_k:
                k_centers[a].append(v_c)
            if cfg.keep_records:
                records.append(CutBoxRecord(
                    replica=rep, n=n, cube_id=int(scanned_keys[ci]),
                    alpha=float(a), hit=True, crossings=ev.crossings,
                    is_K=bool(is_k), is_F=is_f))


def _pair_bins(centers, j, n):
    """k_pairs per dyadic distance bin m for one replica and level."""
    c = np.asarray(centers)
    nc = c.shape[0]
    if nc < 2:
        return {}
    counts = np.zeros(n + 2, dtype=np.int64)
    chunk = max(1, 2_000_000 // nc)
    for lo in range(0, nc - 1, chunk):
        hi = min(lo + chunk, nc - 1)
        diff = c[lo:hi, None, :] - c[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        sel = np.arange(nc)[None, :] > np.arange(lo, hi)[:, None]
        dv = np.sqrt(d2[sel])
        if not dv.size:
            continue
        m = np.floor(-np.log2(np.maximum(dv, 1e-300))).astype(np.int64)
        np.clip(m, j, n, out=m)
        counts += np.bincount(m, minlength=counts.size)
    return {mv: int(counts[mv]) for mv in range(j, n + 1) if counts[mv]}


def scan_cutboxes(cfg: CutScanConfig, *, alphas=None) -> CutScanResult:
    """Run the cut-box scan; one loop plus soups per replica.

    ``alphas`` (default ``(cfg.alpha,)``) requests coupled thinning
    levels evaluated on a shared soup at the largest value, so is_K is
    antitone across the grid replica by replica.
    """
    if alphas is None:
        alphas = (cfg.alpha,)
    alphas = tuple(float(a) for a in alphas)
    if any(a < 0.0 for a in alphas) or \
            any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be nonnegative and ascending")
    alpha_max = max(alphas)
    j = cfg.j
    n_hi = max(cfg.n_range)
    levels = sorted(set(range(j + 3, n_hi + 1)))

    all_counts, all_records, all_pairs = [], [], []
    for rep in range(cfg.replicas):
        base = cfg.seed.child(51, rep)
        pts0, dur, _ = sample_scan_loop(cfg.loop_law, cfg.delta,
                                        base.child(0))
        trace = _trace_for_scan(pts0, dur, levels, base)
        for n in cfg.n_range:
            span = 2.0 ** (n - j) - 1.0
            if cfg.mode == "per_cube" or alpha_max == 0.0:
                def soup_fn(key, v_c, _n=n, _span=span, _base=base):
                    return _annulus_soup_unit(
                        alpha_max, _span, cfg.delta, cfg.h,
                        _base.child(2, _n, key))
            else:
                pool = _GlobalShellPool(trace, cfg, n, span, alpha_max, base)
                soup_fn = pool.loops_for
            counts, records, _, k_centers = _scan_level(
                trace, cfg, n, rep, alphas, soup_fn, base.child(4, n))
            all_counts.extend(counts)
            all_records.extend(records)
            hit, sc = counts[0].cubes_hit, counts[0].cubes_scanned
            w = (hit / sc) ** 2 if 0 < sc < hit else 1.0
            for a in alphas:
                for mv, k in _pair_bins(k_centers[a], j, n).items():
                    all_pairs.append(PairCount(
                        replica=rep, j=j, n=n, m=mv, alpha=float(a),
                        k_pairs=k, weight=w))
    return CutScanResult(config=cfg, alphas=alphas,
                         counts=tuple(all_counts),
                         records=tuple(all_records),
                         pair_counts=tuple(all_pairs))


class _GlobalShellPool:
    """One shared soup per (replica, level), restricted per cube.

    Hit-cube samplers (interior stratum included, so neighbours see
    loops rooted inside other cubes) are merged into a single Poisson
    pool by assigning each root to the nearest hit-cube center; the
    pool's floor is therefore graded by distance to the nearest hit
    cube, below every reader's own floor.  Ownership is decided on the
    pre-build point marginal, so only owned roots pay the bridge-build
    cost, and no source-frame containment is applied.  A cube reads
    the pool through its own law exactly: shell containment, root
    support [1, span] in its frame, and its own graded duration floor.
    Cubes whose shells overlap then share loops, marks included.

    Pool loops are built at the owner's resolution, finer than a far
    reader needs, so a reader decimates each polyline down to its own
    step rule before the containment check; a discrete bridge sampled
    on a subgrid is again a discrete bridge of the same loop.
    """

    def __init__(self, trace, cfg, n, span, alpha_max, rep_stream):
        _, rows_n = trace.tree(n)
        in_box = np.abs(trace.pts[rows_n]).max(axis=1) <= SCAN_BOX.half
        box_rows = rows_n[in_box]
        keys = np.unique(_cube_lattice_keys(trace.pts[box_rows], n)) \
            if box_rows.size else np.zeros(0, dtype=np.int64)
        self.span = span
        self.scale = 2.0 ** -n
        self.tol = hit_tolerance(cfg.delta)
        self.h = cfg.h
        self.delta = cfg.delta
        centers = _key_centers(keys, n) if keys.size else np.zeros((0, 3))
        center_tree = cKDTree(centers) if keys.size else None
        scfg = GradedSoupConfig(alpha=alpha_max, rho_max=math.log(span),
                                delta=cfg.delta, h=cfg.h,
                                exclusion_radius=None)
        self.steps_min = scfg.steps_min
        self.steps_max = scfg.steps_max
        pts_list, roots_f, durs, marks, cents, rads = [], [], [], [], [], []
        for key, v_c in zip(keys, centers):
            gen = rep_stream.child(3, n, int(key)).generator()
            roots, durations, mks, _ = sample_graded_points(scfg, gen)
            if not roots.shape[0]:
                continue
            glob = v_c + roots * self.scale
            _, owner = center_tree.query(glob)
            own = keys[owner] == key
            loops = _build_loops(roots[own], durations[own], mks[own],
                                 cfg.delta, scfg.steps_min,
                                 scfg.steps_max, gen)
            off = v_c / self.scale
            for lp in loops:
                p = lp.pts + off
                box_c = 0.5 * (p.min(axis=0) + p.max(axis=0))
                pts_list.append(p)
                roots_f.append(off + lp.root)
                durs.append(lp.duration)
                marks.append(lp.mark)
                cents.append(box_c)
                rads.append(math.sqrt(
                    ((p - box_c) ** 2).sum(axis=1).max()) + 1e-12)
        self.pts = pts_list
        self.roots = np.asarray(roots_f).reshape(-1, 3)
        self.durs = np.asarray(durs)
        self.marks = np.asarray(marks)
        self.cents = np.asarray(cents).reshape(-1, 3)
        self.rads = np.asarray(rads)

    def loops_for(self, key, v_c):
        if not self.pts:
            return []
        off = v_c / self.scale
        rel = self.roots - off
        r_all = np.sqrt((rel * rel).sum(axis=1))
        keep = (r_all >= 1.0) & (r_all <= self.span)
        keep &= self.durs >= (self.h * np.maximum(1.0, r_all) / 6.0) ** 2
        idx = np.nonzero(keep)[0]
        if not idx.size:
            return []
        hi = self.span + self.tol
        lo = 1.0 - self.tol
        d = np.sqrt(((self.cents[idx] - off) ** 2).sum(axis=1))
        rad = self.rads[idx]
        sure = (d + rad <= hi) & (d - rad >= lo)
        maybe = ~sure & (d - rad <= hi) & (d + rad >= lo)
        steps = loop_steps(self.durs[idx], np.maximum(1.0, r_all[idx]),
                           self.delta, self.steps_min, self.steps_max)
        out = []
        for i, ok, chk, tgt in zip(idx, sure, maybe, steps):
            if not (ok or chk):
                continue
            p = self.pts[i]
            m = p.shape[0] - 1
            if m > tgt:
                sel = np.round(np.linspace(0.0, m, int(tgt) + 1)).astype(
                    np.intp)
                p = p[sel]
            p = p - off
            if not ok:
                r2 = (p * p).sum(axis=1)
                if r2.max() > hi * hi or r2.min() < lo * lo:
                    continue
            out.append((p, self.durs[i], self.marks[i]))
        return out


# ---------------------------------------------------------------------------
# moment fits


@dataclass(frozen=True)
class DimensionEstimate:
    dim_hat: float
    ci_low: float
    ci_high: float
    n_values: tuple
    zero_levels: tuple
    n_boot: int


def _count_value(row):
    get = row.get if isinstance(row, dict) else \
        lambda k, d=None: getattr(row, k, d)
    v = float(get("K_count"))
    hit = get("cubes_hit", None)
    sc = get("cubes_scanned", None)
    if hit and sc and sc < hit:
        v *= hit / sc
    return int(get("replica")), int(get("n")), v, get("alpha", None)


def _wls_loglinear(ns, means, spreads):
    y = np.log2(means)
    var = np.maximum(np.asarray(spreads), 1e-12)
    w = 1.0 / var
    x = np.stack([np.ones_like(y), np.asarray(ns, dtype=np.float64)], axis=1)
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    return beta


def dimension_estimate(counts, *, n_boot=1000, seed=None) -> DimensionEstimate:
    """Slope of log2 mean cut-cube count against the cube level.

    ``counts`` is any iterable of rows bearing replica, n, K_count (and
    optionally cubes_hit / cubes_scanned, which rescale subsampled
    scans).  The confidence interval is a percentile bootstrap over
    replicas, widened if needed to contain the point estimate.
    """
    table = {}
    alphas_seen = set()
    for row in counts:
        rep, n, v, a = _count_value(row)
        if a is not None:
            alphas_seen.add(float(a))
        table.setdefault(n, {})
        table[n][rep] = table[n].get(rep, 0.0) + v
    if len(alphas_seen) > 1:
        raise ValueError("counts mix several alphas; filter to one first")
    reps = sorted({r for by in table.values() for r in by})
    ns = sorted(table)
    mat = np.array([[table[n].get(r, 0.0) for r in reps] for n in ns])

    means = mat.mean(axis=1)
    good = means > 0.0
    zero_levels = tuple(int(n) for n, g in zip(ns, good) if not g)
    if int(good.sum()) < 3:
        raise ValueError("need positive counts at >= 3 levels")
    ns_g = np.asarray(ns, dtype=np.float64)[good]
    mat_g = mat[good]
    means_g = means[good]
    nrep = mat.shape[1]
    # delta-method variance of log2 mean from the replica spread
    var_log = mat_g.var(axis=1, ddof=1) / np.maximum(nrep, 1) \
        / np.maximum(means_g, 1e-300) ** 2 / math.log(2.0) ** 2 \
        if nrep > 1 else np.zeros_like(means_g)
    beta = _wls_loglinear(ns_g, means_g, var_log)
    dim_hat = float(beta[1])

    if seed is None:
        seed = RngStream(202608, 73)
    gen = seed.generator()
    slopes = []
    for _ in range(int(n_boot) if nrep > 1 else 0):
        pick = gen.integers(0, nrep, nrep)
        bm = mat_g[:, pick].mean(axis=1)
        ok = bm > 0.0
        if int(ok.sum()) < 3:
            continue
        bv = mat_g[:, pick].var(axis=1, ddof=1)[ok] / nrep \
            / np.maximum(bm[ok], 1e-300) ** 2 / math.log(2.0) ** 2
        slopes.append(float(_wls_loglinear(ns_g[ok], bm[ok], bv)[1]))
    if slopes:
        lo, hi = np.percentile(slopes, [2.5, 97.5])
    else:
        lo = hi = dim_hat
    return DimensionEstimate(dim_hat=dim_hat,
                             ci_low=float(min(lo, dim_hat)),
                             ci_high=float(max(hi, dim_hat)),
                             n_values=tuple(int(n) for n in ns_g),
                             zero_levels=zero_levels, n_boot=int(n_boot))


def per_cube_bound(n, xi):
    """Reference per-cube cut probability shape 2^(-n(1+xi))."""
    return 2.0 ** (-n * (1.0 + xi))


def pair_bound(n, m, xi, c=1.0):
    """Reference pair shape c * 2^((-2n+m)(1+xi)).

    At m = n this equals per_cube_bound(n, xi)^2 / per_cube_bound(n,
    xi): one shared scale cancels from the squared first-moment shape.
    """
    return c * 2.0 ** ((-2.0 * n + m) * (1.0 + xi))


# average dyadic-shell offset count per cube, pairs counted once; edge
# clipping shifts constants per m only, which a slope in n never sees
_SHELL_OFFSETS = 7.0 * math.pi / 6.0


def _pair_denominator(n, m):
    return 8 ** (n - 3) * _SHELL_OFFSETS * 8.0 ** (n - m) / 2.0


@dataclass(frozen=True)
class _PairBinStat:
    n: int
    m: int
    k_pairs: int
    freq: float
    shape: float


@dataclass(frozen=True)
class SecondMomentReport:
    exponent_hat: float
    c_fit: float
    slope_by_m: dict
    bins: tuple
    violations: tuple
    sparse_bins: tuple


def second_moment_check(pair_counts, xi_hat, *, min_pairs=5,
                        slack=4.0) -> SecondMomentReport:
    """Check pair frequencies against the dyadic-distance upper shape.

    Pools replicas, fits log2 frequency against n separately per
    distance bin m, and reports the weighted pair exponent (sign
    flipped, so the target is 2(1+xi)).  The dominating constant is the
    median frequency/shape ratio; bins above ``slack`` times it are
    violations, bins with fewer than ``min_pairs`` pooled pairs are
    flagged as sparse and excluded from both fits.
    """
    pooled = {}
    raw = {}
    reps = set()
    for row in pair_counts:
        get = row.get if isinstance(row, dict) else \
            lambda k, d=None: getattr(row, k, d)
        key = (int(get("n")), int(get("m")))
        k_pairs = int(get("k_pairs"))
        w = float(get("weight", 1.0) or 1.0)
        pooled[key] = pooled.get(key, 0.0) + k_pairs * w
        raw[key] = raw.get(key, 0) + k_pairs
        reps.add(int(get("replica")))
    n_rep = max(len(reps), 1)

    bins, sparse = [], []
    for (n, m), kw in sorted(pooled.items()):
        freq = kw / (n_rep * _pair_denominator(n, m))
        shape = pair_bound(n, m, xi_hat)
        st = _PairBinStat(n=n, m=m, k_pairs=raw[(n, m)], freq=freq,
                          shape=shape)
        (sparse if raw[(n, m)] < min_pairs else bins).append(st)

    by_m = {}
    for st in bins:
        by_m.setdefault(st.m, []).append(st)
    slope_by_m, weights = {}, {}
    for m, sts in by_m.items():
        if len(sts) < 3:
            continue
        ns = np.array([s.n for s in sts], dtype=np.float64)
        ks = np.array([s.k_pairs for s in sts], dtype=np.float64)
        fs = np.array([s.freq for s in sts])
        # Poisson-style weight: var(log2 freq) ~ 1/k
        beta = _wls_loglinear(ns, fs, 1.0 / np.maximum(ks, 1.0))
        slope_by_m[m] = float(beta[1])
        weights[m] = float(ks.sum())
    if slope_by_m:
        wsum = sum(weights.values())
        exponent_hat = -sum(s * weights[m] for m, s in slope_by_m.items()) \
            / wsum
    else:
        exponent_hat = float("nan")

    ratios = [st.freq / st.shape for st in bins if st.shape > 0.0]
    c_fit = float(np.median(ratios)) if ratios else float("nan")
    violations = tuple(st for st in bins
                       if ratios and st.freq > slack * c_fit * st.shape)
    return SecondMomentReport(exponent_hat=float(exponent_hat), c_fit=c_fit,
                              slope_by_m=slope_by_m, bins=tuple(bins),
                              violations=violations,
                              sparse_bins=tuple(sparse))
