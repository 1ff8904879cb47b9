"""Pure-Python reference implementation of the hot kernels.

Everything in this module is mirrored by the Cython extension ``_core``.
The two backends must agree bit-for-bit, so the scalar code paths below
stick to plain IEEE double arithmetic with a fixed operation order and the
vectorised helpers are only used where the reduction result is order
independent (min over an identical candidate set, exact comparisons).

Conventions shared by both backends:

* polylines are float64 arrays of shape (n, 3), n >= 1;
* a segment inherits a "scale" (set by the caller); the contact tolerance
  between two segments is ``h * min(scale_a, scale_b)``;
* ``ProximityGrid`` stores objects (short polylines with a bounding
  sphere) in a hierarchy of hash grids keyed by object size, inserts
  inflated by the object's own tolerance and queries uninflated, which
  makes candidate generation a superset of every tolerance contact;
* the walkers consume whole (k, 3) rows of standard normals and single
  uniforms from caller-provided blocks so that block boundaries can never
  change the random stream.
"""

from __future__ import annotations

import math

import numpy as np

# walker status codes (shared contract)
W_RUNNING = 0
W_HIT = 1
W_KILLED = 2
W_BUDGET = 3

# state-vector layout (shared contract)
SF_X, SF_Y, SF_Z, SF_T, SF_R, SF_DELTA, SF_RLO, SF_BUDGET = range(8)
SF_SIZE = 8
SI_NEXT_GRID, SI_STATUS, SI_ADAPTIVE, SI_STEPS, SI_FIRST_EXEMPT = range(5)
SI_SIZE = 5

# bridge-crossing test is skipped when d1*d2 >= GATE * dt; at the gate the
# crossing probability exp(-2*d1*d2/dt) is exp(-36) ~ 2e-16, below double
# resolution of the uniform draw.
_GATE = 18.0

# the compiled backend packs cell indices into 19-bit fields; both backends
# enforce the same insertion range so behaviour cannot differ
_PACK_MAX = (1 << 18) - 2


# ---------------------------------------------------------------------------
# segment and polyline distances


def _seg_seg_dist_py(p1x, p1y, p1z, q1x, q1y, q1z,
                     p2x, p2y, p2z, q2x, q2y, q2z):
    """Closest distance between segments [p1,q1] and [p2,q2].

    Clamped closest-point formulation; degenerate segments (zero length)
    are handled by exact zero tests so both backends take identical
    branches.
    """
    d1x = q1x - p1x; d1y = q1y - p1y; d1z = q1z - p1z
    d2x = q2x - p2x; d2y = q2y - p2y; d2z = q2z - p2z
    rx = p1x - p2x; ry = p1y - p2y; rz = p1z - p2z
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    if a == 0.0 and e == 0.0:
        return math.sqrt(rx * rx + ry * ry + rz * rz)
    if a == 0.0:
        s = 0.0
        t = f / e
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    else:
        c = d1x * rx + d1y * ry + d1z * rz
        if e == 0.0:
            t = 0.0
            s = -c / a
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
        else:
            b = d1x * d2x + d1y * d2y + d1z * d2z
            denom = a * e - b * b
            if denom > 0.0:
                s = (b * f - c * e) / denom
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
            else:
                s = 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = -c / a
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
            elif t > 1.0:
                t = 1.0
                s = (b - c) / a
                if s < 0.0:
                    s = 0.0
                elif s > 1.0:
                    s = 1.0
    gx = p1x + d1x * s - (p2x + d2x * t)
    gy = p1y + d1y * s - (p2y + d2y * t)
    gz = p1z + d1z * s - (p2z + d2z * t)
    return math.sqrt(gx * gx + gy * gy + gz * gz)


def seg_seg_distance(p1, q1, p2, q2):
    """Distance between 3D segments given as length-3 sequences."""
    return _seg_seg_dist_py(
        float(p1[0]), float(p1[1]), float(p1[2]),
        float(q1[0]), float(q1[1]), float(q1[2]),
        float(p2[0]), float(p2[1]), float(p2[2]),
        float(q2[0]), float(q2[1]), float(q2[2]))


def polyline_point_distance(pts, q):
    """Exact min distance from point q to the polyline pts (n,3)."""
    pts = np.asarray(pts, dtype=np.float64)
    qx, qy, qz = float(q[0]), float(q[1]), float(q[2])
    n = pts.shape[0]
    if n == 1:
        return _seg_seg_dist_py(pts[0, 0], pts[0, 1], pts[0, 2],
                                pts[0, 0], pts[0, 1], pts[0, 2],
                                qx, qy, qz, qx, qy, qz)
    best = math.inf
    for i in range(n - 1):
        d = _seg_seg_dist_py(pts[i, 0], pts[i, 1], pts[i, 2],
                             pts[i + 1, 0], pts[i + 1, 1], pts[i + 1, 2],
                             qx, qy, qz, qx, qy, qz)
        if d < best:
            best = d
    return best


_CHUNK = 16


def _chunk_bounds(pts):
    """Per-chunk AABBs over segments [i, i+1), chunks of _CHUNK segments.

    Returns (starts, los (m,3), his (m,3)); chunk c covers point rows
    starts[c] .. starts[c+1] inclusive of the shared endpoint.
    """
    n_seg = pts.shape[0] - 1
    n_chunk = (n_seg + _CHUNK - 1) // _CHUNK
    starts = np.arange(n_chunk + 1, dtype=np.int64) * _CHUNK
    starts[-1] = n_seg
    los = np.empty((n_chunk, 3))
    his = np.empty((n_chunk, 3))
    for c in range(n_chunk):
        blk = pts[starts[c]:starts[c + 1] + 1]
        los[c] = blk.min(axis=0)
        his[c] = blk.max(axis=0)
    return starts, los, his


def _bbox_dist(lo1, hi1, lo2, hi2):
    dx = max(lo1[0] - hi2[0], lo2[0] - hi1[0], 0.0)
    dy = max(lo1[1] - hi2[1], lo2[1] - hi1[1], 0.0)
    dz = max(lo1[2] - hi2[2], lo2[2] - hi1[2], 0.0)
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def polyline_min_distance(pts_a, pts_b):
    """Exact min distance between two polylines.

    Branch-and-bound over chunk bounding boxes; equals the brute-force
    min over all segment pairs exactly (the surviving pair set is scanned
    with the same per-pair kernel, and min() is order independent).
    """
    a = np.ascontiguousarray(pts_a, dtype=np.float64)
    b = np.ascontiguousarray(pts_b, dtype=np.float64)
    if a.shape[0] == 1:
        return polyline_point_distance(b, a[0])
    if b.shape[0] == 1:
        return polyline_point_distance(a, b[0])
    sa, loa, hia = _chunk_bounds(a)
    sb, lob, hib = _chunk_bounds(b)
    na, nb = loa.shape[0], lob.shape[0]
    # order chunk pairs by bbox distance so pruning bites early
    dmat = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            dmat[i, j] = _bbox_dist(loa[i], hia[i], lob[j], hib[j])
    order = np.argsort(dmat, axis=None, kind="stable")
    best = math.inf
    flat = dmat.ravel()
    for idx in order:
        if flat[idx] >= best:
            break
        i, j = divmod(int(idx), nb)
        for u in range(sa[i], sa[i + 1]):
            for v in range(sb[j], sb[j + 1]):
                d = _seg_seg_dist_py(
                    a[u, 0], a[u, 1], a[u, 2],
                    a[u + 1, 0], a[u + 1, 1], a[u + 1, 2],
                    b[v, 0], b[v, 1], b[v, 2],
                    b[v + 1, 0], b[v + 1, 1], b[v + 1, 2])
                if d < best:
                    best = d
    return best


# ---------------------------------------------------------------------------
# proximity grid


def _level_for(h, cell0, lvl_lo, lvl_hi, diam_tol):
    """Level whose cell size is >= the object's inflated diameter."""
    lvl = lvl_lo
    size = cell0 * math.exp(lvl_lo)
    while size < diam_tol and lvl < lvl_hi:
        lvl += 1
        size *= math.e
    return lvl


class ProximityGrid:
    """Size-stratified hash grid of small polyline objects.

    Objects are added with per-segment scales and a (tag, aux) identity;
    contacts are reported per unique (tag, aux) with the earliest query
    segment index.  Insertion covers the AABB of the object's bounding
    sphere inflated by the object tolerance ``h * max(seg_scale)``; a
    query probes only the cells its own bounding sphere overlaps, at every
    level.  If two segments are within ``h * min(scale_q, scale_o)`` the
    query sphere contains a point within the object's inflated region, so
    candidate generation is complete.
    """

    def __init__(self, h, cell0, lvl_lo, lvl_hi):
        if not (int(lvl_lo) <= int(lvl_hi)
                and int(lvl_hi) - int(lvl_lo) + 1 <= 64):
            raise ValueError("level range must be ascending, at most 64 levels")
        self.h = float(h)
        self.cell0 = float(cell0)
        self.lvl_lo = int(lvl_lo)
        self.lvl_hi = int(lvl_hi)
        self._pts = []        # list of (m,3) arrays
        self._scales = []     # list of (m-1,) arrays
        self._tags = []
        self._auxs = []
        self._centers = []
        self._radii = []      # bounding-sphere radius + object tolerance
        self._levels = []
        # one cell dict per level: (ix, iy, iz) -> list of object ids
        self._cells = [dict() for _ in range(lvl_hi - lvl_lo + 1)]
        self._built = False

    @property
    def n_objects(self):
        return len(self._pts)

    def add_object(self, pts, seg_scales, tag, aux):
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        seg_scales = np.ascontiguousarray(seg_scales, dtype=np.float64)
        if pts.shape[0] < 2 or seg_scales.shape[0] != pts.shape[0] - 1:
            raise ValueError("object needs n>=2 points and n-1 scales")
        if not 0 <= int(tag) < (1 << 40):
            raise ValueError("tag must fit in 40 bits")
        if not 0 <= int(aux) < (1 << 20):
            raise ValueError("aux must fit in 20 bits")
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        center = 0.5 * (lo + hi)
        rad = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
        tol = self.h * float(seg_scales.max())
        self._pts.append(pts)
        self._scales.append(seg_scales)
        self._tags.append(int(tag))
        self._auxs.append(int(aux))
        self._centers.append(center)
        rtot = rad + tol
        self._radii.append(rtot)
        lvl = _level_for(self.h, self.cell0, self.lvl_lo, self.lvl_hi,
                         2.0 * rtot)
        self._levels.append(lvl)
        cell = self.cell0 * math.exp(lvl)
        ix0 = math.floor((center[0] - rtot) / cell)
        ix1 = math.floor((center[0] + rtot) / cell)
        iy0 = math.floor((center[1] - rtot) / cell)
        iy1 = math.floor((center[1] + rtot) / cell)
        iz0 = math.floor((center[2] - rtot) / cell)
        iz1 = math.floor((center[2] + rtot) / cell)
        if (ix0 < -_PACK_MAX or ix1 > _PACK_MAX or iy0 < -_PACK_MAX
                or iy1 > _PACK_MAX or iz0 < -_PACK_MAX or iz1 > _PACK_MAX):
            raise OverflowError("cell index out of packing range")
        oid = len(self._pts) - 1
        cells = self._cells[lvl - self.lvl_lo]
        for ix in range(int(ix0), int(ix1) + 1):
            for iy in range(int(iy0), int(iy1) + 1):
                for iz in range(int(iz0), int(iz1) + 1):
                    cells.setdefault((ix, iy, iz), []).append(oid)
        return oid

    def build(self):
        self._built = True

    # -- internals ---------------------------------------------------------

    def _level_candidates(self, cells, cell, center, radius, seen):
        ix0 = int(math.floor((center[0] - radius) / cell))
        ix1 = int(math.floor((center[0] + radius) / cell))
        iy0 = int(math.floor((center[1] - radius) / cell))
        iy1 = int(math.floor((center[1] + radius) / cell))
        iz0 = int(math.floor((center[2] - radius) / cell))
        iz1 = int(math.floor((center[2] + radius) / cell))
        span = (ix1 - ix0 + 1) * (iy1 - iy0 + 1) * (iz1 - iz0 + 1)
        if span > len(cells):
            # query coarse relative to this level: scan occupied cells
            for (ix, iy, iz), lst in cells.items():
                if ix0 <= ix <= ix1 and iy0 <= iy <= iy1 and iz0 <= iz <= iz1:
                    for oid in lst:
                        seen[oid] = True
            return
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                for iz in range(iz0, iz1 + 1):
                    lst = cells.get((ix, iy, iz))
                    if lst:
                        for oid in lst:
                            seen[oid] = True

    def _candidates(self, center, radius, lvl_from=None):
        """Object ids whose inserted region may touch ball(center, radius)."""
        seen = {}
        lo = self.lvl_lo if lvl_from is None else lvl_from
        for lvl in range(lo, self.lvl_hi + 1):
            cells = self._cells[lvl - self.lvl_lo]
            if not cells:
                continue
            cell = self.cell0 * math.exp(lvl)
            self._level_candidates(cells, cell, center, radius, seen)
        return seen.keys()

    def _chunk_contacts(self, qpts, qscales, q_from, q_to, skip_tag,
                        found, first_hit_only=False):
        """Test query segments [q_from, q_to) against candidates.

        Updates found[(tag, aux)] = (min qseg).  Returns True on first hit
        when first_hit_only.
        """
        blk = qpts[q_from:q_to + 1]
        lo = blk.min(axis=0)
        hi = blk.max(axis=0)
        center = 0.5 * (lo + hi)
        rad = float(np.sqrt(((blk - center) ** 2).sum(axis=1)).max())
        hit_any = False
        for oid in self._candidates(center, rad):
            tag = self._tags[oid]
            if tag == skip_tag:
                continue
            c = self._centers[oid]
            dx = center[0] - c[0]
            dy = center[1] - c[1]
            dz = center[2] - c[2]
            if math.sqrt(dx * dx + dy * dy + dz * dz) > rad + self._radii[oid]:
                continue
            key = (tag, self._auxs[oid])
            opts = self._pts[oid]
            oscl = self._scales[oid]
            for qi in range(q_from, q_to):
                prev = found.get(key)
                if prev is not None and prev <= qi:
                    break
                sq = qscales[qi]
                hit = False
                for oj in range(opts.shape[0] - 1):
                    so = oscl[oj]
                    tol = self.h * (sq if sq < so else so)
                    d = _seg_seg_dist_py(
                        qpts[qi, 0], qpts[qi, 1], qpts[qi, 2],
                        qpts[qi + 1, 0], qpts[qi + 1, 1], qpts[qi + 1, 2],
                        opts[oj, 0], opts[oj, 1], opts[oj, 2],
                        opts[oj + 1, 0], opts[oj + 1, 1], opts[oj + 1, 2])
                    if d <= tol:
                        hit = True
                        break
                if hit:
                    found[key] = qi
                    hit_any = True
                    if first_hit_only:
                        return True
                    break
        return hit_any

    # -- public queries ------------------------------------------------------

    def query_contacts(self, qpts, qscales, skip_tag=-1, chunk=32):
        """All contacts of the query polyline with stored objects.

        Returns (tags, auxs, qsegs) int64 arrays, one row per unique
        (tag, aux), qseg = smallest contacting query-segment index.
        """
        qpts = np.ascontiguousarray(qpts, dtype=np.float64)
        qscales = np.ascontiguousarray(qscales, dtype=np.float64)
        n_seg = qpts.shape[0] - 1
        found = {}
        q = 0
        while q < n_seg:
            q_to = min(q + chunk, n_seg)
            self._chunk_contacts(qpts, qscales, q, q_to, skip_tag, found)
            q = q_to
        if not found:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        keys = sorted(found.keys())
        tags = np.array([k[0] for k in keys], dtype=np.int64)
        auxs = np.array([k[1] for k in keys], dtype=np.int64)
        qsegs = np.array([found[k] for k in keys], dtype=np.int64)
        return tags, auxs, qsegs

    def query_any(self, qpts, qscales, skip_tag=-1, chunk=32):
        """True if the query polyline touches any stored object."""
        qpts = np.ascontiguousarray(qpts, dtype=np.float64)
        qscales = np.ascontiguousarray(qscales, dtype=np.float64)
        n_seg = qpts.shape[0] - 1
        found = {}
        q = 0
        while q < n_seg:
            q_to = min(q + chunk, n_seg)
            if self._chunk_contacts(qpts, qscales, q, q_to, skip_tag,
                                    found, first_hit_only=True):
                return True
            q = q_to
        return False

    def collect_self_edges(self, tag_lo, tag_hi):
        """Contact pairs (i, j), i < j, among objects with tags in range.

        Tags are assumed unique per object here (one object per loop).
        Each object probes only its own level and coarser ones; a
        fine/coarse pair is found when the finer side queries, a
        same-level pair from both sides (dedup via the pair set).
        """
        pairs = set()
        for oid in range(len(self._pts)):
            ti = self._tags[oid]
            if ti < tag_lo or ti >= tag_hi:
                continue
            pts = self._pts[oid]
            scl = self._scales[oid]
            c = self._centers[oid]
            r = self._radii[oid]
            for cand in self._candidates(c, r, lvl_from=self._levels[oid]):
                tj = self._tags[cand]
                if tj == ti or tj < tag_lo or tj >= tag_hi:
                    continue
                key = (ti, tj) if ti < tj else (tj, ti)
                if key in pairs:
                    continue
                cc = self._centers[cand]
                dx = c[0] - cc[0]
                dy = c[1] - cc[1]
                dz = c[2] - cc[2]
                if math.sqrt(dx * dx + dy * dy + dz * dz) > r + self._radii[cand]:
                    continue
                opts = self._pts[cand]
                oscl = self._scales[cand]
                hit = False
                for qi in range(pts.shape[0] - 1):
                    sq = scl[qi]
                    for oj in range(opts.shape[0] - 1):
                        so = oscl[oj]
                        tol = self.h * (sq if sq < so else so)
                        d = _seg_seg_dist_py(
                            pts[qi, 0], pts[qi, 1], pts[qi, 2],
                            pts[qi + 1, 0], pts[qi + 1, 1], pts[qi + 1, 2],
                            opts[oj, 0], opts[oj, 1], opts[oj, 2],
                            opts[oj + 1, 0], opts[oj + 1, 1], opts[oj + 1, 2])
                        if d <= tol:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    pairs.add(key)
        if not pairs:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy()
        arr = np.array(sorted(pairs), dtype=np.int64)
        return arr[:, 0].copy(), arr[:, 1].copy()


# ---------------------------------------------------------------------------
# walkers


def walk_out_block(sf, si, grid_radii, normals, uniforms, out_t, out_xyz,
                   cross_rows):
    """Advance an outward walk through one block of random numbers.

    Euler steps with local step size delta * scale(x)^2 where
    scale(x) = max(1, |x|) when si[SI_ADAPTIVE], else 1.  Each step is
    tested for first crossings of the ascending radii ``grid_radii`` (an
    exact linear-interpolation crossing when the endpoint straddles, else
    a Brownian-bridge correction exp(-2*d1*d2/dt) consuming one uniform
    when d1*d2 < 18*dt) and, when sf[SF_RLO] > 0, for crossings of the
    kill radius below.  Crossing points are snapped to the sphere radially
    and appended as polyline rows; cross_rows[g] records the row index of
    grid crossing g within this call's output (caller rebases).  The walk
    ends at the final grid radius (status W_HIT), at the kill radius
    (W_KILLED), when sf[SF_T] would exceed sf[SF_BUDGET] (W_BUDGET), or
    when the block is exhausted (W_RUNNING, call again).

    si[SI_FIRST_EXEMPT] suppresses the bridge tests on the first step only
    (push-off from a starting point that lies exactly on a barrier).

    Returns (rows_written, normals_used, uniforms_used).
    """
    x = float(sf[SF_X]); y = float(sf[SF_Y]); z = float(sf[SF_Z])
    t = float(sf[SF_T]); r_cur = float(sf[SF_R])
    delta = float(sf[SF_DELTA]); r_lo = float(sf[SF_RLO])
    budget = float(sf[SF_BUDGET])
    next_g = int(si[SI_NEXT_GRID]); adaptive = int(si[SI_ADAPTIVE])
    steps = int(si[SI_STEPS]); exempt = int(si[SI_FIRST_EXEMPT])
    g_count = grid_radii.shape[0]
    nmax = normals.shape[0]
    out_cap = out_t.shape[0]
    norms = normals.tolist()
    unifs = uniforms.tolist()
    grid = grid_radii.tolist()
    status = W_RUNNING
    row = 0
    iu = 0
    i = 0
    while i < nmax:
        if row + g_count - next_g + 2 > out_cap:
            break
        if adaptive:
            s = r_cur if r_cur > 1.0 else 1.0
        else:
            s = 1.0
        dt = delta * s * s
        if t + dt > budget:
            status = W_BUDGET
            break
        sd = math.sqrt(dt)
        nr = norms[i]
        i += 1
        xn = x + sd * nr[0]
        yn = y + sd * nr[1]
        zn = z + sd * nr[2]
        rn = math.sqrt(xn * xn + yn * yn + zn * zn)
        # kill barrier below
        if r_lo > 0.0:
            d1 = r_cur - r_lo
            d2 = rn - r_lo
            lam = -1.0
            if d2 <= 0.0:
                lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
            elif not exempt and d1 * d2 < _GATE * dt:
                u = unifs[iu]
                iu += 1
                if u < math.exp(-2.0 * d1 * d2 / dt):
                    lam = d1 / (d1 + d2)
            if lam >= 0.0:
                kx = x + lam * (xn - x)
                ky = y + lam * (yn - y)
                kz = z + lam * (zn - z)
                kr = math.sqrt(kx * kx + ky * ky + kz * kz)
                f = r_lo / kr if kr > 0.0 else 0.0
                out_t[row] = t + lam * dt
                out_xyz[row, 0] = kx * f
                out_xyz[row, 1] = ky * f
                out_xyz[row, 2] = kz * f
                row += 1
                steps += 1
                status = W_KILLED
                break
        # first crossings of the grid radii above
        while next_g < g_count:
            R = grid[next_g]
            d1 = R - r_cur
            d2 = R - rn
            lam = -1.0
            if d2 <= 0.0:
                lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
            elif exempt:
                break
            elif d1 * d2 < _GATE * dt:
                u = unifs[iu]
                iu += 1
                if u < math.exp(-2.0 * d1 * d2 / dt):
                    lam = d1 / (d1 + d2)
                else:
                    break
            else:
                break
            cx = x + lam * (xn - x)
            cy = y + lam * (yn - y)
            cz = z + lam * (zn - z)
            cr = math.sqrt(cx * cx + cy * cy + cz * cz)
            f = R / cr if cr > 0.0 else 0.0
            out_t[row] = t + lam * dt
            out_xyz[row, 0] = cx * f
            out_xyz[row, 1] = cy * f
            out_xyz[row, 2] = cz * f
            cross_rows[next_g] = row
            row += 1
            next_g += 1
            if next_g == g_count:
                status = W_HIT
                break
        if status != W_RUNNING:
            steps += 1
            break
        x = xn; y = yn; z = zn
        r_cur = rn
        t += dt
        out_t[row] = t
        out_xyz[row, 0] = x
        out_xyz[row, 1] = y
        out_xyz[row, 2] = z
        row += 1
        steps += 1
        exempt = 0
    sf[SF_X] = x; sf[SF_Y] = y; sf[SF_Z] = z
    sf[SF_T] = t; sf[SF_R] = r_cur
    si[SI_NEXT_GRID] = next_g
    si[SI_STATUS] = status
    si[SI_STEPS] = steps
    si[SI_FIRST_EXEMPT] = exempt
    return row, i, iu


def walk_in_block(sf, si, r_target, r_hi, normals, uniforms, out_t, out_xyz):
    """Advance an inward walk: absorb at r_target below, kill at r_hi above.

    Same stepping and bridge rules as walk_out_block; the target plays the
    role of the low barrier (status W_HIT on crossing) and r_hi <= 0
    disables the outer kill (W_KILLED).  Exactly one absorbing radius each
    way, no grid recording.
    """
    x = float(sf[SF_X]); y = float(sf[SF_Y]); z = float(sf[SF_Z])
    t = float(sf[SF_T]); r_cur = float(sf[SF_R])
    delta = float(sf[SF_DELTA])
    budget = float(sf[SF_BUDGET])
    adaptive = int(si[SI_ADAPTIVE])
    steps = int(si[SI_STEPS]); exempt = int(si[SI_FIRST_EXEMPT])
    r_target = float(r_target); r_hi = float(r_hi)
    nmax = normals.shape[0]
    out_cap = out_t.shape[0]
    norms = normals.tolist()
    unifs = uniforms.tolist()
    status = W_RUNNING
    row = 0
    iu = 0
    i = 0
    while i < nmax:
        if row + 2 > out_cap:
            break
        if adaptive:
            s = r_cur if r_cur > 1.0 else 1.0
        else:
            s = 1.0
        dt = delta * s * s
        if t + dt > budget:
            status = W_BUDGET
            break
        sd = math.sqrt(dt)
        nr = norms[i]
        i += 1
        xn = x + sd * nr[0]
        yn = y + sd * nr[1]
        zn = z + sd * nr[2]
        rn = math.sqrt(xn * xn + yn * yn + zn * zn)
        # absorbing target below
        d1 = r_cur - r_target
        d2 = rn - r_target
        lam = -1.0
        if d2 <= 0.0:
            lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
        elif not exempt and d1 * d2 < _GATE * dt:
            u = unifs[iu]
            iu += 1
            if u < math.exp(-2.0 * d1 * d2 / dt):
                lam = d1 / (d1 + d2)
        if lam >= 0.0:
            cx = x + lam * (xn - x)
            cy = y + lam * (yn - y)
            cz = z + lam * (zn - z)
            cr = math.sqrt(cx * cx + cy * cy + cz * cz)
            f = r_target / cr if cr > 0.0 else 0.0
            out_t[row] = t + lam * dt
            out_xyz[row, 0] = cx * f
            out_xyz[row, 1] = cy * f
            out_xyz[row, 2] = cz * f
            row += 1
            steps += 1
            status = W_HIT
            break
        # kill barrier above
        if r_hi > 0.0:
            d1 = r_hi - r_cur
            d2 = r_hi - rn
            lam = -1.0
            if d2 <= 0.0:
                lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
            elif not exempt and d1 * d2 < _GATE * dt:
                u = unifs[iu]
                iu += 1
                if u < math.exp(-2.0 * d1 * d2 / dt):
                    lam = d1 / (d1 + d2)
            if lam >= 0.0:
                cx = x + lam * (xn - x)
                cy = y + lam * (yn - y)
                cz = z + lam * (zn - z)
                cr = math.sqrt(cx * cx + cy * cy + cz * cz)
                f = r_hi / cr if cr > 0.0 else 0.0
                out_t[row] = t + lam * dt
                out_xyz[row, 0] = cx * f
                out_xyz[row, 1] = cy * f
                out_xyz[row, 2] = cz * f
                row += 1
                steps += 1
                status = W_KILLED
                break
        x = xn; y = yn; z = zn
        r_cur = rn
        t += dt
        out_t[row] = t
        out_xyz[row, 0] = x
        out_xyz[row, 1] = y
        out_xyz[row, 2] = z
        row += 1
        steps += 1
        exempt = 0
    sf[SF_X] = x; sf[SF_Y] = y; sf[SF_Z] = z
    sf[SF_T] = t; sf[SF_R] = r_cur
    si[SI_STATUS] = status
    si[SI_STEPS] = steps
    si[SI_FIRST_EXEMPT] = exempt
    return row, i, iu


# ---------------------------------------------------------------------------
# cluster attachment sweep


def attached_sweep(birth, mark, alpha_frac, edges_i, edges_j,
                   seed_loop, seed_slot, n_slots):
    """Attached-loop masks for one thinning level, all window slots.

    A loop is alive at slot r iff mark < alpha_frac and birth <= r.  Seeds
    (loop contacts with obstacle pieces) activate at slot max(seed_slot,
    birth of the loop); edges connect two loops once both are alive.
    Attachment is monotone in r, so the sweep adds loops/edges/seeds slot
    by slot to one union-find and snapshots the attached component mask.

    Returns uint8 array (n_slots, n_loops).
    """
    n = birth.shape[0]
    out = np.zeros((n_slots, n), dtype=np.uint8)
    if n == 0:
        return out
    alive_at = np.where(mark < alpha_frac, birth, n_slots)
    parent = np.arange(n, dtype=np.int64)
    has_seed = np.zeros(n, dtype=np.uint8)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    # bucket edges / seeds by the slot at which they activate
    e_act = None
    if edges_i.shape[0]:
        e_act = np.maximum(alive_at[edges_i], alive_at[edges_j])
        e_order = np.argsort(e_act, kind="stable")
    s_act = None
    if seed_loop.shape[0]:
        s_act = np.maximum(alive_at[seed_loop], seed_slot)
        s_order = np.argsort(s_act, kind="stable")
    ei = 0
    si_ = 0
    for r in range(n_slots):
        if e_act is not None:
            while ei < e_order.shape[0] and e_act[e_order[ei]] <= r:
                k = e_order[ei]
                ra = find(int(edges_i[k]))
                rb = find(int(edges_j[k]))
                if ra != rb:
                    # the surviving root must keep the seed flag
                    if has_seed[rb] and not has_seed[ra]:
                        parent[ra] = rb
                    else:
                        parent[rb] = ra
                ei += 1
        if s_act is not None:
            while si_ < s_order.shape[0] and s_act[s_order[si_]] <= r:
                root = find(int(seed_loop[s_order[si_]]))
                has_seed[root] = 1
                si_ += 1
        alive = alive_at <= r
        idx = np.nonzero(alive)[0]
        for k in idx:
            if has_seed[find(int(k))]:
                out[r, k] = 1
    return out


# ---------------------------------------------------------------------------
# crossing-scan helpers (float32 traces)


def _r_to(pts, cx, cy, cz, i):
    dx = float(pts[i, 0]) - cx
    dy = float(pts[i, 1]) - cy
    dz = float(pts[i, 2]) - cz
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def scan_back_geq(pts, center, R, i_from):
    """Largest index j <= i_from with |pts[j]-center| >= R, else -1."""
    cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
    R = float(R)
    j = int(i_from)
    while j >= 0:
        if _r_to(pts, cx, cy, cz, j) >= R:
            return j
        j -= 1
    return -1


def scan_fwd_leq(pts, center, R, i_from):
    """Smallest index j >= i_from with |pts[j]-center| <= R, else -1."""
    cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
    R = float(R)
    n = pts.shape[0]
    j = int(i_from)
    while j < n:
        if _r_to(pts, cx, cy, cz, j) <= R:
            return j
        j += 1
    return -1


def scan_fwd_geq(pts, center, R, i_from):
    """Smallest index j >= i_from with |pts[j]-center| >= R, else -1."""
    cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
    R = float(R)
    n = pts.shape[0]
    j = int(i_from)
    while j < n:
        if _r_to(pts, cx, cy, cz, j) >= R:
            return j
        j += 1
    return -1


def gap_exceeds(pts, center, R, i0, i1):
    """1 if any index in (i0, i1) has |pts[j]-center| >= R (early exit)."""
    cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
    R = float(R)
    for j in range(int(i0) + 1, int(i1)):
        if _r_to(pts, cx, cy, cz, j) >= R:
            return 1
    return 0


# ---------------------------------------------------------------------------
# annulus-piece disjointness with a position-dependent tolerance


def piece_pair_disjoint(p1, p2, center, tol_floor, tol_rel):
    """1 if the two pieces stay apart under the graded tolerance, else 0.

    Two segments touch when their distance is <= max(tol_floor,
    tol_rel * min(d1, d2)) where d_k is the distance from segment k's
    nearer endpoint to ``center``.  Chunk pruning uses the pair's largest
    possible tolerance, so the result equals the all-pairs scan.
    """
    a = np.ascontiguousarray(p1, dtype=np.float64)
    b = np.ascontiguousarray(p2, dtype=np.float64)
    cx, cy, cz = float(center[0]), float(center[1]), float(center[2])
    tol_floor = float(tol_floor)
    tol_rel = float(tol_rel)
    if a.shape[0] < 2 or b.shape[0] < 2:
        return 1
    da = np.sqrt(((a - np.array([cx, cy, cz])) ** 2).sum(axis=1))
    db = np.sqrt(((b - np.array([cx, cy, cz])) ** 2).sum(axis=1))
    dsa = np.minimum(da[:-1], da[1:])
    dsb = np.minimum(db[:-1], db[1:])
    sa, loa, hia = _chunk_bounds(a)
    sb, lob, hib = _chunk_bounds(b)
    for i in range(loa.shape[0]):
        da_max = float(dsa[sa[i]:sa[i + 1]].max())
        for j in range(lob.shape[0]):
            db_max = float(dsb[sb[j]:sb[j + 1]].max())
            dmin = da_max if da_max < db_max else db_max
            tol_cap = tol_rel * dmin
            if tol_cap < tol_floor:
                tol_cap = tol_floor
            if _bbox_dist(loa[i], hia[i], lob[j], hib[j]) > tol_cap:
                continue
            for u in range(sa[i], sa[i + 1]):
                for v in range(sb[j], sb[j + 1]):
                    d1 = dsa[u]
                    d2 = dsb[v]
                    dm = d1 if d1 < d2 else d2
                    tol = tol_rel * dm
                    if tol < tol_floor:
                        tol = tol_floor
                    d = _seg_seg_dist_py(
                        a[u, 0], a[u, 1], a[u, 2],
                        a[u + 1, 0], a[u + 1, 1], a[u + 1, 2],
                        b[v, 0], b[v, 1], b[v, 2],
                        b[v + 1, 0], b[v + 1, 1], b[v + 1, 2])
                    if d <= tol:
                        return 0
    return 1
