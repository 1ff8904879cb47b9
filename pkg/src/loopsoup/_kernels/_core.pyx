# cython: language_level=3
# cython: boundscheck=False, wraparound=False, initializedcheck=False
# cython: cdivision=True
"""Compiled implementation of the hot kernels.

Mirrors ``_pycore`` operation for operation: every scalar code path uses
the same IEEE double arithmetic in the same order, so results are
bit-identical between the two backends (asserted by the test suite).
See _pycore for the algorithm documentation.
"""

from libc.math cimport exp, floor, sqrt, INFINITY
from libc.stdint cimport int64_t, int32_t, uint64_t

import numpy as np

W_RUNNING = 0
W_HIT = 1
W_KILLED = 2
W_BUDGET = 3

SF_X, SF_Y, SF_Z, SF_T, SF_R, SF_DELTA, SF_RLO, SF_BUDGET = range(8)
SF_SIZE = 8
SI_NEXT_GRID, SI_STATUS, SI_ADAPTIVE, SI_STEPS, SI_FIRST_EXEMPT = range(5)
SI_SIZE = 5

cdef double _GATE = 18.0
cdef double _M_E = 2.718281828459045235360287471352662498

cdef enum:
    _SF_X = 0
    _SF_Y = 1
    _SF_Z = 2
    _SF_T = 3
    _SF_R = 4
    _SF_DELTA = 5
    _SF_RLO = 6
    _SF_BUDGET = 7
    _SI_NEXT_GRID = 0
    _SI_STATUS = 1
    _SI_ADAPTIVE = 2
    _SI_STEPS = 3
    _SI_FIRST_EXEMPT = 4
    _W_RUNNING = 0
    _W_HIT = 1
    _W_KILLED = 2
    _W_BUDGET = 3


# ---------------------------------------------------------------------------
# segment distance


cdef inline double _seg_seg(double p1x, double p1y, double p1z,
                            double q1x, double q1y, double q1z,
                            double p2x, double p2y, double p2z,
                            double q2x, double q2y, double q2z) nogil:
    cdef double d1x = q1x - p1x, d1y = q1y - p1y, d1z = q1z - p1z
    cdef double d2x = q2x - p2x, d2y = q2y - p2y, d2z = q2z - p2z
    cdef double rx = p1x - p2x, ry = p1y - p2y, rz = p1z - p2z
    cdef double a = d1x * d1x + d1y * d1y + d1z * d1z
    cdef double e = d2x * d2x + d2y * d2y + d2z * d2z
    cdef double f = d2x * rx + d2y * ry + d2z * rz
    cdef double s, t, c, b, denom, gx, gy, gz
    if a == 0.0 and e == 0.0:
        return sqrt(rx * rx + ry * ry + rz * rz)
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
    return sqrt(gx * gx + gy * gy + gz * gz)


def seg_seg_distance(p1, q1, p2, q2):
    """Distance between 3D segments given as length-3 sequences."""
    return _seg_seg(
        float(p1[0]), float(p1[1]), float(p1[2]),
        float(q1[0]), float(q1[1]), float(q1[2]),
        float(p2[0]), float(p2[1]), float(p2[2]),
        float(q2[0]), float(q2[1]), float(q2[2]))


def polyline_point_distance(pts, q):
    """Exact min distance from point q to the polyline pts (n,3)."""
    cdef double[:, ::1] a = np.ascontiguousarray(pts, dtype=np.float64)
    cdef double qx = float(q[0]), qy = float(q[1]), qz = float(q[2])
    cdef Py_ssize_t n = a.shape[0], i
    cdef double best, d
    if n == 1:
        return _seg_seg(a[0, 0], a[0, 1], a[0, 2], a[0, 0], a[0, 1], a[0, 2],
                        qx, qy, qz, qx, qy, qz)
    best = INFINITY
    for i in range(n - 1):
        d = _seg_seg(a[i, 0], a[i, 1], a[i, 2],
                     a[i + 1, 0], a[i + 1, 1], a[i + 1, 2],
                     qx, qy, qz, qx, qy, qz)
        if d < best:
            best = d
    return best


cdef enum:
    _CHUNK = 16


cdef _chunk_bounds_c(double[:, ::1] pts):
    """Per-chunk AABBs (same layout as the reference backend)."""
    cdef Py_ssize_t n_seg = pts.shape[0] - 1
    cdef Py_ssize_t n_chunk = (n_seg + _CHUNK - 1) // _CHUNK
    starts_np = np.arange(n_chunk + 1, dtype=np.int64) * _CHUNK
    starts_np[n_chunk] = n_seg
    los_np = np.empty((n_chunk, 3))
    his_np = np.empty((n_chunk, 3))
    cdef int64_t[::1] starts = starts_np
    cdef double[:, ::1] los = los_np
    cdef double[:, ::1] his = his_np
    cdef Py_ssize_t c, i, k
    cdef double lo, hi, v
    for c in range(n_chunk):
        for k in range(3):
            lo = pts[starts[c], k]
            hi = lo
            for i in range(starts[c] + 1, starts[c + 1] + 1):
                v = pts[i, k]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            los[c, k] = lo
            his[c, k] = hi
    return starts_np, los_np, his_np


cdef inline double _bbox_dist_c(double* lo1, double* hi1,
                                double* lo2, double* hi2) nogil:
    cdef double dx = lo1[0] - hi2[0]
    cdef double t = lo2[0] - hi1[0]
    if t > dx:
        dx = t
    if dx < 0.0:
        dx = 0.0
    cdef double dy = lo1[1] - hi2[1]
    t = lo2[1] - hi1[1]
    if t > dy:
        dy = t
    if dy < 0.0:
        dy = 0.0
    cdef double dz = lo1[2] - hi2[2]
    t = lo2[2] - hi1[2]
    if t > dz:
        dz = t
    if dz < 0.0:
        dz = 0.0
    return sqrt(dx * dx + dy * dy + dz * dz)


def polyline_min_distance(pts_a, pts_b):
    """Exact min distance between two polylines (chunked branch & bound)."""
    a_np = np.ascontiguousarray(pts_a, dtype=np.float64)
    b_np = np.ascontiguousarray(pts_b, dtype=np.float64)
    if a_np.shape[0] == 1:
        return polyline_point_distance(b_np, a_np[0])
    if b_np.shape[0] == 1:
        return polyline_point_distance(a_np, b_np[0])
    cdef double[:, ::1] a = a_np
    cdef double[:, ::1] b = b_np
    sa_np, loa_np, hia_np = _chunk_bounds_c(a)
    sb_np, lob_np, hib_np = _chunk_bounds_c(b)
    cdef int64_t[::1] sa = sa_np
    cdef int64_t[::1] sb = sb_np
    cdef double[:, ::1] loa = loa_np, hia = hia_np
    cdef double[:, ::1] lob = lob_np, hib = hib_np
    cdef Py_ssize_t na = loa.shape[0], nb = lob.shape[0]
    dmat_np = np.empty((na, nb))
    cdef double[:, ::1] dmat = dmat_np
    cdef Py_ssize_t i, j, u, v
    for i in range(na):
        for j in range(nb):
            dmat[i, j] = _bbox_dist_c(&loa[i, 0], &hia[i, 0],
                                      &lob[j, 0], &hib[j, 0])
    order_np = np.argsort(dmat_np, axis=None, kind="stable")
    cdef int64_t[::1] order = order_np
    cdef double[::1] flat = dmat_np.ravel()
    cdef double best = INFINITY, d
    cdef Py_ssize_t idx
    for idx in range(order.shape[0]):
        if flat[order[idx]] >= best:
            break
        i = order[idx] // nb
        j = order[idx] % nb
        for u in range(sa[i], sa[i + 1]):
            for v in range(sb[j], sb[j + 1]):
                d = _seg_seg(a[u, 0], a[u, 1], a[u, 2],
                             a[u + 1, 0], a[u + 1, 1], a[u + 1, 2],
                             b[v, 0], b[v, 1], b[v, 2],
                             b[v + 1, 0], b[v + 1, 1], b[v + 1, 2])
                if d < best:
                    best = d
    return best


# ---------------------------------------------------------------------------
# proximity grid

cdef enum:
    _AXIS_BITS = 19
    _LVL_SHIFT = 57

cdef int64_t _AXIS_OFF = (<int64_t>1) << (_AXIS_BITS - 1)
cdef int64_t _AXIS_MASK = ((<int64_t>1) << _AXIS_BITS) - 1
cdef int64_t _AXIS_MAX = _AXIS_OFF - 2


cdef inline int64_t _pack_key(int lvl_idx, int64_t ix, int64_t iy,
                              int64_t iz) nogil:
    return ((<int64_t>lvl_idx) << _LVL_SHIFT) \
        | ((ix + _AXIS_OFF) << (2 * _AXIS_BITS)) \
        | ((iy + _AXIS_OFF) << _AXIS_BITS) \
        | (iz + _AXIS_OFF)


cdef inline uint64_t _mix_hash(uint64_t z) nogil:
    z = (z + <uint64_t>0x9E3779B97F4A7C15)
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef class ProximityGrid:
    """Size-stratified hash grid of small polyline objects.

    Same contract as the reference backend; see _pycore.ProximityGrid.
    """

    cdef public double h
    cdef public double cell0
    cdef public int lvl_lo
    cdef public int lvl_hi
    # accumulation (python side, until build)
    cdef list _pts_list
    cdef list _scl_list
    cdef list _tag_list
    cdef list _aux_list
    cdef list _cen_list
    cdef list _rad_list
    cdef list _lvl_list
    cdef bint _dirty
    # built arrays
    cdef double[:, ::1] _pts
    cdef int64_t[::1] _off          # point offsets per object
    cdef double[::1] _scl
    cdef int64_t[::1] _soff         # scale offsets per object
    cdef double[:, ::1] _cen
    cdef double[::1] _rad
    cdef int64_t[::1] _tag
    cdef int64_t[::1] _aux
    cdef int32_t[::1] _lvl
    cdef int64_t[::1] _cell_keys    # unique, sorted
    cdef int64_t[::1] _cell_start   # CSR into _cell_oid
    cdef int32_t[::1] _cell_oid
    cdef int64_t[::1] _lvl_start    # per-level slice of _cell_keys
    cdef int64_t[::1] _tbl_key
    cdef int32_t[::1] _tbl_idx
    cdef uint64_t _tbl_mask
    cdef int64_t[::1] _stamp
    cdef int64_t _stamp_cur
    cdef int32_t[::1] _cand
    # kept alive (memoryview owners)
    cdef object _owners

    def __init__(self, h, cell0, lvl_lo, lvl_hi):
        if not (int(lvl_lo) <= int(lvl_hi)
                and int(lvl_hi) - int(lvl_lo) + 1 <= 64):
            raise ValueError("level range must be ascending, at most 64 levels")
        self.h = float(h)
        self.cell0 = float(cell0)
        self.lvl_lo = int(lvl_lo)
        self.lvl_hi = int(lvl_hi)
        self._pts_list = []
        self._scl_list = []
        self._tag_list = []
        self._aux_list = []
        self._cen_list = []
        self._rad_list = []
        self._lvl_list = []
        self._dirty = True
        self._owners = None
        self._stamp_cur = 0

    @property
    def n_objects(self):
        return len(self._pts_list)

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
        cdef double rtot = rad + tol
        cdef int lvl = self.lvl_lo
        cdef double size = self.cell0 * exp(<double>self.lvl_lo)
        while size < 2.0 * rtot and lvl < self.lvl_hi:
            lvl += 1
            size *= _M_E
        cdef double cell = self.cell0 * exp(<double>lvl)
        cdef double cx = float(center[0])
        cdef double cy = float(center[1])
        cdef double cz = float(center[2])
        if (floor((cx - rtot) / cell) < -_AXIS_MAX
                or floor((cx + rtot) / cell) > _AXIS_MAX
                or floor((cy - rtot) / cell) < -_AXIS_MAX
                or floor((cy + rtot) / cell) > _AXIS_MAX
                or floor((cz - rtot) / cell) < -_AXIS_MAX
                or floor((cz + rtot) / cell) > _AXIS_MAX):
            raise OverflowError("cell index out of packing range")
        self._pts_list.append(pts)
        self._scl_list.append(seg_scales)
        self._tag_list.append(int(tag))
        self._aux_list.append(int(aux))
        self._cen_list.append(center)
        self._rad_list.append(rtot)
        self._lvl_list.append(lvl)
        self._dirty = True
        return len(self._pts_list) - 1

    def build(self):
        self._rebuild()

    cdef _rebuild(self):
        cdef Py_ssize_t n_obj = len(self._pts_list)
        cdef Py_ssize_t n_lvl = self.lvl_hi - self.lvl_lo + 1
        if n_obj == 0:
            # typed memoryviews hold their base arrays alive
            self._pts = np.zeros((1, 3))
            self._off = np.zeros(1, dtype=np.int64)
            self._scl = np.zeros(1)
            self._soff = np.zeros(1, dtype=np.int64)
            self._cen = np.zeros((1, 3))
            self._rad = np.zeros(1)
            self._tag = np.zeros(0, dtype=np.int64)
            self._aux = np.zeros(0, dtype=np.int64)
            self._lvl = np.zeros(0, dtype=np.int32)
            self._cell_keys = np.zeros(0, dtype=np.int64)
            self._cell_start = np.zeros(1, dtype=np.int64)
            self._cell_oid = np.zeros(0, dtype=np.int32)
            self._lvl_start = np.zeros(n_lvl + 1, dtype=np.int64)
            self._tbl_key = np.full(2, -1, dtype=np.int64)
            self._tbl_idx = np.zeros(2, dtype=np.int32)
            self._tbl_mask = 1
            self._stamp = np.zeros(1, dtype=np.int64)
            self._cand = np.zeros(1, dtype=np.int32)
            self._stamp_cur = 0
            self._dirty = False
            return
        pts_np = np.concatenate(self._pts_list, axis=0)
        counts = np.array([arr.shape[0] for arr in self._pts_list],
                          dtype=np.int64)
        off_np = np.zeros(n_obj + 1, dtype=np.int64)
        np.cumsum(counts, out=off_np[1:])
        scl_np = np.concatenate(self._scl_list)
        soff_np = np.zeros(n_obj + 1, dtype=np.int64)
        np.cumsum(counts - 1, out=soff_np[1:])
        cen_np = np.ascontiguousarray(np.array(self._cen_list))
        rad_np = np.array(self._rad_list)
        tag_np = np.array(self._tag_list, dtype=np.int64)
        aux_np = np.array(self._aux_list, dtype=np.int64)
        lvl_np = np.array(self._lvl_list, dtype=np.int32)
        # enumerate inserted cells per object
        cdef double[:, ::1] cen = cen_np
        cdef double[::1] rad = rad_np
        cdef int32_t[::1] lvl = lvl_np
        key_chunks = []
        oid_chunks = []
        cdef Py_ssize_t o
        cdef double cell, rtot
        cdef int64_t ix0, ix1, iy0, iy1, iz0, iz1, ix, iy, iz
        cdef Py_ssize_t n_entries
        cdef int64_t[::1] kbuf
        for o in range(n_obj):
            cell = self.cell0 * exp(<double>lvl[o])
            rtot = rad[o]
            ix0 = <int64_t>floor((cen[o, 0] - rtot) / cell)
            ix1 = <int64_t>floor((cen[o, 0] + rtot) / cell)
            iy0 = <int64_t>floor((cen[o, 1] - rtot) / cell)
            iy1 = <int64_t>floor((cen[o, 1] + rtot) / cell)
            iz0 = <int64_t>floor((cen[o, 2] - rtot) / cell)
            iz1 = <int64_t>floor((cen[o, 2] + rtot) / cell)
            if (ix0 < -_AXIS_MAX or ix1 > _AXIS_MAX or iy0 < -_AXIS_MAX
                    or iy1 > _AXIS_MAX or iz0 < -_AXIS_MAX or iz1 > _AXIS_MAX):
                raise OverflowError("cell index out of packing range")
            n_entries = (ix1 - ix0 + 1) * (iy1 - iy0 + 1) * (iz1 - iz0 + 1)
            k_np = np.empty(n_entries, dtype=np.int64)
            o_np = np.full(n_entries, o, dtype=np.int32)
            kbuf = k_np
            n_entries = 0
            for ix in range(ix0, ix1 + 1):
                for iy in range(iy0, iy1 + 1):
                    for iz in range(iz0, iz1 + 1):
                        kbuf[n_entries] = _pack_key(lvl[o] - self.lvl_lo,
                                                    ix, iy, iz)
                        n_entries += 1
            key_chunks.append(k_np)
            oid_chunks.append(o_np)
        keys_all = np.concatenate(key_chunks)
        oids_all = np.concatenate(oid_chunks)
        order = np.argsort(keys_all, kind="stable")
        keys_sorted = keys_all[order]
        oid_sorted_np = np.ascontiguousarray(oids_all[order])
        uniq, start = np.unique(keys_sorted, return_index=True)
        cell_start_np = np.empty(uniq.shape[0] + 1, dtype=np.int64)
        cell_start_np[:-1] = start
        cell_start_np[-1] = keys_sorted.shape[0]
        # per-level slices of the unique key array
        lvl_bounds = (np.arange(n_lvl + 1, dtype=np.int64) << _LVL_SHIFT)
        lvl_start_np = np.searchsorted(uniq, lvl_bounds).astype(np.int64)
        # open-addressing table
        cdef Py_ssize_t m = uniq.shape[0]
        cdef Py_ssize_t p = 4
        while p < 2 * m + 2:
            p <<= 1
        tbl_key_np = np.full(p, -1, dtype=np.int64)
        tbl_idx_np = np.zeros(p, dtype=np.int32)
        cdef int64_t[::1] tbl_key = tbl_key_np
        cdef int32_t[::1] tbl_idx = tbl_idx_np
        cdef int64_t[::1] uq = uniq
        cdef uint64_t mask = <uint64_t>(p - 1)
        cdef Py_ssize_t q
        cdef uint64_t slot
        for q in range(m):
            slot = _mix_hash(<uint64_t>uq[q]) & mask
            while tbl_key[slot] != -1:
                slot = (slot + 1) & mask
            tbl_key[slot] = uq[q]
            tbl_idx[slot] = <int32_t>q
        stamp_np = np.zeros(n_obj, dtype=np.int64)
        cand_np = np.zeros(n_obj, dtype=np.int32)
        self._owners = (pts_np, off_np, scl_np, soff_np, cen_np, rad_np,
                        tag_np, aux_np, lvl_np, lvl_start_np, tbl_key_np,
                        tbl_idx_np, uniq, oid_sorted_np, cell_start_np,
                        stamp_np, cand_np)
        self._pts = pts_np
        self._off = off_np
        self._scl = scl_np
        self._soff = soff_np
        self._cen = cen_np
        self._rad = rad_np
        self._tag = tag_np
        self._aux = aux_np
        self._lvl = lvl_np
        self._cell_keys = uniq
        self._cell_start = cell_start_np
        self._cell_oid = oid_sorted_np
        self._lvl_start = lvl_start_np
        self._tbl_key = tbl_key_np
        self._tbl_idx = tbl_idx_np
        self._tbl_mask = mask
        self._stamp = stamp_np
        self._cand = cand_np
        self._stamp_cur = 0
        self._dirty = False

    cdef inline Py_ssize_t _lookup(self, int64_t key) nogil:
        """Unique-cell row for key, or -1."""
        cdef uint64_t slot = _mix_hash(<uint64_t>key) & self._tbl_mask
        while True:
            if self._tbl_key[slot] == key:
                return self._tbl_idx[slot]
            if self._tbl_key[slot] == -1:
                return -1
            slot = (slot + 1) & self._tbl_mask

    cdef Py_ssize_t _gather(self, double cx, double cy, double cz,
                            double radius, int lvl_from) nogil:
        """Stamp-deduplicated candidate object ids into self._cand."""
        cdef Py_ssize_t n_cand = 0
        cdef int lvl, l_idx
        cdef double cell
        cdef int64_t ix0, ix1, iy0, iy1, iz0, iz1, ix, iy, iz, key
        cdef Py_ssize_t row, k, e
        cdef int64_t span, occ
        cdef int32_t oid
        self._stamp_cur += 1
        for lvl in range(lvl_from, self.lvl_hi + 1):
            l_idx = lvl - self.lvl_lo
            occ = self._lvl_start[l_idx + 1] - self._lvl_start[l_idx]
            if occ == 0:
                continue
            cell = self.cell0 * exp(<double>lvl)
            ix0 = <int64_t>floor((cx - radius) / cell)
            ix1 = <int64_t>floor((cx + radius) / cell)
            iy0 = <int64_t>floor((cy - radius) / cell)
            iy1 = <int64_t>floor((cy + radius) / cell)
            iz0 = <int64_t>floor((cz - radius) / cell)
            iz1 = <int64_t>floor((cz + radius) / cell)
            span = (ix1 - ix0 + 1) * (iy1 - iy0 + 1) * (iz1 - iz0 + 1)
            if span > occ:
                for row in range(self._lvl_start[l_idx],
                                 self._lvl_start[l_idx + 1]):
                    key = self._cell_keys[row]
                    ix = ((key >> (2 * _AXIS_BITS)) & _AXIS_MASK) - _AXIS_OFF
                    iy = ((key >> _AXIS_BITS) & _AXIS_MASK) - _AXIS_OFF
                    iz = (key & _AXIS_MASK) - _AXIS_OFF
                    if ix0 <= ix <= ix1 and iy0 <= iy <= iy1 \
                            and iz0 <= iz <= iz1:
                        for e in range(self._cell_start[row],
                                       self._cell_start[row + 1]):
                            oid = self._cell_oid[e]
                            if self._stamp[oid] != self._stamp_cur:
                                self._stamp[oid] = self._stamp_cur
                                self._cand[n_cand] = oid
                                n_cand += 1
            else:
                # inserted cells are bounds-checked, so clamping to the
                # packable range cannot drop a candidate
                if ix0 < -_AXIS_MAX: ix0 = -_AXIS_MAX
                if ix1 > _AXIS_MAX: ix1 = _AXIS_MAX
                if iy0 < -_AXIS_MAX: iy0 = -_AXIS_MAX
                if iy1 > _AXIS_MAX: iy1 = _AXIS_MAX
                if iz0 < -_AXIS_MAX: iz0 = -_AXIS_MAX
                if iz1 > _AXIS_MAX: iz1 = _AXIS_MAX
                for ix in range(ix0, ix1 + 1):
                    for iy in range(iy0, iy1 + 1):
                        for iz in range(iz0, iz1 + 1):
                            row = self._lookup(_pack_key(l_idx, ix, iy, iz))
                            if row < 0:
                                continue
                            for e in range(self._cell_start[row],
                                           self._cell_start[row + 1]):
                                oid = self._cell_oid[e]
                                if self._stamp[oid] != self._stamp_cur:
                                    self._stamp[oid] = self._stamp_cur
                                    self._cand[n_cand] = oid
                                    n_cand += 1
        return n_cand

    def query_contacts(self, qpts, qscales, skip_tag=-1, chunk=32):
        """All contacts; returns (tags, auxs, qsegs) like the reference."""
        found = self._query(qpts, qscales, int(skip_tag), int(chunk), 0)
        if not found:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        keys = sorted(found.keys())
        tags = np.array([k >> 20 for k in keys], dtype=np.int64)
        auxs = np.array([k & 0xFFFFF for k in keys], dtype=np.int64)
        qsegs = np.array([found[k] for k in keys], dtype=np.int64)
        return tags, auxs, qsegs

    def query_any(self, qpts, qscales, skip_tag=-1, chunk=32):
        """True if the query polyline touches any stored object."""
        found = self._query(qpts, qscales, int(skip_tag), int(chunk), 1)
        return bool(found)

    cdef dict _query(self, qpts_in, qscales_in, int64_t skip_tag,
                     Py_ssize_t chunk, int first_hit_only):
        if self._dirty:
            self._rebuild()
        qpts_np = np.ascontiguousarray(qpts_in, dtype=np.float64)
        qscl_np = np.ascontiguousarray(qscales_in, dtype=np.float64)
        cdef double[:, ::1] qpts = qpts_np
        cdef double[::1] qscl = qscl_np
        cdef Py_ssize_t n_seg = qpts.shape[0] - 1
        cdef dict found = {}
        if self._tag.shape[0] == 0:
            return found
        cdef Py_ssize_t q_from = 0, q_to, i, k, n_cand, ci, qi, oj
        cdef double lo0, lo1, lo2, hi0, hi1, hi2, v
        cdef double ccx, ccy, ccz, rad, d2, dx, dy, dz
        cdef Py_ssize_t oid
        cdef int64_t key, tag
        cdef double sq, so, tol, d
        cdef object prev
        cdef bint hit
        while q_from < n_seg:
            q_to = q_from + chunk
            if q_to > n_seg:
                q_to = n_seg
            lo0 = hi0 = qpts[q_from, 0]
            lo1 = hi1 = qpts[q_from, 1]
            lo2 = hi2 = qpts[q_from, 2]
            for i in range(q_from + 1, q_to + 1):
                v = qpts[i, 0]
                if v < lo0: lo0 = v
                if v > hi0: hi0 = v
                v = qpts[i, 1]
                if v < lo1: lo1 = v
                if v > hi1: hi1 = v
                v = qpts[i, 2]
                if v < lo2: lo2 = v
                if v > hi2: hi2 = v
            ccx = 0.5 * (lo0 + hi0)
            ccy = 0.5 * (lo1 + hi1)
            ccz = 0.5 * (lo2 + hi2)
            rad = 0.0
            for i in range(q_from, q_to + 1):
                dx = qpts[i, 0] - ccx
                dy = qpts[i, 1] - ccy
                dz = qpts[i, 2] - ccz
                d2 = sqrt(dx * dx + dy * dy + dz * dz)
                if d2 > rad:
                    rad = d2
            n_cand = self._gather(ccx, ccy, ccz, rad, self.lvl_lo)
            for ci in range(n_cand):
                oid = self._cand[ci]
                tag = self._tag[oid]
                if tag == skip_tag:
                    continue
                dx = ccx - self._cen[oid, 0]
                dy = ccy - self._cen[oid, 1]
                dz = ccz - self._cen[oid, 2]
                if sqrt(dx * dx + dy * dy + dz * dz) > rad + self._rad[oid]:
                    continue
                key = (tag << 20) | self._aux[oid]
                for qi in range(q_from, q_to):
                    prev = found.get(key)
                    if prev is not None and <Py_ssize_t>prev <= qi:
                        break
                    sq = qscl[qi]
                    hit = False
                    for oj in range(self._soff[oid], self._soff[oid + 1]):
                        so = self._scl[oj]
                        tol = self.h * (sq if sq < so else so)
                        k = self._off[oid] + (oj - self._soff[oid])
                        d = _seg_seg(
                            qpts[qi, 0], qpts[qi, 1], qpts[qi, 2],
                            qpts[qi + 1, 0], qpts[qi + 1, 1], qpts[qi + 1, 2],
                            self._pts[k, 0], self._pts[k, 1], self._pts[k, 2],
                            self._pts[k + 1, 0], self._pts[k + 1, 1],
                            self._pts[k + 1, 2])
                        if d <= tol:
                            hit = True
                            break
                    if hit:
                        found[key] = qi
                        if first_hit_only:
                            return found
                        break
            q_from = q_to
        return found

    def collect_self_edges(self, tag_lo, tag_hi):
        """Contact pairs (i, j), i < j, among objects with tags in range."""
        if self._dirty:
            self._rebuild()
        cdef int64_t t_lo = int(tag_lo), t_hi = int(tag_hi)
        cdef set pairs = set()
        cdef Py_ssize_t oid, ci, cand, qi, oj, kq, ko
        cdef Py_ssize_t n_cand
        cdef int64_t ti, tj
        cdef double dx, dy, dz, sq, so, tol, d
        cdef bint hit
        cdef tuple key
        for oid in range(self._tag.shape[0]):
            ti = self._tag[oid]
            if ti < t_lo or ti >= t_hi:
                continue
            n_cand = self._gather(self._cen[oid, 0], self._cen[oid, 1],
                                  self._cen[oid, 2], self._rad[oid],
                                  self._lvl[oid])
            for ci in range(n_cand):
                cand = self._cand[ci]
                tj = self._tag[cand]
                if tj == ti or tj < t_lo or tj >= t_hi:
                    continue
                key = (ti, tj) if ti < tj else (tj, ti)
                if key in pairs:
                    continue
                dx = self._cen[oid, 0] - self._cen[cand, 0]
                dy = self._cen[oid, 1] - self._cen[cand, 1]
                dz = self._cen[oid, 2] - self._cen[cand, 2]
                if sqrt(dx * dx + dy * dy + dz * dz) \
                        > self._rad[oid] + self._rad[cand]:
                    continue
                hit = False
                for qi in range(self._soff[oid], self._soff[oid + 1]):
                    sq = self._scl[qi]
                    kq = self._off[oid] + (qi - self._soff[oid])
                    for oj in range(self._soff[cand], self._soff[cand + 1]):
                        so = self._scl[oj]
                        tol = self.h * (sq if sq < so else so)
                        ko = self._off[cand] + (oj - self._soff[cand])
                        d = _seg_seg(
                            self._pts[kq, 0], self._pts[kq, 1],
                            self._pts[kq, 2],
                            self._pts[kq + 1, 0], self._pts[kq + 1, 1],
                            self._pts[kq + 1, 2],
                            self._pts[ko, 0], self._pts[ko, 1],
                            self._pts[ko, 2],
                            self._pts[ko + 1, 0], self._pts[ko + 1, 1],
                            self._pts[ko + 1, 2])
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
        return np.ascontiguousarray(arr[:, 0]), np.ascontiguousarray(arr[:, 1])


# ---------------------------------------------------------------------------
# walkers


def walk_out_block(double[::1] sf, int64_t[::1] si, double[::1] grid_radii,
                   double[:, ::1] normals, double[::1] uniforms,
                   double[::1] out_t, double[:, ::1] out_xyz,
                   int64_t[::1] cross_rows):
    """See _pycore.walk_out_block; identical contract and arithmetic."""
    cdef double x = sf[_SF_X], y = sf[_SF_Y], z = sf[_SF_Z]
    cdef double t = sf[_SF_T], r_cur = sf[_SF_R]
    cdef double delta = sf[_SF_DELTA], r_lo = sf[_SF_RLO]
    cdef double budget = sf[_SF_BUDGET]
    cdef Py_ssize_t next_g = si[_SI_NEXT_GRID]
    cdef int adaptive = <int>si[_SI_ADAPTIVE]
    cdef int64_t steps = si[_SI_STEPS]
    cdef int exempt = <int>si[_SI_FIRST_EXEMPT]
    cdef Py_ssize_t g_count = grid_radii.shape[0]
    cdef Py_ssize_t nmax = normals.shape[0]
    cdef Py_ssize_t out_cap = out_t.shape[0]
    cdef int status = _W_RUNNING
    cdef Py_ssize_t row = 0, iu = 0, i = 0
    cdef double s, dt, sd, xn, yn, zn, rn, d1, d2, lam, u
    cdef double cx, cy, cz, cr, f, R
    with nogil:
        while i < nmax:
            if row + g_count - next_g + 2 > out_cap:
                break
            if adaptive:
                s = r_cur if r_cur > 1.0 else 1.0
            else:
                s = 1.0
            dt = delta * s * s
            if t + dt > budget:
                status = _W_BUDGET
                break
            sd = sqrt(dt)
            xn = x + sd * normals[i, 0]
            yn = y + sd * normals[i, 1]
            zn = z + sd * normals[i, 2]
            i += 1
            rn = sqrt(xn * xn + yn * yn + zn * zn)
            if r_lo > 0.0:
                d1 = r_cur - r_lo
                d2 = rn - r_lo
                lam = -1.0
                if d2 <= 0.0:
                    lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
                elif (not exempt) and d1 * d2 < _GATE * dt:
                    u = uniforms[iu]
                    iu += 1
                    if u < exp(-2.0 * d1 * d2 / dt):
                        lam = d1 / (d1 + d2)
                if lam >= 0.0:
                    cx = x + lam * (xn - x)
                    cy = y + lam * (yn - y)
                    cz = z + lam * (zn - z)
                    cr = sqrt(cx * cx + cy * cy + cz * cz)
                    f = r_lo / cr if cr > 0.0 else 0.0
                    out_t[row] = t + lam * dt
                    out_xyz[row, 0] = cx * f
                    out_xyz[row, 1] = cy * f
                    out_xyz[row, 2] = cz * f
                    row += 1
                    steps += 1
                    status = _W_KILLED
                    break
            while next_g < g_count:
                R = grid_radii[next_g]
                d1 = R - r_cur
                d2 = R - rn
                lam = -1.0
                if d2 <= 0.0:
                    lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
                elif exempt:
                    break
                elif d1 * d2 < _GATE * dt:
                    u = uniforms[iu]
                    iu += 1
                    if u < exp(-2.0 * d1 * d2 / dt):
                        lam = d1 / (d1 + d2)
                    else:
                        break
                else:
                    break
                cx = x + lam * (xn - x)
                cy = y + lam * (yn - y)
                cz = z + lam * (zn - z)
                cr = sqrt(cx * cx + cy * cy + cz * cz)
                f = R / cr if cr > 0.0 else 0.0
                out_t[row] = t + lam * dt
                out_xyz[row, 0] = cx * f
                out_xyz[row, 1] = cy * f
                out_xyz[row, 2] = cz * f
                cross_rows[next_g] = row
                row += 1
                next_g += 1
                if next_g == g_count:
                    status = _W_HIT
                    break
            if status != _W_RUNNING:
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
    sf[_SF_X] = x; sf[_SF_Y] = y; sf[_SF_Z] = z
    sf[_SF_T] = t; sf[_SF_R] = r_cur
    si[_SI_NEXT_GRID] = next_g
    si[_SI_STATUS] = status
    si[_SI_STEPS] = steps
    si[_SI_FIRST_EXEMPT] = exempt
    return row, i, iu


def walk_in_block(double[::1] sf, int64_t[::1] si, r_target_in, r_hi_in,
                  double[:, ::1] normals, double[::1] uniforms,
                  double[::1] out_t, double[:, ::1] out_xyz):
    """See _pycore.walk_in_block; identical contract and arithmetic."""
    cdef double x = sf[_SF_X], y = sf[_SF_Y], z = sf[_SF_Z]
    cdef double t = sf[_SF_T], r_cur = sf[_SF_R]
    cdef double delta = sf[_SF_DELTA]
    cdef double budget = sf[_SF_BUDGET]
    cdef int adaptive = <int>si[_SI_ADAPTIVE]
    cdef int64_t steps = si[_SI_STEPS]
    cdef int exempt = <int>si[_SI_FIRST_EXEMPT]
    cdef double r_target = float(r_target_in)
    cdef double r_hi = float(r_hi_in)
    cdef Py_ssize_t nmax = normals.shape[0]
    cdef Py_ssize_t out_cap = out_t.shape[0]
    cdef int status = _W_RUNNING
    cdef Py_ssize_t row = 0, iu = 0, i = 0
    cdef double s, dt, sd, xn, yn, zn, rn, d1, d2, lam, u
    cdef double cx, cy, cz, cr, f
    with nogil:
        while i < nmax:
            if row + 2 > out_cap:
                break
            if adaptive:
                s = r_cur if r_cur > 1.0 else 1.0
            else:
                s = 1.0
            dt = delta * s * s
            if t + dt > budget:
                status = _W_BUDGET
                break
            sd = sqrt(dt)
            xn = x + sd * normals[i, 0]
            yn = y + sd * normals[i, 1]
            zn = z + sd * normals[i, 2]
            i += 1
            rn = sqrt(xn * xn + yn * yn + zn * zn)
            d1 = r_cur - r_target
            d2 = rn - r_target
            lam = -1.0
            if d2 <= 0.0:
                lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
            elif (not exempt) and d1 * d2 < _GATE * dt:
                u = uniforms[iu]
                iu += 1
                if u < exp(-2.0 * d1 * d2 / dt):
                    lam = d1 / (d1 + d2)
            if lam >= 0.0:
                cx = x + lam * (xn - x)
                cy = y + lam * (yn - y)
                cz = z + lam * (zn - z)
                cr = sqrt(cx * cx + cy * cy + cz * cz)
                f = r_target / cr if cr > 0.0 else 0.0
                out_t[row] = t + lam * dt
                out_xyz[row, 0] = cx * f
                out_xyz[row, 1] = cy * f
                out_xyz[row, 2] = cz * f
                row += 1
                steps += 1
                status = _W_HIT
                break
            if r_hi > 0.0:
                d1 = r_hi - r_cur
                d2 = r_hi - rn
                lam = -1.0
                if d2 <= 0.0:
                    lam = d1 / (d1 - d2) if d1 > 0.0 else 0.0
                elif (not exempt) and d1 * d2 < _GATE * dt:
                    u = uniforms[iu]
                    iu += 1
                    if u < exp(-2.0 * d1 * d2 / dt):
                        lam = d1 / (d1 + d2)
                if lam >= 0.0:
                    cx = x + lam * (xn - x)
                    cy = y + lam * (yn - y)
                    cz = z + lam * (zn - z)
                    cr = sqrt(cx * cx + cy * cy + cz * cz)
                    f = r_hi / cr if cr > 0.0 else 0.0
                    out_t[row] = t + lam * dt
                    out_xyz[row, 0] = cx * f
                    out_xyz[row, 1] = cy * f
                    out_xyz[row, 2] = cz * f
                    row += 1
                    steps += 1
                    status = _W_KILLED
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
    sf[_SF_X] = x; sf[_SF_Y] = y; sf[_SF_Z] = z
    sf[_SF_T] = t; sf[_SF_R] = r_cur
    si[_SI_STATUS] = status
    si[_SI_STEPS] = steps
    si[_SI_FIRST_EXEMPT] = exempt
    return row, i, iu


# ---------------------------------------------------------------------------
# cluster attachment sweep


def attached_sweep(birth_in, mark_in, alpha_frac, edges_i_in, edges_j_in,
                   seed_loop_in, seed_slot_in, n_slots):
    """See _pycore.attached_sweep; identical contract."""
    birth_np = np.ascontiguousarray(birth_in, dtype=np.int64)
    mark_np = np.ascontiguousarray(mark_in, dtype=np.float64)
    ei_np = np.ascontiguousarray(edges_i_in, dtype=np.int64)
    ej_np = np.ascontiguousarray(edges_j_in, dtype=np.int64)
    sl_np = np.ascontiguousarray(seed_loop_in, dtype=np.int64)
    ss_np = np.ascontiguousarray(seed_slot_in, dtype=np.int64)
    cdef Py_ssize_t n = birth_np.shape[0]
    cdef Py_ssize_t ns = int(n_slots)
    out_np = np.zeros((ns, n), dtype=np.uint8)
    if n == 0:
        return out_np
    cdef double af = float(alpha_frac)
    cdef int64_t[::1] birth = birth_np
    cdef double[::1] mark = mark_np
    cdef int64_t[::1] ei = ei_np
    cdef int64_t[::1] ej = ej_np
    cdef int64_t[::1] sl = sl_np
    alive_np = np.where(np.asarray(mark_np) < af, birth_np, ns)
    alive_np = np.ascontiguousarray(alive_np, dtype=np.int64)
    cdef int64_t[::1] alive_at = alive_np
    parent_np = np.arange(n, dtype=np.int64)
    cdef int64_t[::1] parent = parent_np
    seed_np = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] has_seed = seed_np
    cdef unsigned char[:, ::1] out = out_np

    cdef Py_ssize_t n_e = ei_np.shape[0], n_s = sl_np.shape[0]
    e_act_np = None
    e_order_np = None
    if n_e:
        e_act_np = np.maximum(alive_np[ei_np], alive_np[ej_np])
        e_order_np = np.argsort(e_act_np, kind="stable")
    s_act_np = None
    s_order_np = None
    if n_s:
        s_act_np = np.maximum(alive_np[sl_np], ss_np)
        s_order_np = np.argsort(s_act_np, kind="stable")
    cdef int64_t[::1] e_act = e_act_np if n_e else parent_np[:0]
    cdef int64_t[::1] e_order = e_order_np if n_e else parent_np[:0]
    cdef int64_t[::1] s_act = s_act_np if n_s else parent_np[:0]
    cdef int64_t[::1] s_order = s_order_np if n_s else parent_np[:0]
    cdef Py_ssize_t r, eix = 0, six = 0, k, a, b, ra, rb, root
    with nogil:
        for r in range(ns):
            while eix < n_e and e_act[e_order[eix]] <= r:
                k = e_order[eix]
                a = ei[k]
                while parent[a] != a:
                    parent[a] = parent[parent[a]]
                    a = parent[a]
                ra = a
                b = ej[k]
                while parent[b] != b:
                    parent[b] = parent[parent[b]]
                    b = parent[b]
                rb = b
                if ra != rb:
                    if has_seed[rb] and not has_seed[ra]:
                        parent[ra] = rb
                    else:
                        parent[rb] = ra
                eix += 1
            while six < n_s and s_act[s_order[six]] <= r:
                a = sl[s_order[six]]
                while parent[a] != a:
                    parent[a] = parent[parent[a]]
                    a = parent[a]
                has_seed[a] = 1
                six += 1
            for k in range(n):
                if alive_at[k] <= r:
                    a = k
                    while parent[a] != a:
                        parent[a] = parent[parent[a]]
                        a = parent[a]
                    if has_seed[a]:
                        out[r, k] = 1
    return out_np


# ---------------------------------------------------------------------------
# crossing-scan helpers (float32 traces)


cdef inline double _r32(float[:, ::1] pts, double cx, double cy, double cz,
                        Py_ssize_t i) nogil:
    cdef double dx = <double>pts[i, 0] - cx
    cdef double dy = <double>pts[i, 1] - cy
    cdef double dz = <double>pts[i, 2] - cz
    return sqrt(dx * dx + dy * dy + dz * dz)


def scan_back_geq(float[:, ::1] pts, center, R, i_from):
    """Largest index j <= i_from with |pts[j]-center| >= R, else -1."""
    cdef double cx = float(center[0]), cy = float(center[1])
    cdef double cz = float(center[2])
    cdef double rr = float(R)
    cdef Py_ssize_t j = int(i_from)
    with nogil:
        while j >= 0:
            if _r32(pts, cx, cy, cz, j) >= rr:
                break
            j -= 1
    return j


def scan_fwd_leq(float[:, ::1] pts, center, R, i_from):
    """Smallest index j >= i_from with |pts[j]-center| <= R, else -1."""
    cdef double cx = float(center[0]), cy = float(center[1])
    cdef double cz = float(center[2])
    cdef double rr = float(R)
    cdef Py_ssize_t j = int(i_from)
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t res = -1
    with nogil:
        while j < n:
            if _r32(pts, cx, cy, cz, j) <= rr:
                res = j
                break
            j += 1
    return res


def scan_fwd_geq(float[:, ::1] pts, center, R, i_from):
    """Smallest index j >= i_from with |pts[j]-center| >= R, else -1."""
    cdef double cx = float(center[0]), cy = float(center[1])
    cdef double cz = float(center[2])
    cdef double rr = float(R)
    cdef Py_ssize_t j = int(i_from)
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t res = -1
    with nogil:
        while j < n:
            if _r32(pts, cx, cy, cz, j) >= rr:
                res = j
                break
            j += 1
    return res


def gap_exceeds(float[:, ::1] pts, center, R, i0, i1):
    """1 if any index in (i0, i1) has |pts[j]-center| >= R (early exit)."""
    cdef double cx = float(center[0]), cy = float(center[1])
    cdef double cz = float(center[2])
    cdef double rr = float(R)
    cdef Py_ssize_t j0 = int(i0), j1 = int(i1), j
    cdef int res = 0
    with nogil:
        for j in range(j0 + 1, j1):
            if _r32(pts, cx, cy, cz, j) >= rr:
                res = 1
                break
    return res


# ---------------------------------------------------------------------------
# annulus-piece disjointness


def piece_pair_disjoint(p1, p2, center, tol_floor, tol_rel):
    """See _pycore.piece_pair_disjoint; identical contract."""
    a_np = np.ascontiguousarray(p1, dtype=np.float64)
    b_np = np.ascontiguousarray(p2, dtype=np.float64)
    cdef double cx = float(center[0]), cy = float(center[1])
    cdef double cz = float(center[2])
    cdef double tf = float(tol_floor), tr = float(tol_rel)
    if a_np.shape[0] < 2 or b_np.shape[0] < 2:
        return 1
    cdef double[:, ::1] a = a_np
    cdef double[:, ::1] b = b_np
    da_np = np.sqrt(((a_np - np.array([cx, cy, cz])) ** 2).sum(axis=1))
    db_np = np.sqrt(((b_np - np.array([cx, cy, cz])) ** 2).sum(axis=1))
    dsa_np = np.minimum(da_np[:-1], da_np[1:])
    dsb_np = np.minimum(db_np[:-1], db_np[1:])
    cdef double[::1] dsa = np.ascontiguousarray(dsa_np)
    cdef double[::1] dsb = np.ascontiguousarray(dsb_np)
    sa_np, loa_np, hia_np = _chunk_bounds_c(a)
    sb_np, lob_np, hib_np = _chunk_bounds_c(b)
    cdef int64_t[::1] sa = sa_np
    cdef int64_t[::1] sb = sb_np
    cdef double[:, ::1] loa = loa_np, hia = hia_np
    cdef double[:, ::1] lob = lob_np, hib = hib_np
    cdef Py_ssize_t i, j, u, v
    cdef double da_max, db_max, dmin, tol_cap, d1, d2, dm, tol, d
    cdef int res = 1
    with nogil:
        for i in range(loa.shape[0]):
            da_max = dsa[sa[i]]
            for u in range(sa[i] + 1, sa[i + 1]):
                if dsa[u] > da_max:
                    da_max = dsa[u]
            for j in range(lob.shape[0]):
                db_max = dsb[sb[j]]
                for v in range(sb[j] + 1, sb[j + 1]):
                    if dsb[v] > db_max:
                        db_max = dsb[v]
                dmin = da_max if da_max < db_max else db_max
                tol_cap = tr * dmin
                if tol_cap < tf:
                    tol_cap = tf
                if _bbox_dist_c(&loa[i, 0], &hia[i, 0],
                                &lob[j, 0], &hib[j, 0]) > tol_cap:
                    continue
                for u in range(sa[i], sa[i + 1]):
                    for v in range(sb[j], sb[j + 1]):
                        d1 = dsa[u]
                        d2 = dsb[v]
                        dm = d1 if d1 < d2 else d2
                        tol = tr * dm
                        if tol < tf:
                            tol = tf
                        d = _seg_seg(
                            a[u, 0], a[u, 1], a[u, 2],
                            a[u + 1, 0], a[u + 1, 1], a[u + 1, 2],
                            b[v, 0], b[v, 1], b[v, 2],
                            b[v + 1, 0], b[v + 1, 1], b[v + 1, 2])
                        if d <= tol:
                            res = 0
                            break
                    if res == 0:
                        break
                if res == 0:
                    break
            if res == 0:
                break
    return res
