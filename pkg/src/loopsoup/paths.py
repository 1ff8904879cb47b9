"""Brownian path sampling on the logarithmic radius grid.

The workhorse is an Euler walk whose step variance is tied to the local
scale, dt = delta * max(1, |x|)^2, so the cost of reaching radius e^rho
grows linearly in rho instead of exponentially, and the spatial
resolution at radius R is sqrt(delta) * R, matching the tolerance model
used everywhere else.  First crossings of the reference spheres are
resolved inside a step with a Brownian-bridge correction and snapped onto
the sphere, so stopped paths end exactly on their target sphere and carry
exact crossing indices for every intermediate sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._kernels._pycore import (SF_SIZE, SI_SIZE, SF_X, SF_Y, SF_Z, SF_T,
                               SF_R, SF_DELTA, SF_RLO, SF_BUDGET,
                               SI_NEXT_GRID, SI_STATUS, SI_ADAPTIVE,
                               SI_STEPS, SI_FIRST_EXEMPT,
                               W_RUNNING, W_HIT, W_KILLED, W_BUDGET)
from .rng import RngStream

__all__ = [
    "W_RUNNING", "W_HIT", "W_KILLED", "W_BUDGET",
    "WalkFeeder", "SampledPath", "heat_kernel", "green_function",
    "sphere_hit_prob", "mean_exit_time", "sample_bridge", "bridge_batch",
    "walk_outward", "sample_bm_to_sphere", "walk_inward",
    "sample_annulus_excursion", "invert_points", "uniform_sphere_point",
    "path_seg_scales",
]


# ---------------------------------------------------------------------------
# closed forms


def heat_kernel(t: float, x, y) -> float:
    """3D Brownian transition density p_t(x, y)."""
    if t <= 0.0:
        raise ValueError("t must be positive")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    q = float(d @ d)
    return (2.0 * math.pi * t) ** -1.5 * math.exp(-q / (2.0 * t))


def green_function(x, y) -> float:
    """Occupation density of 3D Brownian motion, 1 / (2 pi |x - y|)."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    n = math.sqrt(float(d @ d))
    if n == 0.0:
        raise ValueError("green function diverges at coincident points")
    return 1.0 / (2.0 * math.pi * n)


def sphere_hit_prob(r_from: float, r_sphere: float) -> float:
    """P(hit sphere of radius r_sphere before escaping), from |x|=r_from."""
    if not 0.0 < r_sphere <= r_from:
        raise ValueError("need 0 < r_sphere <= r_from")
    return r_sphere / r_from


def mean_exit_time(rho: float, r_start: float = 1.0) -> float:
    """E[first hitting time of radius e^rho] from |x| = r_start."""
    rr = math.exp(2.0 * rho)
    return (rr - r_start * r_start) / 3.0


# ---------------------------------------------------------------------------
# random-number plumbing


class WalkFeeder:
    """Sequential normal/uniform buffers feeding the walker kernels.

    The kernels consume a variable number of draws per call; unused
    entries stay buffered, so results never depend on the block size.
    Uniform draws are provisioned at ``ratio`` per normal row, an upper
    bound on what one step can consume.
    """

    def __init__(self, stream: RngStream, block: int = 8192,
                 ratio: int = 10):
        # separate substreams: a refill of one buffer must not shift the
        # values served by the other, or results would depend on block
        self._gen_n = stream.child(1).generator()
        self._gen_u = stream.child(2).generator()
        self._block = int(block)
        self._ratio = int(ratio)
        self._norm = np.empty((0, 3))
        self._unif = np.empty(0)
        self._ni = 0
        self._ui = 0

    def views(self, min_rows: int = 64):
        if self._norm.shape[0] - self._ni < min_rows:
            fresh = self._gen_n.standard_normal(
                (max(self._block, min_rows), 3))
            self._norm = np.concatenate([self._norm[self._ni:], fresh])
            self._ni = 0
        need_u = self._ratio * (self._norm.shape[0] - self._ni)
        if self._unif.shape[0] - self._ui < need_u:
            fresh = self._gen_u.random(max(self._block * self._ratio, need_u))
            self._unif = np.concatenate([self._unif[self._ui:], fresh])
            self._ui = 0
        return self._norm[self._ni:], self._unif[self._ui:]

    def consume(self, n_norm: int, n_unif: int):
        self._ni += n_norm
        self._ui += n_unif

    def normal_rows(self, k: int) -> np.ndarray:
        """k whole (3,) rows off the same stream (for direction draws)."""
        while self._norm.shape[0] - self._ni < k:
            self.views(min_rows=k)
        out = self._norm[self._ni:self._ni + k].copy()
        self._ni += k
        return out


# ---------------------------------------------------------------------------
# sampled paths


@dataclass
class SampledPath:
    """A discretized path with its sphere-crossing bookkeeping.

    pts[cross_rows[g]] lies exactly on the sphere of log-radius
    rho_grid[g]; cross_rows[g] == -1 when that sphere was never reached.
    """

    times: np.ndarray
    pts: np.ndarray
    status: int
    rho_grid: np.ndarray
    cross_rows: np.ndarray
    delta: float
    steps: int

    @property
    def n_points(self) -> int:
        return self.pts.shape[0]

    def reached(self, g: int) -> bool:
        return self.cross_rows[g] >= 0

    def crossing_time(self, g: int) -> float:
        row = self.cross_rows[g]
        if row < 0:
            raise ValueError(f"sphere {g} was never crossed")
        return float(self.times[row])

    def stopped_at(self, g: int) -> np.ndarray:
        """Path truncated at its first crossing of sphere g (inclusive)."""
        row = self.cross_rows[g]
        if row < 0:
            raise ValueError(f"sphere {g} was never crossed")
        return self.pts[:row + 1]


def _drive_walker(kernel, sf, si, feeder, max_steps, out_chunks_t,
                  out_chunks_xyz, cross_rows_global, extra_args):
    """Run one walker kernel to completion, handling block refills."""
    g_count = cross_rows_global.shape[0] if cross_rows_global is not None else 0
    rows_total = sum(c.shape[0] for c in out_chunks_t)
    block_cross = np.full(max(g_count, 1), -1, dtype=np.int64)
    while si[SI_STATUS] == W_RUNNING and si[SI_STEPS] < max_steps:
        norms, unifs = feeder.views()
        cap = norms.shape[0] + g_count + 4
        out_t = np.empty(cap)
        out_xyz = np.empty((cap, 3))
        block_cross[:] = -1
        if cross_rows_global is not None:
            rows, nn, nu = kernel(sf, si, extra_args, norms, unifs,
                                  out_t, out_xyz, block_cross)
        else:
            rows, nn, nu = kernel(sf, si, extra_args[0], extra_args[1],
                                  norms, unifs, out_t, out_xyz)
        feeder.consume(nn, nu)
        if rows:
            out_chunks_t.append(out_t[:rows].copy())
            out_chunks_xyz.append(out_xyz[:rows].copy())
        if cross_rows_global is not None:
            for g in range(g_count):
                if block_cross[g] >= 0:
                    cross_rows_global[g] = rows_total + block_cross[g]
        rows_total += rows
        if rows == 0 and nn == 0 and si[SI_STATUS] == W_RUNNING:
            raise RuntimeError("walker made no progress")
    if si[SI_STATUS] == W_RUNNING:
        si[SI_STATUS] = W_BUDGET


def _new_state(x0, t0, delta, r_lo, budget, scale_adaptive, first_exempt):
    x0 = np.asarray(x0, dtype=np.float64)
    sf = np.zeros(SF_SIZE)
    si = np.zeros(SI_SIZE, dtype=np.int64)
    sf[SF_X], sf[SF_Y], sf[SF_Z] = x0
    sf[SF_T] = t0
    sf[SF_R] = math.sqrt(float(x0 @ x0))
    sf[SF_DELTA] = delta
    sf[SF_RLO] = r_lo
    sf[SF_BUDGET] = budget
    si[SI_ADAPTIVE] = 1 if scale_adaptive else 0
    si[SI_FIRST_EXEMPT] = 1 if first_exempt else 0
    return sf, si


def walk_outward(x0, t0, rho_grid, delta, feeder, *, scale_adaptive=True,
                 r_lo=0.0, budget=math.inf, max_steps=50_000_000,
                 first_exempt=False) -> SampledPath:
    """Walk from x0 until the largest sphere in rho_grid is hit.

    rho_grid must be ascending log-radii, all above log|x0|.  The
    returned path includes x0 as its first row.
    """
    rho_grid = np.asarray(rho_grid, dtype=np.float64)
    radii = np.exp(rho_grid)
    sf, si = _new_state(x0, t0, delta, r_lo, budget, scale_adaptive,
                        first_exempt)
    x0 = np.asarray(x0, dtype=np.float64)
    chunks_t = [np.array([t0])]
    chunks_xyz = [x0[None, :].copy()]
    cross = np.full(radii.shape[0], -1, dtype=np.int64)
    _drive_walker(K.walk_out_block, sf, si, feeder, max_steps,
                  chunks_t, chunks_xyz, cross, radii)
    return SampledPath(
        times=np.concatenate(chunks_t),
        pts=np.concatenate(chunks_xyz, axis=0),
        status=int(si[SI_STATUS]),
        rho_grid=rho_grid,
        cross_rows=cross,
        delta=delta,
        steps=int(si[SI_STEPS]))


def sample_bm_to_sphere(stream: RngStream, rho_grid, delta, *,
                        start=None, scale_adaptive=True,
                        max_steps=50_000_000, block=8192) -> SampledPath:
    """Brownian path from the unit sphere to the largest grid sphere.

    The start point is uniform on the unit sphere unless given.
    """
    feeder = WalkFeeder(stream, block=block)
    if start is None:
        start = uniform_sphere_point(feeder, 1.0)
    return walk_outward(start, 0.0, rho_grid, delta, feeder,
                        scale_adaptive=scale_adaptive, max_steps=max_steps)


def walk_inward(x0, t0, r_target, delta, feeder, *, r_kill=0.0,
                scale_adaptive=True, budget=math.inf,
                max_steps=50_000_000, first_exempt=False) -> SampledPath:
    """Walk from x0 until |x| = r_target below, killed at r_kill above."""
    sf, si = _new_state(x0, t0, delta, 0.0, budget, scale_adaptive,
                        first_exempt)
    x0 = np.asarray(x0, dtype=np.float64)
    chunks_t = [np.array([t0])]
    chunks_xyz = [x0[None, :].copy()]
    _drive_walker(K.walk_in_block, sf, si, feeder, max_steps,
                  chunks_t, chunks_xyz, None, (float(r_target), float(r_kill)))
    status = int(si[SI_STATUS])
    n_rows = sum(c.shape[0] for c in chunks_t)
    return SampledPath(
        times=np.concatenate(chunks_t),
        pts=np.concatenate(chunks_xyz, axis=0),
        status=status,
        rho_grid=np.array([math.log(r_target)]),
        cross_rows=np.array([n_rows - 1 if status == W_HIT else -1],
                            dtype=np.int64),
        delta=delta,
        steps=int(si[SI_STEPS]))


def uniform_sphere_point(feeder: WalkFeeder, radius: float) -> np.ndarray:
    """Uniform point on the sphere of the given radius (same stream)."""
    while True:
        v = feeder.normal_rows(1)[0]
        n = math.sqrt(float(v @ v))
        if n > 0.0:
            return v * (radius / n)


def sample_annulus_excursion(stream_or_feeder, r_in, r_out, delta, *,
                             scale_adaptive=True, max_attempts=100_000,
                             max_steps=50_000_000):
    """Excursion of the annulus: from the inner sphere to the outer one.

    Starts at a uniform point of the inner sphere and rejects any attempt
    that returns to the inner sphere before reaching the outer one.  The
    first step is exempt from the bridge test (push-off from the
    boundary); afterwards the inner sphere kills.  Returns (path,
    attempts).
    """
    if not 0.0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    feeder = (stream_or_feeder if isinstance(stream_or_feeder, WalkFeeder)
              else WalkFeeder(stream_or_feeder))
    rho = np.array([math.log(r_out)])
    for attempt in range(1, max_attempts + 1):
        start = uniform_sphere_point(feeder, r_in)
        path = walk_outward(start, 0.0, rho, delta, feeder,
                            scale_adaptive=scale_adaptive, r_lo=r_in,
                            max_steps=max_steps, first_exempt=True)
        if path.status == W_HIT:
            return path, attempt
        if path.status != W_KILLED:
            raise RuntimeError(f"excursion walk ended with {path.status}")
    raise RuntimeError(f"no excursion accepted in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# bridges


def sample_bridge(a, b, duration, n_steps, gen) -> np.ndarray:
    """Brownian bridge from a to b over the given duration, n_steps steps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = duration / n_steps
    z = gen.standard_normal((n_steps, 3)) * math.sqrt(dt)
    w = np.cumsum(z, axis=0)
    frac = (np.arange(1, n_steps + 1) / n_steps)[:, None]
    x = a + w - frac * (w[-1] - (b - a))
    out = np.empty((n_steps + 1, 3))
    out[0] = a
    out[1:] = x
    out[-1] = b
    return out


def bridge_batch(roots, durations, n_steps, gen) -> np.ndarray:
    """Closed bridges root -> root, one per row of roots, shared n_steps.

    Returns (B, n_steps + 1, 3); rows 0 and n_steps equal the root
    exactly.  Durations vary per bridge.
    """
    roots = np.asarray(roots, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.float64)
    bsz = roots.shape[0]
    dt = durations / n_steps
    z = gen.standard_normal((bsz, n_steps, 3))
    z *= np.sqrt(dt)[:, None, None]
    w = np.cumsum(z, axis=1)
    frac = (np.arange(1, n_steps + 1) / n_steps)[None, :, None]
    x = roots[:, None, :] + w - frac * w[:, -1:, :]
    out = np.empty((bsz, n_steps + 1, 3))
    out[:, 0] = roots
    out[:, 1:] = x
    out[:, -1] = roots
    return out


# ---------------------------------------------------------------------------
# misc transforms


def invert_points(pts) -> np.ndarray:
    """Spatial inversion x -> x / |x|^2, rowwise."""
    a = np.asarray(pts, dtype=np.float64)
    q = (a * a).sum(axis=1)
    if np.any(q == 0.0):
        raise ValueError("inversion undefined at the origin")
    return a / q[:, None]


def path_seg_scales(pts, cap=math.inf) -> np.ndarray:
    """Per-segment scale min(max(1, |midpoint|), cap) for tolerance rules."""
    a = np.asarray(pts, dtype=np.float64)
    mid = 0.5 * (a[:-1] + a[1:])
    s = np.sqrt((mid * mid).sum(axis=1))
    np.maximum(s, 1.0, out=s)
    if np.isfinite(cap):
        np.minimum(s, cap, out=s)
    return s
