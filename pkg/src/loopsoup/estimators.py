"""Monte Carlo estimators for soup-enlarged non-intersection events.

The central quantity is the conditional avoidance probability of one
fresh Brownian path against an enlarged obstacle: k paths run from the
unit sphere out to the sphere of log-radius r, a loop soup restricted to
that ball (loops leaving the unit ball), and every soup cluster touching
the paths.  The estimators below compute

* the nested Monte Carlo estimate of E[Z_r^lambda], where Z_r is the
  conditional avoidance probability given the environment, with a
  two-batch extrapolation that removes the O(1/m) inner-sample bias;
* a fixed-population splitting estimator for the lambda = 1 case that
  walks unit annuli one at a time and multiplies conditional survival
  ratios;
* separation statistics (endpoint gaps, gap-quantile curves, two-sided
  cone separation frequencies) among avoiding replicas;
* cone confinement decay rates for a path pinned near a sphere point.

Replica work is organized in blocks of per-replica sufficient
statistics; series are assembled from the ordered concatenation of
blocks, so any partition of the replica range reproduces the single-run
output bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import attached_sweep, polyline_point_distance
from .clusters import (avoidance_test, build_clusters, enlarge,
                       grid_from_objects, _loop_scales)
from .geometry import Cone, hit_tolerance
from .paths import (W_HIT, SampledPath, WalkFeeder, path_seg_scales,
                    sample_bm_to_sphere, uniform_sphere_point,
                    walk_outward)
from .rng import RngStream
from .soup import GradedSoupConfig, LoopSoup, birth_slots, \
    sample_soup_graded

__all__ = [
    "ExperimentConfig",
    "Environment",
    "EstimateCell",
    "EstimateSeries",
    "ZBlock",
    "sample_environment",
    "estimate_Z",
    "sample_z_block",
    "series_from_blocks",
    "estimate_p",
    "SplittingResult",
    "estimate_p_splitting",
    "CoupledZ",
    "coupled_replica",
    "coupled_series",
    "SeparationRow",
    "SeparationStats",
    "separation_stats",
    "ConeDecayFit",
    "cone_confinement_decay",
]

# separation cone width (chordal): wide enough that the tail-confinement
# events have frequencies measurable at a few hundred avoiding replicas
SEPARATION_APERTURE = 1.0

# confinement cone widths (chordal, inner strictly narrower than outer)
CONE_INNER_APERTURE = 1.2
CONE_OUTER_APERTURE = 1.6


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs of one estimation campaign.

    r_grid is strictly increasing and nonnegative; every lambda is
    positive.  inner_m is the half-batch size: each replica runs two
    independent inner batches of m paths.
    """

    alpha: float
    k: int
    lambda_list: tuple
    r_grid: tuple
    outer_n: int
    inner_m: int
    delta: float
    h: float
    seed: RngStream
    t_max: float = None
    scaled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lambda_list",
                           tuple(float(v) for v in self.lambda_list))
        object.__setattr__(self, "r_grid",
                           tuple(float(v) for v in self.r_grid))
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if not self.lambda_list or any(v <= 0.0 for v in self.lambda_list):
            raise ValueError("lambda values must be positive")
        if not self.r_grid or any(r < 0.0 for r in self.r_grid):
            raise ValueError("r_grid must be nonnegative")
        if any(b <= a for a, b in zip(self.r_grid, self.r_grid[1:])):
            raise ValueError("r_grid must be strictly increasing")
        if self.outer_n < 1 or self.inner_m < 1:
            raise ValueError("outer_n and inner_m must be at least 1")
        if not 0.0 < self.delta < 1.0 or self.h <= 0.0:
            raise ValueError("resolutions delta and h must be positive")
        if not isinstance(self.seed, RngStream):
            raise TypeError("seed must be an RngStream")


@dataclass(frozen=True, eq=False)
class Environment:
    """One sampled obstacle configuration at log-radius r."""

    r: float
    paths: tuple
    soup: object
    index: object = field(repr=False)
    enlargement: object = field(repr=False)
    delta: float = 0.0
    h: float = 0.0


def _graded_cfg(cfg, r):
    return GradedSoupConfig(alpha=cfg.alpha, rho_max=float(r),
                            delta=cfg.delta, h=cfg.h, t_max=cfg.t_max,
                            exclusion_radius=1.0)


def sample_environment(cfg, r, stream, *, rho_grid=None):
    """k paths from the unit sphere to S_r, the soup, its enlargement.

    Paths start at independent uniform points of the unit sphere and are
    stopped at their first crossing of the sphere of log-radius r; the
    soup is restricted to loops inside the r-ball that leave the unit
    ball.  At r = 0 the paths collapse to their start points and the
    soup is empty.
    """
    r = float(r)
    if r < 0.0:
        raise ValueError("r must be nonnegative")
    if rho_grid is None:
        rho_grid = np.array([r]) if r > 0.0 else np.zeros(0)
    rho_grid = np.asarray(rho_grid, dtype=np.float64)
    paths = []
    for j in range(cfg.k):
        ps = stream.child(2, j)
        if r == 0.0:
            x0 = uniform_sphere_point(WalkFeeder(ps), 1.0)
            paths.append(SampledPath(
                times=np.zeros(1), pts=x0[None, :], status=W_HIT,
                rho_grid=rho_grid, cross_rows=np.zeros(0, dtype=np.int64),
                delta=cfg.delta, steps=0))
        else:
            p = sample_bm_to_sphere(ps, rho_grid, cfg.delta)
            if p.status != W_HIT:
                raise RuntimeError(
                    f"path budget exhausted before S_{r} (status "
                    f"{p.status}, {p.steps} steps)")
            paths.append(p)
    soup = sample_soup_graded(_graded_cfg(cfg, r), stream.child(1))
    idx = build_clusters(soup, cfg.h, scaled=cfg.scaled)
    env = enlarge([p.pts for p in paths], idx)
    return Environment(r=r, paths=tuple(paths), soup=soup, index=idx,
                       enlargement=env, delta=cfg.delta, h=cfg.h)


def estimate_Z(env, inner_m, stream):
    """Fraction of fresh paths that avoid the enlarged obstacle.

    Fresh paths run from uniform unit-sphere points to S_r.  At r = 0
    the avoidance probability is reported as 1 by convention.
    """
    if env.r == 0.0:
        return 1.0
    grid = np.array([env.r])
    hits = 0
    for b in range(inner_m):
        p = sample_bm_to_sphere(stream.child(b), grid, env.delta)
        if avoidance_test(p.pts, env.enlargement):
            hits += 1
    return hits / inner_m


# ---------------------------------------------------------------------------
# direct nested estimator


@dataclass(frozen=True)
class ZBlock:
    """Per-replica conditional avoidance fractions for one replica range.

    z_a and z_b are the two independent half-batch estimates, shape
    (hi - lo, n_radii).  Blocks over disjoint ranges concatenate into
    the full campaign; all reporting happens on the concatenation, so
    the partition into blocks never changes the result.
    """

    lo: int
    hi: int
    z_a: np.ndarray
    z_b: np.ndarray


def sample_z_block(cfg, lo, hi):
    """Run replicas [lo, hi) of the direct estimator."""
    if not 0 <= lo < hi:
        raise ValueError("need 0 <= lo < hi")
    n_r = len(cfg.r_grid)
    z_a = np.ones((hi - lo, n_r))
    z_b = np.ones((hi - lo, n_r))
    for ri, r in enumerate(cfg.r_grid):
        for rep in range(lo, hi):
            env = sample_environment(cfg, r, cfg.seed.child(11, ri, rep))
            inner = cfg.seed.child(12, ri, rep)
            z_a[rep - lo, ri] = estimate_Z(env, cfg.inner_m,
                                           inner.child(0))
            z_b[rep - lo, ri] = estimate_Z(env, cfg.inner_m,
                                           inner.child(1))
    return ZBlock(lo=lo, hi=hi, z_a=z_a, z_b=z_b)


@dataclass(frozen=True)
class EstimateCell:
    r: float
    lam: float
    p_hat: float
    p_raw: float
    stderr: float
    outer_n: int
    inner_m: int
    n_avoiding: int
    z_mean: float


@dataclass(frozen=True)
class EstimateSeries:
    alpha: float
    k: int
    delta: float
    h: float
    inner_m: int
    cells: tuple

    def cell(self, r, lam):
        for c in self.cells:
            if c.r == r and c.lam == lam:
                return c
        raise KeyError((r, lam))

    @property
    def radii(self):
        return tuple(sorted({c.r for c in self.cells}))

    @property
    def lambdas(self):
        return tuple(sorted({c.lam for c in self.cells}))

    def to_records(self, *, estimator, seed):
        """Plain dicts, one per cell, for JSONL export."""
        out = []
        for c in self.cells:
            out.append({
                "alpha": self.alpha, "k": self.k, "lambda": c.lam,
                "r": c.r, "p_hat": c.p_hat, "p_raw": c.p_raw,
                "stderr": c.stderr, "outer_n": c.outer_n,
                "inner_m": c.inner_m, "n_avoiding": c.n_avoiding,
                "z_mean": c.z_mean, "delta": self.delta, "h": self.h,
                "seed": seed, "estimator": estimator,
                "extrapolated": True,
            })
        return out


def series_from_blocks(cfg, blocks):
    """Assemble the estimate series from replica blocks.

    Blocks must cover disjoint ranges; they are sorted by their start
    replica and concatenated, so the output is a pure function of the
    union of replicas.
    """
    blocks = sorted(blocks, key=lambda b: b.lo)
    for a, b in zip(blocks, blocks[1:]):
        if a.hi > b.lo:
            raise ValueError("replica ranges overlap")
    z_a = np.concatenate([b.z_a for b in blocks], axis=0)
    z_b = np.concatenate([b.z_b for b in blocks], axis=0)
    n = z_a.shape[0]
    z2 = 0.5 * (z_a + z_b)
    cells = []
    for ri, r in enumerate(cfg.r_grid):
        za, zb, zm = z_a[:, ri], z_b[:, ri], z2[:, ri]
        n_avoid = int((zm > 0.0).sum())
        z_mean = float(zm.mean())
        for lam in cfg.lambda_list:
            raw = zm ** lam
            v = 2.0 * raw - 0.5 * (za ** lam + zb ** lam)
            mean = float(v.mean())
            sd = float(v.std(ddof=1)) if n > 1 else 0.0
            cells.append(EstimateCell(
                r=r, lam=lam, p_hat=min(1.0, max(0.0, mean)),
                p_raw=float(raw.mean()), stderr=sd / math.sqrt(n),
                outer_n=n, inner_m=cfg.inner_m, n_avoiding=n_avoid,
                z_mean=z_mean))
    return EstimateSeries(alpha=cfg.alpha, k=cfg.k, delta=cfg.delta,
                          h=cfg.h, inner_m=cfg.inner_m, cells=tuple(cells))


def estimate_p(cfg):
    """Direct nested Monte Carlo estimate of E[Z_r^lambda] per (r, lambda).

    Per replica, the two half batches give the plain estimate and the
    two-batch extrapolation 2 f(mean of both) - mean of f(halves); at
    lambda = 1 the extrapolated value equals the plain mean identically.
    """
    return series_from_blocks(cfg, [sample_z_block(cfg, 0, cfg.outer_n)])


# ---------------------------------------------------------------------------
# pathwise-coupled estimator (shared randomness across alpha, k, r)


@dataclass(frozen=True)
class CoupledZ:
    """Per-replica avoidance fractions on one shared random environment.

    z[a, k-1, s] is the fraction of the 2m inner paths that avoid the
    obstacle built from the first k paths, the soup thinned to
    alphas[a], both restricted to the sphere of log-radius levels[s].
    By construction z is nonincreasing along every axis, replica by
    replica.  z_half carries the two half-batch tables for the
    extrapolation step.
    """

    alphas: tuple
    k_max: int
    levels: np.ndarray
    z: np.ndarray
    z_half: np.ndarray
    n_inner: int


def _piece_tag(j, lev):
    return j * 64 + lev


def _obstacle_pieces(paths, scaled, n_levels):
    """Per-annulus pieces of the obstacle paths for the contact grid."""
    for j, p in enumerate(paths):
        prev = 0
        scales = path_seg_scales(p.pts) if scaled else \
            np.ones(p.pts.shape[0] - 1)
        for lev in range(n_levels):
            row = int(p.cross_rows[lev])
            for ci, a in enumerate(range(prev, row, 64)):
                b = min(a + 64, row)
                yield p.pts[a:b + 1], scales[a:b], _piece_tag(j, lev), ci
            prev = row


def _contact_levels(path, qsegs):
    """Level index at which each contacting query segment exists."""
    return np.searchsorted(path.cross_rows, qsegs, side="right")


def coupled_replica(stream, *, alphas, k_max, n_levels, inner_2m, delta, h,
                    t_max=None, scaled=True):
    """One replica of the fully coupled estimator.

    A single soup is drawn at the largest intensity and thinned by its
    marks; obstacle paths and inner paths are drawn once out to the
    largest sphere and truncated at intermediate crossings.  Avoidance
    is then evaluated for every (alpha, k, level) from the same contact
    sets, which makes all three monotonicity directions hold exactly,
    replica by replica.
    """
    alphas = tuple(float(a) for a in alphas)
    if sorted(alphas) != list(alphas):
        raise ValueError("alphas must be ascending")
    if k_max < 1 or n_levels < 1 or n_levels > 63:
        raise ValueError("need k_max >= 1 and 1 <= n_levels <= 63")
    if inner_2m < 2 or inner_2m % 2:
        raise ValueError("inner_2m must be even and at least 2")
    a_max = alphas[-1]
    levels = np.arange(1.0, n_levels + 1.0)
    tol = hit_tolerance(delta)

    paths = [sample_bm_to_sphere(stream.child(2, j), levels, delta)
             for j in range(k_max)]

    scfg = GradedSoupConfig(alpha=a_max, rho_max=float(n_levels),
                            delta=delta, h=h, t_max=t_max,
                            exclusion_radius=1.0)
    soup = sample_soup_graded(scfg, stream.child(1))
    n_loops = len(soup.loops)
    n_a = len(alphas)

    loop_grid = None
    first_attach = None
    if n_loops:
        births = birth_slots(soup, levels, tol)
        marks = soup.marks()
        scales = [_loop_scales(lp, scaled) for lp in soup.loops]
        loop_grid = grid_from_objects(
            h, ((lp.pts, s, g, 0)
                for g, (lp, s) in enumerate(zip(soup.loops, scales))))
        ei, ej = loop_grid.collect_self_edges(0, n_loops)
        seed_loop = []
        seed_lev = []
        seed_path = []
        for j, p in enumerate(paths):
            pscl = path_seg_scales(p.pts) if scaled else \
                np.ones(p.pts.shape[0] - 1)
            tags, _, qsegs = loop_grid.query_contacts(p.pts, pscl)
            seed_loop.append(tags)
            seed_lev.append(_contact_levels(p, qsegs))
            seed_path.append(np.full(tags.shape[0], j, dtype=np.int64))
        seed_loop = np.concatenate(seed_loop)
        seed_lev = np.concatenate(seed_lev)
        seed_path = np.concatenate(seed_path)
        # first level at which each loop joins the obstacle, per (alpha, k)
        first_attach = np.full((n_a, k_max, n_loops), n_levels,
                               dtype=np.int64)
        for ai, a in enumerate(alphas):
            frac = a / a_max if a_max > 0.0 else 0.0
            for k in range(1, k_max + 1):
                sel = seed_path < k
                masks = attached_sweep(births, marks, frac, ei, ej,
                                       seed_loop[sel], seed_lev[sel],
                                       n_levels)
                any_at = masks.any(axis=0)
                fa = np.where(any_at, masks.argmax(axis=0), n_levels)
                first_attach[ai, k - 1] = fa

    piece_grid = grid_from_objects(
        h, _obstacle_pieces(paths, scaled, n_levels))

    # blocked[ai, k-1, b]: first level index at which inner path b stops
    # avoiding; n_levels means it avoids everywhere.
    blocked = np.full((n_a, k_max, inner_2m), n_levels, dtype=np.int64)
    for b in range(inner_2m):
        p = sample_bm_to_sphere(stream.child(3, b), levels, delta)
        pscl = path_seg_scales(p.pts) if scaled else \
            np.ones(p.pts.shape[0] - 1)
        tags, _, qsegs = piece_grid.query_contacts(p.pts, pscl)
        if tags.shape[0]:
            inner_lev = _contact_levels(p, qsegs)
            j_obs = tags // 64
            lev = np.maximum(inner_lev, tags % 64)
            for k in range(1, k_max + 1):
                sel = j_obs < k
                if sel.any():
                    blocked[:, k - 1, b] = np.minimum(
                        blocked[:, k - 1, b], int(lev[sel].min()))
        if loop_grid is not None:
            gtags, _, gsegs = loop_grid.query_contacts(p.pts, pscl)
            if gtags.shape[0]:
                glev = _contact_levels(p, gsegs)
                # contact with loop g blocks once g is attached and the
                # contact segment exists: level max(attach, contact)
                cand = np.maximum(first_attach[:, :, gtags],
                                  glev[None, None, :])
                blocked[:, :, b] = np.minimum(blocked[:, :, b],
                                              cand.min(axis=2))

    # avoid at level s iff still unblocked strictly past s
    lev_idx = np.arange(n_levels)
    avoid = blocked[:, :, :, None] > lev_idx[None, None, None, :]
    half = inner_2m // 2
    z = avoid.mean(axis=2)
    z_half = np.stack([avoid[:, :, :half].mean(axis=2),
                       avoid[:, :, half:].mean(axis=2)])
    return CoupledZ(alphas=alphas, k_max=k_max, levels=levels, z=z,
                    z_half=z_half, n_inner=inner_2m)


def coupled_series(cfg, *, alphas=None, k_list=None, n_levels=None,
                   replica_range=None):
    """Coupled campaign: one EstimateSeries per (alpha, k) on shared draws.

    All series come from the same replica tables, so differences across
    alpha, k and r are paired comparisons.  r runs over the integer
    levels 1..n_levels (default: ceil of the largest configured r).
    """
    if alphas is None:
        alphas = (cfg.alpha,)
    alphas = tuple(sorted(float(a) for a in alphas))
    if k_list is None:
        k_list = (cfg.k,)
    k_max = max(k_list)
    if n_levels is None:
        n_levels = int(math.ceil(max(cfg.r_grid)))
    reps = range(cfg.outer_n) if replica_range is None else replica_range
    reps = list(reps)
    n = len(reps)
    tabs = []
    for rep in reps:
        tabs.append(coupled_replica(
            cfg.seed.child(13, rep), alphas=alphas, k_max=k_max,
            n_levels=n_levels, inner_2m=2 * cfg.inner_m, delta=cfg.delta,
            h=cfg.h, t_max=cfg.t_max, scaled=cfg.scaled))
    z_a = np.stack([t.z_half[0] for t in tabs])   # (n, n_a, k_max, R)
    z_b = np.stack([t.z_half[1] for t in tabs])
    out = {}
    levels = tabs[0].levels
    for ai, a in enumerate(alphas):
        for k in k_list:
            za_t, zb_t = z_a[:, ai, k - 1], z_b[:, ai, k - 1]
            zm = 0.5 * (za_t + zb_t)
            cells = []
            for si in range(n_levels):
                za, zb, z2 = za_t[:, si], zb_t[:, si], zm[:, si]
                n_avoid = int((z2 > 0.0).sum())
                for lam in cfg.lambda_list:
                    raw = z2 ** lam
                    v = 2.0 * raw - 0.5 * (za ** lam + zb ** lam)
                    mean = float(v.mean())
                    sd = float(v.std(ddof=1)) if n > 1 else 0.0
                    cells.append(EstimateCell(
                        r=float(levels[si]), lam=lam,
                        p_hat=min(1.0, max(0.0, mean)),
                        p_raw=float(raw.mean()),
                        stderr=sd / math.sqrt(n), outer_n=n,
                        inner_m=cfg.inner_m, n_avoiding=n_avoid,
                        z_mean=float(z2.mean())))
            out[(a, k)] = EstimateSeries(
                alpha=a, k=k, delta=cfg.delta, h=cfg.h,
                inner_m=cfg.inner_m, cells=tuple(cells))
    return out, tabs


# ---------------------------------------------------------------------------
# fixed-population splitting estimator (lambda = 1)


@dataclass(frozen=True)
class SplittingResult:
    series: EstimateSeries
    ratios: tuple
    population: int
    extinct_level: int


class _Particle:
    """Mutable splitting-particle state: obstacle paths, probe, soup."""

    __slots__ = ("paths", "probe", "loops")

    def __init__(self, paths, probe, loops):
        self.paths = paths
        self.probe = probe
        self.loops = loops


def _extend_path(pts, times, rho, delta, stream):
    """Continue a stopped path from its endpoint out to radius e^rho."""
    feeder = WalkFeeder(stream)
    seg = walk_outward(pts[-1], float(times[-1]), np.array([rho]), delta,
                       feeder)
    return np.concatenate([pts, seg.pts[1:]]), \
        np.concatenate([times, seg.times[1:]])


def estimate_p_splitting(cfg):
    """Splitting estimator of p(r) on unit annuli, lambda = 1 only.

    A fixed population of particles (obstacle paths + one probe path +
    accumulated soup) is pushed one unit annulus at a time: paths are
    extended from their endpoints, a fresh soup slab is added, and the
    particle survives if the probe still avoids the rebuilt enlargement.
    Survivors are resampled back to the fixed population size and
    p(r) is the product of per-annulus survival fractions.  Standard
    errors use the independent-level approximation
    stderr = p * sqrt(sum_i (1 - q_i) / (q_i * N)).
    """
    if tuple(cfg.lambda_list) != (1.0,):
        raise ValueError("splitting estimator is defined for lambda = 1")
    radii = [int(round(r)) for r in cfg.r_grid]
    if any(abs(r - rr) > 1e-9 or rr < 1 for r, rr in
           zip(cfg.r_grid, radii)):
        raise ValueError("splitting needs positive integer radii")
    n_levels = radii[-1]
    pop = cfg.outer_n * cfg.inner_m
    seed = cfg.seed
    tol = hit_tolerance(cfg.delta)

    parts = []
    for s in range(pop):
        st = seed.child(31, s)
        feeder = WalkFeeder(st.child(0))
        starts = [uniform_sphere_point(feeder, 1.0)
                  for _ in range(cfg.k + 1)]
        paths = [(x[None, :], np.zeros(1)) for x in starts[:cfg.k]]
        probe = (starts[cfg.k][None, :], np.zeros(1))
        parts.append(_Particle(paths, probe, []))

    ratios = []
    extinct = 0
    for lev in range(1, n_levels + 1):
        survivors = []
        for s, part in enumerate(parts):
            st = seed.child(32, lev, s)
            paths = [_extend_path(p, t, float(lev), cfg.delta,
                                  st.child(0, j))
                     for j, (p, t) in enumerate(part.paths)]
            probe = _extend_path(part.probe[0], part.probe[1], float(lev),
                                 cfg.delta, st.child(1))
            slab_cfg = GradedSoupConfig(
                alpha=cfg.alpha, rho_max=float(lev), delta=cfg.delta,
                h=cfg.h, t_max=cfg.t_max, exclusion_radius=1.0)
            slab = sample_soup_graded(slab_cfg, st.child(2))
            lo = math.exp(lev - 1.0) + tol
            fresh = [lp for lp in slab.loops if lp.max_radius > lo]
            loops = part.loops + fresh
            cand = _Particle(paths, probe, loops)
            idx = build_clusters(_loops_as_soup(loops, slab.config),
                                 cfg.h, scaled=cfg.scaled)
            env = enlarge([p for p, _ in paths], idx)
            if avoidance_test(probe[0], env):
                survivors.append(cand)
        q = len(survivors) / pop
        ratios.append(q)
        if not survivors:
            extinct = lev
            break
        gen = seed.child(33, lev).generator()
        picks = gen.integers(0, len(survivors), size=pop)
        parts = [_clone(survivors[i]) for i in picks]

    cells = []
    for r in radii:
        if extinct and r >= extinct:
            p_hat, se, n_avoid = 0.0, 0.0, 0
        else:
            p_hat = float(np.prod(ratios[:r]))
            var_log = sum((1.0 - q) / (q * pop) for q in ratios[:r])
            se = p_hat * math.sqrt(var_log)
            n_avoid = int(round(ratios[r - 1] * pop))
        cells.append(EstimateCell(
            r=float(r), lam=1.0, p_hat=p_hat, p_raw=p_hat, stderr=se,
            outer_n=pop, inner_m=1, n_avoiding=n_avoid, z_mean=p_hat))
    series = EstimateSeries(alpha=cfg.alpha, k=cfg.k, delta=cfg.delta,
                            h=cfg.h, inner_m=1, cells=tuple(cells))
    return SplittingResult(series=series, ratios=tuple(ratios),
                           population=pop, extinct_level=extinct)


def _clone(part):
    return _Particle([(p.copy(), t.copy()) for p, t in part.paths],
                     (part.probe[0].copy(), part.probe[1].copy()),
                     list(part.loops))


def _loops_as_soup(loops, config):
    return LoopSoup(loops=tuple(loops), config=config,
                    raw_count=len(loops))


# ---------------------------------------------------------------------------
# separation statistics


@dataclass(frozen=True)
class SeparationRow:
    r: float
    n_outer: int
    n_avoiding: int
    low_confidence: bool
    gap_quantiles: tuple      # (q10, q50, q90) of the scaled endpoint gap
    q_eps: tuple              # fraction of avoiders with gap >= eps
    sep_count: int
    sep_freq: float
    sep_ci: tuple             # 95% Clopper-Pearson interval


@dataclass(frozen=True)
class SeparationStats:
    aperture: float
    eps_grid: tuple
    rows: tuple

    @property
    def min_sep_freq(self):
        return min(r.sep_freq for r in self.rows)

    @property
    def min_sep_ci_low(self):
        return min(r.sep_ci[0] for r in self.rows)

    def to_records(self, *, seed):
        out = []
        for row in self.rows:
            out.append({
                "r": row.r, "n_outer": row.n_outer,
                "n_avoiding": row.n_avoiding,
                "low_confidence": row.low_confidence,
                "gap_quantiles": list(row.gap_quantiles),
                "eps_grid": list(self.eps_grid),
                "q_eps": list(row.q_eps), "sep_count": row.sep_count,
                "sep_freq": row.sep_freq, "sep_ci": list(row.sep_ci),
                "aperture": self.aperture, "seed": seed,
                "estimator": "separation",
            })
        return out


def _clopper_pearson(s, n, level=0.95):
    from scipy.stats import beta
    a = 0.5 * (1.0 - level)
    lo = 0.0 if s == 0 else float(beta.ppf(a, s, n - s + 1))
    hi = 1.0 if s == n else float(beta.ppf(1.0 - a, s + 1, n - s))
    return lo, hi


def separation_stats(cfg, *, aperture=SEPARATION_APERTURE,
                     eps_grid=(1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.2)):
    """Endpoint separation among avoiding replicas, one obstacle path.

    For each configured r the obstacle path and the probe run to S_r
    with a registered half-level crossing at r - 1/2.  Among avoiding
    replicas the scaled endpoint gap is

        gap = e^{-r} min(dist(probe end, obstacle), dist(obstacle end,
        probe)),

    and the separation event asks, with u the probe endpoint direction,
    that the probe's last half-annulus stays in the cone around u and
    the obstacle's last half-annulus stays in the opposite cone.
    Rows with fewer than 50 avoiding replicas are flagged low
    confidence.
    """
    if cfg.k != 1:
        raise ValueError("separation statistics are defined for k = 1")
    if any(r < 1.0 for r in cfg.r_grid):
        raise ValueError("separation needs r >= 1")
    eps_grid = tuple(sorted(float(e) for e in eps_grid))
    rows = []
    for ri, r in enumerate(cfg.r_grid):
        grid = np.array([r - 0.5, r])
        gaps = []
        seps = 0
        n_avoid = 0
        for rep in range(cfg.outer_n):
            est = cfg.seed.child(21, ri, rep)
            env = sample_environment(cfg, r, est, rho_grid=grid)
            probe = sample_bm_to_sphere(est.child(3), grid, cfg.delta)
            if not avoidance_test(probe.pts, env.enlargement):
                continue
            n_avoid += 1
            obst = env.paths[0]
            g = math.exp(-r) * min(
                polyline_point_distance(obst.pts, probe.pts[-1]),
                polyline_point_distance(probe.pts, obst.pts[-1]))
            gaps.append(g)
            u = probe.pts[-1] / np.linalg.norm(probe.pts[-1])
            tail_p = probe.pts[probe.cross_rows[0]:]
            tail_o = obst.pts[obst.cross_rows[0]:]
            if Cone(u, aperture).contains_all(tail_p) and \
                    Cone(-u, aperture).contains_all(tail_o):
                seps += 1
        gaps = np.asarray(gaps)
        if n_avoid:
            quant = tuple(float(q) for q in
                          np.quantile(gaps, [0.1, 0.5, 0.9]))
            q_eps = tuple(float((gaps >= e).mean()) for e in eps_grid)
            freq = seps / n_avoid
            ci = _clopper_pearson(seps, n_avoid)
        else:
            quant = (math.nan,) * 3
            q_eps = (math.nan,) * len(eps_grid)
            freq = math.nan
            ci = (math.nan, math.nan)
        rows.append(SeparationRow(
            r=float(r), n_outer=cfg.outer_n, n_avoiding=n_avoid,
            low_confidence=n_avoid < 50, gap_quantiles=quant,
            q_eps=q_eps, sep_count=seps, sep_freq=freq, sep_ci=ci))
    return SeparationStats(aperture=aperture, eps_grid=eps_grid,
                           rows=tuple(rows))


# ---------------------------------------------------------------------------
# cone confinement decay


@dataclass(frozen=True)
class ConeDecayFit:
    eps_grid: tuple
    path_freq: tuple
    path_n: int
    cluster_freq: tuple
    cluster_n: int
    c1_hat: float
    c2_hat: float
    r_squared: float
    residuals: tuple
    zero_cells: tuple


def _confined(rel, eps, aperture, axis):
    """All displacement rows inside ball(eps/2) union the axis cone."""
    nv = np.linalg.norm(rel, axis=1)
    in_ball = nv <= 0.5 * eps
    safe = np.maximum(nv, 1e-300)
    dirs = rel / safe[:, None]
    in_cone = np.linalg.norm(dirs - axis, axis=1) < aperture
    return bool(np.all(in_ball | in_cone))


def _confined_path_event(stream, eps, delta, aperture):
    """Walk from u on the unit sphere to radius e, confined to
    ball(u, eps/2) union the cone at u around the outward axis.

    The walk runs in budgeted chunks so failures exit early; the step
    size is refined below the ball scale so the event is resolved."""
    u = np.array([1.0, 0.0, 0.0])
    d = min(delta, eps * eps / 8.0)
    grid = np.ones(1)
    x, t = u, 0.0
    chunk = 0
    while True:
        feeder = WalkFeeder(stream.child(chunk))
        seg = walk_outward(x, t, grid, d, feeder, max_steps=4096)
        rel = seg.pts[1:] - u
        if not _confined(rel, eps, aperture, u):
            return False
        if seg.reached(0):
            return True
        x, t = seg.pts[-1], float(seg.times[-1])
        chunk += 1
        if chunk > 100000:
            raise RuntimeError("confinement walk failed to terminate")


def _confined_cluster_event(stream, eps, alpha, delta, h, aperture_in,
                            aperture_out, scaled):
    """Soup clusters seeded in the inner region stay inside the outer.

    The soup lives in the ball of radius e around the origin with the
    graded local duration floor; clusters touching the inner region
    (cone at u, half-width aperture_in, or ball(u, eps/2)) must lie in
    the outer region (cone half-width aperture_out, or ball(u, eps))."""
    u = np.array([1.0, 0.0, 0.0])
    cfg = GradedSoupConfig(alpha=alpha, rho_max=1.0, delta=delta, h=h,
                           exclusion_radius=None)
    soup = sample_soup_graded(cfg, stream)
    if not soup.loops:
        return True
    idx = build_clusters(soup, h, scaled=scaled)
    touched = set()
    for g, lp in enumerate(soup.loops):
        rel = lp.pts - u
        nv = np.linalg.norm(rel, axis=1)
        hit = nv <= 0.5 * eps
        if not hit.all():
            safe = np.maximum(nv, 1e-300)
            dirs = rel / safe[:, None]
            hit = hit | (np.linalg.norm(dirs - u, axis=1) < aperture_in)
        if hit.any():
            touched.add(int(idx.cluster_of[g]))
    for g, lp in enumerate(soup.loops):
        if int(idx.cluster_of[g]) not in touched:
            continue
        if not _confined(lp.pts - u, 2.0 * eps, aperture_out, u):
            return False
    return True


def cone_confinement_decay(stream, eps_grid, *, n_samples, delta,
                           alpha=0.0, h=0.3,
                           inner_aperture=CONE_INNER_APERTURE,
                           outer_aperture=CONE_OUTER_APERTURE,
                           cluster_samples=None, scaled=True):
    """Decay of the cone confinement probability as eps shrinks.

    Estimates, for each eps, the probability that a path from a unit
    sphere point u stays in cone(u) union ball(u, eps/2) until radius
    e, and (at alpha > 0) the probability that every soup cluster
    touching the inner region stays inside the widened region.  Fits
    log p = log c1 + c2 log eps by weighted least squares over the
    nonzero cells of the path event.
    """
    eps_grid = tuple(sorted(float(e) for e in eps_grid))
    if not eps_grid or eps_grid[0] <= 0.0 or eps_grid[-1] > 0.5:
        raise ValueError("eps values must lie in (0, 1/2]")
    if cluster_samples is None:
        cluster_samples = max(1, n_samples // 10)
    path_freq = []
    for ei, eps in enumerate(eps_grid):
        hits = 0
        for s in range(n_samples):
            if _confined_path_event(stream.child(41, ei, s), eps, delta,
                                    inner_aperture):
                hits += 1
        path_freq.append(hits / n_samples)
    cluster_freq = []
    for ei, eps in enumerate(eps_grid):
        if alpha == 0.0:
            cluster_freq.append(1.0)
            continue
        hits = 0
        for s in range(cluster_samples):
            if _confined_cluster_event(stream.child(42, ei, s), eps,
                                       alpha, delta, h, inner_aperture,
                                       outer_aperture, scaled):
                hits += 1
        cluster_freq.append(hits / cluster_samples)

    xs, ys, ws = [], [], []
    zero_cells = []
    for eps, p in zip(eps_grid, path_freq):
        if p <= 0.0:
            zero_cells.append(eps)
            continue
        xs.append(math.log(eps))
        ys.append(math.log(p))
        var_log = (1.0 - p) / (p * n_samples)
        ws.append(1.0 / max(var_log, 1e-12))
    if len(xs) >= 2:
        X = np.stack([np.ones(len(xs)), np.array(xs)], axis=1)
        W = np.array(ws)
        y = np.array(ys)
        coef, *_ = np.linalg.lstsq(X * np.sqrt(W)[:, None],
                                   y * np.sqrt(W), rcond=None)
        pred = X @ coef
        resid = y - pred
        ss_res = float((resid ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
        c1, c2 = math.exp(coef[0]), float(coef[1])
        residuals = tuple(float(v) for v in resid)
    else:
        c1 = c2 = r2 = math.nan
        residuals = ()
    return ConeDecayFit(
        eps_grid=eps_grid, path_freq=tuple(path_freq), path_n=n_samples,
        cluster_freq=tuple(cluster_freq), cluster_n=cluster_samples,
        c1_hat=c1, c2_hat=c2, r_squared=r2, residuals=residuals,
        zero_cells=tuple(zero_cells))
