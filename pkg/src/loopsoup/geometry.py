"""Basic 3D geometry: shapes on the logarithmic radial scale and distances.

Radii of the concentric reference spheres are addressed by their log,
rho, with radius e^rho; most experiment code works in rho units.  All
distance predicates ultimately call the kernel backend so the compiled
and pure-Python paths agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import (polyline_min_distance, polyline_point_distance,
                       seg_seg_distance)

__all__ = [
    "as_point", "unit", "LogSphere", "Annulus", "Cone", "Cube", "Ball",
    "CubeShell",
    "seg_seg_distance", "polyline_min_distance", "polyline_point_distance",
    "hit_tolerance", "random_rotation",
]


def as_point(p) -> np.ndarray:
    """Validate and return p as a float64 (3,) array."""
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"point must have shape (3,), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("point coordinates must be finite")
    return a


def unit(v) -> np.ndarray:
    """Normalize v to unit length."""
    a = as_point(v)
    n = math.sqrt(float(a @ a))
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return a / n


def hit_tolerance(delta: float) -> float:
    """Sphere-hit snap tolerance for a walk of local step variance delta.

    One step moves the radius by about sqrt(delta) in local units; the
    crossing interpolation is accurate to a small fraction of that.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    return max(1e-9, math.sqrt(delta) / 100.0)


@dataclass(frozen=True)
class LogSphere:
    """Sphere of radius e^rho centered at the origin."""

    rho: float

    @property
    def radius(self) -> float:
        return math.exp(self.rho)

    def signed_dist(self, p) -> float:
        """Positive outside, negative inside."""
        a = as_point(p)
        return math.sqrt(float(a @ a)) - self.radius

    def contains(self, p) -> bool:
        """Closed ball membership."""
        return self.signed_dist(p) <= 0.0


@dataclass(frozen=True, eq=False)
class Annulus:
    """Closed spherical shell {r_in <= |p - center| <= r_out}."""

    center: np.ndarray
    r_in: float
    r_out: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if not (0.0 < self.r_in < self.r_out):
            raise ValueError("need 0 < r_in < r_out")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * (self.r_out ** 3 - self.r_in ** 3)

    def contains(self, p) -> bool:
        a = as_point(p) - self.center
        r = math.sqrt(float(a @ a))
        return self.r_in <= r <= self.r_out

    def signed_dists(self, pts) -> np.ndarray:
        """Rowwise signed distance, negative strictly inside the shell."""
        a = np.asarray(pts, dtype=np.float64) - self.center
        r = np.sqrt((a * a).sum(axis=1))
        return np.maximum(r - self.r_out, self.r_in - r)

    def contains_mask(self, pts) -> np.ndarray:
        return self.signed_dists(pts) <= 0.0

    def sample_points(self, gen: np.random.Generator, n: int) -> np.ndarray:
        v = gen.standard_normal((n, 3))
        norms = np.sqrt((v * v).sum(axis=1))
        while np.any(norms == 0.0):
            bad = norms == 0.0
            v[bad] = gen.standard_normal((int(bad.sum()), 3))
            norms = np.sqrt((v * v).sum(axis=1))
        # radius from the exact shell law: P(R <= r) prop r^3 - r_in^3
        u = gen.random(n)
        r = np.cbrt(self.r_in ** 3 + u * (self.r_out ** 3 - self.r_in ** 3))
        return self.center + v * (r / norms)[:, None]

    def __eq__(self, other):
        return (isinstance(other, Annulus)
                and np.array_equal(self.center, other.center)
                and self.r_in == other.r_in and self.r_out == other.r_out)


@dataclass(frozen=True, eq=False)
class Cone:
    """Open cone from the origin: directions within aperture of the axis.

    Membership of p != 0 is | p/|p| - axis | < aperture, so the aperture
    is a chordal width in (0, 2); aperture 2 is the punctured space.
    """

    axis: np.ndarray
    aperture: float

    def __post_init__(self):
        object.__setattr__(self, "axis", unit(self.axis))
        if not (0.0 < self.aperture <= 2.0):
            raise ValueError("aperture must lie in (0, 2]")

    def contains(self, p) -> bool:
        a = as_point(p)
        n = math.sqrt(float(a @ a))
        if n == 0.0:
            raise ValueError("cone membership undefined at the origin")
        d = a / n - self.axis
        return math.sqrt(float(d @ d)) < self.aperture

    def contains_all(self, pts) -> bool:
        """True when every row of pts (n,3) lies in the cone."""
        a = np.asarray(pts, dtype=np.float64)
        n = np.sqrt((a * a).sum(axis=1))
        if np.any(n == 0.0):
            raise ValueError("cone membership undefined at the origin")
        d = a / n[:, None] - self.axis[None, :]
        return bool(np.all(np.sqrt((d * d).sum(axis=1)) < self.aperture))

    def negated(self) -> "Cone":
        return Cone(-self.axis, self.aperture)

    def __eq__(self, other):
        return (isinstance(other, Cone)
                and np.array_equal(self.axis, other.axis)
                and self.aperture == other.aperture)


@dataclass(frozen=True, eq=False)
class Cube:
    """Axis-aligned closed cube {max_i |p_i - center_i| <= half}."""

    center: np.ndarray
    half: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if self.half <= 0.0:
            raise ValueError("half side must be positive")

    @property
    def volume(self) -> float:
        return (2.0 * self.half) ** 3

    def contains(self, p) -> bool:
        a = as_point(p) - self.center
        return bool(np.max(np.abs(a)) <= self.half)

    def contains_mask(self, pts) -> np.ndarray:
        a = np.asarray(pts, dtype=np.float64) - self.center
        return np.max(np.abs(a), axis=1) <= self.half

    def signed_dists(self, pts) -> np.ndarray:
        """Rowwise sup-norm signed distance, negative inside.

        Exact for threshold tests: sd <= tol is membership of the cube
        inflated by tol on every face.
        """
        a = np.asarray(pts, dtype=np.float64) - self.center
        return np.max(np.abs(a), axis=1) - self.half

    def sample_points(self, gen: np.random.Generator, n: int) -> np.ndarray:
        return self.center + gen.uniform(-self.half, self.half, size=(n, 3))

    def __eq__(self, other):
        return (isinstance(other, Cube)
                and np.array_equal(self.center, other.center)
                and self.half == other.half)


@dataclass(frozen=True, eq=False)
class Ball:
    """Closed ball {|p - center| <= radius}."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius ** 3

    def contains(self, p) -> bool:
        a = as_point(p) - self.center
        return math.sqrt(float(a @ a)) <= self.radius

    def contains_mask(self, pts) -> np.ndarray:
        return self.signed_dists(pts) <= 0.0

    def signed_dists(self, pts) -> np.ndarray:
        """Rowwise Euclidean signed distance to the sphere, negative inside."""
        a = np.asarray(pts, dtype=np.float64) - self.center
        return np.sqrt((a * a).sum(axis=1)) - self.radius

    def sample_points(self, gen: np.random.Generator, n: int) -> np.ndarray:
        v = gen.standard_normal((n, 3))
        norms = np.sqrt((v * v).sum(axis=1))
        # resample the measure-zero degenerate rows rather than dividing by 0
        while np.any(norms == 0.0):
            bad = norms == 0.0
            v[bad] = gen.standard_normal((int(bad.sum()), 3))
            norms = np.sqrt((v * v).sum(axis=1))
        r = self.radius * np.cbrt(gen.random(n))
        return self.center + v * (r / norms)[:, None]

    def __eq__(self, other):
        return (isinstance(other, Ball)
                and np.array_equal(self.center, other.center)
                and self.radius == other.radius)


@dataclass(frozen=True, eq=False)
class CubeShell:
    """Region between two concentric axis-aligned cubes (outer minus the
    open inner cube)."""

    outer: Cube
    inner: Cube

    def __post_init__(self):
        if not np.array_equal(self.outer.center, self.inner.center):
            raise ValueError("shell cubes must be concentric")
        if not self.inner.half < self.outer.half:
            raise ValueError("inner cube must be strictly smaller")

    @property
    def volume(self) -> float:
        return self.outer.volume - self.inner.volume

    def signed_dists(self, pts) -> np.ndarray:
        """Negative strictly between the cubes; sup-norm based like Cube."""
        return np.maximum(self.outer.signed_dists(pts),
                          -self.inner.signed_dists(pts))

    def contains_mask(self, pts) -> np.ndarray:
        return self.signed_dists(pts) <= 0.0

    def contains(self, p) -> bool:
        return bool(self.contains_mask(np.asarray(p, dtype=np.float64)
                                       .reshape(1, 3))[0])

    def sample_points(self, gen: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, 3))
        have = 0
        while have < n:
            cand = self.outer.sample_points(gen, max(n - have, 16))
            keep = cand[~self.inner.contains_mask(cand)]
            take = min(n - have, keep.shape[0])
            out[have:have + take] = keep[:take]
            have += take
        return out

    def __eq__(self, other):
        return (isinstance(other, CubeShell)
                and self.outer == other.outer and self.inner == other.inner)


def random_rotation(gen: np.random.Generator) -> np.ndarray:
    """Haar-ish random rotation matrix via QR of a Gaussian matrix."""
    m = gen.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))[None, :]
    if np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q
