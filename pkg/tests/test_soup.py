"""Loop ensemble sampler: mass formulas, laws, filters, serialization."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from loopsoup import soup as S
from loopsoup.geometry import Ball, Cube, CubeShell, hit_tolerance
from loopsoup.rng import RngStream


def windowed_cfg(**kw):
    base = dict(alpha=1.0, root_region=Ball(np.zeros(3), 1.0),
                t_min=0.027, t_max=4.0, delta=0.01)
    base.update(kw)
    return S.SoupConfig(**base)


# ---------------------------------------------------------------------------
# closed-form mass


class TestRootedMass:
    def test_matches_quadrature(self):
        # independent oracle: integrate the duration density directly
        for t_min, t_max in [(0.01, 1.0), (0.027, 4.0), (0.5, 50.0)]:
            q, err = integrate.quad(
                lambda t: (2 * math.pi * t) ** -1.5 / t, t_min, t_max)
            assert S.rooted_mass(1.0, 1.0, t_min, t_max) == \
                pytest.approx(q, rel=1e-6)

    def test_reference_value(self):
        # (2 pi)^(-3/2) * (2/3) * (0.01^(-3/2) - 1)
        v = S.rooted_mass(1.0, 1.0, 0.01, 1.0)
        assert v == pytest.approx(42.29, abs=0.01)

    def test_zero_alpha(self):
        assert S.rooted_mass(0.0, 5.0, 0.01, 1.0) == 0.0

    def test_volume_linearity(self):
        a = S.rooted_mass(0.7, 1.0, 0.02, 2.0)
        assert S.rooted_mass(0.7, 2.0, 0.02, 2.0) == pytest.approx(2 * a,
                                                                   rel=1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            S.rooted_mass(1.0, 1.0, 0.5, 0.5)
        with pytest.raises(ValueError):
            S.rooted_mass(1.0, 1.0, 2.0, 1.0)
        with pytest.raises(ValueError):
            S.rooted_mass(-1.0, 1.0, 0.01, 1.0)


class TestDurationLaw:
    def test_endpoints(self):
        assert S.duration_inverse_cdf(1e-12, 0.04, 9.0) == \
            pytest.approx(0.04, rel=1e-9)
        assert S.duration_inverse_cdf(1 - 1e-12, 0.04, 9.0) == \
            pytest.approx(9.0, rel=1e-6)

    def test_rejects_boundary_u(self):
        for u in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                S.duration_inverse_cdf(u, 0.04, 9.0)

    def test_monotone(self):
        u = np.linspace(0.001, 0.999, 500)
        t = S.duration_inverse_cdf(u, 0.02, 7.0)
        assert np.all(np.diff(t) > 0)

    def test_ks_against_analytic_cdf(self):
        t_min, t_max = 0.03, 5.0
        gen = np.random.default_rng(100)
        u = gen.random(100_000)
        t = S._dur_from_u(u, t_min, t_max)
        a, b = t_min ** -1.5, t_max ** -1.5
        pit = (a - t ** -1.5) / (a - b)
        res = stats.kstest(pit, "uniform")
        assert res.statistic < 0.01


# ---------------------------------------------------------------------------
# windowed sampler


class TestWindowedSoup:
    def test_zero_alpha_empty(self):
        out = S.sample_soup(windowed_cfg(alpha=0.0), RngStream(200, 0))
        assert out.raw_count == 0 and out.n_loops == 0

    def test_poisson_mean(self):
        cfg = windowed_cfg()
        mass = S.rooted_mass(cfg.alpha, cfg.root_region.volume,
                             cfg.t_min, cfg.t_max)
        counts = [S.sample_soup(cfg, RngStream(201, i)).raw_count
                  for i in range(200)]
        se = math.sqrt(mass / 200)
        assert abs(np.mean(counts) - mass) < 3 * se

    def test_poisson_dispersion(self):
        cfg = windowed_cfg()
        counts = np.array([S.sample_soup(cfg, RngStream(202, i)).raw_count
                           for i in range(1000)], dtype=float)
        ratio = counts.var(ddof=1) / counts.mean()
        assert 0.9 < ratio < 1.1

    def test_trace_is_closed_bridge(self):
        out = S.sample_soup(windowed_cfg(), RngStream(203, 0))
        assert out.n_loops > 0
        for lp in out.loops:
            assert np.array_equal(lp.pts[0], lp.root)
            assert np.array_equal(lp.pts[-1], lp.root)
            assert lp.n_points >= 7     # steps_min 6 plus the closing row

    def test_exclusion_contract(self):
        cfg = windowed_cfg(root_region=Ball(np.zeros(3), 2.0),
                           exclusion_domain=Ball(np.zeros(3), 1.0))
        tol = hit_tolerance(cfg.delta)
        out = S.sample_soup(cfg, RngStream(204, 0))
        assert out.n_loops > 0
        assert all(lp.max_radius > 1.0 + tol for lp in out.loops)

    def test_containment_contract(self):
        cfg = windowed_cfg(root_region=Ball(np.zeros(3), 2.0),
                           containment_domain=Ball(np.zeros(3), 2.0))
        tol = hit_tolerance(cfg.delta)
        out = S.sample_soup(cfg, RngStream(205, 0))
        assert out.n_loops > 0
        assert all(lp.max_radius <= 2.0 + tol for lp in out.loops)
        assert out.raw_count >= out.n_loops

    def test_containment_equals_exclusion_gives_empty(self):
        dom = Ball(np.zeros(3), 1.0)
        cfg = windowed_cfg(containment_domain=dom, exclusion_domain=dom)
        out = S.sample_soup(cfg, RngStream(206, 0))
        assert out.raw_count > 0 and out.n_loops == 0

    def test_filter_idempotent(self):
        out = S.sample_soup(windowed_cfg(root_region=Ball(np.zeros(3), 2.0)),
                            RngStream(207, 0))
        cont = Ball(np.zeros(3), 1.5)
        excl = Ball(np.zeros(3), 0.7)
        once = S.filter_loops(out.loops, cont, excl, 1e-3)
        twice = S.filter_loops(once, cont, excl, 1e-3)
        assert twice == once
        assert 0 < len(once) < out.n_loops

    def test_determinism(self):
        cfg = windowed_cfg()
        a = S.sample_soup(cfg, RngStream(208, 7))
        b = S.sample_soup(cfg, RngStream(208, 7))
        assert a.raw_count == b.raw_count and a.n_loops == b.n_loops
        for la, lb in zip(a.loops, b.loops):
            assert np.array_equal(la.pts, lb.pts)
            assert la.mark == lb.mark

    def test_marks_uniform_and_nested(self):
        marks = np.concatenate([
            S.sample_soup(windowed_cfg(), RngStream(209, i)).marks()
            for i in range(40)])
        assert stats.kstest(marks, "uniform").pvalue > 1e-4
        low = marks < 0.3
        mid = marks < 0.6
        assert np.all(mid[low])   # thinning sets are nested by construction

    def test_cube_window(self):
        cfg = windowed_cfg(root_region=Cube(np.zeros(3), 1.0))
        out = S.sample_soup(cfg, RngStream(210, 0))
        assert out.n_loops > 0
        roots = np.stack([lp.root for lp in out.loops])
        assert np.abs(roots).max() <= 1.0


class TestLoopSteps:
    def test_clamps(self):
        s = S.loop_steps([1e-9, 1e9], [1.0, 1.0], 0.01)
        assert s[0] == 6 and s[1] == 4096

    def test_scale_covariant(self):
        t = np.array([0.05, 0.3, 2.0])
        sc = np.array([1.0, 1.3, 2.0])
        lam = 3.7
        a = S.loop_steps(t, sc, 0.01)
        b = S.loop_steps(lam * lam * t, lam * sc, 0.01)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# graded sampler


def graded_cfg(**kw):
    base = dict(alpha=0.15, rho_max=1.5, delta=0.01, h=0.3, t_max=4.0,
                exclusion_radius=None)
    base.update(kw)
    return S.GradedSoupConfig(**base)


class TestGradedSoup:
    def test_zero_alpha_empty(self):
        out = S.sample_soup_graded(graded_cfg(alpha=0.0), RngStream(300, 0))
        assert out.raw_count == 0 and out.n_loops == 0

    def test_raw_count_mean(self):
        cfg = graded_cfg()
        mass = cfg.alpha * (4 / 3 * math.pi) * S.MASS_CONST * \
            (cfg.t_min_unit ** -1.5 - cfg.t_max ** -1.5) + \
            S.graded_shell_rate(cfg.alpha, cfg.h) * cfg.rho_max
        counts = [S.sample_soup_graded(cfg, RngStream(301, i)).raw_count
                  for i in range(200)]
        se = math.sqrt(mass / 200)
        assert abs(np.mean(counts) - mass) < 3 * se

    def test_duration_floor_respected(self):
        out = S.sample_soup_graded(graded_cfg(), RngStream(302, 0))
        assert out.n_loops > 0
        cfg = out.config
        for lp in out.loops:
            r = math.sqrt(float(lp.root @ lp.root))
            assert lp.duration >= float(cfg.t_min_at(r)) * (1 - 1e-12)
            assert lp.duration <= cfg.t_max

    def test_radial_law(self):
        # kept shell roots have log-radius density proportional to
        # g(e^u) = 1 - (h e^u / 6)^3 / t_max^(3/2); PIT via the closed
        # antiderivative, then KS.  The band stops at rho 1.2 with the
        # window at rho 2: the containment filter only rejects loops
        # reaching past e^2, and with t_max = 1 no band root can
        rho_band = 1.2
        cfg = graded_cfg(rho_max=2.0, t_max=1.0, alpha=0.1)
        rho = []
        for i in range(40):
            out = S.sample_soup_graded(cfg, RngStream(303, i))
            rho.extend(math.log(lp.root_scale) for lp in out.loops
                       if 1.0 < float(lp.root @ lp.root) ** 0.5
                       <= math.exp(rho_band))
        rho = np.array(rho)
        c = (cfg.h / 6.0) ** 3 / cfg.t_max ** 1.5

        def integral(x):
            return x - c * (np.exp(3 * x) - 1.0) / 3.0

        pit = integral(rho) / integral(rho_band)
        assert len(rho) > 5000
        assert stats.kstest(pit, "uniform").pvalue > 1e-4

    def test_duration_law_local_floor(self):
        # PIT each duration with its own root's floor; pooled result
        # must be uniform (same interior band as the radial-law test)
        cfg = graded_cfg(rho_max=2.0, t_max=1.0, alpha=0.1)
        pit = []
        for i in range(40):
            out = S.sample_soup_graded(cfg, RngStream(304, i))
            for lp in out.loops:
                if math.sqrt(float(lp.root @ lp.root)) > math.exp(1.2):
                    continue
                tmin = float(cfg.t_min_at(math.sqrt(float(lp.root @
                                                          lp.root))))
                a, b = tmin ** -1.5, cfg.t_max ** -1.5
                pit.append((a - lp.duration ** -1.5) / (a - b))
        assert len(pit) > 5000
        assert stats.kstest(np.array(pit), "uniform").pvalue > 1e-4

    def test_interior_stratum_present(self):
        out = S.sample_soup_graded(graded_cfg(), RngStream(305, 0))
        rr = np.array([math.sqrt(float(lp.root @ lp.root))
                       for lp in out.loops])
        assert np.any(rr < 1.0) and np.any(rr > 1.0)

    def test_exclusion_and_containment(self):
        cfg = graded_cfg(exclusion_radius=1.0)
        tol = hit_tolerance(cfg.delta)
        out = S.sample_soup_graded(cfg, RngStream(306, 0))
        assert out.n_loops > 0
        r_cont = math.exp(cfg.rho_max)
        for lp in out.loops:
            assert lp.max_radius > 1.0 + tol
            assert lp.max_radius <= r_cont + tol

    def test_matches_windowed_at_rho_zero(self):
        # rho_max = 0 collapses the graded sampler to a windowed soup on
        # the unit ball with the flat floor; laws must agree
        g = S.GradedSoupConfig(alpha=1.0, rho_max=0.0, delta=0.01, h=0.3,
                               t_max=4.0, exclusion_radius=None)
        w = S.SoupConfig(alpha=1.0, root_region=Ball(np.zeros(3), 1.0),
                         t_min=g.t_min_unit, t_max=4.0, delta=0.01,
                         containment_domain=Ball(np.zeros(3), 1.0))
        counts = np.empty((2, 150))
        durs = [[], []]
        rads = [[], []]
        for i in range(150):
            a = S.sample_soup_graded(g, RngStream(307, i))
            b = S.sample_soup(w, RngStream(308, i))
            counts[0, i], counts[1, i] = a.n_loops, b.n_loops
            for j, out in enumerate((a, b)):
                durs[j].extend(lp.duration for lp in out.loops)
                rads[j].extend(math.sqrt(float(lp.root @ lp.root))
                               for lp in out.loops)
        z = (counts[0].mean() - counts[1].mean()) / math.sqrt(
            counts[0].var(ddof=1) / 150 + counts[1].var(ddof=1) / 150)
        assert abs(z) < 4
        assert stats.ks_2samp(durs[0], durs[1]).pvalue > 1e-4
        assert stats.ks_2samp(rads[0], rads[1]).pvalue > 1e-4

    def test_determinism(self):
        cfg = graded_cfg()
        a = S.sample_soup_graded(cfg, RngStream(309, 3))
        b = S.sample_soup_graded(cfg, RngStream(309, 3))
        assert a.n_loops == b.n_loops
        for la, lb in zip(a.loops, b.loops):
            assert np.array_equal(la.pts, lb.pts)


class TestBirthSlots:
    def test_matches_filter_semantics(self):
        cfg = graded_cfg(rho_max=2.0, alpha=0.1)
        tol = hit_tolerance(cfg.delta)
        out = S.sample_soup_graded(cfg, RngStream(310, 0))
        grid = np.array([0.5, 1.0, 1.5, 2.0])
        slots = S.birth_slots(out, grid, tol)
        for gi, rho in enumerate(grid):
            kept = S.filter_loops(out.loops, Ball(np.zeros(3),
                                                  math.exp(rho)), None, tol)
            by_slot = [lp for lp, s in zip(out.loops, slots) if s <= gi]
            assert kept == by_slot

    def test_never_contained_gets_sentinel(self):
        cfg = graded_cfg(rho_max=2.0)
        tol = hit_tolerance(cfg.delta)
        out = S.sample_soup_graded(cfg, RngStream(311, 0))
        grid = np.array([0.25])
        slots = S.birth_slots(out, grid, tol)
        big = [lp.max_radius > math.exp(0.25) + tol for lp in out.loops]
        assert np.array_equal(slots == 1, np.array(big))

    def test_rejects_bad_grid(self):
        out = S.sample_soup_graded(graded_cfg(), RngStream(312, 0))
        with pytest.raises(ValueError):
            S.birth_slots(out, np.array([1.0, 0.5]), 1e-3)


# ---------------------------------------------------------------------------
# scaling invariance


class TestScalingCheck:
    def test_identity_scale(self):
        rep = S.scaling_check(RngStream(400, 0), alpha=1.0, radius=1.0,
                              lam=1.0, n_soups=120, t_min=0.05, t_max=4.0,
                              delta=0.01)
        assert rep.passed

    def test_doubling(self):
        rep = S.scaling_check(RngStream(401, 0), alpha=1.0, radius=1.0,
                              lam=2.0, n_soups=120, t_min=0.05, t_max=4.0,
                              delta=0.01)
        assert rep.passed
        assert abs(rep.count_means[0] - rep.count_means[1]) < 2.0


# ---------------------------------------------------------------------------
# serialization


class TestSerialization:
    def test_windowed_round_trip(self, tmp_path):
        cfg = windowed_cfg(root_region=Ball(np.zeros(3), 2.0),
                           containment_domain=Ball(np.zeros(3), 2.0),
                           exclusion_domain=Ball(np.zeros(3), 1.0))
        out = S.sample_soup(cfg, RngStream(500, 0))
        p = tmp_path / "soup.npz"
        S.save_soup(p, out)
        back = S.load_soup(p)
        assert back.raw_count == out.raw_count
        assert back.n_loops == out.n_loops
        assert back.config == cfg
        for la, lb in zip(out.loops, back.loops):
            assert np.array_equal(la.pts, lb.pts)
            assert la.duration == lb.duration and la.mark == lb.mark
            assert la.max_radius == lb.max_radius

    def test_graded_round_trip(self, tmp_path):
        cfg = graded_cfg()
        out = S.sample_soup_graded(cfg, RngStream(501, 0))
        p = tmp_path / "graded.npz"
        S.save_soup(p, out)
        back = S.load_soup(p)
        assert back.config == cfg
        assert back.n_loops == out.n_loops
        for la, lb in zip(out.loops, back.loops):
            assert np.array_equal(la.pts, lb.pts)

    def test_cube_shell_region_round_trip(self):
        shell = CubeShell(Cube(np.zeros(3), 1.0), Cube(np.zeros(3), 0.25))
        d = S._region_to_dict(shell)
        back = S._region_from_dict(d)
        assert back == shell

    def test_version_guard(self):
        with pytest.raises(ValueError):
            S._config_from_json('{"version": 99, "config": {}}')


# ---------------------------------------------------------------------------
# region geometry used by the samplers


class TestRegions:
    def test_ball_sampling_uniform(self):
        gen = np.random.default_rng(600)
        ball = Ball(np.array([1.0, -2.0, 0.5]), 2.0)
        pts = ball.sample_points(gen, 20000)
        assert np.all(ball.contains_mask(pts))
        # radial CDF of uniform ball is (r/R)^3
        r = np.sqrt(((pts - ball.center) ** 2).sum(axis=1))
        assert stats.kstest((r / 2.0) ** 3, "uniform").pvalue > 1e-4
        assert ball.volume == pytest.approx(4 / 3 * math.pi * 8, rel=1e-15)

    def test_cube_shell_sampling(self):
        gen = np.random.default_rng(601)
        shell = CubeShell(Cube(np.zeros(3), 1.0), Cube(np.zeros(3), 0.5))
        pts = shell.sample_points(gen, 5000)
        assert np.all(shell.contains_mask(pts))
        assert np.abs(pts).max() <= 1.0
        assert np.all(np.abs(pts).max(axis=1) > 0.5)
        assert shell.volume == pytest.approx(8.0 - 1.0, rel=1e-15)

    def test_shell_signed_dists(self):
        shell = CubeShell(Cube(np.zeros(3), 1.0), Cube(np.zeros(3), 0.5))
        pts = np.array([[0.75, 0, 0],    # inside the shell
                        [0.0, 0, 0],     # inside the hole
                        [2.0, 0, 0],     # outside everything
                        [0.5, 0, 0],     # on the inner boundary
                        [1.0, 0, 0]])    # on the outer boundary
        sd = shell.signed_dists(pts)
        assert sd[0] < 0
        assert sd[1] > 0
        assert sd[2] > 0
        assert sd[3] == 0.0
        assert sd[4] == 0.0
