"""Estimator tests.

Distributional checks use independent oracles: closed-form binomial
variance for the inner stage, KS tests against exact start-point laws,
agreement between the direct and splitting estimators, and exactness of
the two-batch debiasing identity at lambda = 1.  Coupling tests assert
monotonicity replica by replica, not just in the mean.
"""

import math

import numpy as np
import pytest
from scipy import stats

from loopsoup.clusters import build_clusters, enlarge
from loopsoup.estimators import (ConeDecayFit, Environment,
                                 ExperimentConfig, cone_confinement_decay,
                                 coupled_replica, coupled_series,
                                 estimate_p, estimate_p_splitting,
                                 estimate_Z, sample_environment,
                                 sample_z_block, separation_stats,
                                 series_from_blocks)
from loopsoup.rng import RngStream
from loopsoup.soup import LoopSoup


def base_cfg(**kw):
    kw.setdefault("alpha", 0.0)
    kw.setdefault("k", 1)
    kw.setdefault("lambda_list", (1.0,))
    kw.setdefault("r_grid", (1.0,))
    kw.setdefault("outer_n", 6)
    kw.setdefault("inner_m", 4)
    kw.setdefault("delta", 0.02)
    kw.setdefault("h", 0.3)
    kw.setdefault("seed", RngStream(501, 0))
    return ExperimentConfig(**kw)


def fibonacci_shell(radius, n):
    """n points quasi-uniform on the sphere, as one closed polyline."""
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    s = np.sqrt(1.0 - z * z)
    pts = radius * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    return np.concatenate([pts, pts[:1]], axis=0)


class TestConfigValidation:
    def test_bad_values_raise(self):
        for kw in ({"alpha": -0.1}, {"k": 0}, {"lambda_list": ()},
                   {"lambda_list": (0.0,)}, {"r_grid": ()},
                   {"r_grid": (2.0, 1.0)}, {"r_grid": (-1.0,)},
                   {"outer_n": 0}, {"inner_m": 0}, {"delta": 0.0},
                   {"h": -1.0}):
            with pytest.raises(ValueError):
                base_cfg(**kw)
        with pytest.raises(TypeError):
            base_cfg(seed=12345)


class TestEnvironment:
    def test_r_zero_points_and_empty_soup(self):
        cfg = base_cfg(alpha=0.2, k=3)
        env = sample_environment(cfg, 0.0, cfg.seed.child(1))
        assert env.soup.n_loops == 0
        assert len(env.paths) == 3
        for p in env.paths:
            assert p.pts.shape == (1, 3)
            assert abs(np.linalg.norm(p.pts[0]) - 1.0) < 1e-12
        assert estimate_Z(env, 5, cfg.seed.child(2)) == 1.0

    def test_alpha_zero_obstacle_is_paths(self):
        cfg = base_cfg(alpha=0.0, k=2)
        env = sample_environment(cfg, 1.0, cfg.seed.child(3))
        assert env.soup.n_loops == 0
        assert len(env.enlargement.attached) == 0
        assert len(env.enlargement.base) == 2

    def test_paths_stopped_on_target_sphere(self):
        cfg = base_cfg(k=2)
        env = sample_environment(cfg, 1.5, cfg.seed.child(4))
        for p in env.paths:
            assert abs(np.linalg.norm(p.pts[-1]) - math.exp(1.5)) < 1e-9

    def test_starts_uniform_and_independent(self):
        # distributional oracle: z-coordinate of a uniform sphere point
        # is U[-1, 1]; two paths' starts are independent
        cfg = base_cfg(alpha=0.0, k=2)
        n = 10_000
        a = np.empty((n, 3))
        b = np.empty((n, 3))
        for rep in range(n):
            env = sample_environment(cfg, 0.0, cfg.seed.child(5, rep))
            a[rep] = env.paths[0].pts[0]
            b[rep] = env.paths[1].pts[0]
        for arr in (a, b):
            for ax in range(3):
                ks = stats.kstest(arr[:, ax], stats.uniform(-1, 2).cdf)
                assert ks.pvalue > 1e-4
        corr = np.corrcoef(a[:, 2], b[:, 2])[0, 1]
        assert abs(corr) < 4.0 / math.sqrt(n)
        dots = np.abs((a * b).sum(axis=1))
        assert dots.max() > 1e-12     # distinct points

    def test_negative_r_raises(self):
        cfg = base_cfg()
        with pytest.raises(ValueError):
            sample_environment(cfg, -1.0, cfg.seed.child(6))


class TestEstimateZ:
    def test_enclosing_shell_blocks_everything(self):
        # an obstacle shell thicker than the tolerance between S_0 and
        # S_r forces every inner path to intersect: Z = 0 exactly
        shell = fibonacci_shell(1.5, 3000)
        idx = build_clusters(LoopSoup(loops=(), config=None, raw_count=0),
                             0.3)
        env_obj = enlarge([shell], idx)
        env = Environment(r=1.0, paths=(), soup=idx.soup, index=idx,
                          enlargement=env_obj, delta=0.02, h=0.3)
        assert estimate_Z(env, 20, RngStream(502, 0)) == 0.0

    def test_variance_halves_when_inner_doubles(self):
        # binomial oracle: Var(Z_hat | env) = Z(1-Z)/m, so doubling the
        # inner sample size halves the conditional variance
        cfg = base_cfg(alpha=0.1, inner_m=5)
        env = sample_environment(cfg, 1.0, RngStream(503, 1))
        trials = 300
        st = RngStream(503, 2)
        z1 = np.array([estimate_Z(env, 5, st.child(0, t))
                       for t in range(trials)])
        z2 = np.array([estimate_Z(env, 10, st.child(1, t))
                       for t in range(trials)])
        v1, v2 = z1.var(ddof=1), z2.var(ddof=1)
        assert v2 > 0.0
        assert 1.4 < v1 / v2 < 2.9
        # both consistent with the closed form at the pooled mean
        zc = 0.5 * (z1.mean() + z2.mean())
        assert abs(v1 - zc * (1 - zc) / 5) < 0.35 * zc * (1 - zc) / 5


class TestDirectEstimator:
    def test_p_at_r_zero_is_one(self):
        cfg = base_cfg(alpha=0.3, k=2, lambda_list=(0.5, 1.0, 2.0),
                       r_grid=(0.0,), outer_n=5, inner_m=3)
        ser = estimate_p(cfg)
        for c in ser.cells:
            assert c.p_hat == 1.0 and c.p_raw == 1.0 and c.stderr == 0.0

    def test_lambda_one_debias_is_plain_mean(self):
        cfg = base_cfg(alpha=0.1, lambda_list=(0.7, 1.0, 1.6),
                       r_grid=(1.0, 2.0), outer_n=8, inner_m=4,
                       seed=RngStream(504, 0))
        ser = estimate_p(cfg)
        for r in ser.radii:
            c = ser.cell(r, 1.0)
            assert c.p_hat == c.p_raw

    def test_raw_monotone_in_lambda_on_shared_samples(self):
        cfg = base_cfg(alpha=0.05, lambda_list=(0.5, 1.0, 2.0, 4.0),
                       r_grid=(1.0,), outer_n=10, inner_m=5,
                       seed=RngStream(505, 0))
        ser = estimate_p(cfg)
        raws = [ser.cell(1.0, lam).p_raw for lam in (0.5, 1.0, 2.0, 4.0)]
        assert all(x >= y - 1e-15 for x, y in zip(raws, raws[1:]))

    def test_cells_in_range(self):
        cfg = base_cfg(alpha=0.1, lambda_list=(0.5, 2.0),
                       r_grid=(1.0, 2.0), outer_n=6, inner_m=3,
                       seed=RngStream(506, 0))
        ser = estimate_p(cfg)
        assert len(ser.cells) == 4
        for c in ser.cells:
            assert 0.0 <= c.p_hat <= 1.0
            assert c.stderr >= 0.0
            assert 0 <= c.n_avoiding <= c.outer_n

    def test_deterministic_and_blockwise_mergeable(self):
        cfg = base_cfg(alpha=0.1, lambda_list=(1.0, 2.0), r_grid=(1.0,),
                       outer_n=7, inner_m=3, seed=RngStream(507, 0))
        s1 = estimate_p(cfg)
        s2 = estimate_p(cfg)
        assert s1 == s2
        merged = series_from_blocks(cfg, [sample_z_block(cfg, 3, 7),
                                          sample_z_block(cfg, 0, 3)])
        assert merged == s1

    def test_overlapping_blocks_rejected(self):
        cfg = base_cfg(outer_n=4, seed=RngStream(508, 0))
        with pytest.raises(ValueError):
            series_from_blocks(cfg, [sample_z_block(cfg, 0, 2),
                                     sample_z_block(cfg, 1, 3)])

    def test_jsonl_records(self):
        cfg = base_cfg(alpha=0.1, r_grid=(1.0,), outer_n=4, inner_m=2,
                       seed=RngStream(509, 0))
        ser = estimate_p(cfg)
        recs = ser.to_records(estimator="direct", seed="509:0")
        assert len(recs) == len(ser.cells)
        need = {"alpha", "k", "lambda", "r", "p_hat", "stderr", "outer_n",
                "inner_m", "delta", "h", "seed", "estimator",
                "extrapolated"}
        for rec in recs:
            assert need <= set(rec)
        assert recs[0]["p_hat"] == ser.cells[0].p_hat


class TestCoupledEstimator:
    def test_replicawise_monotone_alpha_k_r(self):
        # shared-randomness couplings: thinning in alpha, path addition
        # in k, extension in r; each must be monotone on every replica
        for rep in range(6):
            tab = coupled_replica(
                RngStream(510, rep), alphas=(0.0, 0.05, 0.12), k_max=2,
                n_levels=3, inner_2m=16, delta=0.02, h=0.3)
            assert (np.diff(tab.z, axis=0) <= 1e-12).all()
            assert (np.diff(tab.z, axis=1) <= 1e-12).all()
            assert (np.diff(tab.z, axis=2) <= 1e-12).all()
            assert (np.diff(tab.z_half, axis=1) <= 1e-12).all()
            assert (tab.z >= 0.0).all() and (tab.z <= 1.0).all()

    def test_absolute_mode_couples_too(self):
        tab = coupled_replica(RngStream(511, 0), alphas=(0.0, 0.1),
                              k_max=1, n_levels=2, inner_2m=12,
                              delta=0.02, h=0.3, scaled=False)
        assert (np.diff(tab.z, axis=0) <= 1e-12).all()

    def test_coupled_series_cell_monotonicity(self):
        cfg = base_cfg(alpha=0.1, lambda_list=(1.0,), r_grid=(1.0, 2.0),
                       outer_n=5, inner_m=6, seed=RngStream(512, 0))
        out, tabs = coupled_series(cfg, alphas=(0.0, 0.1), k_list=(1, 2))
        assert len(tabs) == 5
        for r in (1.0, 2.0):
            assert out[(0.0, 1)].cell(r, 1.0).p_raw >= \
                out[(0.1, 1)].cell(r, 1.0).p_raw - 1e-12
            assert out[(0.0, 1)].cell(r, 1.0).p_raw >= \
                out[(0.0, 2)].cell(r, 1.0).p_raw - 1e-12
        for key in out:
            assert out[key].cell(1.0, 1.0).p_raw >= \
                out[key].cell(2.0, 1.0).p_raw - 1e-12

    def test_alpha_order_enforced(self):
        with pytest.raises(ValueError):
            coupled_replica(RngStream(513, 0), alphas=(0.1, 0.0),
                            k_max=1, n_levels=1, inner_2m=4, delta=0.02,
                            h=0.3)


class TestSplittingEstimator:
    def test_preconditions(self):
        with pytest.raises(ValueError):
            estimate_p_splitting(base_cfg(lambda_list=(2.0,)))
        with pytest.raises(ValueError):
            estimate_p_splitting(base_cfg(r_grid=(1.5,)))

    def test_single_level_matches_direct(self):
        # at one level the splitting run is outer_n*inner_m independent
        # (environment, probe) pairs: same estimand as the direct form
        cfg_s = base_cfg(r_grid=(1,), outer_n=40, inner_m=5,
                         seed=RngStream(514, 0))
        sp = estimate_p_splitting(cfg_s)
        assert sp.population == 200
        cfg_d = base_cfg(r_grid=(1.0,), outer_n=100, inner_m=2,
                         seed=RngStream(514, 1))
        dd = estimate_p(cfg_d)
        cs, cd = sp.series.cell(1.0, 1.0), dd.cell(1.0, 1.0)
        gap = abs(cs.p_hat - cd.p_hat)
        assert gap < 3.0 * math.hypot(cs.stderr, cd.stderr)

    def test_matches_direct_at_r3(self):
        # cross-estimator consistency oracle at alpha = 0, r = 3
        cfg_s = base_cfg(r_grid=(3,), outer_n=150, inner_m=4,
                         seed=RngStream(515, 0))
        sp = estimate_p_splitting(cfg_s)
        assert sp.extinct_level == 0
        cfg_d = base_cfg(r_grid=(3.0,), outer_n=250, inner_m=2,
                         seed=RngStream(515, 1))
        dd = estimate_p(cfg_d)
        cs, cd = sp.series.cell(3.0, 1.0), dd.cell(3.0, 1.0)
        gap = abs(cs.p_hat - cd.p_hat)
        assert gap < 3.0 * math.hypot(cs.stderr, cd.stderr)

    def test_survival_ratios_stabilize(self):
        cfg = base_cfg(r_grid=(5,), outer_n=100, inner_m=4,
                       seed=RngStream(516, 0))
        sp = estimate_p_splitting(cfg)
        n = sp.population
        q4, q5 = sp.ratios[3], sp.ratios[4]
        se = math.sqrt(q4 * (1 - q4) / n + q5 * (1 - q5) / n)
        assert abs(q5 - q4) < 2.0 * se

    def test_extinction_reported(self):
        # percolating absolute-tolerance soup at high intensity smothers
        # a tiny population within a level or two
        cfg = base_cfg(alpha=0.45, r_grid=(4,), outer_n=2, inner_m=2,
                       h=0.5, scaled=False, seed=RngStream(517, 0))
        sp = estimate_p_splitting(cfg)
        assert sp.extinct_level >= 1
        assert len(sp.ratios) == sp.extinct_level
        c = sp.series.cell(4.0, 1.0)
        assert c.p_hat == 0.0 and c.stderr == 0.0


class TestSeparation:
    def test_preconditions(self):
        with pytest.raises(ValueError):
            separation_stats(base_cfg(k=2, r_grid=(2.0,)))
        with pytest.raises(ValueError):
            separation_stats(base_cfg(r_grid=(0.5,)))

    def test_rows_and_quality_curves(self):
        cfg = base_cfg(alpha=0.0, r_grid=(2.0,), outer_n=300,
                       seed=RngStream(518, 0))
        st = separation_stats(cfg)
        row = st.rows[0]
        assert row.n_avoiding >= 50 and not row.low_confidence
        # quality curve: nested events, nonincreasing in eps, and the
        # contact tolerance forces a positive gap floor h e^{-r}
        assert all(x >= y for x, y in zip(row.q_eps, row.q_eps[1:]))
        assert row.q_eps[0] == 1.0
        q10, q50, q90 = row.gap_quantiles
        assert 0.0 < q10 <= q50 <= q90
        assert q10 > 0.3 * math.exp(-2.0) * 0.999
        assert row.sep_count >= 1
        lo, hi = row.sep_ci
        assert 0.0 <= lo <= row.sep_freq <= hi <= 1.0
        assert st.min_sep_freq == row.sep_freq

    def test_low_confidence_flag(self):
        cfg = base_cfg(alpha=0.0, r_grid=(2.0,), outer_n=40,
                       seed=RngStream(519, 0))
        st = separation_stats(cfg)
        assert st.rows[0].n_avoiding < 50
        assert st.rows[0].low_confidence


class TestConeDecay:
    def test_validation(self):
        for grid in ((), (0.0,), (0.6,), (-0.1, 0.2)):
            with pytest.raises(ValueError):
                cone_confinement_decay(RngStream(520, 0), grid,
                                       n_samples=2, delta=0.02)

    def test_alpha_zero_cluster_event_is_certain(self):
        fit = cone_confinement_decay(RngStream(521, 0), (0.25,),
                                     n_samples=30, delta=0.02)
        assert fit.cluster_freq == (1.0,)

    def test_monotone_in_eps(self):
        # nested events: larger ball allowance can only help
        fit = cone_confinement_decay(RngStream(522, 0), (0.1, 0.5),
                                     n_samples=800, delta=0.01)
        assert fit.path_freq[1] > fit.path_freq[0]

    def test_loglog_fit_quality(self):
        # polynomial-decay oracle: the confinement probability follows
        # c1 * eps^c2, so the log-log fit should be close to linear
        grid = (0.25, 0.125, 0.0625, 0.03125)
        fit = cone_confinement_decay(RngStream(523, 0), grid,
                                     n_samples=10_000, delta=0.01)
        assert isinstance(fit, ConeDecayFit)
        assert not fit.zero_cells
        assert fit.c2_hat > 0.0
        assert fit.r_squared > 0.9

    def test_cluster_event_with_soup(self):
        fit = cone_confinement_decay(RngStream(524, 0), (0.25,),
                                     n_samples=10, delta=0.02, alpha=0.15,
                                     cluster_samples=30)
        assert 0.0 <= fit.cluster_freq[0] <= 1.0
