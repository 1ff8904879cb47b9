"""Backend equivalence and brute-force oracles for the hot kernels.

Every public kernel is checked two ways: against a direct brute-force
reimplementation (correctness) and across the two backends (bit-for-bit
parity).  Parity failures point at a real arithmetic divergence, so the
comparisons are exact, not approximate.
"""

import numpy as np
import pytest

from loopsoup._kernels import _pycore as py

try:
    from loopsoup._kernels import _core as cy
except ImportError:
    cy = None

BACKENDS = [pytest.param(py, id="python")]
if cy is not None:
    BACKENDS.append(pytest.param(cy, id="compiled"))

needs_both = pytest.mark.skipif(cy is None, reason="compiled backend missing")


# ---------------------------------------------------------------------------
# helpers


def random_polyline(gen, n, center, spread, jitter=0.3):
    steps = gen.normal(size=(n - 1, 3)) * jitter * spread
    pts = np.concatenate([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
    return np.asarray(center) + pts * (spread / (1.0 + np.abs(pts).max()))


def random_loop(gen, n, center, spread):
    pts = random_polyline(gen, n, center, spread)
    pts[-1] = pts[0]
    return pts


def brute_contacts(h, objs, qpts, qscales, skip_tag):
    """found[(tag, aux)] = min query segment touching the object."""
    found = {}
    for opts, oscl, tag, aux in objs:
        if tag == skip_tag:
            continue
        for qi in range(qpts.shape[0] - 1):
            hit = False
            for oj in range(opts.shape[0] - 1):
                tol = h * min(qscales[qi], oscl[oj])
                d = py.seg_seg_distance(qpts[qi], qpts[qi + 1],
                                        opts[oj], opts[oj + 1])
                if d <= tol:
                    hit = True
                    break
            if hit:
                key = (tag, aux)
                if key not in found or qi < found[key]:
                    found[key] = qi
                break
    return found


def grid_pair(objs, h=0.05, cell0=0.08, lvl_lo=0, lvl_hi=8):
    """The same grid built in both backends."""
    grids = [py.ProximityGrid(h, cell0, lvl_lo, lvl_hi)]
    if cy is not None:
        grids.append(cy.ProximityGrid(h, cell0, lvl_lo, lvl_hi))
    for g in grids:
        for opts, oscl, tag, aux in objs:
            g.add_object(opts, oscl, tag, aux)
        g.build()
    return grids


def make_objects(gen, n_obj, span=6.0):
    objs = []
    for k in range(n_obj):
        center = gen.uniform(-span, span, size=3)
        spread = float(gen.uniform(0.05, 1.5))
        n = int(gen.integers(2, 24))
        pts = random_polyline(gen, max(n, 2), center, spread)
        scl = gen.uniform(0.2, 2.0, size=pts.shape[0] - 1)
        objs.append((pts, scl, k, int(gen.integers(0, 5))))
    return objs


# ---------------------------------------------------------------------------
# segment distances


@needs_both
class TestDistanceParity:
    def test_seg_seg_random(self):
        gen = np.random.default_rng(11)
        for _ in range(4000):
            scale = 10.0 ** gen.integers(-3, 4)
            pts = gen.normal(size=(4, 3)) * scale
            a = py.seg_seg_distance(pts[0], pts[1], pts[2], pts[3])
            b = cy.seg_seg_distance(pts[0], pts[1], pts[2], pts[3])
            assert a == b

    def test_seg_seg_degenerate(self):
        gen = np.random.default_rng(12)
        for _ in range(800):
            pts = gen.normal(size=(4, 3))
            # collapse one or both segments to points
            if gen.random() < 0.5:
                pts[1] = pts[0]
            if gen.random() < 0.5:
                pts[3] = pts[2]
            a = py.seg_seg_distance(pts[0], pts[1], pts[2], pts[3])
            b = cy.seg_seg_distance(pts[0], pts[1], pts[2], pts[3])
            assert a == b

    def test_seg_seg_parallel_and_touching(self):
        gen = np.random.default_rng(13)
        for _ in range(800):
            p = gen.normal(size=3)
            d = gen.normal(size=3)
            s = gen.uniform(-2, 2)
            off = gen.normal(size=3) * gen.choice([0.0, 1e-12, 1.0])
            q1 = p + d
            p2 = p + s * d + off
            q2 = p2 + gen.uniform(0.1, 2.0) * d
            a = py.seg_seg_distance(p, q1, p2, q2)
            b = cy.seg_seg_distance(p, q1, p2, q2)
            assert a == b

    def test_polyline_min_distance(self):
        gen = np.random.default_rng(14)
        for _ in range(120):
            na = int(gen.integers(1, 80))
            nb = int(gen.integers(1, 80))
            a = random_polyline(gen, max(na, 1) + 1, gen.normal(size=3), 1.0)
            b = random_polyline(gen, max(nb, 1) + 1,
                                gen.normal(size=3) * gen.uniform(0, 3), 1.0)
            if na == 1:
                a = a[:1]
            if nb == 1:
                b = b[:1]
            assert py.polyline_min_distance(a, b) == \
                cy.polyline_min_distance(a, b)

    def test_polyline_point_distance(self):
        gen = np.random.default_rng(15)
        for _ in range(300):
            n = int(gen.integers(1, 40))
            a = random_polyline(gen, max(n, 2), gen.normal(size=3), 1.0)
            if n == 1:
                a = a[:1]
            q = gen.normal(size=3) * 2
            assert py.polyline_point_distance(a, q) == \
                cy.polyline_point_distance(a, q)


# ---------------------------------------------------------------------------
# proximity grid


class TestGridOracle:
    """Grid results equal an all-pairs scan with the same tolerance rule."""

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_query_contacts_matches_brute_force(self, impl):
        gen = np.random.default_rng(21)
        for trial in range(6):
            objs = make_objects(gen, 40, span=4.0)
            g = impl.ProximityGrid(0.08, 0.1, 0, 8)
            for opts, oscl, tag, aux in objs:
                g.add_object(opts, oscl, tag, aux)
            g.build()
            qpts = random_polyline(gen, 60, gen.uniform(-3, 3, 3), 3.0)
            qscl = gen.uniform(0.2, 2.0, size=qpts.shape[0] - 1)
            skip = int(gen.integers(-1, 6))
            tags, auxs, qsegs = g.query_contacts(qpts, qscl, skip_tag=skip)
            expect = brute_contacts(0.08, objs, qpts, qscl, skip)
            got = {(int(t), int(x)): int(q)
                   for t, x, q in zip(tags, auxs, qsegs)}
            assert got == expect

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_query_any_matches_brute_force(self, impl):
        gen = np.random.default_rng(22)
        hits = 0
        for trial in range(20):
            objs = make_objects(gen, 25, span=2.0)
            g = impl.ProximityGrid(0.15, 0.1, 0, 8)
            for opts, oscl, tag, aux in objs:
                g.add_object(opts, oscl, tag, aux)
            g.build()
            qpts = random_polyline(gen, 25, gen.uniform(-2, 2, 3), 2.0)
            qscl = gen.uniform(0.2, 2.0, size=qpts.shape[0] - 1)
            expect = bool(brute_contacts(0.15, objs, qpts, qscl, -1))
            assert g.query_any(qpts, qscl) == expect
            hits += expect
        assert 0 < hits < 20    # both outcomes exercised

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_self_edges_match_brute_force(self, impl):
        gen = np.random.default_rng(23)
        for trial in range(4):
            objs = make_objects(gen, 28, span=2.5)
            g = impl.ProximityGrid(0.1, 0.1, 0, 8)
            for opts, oscl, tag, aux in objs:
                g.add_object(opts, oscl, tag, 0)
            g.build()
            ei, ej = g.collect_self_edges(0, 28)
            expect = set()
            for i in range(len(objs)):
                for j in range(i + 1, len(objs)):
                    pi, si_, _, _ = objs[i]
                    pj, sj, _, _ = objs[j]
                    hit = False
                    for u in range(pi.shape[0] - 1):
                        for v in range(pj.shape[0] - 1):
                            tol = 0.1 * min(si_[u], sj[v])
                            if py.seg_seg_distance(pi[u], pi[u + 1],
                                                   pj[v], pj[v + 1]) <= tol:
                                hit = True
                                break
                        if hit:
                            break
                    if hit:
                        expect.add((i, j))
            assert set(zip(ei.tolist(), ej.tolist())) == expect

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_validation_errors(self, impl):
        g = impl.ProximityGrid(0.05, 0.1, 0, 8)
        with pytest.raises(ValueError):
            g.add_object(np.zeros((1, 3)), np.zeros(0), 0, 0)
        with pytest.raises(ValueError):
            g.add_object(np.zeros((3, 3)), np.ones(1), 0, 0)
        with pytest.raises(ValueError):
            g.add_object(np.zeros((2, 3)), np.ones(1), 1 << 40, 0)
        with pytest.raises(ValueError):
            g.add_object(np.zeros((2, 3)), np.ones(1), 0, 1 << 20)
        with pytest.raises(ValueError):
            impl.ProximityGrid(0.05, 0.1, 3, 2)
        with pytest.raises(ValueError):
            impl.ProximityGrid(0.05, 0.1, 0, 80)
        with pytest.raises(OverflowError):
            g2 = impl.ProximityGrid(0.05, 1e-4, 0, 0)
            g2.add_object(np.array([[9e3, 0, 0], [9e3, 0, 1e-4]]),
                          np.array([1e-3]), 0, 0)

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_empty_grid(self, impl):
        g = impl.ProximityGrid(0.05, 0.1, 0, 8)
        g.build()
        q = np.array([[0.0, 0, 0], [1, 0, 0]])
        tags, auxs, qsegs = g.query_contacts(q, np.ones(1))
        assert tags.shape == (0,)
        assert not g.query_any(q, np.ones(1))
        ei, ej = g.collect_self_edges(0, 10)
        assert ei.shape == (0,)


@needs_both
class TestGridParity:
    def test_contacts_identical(self):
        gen = np.random.default_rng(31)
        for trial in range(5):
            objs = make_objects(gen, 120, span=8.0)
            gp, gc = grid_pair(objs)
            for _ in range(12):
                qpts = random_polyline(gen, 80, gen.uniform(-6, 6, 3), 4.0)
                qscl = gen.uniform(0.2, 2.0, size=qpts.shape[0] - 1)
                rp = gp.query_contacts(qpts, qscl)
                rc = gc.query_contacts(qpts, qscl)
                for a, b in zip(rp, rc):
                    assert np.array_equal(a, b)
                assert gp.query_any(qpts, qscl) == gc.query_any(qpts, qscl)

    def test_self_edges_identical(self):
        gen = np.random.default_rng(32)
        objs = make_objects(gen, 250, span=5.0)
        gp, gc = grid_pair(objs, h=0.08)
        ep = gp.collect_self_edges(0, 250)
        ec = gc.collect_self_edges(0, 250)
        assert np.array_equal(ep[0], ec[0])
        assert np.array_equal(ep[1], ec[1])

    def test_incremental_adds(self):
        gen = np.random.default_rng(33)
        objs = make_objects(gen, 30)
        gp, gc = grid_pair(objs[:10])
        q = random_polyline(gen, 40, np.zeros(3), 5.0)
        qs = np.ones(q.shape[0] - 1)
        r1 = (gp.query_contacts(q, qs), gc.query_contacts(q, qs))
        assert all(np.array_equal(a, b) for a, b in zip(*r1))
        for g in (gp, gc):
            for opts, oscl, tag, aux in objs[10:]:
                g.add_object(opts, oscl, tag, aux)
        r2 = (gp.query_contacts(q, qs), gc.query_contacts(q, qs))
        assert all(np.array_equal(a, b) for a, b in zip(*r2))
        assert r2[0][0].shape[0] >= r1[0][0].shape[0]


# ---------------------------------------------------------------------------
# walkers


def fresh_state(impl, x0, delta, r_lo=0.0, budget=np.inf, adaptive=True,
                exempt=False, t0=0.0):
    sf = np.zeros(py.SF_SIZE)
    si = np.zeros(py.SI_SIZE, dtype=np.int64)
    sf[py.SF_X], sf[py.SF_Y], sf[py.SF_Z] = x0
    sf[py.SF_T] = t0
    sf[py.SF_R] = float(np.sqrt(np.dot(x0, x0)))
    sf[py.SF_DELTA] = delta
    sf[py.SF_RLO] = r_lo
    sf[py.SF_BUDGET] = budget
    si[py.SI_ADAPTIVE] = 1 if adaptive else 0
    si[py.SI_FIRST_EXEMPT] = 1 if exempt else 0
    return sf, si


def run_out_both(x0, radii, delta, seed, blocks=6, block_rows=256, **kw):
    """Drive both backends block by block on one shared random tape."""
    gen = np.random.default_rng(seed)
    tapes = [(gen.standard_normal((block_rows, 3)), gen.random(block_rows))
             for _ in range(blocks)]
    results = []
    for impl in (py, cy):
        sf, si = fresh_state(impl, x0, delta, **kw)
        rows_all, counts = [], []
        cross = np.full(len(radii), -1, dtype=np.int64)
        for norms, unifs in tapes:
            if si[py.SI_STATUS] != py.W_RUNNING:
                break
            cap = block_rows + len(radii) + 4
            out_t = np.empty(cap)
            out_xyz = np.empty((cap, 3))
            bc = np.full(len(radii), -1, dtype=np.int64)
            r, nn, nu = impl.walk_out_block(
                sf, si, np.asarray(radii, dtype=np.float64), norms, unifs,
                out_t, out_xyz, bc)
            counts.append((r, nn, nu))
            rows_all.append(np.hstack([out_t[:r, None], out_xyz[:r]]))
            sel = bc >= 0
            cross[sel] = bc[sel]
        results.append((sf.copy(), si.copy(), counts,
                        np.concatenate(rows_all) if rows_all else
                        np.zeros((0, 4)), cross))
    return results


@needs_both
class TestWalkerParity:
    def test_outward_walks_bitwise_identical(self):
        gen = np.random.default_rng(41)
        for trial in range(60):
            r0 = float(gen.uniform(0.5, 2.0))
            x0 = gen.normal(size=3)
            x0 *= r0 / np.sqrt(x0 @ x0)
            n_grid = int(gen.integers(1, 6))
            radii = r0 * np.cumprod(gen.uniform(1.2, 2.0, size=n_grid))
            delta = float(gen.uniform(0.002, 0.05))
            kw = {}
            if gen.random() < 0.4:
                kw["r_lo"] = r0 * float(gen.uniform(0.3, 0.95))
            if gen.random() < 0.3:
                kw["budget"] = float(gen.uniform(0.5, 5.0))
            if gen.random() < 0.3:
                kw["exempt"] = True
                kw["r_lo"] = r0
            if gen.random() < 0.2:
                kw["adaptive"] = False
            rp, rc = run_out_both(x0, radii, delta, seed=trial + 100, **kw)
            assert np.array_equal(rp[0], rc[0])          # float state
            assert np.array_equal(rp[1], rc[1])          # int state
            assert rp[2] == rc[2]                        # consumption
            assert np.array_equal(rp[3], rc[3])          # trajectory rows
            assert np.array_equal(rp[4], rc[4])          # crossing rows

    def test_inward_walks_bitwise_identical(self):
        gen = np.random.default_rng(42)
        for trial in range(40):
            r0 = float(gen.uniform(1.0, 3.0))
            x0 = gen.normal(size=3)
            x0 *= r0 / np.sqrt(x0 @ x0)
            r_target = r0 * float(gen.uniform(0.2, 0.8))
            r_hi = r0 * float(gen.uniform(1.5, 4.0)) if gen.random() < 0.7 \
                else 0.0
            delta = float(gen.uniform(0.002, 0.05))
            g = np.random.default_rng(trial + 500)
            tapes = [(g.standard_normal((256, 3)), g.random(256))
                     for _ in range(6)]
            outs = []
            for impl in (py, cy):
                sf, si = fresh_state(impl, x0, delta)
                acc, counts = [], []
                for norms, unifs in tapes:
                    if si[py.SI_STATUS] != py.W_RUNNING:
                        break
                    out_t = np.empty(260)
                    out_xyz = np.empty((260, 3))
                    r, nn, nu = impl.walk_in_block(
                        sf, si, r_target, r_hi, norms, unifs, out_t, out_xyz)
                    counts.append((r, nn, nu))
                    acc.append(np.hstack([out_t[:r, None], out_xyz[:r]]))
                outs.append((sf.copy(), si.copy(), counts,
                             np.concatenate(acc)))
            assert np.array_equal(outs[0][0], outs[1][0])
            assert np.array_equal(outs[0][1], outs[1][1])
            assert outs[0][2] == outs[1][2]
            assert np.array_equal(outs[0][3], outs[1][3])

    def test_capacity_break_resumes_identically(self):
        # tiny output buffers force mid-block returns with W_RUNNING
        gen = np.random.default_rng(43)
        x0 = np.array([1.0, 0.0, 0.0])
        radii = np.array([1.5, 2.0])
        tape_n = gen.standard_normal((4000, 3))
        tape_u = gen.random(4000)
        outs = []
        for impl in (py, cy):
            sf, si = fresh_state(impl, x0, 0.01)
            used_n = used_u = 0
            acc = []
            cross = np.full(2, -1, dtype=np.int64)
            guard = 0
            while si[py.SI_STATUS] == py.W_RUNNING:
                out_t = np.empty(7)
                out_xyz = np.empty((7, 3))
                bc = np.full(2, -1, dtype=np.int64)
                r, nn, nu = impl.walk_out_block(
                    sf, si, radii, tape_n[used_n:], tape_u[used_u:],
                    out_t, out_xyz, bc)
                used_n += nn
                used_u += nu
                acc.append(np.hstack([out_t[:r, None], out_xyz[:r]]))
                sel = bc >= 0
                cross[sel] = bc[sel]
                guard += 1
                assert guard < 4000
            outs.append((sf.copy(), si.copy(), used_n, used_u,
                         np.concatenate(acc), cross))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])
        assert outs[0][2:4] == outs[1][2:4]
        assert np.array_equal(outs[0][4], outs[1][4])
        assert np.array_equal(outs[0][5], outs[1][5])
        assert outs[0][1][py.SI_STATUS] == py.W_HIT


# ---------------------------------------------------------------------------
# attachment sweep


def brute_attached(birth, mark, alpha_frac, edges, seeds, n_slots):
    n = birth.shape[0]
    out = np.zeros((n_slots, n), dtype=np.uint8)
    alive_at = np.where(mark < alpha_frac, birth, n_slots)
    for r in range(n_slots):
        alive = set(np.nonzero(alive_at <= r)[0].tolist())
        adj = {k: [] for k in alive}
        for i, j in edges:
            if i in alive and j in alive:
                adj[i].append(j)
                adj[j].append(i)
        frontier = [l for l, s in seeds
                    if l in alive and max(s, alive_at[l]) <= r]
        seen = set(frontier)
        while frontier:
            k = frontier.pop()
            for m in adj[k]:
                if m not in seen:
                    seen.add(m)
                    frontier.append(m)
        for k in seen:
            out[r, k] = 1
    return out


class TestAttachedSweep:
    @pytest.mark.parametrize("impl", BACKENDS)
    def test_matches_brute_force(self, impl):
        gen = np.random.default_rng(51)
        for trial in range(8):
            n = int(gen.integers(5, 220))
            n_slots = int(gen.integers(1, 9))
            birth = gen.integers(0, n_slots, size=n).astype(np.int64)
            mark = gen.random(n)
            af = float(gen.uniform(0.2, 1.0))
            n_e = int(gen.integers(0, 3 * n))
            ei = gen.integers(0, n, size=n_e).astype(np.int64)
            ej = gen.integers(0, n, size=n_e).astype(np.int64)
            keep = ei != ej
            ei, ej = ei[keep], ej[keep]
            n_s = int(gen.integers(0, max(n // 4, 1)))
            sl = gen.integers(0, n, size=n_s).astype(np.int64)
            ss = gen.integers(0, n_slots, size=n_s).astype(np.int64)
            got = impl.attached_sweep(birth, mark, af, ei, ej, sl, ss,
                                      n_slots)
            expect = brute_attached(birth, mark, af,
                                    list(zip(ei.tolist(), ej.tolist())),
                                    list(zip(sl.tolist(), ss.tolist())),
                                    n_slots)
            assert np.array_equal(got, expect)

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_monotone_in_slot(self, impl):
        gen = np.random.default_rng(52)
        n, n_slots = 150, 7
        birth = gen.integers(0, n_slots, size=n).astype(np.int64)
        mark = gen.random(n)
        ei = gen.integers(0, n, size=300).astype(np.int64)
        ej = gen.integers(0, n, size=300).astype(np.int64)
        keep = ei != ej
        sl = gen.integers(0, n, size=20).astype(np.int64)
        ss = gen.integers(0, n_slots, size=20).astype(np.int64)
        out = impl.attached_sweep(birth, mark, 0.6, ei[keep], ej[keep],
                                  sl, ss, n_slots)
        for r in range(1, n_slots):
            assert np.all(out[r] >= out[r - 1])

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_empty(self, impl):
        z = np.zeros(0, dtype=np.int64)
        out = impl.attached_sweep(z, np.zeros(0), 0.5, z, z, z, z, 4)
        assert out.shape == (4, 0)

    @needs_both
    def test_parity_large(self):
        gen = np.random.default_rng(53)
        n, n_slots = 3000, 10
        birth = gen.integers(0, n_slots, size=n).astype(np.int64)
        mark = gen.random(n)
        ei = gen.integers(0, n, size=9000).astype(np.int64)
        ej = gen.integers(0, n, size=9000).astype(np.int64)
        keep = ei != ej
        sl = gen.integers(0, n, size=200).astype(np.int64)
        ss = gen.integers(0, n_slots, size=200).astype(np.int64)
        a = py.attached_sweep(birth, mark, 0.7, ei[keep], ej[keep], sl, ss,
                              n_slots)
        b = cy.attached_sweep(birth, mark, 0.7, ei[keep], ej[keep], sl, ss,
                              n_slots)
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# trace scans


class TestTraceScans:
    @pytest.mark.parametrize("impl", BACKENDS)
    def test_scans_match_numpy(self, impl):
        gen = np.random.default_rng(61)
        for trial in range(40):
            n = int(gen.integers(2, 400))
            pts = np.cumsum(gen.normal(size=(n, 3)) * 0.3,
                            axis=0).astype(np.float32)
            center = gen.normal(size=3)
            dist = np.sqrt(((pts.astype(np.float64) - center) ** 2)
                           .sum(axis=1))
            R = float(np.quantile(dist, gen.random()))
            i_from = int(gen.integers(0, n))
            back = impl.scan_back_geq(pts, center, R, i_from)
            cand = np.nonzero(dist[:i_from + 1] >= R)[0]
            assert back == (cand[-1] if cand.size else -1)
            fwd_le = impl.scan_fwd_leq(pts, center, R, i_from)
            cand = np.nonzero(dist[i_from:] <= R)[0]
            assert fwd_le == (cand[0] + i_from if cand.size else -1)
            fwd_ge = impl.scan_fwd_geq(pts, center, R, i_from)
            cand = np.nonzero(dist[i_from:] >= R)[0]
            assert fwd_ge == (cand[0] + i_from if cand.size else -1)
            i1 = int(gen.integers(i_from, n))
            gap = impl.gap_exceeds(pts, center, R, i_from, i1)
            inside = dist[i_from + 1:i1]
            assert gap == int(bool((inside >= R).any()))

    @needs_both
    def test_scan_parity(self):
        gen = np.random.default_rng(62)
        pts = np.cumsum(gen.normal(size=(5000, 3)) * 0.2,
                        axis=0).astype(np.float32)
        for _ in range(200):
            center = gen.normal(size=3) * 3
            R = float(gen.uniform(0.1, 20.0))
            i = int(gen.integers(0, 5000))
            j = int(gen.integers(i, 5000))
            assert py.scan_back_geq(pts, center, R, i) == \
                cy.scan_back_geq(pts, center, R, i)
            assert py.scan_fwd_leq(pts, center, R, i) == \
                cy.scan_fwd_leq(pts, center, R, i)
            assert py.scan_fwd_geq(pts, center, R, i) == \
                cy.scan_fwd_geq(pts, center, R, i)
            assert py.gap_exceeds(pts, center, R, i, j) == \
                cy.gap_exceeds(pts, center, R, i, j)


# ---------------------------------------------------------------------------
# graded-tolerance piece disjointness


def brute_disjoint(a, b, center, tf, tr):
    da = np.sqrt(((a - center) ** 2).sum(axis=1))
    db = np.sqrt(((b - center) ** 2).sum(axis=1))
    for u in range(a.shape[0] - 1):
        for v in range(b.shape[0] - 1):
            d1 = min(da[u], da[u + 1])
            d2 = min(db[v], db[v + 1])
            tol = max(tf, tr * min(d1, d2))
            if py.seg_seg_distance(a[u], a[u + 1], b[v], b[v + 1]) <= tol:
                return 0
    return 1


class TestPieceDisjoint:
    @pytest.mark.parametrize("impl", BACKENDS)
    def test_matches_brute_force(self, impl):
        gen = np.random.default_rng(71)
        seen = [0, 0]
        for trial in range(40):
            center = gen.normal(size=3) * 0.5
            a = random_polyline(gen, int(gen.integers(2, 50)),
                                center + gen.normal(size=3) * 0.6, 1.5)
            b = random_polyline(gen, int(gen.integers(2, 50)),
                                center + gen.normal(size=3) *
                                gen.uniform(0.05, 1.0), 1.5)
            tf = float(gen.uniform(0.0, 0.1))
            tr = float(gen.uniform(0.0, 0.3))
            got = impl.piece_pair_disjoint(a, b, center, tf, tr)
            expect = brute_disjoint(a, b, center, tf, tr)
            assert got == expect
            seen[expect] += 1
        assert seen[0] > 3 and seen[1] > 3

    @pytest.mark.parametrize("impl", BACKENDS)
    def test_single_point_piece(self, impl):
        a = np.zeros((1, 3))
        b = np.ones((4, 3))
        assert impl.piece_pair_disjoint(a, b, np.zeros(3), 1.0, 1.0) == 1
