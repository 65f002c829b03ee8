import numpy as np
import pytest

from glue_lab import gluing as gl
from glue_lab.domain import DomainConfig, build_glued
from glue_lab.errors import BoundaryViolation, FiberMismatch, GridMismatch
from glue_lab.sobolev import MapSection, ResidualSection, TangentSection, l2_norm_residual

SMALL = DomainConfig(h_tau=0.25, n_t=8, trunc=12.0)
T1 = 1.0


@pytest.fixture(scope="module")
def m0():
    return gl.fixture_m0(SMALL)


@pytest.fixture(scope="module")
def m1():
    return gl.fixture_m1(SMALL)


@pytest.fixture(scope="module")
def sol0(m0):
    return gl.glue(m0, None, T1)


def glued_rows(dom, lat, lo=-np.inf, hi=np.inf):
    tau = gl._glued_tau(dom, lat)
    return (tau >= lo) & (tau <= hi)


# ---------------------------------------------------------------- piece solver and charts


def test_solve_piece_solved_guess_unchanged(m0):
    res = gl.solve_piece(1, m0.pieces[0], m0.E[0], m0.g, full=True)
    assert res.iterations == 0
    assert res.map is m0.pieces[0]


def test_solve_piece_m1_quadratic(m0, m1):
    res = gl.solve_piece(1, m0.pieces[0], m1.E[0], m1.g, tol=1e-9, full=True)
    assert res.iterations <= 6
    assert res.residuals[-1] <= 1e-9
    r = res.residuals
    # quadratic tail: r_{k+1} <= C r_k^2 with a modest C once in the basin
    assert r[2] <= 10.0 * r[1] ** 2


def test_solve_piece_m1_grid_refinement_oracle(m1):
    """Successive grid halvings: the second difference must be much smaller than the first."""
    vals = [m1.pieces[0]]
    for h in (0.125, 0.0625):
        cfg = DomainConfig(h_tau=h, n_t=int(round(2 / h)), trunc=12.0)
        vals.append(gl.fixture_m1(cfg, with_charts=False, tol=1e-8).pieces[0])
    probe = []
    for u in vals:
        j = np.argmin(np.abs(u.domain.lat["x"].tau + 0.5))
        probe.append(u.x[j, [0, -1], 0])
    d1 = np.max(np.abs(probe[1] - probe[0]))
    d2 = np.max(np.abs(probe[2] - probe[1]))
    assert d2 <= 0.25 * d1


def test_solve_piece_rejects_bad_guess(m0):
    u = m0.pieces[0]
    with pytest.raises(ValueError):
        gl.solve_piece(2, u, m0.E[1], m0.g)
    bad = MapSection(u.domain, u.origin, np.full_like(u.x, np.nan), u.y)
    with pytest.raises(BoundaryViolation):
        gl.solve_piece(1, bad, m0.E[0], m0.g)


def test_chart_origin_is_base(m0):
    ch = m0.charts[0]
    assert ch.map(np.zeros(1), np.zeros(1)) is ch.base


def test_chart_evaluation_first_order(m1):
    ch = m1.charts[0]
    q = np.array([1e-3])
    u = ch.map(q, np.zeros(1))
    assert np.allclose(ch.ev(u) - ch.ev(ch.base), np.concatenate([q, [0.0]]), atol=1e-12)
    q2, c2 = ch.project(u)
    assert np.allclose(q2, q, atol=1e-12)
    assert abs(c2[0]) <= 1e-5


def test_chart_radius(m0):
    with pytest.raises(ValueError):
        m0.charts[0].map(np.array([1.0]), np.zeros(1))


def test_kernel_dimension_stable_under_refinement(m0):
    fine = gl.fixture_m0(DomainConfig(h_tau=0.125, n_t=16, trunc=12.0))
    assert [c.dim for c in m0.charts] == [c.dim for c in fine.charts] == [2, 2]


def test_build_chart_checks_transversality(m0):
    ch = gl.build_chart(1, m0.pieces[0], m0.E[0], m0.g, partner=(m0.pieces[1], m0.E[1]))
    assert ch.dim == 2


# ---------------------------------------------------------------- pregluing and initial state


def test_preglue_agrees_with_pieces_on_K(m0):
    u1, u2 = m0.pieces
    pg = gl.preglue(u1, u2, T1)
    p1 = gl.pieces_for(T1, u1, u2)[0]
    back = gl.rehome_tangent(gl.disp_tangent(pg), p1.domain)
    k = p1.domain.in_K(p1.domain.lat["x"].tau)
    assert np.array_equal(back.sx[k], p1.x[k])


def test_preglue_center_is_sum_of_tails(m0):
    u1, u2 = gl.pieces_for(T1, *m0.pieces)
    pg = gl.preglue(*m0.pieces, T1)
    j, _ = pg.domain.center_node
    t1 = gl.rehome_tangent(gl.disp_tangent(u1), pg.domain).sx[j]
    t2 = gl.rehome_tangent(gl.disp_tangent(u2), pg.domain).sx[j]
    assert np.allclose(pg.x[j], t1 + t2, rtol=1e-14, atol=0)


def test_preglue_fiber_mismatch(m0):
    u1, u2 = m0.pieces
    moved = MapSection(u2.domain, u2.origin + np.array([1e-6, 0.0]), u2.x, u2.y)
    with pytest.raises(FiberMismatch):
        gl.preglue(u1, moved, T1)


def test_pieces_for_rejects_long_neck(m0):
    with pytest.raises(GridMismatch):
        gl.pieces_for(2.0, *m0.pieces)


def test_initial_residual_vanishes_far_left(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    for lat, arr in (("rx", st.residual.rx), ("ry", st.residual.ry)):
        assert np.max(np.abs(arr[glued_rows(st.domain, lat, hi=-2 * T1)])) <= 1e-11
    assert gl.identity_defect(st) <= 1e-12


def test_initial_errors_supported_on_bumps(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    e1, e2 = gl.initial_errors(st)
    for e, Ei, lo, hi in ((e1, m0.E[0], -np.inf, -4 * T1), (e2, m0.E[1], 4 * T1, np.inf)):
        scale = max(np.max(np.abs(e.rx)), np.max(np.abs(e.ry)))
        for lat, arr in (("rx", e.rx), ("ry", e.ry)):
            outside = ~glued_rows(st.domain, lat, lo, hi)
            # only the piece solver's residual floor leaks outside the bump
            assert np.max(np.abs(arr[outside])) <= 1e-12 * scale
    assert l2_norm_residual(e1, st.spec) > 0.0


# ---------------------------------------------------------------- one cycle


def test_split_error_partition(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    err1, err2 = gl.split_error(st)
    back = gl.rehome_residual(err1, st.domain).combine(gl.rehome_residual(err2, st.domain))
    assert np.allclose(back.rx, st.residual.rx, rtol=0, atol=1e-15)
    assert np.allclose(back.ry, st.residual.ry, rtol=0, atol=1e-15)
    a_region = {lat: gl._glued_tau(err2.domain, lat) <= -T1 for lat in ("rx", "ry")}
    assert np.all(err2.rx[a_region["rx"]] == 0.0) and np.all(err2.ry[a_region["ry"]] == 0.0)


def test_split_error_zero(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    st.residual = ResidualSection.zeros(st.domain, 1)
    for err in gl.split_error(st):
        assert not np.any(err.rx) and not np.any(err.ry)


def test_hat_truncate_constant_and_K(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    h1, h2 = gl.hat_truncate(st)
    u = st.map()
    back = gl.rehome_tangent(gl.disp_tangent(u), h1.domain)
    keep = h1.domain.lat["x"].tau <= T1 - 1.0
    assert np.array_equal(h1.x[keep], back.sx[keep])
    st.base = TangentSection.zeros(st.domain, 1)
    for h in gl.hat_truncate(st):
        assert not np.any(h.x) and not np.any(h.y)
        assert np.array_equal(h.origin, st.p)


def test_newton_step_zero_errors(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    st.residual = ResidualSection.zeros(st.domain, 1)
    gl.split_error(st)
    gl.hat_truncate(st)
    step = gl.newton_step(st)
    assert step.norm == 0.0 and not np.any(step.dp)


def test_newton_step_constraint_met(m1):
    u1, u2 = m1.pieces
    st = gl.initial_state(u1, u2, T1, m1.E, m1.g)
    gl.split_error(st)
    gl.hat_truncate(st)
    step = gl.newton_step(st)
    assert max(gl.step_complement(st, step)) <= 1e-8


def test_update_map_zero_step_and_center_formula(m0):
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    before = st.map()
    gl.split_error(st)
    gl.hat_truncate(st)
    zero = gl.StepResult(
        tuple(TangentSection.zeros(d, 1) for d in st.piece_domains), np.zeros(1), (np.zeros(1), np.zeros(1)), 0.0
    )
    after = gl.update_map(st, zero)
    assert np.array_equal(after.x, before.x) and np.array_equal(after.y, before.y)
    st = gl.initial_state(*m0.pieces, T1, m0.E, m0.g)
    old = st.map()
    gl.split_error(st)
    gl.hat_truncate(st)
    step = gl.newton_step(st)
    new = gl.update_map(st, step)
    j, _ = new.domain.center_node
    V1 = gl.rehome_tangent(step.V[0], new.domain).sx[j]
    V2 = gl.rehome_tangent(step.V[1], new.domain).sx[j]
    lhs = new.origin[0] + new.x[j] - old.origin[0] - old.x[j]
    assert np.allclose(lhs, V1 + V2 + step.dp[0], rtol=1e-10, atol=1e-17)


# ---------------------------------------------------------------- glue driver


def test_glue_converges_with_bookkeeping(m1):
    sol = gl.glue(m1, None, T1)
    assert sol.converged
    assert sol.history[-1]["step_norm"] <= 1e-10
    assert gl.identity_defect(sol.state) <= 1e-9
    assert sol.map.y.shape == sol.map.domain.lat["y"].shape + (1,)


def test_glue_fixed_point(m0, sol0):
    st = sol0.state
    gl.split_error(st)
    gl.hat_truncate(st)
    step = gl.newton_step(st)
    assert step.norm <= 1e-10


def test_glue_rejects_tiny_T(m0):
    with pytest.raises(GridMismatch):
        gl.glue(m0, None, 0.1)


def test_kuranishi_vector(m0, sol0):
    k = gl.kuranishi_map(sol0)
    assert k.shape == (m0.E[0].dim + m0.E[1].dim,)
    assert np.all(np.isfinite(k))


# ---------------------------------------------------------------- restriction and decomposition


def test_glures_lattice_independent_of_T(m0, sol0):
    other = gl.glue(m0, None, 0.75)
    for i in (1, 2):
        a, b = gl.glures(i, 2.0, sol0), gl.glures(i, 2.0, other)
        for lat in ("x", "y"):
            assert np.array_equal(a.lattices[lat].half_index, b.lattices[lat].half_index)
    assert gl.glures_distance(sol0, other) < 1.0


def test_glures_restriction_reembeds(sol0):
    snap = gl.glures(1, 2.0, sol0)
    vals = snap.values()
    u = sol0.map
    dom = sol0.state.piece_domains[0]
    back = gl.rehome_tangent(TangentSection(u.domain, u.x + u.origin[0], u.y), dom)
    rows = gl._collar_rows(dom, "x", 2.0)
    assert np.allclose(vals["x"], back.sx[rows], rtol=0, atol=1e-14)


def test_glures_grid_checks(sol0):
    with pytest.raises(GridMismatch):
        gl.glures(1, 0.3, sol0)
    with pytest.raises(GridMismatch):
        gl.glures(1, 10.5, sol0)


def test_decompose_constant_map(m0):
    dom = build_glued(T1, SMALL)
    u = MapSection.constant(dom, np.array([0.2, 0.0]))
    dec = gl.decompose(u, T1, m0.g, cfg=SMALL)
    for piece in dec.pieces:
        assert not np.any(piece.x) and not np.any(piece.y)
    assert np.allclose(dec.p, [0.2, 0.0])


def test_decompose_preglue_recovers_pieces(m0):
    u1, u2 = gl.pieces_for(T1, *m0.pieces)
    dec = gl.decompose(gl.preglue(*m0.pieces, T1), T1, m0.g, piece_domains=(u1.domain, u2.domain))
    k = u1.domain.in_K(u1.domain.lat["x"].tau)
    assert np.max(np.abs(dec.pieces[0].origin[0] + dec.pieces[0].x[k] - u1.origin[0] - u1.x[k])) <= 1e-3


def test_roundtrip_small(m0, sol0):
    rt = gl.roundtrip(m0, sol0)
    assert rt.distance <= 1e-5
    assert np.max(np.abs(rt.rho_prime)) <= 1e-5
