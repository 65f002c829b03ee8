import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from glue_lab import cauchy_riemann as cr
from glue_lab import gluing as gl
from glue_lab.domain import DomainConfig, build_piece
from glue_lab.errors import TransportTooFar
from glue_lab.geometry import TargetGeometry
from glue_lab.sobolev import MapSection, ResidualSection, TangentSection, residual_inner

G0 = TargetGeometry(n=1)
SMALL = DomainConfig(h_tau=0.25, n_t=8, trunc=12.0)


def holomorphic_model(a):
    return lambda s, t: np.stack(
        [a * np.exp(-np.pi * s) * np.cos(np.pi * t), -a * np.exp(-np.pi * s) * np.sin(np.pi * t)], axis=-1
    )


@pytest.fixture(scope="module")
def m1_small():
    return gl.fixture_m1(SMALL)


@pytest.fixture(scope="module")
def m0_small():
    return gl.fixture_m0(SMALL)


def random_free_section(dom, rng, scale=1.0):
    raw = TangentSection(dom, rng.standard_normal(dom.lat["x"].shape + (1,)), rng.standard_normal(dom.lat["y"].shape + (1,)))
    return cr.free_to_tangent(dom, scale * cr.tangent_to_free(raw), 1)


# ---------------------------------------------------------------- dbar


def test_dbar_holomorphic_model_small_away_from_closed_end():
    h = 0.25
    dom = build_piece(1, 1.0, SMALL)
    r = cr.dbar(MapSection.from_function(dom, holomorphic_model(0.1)), G0)
    for lat, arr in (("rx", r.rx), ("ry", r.ry)):
        away = dom.lat[lat].tau > dom.lat[lat].tau[0] + 1.5 * h
        assert np.max(np.abs(arr[away])) <= 5 * h**2


def test_dbar_translation_in_tau():
    dom = build_piece(1, 1.0, SMALL)
    r = cr.dbar(MapSection.from_function(dom, lambda s, t: np.stack([s + 0 * t, 0 * s], axis=-1)), G0)
    assert np.allclose(r.rx, 1.0, atol=1e-13)
    assert np.allclose(r.ry, 0.0, atol=1e-13)


def test_dbar_t_dependence_rotated_by_J0():
    # u = (0, sin(pi t)): J0 du/dt = (-pi cos(pi t), 0); y is held at L on the truncation column
    dom = build_piece(1, 1.0, DomainConfig(h_tau=0.25, n_t=32, trunc=12.0))
    u = MapSection.from_function(dom, lambda s, t: np.stack([0 * s, np.sin(np.pi * t)], axis=-1))
    r = cr.dbar(u, G0)
    t = dom.lat["rx"].t
    assert np.max(np.abs(r.rx[..., 0] + np.pi * np.cos(np.pi * t)[None, :])) <= 2e-2


def test_energy_examples():
    dom = build_piece(1, 1.0, SMALL)
    assert cr.energy(MapSection.constant(dom, np.array([0.3, 0.0]))) == 0.0
    u = MapSection.from_function(dom, lambda s, t: np.stack([s + 0 * t, 0 * s], axis=-1))
    assert np.isclose(cr.energy(u, tau_window=(0.0, 1.0)), 0.5, rtol=1e-13)


def test_energy_holomorphic_model_quadrature_oracle():
    a = 0.1
    exact = quad(lambda s: 0.5 * 2 * np.pi**2 * a * a * np.exp(-2 * np.pi * s), 0.0, 12.0)[0]
    assert np.isclose(exact, np.pi * a * a / 2, rtol=1e-12)
    dom = build_piece(1, 1.0, DomainConfig(h_tau=0.0625, n_t=32, trunc=12.0))
    u = MapSection.from_function(dom, holomorphic_model(a))
    assert np.isclose(cr.energy(u, tau_window=(0.0, 12.0)), exact, rtol=1e-2)


# ---------------------------------------------------------------- linearization


def test_linearization_matches_directional_derivative(m1_small, rng):
    u = m1_small.pieces[0]
    V = random_free_section(u.domain, rng)
    lin = cr.linearize_dbar(u, m1_small.g).apply(V).to_vec()
    for hs in (1e-4, 1e-5):
        fd = (cr.dbar(u.add(V.scaled(hs)), m1_small.g).to_vec() - cr.dbar(u, m1_small.g).to_vec()) / hs
        assert np.linalg.norm(fd - lin) <= 1e-4 * np.linalg.norm(lin)


def test_dbar_increment_is_exact_difference(m1_small, rng):
    u = m1_small.pieces[0]
    V = random_free_section(u.domain, rng, 1e-3)
    inc = cr.dbar_increment(u, V, m1_small.g).to_vec()
    direct = cr.dbar(u.add(V), m1_small.g).to_vec() - cr.dbar(u, m1_small.g).to_vec()
    assert np.allclose(inc, direct, rtol=1e-8, atol=1e-13)


def test_linearization_independent_of_u_for_constant_J(m0_small):
    u = m0_small.pieces[0]
    a = cr.linearize_dbar(u, G0).matrix
    b = cr.linearize_dbar(MapSection.constant(u.domain, G0.p0), G0).matrix
    assert abs(a - b).max() == 0.0


def test_linearization_kills_holomorphic_sections():
    dom = build_piece(1, 1.0, SMALL)
    f = holomorphic_model(0.1)
    V = MapSection.from_function(dom, f)
    ts = TangentSection(dom, V.x, V.y, np.zeros(1))
    lin = cr.linearize_dbar(MapSection.constant(dom, G0.p0), G0).apply(ts)
    away = dom.lat["rx"].tau > 0.0
    assert np.max(np.abs(lin.rx[away])) <= 5 * 0.25**2


def test_constant_direction_in_kernel_for_constant_J(fx_m0):
    u = fx_m0.pieces[0]
    dom = u.domain
    ts = TangentSection.constant(dom, np.ones(1))
    r = cr.linearize_dbar(u, fx_m0.g).apply(ts)
    assert np.max(np.abs(r.rx)) == 0.0 and np.max(np.abs(r.ry)) == 0.0


# ---------------------------------------------------------------- obstruction bases


def test_transport_at_reference_is_identity(m1_small):
    E = m1_small.E[0]
    tb = cr.transport_basis(E, E.u_ob, m1_small.g)
    for raw, base in zip(tb.raw, E.basis_sections(E.u_ob.domain)):
        assert np.array_equal(raw.to_vec(), base.to_vec())


def test_transport_identity_for_constant_J(m0_small):
    E = m0_small.E[0]
    u = E.u_ob
    moved = MapSection(u.domain, u.origin + np.array([0.2, 0.0]), u.x, u.y)
    tb = cr.transport_basis(E, moved, G0)
    for raw, base in zip(tb.raw, E.basis_sections(u.domain)):
        assert np.array_equal(raw.to_vec(), base.to_vec())


def test_transport_pointwise_oracle(m1_small):
    g, E = m1_small.g, m1_small.E[0]
    u = E.u_ob
    moved = MapSection(u.domain, u.origin + np.array([0.01, 0.0]), u.x, u.y)
    tb = cr.transport_basis(E, moved, g)
    for lat, sl in (("rx", slice(0, 1)), ("ry", slice(1, 2))):
        fields = E.raw_fields(u.domain, lat)[0]
        ob = cr.lattice_values(u, lat)[0]
        tgt = cr.lattice_values(moved, lat)[0]
        expect = np.zeros((len(ob), 1))
        for m in np.flatnonzero(np.any(fields != 0, axis=1)):
            mat = 0.5 * (np.eye(2) - g.J(tgt[m]) @ g.J(ob[m]))
            expect[m] = (mat @ fields[m])[sl]
        got = getattr(tb.raw[0], lat).reshape(-1, 1)
        assert np.allclose(got, expect, rtol=0, atol=1e-15)
        diff = np.max(np.abs(got[:, 0] - fields[:, sl][:, 0]))
        assert diff <= 10 * m1_small.info["eps"] * 0.01


def test_transport_too_far(m0_small):
    E = m0_small.E[0]
    u = E.u_ob
    far = MapSection(u.domain, u.origin + np.array([5.0, 0.0]), u.x, u.y)
    with pytest.raises(TransportTooFar):
        cr.transport_basis(E, far, G0)


def test_orthonormal_basis_with_two_bumps():
    dom = build_piece(1, 1.0, SMALL)
    u = MapSection.constant(dom, G0.p0)
    bumps = [cr.BumpSpec((-0.5, 0.5), 0.4, (0.0, 1.0)), cr.BumpSpec((-0.45, 0.5), 0.3, (1.0, 1.0))]
    E = cr.ObstructionSpace(1, u, bumps)
    tb = cr.transport_basis(E, u, G0)
    gram = np.array([[residual_inner(a, b) for b in tb.ortho] for a in tb.ortho])
    assert np.allclose(gram, np.eye(2), atol=1e-10)
    for e in tb.ortho:
        for lat in ("rx", "ry"):
            outside = ~E.support(dom, lat)
            assert np.all(getattr(e, lat).reshape(-1)[outside] == 0.0)


def test_bump_outside_K_rejected():
    dom = build_piece(1, 1.0, SMALL)
    with pytest.raises(ValueError):
        cr.ObstructionSpace(1, MapSection.constant(dom, G0.p0), [cr.BumpSpec((0.5, 0.5), 0.4, (0.0, 1.0))])


# ---------------------------------------------------------------- projections


@pytest.fixture(scope="module")
def basis2():
    dom = build_piece(1, 1.0, SMALL)
    u = MapSection.constant(dom, G0.p0)
    bumps = [cr.BumpSpec((-0.5, 0.5), 0.4, (0.0, 1.0)), cr.BumpSpec((-0.5, 0.4), 0.3, (1.0, 0.0))]
    E = cr.ObstructionSpace(1, u, bumps)
    return dom, E, cr.transport_basis(E, u, G0)


def random_residual(dom, rng):
    return ResidualSection(dom, rng.standard_normal(dom.lat["rx"].shape + (1,)), rng.standard_normal(dom.lat["ry"].shape + (1,)))


def test_projection_of_basis_vector(basis2):
    _, _, tb = basis2
    proj, comp, coef = cr.project_E(tb, tb.ortho[0])
    assert np.allclose(proj.to_vec(), tb.ortho[0].to_vec(), atol=1e-12)
    assert np.max(np.abs(comp.to_vec())) <= 1e-12
    assert np.allclose(coef, [1.0, 0.0], atol=1e-12)


def test_projection_disjoint_support(basis2):
    dom, E, tb = basis2
    r = ResidualSection.zeros(dom, 1)
    r.rx[dom.lat["rx"].tau > 2.0] = 1.0
    proj, _, _ = cr.project_E(tb, r)
    assert np.max(np.abs(proj.to_vec())) == 0.0


@given(st.integers(0, 10**6))
def test_projection_idempotent_and_orthogonal(basis2, seed):
    dom, _, tb = basis2
    r = random_residual(dom, np.random.default_rng(seed))
    proj, comp, _ = cr.project_E(tb, r)
    again, _, _ = cr.project_E(tb, proj)
    assert np.allclose(again.to_vec(), proj.to_vec(), atol=1e-9)
    for e in tb.ortho:
        assert abs(residual_inner(comp, e)) <= 1e-9
    w = comp
    mixed, _, _ = cr.project_E(tb, tb.ortho[0].combine(w))
    assert np.allclose(mixed.to_vec(), tb.ortho[0].to_vec(), atol=1e-9)


def test_d_projection_constant_J_and_zero_A(m0_small, m1_small, rng):
    u = m0_small.pieces[0]
    V = random_free_section(u.domain, rng)
    A = m0_small.E[0].basis_sections(u.domain)[0]
    assert np.max(np.abs(cr.d_projection(m0_small.E[0], u, A, V, G0).to_vec())) == 0.0
    u1 = m1_small.pieces[0]
    zero = ResidualSection.zeros(u1.domain, 1)
    out = cr.d_projection(m1_small.E[0], u1, zero, random_free_section(u1.domain, rng), m1_small.g)
    assert np.max(np.abs(out.to_vec())) == 0.0


def test_d_projection_step_halving(m1_small, rng):
    g, E, u = m1_small.g, m1_small.E[0], m1_small.pieces[0]
    V = random_free_section(u.domain, rng, 0.1)
    A = E.basis_sections(u.domain)[0].scaled(0.3)
    central = cr.d_projection(E, u, A, V, g).to_vec()
    hs = 0.5e-4 / (1.0 + max(np.max(np.abs(V.sx)), np.max(np.abs(V.sy))))
    base = cr._projection_from_positions(E, u.domain, cr._shifted_positions(u, V, 0.0), A, g).to_vec()
    plus = cr._projection_from_positions(E, u.domain, cr._shifted_positions(u, V, hs), A, g).to_vec()
    one_sided = (plus - base) / hs
    assert np.max(np.abs(central - one_sided)) <= 1e-5 * max(1.0, np.max(np.abs(central))) + 1e-5


def test_d_projection_matrix_matches_columns(m1_small, rng):
    g, E, u = m1_small.g, m1_small.E[0], m1_small.pieces[0]
    V = random_free_section(u.domain, rng)
    A = E.basis_sections(u.domain)[0].scaled(0.3)
    direct = cr.d_projection(E, u, A, V, g).to_vec()
    mat = cr.d_projection_matrix(E, u, A, g) @ cr.tangent_to_z(V)
    assert np.linalg.norm(mat - direct) <= 1e-6 * np.linalg.norm(direct)


def test_approx_linearization_reductions(m0_small, m1_small):
    u = m1_small.pieces[0]
    base = cr.linearize_dbar(u, m1_small.g).matrix
    assert abs(cr.approx_linearization(u, None, m1_small.E[0], m1_small.g).matrix - base).max() == 0.0
    u0 = m0_small.pieces[0]
    A = m0_small.E[0].basis_sections(u0.domain)[0]
    lin0 = cr.linearize_dbar(u0, G0).matrix
    assert abs(cr.approx_linearization(u0, A, m0_small.E[0], G0).matrix - lin0).max() == 0.0


def test_approx_linearization_correction_scales_with_e(m1_small, rng):
    g, E, u = m1_small.g, m1_small.E[0], m1_small.pieces[0]
    base = cr.linearize_dbar(u, g)
    A = E.basis_sections(u.domain)[0]
    V = random_free_section(u.domain, rng)
    z = cr.tangent_to_z(V)
    norms = []
    for scale in (1e-2, 1e-1):
        app = cr.approx_linearization(u, A.scaled(scale), E, g)
        direct = base.matrix @ z - cr.d_projection(E, u, A.scaled(scale), V, g).to_vec()
        assert np.linalg.norm(app.matrix @ z - direct) <= 1e-6 * np.linalg.norm(direct)
        norms.append(np.linalg.norm((app.matrix - base.matrix) @ z))
    assert np.isclose(norms[1] / norms[0], 10.0, rtol=1e-4)


# ---------------------------------------------------------------- transversality


def test_transversality_m0_passes(m0_small):
    u1, u2 = m0_small.pieces
    rep = cr.verify_transversality(u1, u2, m0_small.E[0], m0_small.E[1], G0)
    assert rep.passed
    assert rep.mapping_rank_deficit == [0, 0]
    assert np.min(rep.evaluation_sigma) > 1.0


def test_surjectivity_manufactured_cokernel(m0_small):
    u = m0_small.pieces[0]
    mat = cr.linearize_dbar(u, G0).reduced()
    padded = sp.vstack([mat, sp.csr_matrix((1, mat.shape[1]))]).tocsr()
    deficit, sig = cr.surjectivity(padded, [])
    assert deficit == 1 and sig == 0.0
    cover = np.zeros(padded.shape[0])
    cover[-1] = 1.0
    deficit, sig = cr.surjectivity(padded, [cover])
    assert deficit == 0 and sig > 1e-8


def test_kernel_responses_solve_the_equation(m0_small):
    u = m0_small.pieces[0]
    lin = cr.linearize_dbar(u, G0)
    tb = cr.transport_basis(m0_small.E[0], u, G0)
    for ts, c in cr.kernel_responses(lin, tb.ortho):
        rhs = sum((ci * e.to_vec() for ci, e in zip(c, tb.ortho)), np.zeros(lin.matrix.shape[0]))
        assert np.allclose(lin.apply(ts).to_vec(), rhs, atol=1e-10)
