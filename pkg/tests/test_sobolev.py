import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from glue_lab.domain import DomainConfig, build_glued, build_piece, piece_weight
from glue_lab.errors import BoundaryViolation, DomainKindMismatch, DomainMismatch, GridTooSmall
from glue_lab.sobolev import (
    MapSection,
    NormSpec,
    ResidualSection,
    TangentSection,
    fd_derivative,
    inner_product,
    l2_norm_residual,
    unweighted_norm,
    w_norm_glued,
    w_norm_piece,
)

CFG = DomainConfig(h_tau=0.25, n_t=8, trunc=12.0)
P1 = build_piece(1, 1.0, CFG)
GL = build_glued(1.0, CFG)
coef = st.floats(-2.0, 2.0, allow_nan=False)


def smooth_section(dom, a, b, c):
    """Tangent field a*cos(pi t) e^{-|tau|/4} + b on x, c*sin(pi t) on y (boundary-compatible)."""
    lx, ly = dom.lat["x"], dom.lat["y"]
    tx, ttx = np.meshgrid(lx.tau, lx.t, indexing="ij")
    ty, tty = np.meshgrid(ly.tau, ly.t, indexing="ij")
    sx = (a * np.cos(np.pi * ttx) * np.exp(-np.abs(tx) / 4) + b)[..., None]
    sy = (c * np.sin(np.pi * tty) * np.exp(-np.abs(ty) / 4))[..., None]
    return TangentSection(dom, sx, sy, np.array([b]) if dom.is_piece else None)


def test_zero_section_norms():
    assert w_norm_piece(TangentSection.zeros(P1, 1), NormSpec()) == 0.0
    assert w_norm_glued(TangentSection.zeros(GL, 1), NormSpec()) == 0.0


def test_constant_section_piece():
    ts = TangentSection.constant(P1, np.array([1.0]))
    # |v|^2 plus the K_1 integral of |s|^2 (area 1)
    assert np.isclose(w_norm_piece(ts, NormSpec()) ** 2, 2.0, rtol=1e-14)


def test_constant_section_glued():
    ts = TangentSection.constant(GL, np.array([1.0]))
    assert np.isclose(w_norm_glued(ts, NormSpec()) ** 2, 1.0 + 2.0, rtol=1e-14)


def test_piece_norm_closed_form_oracle():
    cfg = DomainConfig(h_tau=1 / 32, n_t=2, trunc=12.0)
    dom = build_piece(1, 1.0, cfg)
    tau = dom.lat["x"].tau
    sx = np.broadcast_to(np.exp(-np.pi * tau)[:, None, None], dom.lat["x"].shape + (1,))
    ts = TangentSection(dom, sx, np.zeros(dom.lat["y"].shape + (1,)))
    spec = NormSpec(m=0, delta=np.pi / 10)
    k_part = quad(lambda s: (1 + np.pi**2) * np.exp(-2 * np.pi * s), -1.0, 0.0)[0]
    end = quad(lambda s: (1 + np.pi**2) * piece_weight(1, s, spec.delta) ** 2 * np.exp(-2 * np.pi * s), 0.0, 12.0,
               limit=200)[0]
    assert np.isclose(w_norm_piece(ts, spec) ** 2, k_part + end, rtol=2e-2)


def test_kind_mismatch():
    with pytest.raises(DomainKindMismatch):
        w_norm_piece(TangentSection.zeros(GL, 1), NormSpec())
    with pytest.raises(DomainKindMismatch):
        w_norm_glued(TangentSection.zeros(P1, 1), NormSpec())


def test_doubling_delta_with_support_in_K():
    ts = TangentSection.zeros(GL, 1)
    tau = GL.lat["x"].tau
    ts.sx[np.abs(tau) > 5.0 + 1e-9] = 0.4
    ts.sx[np.abs(tau) >= 5.0 - 1e-9] = 0.0
    inside = np.abs(tau) > 5.5
    ts.sx[inside] = np.sin(tau[inside])[:, None, None]
    a = w_norm_glued(ts, NormSpec(delta=0.1))
    b = w_norm_glued(ts, NormSpec(delta=0.2))
    assert np.isclose(a, b, rtol=1e-13)


def test_residual_norm_examples():
    r = ResidualSection.zeros(P1, 1)
    assert l2_norm_residual(r, NormSpec(m=0)) == 0.0
    j, k = 10, 3
    r.rx[j, k, 0] = 2.0
    lat = P1.lat["rx"]
    w = P1.weight_on("rx", np.pi / 10)[j]
    area = lat.h * (lat.t[1] - lat.t[0])
    assert np.isclose(l2_norm_residual(r, NormSpec(m=0)) ** 2, w**2 * 4.0 * area, rtol=1e-14)
    assert l2_norm_residual(r, NormSpec(m=1)) > l2_norm_residual(r, NormSpec(m=0))


def test_inner_product_examples():
    z = TangentSection.zeros(P1, 1)
    assert inner_product(z, z) == 0.0
    c = TangentSection.constant(P1, np.array([1.0]))
    assert np.isclose(inner_product(c, c), 2.0, rtol=1e-14)


@given(coef, coef, coef, coef, coef, coef)
def test_inner_product_symmetric(a1, b1, c1, a2, b2, c2):
    s, t = smooth_section(P1, a1, b1, c1), smooth_section(P1, a2, b2, c2)
    assert np.isclose(inner_product(s, t), inner_product(t, s), rtol=1e-13, atol=1e-13)


def test_inner_product_domain_mismatch():
    other = build_piece(1, 1.0, DomainConfig(h_tau=0.5, n_t=8, trunc=12.0))
    with pytest.raises(DomainMismatch):
        inner_product(TangentSection.zeros(P1, 1), TangentSection.zeros(other, 1))


def test_fd_linear_and_constant():
    tau = np.linspace(0, 2, 21)
    f = 3.0 * tau + 1.0
    assert np.allclose(fd_derivative(f, 0, 1, 0.1), 3.0, atol=1e-12)
    for k in (1, 2, 3):
        assert np.allclose(fd_derivative(np.full(21, 2.5), 0, k, 0.1), 0.0, atol=1e-9)


def test_fd_second_derivative_oracle():
    h = 0.05
    tau = np.arange(0, 2 + h / 2, h)
    d2 = fd_derivative(np.sin(np.pi * tau), 0, 2, h)
    exact = -np.pi**2 * np.sin(np.pi * tau)
    inner = slice(2, -2)
    assert np.max(np.abs(d2[inner] - exact[inner])) <= 1e-2 * np.pi**2


def test_fd_grid_too_small():
    with pytest.raises(GridTooSmall):
        fd_derivative(np.ones(2), 0, 3, 0.1)


@given(coef, coef, coef)
def test_norm_monotone_in_m(a, b, c):
    ts = smooth_section(P1, a, b, c)
    vals = [w_norm_piece(ts, NormSpec(m=m)) for m in range(4)]
    assert all(x <= y * (1 + 1e-14) + 1e-300 for x, y in zip(vals, vals[1:]))


@given(coef, coef, coef, st.floats(-5, 5, allow_nan=False))
def test_norm_homogeneous(a, b, c, lam):
    ts = smooth_section(P1, a, b, c)
    scaled = TangentSection(P1, lam * ts.sx, lam * ts.sy, lam * ts.v)
    assert np.isclose(w_norm_piece(scaled, NormSpec()), abs(lam) * w_norm_piece(ts, NormSpec()), rtol=1e-9, atol=1e-300)


@given(coef, coef)
def test_weighted_unweighted_equivalence(a, c):
    T = 1.0
    spec = NormSpec()
    ts = smooth_section(GL, a, 0.0, c)
    j, k = GL.center_node
    ts.sx -= ts.sx[j, k]
    w, u = w_norm_glued(ts, spec), unweighted_norm(ts, spec)
    if u == 0.0:
        assert w == 0.0
        return
    assert 1.0 - 1e-12 <= w / u <= 10.0 * np.exp(5 * T * spec.delta)


def test_map_section_origin_off_L_rejected():
    with pytest.raises(BoundaryViolation):
        MapSection(P1, np.array([0.0, 0.1]), np.zeros(P1.lat["x"].shape + (1,)), np.zeros(P1.lat["y"].shape + (1,)))


@given(arrays(float, (3,), elements=coef))
def test_from_function_boundary(ab):
    a, b, c = ab
    u = MapSection.from_function(P1, lambda s, t: np.stack([a * s + b, c * np.sin(np.pi * t)], axis=-1))
    assert u.x.shape == P1.lat["x"].shape + (1,)
    if abs(c) > 1e-12:
        with pytest.raises(BoundaryViolation):
            MapSection.from_function(P1, lambda s, t: np.stack([a * s + b, c * np.cos(np.pi * t)], axis=-1))
