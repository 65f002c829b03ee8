"""Discrete sections, finite-difference derivatives and weighted Sobolev norms."""

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from .domain import GLUED
from .errors import BoundaryViolation, DomainKindMismatch, DomainMismatch, GridTooSmall


@dataclass(frozen=True)
class NormSpec:
    m: int = 3
    delta: float = np.pi / 10

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be nonnegative")


# ---------------------------------------------------------------- sections


class MapSection:
    """Map into R^{2n}: origin point plus displacement arrays on the x and y lattices.

    Keeping the origin separate lets exponentially small tails keep their
    relative precision.  The y-block is never stored on t in {0, 1}, so the
    Lagrangian boundary condition holds by construction.
    """

    def __init__(self, domain, origin, x, y):
        self.domain = domain
        self.origin = np.asarray(origin, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        n = self.origin.size // 2
        if self.x.shape != domain.lat["x"].shape + (n,) or self.y.shape != domain.lat["y"].shape + (n,):
            raise DomainMismatch("map arrays do not match the domain lattices")
        if np.any(self.origin[n:] != 0.0):
            raise BoundaryViolation("origin must lie on L")

    @property
    def n(self):
        return self.x.shape[-1]

    @classmethod
    def constant(cls, domain, point):
        point = np.asarray(point, dtype=float)
        n = point.size // 2
        return cls(
            domain,
            point,
            np.zeros(domain.lat["x"].shape + (n,)),
            np.zeros(domain.lat["y"].shape + (n,)),
        )

    @classmethod
    def from_function(cls, domain, f, origin=None):
        """Sample f(tau, t) -> (..., 2n) on the lattices; f must map t in {0,1} into L."""
        lx, ly = domain.lat["x"], domain.lat["y"]
        tx, ttx = np.meshgrid(lx.tau, lx.t, indexing="ij")
        vx = np.asarray(f(tx, ttx), dtype=float)
        n = vx.shape[-1] // 2
        edge = vx[:, [0, -1], n:]
        if np.any(np.abs(edge) > 1e-14):
            raise BoundaryViolation("map leaves L on the boundary t in {0, 1}")
        ty, tty = np.meshgrid(ly.tau, ly.t, indexing="ij")
        vy = np.asarray(f(ty, tty), dtype=float)
        origin = np.zeros(2 * n) if origin is None else np.asarray(origin, dtype=float)
        return cls(domain, origin, vx[..., :n] - origin[:n], vy[..., n:] - origin[n:])

    def with_disp(self, x, y):
        return MapSection(self.domain, self.origin, x, y)

    def copy(self):
        return MapSection(self.domain, self.origin.copy(), self.x.copy(), self.y.copy())

    def positions_x(self):
        return self.x + self.origin[: self.n]

    def positions_y(self):
        return self.y + self.origin[self.n:]

    @property
    def asymptotic(self):
        """Asymptotic point (pieces): value of the truncation column."""
        col = self.domain.truncation_column
        if col is None:
            raise DomainKindMismatch("glued maps have no asymptotic point")
        p = np.zeros(2 * self.n)
        p[: self.n] = self.origin[: self.n] + self.x[col, 0]
        return p

    def node_values(self):
        """Full 2n-vectors at the x nodes (y interpolated, zero on t in {0,1})."""
        yn = node_average_y(self.y, self.domain)
        return np.concatenate([self.positions_x(), yn + self.origin[self.n:]], axis=-1)

    def add(self, ts):
        """exp(u, V) in flat space."""
        return MapSection(self.domain, self.origin, self.x + ts.sx, self.y + ts.sy)


def node_average_y(y, domain):
    """Average cell-centred y values to x nodes with odd reflection across L."""
    n = y.shape[-1]
    ntau, nt = domain.lat["x"].shape
    pad = np.zeros((y.shape[0] + 2, y.shape[1] + 2, n))
    pad[1:-1, 1:-1] = y
    pad[1:-1, 0] = -y[:, 0]
    pad[1:-1, -1] = -y[:, -1]
    if domain.kind == "piece2":
        pad[0] = 0.0
    else:
        pad[0] = -pad[1]
    if domain.kind == "piece1":
        pad[-1] = 0.0
    else:
        pad[-1] = -pad[-2]
    out = 0.25 * (pad[:-1, :-1] + pad[1:, :-1] + pad[:-1, 1:] + pad[1:, 1:])
    out[:, 0] = 0.0
    out[:, -1] = 0.0
    return out[:ntau, :nt]


class TangentSection:
    """Vector field (sx on x lattice, sy on y lattice) plus asymptotic vector v in T L."""

    def __init__(self, domain, sx, sy, v=None):
        self.domain = domain
        self.sx = np.asarray(sx, dtype=float)
        self.sy = np.asarray(sy, dtype=float)
        if domain.is_piece:
            n = self.sx.shape[-1]
            self.v = np.zeros(n) if v is None else np.asarray(v, dtype=float).reshape(n)
        else:
            self.v = None

    @property
    def n(self):
        return self.sx.shape[-1]

    @classmethod
    def zeros(cls, domain, n):
        return cls(domain, np.zeros(domain.lat["x"].shape + (n,)), np.zeros(domain.lat["y"].shape + (n,)))

    @classmethod
    def constant(cls, domain, vec):
        """Constant section v^Pal for v in T L (flat transport)."""
        vec = np.asarray(vec, dtype=float)
        n = vec.size
        sx = np.broadcast_to(vec, domain.lat["x"].shape + (n,)).copy()
        sy = np.zeros(domain.lat["y"].shape + (n,))
        return cls(domain, sx, sy, vec if domain.is_piece else None)

    def center_value(self):
        """s(0, 1/2) on the glued strip as a 2n-vector."""
        j, k = self.domain.center_node
        yk = self.sy[j - 1: j + 1, k - 1: k + 1].mean(axis=(0, 1))
        return np.concatenate([self.sx[j, k], yk])

    def asym_vector(self):
        """v for pieces, s(0,1/2) for the glued strip, as a 2n-vector (y part for glued)."""
        if self.domain.is_piece:
            return np.concatenate([self.v, np.zeros(self.n)])
        return self.center_value()

    def combine(self, other, a=1.0, b=1.0):
        v = None if self.v is None else a * self.v + b * other.v
        return TangentSection(self.domain, a * self.sx + b * other.sx, a * self.sy + b * other.sy, v)

    def scaled(self, c):
        return TangentSection(self.domain, c * self.sx, c * self.sy, None if self.v is None else c * self.v)


class ResidualSection:
    """(0,1)-form coefficient: x-block on the rx lattice, y-block on the ry lattice."""

    def __init__(self, domain, rx, ry):
        self.domain = domain
        self.rx = np.asarray(rx, dtype=float)
        self.ry = np.asarray(ry, dtype=float)

    @property
    def n(self):
        return self.rx.shape[-1]

    @classmethod
    def zeros(cls, domain, n):
        return cls(domain, np.zeros(domain.lat["rx"].shape + (n,)), np.zeros(domain.lat["ry"].shape + (n,)))

    def combine(self, other, a=1.0, b=1.0):
        return ResidualSection(self.domain, a * self.rx + b * other.rx, a * self.ry + b * other.ry)

    def scaled(self, c):
        return ResidualSection(self.domain, c * self.rx, c * self.ry)

    def masked(self, mx, my):
        return ResidualSection(self.domain, self.rx * mx[..., None], self.ry * my[..., None])

    def to_vec(self):
        return np.concatenate([self.rx.reshape(-1, self.n).T.ravel(), self.ry.reshape(-1, self.n).T.ravel()])

    @classmethod
    def from_vec(cls, domain, vec, n):
        sx, sy = domain.lat["rx"].shape, domain.lat["ry"].shape
        nx = sx[0] * sx[1]
        rx = vec[: n * nx].reshape(n, nx).T.reshape(sx + (n,))
        ry = vec[n * nx:].reshape(n, -1).T.reshape(sy + (n,))
        return cls(domain, rx, ry)


# ---------------------------------------------------------------- derivatives


def fornberg_weights(z, x, k):
    """Finite-difference weights for the k-th derivative at z from nodes x."""
    x = np.asarray(x, dtype=float)
    npts = len(x)
    c = np.zeros((npts, k + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, npts):
        mn = min(i, k)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for s in range(mn, 0, -1):
                    c[i, s] = c1 * (s * c[i - 1, s - 1] - c5 * c[i - 1, s]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for s in range(mn, 0, -1):
                c[j, s] = (c4 * c[j, s] - s * c[j, s - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, k]


@lru_cache(maxsize=256)
def _diff_matrix(npts, k, h):
    if npts < k + 1:
        raise GridTooSmall(f"{npts} nodes cannot support a derivative of order {k}")
    half = (k + 1) // 2
    width = 2 * half + 1
    side = min(max(width, k + 2), npts)
    mat = np.zeros((npts, npts))
    for i in range(npts):
        if half <= i < npts - half and width <= npts:
            idx = np.arange(i - half, i + half + 1)
        elif i < npts / 2:
            idx = np.arange(0, side)
        else:
            idx = np.arange(npts - side, npts)
        mat[i, idx] = fornberg_weights(0.0, (idx - i) * h, k)
    mat.setflags(write=False)
    return mat


def fd_derivative(field, axis, k, h):
    """k-th derivative along an axis: 2nd-order central inside, one-sided at edges."""
    field = np.asarray(field, dtype=float)
    if k == 0:
        return field.copy()
    mat = _diff_matrix(field.shape[axis], int(k), float(h))
    moved = np.moveaxis(field, axis, 0)
    out = np.tensordot(mat, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def gradient_terms(f, kmax, h_tau, h_t):
    """Yield (k, multiplicity, d_tau^a d_t^b f) for a + b = k <= kmax."""
    dt = [f] + [fd_derivative(f, 1, b, h_t) for b in range(1, kmax + 1)]
    for k in range(kmax + 1):
        for b in range(k + 1):
            a = k - b
            term = fd_derivative(dt[b], 0, a, h_tau) if a else dt[b]
            yield k, comb(k, a), term


# ---------------------------------------------------------------- quadrature


def quad_weights(lattice):
    """Trapezoid weights on node axes, midpoint weights on cell-centred axes."""
    ntau, nt = lattice.shape
    wt = np.full(ntau, lattice.h)
    if lattice.half_index[0] % 2 == 0:
        wt[0] *= 0.5
        wt[-1] *= 0.5
    h_t = lattice.t[1] - lattice.t[0] if nt > 1 else 1.0
    ws = np.full(nt, h_t)
    if abs(lattice.t[0]) < 1e-15:
        ws[0] *= 0.5
        ws[-1] *= 0.5
    return np.outer(wt, ws)


def _scaled_norm(pieces):
    """sqrt(sum of weighted squares) without underflow: pieces are (weights, values)."""
    scale = 0.0
    for _, val in pieces:
        if val.size:
            scale = max(scale, float(np.max(np.abs(val))))
    if scale == 0.0 or not np.isfinite(scale):
        return scale if not np.isfinite(scale) else 0.0
    total = 0.0
    for w, val in pieces:
        q = val / scale
        total += float(np.sum(w * np.sum(q * q, axis=-1)))
    return scale * np.sqrt(total)


def _weighted_terms(f, lattice, kmax, weight_sq, zero_term=None, mask=None):
    """Collect (quadrature*weight*multiplicity, derivative) pairs for one lattice field."""
    h_t = lattice.t[1] - lattice.t[0]
    q = quad_weights(lattice) * weight_sq[:, None]
    if mask is not None:
        q = q * mask
    out = []
    for k, mult, term in gradient_terms(f, kmax, lattice.h, h_t):
        if k == 0 and zero_term is not None:
            term = zero_term
        out.append((q * mult, term))
    return out


def _tangent_terms(ts, kmax, delta, vec):
    dom = ts.domain
    n = ts.n
    pieces = []
    for lat_name, field, vpart in (("x", ts.sx, vec[:n]), ("y", ts.sy, vec[n:])):
        lat = dom.lat[lat_name]
        tau = lat.tau
        ink = dom.in_K(tau)
        eps = 1e-9 * lat.h
        interface = dom.in_K(tau - eps) != dom.in_K(tau + eps)
        w = dom.weight_on(lat_name, delta)
        w = np.where(ink, 1.0, w)
        terms = _weighted_terms(field, lat, kmax, w * w)
        # zeroth order: s on K, s - v off K; an interface column counts half to each side
        q0 = terms[0][0]
        share = np.where(interface, 0.5, np.where(ink, 1.0, 0.0))[:, None]
        terms[0] = (q0 * share, field)
        terms.append((q0 * (1.0 - share), field - vpart))
        pieces += terms
    return pieces


def w_norm_piece(ts, spec):
    """Weighted W^2_{m+1,delta} norm of (s, v) on a piece."""
    if not ts.domain.is_piece:
        raise DomainKindMismatch("w_norm_piece needs a piece domain")
    vec = ts.asym_vector()
    pieces = _tangent_terms(ts, spec.m + 1, spec.delta, vec)
    pieces.append((np.ones(1), ts.v.reshape(1, -1)))
    return _scaled_norm(pieces)


def w_norm_glued(ts, spec):
    """Weighted W^2_{m+1,delta} norm on the glued strip, centred at s(0, 1/2)."""
    if ts.domain.kind != GLUED:
        raise DomainKindMismatch("w_norm_glued needs the glued domain")
    vec = ts.center_value()
    pieces = _tangent_terms(ts, spec.m + 1, spec.delta, vec)
    pieces.append((np.ones(1), vec.reshape(1, -1)))
    return _scaled_norm(pieces)


def w_norm(ts, spec):
    return w_norm_piece(ts, spec) if ts.domain.is_piece else w_norm_glued(ts, spec)


def unweighted_norm(ts, spec):
    """Standard L^2_{m+1} norm of s (no weight, no asymptotic subtraction)."""
    pieces = []
    for lat_name, field in (("x", ts.sx), ("y", ts.sy)):
        lat = ts.domain.lat[lat_name]
        pieces += _weighted_terms(field, lat, spec.m + 1, np.ones(lat.shape[0]))
    return _scaled_norm(pieces)


def l2_norm_residual(r, spec, weighted=True, tau_mask=None):
    """Weighted L^2_{m,delta} norm of a residual section."""
    dom = r.domain
    pieces = []
    for lat_name, field in (("rx", r.rx), ("ry", r.ry)):
        lat = dom.lat[lat_name]
        w = dom.weight_on(lat_name, spec.delta) if weighted else np.ones(lat.shape[0])
        mask = None
        if tau_mask is not None:
            mask = tau_mask(dom.glued_tau(lat.tau))[:, None].astype(float)
        pieces += _weighted_terms(field, lat, spec.m, w * w, mask=mask)
    return _scaled_norm(pieces)


def lattice_norm(fields, lattices, order, weights=None):
    """Unweighted L^2_order norm of fields given on arbitrary lattices."""
    pieces = []
    for i, (f, lat) in enumerate(zip(fields, lattices)):
        w = np.ones(lat.shape[0]) if weights is None else weights[i]
        pieces += _weighted_terms(f, lat, order, w * w)
    return _scaled_norm(pieces)


def inner_product(a, b):
    """L^2 inner product: asymptotic parts subtracted off K, plus (v_1, v_2)."""
    if a.domain is not b.domain and not a.domain.compatible(b.domain):
        raise DomainMismatch("sections live on different domains")
    va, vb = a.asym_vector(), b.asym_vector()
    n = a.n
    total = 0.0
    for lat_name, fa, fb, sl in (("x", a.sx, b.sx, slice(0, n)), ("y", a.sy, b.sy, slice(n, 2 * n))):
        lat = a.domain.lat[lat_name]
        tau = lat.tau
        eps = 1e-9 * lat.h
        interface = a.domain.in_K(tau - eps) != a.domain.in_K(tau + eps)
        share = np.where(interface, 0.5, np.where(a.domain.in_K(tau), 1.0, 0.0))[:, None]
        q = quad_weights(lat)
        on_k = np.sum(fa * fb, axis=-1)
        off_k = np.sum((fa - va[sl]) * (fb - vb[sl]), axis=-1)
        total += float(np.sum(q * (share * on_k + (1.0 - share) * off_k)))
    return total + float(np.dot(va, vb))


def residual_inner(a, b):
    """Unweighted L^2 inner product of residual sections."""
    total = 0.0
    for lat_name, fa, fb in (("rx", a.rx, b.rx), ("ry", a.ry, b.ry)):
        q = quad_weights(a.domain.lat[lat_name])
        total += float(np.sum(q * np.sum(fa * fb, axis=-1)))
    return total
