"""Flat target geometry R^{2n} with Lagrangian L = R^n x {0}.

The almost complex structure is J(x) = G(x) J0 G(x)^{-1} with
G(x) = I + sum_p eps_p * beta(|x - c_p| / r_p) * B_p, so J^2 = -I holds by
construction. The metric is flat, so the exponential map is addition and
parallel transport is the identity; only the complex-linear part of the
transport is nontrivial.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, SingularTransport, TransportTooFar

TAYLOR_SWITCH = 1e-6


def standard_j(n):
    """Return J0 = [[0, -I], [I, 0]] of size 2n."""
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


def bump(s):
    """C-infinity bump exp(1 - 1/(1 - s^2)) on [0, 1), zero beyond; bump(0) = 1."""
    return _bump_jet(s)[0]


def _bump_jet(s):
    """Return beta, beta', beta'' evaluated at s >= 0."""
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    q = np.where(inside, 1.0 - s * s, 1.0)
    g = 1.0 - 1.0 / q
    b = np.where(inside, np.exp(g), 0.0)
    live = b > 0.0
    q = np.where(live, q, 1.0)
    g1 = -2.0 * s / q**2
    g2 = -2.0 / q**2 - 8.0 * s * s / q**3
    b1 = np.where(live, b * g1, 0.0)
    b2 = np.where(live, b * (g2 + g1 * g1), 0.0)
    return b, b1, b2


@dataclass(frozen=True)
class Perturbation:
    """One conjugating bump: amplitude * beta(|x - center| / radius) * generator."""

    center: np.ndarray
    radius: float
    amplitude: float
    generator: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "generator", np.asarray(self.generator, dtype=float))
        if self.radius <= 0:
            raise GeometryError("perturbation radius must be positive")


@dataclass(frozen=True)
class TargetGeometry:
    """Flat R^{2n} with a position-dependent almost complex structure."""

    n: int = 1
    perturbations: tuple = ()
    p0: np.ndarray = None
    iota_prime: float = 1.0
    eps1: float = 0.3
    det_floor: float = 1e-8
    j_base: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise GeometryError("n must be a positive integer")
        dim = 2 * self.n
        p0 = np.zeros(dim) if self.p0 is None else np.asarray(self.p0, dtype=float)
        if p0.shape != (dim,):
            raise GeometryError(f"p0 must have {dim} components")
        if np.any(p0[self.n:] != 0.0):
            raise GeometryError("p0 must lie on L")
        object.__setattr__(self, "p0", p0)
        j0 = standard_j(self.n) if self.j_base is None else np.asarray(self.j_base, dtype=float)
        object.__setattr__(self, "j_base", j0)
        perts = tuple(self.perturbations)
        object.__setattr__(self, "perturbations", perts)
        for p in perts:
            if p.center.shape != (dim,) or p.generator.shape != (dim, dim):
                raise GeometryError("perturbation center/generator have wrong shape")
            if abs(p.amplitude) * np.linalg.norm(p.generator, 2) >= 1.0:
                raise GeometryError("amplitude * |B| must be below 1 so that G is invertible")
            if np.linalg.norm(p.center - p0) < p.radius + 2.0 * self.eps1:
                raise GeometryError("perturbation support meets the 2*eps1 ball around p0")
        if self.iota_prime <= 0 or self.eps1 <= 0:
            raise GeometryError("iota_prime and eps1 must be positive")

    @property
    def dim(self):
        return 2 * self.n

    @property
    def is_constant(self):
        return len(self.perturbations) == 0

    def _scaled(self, x, p):
        d = x - p.center
        r = np.sqrt(np.sum(d * d, axis=-1))
        return d, r / p.radius

    def active(self, x):
        """Boolean mask of points where some perturbation is nonzero."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1], dtype=bool)
        for p in self.perturbations:
            out |= self._scaled(x, p)[1] < 1.0
        return out

    def g_matrix(self, x):
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()
        for p in self.perturbations:
            b = bump(self._scaled(x, p)[1])
            g += (p.amplitude * b)[..., None, None] * p.generator
        return g

    def J(self, x):
        """Almost complex structure at points x of shape (..., 2n)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1] + (self.dim, self.dim)
        out = np.broadcast_to(self.j_base, shape).copy()
        if self.is_constant:
            return out
        act = self.active(x)
        if np.any(act):
            g = self.g_matrix(x[act])
            out[act] = _conjugate(g, self.j_base)
        return out

    def dJ(self, x, w):
        """Directional derivative DJ(x)[w], shape (..., 2n, 2n)."""
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        shape = x.shape[:-1] + (self.dim, self.dim)
        out = np.zeros(shape)
        if self.is_constant:
            return out
        act = self.active(x)
        if not np.any(act):
            return out
        xa, wa = x[act], np.broadcast_to(w, x.shape)[act]
        dg = np.zeros(xa.shape[:-1] + (self.dim, self.dim))
        for p in self.perturbations:
            d, s = self._scaled(xa, p)
            _, b1, _ = _bump_jet(s)
            r = np.sqrt(np.sum(d * d, axis=-1))
            safe = np.where(r > 0, r, 1.0)
            ds = np.where(r > 0, np.sum(d * wa, axis=-1) / (p.radius * safe), 0.0)
            dg += (p.amplitude * b1 * ds)[..., None, None] * p.generator
        g = self.g_matrix(xa)
        j = _conjugate(g, self.j_base)
        out[act] = _right_solve(dg @ self.j_base - j @ dg, g)
        return out

    def dJ_partials(self, x):
        """Partial derivatives dJ/dx_l stacked on a new axis: (..., 2n, 2n, 2n)."""
        x = np.asarray(x, dtype=float)
        cols = []
        for l in range(self.dim):
            e = np.zeros(self.dim)
            e[l] = 1.0
            cols.append(self.dJ(x, e))
        return np.stack(cols, axis=-3)

    def delta_J(self, x, dx):
        """J(x + dx) - J(x) computed without subtractive cancellation."""
        x = np.asarray(x, dtype=float)
        dx = np.broadcast_to(np.asarray(dx, dtype=float), x.shape)
        shape = x.shape[:-1] + (self.dim, self.dim)
        out = np.zeros(shape)
        if self.is_constant:
            return out
        xn = x + dx
        act = self.active(x) | self.active(xn)
        if not np.any(act):
            return out
        xa, da, xna = x[act], dx[act], xn[act]
        dg = np.zeros(xa.shape[:-1] + (self.dim, self.dim))
        for p in self.perturbations:
            dv, s = self._scaled(xa, p)
            _, sn = self._scaled(xna, p)
            r, rn = s * p.radius, sn * p.radius
            den = p.radius * (r + rn)
            num = 2.0 * np.sum(dv * da, axis=-1) + np.sum(da * da, axis=-1)
            dels = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            b, b1, b2 = _bump_jet(s)
            bn = bump(sn)
            small = np.abs(dels) < TAYLOR_SWITCH
            db = np.where(small, b1 * dels + 0.5 * b2 * dels**2, bn - b)
            dg += (p.amplitude * db)[..., None, None] * p.generator
        j = _conjugate(self.g_matrix(xa), self.j_base)
        out[act] = _right_solve(dg @ self.j_base - j @ dg, self.g_matrix(xna))
        return out


def _right_solve(a, g):
    """Return a @ inv(g) for stacks of matrices."""
    return np.swapaxes(np.linalg.solve(np.swapaxes(g, -1, -2), np.swapaxes(a, -1, -2)), -1, -2)


def _conjugate(g, j0):
    return _right_solve(g @ j0, g)


def exp_map(x, v):
    """Flat exponential map: x + v."""
    return np.asarray(x, dtype=float) + np.asarray(v, dtype=float)


def inv_exp(x, y):
    """Inverse of the flat exponential map: y - x."""
    return np.asarray(y, dtype=float) - np.asarray(x, dtype=float)


def pal(x, y, n):
    """Parallel transport of the flat connection from x to y: the identity."""
    shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])
    return np.broadcast_to(np.eye(2 * n), shape + (2 * n, 2 * n)).copy()


def ep_map(u, v, V):
    """E(u, Exp(v, V)): the point reached from v along V, seen from u."""
    return inv_exp(u, exp_map(v, V))


def pal_j(x, y, g):
    """Complex-linear part of the flat transport from x to y: (I - J(y) J(x)) / 2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dist = np.sqrt(np.sum((y - x) ** 2, axis=-1))
    if np.any(dist > g.iota_prime):
        raise TransportTooFar(f"distance {np.max(dist):.3g} exceeds {g.iota_prime}")
    m = 0.5 * (np.eye(g.dim) - g.J(y) @ g.J(x))
    det = np.linalg.det(m)
    if np.any(np.abs(det) < g.det_floor):
        raise SingularTransport(f"transport determinant {np.min(np.abs(det)):.3g} below floor")
    return m


def delta_pal_j(x, y, dy, g):
    """pal_j(x, y + dy) - pal_j(x, y) without cancellation."""
    return -0.5 * g.delta_J(y, dy) @ g.J(x)


@dataclass
class TotallyRealReport:
    points: np.ndarray
    determinants: np.ndarray
    floor: float

    @property
    def passed(self):
        return bool(np.min(np.abs(self.determinants)) > self.floor)


def check_totally_real(g, sample_points, j_field=None, floor=None):
    """Determinant of the frame [e_1..e_n, J e_1..J e_n] at points of L."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if np.any(pts[:, g.n:] != 0.0):
        raise ValueError("sample points must lie on L")
    jfun = g.J if j_field is None else j_field
    jm = np.asarray(jfun(pts), dtype=float)
    if jm.ndim == 2:
        jm = np.broadcast_to(jm, (len(pts), g.dim, g.dim))
    frame = np.concatenate(
        [np.broadcast_to(np.eye(g.dim)[:, : g.n], jm.shape[:-2] + (g.dim, g.n)), jm[..., :, : g.n]],
        axis=-1,
    )
    dets = np.linalg.det(frame)
    return TotallyRealReport(pts, dets, g.det_floor if floor is None else floor)


def j_squared_defect(g, points):
    """max |J(x)^2 + I| over the given points."""
    jm = g.J(np.asarray(points, dtype=float))
    return float(np.max(np.abs(jm @ jm + np.eye(g.dim))))
