"""Alternating-Newton gluing: piece solver, charts, fixtures, pregluing, the
per-step split/solve/update cycle, restriction to fixed collars, the
Kuranishi coefficients and the decompose-and-reglue round trip.

Glued maps are held as a base point p0, a shift dp = p - p0 and decaying
displacement fields.  Every update is applied as an increment whose
derivatives are taken from decaying quantities only, so exponentially small
errors keep their relative precision.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import cauchy_riemann as cr
from .domain import DomainConfig, StripDomain, build_glued, build_piece, rehome, smooth_pair
from .errors import (
    BoundaryViolation,
    FiberMismatch,
    GeometryError,
    GridMismatch,
    LinearSolveFailure,
    NoConvergence,
    TransversalityFailure,
)
from .geometry import Perturbation, TargetGeometry
from .sobolev import (
    MapSection,
    NormSpec,
    ResidualSection,
    TangentSection,
    l2_norm_residual,
    lattice_norm,
    quad_weights,
    residual_inner,
    w_norm_glued,
    w_norm_piece,
)

# ---------------------------------------------------------------- helpers


def on_domain(u, domain):
    """Same lattice data viewed on another domain object with identical lattices."""
    if isinstance(u, MapSection):
        return MapSection(domain, u.origin, u.x, u.y)
    if isinstance(u, TangentSection):
        return TangentSection(domain, u.sx, u.sy, u.v)
    return ResidualSection(domain, u.rx, u.ry)


def _rehome_pair(a, b, src, dst, lats):
    out_a, _ = rehome(a, src.lat[lats[0]], dst.lat[lats[0]], src, dst)
    out_b, _ = rehome(b, src.lat[lats[1]], dst.lat[lats[1]], src, dst)
    return out_a, out_b


def rehome_tangent(ts, dst):
    sx, sy = _rehome_pair(ts.sx, ts.sy, ts.domain, dst, ("x", "y"))
    return TangentSection(dst, sx, sy, np.zeros(ts.n) if dst.is_piece else None)


def rehome_residual(r, dst):
    rx, ry = _rehome_pair(r.rx, r.ry, r.domain, dst, ("rx", "ry"))
    return ResidualSection(dst, rx, ry)


def _glued_tau(domain, lat):
    return domain.glued_tau(domain.lat[lat].tau)


def _cut(domain, lat, which):
    """Cutoff profiles on a lattice of ``domain`` (evaluated in glued tau)."""
    tau = _glued_tau(domain, lat)
    T = domain.T
    if which == "B_left":
        return smooth_pair(tau - T)[0]
    if which == "B_right":
        return smooth_pair(tau - T)[1]
    if which == "A_left":
        return smooth_pair(tau + T)[0]
    if which == "A_right":
        return smooth_pair(tau + T)[1]
    if which == "X_left":
        return smooth_pair(tau)[0]
    if which == "X_right":
        return smooth_pair(tau)[1]
    if which == "hat1":
        return smooth_pair(tau - 2 * T)[0]
    if which == "hat2":
        return smooth_pair(tau + 2 * T)[1]
    raise ValueError(which)


def _scale_tangent(ts, which):
    cx = _cut(ts.domain, "x", which)[:, None, None]
    cy = _cut(ts.domain, "y", which)[:, None, None]
    return TangentSection(ts.domain, cx * ts.sx, cy * ts.sy, ts.v)


def _scale_residual(r, which):
    cx = _cut(r.domain, "rx", which)[:, None, None]
    cy = _cut(r.domain, "ry", which)[:, None, None]
    return ResidualSection(r.domain, cx * r.rx, cy * r.ry)


def disp_tangent(u):
    """Displacement of a map from its origin as a tangent section (v = 0)."""
    return TangentSection(u.domain, u.x, u.y, np.zeros(u.n) if u.domain.is_piece else None)


def split_inner(a, pa, b, pb):
    """Piece L^2 product of (a + pa, pa) and (b + pb, pb) for decaying a, b and constants pa, pb in T L.

    Equivalent to the inner product of the full sections, but the constants
    never enter a difference with the decaying parts.
    """
    dom = a.domain
    total = 0.0
    for lat, fa, fb in (("x", a.sx, b.sx), ("y", a.sy, b.sy)):
        q = quad_weights(dom.lat[lat])
        total += float(np.sum(q * np.sum(fa * fb, axis=-1)))
    lx = dom.lat["x"]
    ink = dom.in_K(lx.tau)
    q = quad_weights(lx)[ink]
    fa, fb = a.sx[ink], b.sx[ink]
    total += float(np.sum(q * (fa @ pb + fb @ pa)))
    total += float(np.sum(q)) * float(pa @ pb)
    return total + float(pa @ pb)


def piece_step_norm(Vt, dp, spec):
    """W^2_{m+1,delta} norm of the piece section Vt + dp^Pal with asymptotic value dp."""
    full = TangentSection(Vt.domain, Vt.sx + dp, Vt.sy, dp)
    return w_norm_piece(full, spec)


def _lu(matrix):
    try:
        return spla.splu(matrix.tocsc())
    except RuntimeError as exc:
        raise LinearSolveFailure(f"sparse factorization failed: {exc}") from exc


class PieceSystem:
    """Factorized approximate linearization on a piece with the asymptotic value held at 0."""

    def __init__(self, lin, e_sections):
        self.lin = lin
        self.domain, self.n = lin.domain, lin.n
        A = lin.reduced()
        self.nfree = A.shape[1] - self.n
        self.lu = _lu(A[:, : self.nfree])
        self.e = list(e_sections)

    def solve(self, rhs_vec):
        sol = self.lu.solve(rhs_vec)
        if not np.all(np.isfinite(sol)):
            raise LinearSolveFailure("non-finite solution")
        return cr.free_to_tangent(self.domain, np.concatenate([sol, np.zeros(self.n)]), self.n)

    def solve_residual(self, r):
        return self.solve(r.to_vec())

    def constant_responses(self):
        """Decaying parts c_l with D(e_l^Pal + c_l) = 0 and c_l = 0 on the truncation column."""
        out = []
        for l in range(self.n):
            const = TangentSection.constant(self.domain, np.eye(self.n)[l])
            out.append(self.solve(-(self.lin.matrix @ cr.tangent_to_z(const))))
        return out

    def basis_responses(self):
        return [self.solve_residual(e) for e in self.e]


# ---------------------------------------------------------------- piece solver


@dataclass
class PieceSolveResult:
    map: MapSection
    iterations: int
    residuals: list


def complement_norm(u, E, g, spec):
    r = cr.dbar(u, g)
    if E is None or E.dim == 0:
        return l2_norm_residual(r, spec), r, None
    tb = cr.transport_basis(E, u, g)
    proj, comp, coef = cr.project_E(tb, r)
    return l2_norm_residual(comp, spec), comp, (tb, proj, coef)


def solve_piece(i, guess, E, g, tol=1e-10, spec=NormSpec(), maxiter=12, constraint=None, full=False):
    """Newton iteration on Pi^perp dbar u = 0 with the asymptotic value held fixed.

    Each step solves the approximate linearization with v = 0 and removes the
    freedom along the internal kernel by orthogonality to ``constraint``
    (default: the current internal kernel, i.e. the minimal-norm step).
    """
    if guess.domain.piece_index != i:
        raise ValueError("guess lives on the wrong piece")
    if not np.all(np.isfinite(guess.x)) or not np.all(np.isfinite(guess.y)):
        raise BoundaryViolation("guess has non-finite values")
    u = guess
    history = []
    for it in range(maxiter + 1):
        res, comp, extra = complement_norm(u, E, g, spec)
        history.append(res)
        if res <= tol:
            return PieceSolveResult(u, it, history) if full else u
        if not np.isfinite(res):
            break
        tb, proj, _ = extra if extra is not None else (None, None, None)
        lin = cr.approx_linearization(u, proj, E, g)
        system = PieceSystem(lin, tb.ortho if tb is not None else [])
        P = system.solve_residual(comp.scaled(-1.0))
        xi = system.basis_responses()
        cons = xi if constraint is None else constraint
        if xi:
            m = np.array([[split_inner(c, np.zeros(u.n), x, np.zeros(u.n)) for x in xi] for c in cons])
            rhs = np.array([split_inner(c, np.zeros(u.n), P, np.zeros(u.n)) for c in cons])
            a = np.linalg.solve(m, -rhs)
            for ab, x in zip(a, xi):
                P = P.combine(x, 1.0, ab)
        u = u.add(P)
    raise NoConvergence(f"piece {i} solve stalled at residual {history[-1]:.3e}", history)


# ---------------------------------------------------------------- charts


class ModuliChart:
    """Local chart rho = (q, c) -> u^rho around a piece solution.

    q in R^n moves the asymptotic value, c in R^d moves along the internal
    kernel.  Kernel directions are computed from responses of the
    factorized operator: xi_b = D0^{-1} e_b orthonormalized, eta_l = e_l^Pal
    plus its decaying correction, orthogonalized against xi.
    """

    def __init__(self, i, base, E, g, radius=0.05, spec=NormSpec(), tol=1e-10):
        self.i, self.base, self.E, self.g = i, base, E, g
        self.radius, self.spec, self.tol = radius, spec, tol
        n = base.n
        zero = np.zeros(n)
        res, comp, extra = complement_norm(base, E, g, spec)
        tb, proj = (extra[0], extra[1]) if extra is not None else (None, None)
        lin = cr.approx_linearization(base, proj, E, g)
        system = PieceSystem(lin, tb.ortho if tb is not None else [])
        xi = system.basis_responses()
        ortho = []
        for x in xi:
            for o in ortho:
                x = x.combine(o, 1.0, -split_inner(x, zero, o, zero))
            nrm = np.sqrt(split_inner(x, zero, x, zero))
            if nrm < 1e-12:
                raise TransversalityFailure("internal kernel is degenerate")
            ortho.append(x.scaled(1.0 / nrm))
        self.xi = ortho
        eta = []
        for l, c in enumerate(system.constant_responses()):
            el = np.eye(n)[l]
            for o in ortho:
                c = c.combine(o, 1.0, -split_inner(c, el, o, zero))
            eta.append(c)
        self.eta_decay = eta
        self.base_residual = res

    @property
    def dim(self):
        return self.base.n + len(self.xi)

    def map(self, q, c=None):
        q = np.asarray(q, dtype=float).reshape(self.base.n)
        c = np.zeros(len(self.xi)) if c is None else np.asarray(c, dtype=float).reshape(len(self.xi))
        if not np.any(q) and not np.any(c):
            return self.base
        if np.sqrt(q @ q + c @ c) > self.radius:
            raise ValueError("chart coordinate outside the chart radius")
        n = self.base.n
        x, y = self.base.x.copy(), self.base.y.copy()
        for ql, eta in zip(q, self.eta_decay):
            x += ql * eta.sx
            y += ql * eta.sy
        for cb, xi in zip(c, self.xi):
            x += cb * xi.sx
            y += cb * xi.sy
        origin = self.base.origin.copy()
        origin[:n] += q
        seed = MapSection(self.base.domain, origin, x, y)
        return solve_piece(self.i, seed, self.E, self.g, self.tol, self.spec, constraint=self.xi)

    def project(self, u):
        """Chart coordinates of a nearby piece map (nearest point along the kernel)."""
        n = self.base.n
        q = (u.origin[:n] + u.x[u.domain.truncation_column, 0]) - (
            self.base.origin[:n] + self.base.x[self.base.domain.truncation_column, 0]
        )
        dom = self.base.domain
        diff = TangentSection(dom, u.x - self.base.x, u.y - self.base.y, np.zeros(n))
        for ql, eta in zip(q, self.eta_decay):
            diff = diff.combine(eta, 1.0, -ql)
        zero = np.zeros(n)
        c = np.array([split_inner(diff, zero, xi, zero) for xi in self.xi])
        return q, c

    def ev(self, u):
        return u.asymptotic


def build_chart(i, u, E, g, radius=0.05, spec=NormSpec(), tol=1e-10, partner=None):
    """Chart around u after checking mapping transversality (and evaluation transversality with a partner)."""
    if partner is not None:
        u1, u2, E1, E2 = (u, partner[0], E, partner[1]) if i == 1 else (partner[0], u, partner[1], E)
        report = cr.verify_transversality(u1, u2, E1, E2, g)
        if not report.passed:
            raise TransversalityFailure("transversality check failed")
    else:
        lin = cr.linearize_dbar(u, g)
        e_secs = cr.transport_basis(E, u, g).ortho if E is not None and E.dim else []
        deficit, _ = cr.surjectivity(lin.reduced(), [e.to_vec() for e in e_secs])
        if deficit:
            raise TransversalityFailure("piece operator is not surjective modulo the obstruction space")
    return ModuliChart(i, u, E, g, radius, spec, tol)


# ---------------------------------------------------------------- fixtures

M0_BUMP = dict(center=0.5, t=0.5, radius=0.4)
M0_PEAK = 1.2
M1_RADIUS = 0.5


@dataclass
class Fixture:
    """Geometry, obstruction spaces, piece solutions and charts on fixed piece lattices."""

    name: str
    g: TargetGeometry
    cfg: DomainConfig
    E: tuple
    pieces: tuple
    charts: tuple = None
    info: dict = field(default_factory=dict)

    def piece_domain(self, i, T):
        return build_piece(i, T, self.cfg)


def default_bumps(i, n=1):
    c = -M0_BUMP["center"] if i == 1 else M0_BUMP["center"]
    direction = np.zeros(2 * n)
    direction[n] = 1.0
    return [cr.BumpSpec((c, M0_BUMP["t"]), M0_BUMP["radius"], tuple(direction))]


def _bump_spaces(i, u_ob, bumps=None):
    return cr.ObstructionSpace(i, u_ob, list(bumps) if bumps else default_bumps(i, u_ob.n))


def _reference_T(cfg):
    """Largest grid-aligned T admissible on the fixed piece lattices."""
    trunc = cfg.trunc_for(1.0) if cfg.trunc is None else cfg.trunc
    T = np.floor((trunc - 1.0) / 9.0 / cfg.h_tau) * cfg.h_tau
    return max(T, cfg.h_tau)


def fixture_m0(cfg=None, peak=M0_PEAK, with_charts=True, bumps=None, geometry=None):
    """J = J0, one obstruction bump per piece; u_i = p0 + c * D0^{-1} e_i.

    ``bumps`` optionally replaces the per-piece bump lists; ``geometry``
    supplies n, p0 and the closeness constants but must have constant J.
    """
    cfg = cfg or DomainConfig(trunc=56.0)
    g = geometry or TargetGeometry(n=1)
    if g.perturbations:
        raise GeometryError("fixture m0 needs a constant almost complex structure")
    bumps = bumps or (None, None)
    T = _reference_T(cfg)
    pieces, amps = [], []
    for i in (1, 2):
        dom = build_piece(i, T, cfg)
        const = MapSection.constant(dom, g.p0)
        E = _bump_spaces(i, const, bumps[i - 1])
        tb = cr.transport_basis(E, const, g)
        system = PieceSystem(cr.linearize_dbar(const, g), tb.ortho)
        w = system.basis_responses()[0]
        ink = dom.in_K(dom.lat["x"].tau)
        amp = peak / float(np.max(np.abs(w.sx[ink])))
        if i == 2:
            amp = amps[0]
        pieces.append(MapSection(dom, g.p0, amp * w.sx, amp * w.sy))
        amps.append(amp)
    spaces = tuple(_bump_spaces(i, u, b) for i, u, b in zip((1, 2), pieces, bumps))
    fx = Fixture("m0", g, cfg, spaces, tuple(pieces), info={"amplitude": amps[0]})
    if with_charts:
        attach_charts(fx)
    return fx


def fixture_m1(cfg=None, eps=0.05, with_charts=True, tol=1e-10, bumps=None, geometry=None):
    """Fixture M0 with J perturbed near the image of piece 1; pieces re-solved by Newton.

    Without explicit perturbations in ``geometry`` a single bump of amplitude
    ``eps`` is centred at the point of K_1 where the first coordinate of u_1 peaks.
    """
    base_g = geometry or TargetGeometry(n=1)
    flat = TargetGeometry(n=base_g.n, p0=base_g.p0, iota_prime=base_g.iota_prime, eps1=base_g.eps1)
    m0 = fixture_m0(cfg, bumps=bumps, geometry=flat, with_charts=False)
    if base_g.perturbations:
        g = base_g
    else:
        u1 = m0.pieces[0]
        dom = u1.domain
        vals = u1.node_values()
        ink = dom.in_K(dom.lat["x"].tau)
        # signed first coordinate: the choice must not flip between grids when |u_1| has two near-equal peaks
        mag = np.where(ink[:, None], (vals - flat.p0)[..., 0], -np.inf)
        node = vals[np.unravel_index(int(np.argmax(mag)), mag.shape)]
        gen = np.diag(np.concatenate([np.ones(flat.n), -np.ones(flat.n)]))
        g = TargetGeometry(
            n=flat.n,
            perturbations=(Perturbation(node, M1_RADIUS, eps, gen),),
            p0=flat.p0,
            iota_prime=flat.iota_prime,
            eps1=flat.eps1,
        )
    spaces = m0.E
    pieces = tuple(solve_piece(i, u, E, g, tol) for i, u, E in zip((1, 2), m0.pieces, spaces))
    centers = [p.center.tolist() for p in g.perturbations]
    fx = Fixture("m1", g, m0.cfg, spaces, pieces, info={"eps": eps, "centers": centers})
    if with_charts:
        attach_charts(fx)
    return fx


def attach_charts(fx, radius=0.05):
    u1, u2 = fx.pieces
    report = cr.verify_transversality(u1, u2, fx.E[0], fx.E[1], fx.g)
    if not report.passed:
        raise TransversalityFailure("fixture pieces are not transversal")
    fx.charts = tuple(ModuliChart(i, u, E, fx.g, radius) for i, u, E in zip((1, 2), fx.pieces, fx.E))
    fx.info["transversality"] = report
    return fx


def make_fixture(name, cfg=None, **kw):
    if name == "m0":
        return fixture_m0(cfg, **kw)
    if name == "m1":
        return fixture_m1(cfg, **kw)
    raise ValueError(f"unknown fixture {name}")


def chart_maps(fx, rho):
    """Piece maps u_1^rho, u_2^rho for rho = (q, c_1, c_2) with shared q."""
    n = fx.g.n
    rho = np.zeros(n + sum(E.dim for E in fx.E)) if rho is None else np.asarray(rho, dtype=float)
    q = rho[:n]
    d1 = fx.E[0].dim
    c1, c2 = rho[n: n + d1], rho[n + d1:]
    return fx.charts[0].map(q, c1), fx.charts[1].map(q, c2)


# ---------------------------------------------------------------- pregluing and state


@dataclass
class StepResult:
    """Decaying parts of (V_1, V_2) and the shared asymptotic shift dp."""

    V: tuple
    dp: np.ndarray
    coeffs: tuple
    norm: float

    def full(self, i):
        Vt = self.V[i - 1]
        return TangentSection(Vt.domain, Vt.sx + self.dp, Vt.sy, self.dp)


@dataclass
class GluingState:
    T: float
    kappa: int
    domain: StripDomain
    piece_domains: tuple
    p0: np.ndarray
    dp: np.ndarray
    base: TangentSection
    incr: TangentSection
    residual: ResidualSection
    cumulative_e: list
    coeffs0: list
    coeff_incr: list
    bases: list
    pieces: tuple
    E: tuple
    g: TargetGeometry
    spec: NormSpec
    hats: tuple = None
    errs: tuple = None
    last_step: StepResult = None
    history: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.p0 + self.dp

    def disp(self):
        """u - p as decaying displacement fields."""
        return self.base.combine(self.incr)

    def map(self):
        d = self.disp()
        return MapSection(self.domain, self.p, d.sx, d.sy)

    def correction(self):
        """u - u_(0) as a tangent section (accumulated increments plus dp)."""
        return TangentSection(self.domain, self.incr.sx + self.dp[: self.g.n], self.incr.sy)

    @property
    def kuranishi(self):
        return np.concatenate([k0 + dk for k0, dk in zip(self.coeffs0, self.coeff_incr)])

    @property
    def kuranishi_increment(self):
        return np.concatenate(self.coeff_incr)


def _check_fiber(u1, u2):
    p1, p2 = u1.asymptotic, u2.asymptotic
    if np.max(np.abs(p1 - p2)) > 1e-12:
        raise FiberMismatch(f"asymptotic values differ by {np.max(np.abs(p1 - p2)):.3e}")
    if np.any(u1.x[u1.domain.truncation_column] != 0.0) or np.any(u2.x[u2.domain.truncation_column] != 0.0):
        raise FiberMismatch("piece maps must be stored relative to their asymptotic value")
    return u1.origin


def pieces_for(T, u1, u2, cfg=None):
    """Piece maps re-attached to piece domains carrying the neck length T."""
    out = []
    for i, u in ((1, u1), (2, u2)):
        src = u.domain
        dom = StripDomain(src.kind, T, src.h, src.n_t, src.trunc)
        if dom.trunc < 7.0 * T + 1.0:
            raise GridMismatch("piece truncation too short for this T")
        out.append(on_domain(u, dom))
    return tuple(out)


def preglue(u1, u2, T):
    """Pregluing u_(0) = p + chi_B^left (u_1 - p) + chi_A^right (u_2 - p), as a map on the glued strip."""
    state_base, _, _, p = _pregluing_parts(u1, u2, T)
    glued = state_base.domain
    return MapSection(glued, p, state_base.sx, state_base.sy)


def _pregluing_parts(u1, u2, T):
    u1, u2 = pieces_for(T, u1, u2)
    p = _check_fiber(u1, u2)
    glued = build_glued(T, DomainConfig(h_tau=u1.domain.h, n_t=u1.domain.n_t))
    ut = [rehome_tangent(disp_tangent(u), glued) for u in (u1, u2)]
    base = _scale_tangent(ut[0], "B_left").combine(_scale_tangent(ut[1], "A_right"))
    return base, ut, (u1, u2), p


def _splice_mask(domain, lat, i):
    tau = _glued_tau(domain, lat)
    T = domain.T
    return (tau < T + 1.0) if i == 1 else (tau > -T - 1.0)


def initial_state(u1, u2, T, E, g, spec=NormSpec()):
    """Pregluing, initial obstruction terms and the initial residual."""
    base, ut, (u1, u2), p = _pregluing_parts(u1, u2, T)
    glued = base.domain
    n = u1.n
    tmaps = [MapSection(glued, p, t.sx, t.sy) for t in ut]
    e0 = []
    for i, tm in ((1, tmaps[0]), (2, tmaps[1])):
        r = cr.dbar(tm, g)
        e0.append(r.masked(_splice_mask(glued, "rx", i).astype(float)[:, None], _splice_mask(glued, "ry", i).astype(float)[:, None]))
    # u_(0) - u~_1 and u_(0) - u~_2 formed directly from the cutoff complements
    d1 = _scale_tangent(ut[1], "A_right").combine(_scale_tangent(ut[0], "B_right"), 1.0, -1.0)
    d2 = _scale_tangent(ut[0], "B_left").combine(_scale_tangent(ut[1], "A_left"), 1.0, -1.0)
    inc1 = cr.dbar_increment(tmaps[0], d1, g)
    inc2 = cr.dbar_increment(tmaps[1], d2, g)
    left = {lat: (_glued_tau(glued, lat) <= 0.0)[:, None, None] for lat in ("rx", "ry")}
    R = ResidualSection(
        glued,
        np.where(left["rx"], inc1.rx - e0[1].rx, inc2.rx - e0[0].rx),
        np.where(left["ry"], inc1.ry - e0[1].ry, inc2.ry - e0[0].ry),
    )
    u0 = MapSection(glued, p, base.sx, base.sy)
    bases = [cr.transport_basis(Ei, u0, g) if Ei.dim else None for Ei in E]
    coeffs0 = []
    for u, Ei in ((u1, E[0]), (u2, E[1])):
        if Ei.dim == 0:
            coeffs0.append(np.zeros(0))
            continue
        tb = cr.transport_basis(Ei, u, g)
        coeffs0.append(cr.project_E(tb, cr.dbar(u, g))[2])
    state = GluingState(
        T=float(T),
        kappa=0,
        domain=glued,
        piece_domains=(u1.domain, u2.domain),
        p0=np.asarray(p, dtype=float).copy(),
        dp=np.zeros(2 * n),
        base=base,
        incr=TangentSection.zeros(glued, n),
        residual=R,
        cumulative_e=e0,
        coeffs0=coeffs0,
        coeff_incr=[np.zeros_like(c) for c in coeffs0],
        bases=bases,
        pieces=(u1, u2),
        E=tuple(E),
        g=g,
        spec=spec,
    )
    state.initial = {
        "residual_norm": l2_norm_residual(R, spec),
        "e_norms": [l2_norm_residual(e, spec) for e in e0],
    }
    return state


def initial_errors(state):
    return tuple(state.cumulative_e) if state.kappa == 0 else None


def split_error(state):
    """Err_1 = chi_X^left R and Err_2 = chi_X^right R re-homed to the piece domains."""
    R = state.residual
    errs = []
    for which, dom in (("X_left", state.piece_domains[0]), ("X_right", state.piece_domains[1])):
        errs.append(rehome_residual(_scale_residual(R, which), dom))
    state.errs = tuple(errs)
    return state.errs


def hat_truncate(state):
    """u^_1 = p + chi_B^left(tau - T)(u - p) on piece 1 and the mirrored u^_2."""
    d = state.disp()
    hats = []
    for which, dom in (("hat1", state.piece_domains[0]), ("hat2", state.piece_domains[1])):
        h = rehome_tangent(_scale_tangent(d, which), dom)
        hats.append(MapSection(dom, state.p, h.sx, h.sy))
    state.hats = tuple(hats)
    return state.hats


def newton_step(state, g=None, spec=None):
    """Coupled solve Pi^perp(D^app V_i + Err_i) = 0 with shared dp, minimal L^2 norm."""
    g = g or state.g
    spec = spec or state.spec
    n = g.n
    if state.errs is None:
        split_error(state)
    if state.hats is None:
        hat_truncate(state)
    zero = np.zeros(n)
    parts = []
    for idx, (hat, err, Ei) in enumerate(zip(state.hats, state.errs, state.E)):
        tb = cr.transport_basis(Ei, hat, g) if Ei.dim else None
        S = rehome_residual(state.cumulative_e[idx], hat.domain)
        lin = cr.approx_linearization(hat, S, Ei, g)
        system = PieceSystem(lin, tb.ortho if tb is not None else [])
        P = system.solve_residual(err.scaled(-1.0))
        cols = [(c, np.eye(n)[l]) for l, c in enumerate(system.constant_responses())]
        cols += [(x, zero) for x in system.basis_responses()]
        gram = np.array([[split_inner(a, pa, b, pb) for b, pb in cols] for a, pa in cols])
        rhs = np.array([split_inner(a, pa, P, zero) for a, pa in cols])
        parts.append((P, cols, gram, rhs))
    d1, d2 = state.E[0].dim, state.E[1].dim
    m = n + d1 + d2
    H = np.zeros((m, m))
    b = np.zeros(m)
    for idx, (_, _, gram, rhs) in enumerate(parts):
        sel = list(range(n)) + (list(range(n, n + d1)) if idx == 0 else list(range(n + d1, m)))
        H[np.ix_(sel, sel)] += gram
        b[sel] += rhs
    try:
        theta = np.linalg.solve(H, -b)
    except np.linalg.LinAlgError as exc:
        raise TransversalityFailure("coupled kernel system is singular") from exc
    dp = theta[:n]
    coeffs = (theta[n: n + d1], theta[n + d1:])
    V = []
    for idx, (P, cols, _, _) in enumerate(parts):
        th = np.concatenate([dp, coeffs[idx]])
        Vt = P
        for t, (c, _) in zip(th, cols):
            if t != 0.0:
                Vt = Vt.combine(c, 1.0, t)
        V.append(Vt)
    norm = sum(piece_step_norm(Vt, dp, spec) for Vt in V)
    step = StepResult(tuple(V), dp, coeffs, norm)
    state.last_step = step
    return step


def step_complement(state, step, g=None):
    """Norms of Pi^perp(D^app V_i + Err_i) for a computed step (should be at solver precision)."""
    g = g or state.g
    out = []
    for idx, (hat, err, Ei) in enumerate(zip(state.hats, state.errs, state.E)):
        S = rehome_residual(state.cumulative_e[idx], hat.domain)
        lin = cr.approx_linearization(hat, S, Ei, g)
        full = step.full(idx + 1)
        val = lin.apply(full).combine(err)
        if Ei.dim:
            val = cr.project_E(cr.transport_basis(Ei, hat, g), val)[1]
        out.append(l2_norm_residual(val, state.spec) / max(l2_norm_residual(err, state.spec), 1e-300))
    return out


def glued_increment(state, step):
    """U - dp^Pal = chi_B^left (V_1 - dp) + chi_A^right (V_2 - dp) on the glued strip."""
    glued = state.domain
    V1 = rehome_tangent(step.V[0], glued)
    V2 = rehome_tangent(step.V[1], glued)
    return _scale_tangent(V1, "B_left").combine(_scale_tangent(V2, "A_right"))


def update_map(state, step):
    """Apply a step: new map, new residual, updated obstruction terms and coefficients."""
    g = state.g
    old = state.map()
    Ut = glued_increment(state, step)
    shift = np.concatenate([step.dp, np.zeros(g.n)])
    inc = cr.dbar_increment(old, Ut, g, shift=shift)
    X = state.residual.combine(inc)
    Ufull = TangentSection(state.domain, Ut.sx + step.dp, Ut.sy)
    # Y = X + sum k_b (e_b(old) - e_b(new)); dk = <Y, e(new)>; R = Y - sum dk e(new)
    new_bases, diffs_all, ks = [], [], []
    Y = X
    for idx, Ei in enumerate(state.E):
        tb = state.bases[idx]
        if tb is None:
            new_bases.append(None)
            diffs_all.append([])
            ks.append(np.zeros(0))
            continue
        k = state.coeffs0[idx] + state.coeff_incr[idx]
        new_tb, diffs = cr.basis_difference(tb, Ufull, g)
        for kb, D in zip(k, diffs):
            Y = Y.combine(D, 1.0, kb)
        new_bases.append(new_tb)
        diffs_all.append(diffs)
        ks.append(k)
    R = Y
    new_e, new_incr = [], []
    for idx in range(len(state.E)):
        tb = new_bases[idx]
        if tb is None:
            new_e.append(state.cumulative_e[idx])
            new_incr.append(state.coeff_incr[idx])
            continue
        dk = np.array([residual_inner(Y, e) for e in tb.ortho])
        e_k = ResidualSection.zeros(state.domain, g.n)
        for dkb, e in zip(dk, tb.ortho):
            e_k = e_k.combine(e, 1.0, dkb)
            R = R.combine(e, 1.0, -dkb)
        for kb, D in zip(ks[idx], diffs_all[idx]):
            e_k = e_k.combine(D, 1.0, -kb)
        new_e.append(state.cumulative_e[idx].combine(e_k))
        new_incr.append(state.coeff_incr[idx] + dk)
    state.residual = R
    state.cumulative_e = new_e
    state.bases = new_bases
    state.coeff_incr = new_incr
    state.incr = state.incr.combine(Ut)
    state.dp = state.dp + shift
    state.kappa += 1
    state.hats = None
    state.errs = None
    return state.map()


# ---------------------------------------------------------------- glue driver


@dataclass
class GluedSolution:
    T: float
    map: MapSection
    state: GluingState
    iterations: int
    converged: bool
    history: list

    @property
    def kuranishi(self):
        return self.state.kuranishi

    @property
    def kuranishi_increment(self):
        return self.state.kuranishi_increment


HISTORY_COLUMNS = ("kappa", "err1_norm", "err2_norm", "step_norm", "residual")


def glue_pieces(u1, u2, T, E, g, spec=NormSpec(), tol_stop=1e-10, kappa_max=25):
    """Run the alternating Newton cycle from a pair of piece solutions."""
    state = initial_state(u1, u2, T, E, g, spec)
    converged = False
    for kappa in range(kappa_max):
        e1, e2 = split_error(state)
        hat_truncate(state)
        step = newton_step(state)
        row = {
            "kappa": kappa,
            "err1_norm": l2_norm_residual(e1, spec),
            "err2_norm": l2_norm_residual(e2, spec),
            "step_norm": step.norm,
            "residual": l2_norm_residual(state.residual, spec),
        }
        state.history.append(row)
        if not all(np.isfinite(v) for v in row.values()):
            raise NoConvergence(f"non-finite norms at kappa={kappa}", state.history)
        update_map(state, step)
        if step.norm <= tol_stop:
            converged = True
            break
    state.final_residual = l2_norm_residual(state.residual, spec)
    if tol_stop > 0 and not converged:
        raise NoConvergence(f"no convergence in {kappa_max} steps", state.history)
    return GluedSolution(state.T, state.map(), state, state.kappa, converged, state.history)


def glue(fx, rho, T, spec=NormSpec(), tol_stop=1e-10, kappa_max=25):
    """Glue the chart maps u_1^rho, u_2^rho of a fixture at neck length T."""
    if T < fx.cfg.h_tau:
        raise GridMismatch("T must be at least one grid step")
    u1, u2 = chart_maps(fx, rho)
    sol = glue_pieces(u1, u2, T, fx.E, fx.g, spec, tol_stop, kappa_max)
    sol.rho = None if rho is None else np.asarray(rho, dtype=float)
    return sol


def identity_defect(state):
    """|dbar u - sum of obstruction terms - R| relative to |dbar u| (checks the bookkeeping)."""
    u = state.map()
    r = cr.dbar(u, state.g)
    diff = r.combine(state.residual, 1.0, -1.0)
    for e in state.cumulative_e:
        diff = diff.combine(e, 1.0, -1.0)
    scale = max(np.max(np.abs(r.rx)), np.max(np.abs(r.ry)), 1e-300)
    return max(np.max(np.abs(diff.rx)), np.max(np.abs(diff.ry))) / scale


# ---------------------------------------------------------------- restriction, Kuranishi, decompose


@dataclass
class GluresSnapshot:
    """u_T restricted to the collar K_i^S: base piece map plus the gluing correction."""

    i: int
    S: float
    T: float
    origin: np.ndarray
    lattices: dict
    base: dict
    corr: dict

    def values(self):
        n = self.origin.size // 2
        return {
            "x": self.base["x"] + self.corr["x"] + self.origin[:n],
            "y": self.base["y"] + self.corr["y"],
        }


def _collar_rows(dom, lat, S):
    tau = dom.lat[lat].tau
    return (tau <= S + 1e-12) if dom.piece_index == 1 else (tau >= -S - 1e-12)


def glures(i, S, sol):
    """Restriction of u_T to K_i^S in the piece coordinate; identical lattice for every T."""
    state = sol.state
    dom = state.piece_domains[i - 1]
    if abs(S / dom.h - round(S / dom.h)) > 1e-9:
        raise GridMismatch("S must be a multiple of h_tau")
    if S > 10.0 * state.T + 1e-12:
        raise GridMismatch("S exceeds 10T")
    corr = rehome_tangent(state.correction(), dom)
    piece = state.pieces[i - 1]
    lattices, base, cor = {}, {}, {}
    for lat, b, c in (("x", piece.x, corr.sx), ("y", piece.y, corr.sy)):
        rows = _collar_rows(dom, lat, S)
        src = dom.lat[lat]
        lattices[lat] = type(src)(lat, src.half_index[rows], src.t, src.h)
        base[lat] = b[rows].copy()
        cor[lat] = c[rows].copy()
    return GluresSnapshot(i, float(S), state.T, piece.origin.copy(), lattices, base, cor)


def glures_distance(sol_a, sol_b, S=2.0, m=3):
    """L^2_{m+1} distance of the Glures outputs of two solutions, summed over both collars."""
    total = 0.0
    for i in (1, 2):
        a, b = glures(i, S, sol_a), glures(i, S, sol_b)
        va, vb = a.values(), b.values()
        lats = a.lattices
        total += lattice_norm([va["x"] - vb["x"], va["y"] - vb["y"]], [lats["x"], lats["y"]], m + 1)
    return total


def kuranishi_map(sol, E1=None, E2=None):
    """Coefficients of the obstruction part of dbar u_T in the transported orthonormal bases."""
    return sol.kuranishi


@dataclass
class Decomposition:
    pieces: tuple
    p: np.ndarray
    residuals: tuple


def decompose(u, T, g, E=None, spec=NormSpec(), piece_domains=None, cfg=None):
    """Split a glued map into piece maps: u'_1 = p^u + chi_B^left(tau - T)(u - p^u), mirrored for u'_2."""
    dom = u.domain
    j, _ = dom.center_node
    pu_disp = u.x[j, 0]
    n = u.n
    pu = u.origin.copy()
    pu[:n] += pu_disp
    d = TangentSection(dom, u.x - pu_disp, u.y)
    if piece_domains is None:
        cfg = cfg or DomainConfig(h_tau=dom.h, n_t=dom.n_t)
        piece_domains = (build_piece(1, T, cfg), build_piece(2, T, cfg))
    out, res = [], []
    for i, which, pd in ((1, "hat1", piece_domains[0]), (2, "hat2", piece_domains[1])):
        h = rehome_tangent(_scale_tangent(d, which), pd)
        ui = MapSection(pd, pu, h.sx, h.sy)
        out.append(ui)
        Ei = None if E is None else E[i - 1]
        res.append(complement_norm(ui, Ei, g, spec)[0])
    return Decomposition(tuple(out), pu, tuple(res))


@dataclass
class RoundTrip:
    rho: np.ndarray
    rho_prime: np.ndarray
    distance: float
    decomposition: Decomposition
    solution: GluedSolution


def map_distance(a, b, spec=NormSpec()):
    """W^2_{m+1,delta} distance of two glued maps on the same domain."""
    n = a.n
    dx = (a.origin[:n] - b.origin[:n]) + (a.x - b.x)
    ts = TangentSection(a.domain, dx, a.y - b.y)
    return w_norm_glued(ts, spec)


def solution_distance(s1, s2, spec=NormSpec()):
    """Distance between two glued solutions formed from their decaying parts."""
    st1, st2 = s1.state, s2.state
    n = st1.g.n
    dorig = (st1.p0 - st2.p0)[:n] + (st1.dp - st2.dp)[:n]
    d1, d2 = st1.disp(), st2.disp()
    ts = TangentSection(st1.domain, dorig + (d1.sx - d2.sx), d1.sy - d2.sy)
    return w_norm_glued(ts, spec)


def roundtrip(fx, sol, spec=NormSpec(), tol_stop=1e-10, kappa_max=25):
    """Decompose a glued solution, project to the charts, reglue and measure the distance."""
    state = sol.state
    dec = decompose(sol.map, state.T, fx.g, fx.E, spec, piece_domains=state.piece_domains)
    q1, c1 = fx.charts[0].project(on_domain(dec.pieces[0], fx.charts[0].base.domain))
    q2, c2 = fx.charts[1].project(on_domain(dec.pieces[1], fx.charts[1].base.domain))
    rho_prime = np.concatenate([0.5 * (q1 + q2), c1, c2])
    again = glue(fx, rho_prime, state.T, spec, tol_stop, kappa_max)
    rho = getattr(sol, "rho", None)
    return RoundTrip(rho, rho_prime, solution_distance(sol, again, spec), dec, again)
