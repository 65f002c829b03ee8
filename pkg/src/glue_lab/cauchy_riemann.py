"""Nonlinear Cauchy-Riemann operator on staggered lattices, its linearization,
obstruction spaces with transported bases, projections and the approximate
linearization.

The state vector z stacks the x-block (n components on the x lattice) and the
y-block (n components on the y lattice), component-major.  The residual vector
stacks the rx rows then the ry rows in the same way.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import GLUED, PIECE1, PIECE2, StripDomain, rehome
from .errors import TransportTooFar, TransversalityFailure
from .geometry import bump, pal_j
from .sobolev import MapSection, ResidualSection, TangentSection, quad_weights, residual_inner

# ---------------------------------------------------------------- stencils


def _idx(j, k, nk):
    return j * nk + k


class _Builder:
    """Coordinate-format accumulator for a scalar stencil matrix."""

    def __init__(self, rows, cols):
        self.shape = (rows, cols)
        self.r, self.c, self.v = [], [], []

    def add(self, row, col, val):
        self.r.append(row)
        self.c.append(col)
        self.v.append(val)

    def csr(self):
        return sp.csr_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=self.shape
        )


@dataclass
class Stencils:
    """Scalar stencil matrices on one domain (before component placement)."""

    nx: int
    ny: int
    mx: int
    my: int
    rx: dict = field(default_factory=dict)
    ry: dict = field(default_factory=dict)


@lru_cache(maxsize=64)
def _stencils(kind, N, n_t, h, h_t):
    nkx, nky = n_t + 1, n_t
    nx, ny = (N + 1) * nkx, N * nky
    ry_j = np.arange(N + 1) if kind == GLUED else (np.arange(N) if kind == PIECE1 else np.arange(1, N + 1))
    closed_left = kind != PIECE2
    closed_right = kind != PIECE1
    st = Stencils(nx, ny, N * nkx, len(ry_j) * nky)

    # rx points (j + 1/2, k)
    J, K = np.meshgrid(np.arange(N), np.arange(nkx), indexing="ij")
    J, K = J.ravel(), K.ravel()
    rows = _idx(J, K, nkx)
    b = _Builder(st.mx, nx)
    b.add(rows, _idx(J + 1, K, nkx), np.full(rows.size, 1.0 / h))
    b.add(rows, _idx(J, K, nkx), np.full(rows.size, -1.0 / h))
    st.rx["dtau"] = b.csr()

    b = _Builder(st.mx, nx)
    b.add(rows, _idx(J, K, nkx), np.full(rows.size, 0.5))
    b.add(rows, _idx(J + 1, K, nkx), np.full(rows.size, 0.5))
    st.rx["ux"] = b.csr()

    # y at rx: average of cells k-1/2, k+1/2 with odd reflection across t = 0, 1
    b = _Builder(st.mx, ny)
    inner = (K > 0) & (K < n_t)
    b.add(rows[inner], _idx(J[inner], K[inner], nky), np.full(inner.sum(), 0.5))
    b.add(rows[inner], _idx(J[inner], K[inner] - 1, nky), np.full(inner.sum(), 0.5))
    st.rx["uy"] = _pad_csr(b, st.mx, ny)

    b = _Builder(st.mx, ny)
    b.add(rows[inner], _idx(J[inner], K[inner], nky), np.full(inner.sum(), 1.0 / h_t))
    b.add(rows[inner], _idx(J[inner], K[inner] - 1, nky), np.full(inner.sum(), -1.0 / h_t))
    lo, hi = K == 0, K == n_t
    b.add(rows[lo], _idx(J[lo], K[lo], nky), np.full(lo.sum(), 2.0 / h_t))
    b.add(rows[hi], _idx(J[hi], K[hi] - 1, nky), np.full(hi.sum(), -2.0 / h_t))
    st.rx["dty"] = b.csr()

    # t-derivative of x at rx: node t-derivatives averaged over j, j + 1
    b = _Builder(st.mx, nx)
    for dj in (0, 1):
        jj = J + dj
        b.add(rows[inner], _idx(jj[inner], K[inner] + 1, nkx), np.full(inner.sum(), 0.25 / h_t))
        b.add(rows[inner], _idx(jj[inner], K[inner] - 1, nkx), np.full(inner.sum(), -0.25 / h_t))
        for kk, sgn in ((0, 1.0), (1, 1.0), (2, 1.0)):
            coef = (-3.0, 4.0, -1.0)[kk] * 0.25 / h_t
            b.add(rows[lo], _idx(jj[lo], K[lo] + kk, nkx), np.full(lo.sum(), sgn * coef))
            b.add(rows[hi], _idx(jj[hi], K[hi] - kk, nkx), np.full(hi.sum(), -sgn * coef))
    st.rx["dtx"] = b.csr()

    # ry points (j, k + 1/2)
    J, K = np.meshgrid(ry_j, np.arange(nky), indexing="ij")
    J, K = J.ravel(), K.ravel()
    rows = np.arange(J.size)
    left = J - 1
    right = J
    has_left = left >= 0
    has_right = right <= N - 1

    def y_pair(builder, wl, wr, ghost_sign):
        # value combination wl*y[j-1/2] + wr*y[j+1/2], closed ends reflect oddly
        both = has_left & has_right
        builder.add(rows[both], _idx(left[both], K[both], nky), np.full(both.sum(), wl))
        builder.add(rows[both], _idx(right[both], K[both], nky), np.full(both.sum(), wr))
        only_r = ~has_left
        if closed_left:
            builder.add(rows[only_r], _idx(right[only_r], K[only_r], nky), np.full(only_r.sum(), wr - ghost_sign * wl))
        only_l = ~has_right
        if closed_right:
            builder.add(rows[only_l], _idx(left[only_l], K[only_l], nky), np.full(only_l.sum(), wl - ghost_sign * wr))

    b = _Builder(st.my, ny)
    y_pair(b, -1.0 / h, 1.0 / h, 1.0)
    st.ry["dtau"] = _pad_csr(b, st.my, ny)

    b = _Builder(st.my, ny)
    y_pair(b, 0.5, 0.5, 1.0)
    st.ry["uy"] = _pad_csr(b, st.my, ny)

    b = _Builder(st.my, nx)
    b.add(rows, _idx(J, K + 1, nkx), np.full(rows.size, 1.0 / h_t))
    b.add(rows, _idx(J, K, nkx), np.full(rows.size, -1.0 / h_t))
    st.ry["dtx"] = b.csr()

    b = _Builder(st.my, nx)
    b.add(rows, _idx(J, K, nkx), np.full(rows.size, 0.5))
    b.add(rows, _idx(J, K + 1, nkx), np.full(rows.size, 0.5))
    st.ry["ux"] = b.csr()

    # t-derivative of y at ry: cell t-derivatives (odd reflection) averaged over the two cells
    tder = _cell_t_derivative(N, n_t, h_t)
    avg = _Builder(st.my, ny)
    y_pair(avg, 0.5, 0.5, 1.0)
    st.ry["dty"] = (_pad_csr(avg, st.my, ny) @ tder).tocsr()
    return st


def _pad_csr(b, rows, cols):
    if not b.r:
        return sp.csr_matrix((rows, cols))
    return b.csr()


def _cell_t_derivative(N, n_t, h_t):
    ny = N * n_t
    b = _Builder(ny, ny)
    J, K = np.meshgrid(np.arange(N), np.arange(n_t), indexing="ij")
    J, K = J.ravel(), K.ravel()
    rows = _idx(J, K, n_t)
    up = K + 1 <= n_t - 1
    dn = K - 1 >= 0
    c = 0.5 / h_t
    b.add(rows[up], _idx(J[up], K[up] + 1, n_t), np.full(up.sum(), c))
    b.add(rows[~up], _idx(J[~up], K[~up], n_t), np.full((~up).sum(), -c))
    b.add(rows[dn], _idx(J[dn], K[dn] - 1, n_t), np.full(dn.sum(), -c))
    b.add(rows[~dn], _idx(J[~dn], K[~dn], n_t), np.full((~dn).sum(), c))
    return b.csr()


class Operators:
    """Stencils placed into the full state vector for n components."""

    def __init__(self, domain, n):
        self.domain = domain
        self.n = n
        st = _stencils(domain.kind, domain.N, domain.n_t, domain.h, domain.h_t)
        self.st = st
        self.nz = n * (st.nx + st.ny)
        self.nres = n * (st.mx + st.my)

    def place(self, mat, comp, block):
        """Embed a scalar matrix acting on component ``comp`` of block 'x' or 'y'."""
        st, n = self.st, self.n
        off = comp * st.nx if block == "x" else n * st.nx + comp * st.ny
        mat = mat.tocoo()
        return sp.csr_matrix((mat.data, (mat.row, mat.col + off)), shape=(mat.shape[0], self.nz))

    def lattice_ops(self, lat):
        """Lists (u_ops, dt_ops, dtau_ops) with one full-width operator per component."""
        st = self.st.rx if lat == "rx" else self.st.ry
        n = self.n
        u_ops = [self.place(st["ux"], c, "x") for c in range(n)] + [self.place(st["uy"], c, "y") for c in range(n)]
        dt_ops = [self.place(st["dtx"], c, "x") for c in range(n)] + [self.place(st["dty"], c, "y") for c in range(n)]
        blk = "x" if lat == "rx" else "y"
        dtau_ops = [self.place(st["dtau"], c, blk) for c in range(n)]
        return u_ops, dt_ops, dtau_ops


def get_ops(domain, n):
    ops = getattr(domain, "_ops_cache", None)
    if ops is None or ops.n != n:
        ops = Operators(domain, n)
        domain._ops_cache = ops
        domain._lat_ops = {lat: ops.lattice_ops(lat) for lat in ("rx", "ry")}
    return ops


def lattice_ops(domain, n, lat):
    get_ops(domain, n)
    return domain._lat_ops[lat]


# ---------------------------------------------------------------- state vectors


def map_to_z(u):
    """Displacement state vector of a map (origin excluded)."""
    n = u.n
    return np.concatenate([u.x.reshape(-1, n).T.ravel(), u.y.reshape(-1, n).T.ravel()])


def tangent_to_z(ts):
    n = ts.n
    return np.concatenate([ts.sx.reshape(-1, n).T.ravel(), ts.sy.reshape(-1, n).T.ravel()])


def z_to_arrays(domain, z, n):
    sx, sy = domain.lat["x"].shape, domain.lat["y"].shape
    nx = sx[0] * sx[1]
    x = z[: n * nx].reshape(n, nx).T.reshape(sx + (n,))
    y = z[n * nx:].reshape(n, -1).T.reshape(sy + (n,))
    return x, y


def z_to_tangent(domain, z, n, v=None):
    x, y = z_to_arrays(domain, z, n)
    if domain.is_piece and v is None:
        v = x[domain.truncation_column, 0].copy()
    return TangentSection(domain, x, y, v)


def lattice_values(u, lat):
    """Full 2n positions and t-derivatives of a map at the rx or ry points."""
    n = u.n
    u_ops, dt_ops, _ = lattice_ops(u.domain, n, lat)
    z = map_to_z(u)
    pos = np.stack([op @ z for op in u_ops], axis=-1) + u.origin
    dt = np.stack([op @ z for op in dt_ops], axis=-1)
    return pos, dt


def lattice_tangent_values(ts, lat):
    u_ops, _, _ = lattice_ops(ts.domain, ts.n, lat)
    z = tangent_to_z(ts)
    return np.stack([op @ z for op in u_ops], axis=-1)


# ---------------------------------------------------------------- dbar


def _residual_parts(domain, n, lat, z, pos, g):
    u_ops, dt_ops, dtau_ops = lattice_ops(domain, n, lat)
    dt = np.stack([op @ z for op in dt_ops], axis=-1)
    jdt = np.einsum("...ab,...b->...a", g.J(pos), dt)
    sl = slice(0, n) if lat == "rx" else slice(n, 2 * n)
    return np.stack([dtau_ops[c] @ z for c in range(n)], axis=-1) + jdt[:, sl]


def dbar(u, g):
    """Discrete du/dtau + J(u) du/dt on the staggered residual lattices."""
    n = u.n
    z = map_to_z(u)
    out = {}
    for lat in ("rx", "ry"):
        pos, _ = lattice_values(u, lat)
        out[lat] = _residual_parts(u.domain, n, lat, z, pos, g).reshape(u.domain.lat[lat].shape + (n,))
    return ResidualSection(u.domain, out["rx"], out["ry"])


def dbar_increment(u, U, g, shift=None):
    """dbar(u') - dbar(u) for u' = u + shift + U, without subtractive cancellation.

    ``shift`` is a constant vector in T L: it moves positions but has no
    derivative, so it is kept out of the difference quotients.
    """
    n = u.n
    zU = tangent_to_z(U)
    z = map_to_z(u)
    out = {}
    for lat in ("rx", "ry"):
        u_ops, dt_ops, dtau_ops = lattice_ops(u.domain, n, lat)
        pos = np.stack([op @ z for op in u_ops], axis=-1) + u.origin
        dpos = np.stack([op @ zU for op in u_ops], axis=-1)
        if shift is not None:
            dpos = dpos + np.asarray(shift, dtype=float)
        dtU = np.stack([op @ zU for op in dt_ops], axis=-1)
        dtu = np.stack([op @ z for op in dt_ops], axis=-1)
        sl = slice(0, n) if lat == "rx" else slice(n, 2 * n)
        val = np.stack([dtau_ops[c] @ zU for c in range(n)], axis=-1)
        val = val + np.einsum("...ab,...b->...a", g.J(pos + dpos), dtU)[:, sl]
        if not g.is_constant:
            val = val + np.einsum("...ab,...b->...a", g.delta_J(pos, dpos), dtu)[:, sl]
        out[lat] = val.reshape(u.domain.lat[lat].shape + (n,))
    return ResidualSection(u.domain, out["rx"], out["ry"])


def energy(u, tau_window=None):
    """(1/2) integral of |du/dtau|^2 + |du/dt|^2 using the compact differences."""
    n = u.n
    z = map_to_z(u)
    ops = get_ops(u.domain, n)
    st = ops.st
    total = 0.0
    for lat, pairs in (
        ("rx", (("dtau", "x"), ("dty", "y"))),
        ("ry", (("dtau", "y"), ("dtx", "x"))),
    ):
        lattice = u.domain.lat[lat]
        q = quad_weights(lattice)
        if tau_window is not None:
            tau = lattice.tau
            inside = (tau >= tau_window[0] - 1e-12) & (tau <= tau_window[1] + 1e-12)
            edge = np.isclose(tau, tau_window[0], atol=1e-12) | np.isclose(tau, tau_window[1], atol=1e-12)
            # trapezoid on the window: edge nodes strictly inside the lattice count half
            edge[[0, -1]] = False
            q = q * (inside * np.where(edge, 0.5, 1.0))[:, None]
        sts = st.rx if lat == "rx" else st.ry
        for name, blk in pairs:
            for c in range(n):
                vals = (ops.place(sts[name], c, blk) @ z).reshape(lattice.shape)
                total += float(np.sum(q * vals * vals))
    return 0.5 * total


# ---------------------------------------------------------------- linearization


class LinearOperator:
    """Sparse linearized operator on a domain.

    ``matrix`` maps the full state vector z to residual rows.  For pieces the
    free unknowns are (x off the truncation column, y, v); ``embed`` maps them
    to z by writing v into the truncation column.
    """

    def __init__(self, domain, n, matrix):
        self.domain = domain
        self.n = n
        self.matrix = matrix.tocsr()
        self._embed = None

    @property
    def embed(self):
        if self._embed is None:
            self._embed = free_embedding(self.domain, self.n)
        return self._embed

    def apply(self, ts):
        vals = self.matrix @ tangent_to_z(ts)
        return ResidualSection.from_vec(self.domain, vals, self.n)

    def reduced(self):
        """Matrix in free-unknown coordinates (pieces) or z (glued)."""
        return (self.matrix @ self.embed).tocsc()

    def minus(self, other_matrix):
        return LinearOperator(self.domain, self.n, self.matrix - other_matrix)


@lru_cache(maxsize=64)
def _free_embedding(kind, N, n_t, n, nx, ny):
    nz = n * (nx + ny)
    if kind == GLUED:
        return sp.identity(nz, format="csr")
    col = N if kind == PIECE1 else 0
    nkx = n_t + 1
    rows, cols = [], []
    free_count = 0
    for c in range(n):
        for idx in range(nx):
            j = idx // nkx
            if j == col:
                continue
            rows.append(c * nx + idx)
            cols.append(free_count)
            free_count += 1
    for c in range(n):
        for idx in range(ny):
            rows.append(n * nx + c * ny + idx)
            cols.append(free_count)
            free_count += 1
    for c in range(n):
        for k in range(nkx):
            rows.append(c * nx + col * nkx + k)
            cols.append(free_count + c)
    ncols = free_count + n
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nz, ncols))


def free_embedding(domain, n):
    st = get_ops(domain, n).st
    return _free_embedding(domain.kind, domain.N, domain.n_t, n, st.nx, st.ny)


def free_to_tangent(domain, zeta, n):
    """Tangent section from free unknowns (pieces: last n entries are v)."""
    z = free_embedding(domain, n) @ zeta
    v = zeta[-n:] if domain.is_piece else None
    return z_to_tangent(domain, z, n, v)


def tangent_to_free(ts):
    n = ts.n
    z = tangent_to_z(ts)
    if not ts.domain.is_piece:
        return z
    emb = free_embedding(ts.domain, n)
    keep = np.asarray(emb[:, :-n].sum(axis=1)).ravel() > 0
    return np.concatenate([z[keep], ts.v])


def linearize_dbar(u, g):
    """Sparse matrix of V -> dV/dtau + J(u) dV/dt + (D_V J)(u) du/dt."""
    n = u.n
    z = map_to_z(u)
    blocks = []
    for lat in ("rx", "ry"):
        u_ops, dt_ops, dtau_ops = lattice_ops(u.domain, n, lat)
        pos = np.stack([op @ z for op in u_ops], axis=-1) + u.origin
        dt = np.stack([op @ z for op in dt_ops], axis=-1)
        jm = g.J(pos)
        comps = range(n) if lat == "rx" else range(n, 2 * n)
        if not g.is_constant:
            dj = g.dJ_partials(pos)
            mcoef = np.einsum("...lab,...b->...al", dj, dt)
        for c_out, a in enumerate(comps):
            row = dtau_ops[c_out]
            for b_ in range(2 * n):
                coef = jm[:, a, b_]
                if np.any(coef != 0.0):
                    row = row + sp.diags(coef) @ dt_ops[b_]
            if not g.is_constant:
                for l in range(2 * n):
                    coef = mcoef[:, a, l]
                    if np.any(coef != 0.0):
                        row = row + sp.diags(coef) @ u_ops[l]
            blocks.append(row)
    return LinearOperator(u.domain, n, sp.vstack(blocks).tocsr())


# ---------------------------------------------------------------- obstruction spaces


@dataclass(frozen=True)
class BumpSpec:
    """Obstruction basis element: bump(|z - center| / radius) * direction."""

    center: tuple
    radius: float
    direction: tuple


class ObstructionSpace:
    """Finite basis of residual sections supported inside the compact piece K_i."""

    def __init__(self, i, u_ob, bumps):
        self.i = i
        self.u_ob = u_ob
        self.bumps = tuple(bumps)
        for bspec in self.bumps:
            ct, cs = bspec.center
            r = bspec.radius
            lo, hi = (-1.0, 0.0) if i == 1 else (0.0, 1.0)
            if not (ct - r > lo and ct + r < hi and cs - r > 0.0 and cs + r < 1.0):
                raise ValueError("obstruction bump must lie strictly inside K_i")
        self._ob_cache = {}

    @property
    def dim(self):
        return len(self.bumps)

    def _local_center(self, domain, bspec):
        """Bump centre in the coordinate of ``domain``."""
        ct = bspec.center[0]
        if domain.kind == GLUED:
            ct = ct - 5.0 * domain.T if self.i == 1 else ct + 5.0 * domain.T
        return ct, bspec.center[1]

    def raw_fields(self, domain, lat):
        """Untransported basis values at the points of a residual lattice: (d, M, 2n)."""
        lattice = domain.lat[lat]
        tt, ss = np.meshgrid(lattice.tau, lattice.t, indexing="ij")
        out = []
        for bspec in self.bumps:
            ct, cs = self._local_center(domain, bspec)
            r = np.sqrt((tt - ct) ** 2 + (ss - cs) ** 2) / bspec.radius
            out.append(bump(r).ravel()[:, None] * np.asarray(bspec.direction, dtype=float))
        return np.array(out)

    def support(self, domain, lat):
        raw = self.raw_fields(domain, lat)
        return np.any(raw != 0.0, axis=(0, 2))

    def ob_positions(self, domain, lat):
        """Positions of the reference map at the lattice points of ``domain``."""
        key = (domain.key, lat)
        if key not in self._ob_cache:
            pos, _ = lattice_values(self.u_ob, lat)
            src = self.u_ob.domain
            if src.T != domain.T:
                src = StripDomain(src.kind, domain.T, src.h, src.n_t, src.trunc)
            shaped = pos.reshape(src.lat[lat].shape + (-1,))
            out, _ = rehome(shaped, src.lat[lat], domain.lat[lat], src, domain)
            self._ob_cache[key] = out.reshape(-1, shaped.shape[-1])
        return self._ob_cache[key]

    def basis_sections(self, domain):
        n = self.u_ob.n
        secs = []
        rx, ry = self.raw_fields(domain, "rx"), self.raw_fields(domain, "ry")
        for a in range(self.dim):
            secs.append(
                ResidualSection(
                    domain,
                    rx[a][:, :n].reshape(domain.lat["rx"].shape + (n,)),
                    ry[a][:, n:].reshape(domain.lat["ry"].shape + (n,)),
                )
            )
        return secs


class TransportedBasis:
    """Raw transported basis, its Cholesky factor and the orthonormal basis."""

    def __init__(self, space, domain, raw, ortho, chol, support, target_pos):
        self.space = space
        self.domain = domain
        self.raw = raw
        self.ortho = ortho
        self.chol = chol
        self.support = support
        self.target_pos = target_pos

    @property
    def dim(self):
        return len(self.ortho)


def _transport_raw(space, domain, pos_by_lat, g):
    n = space.u_ob.n
    raw = {lat: np.zeros((space.dim,) + (domain.lat[lat].size, n)) for lat in ("rx", "ry")}
    support = {}
    for lat in ("rx", "ry"):
        fields = space.raw_fields(domain, lat)
        sup = np.any(fields != 0.0, axis=(0, 2))
        support[lat] = sup
        if not np.any(sup):
            continue
        ob = space.ob_positions(domain, lat)[sup]
        tgt = pos_by_lat[lat][sup]
        if g.is_constant:
            mats = np.broadcast_to(np.eye(2 * n), (sup.sum(), 2 * n, 2 * n))
            if np.any(np.sqrt(np.sum((tgt - ob) ** 2, axis=-1)) > g.iota_prime):
                raise TransportTooFar("target map is too far from the obstruction reference map")
        else:
            mats = pal_j(ob, tgt, g)
        sl = slice(0, n) if lat == "rx" else slice(n, 2 * n)
        for a in range(space.dim):
            raw[lat][a][sup] = np.einsum("mab,mb->ma", mats, fields[a][sup])[:, sl]
    return raw, support


def _sections_from(domain, arrs, n):
    return [
        ResidualSection(
            domain,
            arrs["rx"][a].reshape(domain.lat["rx"].shape + (n,)),
            arrs["ry"][a].reshape(domain.lat["ry"].shape + (n,)),
        )
        for a in range(len(arrs["rx"]))
    ]


def _gram(secs_a, secs_b):
    return np.array([[residual_inner(a, b) for b in secs_b] for a in secs_a])


def _orthonormalize(raw):
    """Gram-Schmidt via the Cholesky factor of the Gram matrix: Q = E L^{-T}."""
    d = len(raw)
    if d == 0:
        return [], np.zeros((0, 0))
    gm = _gram(raw, raw)
    chol = np.linalg.cholesky(gm)
    if np.min(np.abs(np.diag(chol))) ** 2 < 1e-10 * max(np.max(np.diag(gm)), 1e-300):
        raise TransversalityFailure("obstruction basis is numerically dependent")
    inv_t = np.linalg.inv(chol).T
    ortho = []
    for a in range(d):
        sec = raw[0].scaled(0.0)
        for b in range(d):
            if inv_t[b, a] != 0.0:
                sec = sec.combine(raw[b], 1.0, inv_t[b, a])
        ortho.append(sec)
    return ortho, chol


def transport_basis(space, u_target, g):
    """Transport the obstruction basis along u_target and orthonormalize."""
    domain = u_target.domain
    pos = {lat: lattice_values(u_target, lat)[0] for lat in ("rx", "ry")}
    raw_arr, support = _transport_raw(space, domain, pos, g)
    raw = _sections_from(domain, raw_arr, u_target.n)
    ortho, chol = _orthonormalize(raw)
    return TransportedBasis(space, domain, raw, ortho, chol, support, pos)


def project_E(tb, r):
    """(projection, complement, coefficients) of r with respect to the orthonormal basis."""
    coef = np.array([residual_inner(r, e) for e in tb.ortho])
    proj = r.scaled(0.0)
    for c, e in zip(coef, tb.ortho):
        proj = proj.combine(e, 1.0, c)
    return proj, r.combine(proj, 1.0, -1.0), coef


def basis_difference(tb, U, g):
    """New transported basis along u + U and the exact differences old - new.

    Every step is written as a difference identity so that exponentially small
    displacements U produce correctly scaled basis changes.
    """
    space, domain = tb.space, tb.domain
    n = U.n
    d = tb.dim
    dpos = {lat: lattice_tangent_values(U, lat) for lat in ("rx", "ry")}
    draw_arr = {lat: np.zeros((d, domain.lat[lat].size, n)) for lat in ("rx", "ry")}
    if not g.is_constant:
        for lat in ("rx", "ry"):
            sup = tb.support[lat]
            if not np.any(sup):
                continue
            fields = space.raw_fields(domain, lat)
            ob = space.ob_positions(domain, lat)[sup]
            tgt = tb.target_pos[lat][sup]
            dmat = -0.5 * np.einsum("mab,mbc->mac", g.delta_J(tgt, dpos[lat][sup]), g.J(ob))
            sl = slice(0, n) if lat == "rx" else slice(n, 2 * n)
            for a in range(d):
                draw_arr[lat][a][sup] = np.einsum("mab,mb->ma", dmat, fields[a][sup])[:, sl]
    draw = _sections_from(domain, draw_arr, n)
    raw_new = [r.combine(dr) for r, dr in zip(tb.raw, draw)]
    ge_d = _gram(draw, tb.raw)
    dgram = ge_d + ge_d.T + _gram(draw, draw)
    chol = tb.chol
    dchol = np.zeros_like(chol)
    for j in range(d):
        s = dgram[j, j] - sum(2.0 * chol[j, k] * dchol[j, k] + dchol[j, k] ** 2 for k in range(j))
        dchol[j, j] = s / (chol[j, j] + np.sqrt(chol[j, j] ** 2 + s))
        new_jj = chol[j, j] + dchol[j, j]
        for i in range(j + 1, d):
            da = dgram[i, j] - sum(dchol[i, k] * (chol[j, k] + dchol[j, k]) + chol[i, k] * dchol[j, k] for k in range(j))
            dchol[i, j] = da / new_jj - chol[i, j] * dchol[j, j] / new_jj
    chol_new = chol + dchol
    inv_new_t = np.linalg.inv(chol_new).T
    # delta Q = (delta E - Q delta L^T) L_new^{-T}
    diffs = []
    for a in range(d):
        acc = draw[0].scaled(0.0)
        for b in range(d):
            if inv_new_t[b, a] == 0.0:
                continue
            col = draw[b]
            for c in range(d):
                if dchol[b, c] != 0.0:
                    col = col.combine(tb.ortho[c], 1.0, -dchol[b, c])
            acc = acc.combine(col, 1.0, inv_new_t[b, a])
        diffs.append(acc)
    ortho_new = [q.combine(dq) for q, dq in zip(tb.ortho, diffs)]
    pos_new = {lat: tb.target_pos[lat] + dpos[lat] for lat in ("rx", "ry")}
    new_tb = TransportedBasis(space, domain, raw_new, ortho_new, chol_new, tb.support, pos_new)
    old_minus_new = [dq.scaled(-1.0) for dq in diffs]
    return new_tb, old_minus_new


def _projection_from_positions(space, domain, pos_by_lat, A, g):
    raw_arr, _ = _transport_raw(space, domain, pos_by_lat, g)
    raw = _sections_from(domain, raw_arr, A.n)
    ortho, _ = _orthonormalize(raw)
    tb = TransportedBasis(space, domain, raw, ortho, None, None, None)
    return project_E(tb, A)[0]


def d_projection(space, u, A, V, g):
    """Central difference in s of Pi_{E(u + sV)}(A) at s = 0."""
    hs = 1e-4 / (1.0 + max(np.max(np.abs(V.sx)), np.max(np.abs(V.sy)) if V.sy.size else 0.0))
    if g.is_constant:
        return A.scaled(0.0)
    plus = _projection_from_positions(space, u.domain, _shifted_positions(u, V, hs), A, g)
    minus = _projection_from_positions(space, u.domain, _shifted_positions(u, V, -hs), A, g)
    return plus.combine(minus, 1.0 / (2 * hs), -1.0 / (2 * hs))


def _shifted_positions(u, V, s):
    out = {}
    for lat in ("rx", "ry"):
        pos, _ = lattice_values(u, lat)
        out[lat] = pos + s * lattice_tangent_values(V, lat)
    return out


def d_projection_matrix(space, u, A, g):
    """Sparse matrix of V -> d_projection(space, u, A, V) assembled column by column.

    Only state entries that move the map on the basis support contribute.
    """
    n = u.n
    ops = get_ops(u.domain, n)
    if g.is_constant or space.dim == 0:
        return sp.csr_matrix((ops.nres, ops.nz))
    base = {lat: lattice_values(u, lat)[0] for lat in ("rx", "ry")}
    cols = set()
    for lat in ("rx", "ry"):
        sup = space.support(u.domain, lat)
        u_ops, _, _ = lattice_ops(u.domain, n, lat)
        for op in u_ops:
            sub = op[np.flatnonzero(sup)]
            cols.update(np.unique(sub.indices).tolist())
    cols = sorted(cols)
    hs = 1e-4 / 2.0
    r_idx, c_idx, vals = [], [], []
    for col in cols:
        shifted = {}
        for sgn in (1.0, -1.0):
            pos = {}
            for lat in ("rx", "ry"):
                u_ops, _, _ = lattice_ops(u.domain, n, lat)
                delta = np.stack([op[:, col].toarray().ravel() for op in u_ops], axis=-1)
                pos[lat] = base[lat] + sgn * hs * delta
            shifted[sgn] = _projection_from_positions(space, u.domain, pos, A, g)
        diff = shifted[1.0].combine(shifted[-1.0], 1.0 / (2 * hs), -1.0 / (2 * hs)).to_vec()
        nz = np.flatnonzero(diff)
        r_idx.append(nz)
        c_idx.append(np.full(nz.size, col))
        vals.append(diff[nz])
    if not cols:
        return sp.csr_matrix((ops.nres, ops.nz))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))), shape=(ops.nres, ops.nz)
    )


def approx_linearization(u_hat, cumulative_e, space, g):
    """D^app(V) = D dbar(V) - D_u Pi_E(cumulative_e)[V]."""
    lin = linearize_dbar(u_hat, g)
    if cumulative_e is None or g.is_constant or space is None or space.dim == 0:
        return lin
    return lin.minus(d_projection_matrix(space, u_hat, cumulative_e, g))


# ---------------------------------------------------------------- transversality


@dataclass
class TransversalityReport:
    mapping_rank_deficit: list
    mapping_sigma_min: list
    evaluation_sigma: np.ndarray
    floor: float

    @property
    def mapping_ok(self):
        return all(d == 0 for d in self.mapping_rank_deficit)

    @property
    def evaluation_ok(self):
        return self.evaluation_sigma.size > 0 and bool(np.min(self.evaluation_sigma) > self.floor)

    @property
    def passed(self):
        return self.mapping_ok and self.evaluation_ok


def surjectivity(matrix, e_columns, floor=1e-8, dense_limit=1500):
    """(rank deficit, smallest singular value) of [matrix | e_columns] as a row-rank test."""
    full = sp.hstack([matrix] + ([sp.csc_matrix(np.column_stack(e_columns))] if e_columns else [])).tocsr()
    rows, cols = full.shape
    if rows <= dense_limit:
        s = np.linalg.svd(full.toarray(), compute_uv=False)
        smax = s[0] if s.size else 1.0
        rank = int(np.sum(s > floor * smax))
        sig = s[rows - 1] / smax if s.size >= rows else 0.0
        return rows - rank, float(sig)
    # large systems: a nonsingular square column subset certifies full row rank
    sq = matrix[:, :rows].tocsc() if matrix.shape[1] >= rows else None
    if sq is None:
        return rows - matrix.shape[1], 0.0
    try:
        lu = spla.splu(sq)
    except RuntimeError:
        return 1, 0.0
    inv = spla.LinearOperator(sq.shape, matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"))
    est = spla.onenormest(inv)
    nrm = spla.onenormest(sq)
    return 0, float(1.0 / (est * nrm))


def kernel_responses(lin, e_sections):
    """Kernel of [D | -E] for a piece: one element per v-direction and per basis vector.

    Returns a list of (TangentSection, coefficient vector) with D s = sum c_a e_a.
    """
    dom, n = lin.domain, lin.n
    A = lin.reduced()
    nfree = A.shape[1] - n
    sq = A[:, :nfree].tocsc()
    lu = spla.splu(sq)
    out = []
    for l in range(n):
        rhs = -np.asarray(A[:, nfree + l].todense()).ravel()
        zeta = np.concatenate([lu.solve(rhs), np.eye(n)[l]])
        out.append((free_to_tangent(dom, zeta, n), np.zeros(len(e_sections))))
    for a, e in enumerate(e_sections):
        zeta = np.concatenate([lu.solve(e.to_vec()), np.zeros(n)])
        out.append((free_to_tangent(dom, zeta, n), np.eye(len(e_sections))[a]))
    return out


def verify_transversality(u1, u2, E1, E2, g, floor=1e-8, dense_limit=1500):
    """Mapping transversality of each piece and evaluation transversality at infinity."""
    deficits, sigmas, evs = [], [], []
    for u, E in ((u1, E1), (u2, E2)):
        lin = linearize_dbar(u, g)
        tb = transport_basis(E, u, g) if E is not None and E.dim else None
        e_secs = tb.ortho if tb is not None else []
        deficit, sig = surjectivity(lin.reduced(), [e.to_vec() for e in e_secs], floor, dense_limit)
        deficits.append(deficit)
        sigmas.append(sig)
        if deficit == 0:
            resp = kernel_responses(lin, e_secs)
            evs.append(np.column_stack([ts.v for ts, _ in resp]))
        else:
            evs.append(np.zeros((u.n, 0)))
    dev = np.hstack([evs[0], -evs[1]])
    sv = np.linalg.svd(dev, compute_uv=False) if dev.size else np.zeros(0)
    if sv.size < u1.n:
        sv = np.concatenate([sv, np.zeros(u1.n - sv.size)])
    return TransversalityReport(deficits, sigmas, sv, floor)


def check_map_boundary(u):
    """Maps are stored with y off the boundary rows, so only finiteness is checked."""
    return bool(np.all(np.isfinite(u.x)) and np.all(np.isfinite(u.y)))


__all__ = [
    "dbar",
    "dbar_increment",
    "energy",
    "linearize_dbar",
    "LinearOperator",
    "BumpSpec",
    "ObstructionSpace",
    "TransportedBasis",
    "transport_basis",
    "project_E",
    "basis_difference",
    "d_projection",
    "d_projection_matrix",
    "approx_linearization",
    "verify_transversality",
    "kernel_responses",
    "MapSection",
]
