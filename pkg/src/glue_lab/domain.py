"""Discretized strip domains, cutoff functions and weight functions.

Each domain carries four staggered lattices:

* ``x``  nodes (tau_j, t_k): first n components of a map or tangent field,
* ``y``  cell centres (tau_{j+1/2}, t_{k+1/2}): last n components,
* ``rx`` points (tau_{j+1/2}, t_k): first n components of a residual,
* ``ry`` points (tau_j, t_{k+1/2}): last n components of a residual.

The y-block vanishes on L, so it is never sampled on the boundary rows
t in {0, 1}; closed ends carry the same reflection.  Tau positions are kept as
integers in units of h/2 so that re-homing between the glued strip and the
pieces is exact index arithmetic.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatch

PIECE1, PIECE2, GLUED = "piece1", "piece2", "glued"
COLLAR_CENTER = 0.5
COLLAR_HALFWIDTH = 0.125
ABS_SMOOTHING = 0.25


def _aligned(value, h, what):
    q = value / h
    k = int(round(q))
    if abs(q - k) > 1e-9:
        raise GridMismatch(f"{what}={value} is not a multiple of h_tau={h}")
    return k


@dataclass(frozen=True)
class Lattice:
    """Tensor lattice: tau positions (integer half-steps) times t positions."""

    name: str
    half_index: np.ndarray
    t: np.ndarray
    h: float

    @property
    def tau(self):
        return 0.5 * self.h * self.half_index

    @property
    def shape(self):
        return (len(self.half_index), len(self.t))

    @property
    def size(self):
        return len(self.half_index) * len(self.t)

    def tau_grid(self):
        return np.repeat(self.tau[:, None], len(self.t), axis=1)


@dataclass(frozen=True)
class DomainConfig:
    h_tau: float = 0.25
    n_t: int = 16
    trunc: float = None
    trunc_factor: float = 10.0

    def __post_init__(self):
        if self.h_tau <= 0 or self.n_t < 2 or self.n_t % 2:
            raise GridMismatch("need h_tau > 0 and an even n_t >= 2")

    @property
    def h_t(self):
        return 1.0 / self.n_t

    def trunc_for(self, T):
        if self.trunc is not None:
            return float(self.trunc)
        raw = max(self.trunc_factor * T, 9.0 * T + 1.0)
        return float(np.ceil(raw / self.h_tau - 1e-9) * self.h_tau)


class StripDomain:
    """One of the pieces (in tau' or tau'' coordinates) or the glued strip (in tau)."""

    def __init__(self, kind, T, h_tau, n_t, trunc=None):
        if kind not in (PIECE1, PIECE2, GLUED):
            raise ValueError(f"unknown domain kind {kind}")
        self.kind = kind
        self.T = float(T)
        self.h = float(h_tau)
        self.n_t = int(n_t)
        self.h_t = 1.0 / self.n_t
        self.iT = _aligned(self.T, self.h, "T")
        if kind == GLUED:
            self.trunc = None
            self.i0 = -5 * self.iT - _aligned(1.0, self.h, "1")
            self.N = 2 * (5 * self.iT + _aligned(1.0, self.h, "1"))
        else:
            if trunc is None:
                raise GridMismatch("piece domains need a truncation length")
            itr = _aligned(trunc, self.h, "trunc")
            if trunc < 9.0 * self.T + 1.0 - 1e-12:
                raise GridMismatch(f"trunc={trunc} is below 9T+1={9 * self.T + 1}")
            self.trunc = float(trunc)
            one = _aligned(1.0, self.h, "1")
            self.N = itr + one
            self.i0 = -one if kind == PIECE1 else -itr
        self._build_lattices()

    def _build_lattices(self):
        N, h = self.N, self.h
        nodes = 2 * (self.i0 + np.arange(N + 1))
        halves = 2 * (self.i0 + np.arange(N)) + 1
        t_nodes = np.arange(self.n_t + 1) * self.h_t
        t_half = (np.arange(self.n_t) + 0.5) * self.h_t
        if self.kind == GLUED:
            ry_idx = nodes
        elif self.kind == PIECE1:
            ry_idx = nodes[:-1]
        else:
            ry_idx = nodes[1:]
        self.lat = {
            "x": Lattice("x", nodes, t_nodes, h),
            "y": Lattice("y", halves, t_half, h),
            "rx": Lattice("rx", halves, t_nodes, h),
            "ry": Lattice("ry", ry_idx, t_half, h),
        }

    def __repr__(self):
        return f"StripDomain({self.kind}, T={self.T}, h={self.h}, n_t={self.n_t}, trunc={self.trunc})"

    @property
    def key(self):
        return (self.kind, self.iT if self.kind == GLUED else None, self.h, self.n_t, self.trunc)

    @property
    def is_piece(self):
        return self.kind != GLUED

    @property
    def piece_index(self):
        return {PIECE1: 1, PIECE2: 2}.get(self.kind)

    @property
    def tau_min(self):
        return self.i0 * self.h

    @property
    def tau_max(self):
        return (self.i0 + self.N) * self.h

    @property
    def shift_to_glued(self):
        """Offset in half-steps: glued half-index = local half-index + shift."""
        if self.kind == GLUED:
            return 0
        return -10 * self.iT if self.kind == PIECE1 else 10 * self.iT

    def glued_tau(self, tau_local):
        if self.kind == PIECE1:
            return tau_local - 5.0 * self.T
        if self.kind == PIECE2:
            return tau_local + 5.0 * self.T
        return tau_local

    @cached_property
    def truncation_column(self):
        """Index of the x-node column where the asymptotic value is imposed."""
        if self.kind == PIECE1:
            return self.N
        if self.kind == PIECE2:
            return 0
        return None

    @cached_property
    def center_node(self):
        """Index (j, k) of the x-node at tau = 0, t = 1/2 of the glued strip."""
        return (-self.i0, self.n_t // 2)

    def in_K(self, tau_local, i=None):
        """Mask of positions inside the compact pieces K_1 / K_2."""
        tau = np.asarray(tau_local, dtype=float)
        if self.kind == PIECE1:
            return tau <= 0.0
        if self.kind == PIECE2:
            return tau >= 0.0
        lo = tau <= -5.0 * self.T
        hi = tau >= 5.0 * self.T
        if i == 1:
            return lo
        if i == 2:
            return hi
        return lo | hi

    def region_mask(self, name, tau):
        """Glued-coordinate region masks: A, B, X, neck."""
        tau = self.glued_tau(np.asarray(tau, dtype=float))
        T = self.T
        if name == "A":
            return (tau >= -T - 1) & (tau <= -T + 1)
        if name == "B":
            return (tau >= T - 1) & (tau <= T + 1)
        if name == "X":
            return (tau >= -1) & (tau <= 1)
        if name == "neck":
            return (tau >= -5 * T) & (tau <= 5 * T)
        raise ValueError(f"unknown region {name}")

    def weight_on(self, lattice, delta):
        """Weight function e_{1,delta}, e_{2,delta} or e_{T,delta} on a lattice, shape (ntau,)."""
        tau = self.lat[lattice].tau
        if self.kind == GLUED:
            return weight("eT", tau, self.T, delta)
        return piece_weight(self.piece_index, tau, delta)

    def compatible(self, other):
        return self.key == other.key


def build_piece(i, T, cfg):
    """Piece domain i in its own coordinate (tau' for i=1, tau'' for i=2)."""
    kind = {1: PIECE1, 2: PIECE2}.get(i)
    if kind is None:
        raise ValueError("piece index must be 1 or 2")
    return StripDomain(kind, T, cfg.h_tau, cfg.n_t, cfg.trunc_for(T))


def build_glued(T, cfg):
    return StripDomain(GLUED, T, cfg.h_tau, cfg.n_t)


def rehome(values, src, dst, src_domain, dst_domain, fill=0.0):
    """Copy lattice values from one domain to another where positions coincide.

    ``values`` has shape src.shape + (n,).  Returns (out, mask) on dst.
    """
    shift = dst_domain.shift_to_glued - src_domain.shift_to_glued
    want = dst.half_index + shift
    pos = (want - src.half_index[0]) // 2
    ok = (want - src.half_index[0]) % 2 == 0
    ok &= (pos >= 0) & (pos < len(src.half_index))
    out = np.full(dst.shape + values.shape[2:], fill, dtype=float)
    out[ok] = values[pos[ok]]
    return out, ok


# ---------------------------------------------------------------- cutoffs


def _edge(x):
    x = np.asarray(x, dtype=float)
    pos = x > 0
    return np.where(pos, np.exp(-1.0 / np.where(pos, x, 1.0)), 0.0)


def smooth_pair(s):
    """(1 - beta(s), beta(s)) for the C-infinity step rising on [-1, 1].

    The smaller member of the pair is computed directly so both tails keep
    relative precision; the larger one is its complement, which makes the
    pair sum to exactly 1 in floating point.
    """
    s = np.asarray(s, dtype=float)
    a = _edge(1.0 + s)
    b = _edge(1.0 - s)
    den = a + b
    rise_small = a / den
    fall_small = b / den
    left = s < 0
    hi = np.where(left, rise_small, 1.0 - fall_small)
    lo = np.where(left, 1.0 - rise_small, fall_small)
    return lo, hi


CUTOFF_CENTERS = {"A": -1.0, "B": 1.0, "X": 0.0}


def chi(kind, tau, T=0.0):
    """Cutoff functions chi_A, chi_B, chi_X (left/right) and the monotone step."""
    tau = np.asarray(tau, dtype=float)
    if kind == "bump6_16":
        return smooth_pair(tau)[1]
    try:
        region, side = kind.split("_")
        center = CUTOFF_CENTERS[region] * T
    except (ValueError, KeyError):
        raise ValueError(f"unknown cutoff {kind}") from None
    lo, hi = smooth_pair(tau - center)
    if side == "left":
        return lo
    if side == "right":
        return hi
    raise ValueError(f"unknown cutoff {kind}")


def cutoff_pair(region, tau, T):
    lo, hi = smooth_pair(np.asarray(tau, dtype=float) - CUTOFF_CENTERS[region] * T)
    return lo, hi


# ---------------------------------------------------------------- weights


def _collar(d):
    return smooth_pair((np.asarray(d, dtype=float) - COLLAR_CENTER) / COLLAR_HALFWIDTH)[1]


def _smooth_abs(tau):
    a = np.abs(tau)
    s = _collar(a)
    return np.where(s >= 1.0, a, a + (1.0 - s) * (np.sqrt(tau * tau + ABS_SMOOTHING**2) - a))


def _profile(d, delta):
    d = np.asarray(d, dtype=float)
    e = np.exp(delta * d)
    s = _collar(d)
    w = np.where(s >= 1.0, e, 1.0 + s * (e - 1.0))
    return np.where(d < 1.0, np.minimum(w, 10.0), w)


def weight(kind, tau, T, delta):
    """Weight functions e1, e2, eT in glued coordinates."""
    tau = np.asarray(tau, dtype=float)
    if kind == "e1":
        return _profile(tau + 5.0 * T, delta)
    if kind == "e2":
        return _profile(5.0 * T - tau, delta)
    if kind == "eT":
        return _profile(5.0 * T - _smooth_abs(tau), delta)
    raise ValueError(f"unknown weight {kind}")


def piece_weight(i, tau_local, delta):
    """e_{i,delta} as a function of the piece coordinate (T-independent)."""
    tau_local = np.asarray(tau_local, dtype=float)
    return _profile(tau_local if i == 1 else -tau_local, delta)
