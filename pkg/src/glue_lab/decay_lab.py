"""Parameter sweeps, finite differences in T, rho and s = 1/T, exponential
fits and decay reports."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gluing as gl
from .domain import DomainConfig
from .errors import DegenerateFit, GlueLabError, GridMismatch, InsufficientPoints
from .sobolev import NormSpec, lattice_norm

FIT_FLOOR = 100.0 * np.finfo(float).tiny


# ---------------------------------------------------------------- plans


@dataclass
class SweepPlan:
    T_list: tuple
    fixture: str = "m0"
    rho_points: tuple = (None,)
    S: float = 2.0
    ells: tuple = (0, 1, 2)
    rho_orders: tuple = (0, 1)
    dT: float = None
    drho: float = 1e-3
    h_tau: float = 0.25
    n_t: int = 16
    trunc: float = None
    kappa_max: int = 8
    tol_stop: float = 0.0

    def __post_init__(self):
        self.T_list = tuple(float(t) for t in self.T_list)
        if not self.T_list:
            raise InsufficientPoints("empty T list")
        if list(self.T_list) != sorted(self.T_list):
            raise GridMismatch("T list must be ascending")
        for T in self.T_list + (self.S,):
            if abs(T / self.h_tau - round(T / self.h_tau)) > 1e-9:
                raise GridMismatch(f"{T} is not a multiple of h_tau={self.h_tau}")
        if self.dT is None:
            self.dT = 2.0 * self.h_tau
        if self.dT < self.h_tau - 1e-12 or abs(self.dT / self.h_tau - round(self.dT / self.h_tau)) > 1e-9:
            raise GridMismatch("dT must be a positive multiple of h_tau")
        if self.trunc is None:
            raw = 10.0 * max(self.T_list) + 1.0
            self.trunc = float(np.ceil(raw / self.h_tau - 1e-9) * self.h_tau)

    @property
    def fits_possible(self):
        return len(self.T_list) >= 4

    def domain_config(self):
        return DomainConfig(h_tau=self.h_tau, n_t=self.n_t, trunc=self.trunc)


# ---------------------------------------------------------------- sweep


@dataclass
class SweepPoint:
    T: float
    rho_index: int
    history: list = None
    initial_norm: float = None
    glures: dict = None
    kuranishi: np.ndarray = None
    kuranishi_increment: np.ndarray = None
    final_residual: float = None
    error: str = None


@dataclass
class SweepResult:
    plan: SweepPlan
    points: list
    fixture: object = None

    def select(self, rho_index=0):
        return [p for p in self.points if p.rho_index == rho_index and p.error is None]

    @property
    def failures(self):
        return [p for p in self.points if p.error is not None]


def resolve_threads(threads=None):
    if threads is None:
        threads = int(os.environ.get("GLUE_LAB_THREADS", "1") or 1)
    return max(1, int(threads))


def _run_point(fx, plan, spec, T, k, rho):
    pt = SweepPoint(T, k)
    try:
        sol = gl.glue(fx, rho, T, spec, plan.tol_stop, plan.kappa_max)
        pt.history = sol.history
        pt.initial_norm = sol.state.initial["residual_norm"]
        pt.glures = {i: gl.glures(i, plan.S, sol) for i in (1, 2)}
        pt.kuranishi = sol.kuranishi
        pt.kuranishi_increment = sol.kuranishi_increment
        pt.final_residual = sol.state.final_residual
    except (GlueLabError, np.linalg.LinAlgError, ValueError) as exc:
        pt.error = f"{type(exc).__name__}: {exc}"
    return pt


def sweep(plan, spec=NormSpec(), fixture=None, threads=None):
    """Glue every (rho, T) of the plan; failures are recorded per point."""
    fx = fixture or gl.make_fixture(plan.fixture, plan.domain_config())
    jobs = [(T, k, rho) for k, rho in enumerate(plan.rho_points) for T in plan.T_list]
    nthreads = resolve_threads(threads)
    if nthreads == 1:
        points = [_run_point(fx, plan, spec, *job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            points = list(pool.map(lambda job: _run_point(fx, plan, spec, *job), jobs))
    return SweepResult(plan, points, fx)


# ---------------------------------------------------------------- derivatives


def _snapshot_fields(snap, part):
    if part == "corr":
        return snap.corr
    if part == "values":
        return snap.values()
    raise ValueError(part)


def _field_norm(fields, lattices, order):
    return lattice_norm([fields["x"], fields["y"]], [lattices["x"], lattices["y"]], order)


def _check_lattices(snaps):
    ref = snaps[0].lattices
    for s in snaps[1:]:
        for lat in ("x", "y"):
            if not np.array_equal(s.lattices[lat].half_index, ref[lat].half_index):
                raise GridMismatch("snapshots do not share the collar lattice")


def t_derivative(snapshots, ell, dT, m=3):
    """Norms of the ell-th central T-difference of Glures in L^2_{m+1-ell}.

    ``snapshots`` must be ordered by T.  Returns a list of (T, norm).
    """
    snaps = sorted(snapshots, key=lambda s: s.T)
    if not snaps:
        raise InsufficientPoints("no snapshots")
    _check_lattices(snaps)
    lats = snaps[0].lattices
    order = m + 1 - ell
    by_T = {round(s.T / dT * 4) / 4: s for s in snaps}
    out = []
    if ell == 0:
        return [(s.T, _field_norm(s.values(), lats, order)) for s in snaps]
    for s in snaps:
        key = round(s.T / dT * 4) / 4
        lo, hi = by_T.get(key - 1), by_T.get(key + 1)
        if lo is None or hi is None:
            continue
        if ell == 1:
            f = {k: (hi.corr[k] - lo.corr[k]) / (2.0 * dT) for k in ("x", "y")}
        elif ell == 2:
            f = {k: ((hi.corr[k] - s.corr[k]) - (s.corr[k] - lo.corr[k])) / dT**2 for k in ("x", "y")}
        else:
            raise ValueError("ell must be 0, 1 or 2")
        out.append((s.T, _field_norm(f, lats, order)))
    if not out:
        raise InsufficientPoints("need neighbouring T values for a central difference")
    return out


def rho_derivative(snapshots, n, drho, m=3):
    """Norm of the n-th central rho-difference from (minus, centre, plus) snapshots."""
    if n == 0:
        s = snapshots[len(snapshots) // 2]
        return _field_norm(s.values(), s.lattices, m + 1)
    if len(snapshots) != 3:
        raise InsufficientPoints("need (minus, centre, plus) snapshots")
    lo, _, hi = snapshots
    _check_lattices(snapshots)
    nn = lo.origin.size // 2
    f = {}
    for k in ("x", "y"):
        d = (hi.base[k] - lo.base[k]) + (hi.corr[k] - lo.corr[k])
        if k == "x":
            d = d + (hi.origin[:nn] - lo.origin[:nn])
        f[k] = d / (2.0 * drho)
    return _field_norm(f, lo.lattices, m + 1 - n)


def mixed_derivative(minus, plus, drho, dT, m=3):
    """Norms of d^2 Glures / (d rho d T) from two T-ordered snapshot lists at rho -/+ drho."""
    diff = []
    for a, b in zip(sorted(minus, key=lambda s: s.T), sorted(plus, key=lambda s: s.T)):
        corr = {k: (b.corr[k] - a.corr[k]) / (2.0 * drho) for k in ("x", "y")}
        diff.append(gl.GluresSnapshot(a.i, a.S, a.T, a.origin, a.lattices, a.base, corr))
    return t_derivative(diff, 1, dT, m - 1)


@dataclass
class SDerivative:
    s: np.ndarray
    values: np.ndarray
    vanishing: bool


def _s_values(T_values, vectors):
    T = np.asarray(T_values, dtype=float)
    s = 1.0 / T
    order = np.argsort(s)
    s = s[order]
    vec = [vectors[i] for i in order]
    if len(s) < 2:
        raise InsufficientPoints("need at least two s values")
    mids, vals = [], []
    for j in range(len(s) - 1):
        ds = s[j + 1] - s[j]
        mids.append(0.5 * (s[j] + s[j + 1]))
        vals.append(vec[j + 1] / ds - vec[j] / ds)
    return np.array(mids), vals


def s_derivative(snapshots, ell=1, m=3):
    """One-sided differences in s = 1/T of Glures, as norms ordered by increasing s."""
    if ell != 1:
        raise ValueError("only first s-derivatives are supported")
    snaps = sorted(snapshots, key=lambda s: s.T)
    _check_lattices(snaps)
    lats = snaps[0].lattices
    vecs = [{k: sn.corr[k] for k in ("x", "y")} for sn in snaps]
    T = [sn.T for sn in snaps]
    s = 1.0 / np.asarray(T)
    order = np.argsort(s)
    mids, vals = [], []
    for a, b in zip(order[:-1], order[1:]):
        ds = s[b] - s[a]
        mids.append(0.5 * (s[a] + s[b]))
        f = {k: (vecs[b][k] - vecs[a][k]) / ds for k in ("x", "y")}
        vals.append(_field_norm(f, lats, m))
    return _finish_s(np.array(mids), np.array(vals))


def s_derivative_vector(T_values, vectors):
    """One-sided differences in s of vector-valued data (e.g. Kuranishi coefficients)."""
    mids, vals = _s_values(T_values, [np.asarray(v, dtype=float) for v in vectors])
    return _finish_s(mids, np.array([float(np.linalg.norm(v)) for v in vals]))


def _finish_s(mids, vals):
    # the margin keeps rounding noise on constant data from counting as a decrease
    vanishing = len(vals) >= 2 and bool(vals[1] > (1.0 + 1e-6) * vals[0] > 0.0)
    return SDerivative(mids, vals, vanishing)


def envelope_excess(s, values, delta_hat, ell=1):
    """q(s) = log|d/ds| + delta/s - 2 ell log(1/s); bounded above as s -> 0 under the envelope."""
    s = np.asarray(s, dtype=float)
    v = np.asarray(values, dtype=float)
    return np.log(v) + delta_hat / s - 2.0 * ell * np.log(1.0 / s)


def envelope_ok(s, values, delta_hat, ell=1, count=3, slack=np.log(10.0)):
    """The envelope quantity at the smallest s values does not exceed its value at the largest of them."""
    s = np.asarray(s, dtype=float)
    order = np.argsort(s)[:count]
    q = envelope_excess(s[order], np.asarray(values)[order], delta_hat, ell)
    return bool(np.max(q) <= q[-1] + slack), q


# ---------------------------------------------------------------- fits


@dataclass
class FitResult:
    C: float
    delta: float
    r2: float
    n: int
    flagged: bool

    def as_dict(self):
        return asdict(self)


def fit_exponential(points, floor=FIT_FLOOR):
    """Least squares fit of log v = log C - delta * T over entries above the floor."""
    pts = [(float(t), float(v)) for t, v in points]
    if len(pts) < 3:
        raise InsufficientPoints("need at least 3 points")
    pts = [(t, v) for t, v in pts if v > floor and np.isfinite(v)]
    if len(pts) < 3:
        raise DegenerateFit("fewer than 3 values above the fit floor")
    T = np.array([p[0] for p in pts])
    y = np.log(np.array([p[1] for p in pts]))
    A = np.column_stack([np.ones_like(T), -T])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    delta = float(coef[1])
    flagged = ss_tot == 0 or abs(delta) < 1e-12
    if flagged:
        delta = 0.0 if abs(delta) < 1e-12 else delta
    return FitResult(float(np.exp(coef[0])), delta, float(r2), len(pts), bool(flagged))


def contraction_ratios(history, key="err"):
    """Per-step ratios of the split error norms |Err_(k+1)| / |Err_(k)| (sum over both pieces)."""
    vals = [row["err1_norm"] + row["err2_norm"] for row in history]
    return [vals[k + 1] / vals[k] for k in range(len(vals) - 1)]


def geometric_fit(history):
    """Fitted geometric rate mu of the split error norms over kappa."""
    pts = [(row["kappa"], row["err1_norm"] + row["err2_norm"]) for row in history]
    fit = fit_exponential(pts)
    return float(np.exp(-fit.delta)), fit


# ---------------------------------------------------------------- report


@dataclass
class DecayReport:
    plan: dict
    quantities: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    mu: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_json(self):
        def clean(v):
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, (np.floating, float)):
                return float(v)
            if isinstance(v, (np.integer,)):
                return int(v)
            if isinstance(v, np.bool_):
                return bool(v)
            return v

        return clean(asdict(self))


def _try_fit(pairs):
    try:
        return fit_exponential(pairs).as_dict()
    except (InsufficientPoints, DegenerateFit) as exc:
        return {"error": str(exc)}


THRESHOLDS = {"initial_slope": 0.9 * np.pi, "t_slope": -0.5 * np.pi, "mu": 0.5, "mu_slack": 0.1}


def build_report(result, thresholds=None):
    """Collect the sweep quantities in a fixed order, then fit and check them."""
    plan = result.plan
    plan_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(plan).items()}
    plan_dict["rho_points"] = [None if r is None else list(np.asarray(r, dtype=float)) for r in plan.rho_points]
    rep = DecayReport(plan=plan_dict)
    rep.failures = [{"T": p.T, "rho_index": p.rho_index, "error": p.error} for p in result.failures]
    pts = result.select(0)
    if not pts:
        rep.notes.append("no successful points")
        return rep
    rep.quantities["initial_error"] = [(p.T, p.initial_norm) for p in pts]
    snaps = [p.glures[1] for p in pts]
    for ell in plan.ells:
        try:
            rep.quantities[f"glures_dT{ell}"] = t_derivative(snaps, ell, plan.dT)
        except InsufficientPoints as exc:
            rep.notes.append(f"t_derivative ell={ell}: {exc}")
    for p in pts:
        rep.mu[str(p.T)] = contraction_ratios(p.history)
    try:
        sd = s_derivative(snaps)
        rep.quantities["glures_ds"] = list(zip(sd.s.tolist(), sd.values.tolist()))
        kd = s_derivative_vector([p.T for p in pts], [p.kuranishi_increment for p in pts])
        rep.quantities["kuranishi_ds"] = list(zip(kd.s.tolist(), kd.values.tolist()))
    except InsufficientPoints as exc:
        rep.notes.append(f"s_derivative: {exc}")
    if len(plan.rho_points) == 3:
        _rho_quantities(rep, result, plan)
    return fit_report(rep, thresholds, fits_possible=plan.fits_possible)


def _rho_quantities(rep, result, plan):
    by_k = [{p.T: p for p in result.select(k)} for k in range(3)]
    common = sorted(set(by_k[0]) & set(by_k[1]) & set(by_k[2]))
    for n in plan.rho_orders:
        rep.quantities[f"glures_drho{n}"] = [
            (T, rho_derivative([by_k[k][T].glures[1] for k in (1, 0, 2)], n, plan.drho)) for T in common
        ]
    try:
        minus = [by_k[1][T].glures[1] for T in common]
        plus = [by_k[2][T].glures[1] for T in common]
        rep.quantities["glures_drho_dT"] = mixed_derivative(minus, plus, plan.drho, plan.dT)
    except InsufficientPoints as exc:
        rep.notes.append(f"mixed derivative: {exc}")


def fit_report(rep, thresholds=None, fits_possible=True):
    """Fits and threshold checks from the stored quantities of a report."""
    th = dict(THRESHOLDS)
    th.update(thresholds or {})
    q = rep.quantities
    if not fits_possible:
        rep.notes.append("insufficient points for fits")
        return rep
    if "initial_error" in q:
        fit = rep.fits["initial_error"] = _try_fit(q["initial_error"])
        if "delta" in fit:
            rep.checks["initial_error"] = bool(fit["delta"] >= th["initial_slope"] and fit["r2"] >= 0.98)
    for key in sorted(q):
        if key.startswith("glures_dT") and key != "glures_dT0" and len(q[key]) >= 3:
            rep.fits[key] = _try_fit(q[key])
    f1 = rep.fits.get("glures_dT1", {})
    if "delta" in f1:
        rep.checks["t_derivative"] = bool(-f1["delta"] <= th["t_slope"] and f1["r2"] >= 0.95)
    if rep.mu:
        window = [r for ratios in rep.mu.values() for r in ratios[2:7]]
        if window:
            rep.checks["contraction"] = bool(max(window) <= th["mu"] + th["mu_slack"])
    if "glures_ds" in q and "kuranishi_ds" in q:
        gs, gv = (np.array(c, dtype=float) for c in zip(*q["glures_ds"]))
        ks, kv = (np.array(c, dtype=float) for c in zip(*q["kuranishi_ds"]))
        rep.checks["s_vanishing"] = bool(_finish_s(gs, gv).vanishing and _finish_s(ks, kv).vanishing)
        if "delta" in f1:
            ok_g, qg = envelope_ok(gs, gv, f1["delta"])
            ok_k, qk = envelope_ok(ks, kv, f1["delta"])
            rep.quantities["envelope_glures"] = qg.tolist()
            rep.quantities["envelope_kuranishi"] = qk.tolist()
            rep.checks["s_envelope"] = bool(ok_g and ok_k)
    return rep


def report_from_json(data, thresholds=None):
    """Rebuild a report from its JSON form and redo the fits and checks."""
    rep = DecayReport(plan=data.get("plan", {}))
    rep.quantities = {k: [tuple(r) for r in v] for k, v in data.get("quantities", {}).items() if not k.startswith("envelope")}
    rep.mu = dict(data.get("mu", {}))
    rep.failures = list(data.get("failures", []))
    return fit_report(rep, thresholds, fits_possible=len(rep.quantities.get("initial_error", [])) >= 4)
