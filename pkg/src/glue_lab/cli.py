"""Command-line front end: config ingestion, experiment runs and artifacts.

Every run writes into ``<out>/<id>/``: ``config.json`` (the fully resolved
config, which reproduces the run when fed back), CSV tables and
``report.json``.  Exit codes: 0 success, 1 configuration error, 2 numerical
failure.
"""

import copy
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import click
import jsonschema
import numpy as np

from . import cauchy_riemann as cr
from . import decay_lab as dl
from . import gluing as gl
from .domain import DomainConfig, build_piece, chi, smooth_pair
from .errors import ConfigError, GlueLabError
from .geometry import (
    Perturbation,
    TargetGeometry,
    check_totally_real,
    delta_pal_j,
    ep_map,
    exp_map,
    inv_exp,
    j_squared_defect,
    pal,
    pal_j,
)
from .sobolev import MapSection, NormSpec, ResidualSection, TangentSection, w_norm

DELTA_1 = math.pi

_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "glue-lab experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["domain"],
    "properties": {
        "fixture": {"enum": ["m0", "m1"]},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "p0": _vec,
                "iota_prime": _pos,
                "eps1": _pos,
                "m1_amplitude": {"type": "number"},
                "perturbations": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["center", "radius", "amplitude", "generator"],
                        "properties": {
                            "center": _vec,
                            "radius": _pos,
                            "amplitude": {"type": "number"},
                            "generator": {"type": "array", "items": _vec, "minItems": 2},
                        },
                    },
                },
            },
        },
        "domain": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T"],
            "properties": {
                "h": _pos,
                "n_t": {"type": "integer", "minimum": 2},
                "T": {"type": "array", "items": _pos, "minItems": 1},
                "trunc_factor": _pos,
                "trunc": {"oneOf": [_pos, {"type": "null"}]},
            },
        },
        "spaces": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"m": {"type": "integer", "minimum": 0}, "delta": _pos},
        },
        "obstruction": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bumps": {
                    "type": "array",
                    "minItems": 2,
                    "maxItems": 2,
                    "items": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["center", "radius", "direction"],
                            "properties": {
                                "center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                                "radius": _pos,
                                "direction": _vec,
                            },
                        },
                    },
                }
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "minimum": 0},
                "kappa_max": {"type": "integer", "minimum": 1},
                "mu_target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "S": _pos,
                "dT": {"oneOf": [_pos, {"type": "null"}]},
                "drho": _pos,
                "rho": {"type": "array", "items": {"oneOf": [_vec, {"type": "null"}]}, "minItems": 1},
                "kappa_max": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string", "minLength": 1}, "id": {"type": "string", "minLength": 1}},
        },
        "seed": {"type": "integer"},
    },
}

DEFAULTS = {
    "fixture": "m0",
    "geometry": {"n": 1, "p0": [0.0, 0.0], "iota_prime": 1.0, "eps1": 0.3, "m1_amplitude": 0.05, "perturbations": []},
    "domain": {"h": 0.25, "n_t": 16, "T": [3.0], "trunc_factor": 10.0, "trunc": None},
    "spaces": {"m": 3, "delta": math.pi / 10},
    "obstruction": {},
    "solver": {"tol": 1e-10, "kappa_max": 25, "mu_target": 0.5},
    "sweep": {"S": 2.0, "dT": None, "drho": 1e-3, "rho": [None], "kappa_max": 8, "tol": 0.0},
    "output": {"dir": "runs"},
    "seed": 0,
}


# ---------------------------------------------------------------- config


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw):
    """Schema check plus the cross-field invariants; returns the resolved config."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    conf = _merge(DEFAULTS, raw)
    if conf["spaces"]["delta"] > DELTA_1 / 10 + 1e-15:
        raise ConfigError(f"delta={conf['spaces']['delta']} exceeds delta_1/10={DELTA_1 / 10}")
    geo = conf["geometry"]
    dim = 2 * geo["n"]
    if len(geo["p0"]) != dim:
        raise ConfigError(f"p0 must have {dim} components")
    for p in geo["perturbations"]:
        if len(p["center"]) != dim or np.shape(p["generator"]) != (dim, dim):
            raise ConfigError("perturbation center/generator do not match the dimension")
    for bumps in conf["obstruction"].get("bumps", []):
        for b in bumps:
            if len(b["direction"]) != dim:
                raise ConfigError("bump direction does not match the dimension")
    T = conf["domain"]["T"]
    if sorted(T) != T:
        raise ConfigError("the T list must be ascending")
    trunc = conf["domain"]["trunc"]
    if trunc is not None and trunc < 9.0 * max(T) + 1.0 - 1e-12:
        raise ConfigError(f"trunc={trunc} is below 9T+1={9.0 * max(T) + 1.0} for the largest T")
    if conf["fixture"] == "m0" and geo["perturbations"]:
        raise ConfigError("fixture m0 has constant J; perturbations need fixture m1")
    return conf


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return validate_config(raw)


def canonical(conf):
    return json.dumps(conf, sort_keys=True, indent=2) + "\n"


def run_id(command, conf):
    if conf["output"].get("id"):
        return conf["output"]["id"]
    digest = hashlib.sha1(canonical(conf).encode()).hexdigest()[:10]
    return f"{command}-{digest}"


def norm_spec(conf):
    return NormSpec(m=conf["spaces"]["m"], delta=conf["spaces"]["delta"])


def domain_config(conf):
    d = conf["domain"]
    if d["trunc"] is not None:
        return DomainConfig(h_tau=d["h"], n_t=d["n_t"], trunc=d["trunc"])
    probe = DomainConfig(h_tau=d["h"], n_t=d["n_t"], trunc_factor=d["trunc_factor"])
    return DomainConfig(h_tau=d["h"], n_t=d["n_t"], trunc=probe.trunc_for(max(d["T"])))


def geometry_from(conf):
    geo = conf["geometry"]
    perts = tuple(
        Perturbation(p["center"], p["radius"], p["amplitude"], np.asarray(p["generator"], dtype=float))
        for p in geo["perturbations"]
    )
    return TargetGeometry(
        n=geo["n"], perturbations=perts, p0=geo["p0"], iota_prime=geo["iota_prime"], eps1=geo["eps1"]
    )


def bumps_from(conf):
    raw = conf["obstruction"].get("bumps")
    if not raw:
        return None
    return tuple([cr.BumpSpec(tuple(b["center"]), b["radius"], tuple(b["direction"])) for b in piece] for piece in raw)


def fixture_from(conf):
    cfg = domain_config(conf)
    g = geometry_from(conf)
    kw = {"bumps": bumps_from(conf), "geometry": g}
    if conf["fixture"] == "m1":
        kw["eps"] = conf["geometry"]["m1_amplitude"]
    return gl.make_fixture(conf["fixture"], cfg, **kw)


def rho_points(conf):
    return [None if r is None else np.asarray(r, dtype=float) for r in conf["sweep"]["rho"]]


# ---------------------------------------------------------------- artifacts


def fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def norm_rows(T, history):
    return [[T] + [row[c] for c in gl.HISTORY_COLUMNS] for row in history]


NORM_HEADER = ["T"] + list(gl.HISTORY_COLUMNS)
GLURES_HEADER = ["T", "lattice", "tau", "t", "component", "value", "correction"]


def glures_rows(snap):
    vals = snap.values()
    n = snap.origin.size // 2
    rows = []
    for lat in ("x", "y"):
        L = snap.lattices[lat]
        for j, tau in enumerate(L.tau):
            for k, t in enumerate(L.t):
                for c in range(n):
                    rows.append([snap.T, lat, tau, t, f"{lat}{c}", vals[lat][j, k, c], snap.corr[lat][j, k, c]])
    return rows


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


class Run:
    """Output directory of one invocation; writes happen from the calling thread only."""

    def __init__(self, command, conf, out):
        self.conf = conf
        self.dir = Path(out or conf["output"]["dir"]) / run_id(command, conf)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory: {exc}") from None
        (self.dir / "config.json").write_text(canonical(conf))

    def path(self, name):
        return self.dir / name


# ---------------------------------------------------------------- self test


def invariant_suite(tol=1e-10):
    """Exact identities of the flat setting; returns (name, passed, value) triples."""
    out = []
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.5, 1.5, size=(64, 2))
    g0 = TargetGeometry(n=1)
    g1 = TargetGeometry(
        n=1, perturbations=(Perturbation([-1.2, 0.05], 0.5, 0.05, np.diag([1.0, -1.0])),)
    )
    inside = np.array([[-1.2, 0.05], [-1.0, 0.1], [-1.4, -0.2]])
    out.append(("J^2 = -I", max(j_squared_defect(g, np.vstack([pts, inside])) for g in (g0, g1))))
    out.append(("pal_j(x,x) = I", max(float(np.max(np.abs(pal_j(p, p, g1) - np.eye(2)))) for p in inside)))
    out.append(("Pal = I", float(np.max(np.abs(pal(pts, pts[::-1], 1) - np.eye(2))))))
    V = rng.normal(size=pts.shape)
    ep = ep_map(pts[::-1], pts, V) - (inv_exp(pts[::-1], pts) + V)
    out.append(("EP(v, V) = E(u, v) + V", float(np.max(np.abs(ep)))))
    rt = exp_map(pts, inv_exp(pts, pts[::-1])) - pts[::-1]
    out.append(("exp/inv_exp round trip", float(np.max(np.abs(rt)))))
    dpal = max(float(np.max(np.abs(delta_pal_j(p, p, d, g0)))) for p, d in zip(pts, V))
    out.append(("transport comparison vanishes for constant J", dpal))
    s = np.linspace(-3.0, 3.0, 601)
    lo, hi = smooth_pair(s)
    part = float(np.max(np.abs(lo + hi - 1.0)))
    tau = np.linspace(-10.0, 10.0, 401)
    for region in ("A", "B", "X"):
        part = max(part, float(np.max(np.abs(chi(f"{region}_left", tau, 3.0) + chi(f"{region}_right", tau, 3.0) - 1.0))))
    out.append(("cutoff partition of unity", part))
    rep = check_totally_real(g0, np.column_stack([np.linspace(-2, 2, 9), np.zeros(9)]))
    out.append(("L totally real for J0 (det = 1)", float(np.max(np.abs(rep.determinants - 1.0)))))
    cfg = DomainConfig(h_tau=0.25, n_t=8, trunc=10.0)
    dom = build_piece(1, 1.0, cfg)
    lin = MapSection.from_function(dom, lambda a, b: np.stack([a, 0.0 * b], axis=-1))
    r = cr.dbar(lin, g0)
    out.append(("dbar(tau, 0) = (1, 0)", max(float(np.max(np.abs(r.rx - 1.0))), float(np.max(np.abs(r.ry))))))
    const = MapSection.constant(dom, g0.p0)
    E = cr.ObstructionSpace(1, const, gl.default_bumps(1))
    tb = cr.transport_basis(E, const, g0)
    raw = cr.transport_basis(E, MapSection.constant(dom, [0.3, 0.0]), g0)
    out.append(("transport is the identity for J0", max(
        float(np.max(np.abs(a.rx - b.rx))) + float(np.max(np.abs(a.ry - b.ry))) for a, b in zip(tb.raw, raw.raw)
    )))
    e = tb.ortho[0]
    proj, comp, _ = cr.project_E(tb, e)
    out.append(("projection is idempotent", float(np.max(np.abs(comp.rx))) + float(np.max(np.abs(comp.ry)))))
    ts = TangentSection.constant(dom, np.array([0.6]))
    out.append(("constant section: norm^2 = |v|^2 (1 + |K|)", abs(w_norm(ts, NormSpec()) ** 2 - 0.36 * 2.0)))
    zero = ResidualSection.zeros(dom, 1)
    out.append(("zero residual projects to zero", float(np.max(np.abs(cr.project_E(tb, zero)[0].rx)))))
    return [(name, bool(val <= tol), float(val)) for name, val in out]


# ---------------------------------------------------------------- commands


def _echo_failures(failures):
    for f in failures:
        click.echo(f"FAILED T={f['T']}: {f['error']}", err=True)


@click.group()
@click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON experiment config.")
@click.option("-o", "--out", default=None, help="Output root (default: output.dir of the config).")
@click.option("--threads", type=int, default=None, help="Worker threads (fallback: GLUE_LAB_THREADS).")
@click.option("--fixture", type=click.Choice(["m0", "m1"]), default=None, help="Override the config fixture.")
@click.pass_context
def cli(ctx, config_path, out, threads, fixture):
    """Alternating-Newton gluing of pseudoholomorphic strips."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, out=out, threads=threads, fixture=fixture)


def _setup(ctx, command):
    o = ctx.obj
    conf = load_config(o["config_path"])
    if o["fixture"]:
        conf["fixture"] = o["fixture"]
        if o["fixture"] == "m0" and conf["geometry"]["perturbations"]:
            raise ConfigError("fixture m0 has constant J; perturbations need fixture m1")
    return conf, Run(command, conf, o["out"])


@cli.command("solve-piece")
@click.pass_context
def solve_piece_cmd(ctx):
    """Solve the two pieces of the fixture and report their residuals."""
    conf, run = _setup(ctx, "solve-piece")
    spec = norm_spec(conf)
    fx = fixture_from(conf)
    pieces = []
    for i, (u, E) in enumerate(zip(fx.pieces, fx.E), start=1):
        res = gl.complement_norm(u, E, fx.g, spec)[0]
        pieces.append({"i": i, "complement_norm": res, "energy": cr.energy(u), "asymptotic": u.asymptotic})
        click.echo(f"piece {i}: complement residual {res:.3e}")
    tr = fx.info.get("transversality")
    report = {"command": "solve-piece", "fixture": fx.name, "pieces": pieces}
    if tr is not None:
        report["transversality"] = {
            "passed": tr.passed,
            "mapping_sigma_min": tr.mapping_sigma_min,
            "evaluation_sigma": tr.evaluation_sigma,
        }
    write_json(run.path("report.json"), report)
    return 0


@cli.command()
@click.pass_context
def preglue(ctx):
    """Pregluing and initial error for every T of the config."""
    conf, run = _setup(ctx, "preglue")
    spec = norm_spec(conf)
    fx = fixture_from(conf)
    rho = rho_points(conf)[0]
    u1, u2 = gl.chart_maps(fx, rho)
    rows, points = [], []
    for T in conf["domain"]["T"]:
        st = gl.initial_state(u1, u2, T, fx.E, fx.g, spec)
        init = st.initial
        rows.append([T, init["residual_norm"]] + list(init["e_norms"]))
        points.append({"T": T, **init})
        click.echo(f"T={T}: initial error {init['residual_norm']:.3e}")
    write_csv(run.path("preglue.csv"), ["T", "residual_norm", "e1_norm", "e2_norm"], rows)
    report = {"command": "preglue", "points": points}
    if len(rows) >= 3:
        try:
            report["fit"] = dl.fit_exponential([(r[0], r[1]) for r in rows]).as_dict()
        except GlueLabError as exc:
            report["fit"] = {"error": str(exc)}
    write_json(run.path("report.json"), report)
    return 0


@cli.command()
@click.pass_context
def glue(ctx):
    """Glue the fixture at every T of the config."""
    conf, run = _setup(ctx, "glue")
    spec = norm_spec(conf)
    fx = fixture_from(conf)
    rho = rho_points(conf)[0]
    S = conf["sweep"]["S"]
    sv = conf["solver"]
    rows, snaps, points, failures = [], {1: [], 2: []}, [], []
    for T in conf["domain"]["T"]:
        try:
            sol = gl.glue(fx, rho, T, spec, sv["tol"], sv["kappa_max"])
        except (GlueLabError, np.linalg.LinAlgError) as exc:
            failures.append({"T": T, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows += norm_rows(T, sol.history)
        for i in (1, 2):
            snaps[i].append(gl.glures(i, S, sol))
        points.append({
            "T": T,
            "converged": sol.converged,
            "iterations": sol.iterations,
            "final_residual": sol.state.final_residual,
            "kuranishi": sol.kuranishi,
        })
        click.echo(f"T={T}: {sol.iterations} cycles, residual {sol.state.final_residual:.3e}")
    write_csv(run.path("norms.csv"), NORM_HEADER, rows)
    for i in (1, 2):
        write_csv(run.path(f"glures_{i}_{fmt(S)}.csv"), GLURES_HEADER, [r for s in snaps[i] for r in glures_rows(s)])
    write_json(run.path("report.json"), {"command": "glue", "points": points, "failures": failures})
    _echo_failures(failures)
    return 2 if failures else 0


def _plan(conf, rho=None):
    d, sw = conf["domain"], conf["sweep"]
    return dl.SweepPlan(
        T_list=tuple(d["T"]),
        fixture=conf["fixture"],
        rho_points=tuple(rho if rho is not None else rho_points(conf)),
        S=sw["S"],
        dT=sw["dT"],
        drho=sw["drho"],
        h_tau=d["h"],
        n_t=d["n_t"],
        trunc=domain_config(conf).trunc,
        kappa_max=sw["kappa_max"],
        tol_stop=sw["tol"],
    )


def _thresholds(conf):
    return {"mu": conf["solver"]["mu_target"]}


@cli.command()
@click.pass_context
def sweep(ctx):
    """T sweep with norms, Glures snapshots and decay fits."""
    conf, run = _setup(ctx, "sweep")
    plan = _plan(conf)
    res = dl.sweep(plan, norm_spec(conf), fixture_from(conf), ctx.obj["threads"])
    pts = res.select(0)
    write_csv(run.path("norms.csv"), NORM_HEADER, [r for p in pts for r in norm_rows(p.T, p.history)])
    for i in (1, 2):
        rows = [r for p in pts for r in glures_rows(p.glures[i])]
        write_csv(run.path(f"glures_{i}_{fmt(plan.S)}.csv"), GLURES_HEADER, rows)
    rep = dl.build_report(res, _thresholds(conf))
    write_json(run.path("report.json"), rep.to_json())
    for k, v in rep.checks.items():
        click.echo(f"{k}: {'pass' if v else 'FAIL'}")
    failures = rep.failures
    _echo_failures(failures)
    return 2 if failures else 0


@cli.command("decay-report")
@click.option("--run", "run_dir", type=click.Path(file_okay=False), default=None,
              help="Re-fit the report.json of an earlier sweep instead of sweeping again.")
@click.pass_context
def decay_report(ctx, run_dir):
    """Fits and threshold checks of the decay quantities."""
    conf, run = _setup(ctx, "decay-report")
    if run_dir is not None:
        try:
            data = json.loads((Path(run_dir) / "report.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read the earlier report: {exc}") from None
        rep = dl.report_from_json(data, _thresholds(conf))
    else:
        res = dl.sweep(_plan(conf), norm_spec(conf), fixture_from(conf), ctx.obj["threads"])
        rep = dl.build_report(res, _thresholds(conf))
    write_json(run.path("report.json"), rep.to_json())
    for k, v in rep.fits.items():
        if "delta" in v:
            click.echo(f"{k}: delta={v['delta']:.4g} r2={v['r2']:.4f}")
    for k, v in rep.checks.items():
        click.echo(f"{k}: {'pass' if v else 'FAIL'}")
    _echo_failures(rep.failures)
    return 2 if rep.failures else 0


@cli.command()
@click.pass_context
def roundtrip(ctx):
    """Decompose and reglue at the first T; compare Glures across the rho samples."""
    conf, run = _setup(ctx, "roundtrip")
    spec = norm_spec(conf)
    fx = fixture_from(conf)
    sv = conf["solver"]
    T = conf["domain"]["T"][0]
    S = conf["sweep"]["S"]
    rhos = rho_points(conf)
    sols = [gl.glue(fx, r, T, spec, sv["tol"], sv["kappa_max"]) for r in rhos]
    rt = gl.roundtrip(fx, sols[0], spec, sv["tol"], sv["kappa_max"])
    dim = fx.g.n + sum(E.dim for E in fx.E)
    vec = [np.zeros(dim) if r is None else r for r in rhos]
    pairs = []
    for a in range(len(sols)):
        for b in range(a + 1, len(sols)):
            pairs.append({
                "a": a,
                "b": b,
                "rho_distance": float(np.linalg.norm(vec[a] - vec[b])),
                "glures_distance": gl.glures_distance(sols[a], sols[b], S, spec.m),
            })
    report = {
        "command": "roundtrip",
        "T": T,
        "rho": vec[0],
        "rho_prime": rt.rho_prime,
        "distance": rt.distance,
        "tolerance": sv["tol"],
        "within_tolerance": bool(rt.distance <= 10.0 * max(sv["tol"], np.finfo(float).eps)),
        "pairs": pairs,
    }
    write_json(run.path("report.json"), report)
    click.echo(f"round trip distance {rt.distance:.3e} (tolerance {sv['tol']:.1e})")
    return 0


@cli.command()
def selftest():
    """Run the exact-identity invariant suite."""
    results = invariant_suite()
    for name, ok, val in results:
        click.echo(f"{'pass' if ok else 'FAIL'}  {name}  ({val:.2e})")
    return 0 if all(ok for _, ok, _ in results) else 2


def main(argv=None):
    try:
        code = cli.main(args=argv, prog_name="glue-lab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except (GlueLabError, np.linalg.LinAlgError, FloatingPointError) as exc:
        click.echo(f"numerical failure: {type(exc).__name__}: {exc}", err=True)
        return 2
    return code or 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
