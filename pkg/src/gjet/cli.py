"""Command-line interface: config ingestion, dispatch, stable outputs.

Commands
--------
  gjet check     <config.json> --out report.json
  gjet solve     <config.json> --out sol.json [--grid-out grid.csv]
  gjet transform <sol.json>    --out dual.json
  gjet residual  <config.json> (--solution sol.json | --manufactured NAME)
                 [--out field.csv]
  gjet report    <sol.json>    --csv surfaces.csv

Exit codes: 0 success, 2 condition failure, 3 solver non-convergence,
4 input error.  Nothing else.

All JSON outputs carry a schema_version and the fully resolved config so
a run can be reproduced from its artifacts alone.  CSV files are
RFC-4180 with '.' decimals, LF line endings and 17-significant-digit
floats; grid rows are ordered x1..xn, u, du1..dun, cell.  Outputs are
byte-stable for identical config and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import conditions, gconvex, genfun, madiag, semidiscrete
from .errors import ConfigError, GjetError, NoConvergence

SCHEMA_VERSION = "1.0"

EXIT_OK = 0
EXIT_CONDITION_FAIL = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INPUT_ERROR = 4


# --------------------------------------------------------------------------
# config schema
# --------------------------------------------------------------------------

_GENERATORS = ("quadratic_ot", "parallel_beam", "point_source")

_DEFAULT_CHECK = {"samples": 200, "seed": 1234, "fd_step": 1e-3,
                  "g3_strict": False}
_DEFAULT_SOLVER = {"mass_tol_rel": 1e-3, "anchor_tol": None,
                   "max_sweeps": 500, "bisect_steps": 40, "z_tol": 1e-12}


def _require_keys(obj: dict, where: str, required, optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _num(obj, where, positive=False):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ConfigError(f"{where}: expected a number")
    v = float(obj)
    if not math.isfinite(v):
        raise ConfigError(f"{where}: must be finite")
    if positive and v <= 0:
        raise ConfigError(f"{where}: must be positive")
    return v


def _vec_list(obj, where, dim):
    if not isinstance(obj, list) or len(obj) != dim:
        raise ConfigError(f"{where}: expected a list of {dim} numbers")
    return [_num(v, where) for v in obj]


def resolve_config(raw: dict, base_dir: str = ".") -> dict:
    """Validate a raw config dict and fill defaults; rejects unknown keys."""
    _require_keys(raw, "config",
                  ("generator", "dimension", "source"),
                  ("targets", "normalization", "solver", "check",
                   "schema_version"))
    if "schema_version" in raw and raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"config.schema_version: expected {SCHEMA_VERSION!r}")
    dim = raw["dimension"]
    if not isinstance(dim, int) or dim not in (1, 2, 3):
        raise ConfigError("config.dimension: expected 1, 2 or 3")

    gen = raw["generator"]
    _require_keys(gen, "config.generator", ("kind",), ("params",))
    if gen["kind"] not in _GENERATORS:
        raise ConfigError(f"config.generator.kind: expected one of {_GENERATORS}")
    params = gen.get("params", {})
    if gen["kind"] == "point_source":
        _require_keys(params, "config.generator.params", (), ("tau",))
        params = {"tau": _num(params.get("tau", 0.0), "tau")}
        if params["tau"] > 0:
            raise ConfigError("config.generator.params.tau: must be <= 0")
    else:
        _require_keys(params, "config.generator.params", ())
        params = {}

    src = raw["source"]
    _require_keys(src, "config.source", ("box", "resolution"), ("density",))
    box = src["box"]
    _require_keys(box, "config.source.box", ("lo", "hi"))
    lo = _vec_list(box["lo"], "config.source.box.lo", dim)
    hi = _vec_list(box["hi"], "config.source.box.hi", dim)
    if any(a >= b for a, b in zip(lo, hi)):
        raise ConfigError("config.source.box: lo must be below hi")
    res = src["resolution"]
    if isinstance(res, int):
        res = [res] * dim
    if (not isinstance(res, list) or len(res) != dim
            or any(not isinstance(r, int) or r < 2 for r in res)):
        raise ConfigError("config.source.resolution: expected int >= 2 per axis")
    density = src.get("density", "uniform")
    if density != "uniform":
        _require_keys(density, "config.source.density", ("csv",))
        path = os.path.join(base_dir, density["csv"])
        if not os.path.exists(path):
            raise ConfigError(f"config.source.density.csv: file not found: {path}")
        density = {"csv": density["csv"]}

    out = {
        "schema_version": SCHEMA_VERSION,
        "generator": {"kind": gen["kind"], "params": params},
        "dimension": dim,
        "source": {"box": {"lo": lo, "hi": hi}, "resolution": res,
                   "density": density},
    }

    if "targets" in raw:
        tg = raw["targets"]
        _require_keys(tg, "config.targets", ("points", "masses"))
        pts = tg["points"]
        if not isinstance(pts, list) or not pts:
            raise ConfigError("config.targets.points: expected a nonempty list")
        pts = [_vec_list(p, "config.targets.points[]", dim) for p in pts]
        ms = tg["masses"]
        if not isinstance(ms, list) or len(ms) != len(pts):
            raise ConfigError("config.targets.masses: one positive mass per point")
        ms = [_num(v, "config.targets.masses[]", positive=True) for v in ms]
        out["targets"] = {"points": pts, "masses": ms}

    if "normalization" in raw:
        nm = raw["normalization"]
        _require_keys(nm, "config.normalization", ("x0", "u0"))
        out["normalization"] = {
            "x0": _vec_list(nm["x0"], "config.normalization.x0", dim),
            "u0": _num(nm["u0"], "config.normalization.u0")}

    solver = dict(_DEFAULT_SOLVER)
    if "solver" in raw:
        _require_keys(raw["solver"], "config.solver", (),
                      tuple(_DEFAULT_SOLVER))
        for k, v in raw["solver"].items():
            if k in ("max_sweeps", "bisect_steps"):
                if not isinstance(v, int) or v <= 0:
                    raise ConfigError(f"config.solver.{k}: expected a positive int")
                solver[k] = v
            elif k == "anchor_tol" and v is None:
                solver[k] = None
            else:
                solver[k] = _num(v, f"config.solver.{k}", positive=True)
    out["solver"] = solver

    check = dict(_DEFAULT_CHECK)
    if "check" in raw:
        _require_keys(raw["check"], "config.check", (),
                      tuple(_DEFAULT_CHECK) + ("y_box",))
        for k, v in raw["check"].items():
            if k in ("samples", "seed"):
                if not isinstance(v, int) or (k == "samples" and v <= 0):
                    raise ConfigError(f"config.check.{k}: expected an int")
                check[k] = v
            elif k == "g3_strict":
                if not isinstance(v, bool):
                    raise ConfigError("config.check.g3_strict: expected a bool")
                check[k] = v
            elif k == "y_box":
                _require_keys(v, "config.check.y_box", ("lo", "hi"))
                check[k] = {"lo": _vec_list(v["lo"], "y_box.lo", dim),
                            "hi": _vec_list(v["hi"], "y_box.hi", dim)}
            else:
                check[k] = _num(v, f"config.check.{k}", positive=True)
    out["check"] = check
    return out


def build_generator(cfg: dict) -> genfun.GeneratingFunction:
    kind = cfg["generator"]["kind"]
    dim = cfg["dimension"]
    if kind == "quadratic_ot":
        return genfun.QuadraticOT(dim)
    if kind == "parallel_beam":
        return genfun.ParallelBeam(dim)
    return genfun.PointSourcePlane(dim, tau=cfg["generator"]["params"]["tau"])


def build_grid(cfg: dict, base_dir: str = ".") -> gconvex.SourceGrid:
    src = cfg["source"]
    density = None
    if src["density"] != "uniform":
        path = os.path.join(base_dir, src["density"]["csv"])
        try:
            density = np.loadtxt(path, delimiter=",").reshape(src["resolution"])
        except Exception as exc:
            raise ConfigError(f"could not load density csv: {exc}")
    return gconvex.SourceGrid(src["box"]["lo"], src["box"]["hi"],
                              src["resolution"], density)


def build_problem(cfg: dict, base_dir: str = ".") -> semidiscrete.SemiDiscreteProblem:
    if "targets" not in cfg or "normalization" not in cfg:
        raise ConfigError("solve requires config.targets and config.normalization")
    gf = build_generator(cfg)
    grid = build_grid(cfg, base_dir)
    s = cfg["solver"]
    tols = semidiscrete.SolverTolerances(
        mass_tol_rel=s["mass_tol_rel"], anchor_tol=s["anchor_tol"],
        max_sweeps=s["max_sweeps"], bisect_steps=s["bisect_steps"],
        z_tol=s["z_tol"])
    return semidiscrete.SemiDiscreteProblem(
        gf, grid, cfg["targets"]["points"], cfg["targets"]["masses"],
        (cfg["normalization"]["x0"], cfg["normalization"]["u0"]),
        tolerances=tols)


# --------------------------------------------------------------------------
# io helpers
# --------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "%.17g" % float(v)


def _write_json(path: str, obj: dict) -> None:
    text = json.dumps(conditions._jsonable(obj), sort_keys=True, indent=2)
    with open(path, "w", newline="\n") as fh:
        fh.write(text + "\n")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"could not read JSON file {path}: {exc}")


def _grid_rows(prob, state):
    """Rows x1..xn, u, du1..dun, cell for every grid node."""
    grid = prob.grid
    sol = semidiscrete.solution_function(prob, state.z)
    vals = gconvex.values_matrix(sol, grid)
    u = vals.max(axis=0)
    assignment = state.decomposition.assignment
    du = np.empty((grid.size, grid.n))
    for i, piece in enumerate(sol.pieces):
        mask = assignment == i
        if mask.any():
            du[mask] = prob.gf.grad_x_batch(grid.centers[mask],
                                            piece.y_vec(), piece.z)
    return u, du, assignment


def _write_grid_csv(path, prob, state, with_mass=False):
    grid = prob.grid
    u, du, assignment = _grid_rows(prob, state)
    n = grid.n
    header = [f"x{k + 1}" for k in range(n)] + ["u"] \
        + [f"du{k + 1}" for k in range(n)] + ["cell"]
    if with_mass:
        header.append("mass")
    masses = state.decomposition.masses
    lines = [",".join(header)]
    for k in range(grid.size):
        row = [_fmt(c) for c in grid.centers[k]] + [_fmt(u[k])] \
            + [_fmt(d) for d in du[k]] + [str(int(assignment[k]))]
        if with_mass:
            row.append(_fmt(masses[assignment[k]]))
        lines.append(",".join(row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _threads_from_env() -> int:
    """Worker cap from GJET_THREADS (0 = auto).  Kernels are vectorized
    in-process, so the cap is recorded and reserved for worker pools."""
    raw = os.environ.get("GJET_THREADS", "0")
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"GJET_THREADS: expected an integer, got {raw!r}")
    if val < 0:
        raise ConfigError("GJET_THREADS: must be >= 0")
    return val


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _sample_spec_from(cfg: dict) -> conditions.SampleSpec:
    box = cfg["source"]["box"]
    check = cfg["check"]
    if "y_box" in check:
        y_lo, y_hi = check["y_box"]["lo"], check["y_box"]["hi"]
    elif "targets" in cfg:
        pts = np.asarray(cfg["targets"]["points"], dtype=float)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        pad = 0.25 * np.maximum(hi - lo, 1.0)
        y_lo, y_hi = (lo - pad).tolist(), (hi + pad).tolist()
    else:
        y_lo, y_hi = box["lo"], box["hi"]
    return conditions.SampleSpec(
        count=check["samples"], seed=check["seed"],
        x_lo=tuple(box["lo"]), x_hi=tuple(box["hi"]),
        y_lo=tuple(y_lo), y_hi=tuple(y_hi))


def cmd_check(args) -> int:
    cfg = resolve_config(_load_json(args.config),
                         os.path.dirname(args.config) or ".")
    gf = build_generator(cfg)
    spec = _sample_spec_from(cfg)
    step = cfg["check"]["fd_step"]
    reports = {
        "G1": conditions.check_injectivity(gf, "primal", spec),
        "G1star": conditions.check_injectivity(gf, "dual", spec),
        "G2": conditions.check_G2(gf, spec),
        "G3": conditions.check_G3_family(gf, spec,
                                         strict=cfg["check"]["g3_strict"],
                                         step=step),
        "G4w": conditions.check_G4w(gf, spec),
    }
    box = (cfg["source"]["box"]["lo"], cfg["source"]["box"]["hi"])
    star = np.asarray(cfg["targets"]["points"], dtype=float) \
        if "targets" in cfg else np.array(
            np.meshgrid(*[(spec.y_lo[k], spec.y_hi[k])
                          for k in range(gf.dimension)],
                        indexing="ij")).reshape(gf.dimension, -1).T
    if gf.g5_constants is not None:
        reports["G5"] = conditions.check_G5(gf, box, star, spec)
    elif gf.name == "quadratic_ot":
        # derived diameter bound for the quadratic instance
        corners = np.array(np.meshgrid(
            *[(box[0][k], box[1][k]) for k in range(gf.dimension)],
            indexing="ij")).reshape(gf.dimension, -1).T
        k0 = max(float(np.linalg.norm(c - y)) for c in corners for y in star)
        reports["G5"] = conditions.check_G5(gf, box, star, spec,
                                            m0=-math.inf, k0=k0 * (1 + 1e-12))
    overall = "pass" if all(r.status != "fail" for r in reports.values()) \
        else "fail"
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "condition_report",
        "threads": _threads_from_env(),
        "config": cfg,
        "results": {k: r.to_jsonable() for k, r in reports.items()},
        "overall": overall,
    }
    _write_json(args.out, payload)
    print(f"conditions: {overall} "
          f"({', '.join(k + '=' + r.status for k, r in reports.items())})")
    return EXIT_OK if overall == "pass" else EXIT_CONDITION_FAIL


def cmd_solve(args) -> int:
    cfg = resolve_config(_load_json(args.config),
                         os.path.dirname(args.config) or ".")
    prob = build_problem(cfg, os.path.dirname(args.config) or ".")
    diags = semidiscrete.validate_problem(prob)
    if diags:
        for d in diags:
            print(f"validation: {d['kind']}: {d['message']}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    try:
        state = semidiscrete.solve(prob)
    except NoConvergence as exc:
        print(f"solver: {exc}", file=sys.stderr)
        if exc.best is not None:
            _write_state(args.out, cfg, exc.best, converged=False)
        return EXIT_NO_CONVERGENCE
    _write_state(args.out, cfg, state, converged=True)
    if args.grid_out:
        _write_grid_csv(args.grid_out, prob, state)
    print(f"solved: residual={_fmt(state.residual)} sweeps={state.sweeps} "
          f"anchor={_fmt(state.anchor_value)}")
    return EXIT_OK


def _write_state(path, cfg, state, converged):
    _write_json(path, {
        "schema_version": SCHEMA_VERSION,
        "kind": "solution",
        "config": cfg,
        "converged": converged,
        "z": state.z,
        "masses": state.decomposition.masses,
        "residual": state.residual,
        "anchor_value": state.anchor_value,
        "sweeps": state.sweeps,
        "interface_cells": state.interface_cells,
        "residual_history": list(state.residual_history),
    })


def _state_from_file(path):
    doc = _load_json(path)
    for key in ("config", "z", "kind"):
        if key not in doc:
            raise ConfigError(f"solution file {path}: missing field {key!r}")
    if doc["kind"] != "solution":
        raise ConfigError(f"solution file {path}: wrong kind {doc['kind']!r}")
    cfg = resolve_config(doc["config"], os.path.dirname(path) or ".")
    prob = build_problem(cfg, os.path.dirname(path) or ".")
    z = np.asarray(doc["z"], dtype=float)
    if z.ndim != 1 or len(z) != len(prob.targets) or len(z) == 0:
        raise ConfigError(f"solution file {path}: z length does not match targets")
    return doc, cfg, prob, z


def cmd_transform(args) -> int:
    _doc, cfg, prob, z = _state_from_file(args.solution)
    sol = semidiscrete.solution_function(prob, z)
    v = gconvex.g_transform(sol, prob.targets, prob.grid)
    u = gconvex.values_matrix(sol, prob.grid).max(axis=0)
    vstar = gconvex.dual_transform(prob.gf, prob.targets, v, prob.grid)
    err = float(np.max(np.abs(vstar.ravel() - u)))
    _write_json(args.out, {
        "schema_version": SCHEMA_VERSION,
        "kind": "dual_transform",
        "config": cfg,
        "v": v,
        "involution_error": err,
    })
    print(f"transform: involution_error={_fmt(err)}")
    return EXIT_OK


def cmd_residual(args) -> int:
    cfg = resolve_config(_load_json(args.config),
                         os.path.dirname(args.config) or ".")
    gf = build_generator(cfg)
    grid = build_grid(cfg, os.path.dirname(args.config) or ".")
    exclude = None
    if args.manufactured:
        ufun, psi = madiag.manufactured_case(args.manufactured, gf, grid)
    else:
        _doc, _scfg, prob, z = _state_from_file(args.solution)
        gf, grid = prob.gf, prob.grid
        sol = semidiscrete.solution_function(prob, z)
        vals = gconvex.values_matrix(sol, grid).max(axis=0)
        ufun = madiag.GridFunction(grid, vals.reshape(grid.res))
        psi = lambda x, u, p: 0.0  # discrete image: the map is piecewise constant
        # difference quotients across kinks carry no information: mask them
        dec = gconvex.cell_masses(sol, grid)
        exclude = gconvex.interface_mask(grid, dec.assignment, widen=1)
    res = madiag.ma_residual(gf, ufun, psi, exclude=exclude)
    ellip, admissible = madiag.ellipticity_check(gf, ufun, exclude=exclude)
    verdict = "elliptic" if admissible else "not-elliptic"
    if admissible and np.nanmin(ellip.values[ellip.mask]) < 1e-8:
        verdict = "degenerate-elliptic"
    print(f"residual: max_abs={_fmt(res.max_abs())} ellipticity={verdict} "
          f"masked={res.masked_count}")
    if args.out:
        lines = [",".join([f"x{k + 1}" for k in range(grid.n)]
                          + ["residual", "min_eig"])]
        rv = res.values.ravel()
        ev = ellip.values.ravel()
        for k in range(grid.size):
            lines.append(",".join([_fmt(c) for c in grid.centers[k]]
                                  + [_fmt(rv[k]), _fmt(ev[k])]))
        with open(args.out, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    doc, _cfg, prob, z = _state_from_file(args.solution)
    sol = semidiscrete.solution_function(prob, z)
    dec = gconvex.cell_masses(sol, prob.grid)
    state = semidiscrete.SolutionState(
        z=z, decomposition=dec,
        residual=float(np.max(np.abs(dec.masses - prob.masses))
                       / prob.grid.total_mass),
        anchor_value=float(gconvex.eval_piecewise(sol, prob.anchor[0])[0]),
        sweeps=int(doc.get("sweeps", 0)),
        residual_history=(),
        interface_cells=gconvex.interface_cell_count(prob.grid, dec.assignment))
    _write_grid_csv(args.csv, prob, state, with_mass=True)
    print(f"report: {prob.grid.size} rows, {len(prob.targets)} pieces")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gjet",
        description="Numerical toolkit for generating-function Jacobian "
                    "equations")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="certify structural conditions")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("solve", help="solve the semi-discrete problem")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-out")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("transform", help="dual transform of a solution")
    p.add_argument("solution")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_transform)

    p = sub.add_parser("residual", help="finite-difference residual fields")
    p.add_argument("config")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--solution")
    g.add_argument("--manufactured", choices=madiag.MANUFACTURED_NAMES)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_residual)

    p = sub.add_parser("report", help="plot-ready CSV for a solution")
    p.add_argument("solution")
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; that code is reserved for
        # condition failures, so usage problems map to input errors
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT_ERROR
    try:
        _threads_from_env()
        return args.fn(args)
    except ConfigError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except NoConvergence as exc:
        print(f"solver: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except GjetError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
