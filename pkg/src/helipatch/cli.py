"""Command-line driver: ``helipatch <command> [--config FILE] [flags]``.

Settings come from built-in defaults, then a flat TOML file, then flags.
Physics is validated before any solve.  Errors are printed to stderr as one
JSON line; exit codes are 0 (ok), 1 (numerical failure) and 2 (usage).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import HelipatchError, InvalidResolution, UsageError

COMMANDS = ("mesh", "green", "patch", "sweep", "evolve", "lift", "verify")

# key -> (type, default); flag names are the keys with "_" -> "-"
SETTINGS = {
    "k": (float, None),
    "d": (float, None),
    "r_star": (float, None),
    "R_star": (float, 1.0),
    "eps": (float, None),
    "eps_list": (list, None),
    "h": (float, None),
    "tol": (float, 1e-10),
    "max_iter": (int, 500),
    "seed_x": (float, None),
    "seed_y": (float, None),
    "seed_angle": (float, None),
    "multistart": (bool, None),
    "coeff": (str, "helical"),
    "sources": (int, 50),
    "T": (float, None),
    "periods": (float, 1.0),
    "dt": (str, "auto"),
    "p": (float, 2.0),
    "delta": (float, 0.0),
    "seed": (int, 0),
    "scheme": (str, "contour"),
    "equilibrate": (int, 0),
    "orbital_every": (int, 50),
    "levels": (int, 64),
    "from": (str, None),
    "out": (str, "."),
}

FLAG_ALIASES = {"r_star": ["--rstar", "--r-star"], "R_star": ["--rstar-domain", "--R-star"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, usage=self.format_usage().strip())


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="helipatch", description="Helical vortex patch experiments.")
    ap.add_argument("--version", action="version", version=f"helipatch {__version__}")
    ap.add_argument("command", nargs="?", choices=COMMANDS)
    ap.add_argument("--config", help="flat TOML file with settings")
    for key, (typ, _) in SETTINGS.items():
        flags = FLAG_ALIASES.get(key, ["--" + key.replace("_", "-")])
        if typ is bool:
            ap.add_argument(*flags, dest=key, action=argparse.BooleanOptionalAction, default=None)
        elif typ is list:
            ap.add_argument(*flags, dest=key, type=float, nargs="+", default=None)
        else:
            ap.add_argument(*flags, dest=key, type=typ, default=None)
    return ap


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config: {exc}", config=str(path)) from None
    unknown = sorted(set(data) - set(SETTINGS) - {"command"})
    if unknown:
        raise UsageError("unknown config keys", keys=unknown)
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags into a flat config dict."""
    cfg = {k: d for k, (_, d) in SETTINGS.items()}
    file_cfg = load_config(args.config)
    for k, v in file_cfg.items():
        cfg[k] = v
    for k in SETTINGS:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    cfg["command"] = args.command or file_cfg.get("command")
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing settings", missing=missing, command=cfg["command"])


def _params(cfg, eps_key="eps"):
    from .helical_coeff import HelixParams

    _require(cfg, "k", "d", "r_star", "R_star")
    eps = cfg.get(eps_key) if eps_key else None
    return HelixParams(float(cfg["k"]), float(cfg["d"]), float(cfg["r_star"]), float(cfg["R_star"]),
                       None if eps is None else float(eps))


def _check_h(cfg, R_star):
    h = cfg.get("h")
    if h is not None and not 0 < h < R_star / 4:
        raise InvalidResolution("need 0 < h < R_star/4", h=h, R_star=R_star)
    return h


def _seed_point(cfg, R):
    if cfg.get("seed_angle") is not None:
        a = float(cfg["seed_angle"])
        r = 0.9 * R
        return (r * math.cos(a), r * math.sin(a))
    x = cfg.get("seed_x")
    y = cfg.get("seed_y")
    if x is None and y is None:
        return (0.9 * R, 0.0)
    return (float(x or 0.0), float(y or 0.0))


# -- commands -------------------------------------------------------------------


def cmd_mesh(cfg, out: Path):
    from .disc_fem import build_disc_mesh

    _require(cfg, "h")
    R = float(cfg["R_star"])
    mesh = build_disc_mesh(R, _check_h(cfg, R))
    mesh.write_csv(out)
    area_gap = math.pi * R * R - mesh.area
    radii = (mesh.nodes[mesh.boundary_mask] ** 2).sum(axis=1) ** 0.5
    checks = {"boundary_on_circle": bool(abs(radii - R).max() < 1e-12 * R),
              "area_deficit_nonnegative": bool(area_gap >= 0)}
    return {"files": ["nodes.csv", "tris.csv"], "n_nodes": mesh.n_nodes, "n_cells": mesh.n_cells,
            "h": mesh.h, "area": mesh.area}, checks


def cmd_green(cfg, out: Path):
    import numpy as np

    from .disc_fem import assemble, build_disc_mesh
    from .green_struct import sample, sample_pairs, write_samples_csv
    from .helical_coeff import helical_field, identity_field

    _require(cfg, "h")
    R = float(cfg["R_star"])
    h = _check_h(cfg, R)
    if cfg["coeff"] == "helical":
        _require(cfg, "k")
        K = helical_field(float(cfg["k"]), R)
    elif cfg["coeff"] == "identity":
        K = identity_field()
    else:
        raise UsageError("coeff must be 'helical' or 'identity'", coeff=cfg["coeff"])
    n = int(cfg["sources"])
    if n < 1:
        raise UsageError("sources must be positive", sources=n)
    mesh = build_disc_mesh(R, h)
    sys_ = assemble(mesh, K)
    rng = np.random.default_rng(int(cfg["seed"]))
    pairs = sample_pairs(mesh, n, rng)
    samples = [sample(mesh, sys_, K, i, j) for i, j in pairs]
    write_samples_csv(samples, out / "green_samples.csv")
    s = np.array([smp.s for smp in samples])
    return {"files": ["green_samples.csv"], "n_samples": n, "s_min": float(s.min()),
            "s_max": float(s.max())}, {"regular_part_finite": bool(np.all(np.isfinite(s)))}


def _solve(cfg, params):
    from .patch_solver import PatchProblem, maximize_patch, radial_seeds, resolution_h, solve_patch

    h = _check_h(cfg, params.R_star)
    problem = PatchProblem.build(params, resolution_h(params) if h is None else h)
    problem.check_resolution()
    seed = _seed_point(cfg, params.R_star)
    if cfg.get("multistart"):
        seeds = radial_seeds(params.R_star, math.atan2(seed[1], seed[0]))
        return maximize_patch(problem, seeds, tol=cfg["tol"], max_iter=cfg["max_iter"]), seed
    return solve_patch(problem, seed, tol=cfg["tol"], max_iter=cfg["max_iter"]), seed


def _patch_checks(res):
    import numpy as np

    tr = np.asarray(res.energy_trace)
    st = res.state
    return {"energy_monotone": bool(np.all(np.diff(tr) >= -1e-12)),
            "mass_exact": bool(abs(st.mass - st.params.d) < 1e-12),
            "box_constraint": bool(st.omega.min() >= 0 and st.omega.max() <= st.problem.cap),
            "converged": bool(res.converged)}


def cmd_patch(cfg, out: Path):
    from .persist import save_patch

    _require(cfg, "eps")
    params = _params(cfg)
    res, seed = _solve(cfg, params)
    save_patch(out, res, {"seed_point": list(seed), "multistart": bool(cfg.get("multistart"))})
    return {"files": ["patch_omega.csv", "patch_diag.json"], "energy": res.diagnostics.energy,
            "mu": res.diagnostics.mu, "iterations": res.iterations, "flags": res.flags}, _patch_checks(res)


def cmd_sweep(cfg, out: Path):
    from .helical_coeff import energy_slope, multiplier_slope
    from .patch_solver import epsilon_sweep, resolution_h
    from .persist import save_patch, write_csv, write_json

    _require(cfg, "eps_list")
    eps_list = [float(e) for e in cfg["eps_list"]]
    params = _params(cfg, eps_key=None)
    for e in eps_list:
        params.with_eps(e)  # feasibility of every row before solving
    h_fixed = _check_h(cfg, params.R_star)
    rule = resolution_h if h_fixed is None else (lambda p: h_fixed)
    multistart = True if cfg.get("multistart") is None else bool(cfg["multistart"])
    try:
        table = epsilon_sweep(params, eps_list, _seed_point(cfg, params.R_star), h_rule=rule,
                              tol=cfg["tol"], max_iter=cfg["max_iter"], multistart=multistart)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fields = list(table.rows[0].as_dict())
    write_csv(out / "sweep.csv", fields, ([r.as_dict()[f] for f in fields] for r in table.rows))
    files = []
    for i, res in enumerate(table.results):
        if res is None:
            files.append(None)
            continue
        sub = f"eps_{i}"
        save_patch(out / sub, res, {"multistart": multistart})
        files.append(f"{sub}/patch_diag.json")
    summary = {"eps_list": eps_list, "energy_slope": table.energy_slope, "mu_slope": table.mu_slope,
               "diameter_slope": table.diameter_slope,
               "energy_slope_predicted": energy_slope(params), "mu_slope_predicted": multiplier_slope(params),
               "rows": [r.as_dict() for r in table.rows], "patch_files": files}
    write_json(out / "sweep.json", summary)
    checks = {"all_rows_solved": all(not r.error for r in table.rows),
              "all_rows_converged": all(r.converged for r in table.rows)}
    return {"files": ["sweep.csv", "sweep.json"] + [f for f in files if f],
            "energy_slope": table.energy_slope, "mu_slope": table.mu_slope}, checks


def cmd_evolve(cfg, out: Path):
    import numpy as np

    from .persist import load_patch, write_cell_field, write_csv, write_json
    from .transport import (MONITOR_FIELDS, MeshTools, Rasterizer, contour_from_state, equilibrate_contour,
                            perturb_contour, rotation_period, run)

    _require(cfg, "from")
    state, _ = load_patch(cfg["from"])
    pb = state.problem
    period = rotation_period(pb.params)
    T = float(cfg["T"]) if cfg.get("T") is not None else float(cfg["periods"]) * period
    if T <= 0:
        raise UsageError("T must be positive", T=T)
    dt = cfg["dt"]
    if dt != "auto":
        try:
            dt = float(dt)
        except ValueError:
            raise UsageError("dt must be 'auto' or a number", dt=dt) from None
        if dt <= 0:
            raise UsageError("dt must be positive", dt=dt)
    reference = contour_from_state(state)
    if cfg["equilibrate"] > 0:
        reference, _ = equilibrate_contour(pb, reference, iters=int(cfg["equilibrate"]))
    rng = np.random.default_rng(int(cfg["seed"]))
    initial = perturb_contour(reference, float(cfg["delta"]), rng, R_star=pb.params.R_star)
    scheme = cfg["scheme"]
    if scheme not in ("contour", "semi_lagrangian"):
        raise UsageError("scheme must be 'contour' or 'semi_lagrangian'", scheme=scheme)
    ref = reference.resampled(0.5 * pb.mesh.h) if scheme == "contour" else \
        Rasterizer(MeshTools(pb.mesh)).omega(reference, pb.cap)
    final, mon = run(pb, initial, T, dt=dt, scheme=scheme, reference=ref, p=float(cfg["p"]),
                     orbital_every=int(cfg["orbital_every"]))
    write_csv(out / "monitors.csv", MONITOR_FIELDS, mon.rows)
    write_cell_field(out / "final_omega.csv", final.omega)
    od = mon.column("orbital_dist")
    od = od[np.isfinite(od)]
    summary = {"T": T, "rotation_period": period, "n_steps": final.step_count, "dt": final.dt,
               "scheme": scheme, "delta": float(cfg["delta"]), "p": float(cfg["p"]), "seed": int(cfg["seed"]),
               "energy_drift": mon.drift("E"), "moment_drift": mon.drift("I"), "mass_drift": mon.drift("mass"),
               "angular_speed": mon.angular_speed(), "angular_speed_predicted": -pb.background_coeff,
               "orbital_initial": float(od[0]) if len(od) else None,
               "orbital_max": float(od.max()) if len(od) else None}
    write_json(out / "evolve.json", summary)
    checks = {"energy_drift_below_1pct": summary["energy_drift"] < 0.01,
              "moment_drift_below_1pct": summary["moment_drift"] < 0.01,
              "box_constraint": bool(mon.column("min").min() >= 0 and mon.column("max").max() <= pb.cap * (1 + 1e-12))}
    return {"files": ["monitors.csv", "final_omega.csv", "evolve.json"], **{k: summary[k] for k in (
        "energy_drift", "moment_drift", "angular_speed")}}, checks


def cmd_lift(cfg, out: Path):
    import numpy as np

    from .helix_lift import lift_patch, zeta_field
    from .persist import load_patch, write_json

    _require(cfg, "from")
    levels = int(cfg["levels"])
    if levels < 1:
        raise UsageError("levels must be positive", levels=levels)
    state, _ = load_patch(cfg["from"])
    tube = lift_patch(state, rho_samples=levels)
    tube.write_csv(out / "tube.csv")
    summary = tube.summary()
    summary["level_mean_dist"] = tube.level_mean_dist.tolist()
    write_json(out / "lift.json", summary)
    zeta = zeta_field(tube.points, state.params.k)
    par = float(np.abs(np.cross(tube.vectors, zeta)).max())
    checks = {"vorticity_parallel_to_zeta": par <= 1e-12 * max(1.0, float(np.abs(tube.vectors).max())),
              "circulation_equals_d": bool(np.all(np.abs(tube.level_circulation - state.params.d) < 1e-12))}
    return {"files": ["tube.csv", "lift.json"], **tube.summary()}, checks


def cmd_verify(cfg, out: Path):
    from .checks import quick_suite
    from .persist import write_json

    results = quick_suite()
    for c in results:
        print(c.line())
    write_json(out / "verify.json", {"checks": [c.as_dict() for c in results]})
    return {"files": ["verify.json"]}, {c.name: c.passed for c in results}


HANDLERS = {"mesh": cmd_mesh, "green": cmd_green, "patch": cmd_patch, "sweep": cmd_sweep,
            "evolve": cmd_evolve, "lift": cmd_lift, "verify": cmd_verify}


def _versions():
    import numpy
    import scipy
    import shapely

    return {"helipatch": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__, "shapely": shapely.__version__}


def run(cfg: dict) -> dict:
    """Dispatch a resolved config; writes artifacts and ``manifest.json``."""
    from .persist import write_json

    command = cfg.get("command")
    if command not in HANDLERS:
        raise UsageError("no command given", commands=list(COMMANDS))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report, checks = HANDLERS[command](cfg, out)
    manifest = {"command": command, "config": {k: v for k, v in sorted(cfg.items())},
                "versions": _versions(), "checks": checks, "report": report,
                "timings": {"seconds": time.perf_counter() - t0}}
    write_json(out / "manifest.json", manifest)
    return manifest


def _limit_threads():
    n = os.environ.get("HELIPATCH_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        if cfg["command"] is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given", commands=list(COMMANDS))
        manifest = run(cfg)
    except HelipatchError as exc:
        record = exc.record()
        usage = record.pop("usage", None)
        if usage:
            print(usage, file=sys.stderr)
        print(json.dumps(record, sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # numerical failure outside the error hierarchy
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 1
    failed = [k for k, v in manifest["checks"].items() if not v]
    print(json.dumps({"command": manifest["command"], "failed_checks": failed, "out": cfg["out"]},
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
