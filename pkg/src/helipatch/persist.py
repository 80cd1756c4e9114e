"""On-disk formats: atomic JSON/CSV writers and the patch round trip.

Floats are written with ``repr`` so a reload is bit-exact, and JSON keys are
sorted so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from .errors import UsageError
from .helical_coeff import HelixParams

PATCH_OMEGA = "patch_omega.csv"
PATCH_DIAG = "patch_diag.json"


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, data):
    _atomic_write(path, json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    _atomic_write(path, buf.getvalue())


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write_cell_field(path, values, name="omega"):
    write_csv(path, ["cell", name], ((i, float(v)) for i, v in enumerate(values)))


def read_cell_field(path, name="omega") -> np.ndarray:
    rows = read_csv(path)
    out = np.empty(len(rows))
    for r in rows:
        out[int(r["cell"])] = float(r[name])
    return out


def save_patch(directory, result, extra=None):
    """Write ``patch_omega.csv`` and ``patch_diag.json`` for a PatchResult."""
    directory = Path(directory)
    pb = result.state.problem
    write_cell_field(directory / PATCH_OMEGA, result.state.omega)
    diag = {
        "params": pb.params.as_dict(),
        "h": pb.mesh.h,
        # R/n_rings regenerates the same ring count
        "h_target": pb.params.R_star / pb.mesh.n_rings,
        "omega_file": PATCH_OMEGA,
        "diagnostics": result.diagnostics.as_dict(),
        "energy_trace": list(result.energy_trace),
        "mu_trace": list(result.mu_trace),
        "converged": result.converged,
        "iterations": result.iterations,
        "flags": list(result.flags),
    }
    diag.update(extra or {})
    write_json(directory / PATCH_DIAG, diag)
    return directory / PATCH_DIAG


def load_patch(path):
    """Rebuild the PatchState stored by :func:`save_patch`.

    Accepts a ``patch_diag.json`` or a ``sweep.json`` (the row with the
    smallest eps is used).  The mesh is regenerated from (R_star, h), which is
    deterministic.
    """
    from .patch_solver import PatchProblem, PatchState, cell_values, bathtub_fill, energy, stream_deviation

    path = Path(path)
    if not path.is_file():
        raise UsageError("input file not found", file=str(path))
    data = read_json(path)
    if "patch_files" in data:
        files = [f for f in data["patch_files"] if f]
        if not files:
            raise UsageError("sweep has no successful rows", file=str(path))
        path = path.parent / files[-1]
        data = read_json(path)
    if "params" not in data or "h" not in data:
        raise UsageError("not a patch diagnostics file", file=str(path))
    params = HelixParams.from_dict(data["params"])
    problem = PatchProblem.build(params, data.get("h_target", data["h"]))
    omega = read_cell_field(path.parent / data.get("omega_file", PATCH_OMEGA))
    if len(omega) != problem.mesh.n_cells:
        raise UsageError("omega file does not match the mesh", file=str(path))
    psi = stream_deviation(problem, omega)
    _, mu, _ = bathtub_fill(cell_values(problem, psi), problem.mesh.cell_area, params.d, problem.cap)
    return PatchState(problem, omega, mu, energy(problem, omega), psi.values), data
