"""CSV and JSON manifest writers for simulation and experiment outputs."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import platform
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
import scipy

from harness import CostRow, ErrorReport, SweepMResult, SweepNRow
from steppers import TrajectoryRecord

logger = logging.getLogger(__name__)

DT_TRACE_COLUMNS = (
    "t",
    "dt",
    "constraint",
    "n_fast_equations",
    "dt_accuracy",
    "dt_stability",
    "af_norm",
    "tau0",
    "f_evals",
    "a_evals",
    "newton_iters",
    "gmres_iters",
    "newton_converged",
    "newton_residual",
    "shift_product",
    "potential",
)
ERRORS_COLUMNS = ("eps", "method", "rel_error", "abs_error", "t_acc", "n_steps", "f_evals")
COST_COLUMNS = (
    "method",
    "f_evals",
    "a_evals",
    "steps",
    "wall_s",
    "rel_wall",
    "rel_f_evals",
    "work_estimate",
    "be_preferred",
)
SWEEP_M_COLUMNS = (
    "m",
    "tau0",
    "tau1",
    "constraint",
    "dt_accuracy",
    "dt_stability",
    "n_fast_equations",
    "optimal",
)
SWEEP_N_COLUMNS = (
    "method",
    "n_per_dim",
    "n_cells",
    "initial_dt",
    "final_dt",
    "initial_fast_equations",
)


def format_value(value: object) -> str:
    """17 significant digits for floats so values survive a CSV round trip."""
    if value is None:
        return ""
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return format(float(value), ".17g")
    return str(value)


def _write_rows(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.info("Wrote %s (%s rows)", path, count)
    return path


def write_dt_trace_csv(path: str | Path, traj: TrajectoryRecord) -> Path:
    return _write_rows(
        path,
        DT_TRACE_COLUMNS,
        (
            (
                row.t,
                row.dt,
                row.constraint,
                row.n_fast_equations,
                row.dt_accuracy,
                row.dt_stability,
                row.af_norm,
                row.tau0,
                row.f_evals,
                row.a_evals,
                row.newton_iters,
                row.gmres_iters,
                row.newton_converged,
                row.newton_residual,
                row.shift_product,
                row.potential,
            )
            for row in traj.steps
        ),
    )


def write_trajectory_csv(path: str | Path, traj: TrajectoryRecord) -> Path:
    dim = traj.snapshots[0].positions.shape[1] if traj.snapshots else 3
    header = ("t", "cell_id", *("x", "y", "z")[:dim], "segment")
    rows = (
        (snap.t, cell_id, *coords, snap.segment)
        for snap in traj.snapshots
        for cell_id, coords in zip(snap.cell_ids, snap.positions)
    )
    return _write_rows(path, header, rows)


def write_errors_csv(path: str | Path, report: ErrorReport) -> Path:
    return _write_rows(
        path,
        ERRORS_COLUMNS,
        (
            (p.eps, p.method, p.rel_error, p.abs_error, p.t_acc, p.n_steps, p.f_evals)
            for p in report.points
        ),
    )


def write_cost_csv(path: str | Path, rows: Sequence[CostRow]) -> Path:
    return _write_rows(
        path,
        COST_COLUMNS,
        (
            (
                r.method,
                r.f_evals,
                r.a_evals,
                r.steps,
                r.wall_s,
                r.rel_wall,
                r.rel_f_evals,
                r.work_estimate,
                r.be_preferred,
            )
            for r in rows
        ),
    )


def write_sweep_m_csv(path: str | Path, result: SweepMResult) -> Path:
    return _write_rows(
        path,
        SWEEP_M_COLUMNS,
        (
            (
                r.m,
                r.tau0,
                r.tau1,
                r.constraint,
                r.dt_accuracy,
                r.dt_stability,
                r.n_fast_equations,
                r.m == result.optimal_m,
            )
            for r in result.rows
        ),
    )


def write_sweep_n_csv(path: str | Path, rows: Sequence[SweepNRow]) -> Path:
    return _write_rows(
        path,
        SWEEP_N_COLUMNS,
        (
            (r.method, r.n_per_dim, r.n_cells, r.initial_dt, r.final_dt, r.initial_fast_equations)
            for r in rows
        ),
    )


def _jsonable(value: object) -> object:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def canonical_json(config: Mapping[str, object]) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)


def config_hash(config: Mapping[str, object]) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def package_versions() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(
    path: str | Path,
    config: Mapping[str, object],
    *,
    outputs: Sequence[str | Path] = (),
    extra: Mapping[str, object] | None = None,
) -> Path:
    """Run manifest: config, its hash, seed, versions and the files written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "method": config.get("method"),
        "versions": package_versions(),
        "outputs": sorted(Path(p).name for p in outputs),
        **(extra or {}),
    }
    path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n",
        encoding="utf-8",
    )
    logger.info("Wrote manifest %s (config %s)", path, manifest["config_hash"][:12])
    return path
