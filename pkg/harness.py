"""Experiment drivers: reference runs, error measurement, sweeps and cost tables."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TypeVar

import numpy as np
from scipy.interpolate import CubicSpline

from config import (
    CBM_DIVISION_SEPARATION,
    CBM_OUTPUT_DIR,
    CBM_REFERENCE_DT_PAIR,
    CBM_REFERENCE_DT_SPHEROID,
    CBM_THREADS,
)
from scenarios import Scenario, SeededRng, division_in_spheroid
from steppers import (
    Constraint,
    ForceField,
    Method,
    MultirateLevels,
    SolverConfig,
    StepDecision,
    TrajectoryRecord,
    integrate,
    mrfe_macro_step,
    post_division_dt_bound,
    srbe_step,
    srfe_step,
    srfes_step,
)

logger = logging.getLogger(__name__)

_T = TypeVar("_T")
_R = TypeVar("_R")

ADAPTIVE_METHODS = (Method.SRFE, Method.SRFES, Method.MRFE, Method.SRBE)


class ExtrapolationError(ValueError):
    def __init__(self, t: float, t_first: float, t_last: float) -> None:
        self.t = t
        self.t_first = t_first
        self.t_last = t_last
        super().__init__(
            f"query time {t!r} outside the recorded range [{t_first!r}, {t_last!r}]"
        )


class CellCountMismatchError(ValueError):
    def __init__(self, n_traj: int, n_ref: int) -> None:
        self.n_traj = n_traj
        self.n_ref = n_ref
        super().__init__(
            f"trajectory has {n_traj} cells, reference has {n_ref}; "
            "compare segments between the same divisions"
        )


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    method: Method = Method.SRFE
    solver: SolverConfig = field(default_factory=SolverConfig)
    dt_ref: float | None = None
    eps_list: tuple[float, ...] = ()
    reps: int = 1
    output_dir: Path = Path(CBM_OUTPUT_DIR)
    threads: int = CBM_THREADS

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps!r}")
        if self.dt_ref is not None and not self.dt_ref > 0:
            raise ValueError(f"dt_ref must be positive, got {self.dt_ref!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads!r}")

    def reference_dt(self) -> float:
        return self.dt_ref if self.dt_ref is not None else default_reference_dt(self.scenario)

    def to_manifest(self) -> dict[str, object]:
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "method": Method(self.method).value,
            "solver": {
                "epsilon_acc": self.solver.epsilon_acc,
                "fd_eps": self.solver.fd_eps,
                "m": self.solver.m,
                "n_newton": self.solver.n_newton,
                "newton_tol": self.solver.newton_tol,
                "n_gmres": self.solver.n_gmres,
                "gmres_tol": self.solver.gmres_tol,
                "gmres_tol_abs": self.solver.gmres_tol_abs,
                "dt_max_cap": self.solver.dt_max_cap,
                "min_dt": self.solver.min_dt,
                "newton_predictor": self.solver.newton_predictor,
                "snapshot_stride": self.solver.snapshot_stride,
            },
            "dt_ref": self.reference_dt(),
            "eps_list": list(self.eps_list),
            "reps": self.reps,
            "force": {
                "mu": self.scenario.law.mu,
                "s": self.scenario.law.s,
                "rA": self.scenario.law.r_A,
            },
        }


@dataclass(frozen=True)
class GlobalError:
    times: np.ndarray
    abs_series: np.ndarray
    abs_error: float
    rel_error: float


@dataclass(frozen=True)
class ErrorPoint:
    method: str
    eps: float
    rel_error: float
    abs_error: float
    t_acc: float
    n_steps: int
    f_evals: float


@dataclass
class ErrorReport:
    points: list[ErrorPoint] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def for_method(self, method: Method | str) -> list[ErrorPoint]:
        name = Method(method).value
        return [p for p in self.points if p.method == name]


@dataclass(frozen=True)
class CostRow:
    method: str
    f_evals: float
    a_evals: int
    steps: int
    wall_s: float
    rel_wall: float
    rel_f_evals: float
    work_estimate: float = math.nan
    be_preferred: bool | None = None


@dataclass(frozen=True)
class SweepMRow:
    m: int
    tau0: float
    tau1: float
    constraint: Constraint
    dt_accuracy: float
    dt_stability: float
    n_fast_equations: int


@dataclass
class SweepMResult:
    rows: list[SweepMRow]
    optimal_m: int | None
    traces: dict[int, TrajectoryRecord] = field(default_factory=dict)


@dataclass(frozen=True)
class SweepNRow:
    method: str
    n_per_dim: int
    n_cells: int
    initial_dt: float
    final_dt: float
    initial_fast_equations: float
    seeds: tuple[int, ...]


def _map_ordered(fn: Callable[[_T], _R], items: Sequence[_T], threads: int) -> list[_R]:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _run_cell(cell: tuple[Scenario, str, SolverConfig]) -> TrajectoryRecord:
    scenario, method, cfg = cell
    return run_method(scenario, method, cfg)


def default_reference_dt(scenario: Scenario) -> float:
    if scenario.kind == "two_cells":
        return CBM_REFERENCE_DT_PAIR
    return CBM_REFERENCE_DT_SPHEROID


def division_separation(scenario: Scenario) -> float:
    for event in (*scenario.initial_events, *scenario.events):
        return event.r0
    return float(scenario.params.get("r0", CBM_DIVISION_SEPARATION))


def run_method(
    scenario: Scenario,
    method: Method | str,
    cfg: SolverConfig | None = None,
) -> TrajectoryRecord:
    return integrate(
        scenario.population,
        scenario.law,
        cfg or SolverConfig(),
        method,
        scenario.t0,
        scenario.T,
        scenario.events,
        rng=SeededRng(scenario.seed),
    )


def run_reference(
    scenario: Scenario,
    dt_ref: float | None = None,
    *,
    cfg: SolverConfig | None = None,
    T: float | None = None,
) -> TrajectoryRecord:
    """Fixed-step forward Euler with a snapshot after every step."""
    dt_ref = dt_ref if dt_ref is not None else default_reference_dt(scenario)
    cfg = replace(cfg or SolverConfig(), fixed_dt=dt_ref, snapshot_stride=1)
    if T is not None:
        scenario = replace(scenario, T=T)
    logger.info("Reference run for %s with dt=%s up to T=%s", scenario.name, dt_ref, scenario.T)
    return run_method(scenario, Method.FIXED, cfg)


def _segment_arrays(
    traj: TrajectoryRecord, segment: int | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if segment is None:
        segments = {snap.segment for snap in traj.snapshots}
        if len(segments) != 1:
            raise ValueError(
                f"trajectory spans segments {sorted(segments)}; pass segment explicitly"
            )
        segment = segments.pop()
    snaps = traj.segment(segment)
    if not snaps:
        raise ValueError(f"trajectory has no snapshots in segment {segment}")
    times = np.array([snap.t for snap in snaps])
    positions = np.stack([snap.positions for snap in snaps])
    return times, positions, snaps[0].cell_ids


def interpolate_trajectory(
    traj: TrajectoryRecord,
    query_times: Iterable[float],
    segment: int | None = None,
    *,
    bc_type: str = "not-a-knot",
) -> np.ndarray:
    """Positions (len(query_times), N, d) from a per-coordinate cubic spline."""
    times, positions, _ = _segment_arrays(traj, segment)
    query = np.asarray(list(query_times), dtype=float)
    tol = 1e-12 * (1.0 + abs(times[-1]))
    for t in query:
        if t < times[0] - tol or t > times[-1] + tol:
            raise ExtrapolationError(float(t), float(times[0]), float(times[-1]))
    query = np.clip(query, times[0], times[-1])
    if times.size == 1:
        return np.repeat(positions, query.size, axis=0)
    spline = CubicSpline(times, positions, axis=0, bc_type=bc_type)
    return spline(query)


def global_error(
    traj: TrajectoryRecord,
    reference: TrajectoryRecord,
    window: tuple[float, float] | None = None,
    *,
    segment: int | None = None,
    bc_type: str = "not-a-knot",
) -> GlobalError:
    """Max-norm in space, 2-norm over the reference time grid.

    The relative error divides by the same norm of the reference itself.
    """
    ref_times, ref_positions, ref_ids = _segment_arrays(reference, segment)
    times, _, ids = _segment_arrays(traj, segment)
    if ids.shape != ref_ids.shape or not np.array_equal(ids, ref_ids):
        raise CellCountMismatchError(int(ids.shape[0]), int(ref_ids.shape[0]))
    lo, hi = times[0], times[-1]
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    keep = (ref_times >= lo) & (ref_times <= hi)
    if not keep.any():
        raise ValueError(f"no reference snapshots in the compared range [{lo}, {hi}]")
    grid = ref_times[keep]
    approx = interpolate_trajectory(traj, grid, segment, bc_type=bc_type)
    exact = ref_positions[keep]
    series = np.abs(approx - exact).reshape(grid.size, -1).max(axis=1)
    scale = np.abs(exact).reshape(grid.size, -1).max(axis=1)
    abs_error = float(np.linalg.norm(series))
    norm = float(np.linalg.norm(scale))
    return GlobalError(
        times=grid,
        abs_series=series,
        abs_error=abs_error,
        rel_error=abs_error / norm if norm > 0 else math.inf,
    )


def accuracy_interval_end(traj: TrajectoryRecord) -> float:
    """Start time of the first stability-bound step, NaN if none."""
    t_prev = traj.t0
    for row in traj.steps:
        if row.constraint is Constraint.STABILITY:
            return t_prev
        t_prev = row.t
    return math.nan


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    keep = (xs > 0) & (ys > 0) & np.isfinite(ys)
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def check_reference_dt(dt_ref: float, records: Iterable[TrajectoryRecord]) -> bool:
    smallest = min((min(r.dts) for r in records if r.steps), default=math.inf)
    if dt_ref >= smallest / 5.0:
        logger.warning(
            "Reference dt %.3g is not below a fifth of the smallest adaptive step %.3g",
            dt_ref,
            smallest,
        )
        return False
    return True


def convergence_study(
    scenario: Scenario,
    methods: Sequence[Method | str],
    eps_list: Sequence[float],
    dt_ref: float | None = None,
    *,
    cfg: SolverConfig | None = None,
    window: tuple[float, float] | None = None,
    reference: TrajectoryRecord | None = None,
    threads: int = CBM_THREADS,
) -> ErrorReport:
    if len(eps_list) < 3:
        raise ValueError(f"convergence study needs at least 3 eps values, got {len(eps_list)}")
    base = cfg or SolverConfig()
    if reference is None:
        reference = run_reference(scenario, dt_ref, cfg=base)
    cells = [
        (scenario, Method(method).value, base.with_overrides(epsilon_acc=eps))
        for method in methods
        for eps in eps_list
    ]
    records = _map_ordered(_run_cell, cells, threads)
    check_reference_dt(
        dt_ref if dt_ref is not None else default_reference_dt(scenario), records
    )

    report = ErrorReport()
    for (_, method, run_cfg), record in zip(cells, records):
        error = global_error(record, reference, window)
        report.points.append(
            ErrorPoint(
                method=method,
                eps=run_cfg.epsilon_acc,
                rel_error=error.rel_error,
                abs_error=error.abs_error,
                t_acc=accuracy_interval_end(record),
                n_steps=record.n_steps,
                f_evals=record.f_eval_count,
            )
        )
    for method in dict.fromkeys(method for _, method, _ in cells):
        points = report.for_method(method)
        report.slopes[method] = loglog_slope(
            [p.eps for p in points], [p.rel_error for p in points]
        )
        logger.info("Convergence slope for %s: %.3f", method, report.slopes[method])
    return report


def mrfe_work_estimate(m: int, k_e: float, d: int, n_cells: int) -> float:
    """Predicted F-evaluations per macro step after a division."""
    if m < 1 or d < 1 or n_cells < 1:
        raise ValueError("m, d and n_cells must be positive")
    return 1.0 + (m - 1) * (1.0 + k_e * math.log(m)) / (d * n_cells)


def backward_euler_preferred(
    k_newton: float, k_gmres: float, dt_accuracy: float, dt_stability: float
) -> bool:
    """True when backward Euler's per-step work is repaid by its longer step."""
    if not dt_stability > 0:
        raise ValueError(f"dt_stability must be positive, got {dt_stability!r}")
    return (k_newton * (k_gmres + 2.0) + 3.0) / 2.0 < dt_accuracy / dt_stability


def _first_split(record: TrajectoryRecord) -> int:
    return next((row.n_fast_equations for row in record.steps if row.n_fast_equations), 0)


def backward_euler_verdict(
    srbe: TrajectoryRecord, srfes: TrajectoryRecord
) -> bool | None:
    """Work criterion from measured runs; None when either run has no usable step.

    Iteration counts come from the backward Euler run, the accuracy step is its
    mean accuracy candidate and the stability step is the mean forward Euler
    stability candidate.
    """
    newton = [row.newton_iters for row in srbe.steps if row.newton_iters > 0]
    dt_accuracy = [row.dt_accuracy for row in srbe.steps if math.isfinite(row.dt_accuracy)]
    dt_stability = [
        row.dt_stability
        for row in srfes.steps
        if math.isfinite(row.dt_stability) and row.dt_stability > 0
    ]
    if not (newton and dt_accuracy and dt_stability):
        return None
    k_gmres = sum(row.gmres_iters for row in srbe.steps) / sum(newton)
    return backward_euler_preferred(
        float(np.mean(newton)),
        k_gmres,
        float(np.mean(dt_accuracy)),
        float(np.mean(dt_stability)),
    )


def cost_benchmark(
    scenario: Scenario,
    methods: Sequence[Method | str],
    reps: int = 1,
    *,
    cfg: SolverConfig | None = None,
    fixed_dt: float | None = None,
    threads: int = CBM_THREADS,
) -> list[CostRow]:
    """Evaluation counts and mean wall time per method against a fixed-step run.

    The fixed baseline uses the post-division step bound unless ``fixed_dt`` is
    given. Counts come from the first repetition; runs are deterministic. The
    backward Euler row carries the work-criterion verdict when SRFES is also
    benchmarked.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps!r}")
    base = cfg or SolverConfig()
    if fixed_dt is None:
        fixed_dt = post_division_dt_bound(scenario.law, division_separation(scenario))
    names = [Method.FIXED.value] + [
        Method(m).value for m in methods if Method(m) is not Method.FIXED
    ]
    cells = [
        (
            scenario,
            name,
            replace(base, fixed_dt=fixed_dt) if name == Method.FIXED.value else base,
        )
        for name in names
        for _ in range(reps)
    ]
    records = _map_ordered(_run_cell, cells, threads)
    firsts = {name: records[k * reps] for k, name in enumerate(names)}
    verdict = None
    if Method.SRBE.value in firsts and Method.SRFES.value in firsts:
        verdict = backward_euler_verdict(
            firsts[Method.SRBE.value], firsts[Method.SRFES.value]
        )
        logger.info("Backward Euler preferred over SRFES: %s", verdict)

    rows: list[CostRow] = []
    baseline: CostRow | None = None
    for k, name in enumerate(names):
        runs = records[k * reps : (k + 1) * reps]
        first = runs[0]
        wall = float(np.mean([r.wall_time for r in runs]))
        estimate = math.nan
        if name == Method.MRFE.value and base.m > 1 and first.n_steps:
            k0 = _first_split(first)
            if k0:
                k_e = (k0 - 1) / math.log(base.m)
                n_cells = scenario.population.n_free
                estimate = mrfe_work_estimate(
                    base.m, k_e, scenario.population.dim, n_cells
                )
        row = CostRow(
            method=name,
            f_evals=first.f_eval_count,
            a_evals=first.a_eval_count,
            steps=first.n_steps,
            wall_s=wall,
            rel_wall=wall / baseline.wall_s if baseline and baseline.wall_s > 0 else 1.0,
            rel_f_evals=(
                first.f_eval_count / baseline.f_evals if baseline and baseline.f_evals else 1.0
            ),
            work_estimate=estimate,
            be_preferred=verdict if name == Method.SRBE.value else None,
        )
        if baseline is None:
            baseline = row
        rows.append(row)
        logger.info(
            "Cost %s: %.2f F-evals, %s A-evals, %s steps, %.3fs",
            name,
            row.f_evals,
            row.a_evals,
            row.steps,
            row.wall_s,
        )
    return rows


def initial_decision(
    scenario: Scenario, method: Method | str, cfg: SolverConfig
) -> tuple[StepDecision, MultirateLevels | None]:
    """Step-size decision of the first step from the scenario's initial state."""
    method = Method(method)
    force_field = ForceField(scenario.population, scenario.law)
    x = scenario.population.flat
    if method is Method.SRFE:
        return srfe_step(x, force_field, cfg)[1], None
    if method is Method.SRFES:
        return srfes_step(x, force_field, cfg)[1], None
    if method is Method.MRFE:
        _, decision, levels = mrfe_macro_step(x, force_field, cfg)
        return decision, levels
    if method is Method.SRBE:
        return srbe_step(x, force_field, cfg)[1], None
    raise ValueError(f"initial step size is only defined for adaptive methods, got {method.value}")


def sweep_m(
    scenario: Scenario,
    m_values: Sequence[int],
    cfg: SolverConfig | None = None,
    *,
    with_traces: bool = False,
    threads: int = CBM_THREADS,
) -> SweepMResult:
    """Initial MRFE macro step for each ratio m.

    The optimal m is the smallest one whose initial macro step is bound by
    stability rather than accuracy.
    """
    base = cfg or SolverConfig()
    rows: list[SweepMRow] = []
    for m in m_values:
        decision, levels = initial_decision(scenario, Method.MRFE, replace(base, m=m))
        rows.append(
            SweepMRow(
                m=m,
                tau0=levels.tau0,
                tau1=levels.tau1,
                constraint=decision.constraint,
                dt_accuracy=decision.dt_accuracy,
                dt_stability=(
                    decision.dt_stability if decision.dt_stability is not None else math.nan
                ),
                n_fast_equations=levels.n_fast_equations,
            )
        )
    optimal = next(
        (row.m for row in sorted(rows, key=lambda r: r.m) if row.constraint is Constraint.STABILITY),
        None,
    )
    result = SweepMResult(rows=rows, optimal_m=optimal)
    if with_traces:
        cells = [(scenario, Method.MRFE.value, replace(base, m=m)) for m in m_values]
        result.traces = dict(zip(m_values, _map_ordered(_run_cell, cells, threads)))
    logger.info("sweep-m over %s: optimal m=%s", list(m_values), optimal)
    return result


def _sweep_n_cell(
    cell: tuple[int, int, str, SolverConfig, bool],
) -> tuple[float, float, int, int]:
    n_per_dim, seed, method, cfg, run_to_end = cell
    scenario = division_in_spheroid(n_per_dim, seed)
    decision, levels = initial_decision(scenario, method, cfg)
    final_dt = math.nan
    if run_to_end:
        record = run_method(scenario, method, cfg)
        final_dt = record.dts[-2] if record.n_steps > 1 else record.dts[-1]
    fast = levels.n_fast_equations if levels is not None else 0
    return decision.dt, final_dt, fast, scenario.population.n_free


def sweep_n(
    n_values: Sequence[int],
    methods: Sequence[Method | str],
    seeds: Sequence[int],
    cfg: SolverConfig | None = None,
    *,
    run_to_end: bool = False,
    threads: int = CBM_THREADS,
) -> list[SweepNRow]:
    """Initial (and optionally late) step size per spheroid size, averaged over seeds.

    The same seeds, hence the same division directions, are used for every size.
    The late step is the last one not truncated at T.
    """
    base = cfg or SolverConfig()
    keys = [(Method(m).value, n) for m in methods for n in n_values]
    cells = [(n, seed, method, base, run_to_end) for method, n in keys for seed in seeds]
    results = _map_ordered(_sweep_n_cell, cells, threads)
    rows: list[SweepNRow] = []
    per_key = len(seeds)
    for k, (method, n) in enumerate(keys):
        chunk = results[k * per_key : (k + 1) * per_key]
        rows.append(
            SweepNRow(
                method=method,
                n_per_dim=n,
                n_cells=chunk[0][3],
                initial_dt=float(np.mean([c[0] for c in chunk])),
                final_dt=float(np.mean([c[1] for c in chunk])),
                initial_fast_equations=float(np.mean([c[2] for c in chunk])),
                seeds=tuple(seeds),
            )
        )
    return rows
