"""Adaptive Euler time steppers for the cell-center ODE system.

Single-rate forward Euler with an accuracy bound (srfe), the same with a
Gershgorin stability bound (srfes), a two-level multirate forward Euler
(mrfe), backward Euler with Newton-GMRES (srbe), plus a fixed-step and a
displacement-bound baseline. ``integrate`` drives any of them over [t0, T]
and applies division events on the way.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from cell_model import (
    CellPopulation,
    ForceLaw,
    NeighborList,
    build_neighbor_list,
    cubic_force,
    cubic_force_derivative,
    partial_force,
    refresh_neighbor_list,
    total_force,
    total_potential,
)
from config import (
    CBM_DIVISION_SEPARATION,
    CBM_DT_MAX_CAP,
    CBM_EPSILON,
    CBM_FD_EPS,
    CBM_GMRES_MAX_ITER,
    CBM_MIN_DT,
    CBM_MRFE_RATIO,
    CBM_NEWTON_MAX_ITER,
    CBM_NEWTON_PREDICTOR,
    CBM_SNAPSHOT_STRIDE,
)
from jacobian import (
    BlockJacobian,
    assemble,
    fd_jacobian_force_product,
    gershgorin_bounds,
    jacobian_force_product,
)
from linsolve import IterationStats, newton_solve
from scenarios import DivisionEvent, SeededRng, apply_division

logger = logging.getLogger(__name__)


class StepSizeUnderflowError(RuntimeError):
    def __init__(self, t: float, dt: float, method: str) -> None:
        self.t = t
        self.dt = dt
        self.method = method
        super().__init__(
            f"{method}: step size {dt:.3e} fell below the minimum at t={t:.12g}"
        )


class Constraint(str, enum.Enum):
    ACCURACY = "accuracy"
    STABILITY = "stability"
    EVENT_TRUNCATION = "event_truncation"
    FIXED_STEP = "fixed_step"
    DISPLACEMENT = "displacement"
    CAP = "cap"


class Method(str, enum.Enum):
    SRFE = "srfe"
    SRFES = "srfes"
    MRFE = "mrfe"
    SRBE = "srbe"
    FIXED = "fixed"
    DISPLACEMENT = "displacement"


@dataclass(frozen=True)
class SolverConfig:
    """Step-size control parameters.

    Newton and GMRES tolerances left as None default to 0.001 * epsilon_acc.
    ``fixed_dt`` is required by the fixed-step method only.
    """

    epsilon_acc: float = CBM_EPSILON
    fd_eps: float = CBM_FD_EPS
    m: int = CBM_MRFE_RATIO
    n_newton: int = CBM_NEWTON_MAX_ITER
    eps_newton: float | None = None
    n_gmres: int = CBM_GMRES_MAX_ITER
    eps_gmres: float | None = None
    eps_gmres_abs: float | None = None
    dt_max_cap: float = CBM_DT_MAX_CAP
    min_dt: float = CBM_MIN_DT
    newton_predictor: bool = CBM_NEWTON_PREDICTOR
    fixed_dt: float | None = None
    snapshot_stride: int = CBM_SNAPSHOT_STRIDE
    record_potential: bool = False

    def __post_init__(self) -> None:
        positive = {
            "epsilon_acc": self.epsilon_acc,
            "fd_eps": self.fd_eps,
            "dt_max_cap": self.dt_max_cap,
            "min_dt": self.min_dt,
            "eps_newton": self.eps_newton,
            "eps_gmres": self.eps_gmres,
            "eps_gmres_abs": self.eps_gmres_abs,
            "fixed_dt": self.fixed_dt,
        }
        for name, value in positive.items():
            if value is not None and not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        for name in ("m", "n_newton", "n_gmres", "snapshot_stride"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def newton_tol(self) -> float:
        return self.eps_newton if self.eps_newton is not None else 1e-3 * self.epsilon_acc

    @property
    def gmres_tol(self) -> float:
        return self.eps_gmres if self.eps_gmres is not None else 1e-3 * self.epsilon_acc

    @property
    def gmres_tol_abs(self) -> float:
        if self.eps_gmres_abs is not None:
            return self.eps_gmres_abs
        return 1e-3 * self.epsilon_acc

    def with_overrides(self, **overrides: object) -> SolverConfig:
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


@dataclass(frozen=True)
class StepDecision:
    dt: float
    constraint: Constraint
    dt_accuracy: float = math.nan
    dt_stability: float | None = None
    af_norm: float = math.nan
    lambda_max_est: float | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"step size must be positive, got {self.dt!r}")


@dataclass(frozen=True)
class MultirateLevels:
    """Partition of one MRFE macro step.

    ``k_fast`` lists the equations with |eta_k| > chi1; ``fast_cells`` the cells
    owning at least one of them. Every coordinate of a fast cell is advanced
    with ``tau0``.
    """

    m: int
    tau0: float
    tau1: float
    k_fast: np.ndarray
    k_slow: np.ndarray
    chi1: float
    fast_cells: np.ndarray
    n_fast_equations: int

    @property
    def single_level(self) -> bool:
        n_equations = self.k_fast.size + self.k_slow.size
        return self.m == 1 or self.n_fast_equations in (0, n_equations)


@dataclass
class EvaluationCounter:
    f_evals: float = 0.0
    a_evals: int = 0
    neighbor_rebuilds: int = 0


class ForceField:
    """Right-hand side F(x) of one population topology.

    Owns the neighbor list (skin r_A - s, refreshed on demand) and counts
    evaluations: a full force evaluation counts 1, a partial one the fraction of
    equations it recomputes.
    """

    def __init__(
        self,
        population: CellPopulation,
        law: ForceLaw,
        *,
        counter: EvaluationCounter | None = None,
    ) -> None:
        self.population = population
        self.law = law
        self.counter = counter if counter is not None else EvaluationCounter()
        self._neighbors = build_neighbor_list(population, law.r_A, skin=law.skin)
        self.counter.neighbor_rebuilds += 1

    @property
    def n_free(self) -> int:
        return self.population.n_free

    @property
    def dim(self) -> int:
        return self.population.dim

    @property
    def n_equations(self) -> int:
        return self.population.n_free * self.population.dim

    def state(self, x: np.ndarray) -> CellPopulation:
        return self.population.with_free_positions(x)

    def neighbors(self, pop: CellPopulation) -> NeighborList:
        refreshed = refresh_neighbor_list(self._neighbors, pop)
        if refreshed is not self._neighbors:
            self.counter.neighbor_rebuilds += 1
            logger.debug("Neighbor list rebuilt (%s pairs)", len(refreshed))
            self._neighbors = refreshed
        return refreshed

    def force(self, x: np.ndarray) -> np.ndarray:
        pop = self.state(x)
        self.counter.f_evals += 1.0
        return total_force(pop, self.law, self.neighbors(pop))

    def force_rows(self, x: np.ndarray, cells: np.ndarray) -> np.ndarray:
        pop = self.state(x)
        if self.n_free:
            self.counter.f_evals += float(np.count_nonzero(cells)) / self.n_free
        return partial_force(pop, self.law, self.neighbors(pop), cells)

    def jacobian(self, x: np.ndarray) -> BlockJacobian:
        pop = self.state(x)
        self.counter.a_evals += 1
        return assemble(pop, self.law, self.neighbors(pop))

    def potential(self, x: np.ndarray) -> float:
        pop = self.state(x)
        return total_potential(pop, self.law, self.neighbors(pop))


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _accuracy_dt(af_norm: float, eps: float, scale: int = 1) -> float:
    if af_norm <= 0.0:
        return math.inf
    return math.sqrt(2.0 * eps * scale / af_norm)


def _stability_dt(lambda_min: float) -> float:
    return 2.0 / abs(lambda_min) if lambda_min < 0.0 else math.inf


def _select_dt(
    candidate: float,
    dt_stability: float | None,
    max_dt: float,
    cfg: SolverConfig,
    *,
    bound: Constraint = Constraint.ACCURACY,
) -> tuple[float, Constraint]:
    dt, constraint = candidate, bound
    if dt_stability is not None and dt_stability < dt:
        dt, constraint = dt_stability, Constraint.STABILITY
    if not math.isfinite(dt):
        dt, constraint = cfg.dt_max_cap, Constraint.CAP
    # land exactly on the next stop instead of leaving a sliver behind
    if dt >= max_dt - cfg.min_dt:
        dt, constraint = max_dt, Constraint.EVENT_TRUNCATION
    return dt, constraint


def srfe_step(
    x: np.ndarray,
    force_field: ForceField,
    cfg: SolverConfig,
    *,
    max_dt: float = math.inf,
) -> tuple[np.ndarray, StepDecision]:
    f_hat = force_field.force(x)
    af = fd_jacobian_force_product(force_field.force, x, f_hat, cfg.fd_eps)
    af_norm = _inf_norm(af)
    dt_acc = _accuracy_dt(af_norm, cfg.epsilon_acc)
    dt, constraint = _select_dt(dt_acc, None, max_dt, cfg)
    return x + dt * f_hat, StepDecision(dt, constraint, dt_acc, None, af_norm)


def srfes_step(
    x: np.ndarray,
    force_field: ForceField,
    cfg: SolverConfig,
    *,
    max_dt: float = math.inf,
) -> tuple[np.ndarray, StepDecision]:
    f_hat = force_field.force(x)
    jac = force_field.jacobian(x)
    af_norm = _inf_norm(jacobian_force_product(jac, f_hat))
    bounds = gershgorin_bounds(jac)
    dt_acc = _accuracy_dt(af_norm, cfg.epsilon_acc)
    dt_stab = _stability_dt(bounds.lambda_min_est)
    dt, constraint = _select_dt(dt_acc, dt_stab, max_dt, cfg)
    decision = StepDecision(
        dt, constraint, dt_acc, dt_stab, af_norm, bounds.lambda_max_est
    )
    return x + dt * f_hat, decision


def _cells_near_fast(
    x_old: np.ndarray,
    x_new: np.ndarray,
    fast_cells: np.ndarray,
    dim: int,
    r_A: float,
) -> np.ndarray:
    """Slow cells within r_A of any fast cell's old or new position."""
    pos_old = x_old.reshape(-1, dim)
    pos_new = x_new.reshape(-1, dim)
    fast_idx = np.flatnonzero(fast_cells)
    near = np.zeros(fast_cells.shape[0], dtype=bool)
    for anchors in (pos_old[fast_idx], pos_new[fast_idx]):
        diff = pos_new[None, :, :] - anchors[:, None, :]
        dist = np.sqrt(np.einsum("fnd,fnd->fn", diff, diff))
        near |= (dist < r_A).any(axis=0)
    return near & ~fast_cells


def mrfe_macro_step(
    x: np.ndarray,
    force_field: ForceField,
    cfg: SolverConfig,
    *,
    max_dt: float = math.inf,
) -> tuple[np.ndarray, StepDecision, MultirateLevels]:
    dim = force_field.dim
    f_hat = force_field.force(x)
    jac = force_field.jacobian(x)
    eta = jacobian_force_product(jac, f_hat)
    eta_norm = _inf_norm(eta)
    bounds = gershgorin_bounds(jac)
    dt_acc = _accuracy_dt(eta_norm, cfg.epsilon_acc, cfg.m)
    dt_stab = _stability_dt(bounds.lambda_min_est)
    tau1, constraint = _select_dt(dt_acc, dt_stab, max_dt, cfg)
    tau0 = tau1 / cfg.m
    chi1 = 2.0 * cfg.epsilon_acc / tau1**2

    fast_eq = np.abs(eta) > chi1
    fast_cells = fast_eq.reshape(-1, dim).any(axis=1)
    levels = MultirateLevels(
        m=cfg.m,
        tau0=tau0,
        tau1=tau1,
        k_fast=np.flatnonzero(fast_eq),
        k_slow=np.flatnonzero(~fast_eq),
        chi1=chi1,
        fast_cells=np.flatnonzero(fast_cells),
        n_fast_equations=int(np.count_nonzero(fast_cells)) * dim,
    )
    decision = StepDecision(
        tau1, constraint, dt_acc, dt_stab, eta_norm, bounds.lambda_max_est
    )

    if cfg.m == 1 or not fast_cells.any():
        return x + tau1 * f_hat, decision, levels
    if fast_cells.all():
        # no slow cells left: a single step of the fast level
        tau_free, free_bound = _select_dt(dt_acc, dt_stab, math.inf, cfg)
        dt, step_bound = _select_dt(tau_free / cfg.m, None, max_dt, cfg, bound=free_bound)
        return x + dt * f_hat, replace(decision, dt=dt, constraint=step_bound), levels

    fast_rows = np.repeat(fast_cells, dim)
    x_work = x.copy()
    f_fast = f_hat
    for j in range(cfg.m):
        x_work[fast_rows] += tau0 * f_fast[fast_rows]
        if j < cfg.m - 1:
            f_fast = force_field.force_rows(x_work, fast_cells)

    f_slow = f_hat.copy()
    affected = _cells_near_fast(x, x_work, fast_cells, dim, force_field.law.r_A)
    if affected.any():
        refreshed = force_field.force_rows(x_work, affected)
        rows = np.repeat(affected, dim)
        f_slow[rows] = refreshed[rows]
    slow_rows = ~fast_rows
    x_work[slow_rows] = x[slow_rows] + tau1 * f_slow[slow_rows]
    return x_work, decision, levels


def srbe_step(
    x: np.ndarray,
    force_field: ForceField,
    cfg: SolverConfig,
    *,
    max_dt: float = math.inf,
) -> tuple[np.ndarray, StepDecision, IterationStats]:
    f_hat = force_field.force(x)
    jac = force_field.jacobian(x)
    af_norm = _inf_norm(jacobian_force_product(jac, f_hat))
    dt_acc = _accuracy_dt(af_norm, cfg.epsilon_acc)
    dt, constraint = _select_dt(dt_acc, None, max_dt, cfg)
    lambda_max = gershgorin_bounds(jac).lambda_max_est
    x_next, stats = newton_solve(x, dt, force_field, cfg, force=f_hat, jac=jac)
    return x_next, StepDecision(dt, constraint, dt_acc, None, af_norm, lambda_max), stats


def fixed_step(x: np.ndarray, force_field: ForceField, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    return x + dt * force_field.force(x)


def displacement_bound_dt(
    F: np.ndarray, eps: float, *, cap: float = CBM_DT_MAX_CAP
) -> float:
    """Largest dt with ||dt F||_inf <= eps; ``cap`` when F vanishes."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    norm = _inf_norm(np.asarray(F, dtype=float))
    return eps / norm if norm > 0.0 else cap


def post_division_dt_bound(
    law: ForceLaw,
    r0: float = CBM_DIVISION_SEPARATION,
    direction: Sequence[float] = (1.0, 0.0, 0.0),
    eps: float = CBM_EPSILON,
) -> float:
    """Step size right after a division along ``direction`` (isolated pair)."""
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    slope = float(cubic_force_derivative(r0, law))
    strength = abs(float(cubic_force(r0, law)))
    accuracy = math.sqrt(eps / (slope * strength * float(np.abs(n).max())))
    return min(1.0 / slope, accuracy)


@dataclass(frozen=True)
class Snapshot:
    t: float
    segment: int
    cell_ids: np.ndarray
    positions: np.ndarray


@dataclass(frozen=True)
class StepRow:
    t: float
    dt: float
    constraint: Constraint
    dt_accuracy: float
    dt_stability: float
    af_norm: float
    tau0: float
    n_fast_equations: int
    f_evals: float
    a_evals: int
    newton_iters: int = 0
    gmres_iters: int = 0
    newton_converged: bool = True
    newton_residual: float = math.nan
    shift_product: float = math.nan
    potential: float = math.nan


@dataclass
class TrajectoryRecord:
    """Per-step trace of one run plus position snapshots and division log.

    ``times`` are step end times; counters are cumulative. Snapshots carry a
    segment index that increments at every division.
    """

    method: str
    t0: float
    steps: list[StepRow] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)
    event_log: list[dict[str, object]] = field(default_factory=list)
    initial_potential: float = math.nan
    neighbor_rebuilds: int = 0
    wall_time: float = 0.0

    @property
    def times(self) -> list[float]:
        return [row.t for row in self.steps]

    @property
    def dts(self) -> list[float]:
        return [row.dt for row in self.steps]

    @property
    def constraints(self) -> list[Constraint]:
        return [row.constraint for row in self.steps]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def f_eval_count(self) -> float:
        return self.steps[-1].f_evals if self.steps else 0.0

    @property
    def a_eval_count(self) -> int:
        return self.steps[-1].a_evals if self.steps else 0

    @property
    def final_snapshot(self) -> Snapshot:
        return self.snapshots[-1]

    def segment(self, index: int) -> list[Snapshot]:
        return [snap for snap in self.snapshots if snap.segment == index]

    def add_snapshot(self, t: float, pop: CellPopulation) -> None:
        segment = len(self.event_log)
        if self.snapshots and self.snapshots[-1].t == t and self.snapshots[-1].segment == segment:
            return
        self.snapshots.append(
            Snapshot(t, segment, pop.cell_ids.copy(), pop.free_positions.copy())
        )


def _apply_due_events(
    pop: CellPopulation,
    pending: list[DivisionEvent],
    t: float,
    rng: SeededRng,
    record: TrajectoryRecord,
) -> CellPopulation:
    while pending and pending[0].time <= t:
        event = pending.pop(0)
        pop, (mother_id, new_id) = apply_division(pop, event, rng)
        ids = list(pop.cell_ids)
        offset = pop.free_positions[ids.index(mother_id)] - pop.free_positions[ids.index(new_id)]
        record.event_log.append(
            {
                "t": t,
                "mother_id": int(mother_id),
                "daughter_id": int(new_id),
                "direction": [float(v) for v in offset / np.linalg.norm(offset)],
                "n_cells": pop.n_free,
            }
        )
        logger.info(
            "Division at t=%.6g: cell %s -> (%s, %s), N=%s",
            t,
            mother_id,
            mother_id,
            new_id,
            pop.n_free,
        )
    return pop


def _take_step(
    method: Method,
    x: np.ndarray,
    force_field: ForceField,
    cfg: SolverConfig,
    max_dt: float,
) -> tuple[np.ndarray, StepDecision, MultirateLevels | None, IterationStats | None]:
    if method is Method.SRFE:
        x_new, decision = srfe_step(x, force_field, cfg, max_dt=max_dt)
        return x_new, decision, None, None
    if method is Method.SRFES:
        x_new, decision = srfes_step(x, force_field, cfg, max_dt=max_dt)
        return x_new, decision, None, None
    if method is Method.MRFE:
        x_new, decision, levels = mrfe_macro_step(x, force_field, cfg, max_dt=max_dt)
        return x_new, decision, levels, None
    if method is Method.SRBE:
        x_new, decision, stats = srbe_step(x, force_field, cfg, max_dt=max_dt)
        return x_new, decision, None, stats
    if method is Method.FIXED:
        dt, constraint = cfg.fixed_dt, Constraint.FIXED_STEP
        if dt >= max_dt - cfg.min_dt:
            dt, constraint = max_dt, Constraint.EVENT_TRUNCATION
        return fixed_step(x, force_field, dt), StepDecision(dt, constraint), None, None
    f_hat = force_field.force(x)
    dt_disp = displacement_bound_dt(f_hat, cfg.epsilon_acc, cap=math.inf)
    dt, constraint = _select_dt(
        dt_disp, None, max_dt, cfg, bound=Constraint.DISPLACEMENT
    )
    return x + dt * f_hat, StepDecision(dt, constraint, dt_disp), None, None


def integrate(
    pop: CellPopulation,
    law: ForceLaw,
    cfg: SolverConfig,
    method: Method | str,
    t0: float,
    T: float,
    events: Sequence[DivisionEvent] = (),
    *,
    rng: SeededRng | None = None,
    field_factory: Callable[..., ForceField] = ForceField,
) -> TrajectoryRecord:
    method = Method(method)
    if T < t0:
        raise ValueError(f"end time {T!r} precedes start time {t0!r}")
    if method is Method.FIXED and cfg.fixed_dt is None:
        raise ValueError("fixed-step integration needs cfg.fixed_dt")
    times = [event.time for event in events]
    if times != sorted(times):
        raise ValueError("division events must be sorted by time")
    if times and not (t0 <= times[0] and times[-1] <= T):
        raise ValueError(f"division events must lie within [{t0}, {T}]")
    rng = rng if rng is not None else SeededRng(0)

    started = time.perf_counter()
    record = TrajectoryRecord(method=method.value, t0=t0)
    counter = EvaluationCounter()
    pending = list(events)
    pop = _apply_due_events(pop, pending, t0, rng, record)
    force_field = field_factory(pop, law, counter=counter)
    x = pop.flat
    record.add_snapshot(t0, pop)
    if cfg.record_potential:
        record.initial_potential = force_field.potential(x)

    t = t0
    while t < T:
        next_stop = min(pending[0].time, T) if pending else T
        x_new, decision, levels, stats = _take_step(
            method, x, force_field, cfg, next_stop - t
        )
        if decision.dt < cfg.min_dt:
            raise StepSizeUnderflowError(t, decision.dt, method.value)
        if decision.constraint is Constraint.EVENT_TRUNCATION:
            t = next_stop
        else:
            t = t + decision.dt
        x = x_new
        record.steps.append(
            StepRow(
                t=t,
                dt=decision.dt,
                constraint=decision.constraint,
                dt_accuracy=decision.dt_accuracy,
                dt_stability=(
                    decision.dt_stability
                    if decision.dt_stability is not None
                    else math.nan
                ),
                af_norm=decision.af_norm,
                tau0=levels.tau0 if levels is not None else math.nan,
                n_fast_equations=(
                    levels.n_fast_equations
                    if levels is not None and not levels.single_level
                    else 0
                ),
                f_evals=counter.f_evals,
                a_evals=counter.a_evals,
                newton_iters=stats.newton_iters if stats else 0,
                gmres_iters=sum(stats.gmres_iters_per_newton) if stats else 0,
                newton_converged=stats.converged if stats else True,
                newton_residual=stats.final_residual_norm if stats else math.nan,
                shift_product=(
                    decision.dt * decision.lambda_max_est
                    if stats is not None and decision.lambda_max_est is not None
                    else math.nan
                ),
                potential=force_field.potential(x) if cfg.record_potential else math.nan,
            )
        )
        logger.debug(
            "%s t=%.9g dt=%.6g (%s)", method.value, t, decision.dt, decision.constraint.value
        )

        if pending and t >= pending[0].time:
            current = force_field.state(x)
            record.add_snapshot(t, current)
            current = _apply_due_events(current, pending, t, rng, record)
            force_field = field_factory(current, law, counter=counter)
            x = current.flat
            record.add_snapshot(t, current)
        elif record.n_steps % cfg.snapshot_stride == 0 or t >= T:
            record.add_snapshot(t, force_field.state(x))

    record.neighbor_rebuilds = counter.neighbor_rebuilds
    record.wall_time = time.perf_counter() - started
    logger.info(
        "Integrated %s over [%.6g, %.6g]: %s steps, %.2f F-evals, %s A-evals",
        method.value,
        t0,
        T,
        record.n_steps,
        record.f_eval_count,
        record.a_eval_count,
    )
    return record
