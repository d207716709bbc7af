"""GMRES on J = I - dt*A and the Newton loop of the backward Euler step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Protocol

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator

from jacobian import BlockJacobian

if TYPE_CHECKING:
    from steppers import SolverConfig

logger = logging.getLogger(__name__)

REORTHOGONALIZATION_TOL = 1e-8
_BREAKDOWN_TOL = 1e-14


class ForceEvaluator(Protocol):
    def force(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> BlockJacobian: ...


class ShiftedJacobian(LinearOperator):
    """J = I - dt*A applied through block-sparse products; symmetric."""

    def __init__(self, jac: BlockJacobian, dt: float) -> None:
        self.jac = jac
        self.dt = float(dt)
        n = jac.n_equations
        super().__init__(dtype=np.float64, shape=(n, n))

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(-1)
        return v - self.dt * self.jac.matvec(v)

    def _rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self._matvec(v)


@dataclass
class GmresResult:
    solution: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    residual_history: list[float] = field(default_factory=list)


@dataclass
class IterationStats:
    newton_iters: int = 0
    gmres_iters_per_newton: list[int] = field(default_factory=list)
    final_residual_norm: float = 0.0
    converged: bool = False
    residual_history: list[float] = field(default_factory=list)
    gmres_failures: int = 0


def gmres_solve(
    op: LinearOperator,
    rhs: np.ndarray,
    tol_rel: float,
    tol_abs: float,
    max_iter: int,
) -> GmresResult:
    """Unrestarted GMRES from a zero initial guess.

    Stops once the residual estimate is at most max(tol_rel*||rhs||, tol_abs) or
    after ``max_iter`` Krylov vectors, returning the minimal-residual iterate.
    """
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    b = np.asarray(rhs, dtype=float).reshape(-1)
    n = b.shape[0]
    beta = float(np.linalg.norm(b))
    threshold = max(tol_rel * beta, tol_abs)
    history = [beta]
    if beta <= threshold:
        return GmresResult(np.zeros(n), beta, 0, True, history)

    basis = np.zeros((max_iter + 1, n))
    hess = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    basis[0] = b / beta
    g[0] = beta

    steps = 0
    converged = False
    for k in range(max_iter):
        w = op.matvec(basis[k]).reshape(-1)
        # modified Gram-Schmidt
        for i in range(k + 1):
            hess[i, k] = w @ basis[i]
            w -= hess[i, k] * basis[i]
        h_next = float(np.linalg.norm(w))
        if h_next > 0.0:
            loss = float(np.abs(basis[: k + 1] @ w).max()) / h_next
            if loss > REORTHOGONALIZATION_TOL:
                for i in range(k + 1):
                    c = w @ basis[i]
                    hess[i, k] += c
                    w -= c * basis[i]
                h_next = float(np.linalg.norm(w))
        column_norm = float(np.linalg.norm(hess[: k + 1, k]))
        hess[k + 1, k] = h_next

        for i in range(k):
            upper = cs[i] * hess[i, k] + sn[i] * hess[i + 1, k]
            hess[i + 1, k] = -sn[i] * hess[i, k] + cs[i] * hess[i + 1, k]
            hess[i, k] = upper
        denom = float(np.hypot(hess[k, k], hess[k + 1, k]))
        if denom == 0.0:
            logger.warning("GMRES breakdown: singular Hessenberg column at k=%s", k)
            break
        cs[k] = hess[k, k] / denom
        sn[k] = hess[k + 1, k] / denom
        hess[k, k] = denom
        hess[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]

        steps = k + 1
        residual = abs(float(g[k + 1]))
        history.append(residual)
        if residual <= threshold:
            converged = True
            break
        if h_next <= _BREAKDOWN_TOL * max(column_norm, h_next, 1.0):
            logger.warning(
                "GMRES breakdown at k=%s with residual %.3e above %.3e",
                k,
                residual,
                threshold,
            )
            break
        basis[k + 1] = w / h_next

    if steps == 0:
        return GmresResult(np.zeros(n), beta, 0, False, history)
    y = solve_triangular(hess[:steps, :steps], g[:steps], lower=False)
    solution = basis[:steps].T @ y
    return GmresResult(solution, history[-1], steps, converged, history)


def newton_solve(
    x_prev: np.ndarray,
    dt: float,
    force_field: ForceEvaluator,
    cfg: SolverConfig,
    *,
    force: np.ndarray | None = None,
    jac: BlockJacobian | None = None,
) -> tuple[np.ndarray, IterationStats]:
    """Solve x = x_prev + dt*F(x) by Newton iterations with inner GMRES.

    ``force`` and ``jac`` may carry F and A already evaluated at ``x_prev``.
    F is re-evaluated after every update, so ``final_residual_norm`` is the
    implicit-equation residual at the returned state. A is refreshed only when
    another iteration follows. Stops once ||dx|| < eps_newton (||x|| + 1).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    x_prev = np.asarray(x_prev, dtype=float)
    f_hat = force_field.force(x_prev) if force is None else force
    a_hat = force_field.jacobian(x_prev) if jac is None else jac
    x_next = x_prev.copy()
    if cfg.newton_predictor:
        x_next = x_prev + dt * f_hat
        f_hat = force_field.force(x_next)
        a_hat = force_field.jacobian(x_next)

    stats = IterationStats()
    residual = x_next - x_prev - dt * f_hat
    stats.final_residual_norm = float(np.linalg.norm(residual))
    stats.residual_history.append(stats.final_residual_norm)
    for it in range(cfg.n_newton):
        result = gmres_solve(
            ShiftedJacobian(a_hat, dt),
            -residual,
            tol_rel=cfg.gmres_tol,
            tol_abs=cfg.gmres_tol_abs,
            max_iter=cfg.n_gmres,
        )
        stats.gmres_iters_per_newton.append(result.iterations)
        if not result.converged:
            stats.gmres_failures += 1
        x_next = x_next + result.solution
        stats.newton_iters = it + 1
        f_hat = force_field.force(x_next)
        residual = x_next - x_prev - dt * f_hat
        stats.final_residual_norm = float(np.linalg.norm(residual))
        stats.residual_history.append(stats.final_residual_norm)
        if np.linalg.norm(result.solution) < cfg.newton_tol * (
            np.linalg.norm(x_next) + 1.0
        ):
            stats.converged = True
            break
        if it + 1 < cfg.n_newton:
            a_hat = force_field.jacobian(x_next)

    if not stats.converged:
        logger.warning(
            "Newton did not converge in %s iterations (dt=%.6g, residual=%.3e)",
            cfg.n_newton,
            dt,
            stats.final_residual_norm,
        )
    return x_next, stats
