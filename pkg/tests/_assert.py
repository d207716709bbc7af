"""Numeric assertions for trajectories and arrays."""

from __future__ import annotations

import numpy as np


def assert_allclose(actual: object, expected: object, *, atol: float = 0.0, rtol: float = 1e-12) -> None:
    a = np.asarray(actual, dtype=float)
    e = np.asarray(expected, dtype=float)
    if a.shape != e.shape:
        raise AssertionError(f"shape mismatch: {a.shape} != {e.shape}")
    if not np.allclose(a, e, atol=atol, rtol=rtol):
        worst = float(np.max(np.abs(a - e))) if a.size else 0.0
        raise AssertionError(f"arrays differ (max abs diff {worst:.3e}, atol={atol}, rtol={rtol})")


def assert_symmetric(matrix: np.ndarray) -> None:
    if not np.array_equal(matrix, matrix.T):
        worst = float(np.max(np.abs(matrix - matrix.T)))
        raise AssertionError(f"matrix is not exactly symmetric (max asymmetry {worst:.3e})")


def assert_steps_land(times: list[float], stops: list[float]) -> None:
    for stop in stops:
        if stop not in times:
            raise AssertionError(f"no step ends exactly at t={stop!r}")
