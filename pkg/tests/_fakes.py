"""Counting test double for the force field."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from steppers import ForceField


@dataclass(slots=True)
class CallLog:
    force: int = 0
    force_rows: list[int] = field(default_factory=list)
    jacobian: int = 0


class CountingForceField(ForceField):
    """ForceField that records every call independently of the counters."""

    logs: list[CallLog] = []

    def __init__(self, *args: object, **kwargs: object) -> None:
        super().__init__(*args, **kwargs)
        self.calls = CallLog()
        CountingForceField.logs.append(self.calls)

    def force(self, x: np.ndarray) -> np.ndarray:
        self.calls.force += 1
        return super().force(x)

    def force_rows(self, x: np.ndarray, cells: np.ndarray) -> np.ndarray:
        self.calls.force_rows.append(int(np.count_nonzero(cells)))
        return super().force_rows(x, cells)

    def jacobian(self, x: np.ndarray):
        self.calls.jacobian += 1
        return super().jacobian(x)

    @classmethod
    def reset(cls) -> None:
        cls.logs = []

    @classmethod
    def totals(cls, n_free_per_log: list[int]) -> tuple[float, int]:
        """(weighted F count, A count) over every instance created since reset."""
        f_total = 0.0
        a_total = 0
        for log, n_free in zip(cls.logs, n_free_per_log):
            f_total += log.force + sum(log.force_rows) / n_free
            a_total += log.jacobian
        return f_total, a_total
