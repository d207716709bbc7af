import math
import unittest

import numpy as np

from harness import convergence_study, initial_decision, run_method, run_reference
from scenarios import two_cell_config
from steppers import Constraint, Method, SolverConfig
from tests._env import require_slow_or_skip

STABILITY_LIMIT = 1 / 1.425


class StabilitySaturationTests(unittest.TestCase):
    def setUp(self) -> None:
        require_slow_or_skip()
        self.scenario = two_cell_config()

    def test_forward_euler_oscillates_about_stability_limit(self) -> None:
        for eps in (0.01, 0.005, 0.0025):
            record = run_method(self.scenario, Method.SRFE, SolverConfig(epsilon_acc=eps))
            tail = record.dts[-21:-1]
            self.assertAlmostEqual(STABILITY_LIMIT, float(np.mean(tail)), delta=0.15 * STABILITY_LIMIT)

    def test_stability_bound_is_respected(self) -> None:
        for eps in (0.01, 0.005, 0.0025):
            record = run_method(self.scenario, Method.SRFES, SolverConfig(epsilon_acc=eps))
            for row in record.steps:
                if math.isfinite(row.dt_stability):
                    self.assertLessEqual(row.dt, row.dt_stability + 1e-15)
            self.assertIn(Constraint.STABILITY, record.constraints)

    def test_backward_euler_passes_the_limit(self) -> None:
        record = run_method(self.scenario, Method.SRBE, SolverConfig())
        crossing = next(row.t for row in record.steps if row.dt > STABILITY_LIMIT)
        self.assertLess(crossing, 6.0)


class ConvergenceOrderTests(unittest.TestCase):
    def setUp(self) -> None:
        require_slow_or_skip()

    def test_slopes(self) -> None:
        scenario = two_cell_config(T=3.0)
        report = convergence_study(
            scenario, ["srfe", "srfes", "srbe"], [0.02, 0.01, 0.005, 0.0025], 5e-5
        )
        self.assertAlmostEqual(0.5, report.slopes["srfe"], delta=0.1)
        self.assertAlmostEqual(0.5, report.slopes["srfes"], delta=0.1)
        self.assertAlmostEqual(0.42, report.slopes["srbe"], delta=0.1)


class PostDivisionTests(unittest.TestCase):
    def setUp(self) -> None:
        require_slow_or_skip()

    def test_axis_aligned_division(self) -> None:
        for method in ("srfe", "srfes", "srbe"):
            decision, _ = initial_decision(two_cell_config(), method, SolverConfig())
            self.assertAlmostEqual(0.006996, decision.dt, delta=1e-4)

    def test_random_directions(self) -> None:
        rng = np.random.default_rng(12)
        for _ in range(50):
            direction = rng.standard_normal(3)
            decision, _ = initial_decision(two_cell_config(direction), "srfes", SolverConfig())
            self.assertGreaterEqual(decision.dt, 0.00699)
            self.assertLessEqual(decision.dt, 0.0093)


class GradientSystemTests(unittest.TestCase):
    def setUp(self) -> None:
        require_slow_or_skip()

    def test_potential_decreases_along_reference(self) -> None:
        cfg = SolverConfig(record_potential=True)
        reference = run_reference(two_cell_config(T=2.0), 1e-4, cfg=cfg)
        potentials = [reference.initial_potential] + [row.potential for row in reference.steps]
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(potentials, potentials[1:])))

    def test_backward_euler_decreases_potential(self) -> None:
        cfg = SolverConfig(record_potential=True)
        record = run_method(two_cell_config(), Method.SRBE, cfg)
        previous = record.initial_potential
        for row in record.steps:
            if row.shift_product < 1.0:
                self.assertLessEqual(row.potential, previous + 1e-8)
            previous = row.potential


if __name__ == "__main__":
    unittest.main()
