import math
import unittest

import numpy as np

from cell_model import center_of_gravity
from scenarios import DivisionEvent, division_in_spheroid
from steppers import (
    Constraint,
    ForceField,
    Method,
    SolverConfig,
    StepSizeUnderflowError,
    displacement_bound_dt,
    fixed_step,
    integrate,
    mrfe_macro_step,
    post_division_dt_bound,
    srbe_step,
    srfe_step,
    srfes_step,
)
from tests._assert import assert_allclose, assert_steps_land
from tests._fakes import CountingForceField
from tests._seed import TABLE_LAW, pair_at, random_cluster

POST_DIVISION_DT = 0.006996


class SolverConfigTests(unittest.TestCase):
    def test_default_tolerances_follow_epsilon(self) -> None:
        cfg = SolverConfig(epsilon_acc=0.005)
        self.assertAlmostEqual(5e-6, cfg.newton_tol, delta=1e-18)
        self.assertAlmostEqual(5e-6, cfg.gmres_tol, delta=1e-18)
        self.assertAlmostEqual(5e-6, cfg.gmres_tol_abs, delta=1e-18)
        self.assertEqual(1e-3, SolverConfig(eps_newton=1e-3).newton_tol)

    def test_validation(self) -> None:
        for kwargs in ({"m": 0}, {"epsilon_acc": -1.0}, {"n_gmres": 1.5}, {"fixed_dt": 0.0}):
            with self.assertRaises(ValueError):
                SolverConfig(**kwargs)

    def test_with_overrides_skips_none(self) -> None:
        cfg = SolverConfig().with_overrides(epsilon_acc=0.01, m=None)
        self.assertEqual(0.01, cfg.epsilon_acc)
        self.assertEqual(SolverConfig().m, cfg.m)


class PostDivisionStepTests(unittest.TestCase):
    def setUp(self) -> None:
        self.pop = pair_at(0.3)
        self.cfg = SolverConfig(epsilon_acc=0.005)

    def test_srfe_initial_step(self) -> None:
        _, decision = srfe_step(self.pop.flat, ForceField(self.pop, TABLE_LAW), self.cfg)
        self.assertAlmostEqual(POST_DIVISION_DT, decision.dt, delta=1e-4)
        self.assertIs(Constraint.ACCURACY, decision.constraint)
        self.assertIsNone(decision.dt_stability)

    def test_srfes_initial_step(self) -> None:
        _, decision = srfes_step(self.pop.flat, ForceField(self.pop, TABLE_LAW), self.cfg)
        self.assertAlmostEqual(POST_DIVISION_DT, decision.dt, delta=1e-4)
        self.assertAlmostEqual(0.05623, decision.dt_stability, delta=1e-4)
        self.assertIs(Constraint.ACCURACY, decision.constraint)

    def test_srbe_initial_step(self) -> None:
        x_new, decision, stats = srbe_step(
            self.pop.flat, ForceField(self.pop, TABLE_LAW), self.cfg
        )
        self.assertAlmostEqual(POST_DIVISION_DT, decision.dt, delta=1e-4)
        self.assertTrue(stats.converged)
        separation = np.linalg.norm(x_new[:3] - x_new[3:])
        self.assertGreater(separation, 0.3)

    def test_mrfe_initial_macro_step(self) -> None:
        _, decision, levels = mrfe_macro_step(
            self.pop.flat, ForceField(self.pop, TABLE_LAW), self.cfg
        )
        self.assertAlmostEqual(0.02617, levels.tau1, delta=0.02617 * 0.05)
        self.assertAlmostEqual(levels.tau1 / 14, levels.tau0, delta=1e-15)
        # both daughters are fast, so the macro step collapses to tau0
        self.assertEqual(2, levels.fast_cells.size)
        self.assertEqual(levels.tau0, decision.dt)
        self.assertTrue(levels.single_level)

    def test_analytic_bound(self) -> None:
        self.assertAlmostEqual(POST_DIVISION_DT, post_division_dt_bound(TABLE_LAW), delta=1e-5)
        oblique = post_division_dt_bound(TABLE_LAW, 0.3, (1.0, 1.0, 1.0))
        self.assertAlmostEqual(POST_DIVISION_DT * 3**0.25, oblique, delta=1e-4)


class StepRuleTests(unittest.TestCase):
    def test_near_equilibrium_is_stability_bound(self) -> None:
        pop = pair_at(0.999)
        _, decision = srfes_step(pop.flat, ForceField(pop, TABLE_LAW), SolverConfig())
        self.assertIs(Constraint.STABILITY, decision.constraint)
        self.assertAlmostEqual(1 / 1.425, decision.dt, delta=1e-2)

    def test_truncation_to_next_stop(self) -> None:
        pop = pair_at(0.3)
        _, decision = srfe_step(pop.flat, ForceField(pop, TABLE_LAW), SolverConfig(), max_dt=0.001)
        self.assertEqual(0.001, decision.dt)
        self.assertIs(Constraint.EVENT_TRUNCATION, decision.constraint)

    def test_steady_state_is_exact_fixed_point(self) -> None:
        pop = pair_at(1.0)
        cfg = SolverConfig()
        x = pop.flat
        for step in (srfe_step, srfes_step, mrfe_macro_step, srbe_step):
            result = step(x, ForceField(pop, TABLE_LAW), cfg)
            self.assertTrue(np.array_equal(x, result[0]), step.__name__)

    def test_zero_force_uses_cap(self) -> None:
        pop = pair_at(1.0)
        _, decision = srfe_step(pop.flat, ForceField(pop, TABLE_LAW), SolverConfig(dt_max_cap=3.0))
        self.assertEqual(3.0, decision.dt)
        self.assertIs(Constraint.CAP, decision.constraint)

    def test_displacement_bound(self) -> None:
        self.assertAlmostEqual(0.0025, displacement_bound_dt(np.array([1.0, -2.0]), 0.005), delta=1e-15)
        self.assertEqual(7.0, displacement_bound_dt(np.zeros(3), 0.005, cap=7.0))

    def test_fixed_step(self) -> None:
        pop = pair_at(0.3)
        field = ForceField(pop, TABLE_LAW)
        x_new = fixed_step(pop.flat, field, 0.001)
        assert_allclose(x_new, pop.flat + 0.001 * np.array([5.7456, 0, 0, -5.7456, 0, 0]), atol=1e-12)
        with self.assertRaises(ValueError):
            fixed_step(pop.flat, field, -1.0)

    def test_fixed_step_commutes_with_rigid_motion(self) -> None:
        pop = random_cluster(15, seed=13, box=2.2)
        gen = np.random.default_rng(8)
        q, _ = np.linalg.qr(gen.standard_normal((3, 3)))
        shift = gen.uniform(-3.0, 3.0, size=3)
        moved = pop.with_free_positions(pop.free_positions @ q.T + shift)
        stepped = fixed_step(pop.flat, ForceField(pop, TABLE_LAW), 0.01).reshape(-1, 3)
        moved_stepped = fixed_step(moved.flat, ForceField(moved, TABLE_LAW), 0.01).reshape(-1, 3)
        assert_allclose(moved_stepped, stepped @ q.T + shift, atol=1e-10, rtol=0.0)

    def test_local_error_estimate_is_bounded(self) -> None:
        cfg = SolverConfig(epsilon_acc=0.005)
        for method in (Method.SRFE, Method.SRFES):
            record = integrate(pair_at(0.3), TABLE_LAW, cfg, method, 0.0, 2.0)
            for row in record.steps:
                if row.constraint is Constraint.ACCURACY:
                    self.assertLessEqual(0.5 * row.dt**2 * row.af_norm, 1.05 * cfg.epsilon_acc)


class IntegrateTests(unittest.TestCase):
    def test_lands_on_end_time_and_events(self) -> None:
        events = [DivisionEvent(0.5, target_id=0, direction=(0.0, 1.0, 0.0)), DivisionEvent(1.25)]
        record = integrate(pair_at(1.0), TABLE_LAW, SolverConfig(), Method.SRFES, 0.0, 2.0, events)
        assert_steps_land(record.times, [0.5, 1.25, 2.0])
        self.assertEqual(2.0, record.times[-1])
        self.assertEqual(2, len(record.event_log))
        self.assertEqual(4, record.final_snapshot.positions.shape[0])
        self.assertEqual(2, record.final_snapshot.segment)
        self.assertEqual([0, 1, 2, 3], sorted(record.final_snapshot.cell_ids.tolist()))

    def test_division_at_start_is_applied_first(self) -> None:
        event = DivisionEvent(0.0, target_id=1, direction=(1.0, 0.0, 0.0))
        record = integrate(pair_at(5.0), TABLE_LAW, SolverConfig(), Method.SRFE, 0.0, 0.1, [event])
        self.assertEqual(3, record.snapshots[0].positions.shape[0])
        self.assertAlmostEqual(post_division_dt_bound(TABLE_LAW), record.dts[0], delta=1e-4)

    def test_empty_interval(self) -> None:
        record = integrate(pair_at(0.3), TABLE_LAW, SolverConfig(), Method.SRFE, 1.0, 1.0)
        self.assertEqual(0, record.n_steps)
        self.assertEqual(1, len(record.snapshots))

    def test_fixed_step_count(self) -> None:
        cfg = SolverConfig(fixed_dt=0.01)
        record = integrate(pair_at(0.3), TABLE_LAW, cfg, Method.FIXED, 0.0, 0.255)
        self.assertEqual(math.ceil(0.255 / 0.01), record.n_steps)
        self.assertEqual(record.n_steps, record.f_eval_count)
        self.assertEqual(0.255, record.times[-1])

    def test_fixed_requires_step(self) -> None:
        with self.assertRaises(ValueError):
            integrate(pair_at(0.3), TABLE_LAW, SolverConfig(), Method.FIXED, 0.0, 1.0)

    def test_rejects_bad_events(self) -> None:
        with self.assertRaises(ValueError):
            integrate(
                pair_at(0.3), TABLE_LAW, SolverConfig(), Method.SRFE, 0.0, 1.0,
                [DivisionEvent(0.8), DivisionEvent(0.4)],
            )
        with self.assertRaises(ValueError):
            integrate(pair_at(0.3), TABLE_LAW, SolverConfig(), Method.SRFE, 0.0, 1.0, [DivisionEvent(2.0)])

    def test_step_size_underflow(self) -> None:
        cfg = SolverConfig(min_dt=0.01)
        with self.assertRaises(StepSizeUnderflowError) as ctx:
            integrate(pair_at(0.3), TABLE_LAW, cfg, Method.SRFE, 0.0, 1.0)
        self.assertEqual("srfe", ctx.exception.method)
        self.assertEqual(0.0, ctx.exception.t)

    def test_counters_match_calls(self) -> None:
        events = [DivisionEvent(0.2, target_id=0)]
        for method in (Method.SRFE, Method.MRFE, Method.SRBE):
            CountingForceField.reset()
            record = integrate(
                pair_at(0.3), TABLE_LAW, SolverConfig(), method, 0.0, 0.4, events,
                field_factory=CountingForceField,
            )
            f_total, a_total = CountingForceField.totals([2, 3])
            self.assertAlmostEqual(f_total, record.f_eval_count, delta=1e-9)
            self.assertEqual(a_total, record.a_eval_count)

    def test_center_of_gravity_is_conserved(self) -> None:
        pops = [pair_at(0.3), random_cluster(12, seed=9, box=2.0)]
        for pop in pops:
            start = center_of_gravity(pop)
            for method in (Method.SRFE, Method.SRFES, Method.DISPLACEMENT):
                record = integrate(pop, TABLE_LAW, SolverConfig(), method, 0.0, 1.0)
                end = record.final_snapshot.positions.mean(axis=0)
                assert_allclose(end, start, atol=1e-10, rtol=0.0)
        start = center_of_gravity(pops[0])
        record = integrate(pops[0], TABLE_LAW, SolverConfig(), Method.MRFE, 0.0, 1.0)
        assert_allclose(record.final_snapshot.positions.mean(axis=0), start, atol=1e-10, rtol=0.0)

    def test_two_level_mrfe_drift_is_of_tolerance_order(self) -> None:
        scenario = division_in_spheroid(3, 0)
        cfg = SolverConfig()
        start = center_of_gravity(scenario.population)
        record = integrate(scenario.population, scenario.law, cfg, Method.MRFE, 0.0, 1.0)
        self.assertTrue(any(row.n_fast_equations > 0 for row in record.steps))
        drift = record.final_snapshot.positions.mean(axis=0) - start
        self.assertLess(float(np.abs(drift).max()), cfg.epsilon_acc)

    def test_mrfe_with_unit_ratio_equals_srfes(self) -> None:
        cfg = SolverConfig(m=1)
        a = integrate(pair_at(0.3), TABLE_LAW, cfg, Method.MRFE, 0.0, 0.5)
        b = integrate(pair_at(0.3), TABLE_LAW, cfg, Method.SRFES, 0.0, 0.5)
        self.assertEqual(b.dts, a.dts)
        self.assertTrue(np.array_equal(b.final_snapshot.positions, a.final_snapshot.positions))

    def test_snapshot_stride(self) -> None:
        cfg = SolverConfig(fixed_dt=0.01, snapshot_stride=5)
        record = integrate(pair_at(0.3), TABLE_LAW, cfg, Method.FIXED, 0.0, 0.2)
        self.assertEqual([0.0, 0.05, 0.1, 0.15, 0.2], [round(s.t, 12) for s in record.snapshots])

    def test_records_potential_and_newton_stats(self) -> None:
        cfg = SolverConfig(record_potential=True)
        record = integrate(pair_at(0.3), TABLE_LAW, cfg, Method.SRBE, 0.0, 0.5)
        self.assertAlmostEqual(1.3429675, record.initial_potential, delta=1e-9)
        potentials = [row.potential for row in record.steps]
        self.assertLess(potentials[-1], potentials[0])
        self.assertTrue(all(row.newton_iters >= 1 for row in record.steps))
        self.assertTrue(all(math.isfinite(row.shift_product) for row in record.steps))


if __name__ == "__main__":
    unittest.main()
