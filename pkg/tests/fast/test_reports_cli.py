import csv
import io
import json
import math
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np

from harness import CostRow, sweep_m
from main import cli_main
from reports import (
    DT_TRACE_COLUMNS,
    config_hash,
    format_value,
    write_cost_csv,
    write_dt_trace_csv,
    write_manifest,
    write_sweep_m_csv,
    write_trajectory_csv,
)
from scenarios import two_cell_config
from steppers import Constraint, Method, SolverConfig, integrate
from tests._seed import TABLE_LAW, pair_at

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def _read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def _quiet_cli(*argv: str) -> int:
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return cli_main(list(argv))


class FormatValueTests(unittest.TestCase):
    def test_formats(self) -> None:
        self.assertEqual("0.10000000000000001", format_value(0.1))
        self.assertEqual(0.1, float(format_value(0.1)))
        self.assertEqual("nan", format_value(math.nan))
        self.assertEqual("inf", format_value(math.inf))
        self.assertEqual("true", format_value(True))
        self.assertEqual("false", format_value(np.bool_(False)))
        self.assertEqual("7", format_value(np.int64(7)))
        self.assertEqual("stability", format_value(Constraint.STABILITY))
        self.assertEqual("srbe", format_value("srbe"))
        self.assertEqual("", format_value(None))


class WriterTests(unittest.TestCase):
    def test_dt_trace_and_trajectory(self) -> None:
        record = integrate(pair_at(0.3), TABLE_LAW, SolverConfig(), Method.SRFES, 0.0, 0.05)
        with tempfile.TemporaryDirectory() as tmp:
            trace = _read_csv(write_dt_trace_csv(Path(tmp) / "dt_trace.csv", record))
            with (Path(tmp) / "dt_trace.csv").open(encoding="utf-8") as handle:
                header = handle.readline().strip().split(",")
            traj = _read_csv(write_trajectory_csv(Path(tmp) / "out" / "trajectory.csv", record))
        self.assertEqual(list(DT_TRACE_COLUMNS), header)
        self.assertEqual(["t", "dt", "constraint", "n_fast_equations"], header[:4])
        self.assertEqual(record.n_steps, len(trace))
        self.assertEqual(record.dts[0], float(trace[0]["dt"]))
        self.assertEqual("accuracy", trace[0]["constraint"])
        self.assertEqual("event_truncation", trace[-1]["constraint"])
        self.assertEqual(2 * len(record.snapshots), len(traj))
        self.assertEqual(["t", "cell_id", "x", "y", "z", "segment"], list(traj[0]))
        self.assertEqual(0.15, float(traj[0]["x"]))

    def test_cost_and_sweep_m(self) -> None:
        rows = [
            CostRow("fixed", 10.0, 0, 10, 0.5, 1.0, 1.0),
            CostRow("mrfe", 3.5, 2, 2, 0.25, 0.5, 0.35, 1.2),
            CostRow("srbe", 4.0, 3, 2, 0.2, 0.4, 0.4, be_preferred=False),
        ]
        result = sweep_m(two_cell_config(), [1, 128])
        with tempfile.TemporaryDirectory() as tmp:
            cost = _read_csv(write_cost_csv(Path(tmp) / "cost.csv", rows))
            swept = _read_csv(write_sweep_m_csv(Path(tmp) / "sweep_m.csv", result))
        self.assertEqual("nan", cost[0]["work_estimate"])
        self.assertEqual("0.34999999999999998", cost[1]["rel_f_evals"])
        self.assertEqual(["", "", "false"], [row["be_preferred"] for row in cost])
        self.assertEqual(["false", "true"], [row["optimal"] for row in swept])
        self.assertEqual(["accuracy", "stability"], [row["constraint"] for row in swept])

    def test_manifest(self) -> None:
        config = {"seed": 3, "method": "srfe", "solver": {"m": 14}}
        with tempfile.TemporaryDirectory() as tmp:
            path = write_manifest(
                Path(tmp) / "manifest.json",
                config,
                outputs=[Path(tmp) / "b.csv", Path(tmp) / "a.csv"],
                extra={"steps": np.int64(12)},
            )
            manifest = json.loads(path.read_text(encoding="utf-8"))
        self.assertEqual(config_hash(config), manifest["config_hash"])
        self.assertEqual(3, manifest["seed"])
        self.assertEqual(["a.csv", "b.csv"], manifest["outputs"])
        self.assertEqual(12, manifest["steps"])
        self.assertIn("numpy", manifest["versions"])

    def test_config_hash_ignores_key_order(self) -> None:
        a = {"seed": 1, "solver": {"m": 14, "epsilon_acc": 0.005}}
        b = {"solver": {"epsilon_acc": 0.005, "m": 14}, "seed": 1}
        self.assertEqual(config_hash(a), config_hash(b))
        self.assertNotEqual(config_hash(a), config_hash({**a, "seed": 2}))
        self.assertEqual(64, len(config_hash(a)))


class CliTests(unittest.TestCase):
    def test_simulate_writes_outputs(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            code = _quiet_cli(
                "simulate", str(CONFIG_DIR / "two_cells.json"),
                "--method", "srfes", "--out", tmp, "--log-level", "ERROR",
            )
            self.assertEqual(0, code)
            trace = _read_csv(Path(tmp) / "dt_trace.csv")
            manifest = json.loads((Path(tmp) / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(6.0, float(trace[-1]["t"]))
        self.assertAlmostEqual(0.006996, float(trace[0]["dt"]), delta=1e-4)
        self.assertEqual("srfes", manifest["method"])
        self.assertEqual(0, manifest["seed"])
        self.assertEqual(["dt_trace.csv", "trajectory.csv"], manifest["outputs"])

    def test_runs_are_reproducible(self) -> None:
        outputs = []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                code = _quiet_cli(
                    "simulate", str(CONFIG_DIR / "two_cells.json"), "--method", "mrfe",
                    "--out", tmp, "--log-level", "ERROR",
                )
                self.assertEqual(0, code)
                outputs.append(
                    tuple((Path(tmp) / name).read_bytes() for name in ("dt_trace.csv", "trajectory.csv"))
                )
        self.assertEqual(outputs[0], outputs[1])

    def test_sweep_m_command(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            code = _quiet_cli(
                "sweep-m", str(CONFIG_DIR / "two_cells.json"),
                "--m-values", "1,14,128", "--out", tmp, "--log-level", "ERROR",
            )
            self.assertEqual(0, code)
            rows = _read_csv(Path(tmp) / "sweep_m.csv")
            manifest = json.loads((Path(tmp) / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(["1", "14", "128"], [row["m"] for row in rows])
        self.assertEqual(128, manifest["optimal_m"])

    def test_exit_codes(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            scenario = str(CONFIG_DIR / "two_cells.json")
            self.assertEqual(0, _quiet_cli("--help"))
            self.assertEqual(2, _quiet_cli("simulate", scenario, "--bogus"))
            self.assertEqual(2, _quiet_cli("simulate", scenario, "--method", "rk4"))
            self.assertEqual(2, _quiet_cli("simulate", str(Path(tmp) / "missing.json"), "--out", tmp))
            self.assertEqual(2, _quiet_cli("simulate", scenario, "--threads", "0", "--out", tmp))
            self.assertEqual(
                2,
                _quiet_cli("simulate", scenario, "--method", "fixed", "--out", tmp, "--log-level", "ERROR"),
            )
            self.assertEqual(2, _quiet_cli("convergence", scenario, "--eps-list", "0.01,abc"))


if __name__ == "__main__":
    unittest.main()
