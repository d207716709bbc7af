"""Run the convergence, sweep and cost experiments at desk scale."""

import argparse
import logging
from pathlib import Path

from config import CBM_OUTPUT_DIR, CBM_THREADS
from harness import convergence_study, cost_benchmark, sweep_m, sweep_n
from reports import (
    write_cost_csv,
    write_errors_csv,
    write_manifest,
    write_sweep_m_csv,
    write_sweep_n_csv,
)
from scenarios import division_in_spheroid, linear_growth, two_cell_config
from steppers import SolverConfig

logger = logging.getLogger(__name__)

EPS_LIST = [0.04, 0.02, 0.01, 0.005, 0.0025]
M_VALUES = [1, 2, 4, 8, 14, 20, 32, 48, 64, 96, 128]
SWEEP_SEEDS = [0, 1, 2, 3, 4]
DIVISION_INTERVALS = [0.5, 1.0, 5.0]


def run_convergence(out: Path, threads: int) -> None:
    scenario = two_cell_config(T=3.0)
    report = convergence_study(
        scenario, ["srfe", "srfes", "srbe"], EPS_LIST, 5e-5, threads=threads
    )
    path = write_errors_csv(out / "errors.csv", report)
    write_manifest(
        out / "manifest.json",
        {"scenario": scenario.name, "T": scenario.T, "eps_list": EPS_LIST, "dt_ref": 5e-5},
        outputs=[path],
        extra={"slopes": report.slopes},
    )


def run_sweeps(out: Path, n_values: list[int], threads: int) -> None:
    scenario = division_in_spheroid(6, seed=1)
    result = sweep_m(scenario, M_VALUES, SolverConfig(), threads=threads)
    rows = sweep_n(
        n_values,
        ["srfe", "srfes", "mrfe", "srbe"],
        SWEEP_SEEDS,
        SolverConfig(),
        run_to_end=True,
        threads=threads,
    )
    outputs = [
        write_sweep_m_csv(out / "sweep_m.csv", result),
        write_sweep_n_csv(out / "sweep_n.csv", rows),
    ]
    write_manifest(
        out / "manifest.json",
        {"scenario": scenario.name, "seed": scenario.seed, "m_values": M_VALUES, "n_values": n_values},
        outputs=outputs,
        extra={"optimal_m": result.optimal_m},
    )


def run_benchmarks(out: Path, reps: int, threads: int) -> None:
    for dt_div in DIVISION_INTERVALS:
        scenario = linear_growth(7, 5, dt_div, seed=2)
        rows = cost_benchmark(
            scenario, ["srfe", "srfes", "mrfe", "srbe"], reps, threads=threads
        )
        target = out / f"dt_div_{dt_div:g}"
        path = write_cost_csv(target / "cost.csv", rows)
        write_manifest(
            target / "manifest.json",
            {"scenario": scenario.name, "seed": scenario.seed, "dt_div": dt_div, "reps": reps},
            outputs=[path],
        )


def main() -> None:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    parser = argparse.ArgumentParser(description="Reproduce every experiment table.")
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(CBM_OUTPUT_DIR) / "reproduce",
        help="Output directory (default: CBM_OUTPUT_DIR/reproduce).",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=CBM_THREADS,
        help="Worker processes (default: CBM_THREADS).",
    )
    parser.add_argument("--reps", type=int, default=1, help="Benchmark repetitions.")
    parser.add_argument(
        "--max-n",
        type=int,
        default=10,
        help="Largest spheroid n_per_dim in the size sweep (default: 10).",
    )
    parser.add_argument(
        "--skip",
        action="append",
        choices=["convergence", "sweeps", "benchmark"],
        default=[],
        help="Experiment to leave out; may be repeated.",
    )
    args = parser.parse_args()
    if args.threads < 1 or args.reps < 1 or args.max_n < 2:
        parser.error("--threads and --reps must be >= 1, --max-n >= 2")

    if "convergence" not in args.skip:
        logger.info("Convergence study -> %s", args.out / "convergence")
        run_convergence(args.out / "convergence", args.threads)
    if "sweeps" not in args.skip:
        logger.info("Sweeps -> %s", args.out / "sweeps")
        run_sweeps(args.out / "sweeps", list(range(2, args.max_n + 1)), args.threads)
    if "benchmark" not in args.skip:
        logger.info("Cost benchmark -> %s", args.out / "benchmark")
        run_benchmarks(args.out / "benchmark", args.reps, args.threads)
    logger.info("All requested experiments written to %s", args.out)


if __name__ == "__main__":
    main()
