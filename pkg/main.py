"""Command-line entry point for simulations and the timing experiments."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import asdict, replace
from pathlib import Path

from config import CBM_EPSILON, CBM_LOG_LEVEL, CBM_MRFE_RATIO, CBM_OUTPUT_DIR, CBM_THREADS
from harness import (
    ExperimentConfig,
    convergence_study,
    cost_benchmark,
    run_method,
    sweep_m,
    sweep_n,
)
from reports import (
    write_cost_csv,
    write_dt_trace_csv,
    write_errors_csv,
    write_manifest,
    write_sweep_m_csv,
    write_sweep_n_csv,
    write_trajectory_csv,
)
from scenarios import Scenario, load_scenario, with_seed
from steppers import Method, SolverConfig

logger = logging.getLogger(__name__)

METHOD_NAMES = [m.value for m in Method]


def _list_of(kind: Callable[[str], object]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        try:
            return [kind(item) for item in text.split(",") if item.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}: {exc}") from exc

    return parse


def _method_list(text: str) -> list[str]:
    names = [item.strip() for item in text.split(",") if item.strip()]
    unknown = [name for name in names if name not in METHOD_NAMES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {unknown}; choose from {', '.join(METHOD_NAMES)}"
        )
    return names


def _parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Override the scenario seed.")
    common.add_argument(
        "--log-level",
        default=CBM_LOG_LEVEL,
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: CBM_LOG_LEVEL).",
    )
    common.add_argument(
        "--threads",
        type=int,
        default=CBM_THREADS,
        help="Worker processes for sweeps (default: CBM_THREADS).",
    )
    common.add_argument(
        "--out", type=Path, default=Path(CBM_OUTPUT_DIR), help="Output directory."
    )
    common.add_argument("--m", type=int, default=CBM_MRFE_RATIO, help="MRFE step ratio.")

    parser = argparse.ArgumentParser(
        prog="cbm", description="Adaptive time stepping for center-based cell models."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="Run one method.")
    simulate.add_argument("scenario", type=Path)
    simulate.add_argument("--method", choices=METHOD_NAMES, default=Method.SRFE.value)
    simulate.add_argument("--eps", type=float, default=CBM_EPSILON)
    simulate.add_argument("--fixed-dt", type=float, help="Step size of --method fixed.")
    simulate.add_argument("--stride", type=int, default=1, help="Snapshot stride.")
    simulate.add_argument("--record-potential", action="store_true")

    convergence = sub.add_parser(
        "convergence", parents=[common], help="Error against a reference vs eps."
    )
    convergence.add_argument("scenario", type=Path)
    convergence.add_argument(
        "--methods", type=_method_list, default=["srfe", "srfes", "srbe"]
    )
    convergence.add_argument(
        "--eps-list", type=_list_of(float), default=[0.04, 0.02, 0.01, 0.005, 0.0025]
    )
    convergence.add_argument("--dt-ref", type=float)
    convergence.add_argument("--T", type=float, dest="end_time", help="Override end time.")
    convergence.add_argument(
        "--window", type=float, nargs=2, metavar=("T_A", "T_B"), help="Error window."
    )

    benchmark = sub.add_parser("benchmark", parents=[common], help="Cost table.")
    benchmark.add_argument("scenario", type=Path)
    benchmark.add_argument(
        "--methods", type=_method_list, default=["srfe", "srfes", "mrfe", "srbe"]
    )
    benchmark.add_argument("--reps", type=int, default=1)
    benchmark.add_argument("--eps", type=float, default=CBM_EPSILON)
    benchmark.add_argument("--fixed-dt", type=float)

    sweep_m_parser = sub.add_parser(
        "sweep-m", parents=[common], help="Initial MRFE macro step vs m."
    )
    sweep_m_parser.add_argument("scenario", type=Path)
    sweep_m_parser.add_argument(
        "--m-values", type=_list_of(int), default=[1, 2, 4, 8, 14, 20, 32, 48, 64, 96, 128]
    )
    sweep_m_parser.add_argument("--eps", type=float, default=CBM_EPSILON)
    sweep_m_parser.add_argument(
        "--traces", action="store_true", help="Also integrate to T for every m."
    )

    sweep_n_parser = sub.add_parser(
        "sweep-n", parents=[common], help="Initial step size vs spheroid size."
    )
    sweep_n_parser.add_argument(
        "--n-values", type=_list_of(int), default=list(range(2, 11))
    )
    sweep_n_parser.add_argument("--seeds", type=_list_of(int), default=[0, 1, 2, 3, 4])
    sweep_n_parser.add_argument(
        "--methods", type=_method_list, default=["srfe", "srfes", "mrfe", "srbe"]
    )
    sweep_n_parser.add_argument("--eps", type=float, default=CBM_EPSILON)
    sweep_n_parser.add_argument(
        "--run-to-end", action="store_true", help="Also report the late step size."
    )
    return parser.parse_args(argv)


def _scenario(args: argparse.Namespace) -> Scenario:
    scenario = load_scenario(args.scenario)
    return with_seed(scenario, args.seed) if args.seed is not None else scenario


def _run_simulate(args: argparse.Namespace) -> list[Path]:
    scenario = _scenario(args)
    cfg = SolverConfig(
        epsilon_acc=args.eps,
        m=args.m,
        fixed_dt=args.fixed_dt,
        snapshot_stride=args.stride,
        record_potential=args.record_potential,
    )
    record = run_method(scenario, args.method, cfg)
    experiment = ExperimentConfig(scenario=scenario, method=Method(args.method), solver=cfg)
    outputs = [
        write_dt_trace_csv(args.out / "dt_trace.csv", record),
        write_trajectory_csv(args.out / "trajectory.csv", record),
    ]
    write_manifest(
        args.out / "manifest.json",
        experiment.to_manifest(),
        outputs=outputs,
        extra={
            "event_log": record.event_log,
            "initial_events": [asdict(e) for e in scenario.initial_events],
            "steps": record.n_steps,
            "f_evals": record.f_eval_count,
            "a_evals": record.a_eval_count,
            "neighbor_rebuilds": record.neighbor_rebuilds,
        },
    )
    return outputs


def _run_convergence(args: argparse.Namespace) -> list[Path]:
    scenario = _scenario(args)
    if args.end_time is not None:
        scenario = replace(scenario, T=args.end_time)
    cfg = SolverConfig(m=args.m)
    experiment = ExperimentConfig(
        scenario=scenario,
        solver=cfg,
        dt_ref=args.dt_ref,
        eps_list=tuple(args.eps_list),
        threads=args.threads,
    )
    report = convergence_study(
        scenario,
        args.methods,
        args.eps_list,
        experiment.reference_dt(),
        cfg=cfg,
        window=tuple(args.window) if args.window else None,
        threads=args.threads,
    )
    outputs = [write_errors_csv(args.out / "errors.csv", report)]
    write_manifest(
        args.out / "manifest.json",
        {**experiment.to_manifest(), "method": args.methods, "T": scenario.T},
        outputs=outputs,
        extra={"slopes": report.slopes},
    )
    return outputs


def _run_benchmark(args: argparse.Namespace) -> list[Path]:
    scenario = _scenario(args)
    cfg = SolverConfig(epsilon_acc=args.eps, m=args.m)
    experiment = ExperimentConfig(
        scenario=scenario, solver=cfg, reps=args.reps, threads=args.threads
    )
    rows = cost_benchmark(
        scenario,
        args.methods,
        args.reps,
        cfg=cfg,
        fixed_dt=args.fixed_dt,
        threads=args.threads,
    )
    outputs = [write_cost_csv(args.out / "cost.csv", rows)]
    write_manifest(
        args.out / "manifest.json",
        {**experiment.to_manifest(), "method": args.methods, "fixed_dt": args.fixed_dt},
        outputs=outputs,
    )
    return outputs


def _run_sweep_m(args: argparse.Namespace) -> list[Path]:
    scenario = _scenario(args)
    cfg = SolverConfig(epsilon_acc=args.eps)
    result = sweep_m(
        scenario, args.m_values, cfg, with_traces=args.traces, threads=args.threads
    )
    outputs = [write_sweep_m_csv(args.out / "sweep_m.csv", result)]
    for m, record in result.traces.items():
        outputs.append(write_dt_trace_csv(args.out / f"dt_trace_m{m}.csv", record))
    experiment = ExperimentConfig(scenario=scenario, method=Method.MRFE, solver=cfg)
    write_manifest(
        args.out / "manifest.json",
        {**experiment.to_manifest(), "m_values": args.m_values},
        outputs=outputs,
        extra={"optimal_m": result.optimal_m},
    )
    return outputs


def _run_sweep_n(args: argparse.Namespace) -> list[Path]:
    cfg = SolverConfig(epsilon_acc=args.eps, m=args.m)
    rows = sweep_n(
        args.n_values,
        args.methods,
        args.seeds,
        cfg,
        run_to_end=args.run_to_end,
        threads=args.threads,
    )
    outputs = [write_sweep_n_csv(args.out / "sweep_n.csv", rows)]
    write_manifest(
        args.out / "manifest.json",
        {
            "command": "sweep-n",
            "n_values": args.n_values,
            "seeds": args.seeds,
            "method": args.methods,
            "epsilon_acc": cfg.epsilon_acc,
            "m": cfg.m,
        },
        outputs=outputs,
    )
    return outputs


COMMANDS: dict[str, Callable[[argparse.Namespace], list[Path]]] = {
    "simulate": _run_simulate,
    "convergence": _run_convergence,
    "benchmark": _run_benchmark,
    "sweep-m": _run_sweep_m,
    "sweep-n": _run_sweep_n,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        outputs = COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logger.info("%s finished: %s file(s) in %s", args.command, len(outputs), args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(cli_main())
