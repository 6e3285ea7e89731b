"""
Command-line front end.

    ofoflex run      --scenario case1.json [--alpha F] [--beta F] [--max-iter N] [--seed N] --out DIR
    ofoflex sweep    --scenario case2.json [--alphas LIST] [--betas LIST] [--workers N] --out DIR
    ofoflex validate --network cigre_mv.json | --scenario case1.json

Exit status is 0 whenever the tool ran to completion, including runs whose
controller diverged; that outcome is reported in summary.txt.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grid import GridError, load_network
from .fixtures import FIXTURES
from .hierarchy import write_interfaces_csv
from .powerflow import PowerFlowDivergence, solve_power_flow
from .qp import ParameterError
from .scenarios import (
    DEFAULT_ALPHAS,
    DEFAULT_BETAS,
    Scenario,
    ScenarioError,
    Trajectory,
    detect_settled,
    load_scenario,
    parameter_sweep,
    run_scenario,
)


class CliError(Exception):
    """User-facing failure; reported on stderr with a nonzero exit."""


def _fmt(x: float) -> str:
    if x is None:
        return ""
    if np.isnan(x):
        return "nan"
    return f"{x:.12g}"


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must be non-empty")
    for v in vals:
        if not 0.0 < v <= 1.0:
            raise argparse.ArgumentTypeError(f"values must lie in (0, 1], got {v}")
    return vals


# -- writers -----------------------------------------------------------------


def trajectory_header(traj: Trajectory, layer: str) -> list[str]:
    n_bus = len(traj.vm[layer][0]) if traj.vm[layer] else 0
    return (
        ["k", "phi", "sigma_norm", "qp_status", "violation_count", "pcc_p", "pcc_q"]
        + [f"vm_{b}" for b in range(n_bus)]
        + list(traj.input_labels[layer])
    )


def write_trajectory_csv(traj: Trajectory, path: Path, layer: Optional[str] = None) -> None:
    layer = layer or traj.root
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(traj, layer))
        for rec, vm, flow in zip(traj.records[layer], traj.vm[layer], traj.pcc_flow[layer]):
            w.writerow(
                [rec.k, _fmt(rec.phi), _fmt(rec.sigma_norm), rec.qp_status, rec.violations]
                + [_fmt(flow[0]), _fmt(flow[1])]
                + [_fmt(v) for v in vm]
                + [_fmt(v) for v in rec.u]
            )


def write_summary(traj: Trajectory, scenario: Scenario, path: Path) -> None:
    recs = traj.root_records
    settled = None
    if scenario.is_tracking:
        settled = detect_settled(traj, scenario.reference, scenario.settle_eps, scenario.settle_hold)
    lines = [
        f"scenario: {scenario.name}",
        f"alpha: {_fmt(scenario.alpha)}",
        f"beta: {_fmt(scenario.beta)}",
        f"iterations: {len(traj)}",
        f"converged: {str(traj.converged).lower()}",
        f"failure: {traj.failure or ''}",
        f"final_phi: {_fmt(recs[-1].phi) if recs else ''}",
        f"final_violations: {recs[-1].violations if recs else ''}",
        f"total_violations: {sum(r.violations for r in recs)}",
        f"settled_at: {'' if settled is None else settled}",
    ]
    for name in sorted(traj.records):
        if name != traj.root:
            lines.append(f"layer {name} total_violations: {sum(r.violations for r in traj.records[name])}")
    path.write_text("\n".join(lines) + "\n")


def write_sweep_csv(result, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "settled_at", "converged"])
        for a, b, s, c in result.rows():
            w.writerow([_fmt(a), _fmt(b), "" if s is None else s, str(c).lower()])


# -- commands ----------------------------------------------------------------


def _prepare_out(path: Optional[str]) -> Path:
    out = Path(path or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _scenario_with_overrides(args) -> Scenario:
    scenario = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "alpha", None) is not None:
        changes["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        changes["beta"] = args.beta
    if getattr(args, "max_iter", None) is not None:
        changes["max_iterations"] = args.max_iter
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    try:
        return scenario.with_parameters(**changes) if changes else scenario
    except (ScenarioError, ParameterError) as exc:
        raise CliError(f"{args.scenario}: {exc}") from None


def cmd_run(args) -> int:
    scenario = _scenario_with_overrides(args)
    out = _prepare_out(args.out)
    traj = run_scenario(scenario)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_summary(traj, scenario, out / "summary.txt")
    if len(traj.records) > 1:
        write_interfaces_csv(traj.messages, out / "interfaces.csv")
        for name in sorted(traj.records):
            if name != traj.root:
                write_trajectory_csv(traj, out / f"trajectory_{name}.csv", layer=name)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    scenario = _scenario_with_overrides(args)
    if not scenario.is_tracking:
        raise CliError(f"{args.scenario}: sweeps need a tracking scenario")
    out = _prepare_out(args.out)
    result = parameter_sweep(
        scenario, args.alphas or DEFAULT_ALPHAS, args.betas or DEFAULT_BETAS, workers=args.workers
    )
    write_sweep_csv(result, out / "sweep.csv")
    n_conv = sum(1 for *_, c in result.rows() if c)
    print(f"{len(result.cells)} cells, {n_conv} converged -> {out / 'sweep.csv'}")
    return 0


def cmd_validate(args) -> int:
    if args.network is None and args.scenario is None:
        raise CliError("validate needs --network or --scenario")
    if args.scenario is not None:
        scenario = load_scenario(args.scenario)
        names = ", ".join(ls.name for ls in scenario.layers)
        print(f"scenario {scenario.name}: {len(scenario.layers)} layer(s) [{names}], "
              f"{len(scenario.events)} event(s), alpha={_fmt(scenario.alpha)}, beta={_fmt(scenario.beta)}")
        nets = [(ls.name, ls.network) for ls in scenario.layers]
    else:
        if args.network in FIXTURES:
            net = FIXTURES[args.network]()
        else:
            path = Path(args.network)
            if not path.exists():
                raise CliError(f"network file {path} not found")
            net = load_network(path)
        nets = [(net.name, net)]
    for name, net in nets:
        try:
            sol = solve_power_flow(net, net.nominal_inputs())
        except PowerFlowDivergence as exc:
            print(f"{name}: power flow diverged (residual {_fmt(exc.residual)})")
            continue
        vm = sol.vm
        print(
            f"{name}: {net.n_bus} buses, {len(net.branches)} branches, {net.n_actuators} actuators; "
            f"residual {sol.mismatch_norm:.3e} pu after {sol.iterations} iterations; "
            f"vm range [{vm.min():.6f}, {vm.max():.6f}] pu"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofoflex", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    run.add_argument("--scenario", required=True, metavar="PATH")
    run.add_argument("--alpha", type=_unit_interval)
    run.add_argument("--beta", type=_unit_interval)
    run.add_argument("--max-iter", type=_positive_int)
    run.add_argument("--seed", type=_nonneg_int)
    run.add_argument("--out", metavar="DIR", default="out")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="(alpha, beta) grid on a tracking scenario")
    sweep.add_argument("--scenario", required=True, metavar="PATH")
    sweep.add_argument("--alphas", type=_float_list, help="comma-separated, default 0.009..0.09")
    sweep.add_argument("--betas", type=_float_list, help="comma-separated, default 0.4..1.0")
    sweep.add_argument("--max-iter", type=_positive_int)
    sweep.add_argument("--seed", type=_nonneg_int)
    sweep.add_argument("--workers", type=_positive_int, default=1)
    sweep.add_argument("--out", metavar="DIR", default="out")
    sweep.set_defaults(func=cmd_sweep)

    val = sub.add_parser("validate", help="power flow at the nominal point")
    val.add_argument("--network", metavar="PATH")
    val.add_argument("--scenario", metavar="PATH")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ScenarioError, GridError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
