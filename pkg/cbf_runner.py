#!/usr/bin/env python3
"""
Resilient CBF Runner
Command-line entry point: run scenarios, verify traces, report margins, sweep
seeds in parallel and launch the trace dashboard.

Exit codes: 0 success, 2 safety violation found by verification, 1 error.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import psutil

from cbf_errors import CbfError
from invariance_monitor import build_run_report, save_report, verify_invariance
from margins import build_margin_report, check_theorem3_condition, estimated_margin
from scenarios import load_scenario, scenario_from_dict
from simulation import SCENARIO_FILE, SimulationRunner, Trace, write_run
from trace_report import TraceReporter, event_statistics

logger = logging.getLogger("cbf_runner")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2
THREADS_ENV = "RESILIENT_CBF_THREADS"


def setup_logging(level: str = "INFO", log_file: Optional[str] = "resilient_cbf.log"):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"override {pair!r} is not key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def parse_seeds(text: str) -> List[int]:
    """'3' or '0..9' (inclusive)"""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def worker_cap() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return psutil.cpu_count(logical=False) or 1


def run_and_verify(scenario, seed: int, out_dir: Optional[Path]) -> Dict:
    """Run one seed, verify it and write the run directory; returns report.json contents"""
    runner = SimulationRunner(scenario, seed)
    try:
        trace = runner.run()
    except CbfError:
        if out_dir is not None:
            partial = runner.trace
            write_run(partial, scenario, out_dir, {"scenario": partial.scenario_name, "seed": seed,
                                                   "run_status": partial.status, "error": partial.error})
        raise
    invariance = verify_invariance(trace, scenario.barrier, scenario.cascade)
    report = build_run_report(trace, scenario, invariance)
    report["events"] = event_statistics(trace)
    if out_dir is not None:
        write_run(trace, scenario, out_dir, report)
    return report


def _sweep_job(path: str, overrides: Dict[str, str], seed: int, out_root: Optional[str]) -> Dict:
    scenario = load_scenario(path, overrides)
    out_dir = Path(out_root) / f"seed_{seed}" if out_root else None
    try:
        report = run_and_verify(scenario, seed, out_dir)
    except CbfError as exc:
        return {"seed": seed, "max_h_tot": float("nan"), "violated": False, "fallback_count": 0,
                "error": str(exc)}
    return {"seed": seed, "max_h_tot": report["max_h_tot"], "violated": not report["safe"],
            "fallback_count": report["fallback_count"], "error": ""}


def sweep(path: str, seeds: Sequence[int], overrides: Dict[str, str], out_root: Optional[str],
          max_workers: Optional[int] = None) -> pd.DataFrame:
    """One row per seed: seed, max_h_tot, violated, fallback_count"""
    workers = min(max_workers or worker_cap(), len(seeds))
    logger.info(f"🚀 sweeping {len(seeds)} seeds of {path} on {workers} workers")
    if workers <= 1:
        rows = [_sweep_job(path, overrides, s, out_root) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_job, path, overrides, s, out_root) for s in seeds]
            rows = [f.result() for f in futures]
    summary = pd.DataFrame(rows, columns=["seed", "max_h_tot", "violated", "fallback_count", "error"])
    if out_root:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        summary.to_csv(Path(out_root) / "sweep_summary.csv", index=False, float_format="%.17g")
    return summary


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario, parse_overrides(args.override))
    out_dir = Path(args.out or f"runs/{scenario.name}_seed{args.seed}")
    report = run_and_verify(scenario, args.seed, out_dir)
    if args.plots:
        TraceReporter(Trace.load(out_dir), scenario.models, str(out_dir / "figures")).generate_graphs()
    print("=" * 50)
    print(f"📊 {scenario.name} seed={args.seed}: max h_tot = {report['max_h_tot']:.6g}")
    print(f"   best-effort events: {report['fallback_count']}")
    print(f"   output: {out_dir}/")
    print("=" * 50)
    return EXIT_OK


def cmd_verify(args) -> int:
    trace_dir = Path(args.trace_dir)
    data = json.loads((trace_dir / SCENARIO_FILE).read_text())
    scenario = scenario_from_dict(data)
    trace = Trace.load(trace_dir)
    report = verify_invariance(trace, scenario.barrier, scenario.cascade)
    save_report(report.to_dict(), trace_dir / "verification.json")
    print(f"📊 max h_tot = {report.max_h_tot:.6g}, psi maxima = {[round(v, 6) for v in report.psi_max]}")
    for alert in report.alerts:
        print(f"   {alert}")
    if not report.safe:
        print(f"❌ safety violated (first at t={report.first_violation})")
        return EXIT_VIOLATION
    print("✅ trace stays in the safe set")
    return EXIT_OK


def cmd_margins(args) -> int:
    scenario = load_scenario(args.scenario, parse_overrides(args.override))
    margin = scenario.effective_margin()
    if args.estimate:
        margin = estimated_margin(scenario, margin, args.estimate, args.seed)
    report = build_margin_report(scenario, margin)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, default=float))
        return EXIT_OK
    print(f"📊 Margins for {scenario.name}")
    print("=" * 50)
    print(f"xi = {report.xi:.6g}")
    for k, agent in enumerate(scenario.normal_ids):
        line = f"agent {agent}: eps = {report.epsilon[f'agent_{agent}']:.6g}, eta = {report.eta[k]:.6g}"
        if report.eta_prime is not None:
            line += f", eta' = {report.eta_prime[k]:.6g}"
        print(line)
    print(f"eps* = {report.epsilon['star']:.6g}")
    print("constants:")
    for name, value in report.constants.items():
        print(f"  {name:>8} = {value:.6g}  ({report.provenance.get(name, 'default')})")
    for name in ("override_eta", "override_eta_prime", "override_xi"):
        if name in report.provenance:
            print(f"  {name} ({report.provenance[name]})")
    return EXIT_OK


def cmd_check_t3(args) -> int:
    scenario = load_scenario(args.scenario, parse_overrides(args.override))
    holds, worst, witness = check_theorem3_condition(scenario, scenario.effective_margin(),
                                                     grid_resolution=args.grid, rng_seed=args.seed)
    print(f"📊 sampled condition {'holds' if holds else 'fails'}: worst margin = {worst:.6g}")
    if witness is not None and not holds:
        print(f"   witness state: {witness.tolist()}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    summary = sweep(args.scenario, parse_seeds(args.seeds), parse_overrides(args.override), args.out,
                    args.workers)
    print(summary.to_string(index=False))
    violated = int(summary["violated"].sum())
    if (summary["error"] != "").any():
        return EXIT_ERROR
    return EXIT_VIOLATION if violated else EXIT_OK


def cmd_ablation(args) -> int:
    overrides = parse_overrides(args.override)
    overrides["eta_zero_ablation"] = "true"
    summary = sweep(args.scenario, parse_seeds(args.seeds), overrides, args.out, args.workers)
    violated = int(summary["violated"].sum())
    worst = float(summary["max_h_tot"].max())
    print(summary.to_string(index=False))
    print(f"📊 margin removed: {violated}/{len(summary)} seeds violated, worst max h_tot = {worst:.6g}")
    if not violated:
        logger.warning(f"⚠️ no seed violated with the margin removed (worst {worst:.6g})")
    return EXIT_OK


def cmd_dashboard(args) -> int:
    app = Path(__file__).with_name("streamlit_app.py")
    command = [sys.executable, "-m", "streamlit", "run", str(app), "--server.port", str(args.port),
               "--browser.gatherUsageStats", "false"]
    if args.trace_dir:
        command += ["--", args.trace_dir]
    print(f"🚀 Starting trace dashboard on http://localhost:{args.port}")
    try:
        subprocess.run(command, check=False)
    except KeyboardInterrupt:
        print("\n🛑 Dashboard stopped by user")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbf_runner", description="Resilient sampled-data CBF simulator")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-file", default="resilient_cbf.log")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("scenario")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")
        p.set_defaults(handler=handler)
        return p

    p = scenario_cmd("run", cmd_run, "simulate one seed and write trace.csv/report.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plots", action="store_true", help="also render PNG figures")

    p = sub.add_parser("verify", help="re-verify a trace directory")
    p.add_argument("trace_dir")
    p.set_defaults(handler=cmd_verify)

    p = scenario_cmd("margins", cmd_margins, "print epsilon, eta, eta' and xi")
    p.add_argument("--estimate", type=int, default=0, metavar="SAMPLES",
                   help="re-estimate Lipschitz constants from this many samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = scenario_cmd("check-t3", cmd_check_t3, "sampled sufficient-condition check for best-effort safety")
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--seed", type=int, default=0)

    for name, handler, help_text in (("sweep", cmd_sweep, "run a range of seeds"),
                                     ("ablation", cmd_ablation, "sweep with the margin forced to zero")):
        p = scenario_cmd(name, handler, help_text)
        p.add_argument("--seeds", default="0..9")
        p.add_argument("--out")
        p.add_argument("--workers", type=int)

    p = sub.add_parser("dashboard", help="launch the streamlit trace viewer")
    p.add_argument("trace_dir", nargs="?")
    p.add_argument("--port", type=int, default=8501)
    p.set_defaults(handler=cmd_dashboard)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)
    try:
        return args.handler(args)
    except (CbfError, argparse.ArgumentTypeError, OSError, ValueError) as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
