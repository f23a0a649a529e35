"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 infeasible QP.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import OUTPUT_ENV, load_config
from .errors import ConfigurationError
from .estimator import calibrate_epsilon
from .qp import INFEASIBLE, OPTIMAL, QpProblem, QpSolution, qp_solve
from .scenario import adversarial_layout, monte_carlo_risk, run_simulation

logger = logging.getLogger("riskcbf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3


def _scenario(args):
    rc = load_config(args.config)
    scen = rc.scenario
    if getattr(args, "adversarial", False):
        scen = scen.replace(agent_positions=adversarial_layout(scen.lane_count, scen.lane_width))
    out = Path(args.out) if getattr(args, "out", None) else rc.resolved_output_dir()
    return rc, scen, out


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info("wrote %s", path)


def cmd_simulate(args) -> int:
    rc, scen, out = _scenario(args)
    seed = rc.seed_base if args.seed is None else args.seed
    trace = run_simulation(scen, seed)
    summary = trace.summary()
    summary["trace_sha256"] = trace.sha256()
    _write(out / f"trace_seed{seed}.csv", trace.to_csv())
    _write(out / f"summary_seed{seed}.json", json.dumps(summary, indent=2))
    print(json.dumps({k: summary[k] for k in ("goal_reached", "goal_time", "max_risk_bound", "n_slack_active",
                                               "truncated", "trace_sha256")}))
    return EXIT_RUNTIME if trace.truncated else EXIT_OK


def cmd_calibrate(args) -> int:
    rc, scen, out = _scenario(args)
    seeds = range(rc.seed_base, rc.seed_base + args.runs)
    report = calibrate_epsilon(scen, args.pe, args.runs, seeds=seeds, method=args.method,
                               confidence=args.confidence)
    _write(out / "calibration.json", report.to_json())
    print(json.dumps({"epsilon": report.epsilon, "sup_coverage": report.sup_coverage,
                      "step_coverage": report.step_coverage, "n_diverged_runs": report.n_diverged_runs}))
    return EXIT_OK


def cmd_validate_risk(args) -> int:
    rc, scen, out = _scenario(args)
    seeds = rc.seeds if args.seeds is None else list(range(rc.seed_base, rc.seed_base + args.seeds))
    rows = ["seed,tick,t,slack,risk_bound,mc_p_hat,mc_ci_upper"]
    worst = 0.0
    violations = 0
    t0 = time.perf_counter()
    for seed in seeds:
        trace = run_simulation(scen, seed)
        ticks = np.arange(trace.n_ticks)
        if args.ticks and args.ticks < ticks.size:
            ticks = np.unique(np.linspace(0, trace.n_ticks - 1, args.ticks).astype(int))
        est = monte_carlo_risk(trace, ticks, n_rollouts=args.rollouts, seed=seed, policy=args.policy)
        for j, k in enumerate(ticks):
            free = trace.s[k] <= 1e-6
            up = float(est.max_ci_upper[j])
            if free:
                worst = max(worst, up)
                violations += int(up > scen.p_bar)
            vals = (trace.t[k], trace.s[k], trace.max_risk[k], est.max_p_hat[j], up)
            rows.append(f"{seed},{k}," + ",".join(repr(float(v)) for v in vals))
    _write(out / "risk_validation.csv", "\n".join(rows) + "\n")
    result = {"seeds": len(seeds), "worst_slack_free_ci_upper": worst, "violations": violations,
              "p_bar": scen.p_bar, "elapsed_s": time.perf_counter() - t0}
    print(json.dumps(result))
    return EXIT_OK if violations == 0 else EXIT_RUNTIME


def cmd_solve_qp(args) -> int:
    try:
        doc = json.loads(Path(args.problem).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot load problem {args.problem}: {exc}") from None
    warm = None
    if args.warm_start:
        w = json.loads(Path(args.warm_start).read_text())
        warm = QpSolution(z=np.asarray(w["z"], float), status=w.get("status", OPTIMAL),
                          objective=w.get("objective", 0.0), kkt={}, duals=np.zeros(0),
                          active_set=tuple(w.get("active_set", ())))
    sol = qp_solve(QpProblem.from_dict(doc), tol=args.tol, max_iter=args.max_iter, warm_start=warm)
    text = sol.to_json()
    if args.out:
        _write(Path(args.out), text)
    print(text)
    if sol.status == INFEASIBLE:
        return EXIT_INFEASIBLE
    return EXIT_OK if sol.status == OPTIMAL else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskcbf", description="Risk-bounded control simulator and tools.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run config (default: packaged defaults)")
        sp.add_argument("--adversarial", action="store_true", help="add an agent cutting in ahead of the ego")
        if out:
            sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or cwd)")

    sp = sub.add_parser("simulate", help="run one closed-loop simulation")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="calibrate the estimation-error radius")
    common(sp)
    sp.add_argument("--pe", type=float, default=0.01)
    sp.add_argument("--runs", type=int, default=100)
    sp.add_argument("--method", choices=["tolerance", "quantile"], default="tolerance")
    sp.add_argument("--confidence", type=float, default=0.95)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("validate-risk", help="Monte Carlo check of the per-tick risk bound")
    common(sp)
    sp.add_argument("--seeds", type=int, help="number of seeds (default: from config)")
    sp.add_argument("--rollouts", type=int, default=1000)
    sp.add_argument("--ticks", type=int, default=0, help="evenly spaced ticks per seed (0 = all)")
    sp.add_argument("--policy", choices=["frozen", "live"], default="frozen")
    sp.set_defaults(func=cmd_validate_risk)

    sp = sub.add_parser("solve-qp", help="solve a QP given as JSON {P, q, A, ub, lo, hi}")
    sp.add_argument("problem")
    sp.add_argument("--warm-start")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_solve_qp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
