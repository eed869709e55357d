"""``raresim`` command-line interface.

Exit codes: 0 success, 1 input or data error, 2 usage error, 3 the
cross-entropy search never found a populated level set.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import report
from .ce import CEConfig, estimate_is, estimate_naive, run_ce, select_best
from .expfam import sample as draw
from ._seeding import derive_seed
from .orchestrator import (
    BatchFailed,
    PoolUnavailable,
    RolloutProvider,
    WorkerPool,
    default_endpoint,
    default_workers,
    parse_endpoint,
    worker_loop,
)
from .runners import HighwayRunner, ToyGaussianRunner
from .scenario import ScenarioError, default_scenario_path, parse

logger = logging.getLogger("raresim")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_STALL = 0, 1, 2, 3
TABLE_GAMMAS = (0.14, 0.15, 0.19, 0.20)
TOY_GAMMA = -3.0


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _floats(text):
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _endpoint(text):
    try:
        return parse_endpoint(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scenario", type=Path, default=None,
                     help="scenario file (default: the shipped i80.scn)")
    src.add_argument("--toy-gaussian", action="store_true",
                     help="skip the simulator: f(x) = x with x ~ N(0, 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--seed", type=int, default=None, help="default: the scenario's seed_base")
    run.add_argument("--workers", type=int, default=None,
                     help="worker processes; 0 runs in-process (default: $RARESIM_WORKERS or 0)")
    run.add_argument("--worker-mode", choices=("process", "thread"), default="process")
    run.add_argument("--endpoint", type=_endpoint, default=None,
                     help="controller host:port (default: $RARESIM_ENDPOINT or an ephemeral local port)")
    run.add_argument("--out", type=Path, default=Path("."), help="output directory")

    p = argparse.ArgumentParser(prog="raresim", description="Rare-event estimation for a highway scenario.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("naive", parents=[common, run], help="naive Monte Carlo baseline")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--gamma-test", type=_floats, default=None)

    s = sub.add_parser("ce", parents=[common, run], help="cross-entropy search for an importance sampler")
    s.add_argument("--rho", type=float, default=0.01)
    s.add_argument("--K", "-K", type=int, default=100)
    s.add_argument("--n-k", type=int, default=5000)
    s.add_argument("--alpha", type=float, default=0.8)
    s.add_argument("--gamma", type=float, default=None, help="target threshold (default: the scenario's)")
    s.add_argument("--level-rule", choices=("proxy", "literal"), default="proxy")

    s = sub.add_parser("eval", parents=[common, run], help="importance-sampling estimate from a parameter file")
    s.add_argument("--theta", type=Path, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--gamma-test", type=_floats, default=None)

    s = sub.add_parser("compare", help="rare-event and variance ratios of two estimate tables")
    s.add_argument("--is", dest="is_path", type=Path, required=True)
    s.add_argument("--naive", type=Path, required=True)
    s.add_argument("--out", type=Path, default=Path("."))
    s.add_argument("-v", "--verbose", action="count", default=0)

    s = sub.add_parser("worker", parents=[common], help="serve rollouts to a controller")
    s.add_argument("--endpoint", type=_endpoint, default=None)

    s = sub.add_parser("trace", parents=[common], help="write the trajectory of one rollout as CSV")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--theta", type=Path, default=None, help="draw from this parameter file instead of the base")
    s.add_argument("--out", type=Path, default=Path("trace.csv"))

    s = sub.add_parser("fit-policy", help="refit the surrogate driver weights and covariance")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n-beams", type=int, default=5)
    s.add_argument("--samples", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-v", "--verbose", action="count", default=0)

    s = sub.add_parser("samples-needed", help="naive-MC sample size for relative accuracy eps")
    s.add_argument("--p", type=str, required=True)
    s.add_argument("--eps", type=str, default="0.1")
    s.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _runner(args):
    if args.toy_gaussian:
        return ToyGaussianRunner(), None
    path = args.scenario or default_scenario_path()
    try:
        spec = parse(path)
    except ScenarioError as exc:
        raise DataError(f"{path}: {exc}") from None
    return HighwayRunner(spec), spec


def _seed(args, spec):
    if args.seed is not None:
        return args.seed
    return spec.seed_base if spec is not None else 0


def _gammas(args):
    if args.gamma_test is not None:
        if not args.gamma_test:
            raise UsageError("--gamma-test needs at least one value")
        return args.gamma_test
    return [TOY_GAMMA] if args.toy_gaussian else list(TABLE_GAMMAS)


@contextlib.contextmanager
def _provider(args, runner):
    workers = default_workers() if args.workers is None else args.workers
    if workers < 0:
        raise UsageError("--workers must be >= 0")
    if workers == 0:
        yield RolloutProvider(runner)
        return
    endpoint = args.endpoint or default_endpoint()
    with WorkerPool(runner, workers, args.worker_mode, endpoint) as pool:
        yield RolloutProvider(runner, pool)


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """``<command>.manifest.json``: written before any output, completed afterwards."""

    def __init__(self, args, argv, runner, seed, config, outputs):
        self.path = Path(args.out) / f"{args.command}.manifest.json"
        scenario = "toy-gaussian" if args.toy_gaussian else str(Path(args.scenario or default_scenario_path()).resolve())
        self.data = {
            "command": ["raresim", *argv],
            "scenario": scenario,
            "scenario_hash": runner.scenario_hash.hex(),
            "config": config,
            "seed": seed,
            "git_describe": _git_describe(),
            "start": _now(),
            "end": None,
            "outputs": [str(Path(args.out) / o) for o in outputs],
            "status": "running",
        }
        self._dump()

    def _dump(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status="ok"):
        self.data["end"] = _now()
        self.data["status"] = status
        self._dump()


def _setup(args):
    runner, spec = _runner(args)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {args.out}: {exc}") from None
    return runner, spec, _seed(args, spec)


def cmd_naive(args, argv):
    if args.n < 1:
        raise UsageError("n must be >= 1")
    gammas = _gammas(args)
    runner, _, seed = _setup(args)
    manifest = Manifest(args, argv, runner, seed, {"n": args.n, "gamma_test": gammas}, ["naive.csv"])
    with _provider(args, runner) as provider:
        reports = estimate_naive(runner.family, runner.theta0, args.n, gammas, provider, seed)
    report.write_estimates(args.out / "naive.csv", reports)
    manifest.finish()
    print(report.estimates_text(reports), end="")
    return EXIT_OK


def cmd_ce(args, argv):
    try:
        config = CEConfig(rho=args.rho, alpha=args.alpha, n_k=args.n_k, K=args.K, level_rule=args.level_rule)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    runner, spec, seed = _setup(args)
    if args.gamma is not None:
        config.gamma = args.gamma
    else:
        config.gamma = TOY_GAMMA if spec is None else spec.gamma_s
    config.seed = seed
    cfg = {"rho": config.rho, "K": config.K, "n_k": config.n_k, "alpha": config.alpha,
           "gamma": config.gamma, "level_rule": config.level_rule}
    manifest = Manifest(args, argv, runner, seed, cfg, ["ce_history.csv", "theta_ce.params"])
    with _provider(args, runner) as provider:
        try:
            history = run_ce(runner.family, runner.theta0, config, provider)
        except BatchFailed as exc:
            if exc.history is not None:
                report.write_history(args.out / "ce_history.csv", exc.history)
            manifest.finish("failed")
            raise
    theta = select_best(history)
    report.write_history(args.out / "ce_history.csv", history)
    report.write_theta(args.out / "theta_ce.params", runner.family, theta)
    if config.K and all(r.status == "empty" for r in history.records):
        manifest.finish("stalled")
        print(f"raresim: all {config.K} iterations had an empty level set; "
              f"gamma = {config.gamma:g} is below every objective value seen", file=sys.stderr)
        return EXIT_STALL
    manifest.finish()
    if history.records:
        best = min(history.records, key=lambda r: (r.rho_quantile, r.k))
        print(f"best iterate: k = {best.k}, rho-quantile = {best.rho_quantile:.6g}, stalls = {history.stalls}")
    return EXIT_OK


def cmd_eval(args, argv):
    if args.n < 1:
        raise UsageError("n must be >= 1")
    gammas = _gammas(args)
    runner, _, seed = _setup(args)
    try:
        theta = report.read_theta(args.theta, runner.family)
    except report.ReportError as exc:
        raise DataError(str(exc)) from None
    manifest = Manifest(args, argv, runner, seed,
                        {"n": args.n, "gamma_test": gammas, "theta": str(args.theta)}, ["is.csv"])
    with _provider(args, runner) as provider:
        reports = estimate_is(theta, runner.family, runner.theta0, args.n, gammas, provider, seed)
    report.write_estimates(args.out / "is.csv", reports)
    manifest.finish()
    print(report.estimates_text(reports), end="")
    return EXIT_OK


def cmd_compare(args, argv):
    try:
        ce_rows = report.read_estimates(args.is_path, "cross-entropy")
        naive_rows = report.read_estimates(args.naive, "naive")
        rows = report.compare_report(ce_rows, naive_rows)
    except report.ReportError as exc:
        raise DataError(str(exc)) from None
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {args.out}: {exc}") from None
    report.write_comparison(args.out / "compare.csv", rows)
    text = report.comparison_text(rows)
    (args.out / "compare.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_worker(args, argv):
    runner, _ = _runner(args)
    endpoint = args.endpoint or default_endpoint()
    if endpoint[1] == 0:
        raise UsageError("worker needs --endpoint host:port (or $RARESIM_ENDPOINT)")
    try:
        done = worker_loop(endpoint, runner)
    except OSError as exc:
        raise DataError(f"cannot reach controller at {endpoint[0]}:{endpoint[1]}: {exc}") from None
    logger.info("worker finished after %d tasks", done)
    return EXIT_OK


def cmd_trace(args, argv):
    from .sim.rollout import rollout

    runner, spec = _runner(args)
    if spec is None:
        raise UsageError("trace needs a highway scenario")
    theta = runner.theta0
    if args.theta is not None:
        try:
            theta = report.read_theta(args.theta, runner.family)
        except report.ReportError as exc:
            raise DataError(str(exc)) from None
    x = draw(runner.family, theta, derive_seed(args.seed, 1))
    res = rollout(x, spec, seed=args.seed, trace=args.out)
    print(f"min_ttc = {res.min_ttc:.6g} s, crashed = {res.crashed}, steps = {res.steps}")
    return EXIT_OK


def cmd_fit_policy(args, argv):
    from .policy_fit import fit_policy
    from .scenario import write_cholesky, write_vector

    if args.n_beams < 1 or args.samples < 2:
        raise UsageError("need --n-beams >= 1 and --samples >= 2")
    mu0, sigma = fit_policy(n_beams=args.n_beams, n_samples=args.samples, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_vector(args.out / "surrogate_mu0.bin", mu0)
    write_cholesky(args.out / "surrogate_sigma0.bin", np.linalg.cholesky(sigma))
    print(f"wrote {mu0.size} weights to {args.out}")
    return EXIT_OK


def cmd_samples_needed(args, argv):
    try:
        n = report.required_sample_size(args.p, args.eps)
    except (ValueError, ArithmeticError) as exc:
        raise UsageError(f"bad --p/--eps: {exc}") from None
    print(n)
    return EXIT_OK


COMMANDS = {
    "naive": cmd_naive,
    "ce": cmd_ce,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "worker": cmd_worker,
    "trace": cmd_trace,
    "fit-policy": cmd_fit_policy,
    "samples-needed": cmd_samples_needed,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"raresim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BatchFailed, PoolUnavailable, OSError) as exc:
        print(f"raresim: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
