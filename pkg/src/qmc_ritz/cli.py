"""Command-line driver: ``qmc-ritz {train,variance-study,order-probe,check}``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure (including
failed checks), 3 I/O error.  ``QMC_RITZ_WORKERS`` sets the worker-pool size
used by the study commands.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import checks, net, pde
from .sampler import DirectionNumbers, SamplerKind
from .trainer import (
    ProbeDiverged,
    TrainConfig,
    TrainingDiverged,
    convergence_order_probe,
    emit_results,
    run_metadata,
    train,
    variance_study,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
CI_DIM, CI_ITERS = 5, 2000
FULL_DIM, FULL_ITERS = 20, 10000
SAMPLERS = [k.value for k in SamplerKind]
VARIANCE_COLUMNS = ("problem", "n", "mean_ratio", "probes", "mean_mc_trace", "mean_rqmc_trace")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=_positive, help=f"problem dimension (default {CI_DIM}, {FULL_DIM} with --full)")
    p.add_argument("--iters", type=_positive, help=f"training iterations (default {CI_ITERS}, {FULL_ITERS} with --full)")
    p.add_argument("--full", action="store_true", help="use the full-scale settings (d=20, 10000 iterations)")
    p.add_argument("--seed", type=_non_negative, default=0, help="sampler seed")
    p.add_argument("--init-seed", type=_non_negative, default=0, help="network initialization seed")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (Adam) or fixed step (sgd)")
    p.add_argument("--project-btheta", type=float, default=None,
                   help="clamp parameters to [-B, B] after every step (off by default)")
    p.add_argument("--replicates", type=_positive, default=16, help="replicates per covariance probe")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qmc-ritz", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one problem with one sampler")
    p.add_argument("--problem", choices=sorted(pde.PROBLEMS), default="poisson20")
    p.add_argument("--sampler", choices=SAMPLERS, default="sobol")
    p.add_argument("--tau", type=_non_negative, default=7, help="mini-batch size is 2**tau")
    p.add_argument("--eval-every", type=_non_negative, default=100, help="relative L2 error cadence (0 = off)")
    p.add_argument("--cov-every", type=_non_negative, default=500, help="covariance-trace cadence (0 = off)")
    p.add_argument("--save-params", action="store_true", help="also write the final parameters as params.json")
    _add_run_flags(p)

    p = sub.add_parser("variance-study", help="MC / RQMC gradient covariance-trace ratios")
    p.add_argument("--problem", action="append", choices=sorted(pde.PROBLEMS),
                   help="problem to include (repeatable; default both)")
    p.add_argument("--taus", type=_non_negative, nargs="+", default=[5, 7, 9], help="block exponents")
    p.add_argument("--sampler", choices=SAMPLERS, default="sobol", help="sampler driving the trajectory")
    p.add_argument("--rqmc", choices=SAMPLERS, default="rqmc-shift",
                   help="randomized Sobol' kind for the comparison (must be randomized)")
    p.add_argument("--probe-every", type=_positive, default=100, help="iterations between probes")
    _add_run_flags(p)

    p = sub.add_parser("order-probe", help="convergence order of fixed-step SGD on the scalar surrogate")
    p.add_argument("--alpha", type=float, default=0.5, help="fixed step size")
    p.add_argument("--iters", type=_positive, default=4000, help="SGD steps per run")
    p.add_argument("--seeds", type=_positive, default=8, help="seeds averaged for randomized samplers")
    p.add_argument("--min-log2", type=_non_negative, default=4)
    p.add_argument("--max-log2", type=_non_negative, default=12)
    p.add_argument("--samplers", nargs="+", choices=SAMPLERS, default=["mc", "sobol"])
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("check", help="run the fast oracle suite")
    p.add_argument("--only", choices=checks.SUITES, help="run a single suite")
    p.add_argument("--direction-numbers", type=Path, help="alternative direction-number table")
    return parser


def _scale(args) -> tuple[int, int]:
    d = args.dim or (FULL_DIM if args.full else CI_DIM)
    iters = args.iters or (FULL_ITERS if args.full else CI_ITERS)
    return d, iters


def _base_config(args, **over) -> TrainConfig:
    d, iters = _scale(args)
    cfg = TrainConfig(d=d, iterations=iters, seed=args.seed, init_seed=args.init_seed,
                      optimizer=args.optimizer, lr=args.lr, project_btheta=args.project_btheta,
                      replicates=args.replicates, **over)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def run_train(args) -> int:
    cfg = _base_config(args, problem=args.problem, sampler=args.sampler, tau=args.tau,
                       eval_every=args.eval_every, cov_every=args.cov_every)
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        emit_results(exc.records, args.out, cfg, extra={"status": "diverged", "diagnostic": exc.diagnostic})
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    extra = {"status": "ok", "final": {"rel_l2": result.final_rel_l2, "loss": result.final_loss}}
    emit_results(result.records, args.out, cfg, extra=extra)
    if args.save_params:
        net.save_params(Path(args.out) / "params.json", result.params, net.NetShape(cfg.d))
    print(f"final rel_l2 {result.final_rel_l2:.6g}  final loss {result.final_loss:.6g}")
    return EXIT_OK


def run_variance_study(args) -> int:
    rq = SamplerKind.parse(args.rqmc)
    if not rq.randomized or not rq.is_sobol:
        raise ConfigError(f"--rqmc {args.rqmc} has no randomization; the trace ratio would be undefined")
    problems = args.problem or sorted(pde.PROBLEMS)
    base = _base_config(args, sampler=args.sampler, cov_every=0)
    rows = variance_study(problems, args.taus, base=base, probe_every=args.probe_every, rqmc_kind=args.rqmc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "variance_study.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=VARIANCE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    meta = run_metadata(base, {"rqmc": args.rqmc, "taus": args.taus, "probe_every": args.probe_every})
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    ns = [1 << t for t in args.taus]
    print("problem".ljust(16) + "".join(f"n={n}".rjust(12) for n in ns))
    for name in problems:
        vals = {r["n"]: r["mean_ratio"] for r in rows if r["problem"] == name}
        print(name.ljust(16) + "".join(f"{vals[n]:12.1f}" for n in ns))
    return EXIT_OK


def run_order_probe(args) -> int:
    if args.min_log2 > args.max_log2:
        raise ConfigError("--min-log2 exceeds --max-log2")
    grid = [1 << t for t in range(args.min_log2, args.max_log2 + 1)]
    try:
        res = convergence_order_probe(alpha=args.alpha, n_grid=grid, seeds=tuple(range(args.seeds)),
                                      samplers=args.samplers, iterations=args.iters)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "order_probe.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sampler", "n", "gap"])
        for sampler, gaps in res.gaps.items():
            for n, g in zip(res.n_grid, gaps):
                w.writerow([sampler, n, repr(g)])
    meta = run_metadata(extra={"order_probe": res.config, "slopes": res.slopes})
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for sampler, slope in res.slopes.items():
        print(f"{sampler:>14}  slope {slope:+.3f}")
    return EXIT_OK


def run_check(args) -> int:
    table = DirectionNumbers.load(args.direction_numbers) if args.direction_numbers else None
    results = checks.run_checks(args.only, table)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.check_id}  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {"train": run_train, "variance-study": run_variance_study,
            "order-probe": run_order_probe, "check": run_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ProbeDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
