"""Training loop, gradient-covariance probes, convergence-order probe, result files."""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy

from . import __version__, net, optim, pde
from .sampler import DirectionNumbers, SampleStream, SamplerKind

__all__ = [
    "TrainConfig",
    "TrainRecord",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "derive_seed",
    "covariance_trace",
    "covariance_trace_probe",
    "variance_study",
    "Surrogate",
    "OrderProbeResult",
    "ProbeDiverged",
    "convergence_order_probe",
    "CSV_COLUMNS",
    "emit_results",
    "read_records",
    "worker_count",
]

CSV_COLUMNS = ("k", "loss", "rel_l2", "grad_norm", "cov_trace", "wall_time_ms")
WORKERS_ENV = "QMC_RITZ_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items):
    """Order-preserving map, threaded when a worker pool is configured."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    problem: str = "poisson20"
    d: int = 20
    sampler: str = "sobol"
    seed: int = 0
    init_seed: int = 0
    tau: int = 7
    iterations: int = 10000
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    project_btheta: float | None = None
    eval_every: int = 100
    eval_log2: int = 14
    eval_seed: int = 0
    cov_every: int = 500
    replicates: int = 16

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        SamplerKind.parse(self.sampler)
        pde.make_problem(self.problem, self.d)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.project_btheta is not None and not self.project_btheta > 0:
            raise ValueError("projection radius must be positive")
        if self.eval_every < 0 or self.cov_every < 0:
            raise ValueError("cadences must be non-negative (0 disables)")
        if self.cov_every and self.replicates < 2:
            raise ValueError("covariance probing needs at least 2 replicates")


@dataclass(frozen=True)
class TrainRecord:
    k: int
    loss: float
    rel_l2: float | None
    grad_norm: float
    cov_trace: float | None
    wall_time_ms: float


@dataclass
class TrainResult:
    config: TrainConfig
    records: list[TrainRecord]
    params: np.ndarray
    initial_params: np.ndarray
    final_rel_l2: float | None = None

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, records: list[TrainRecord], diagnostic: dict):
        super().__init__(message)
        self.records = records
        self.diagnostic = diagnostic


def covariance_trace(grads: np.ndarray) -> float:
    """Trace of the sample covariance of the rows of ``grads``."""
    grads = np.asarray(grads, dtype=np.float64)
    R = grads.shape[0]
    if R < 2:
        raise ValueError("need at least 2 replicates")
    dev = grads - grads.mean(axis=0)
    return float(np.sum(dev * dev) / (R - 1))


def covariance_trace_probe(problem: pde.Problem, params, kind, tau: int, R: int = 16,
                           seed: int = 0, block_index: int = 0,
                           table: DirectionNumbers | None = None) -> float:
    """Spread of ``R`` replicate gradient estimates at fixed parameters.

    MC replicates are ``R`` fresh blocks of one seeded stream.  Sobol'-based
    replicates all read block ``block_index``, each under its own
    randomization seed (plain Sobol' replicates coincide and give 0).
    """
    if R < 2:
        raise ValueError("need at least 2 replicates")
    kind = SamplerKind.parse(kind)
    n = 1 << tau
    grads = np.empty((R, problem.shape.D))
    if kind is SamplerKind.MC:
        stream = SampleStream(kind, problem.d, seed=seed)
        for r in range(R):
            grads[r] = pde.gradient_estimator(problem, params, stream.next_block(tau)).g
    else:
        for r in range(R):
            stream = SampleStream(kind, problem.d, seed=derive_seed(seed, r), table=table)
            stream.seek(block_index * n)
            grads[r] = pde.gradient_estimator(problem, params, stream.next_block(tau)).g
    return covariance_trace(grads)


def _probe_kind(kind: SamplerKind) -> SamplerKind:
    return SamplerKind.MC if kind is SamplerKind.MC else (
        SamplerKind.RQMC_SCRAMBLE if kind is SamplerKind.RQMC_SCRAMBLE else SamplerKind.RQMC_SHIFT)


def train(config: TrainConfig, params=None,
          callback: Callable[[int, np.ndarray], None] | None = None,
          callback_every: int = 0) -> TrainResult:
    """Run ``config.iterations`` steps: block ``k`` -> exact gradient -> optimizer update.

    Covariance traces at cadence steps are measured at the current parameters
    with a separate probe stream (MC for MC runs, randomized Sobol' otherwise),
    so probing never perturbs the training trajectory.
    """
    config.validate()
    problem = pde.make_problem(config.problem, config.d)
    shape = problem.shape
    kind = SamplerKind.parse(config.sampler)
    theta = net.init_params(shape, config.init_seed) if params is None else net.check_params(params, shape).copy()
    theta0 = theta.copy()
    stream = SampleStream(kind, problem.d, seed=config.seed)
    eval_set = pde.make_eval_set(problem, config.eval_log2, config.eval_seed) if problem.exact else None
    state = optim.adam_init(shape.D, config.lr, config.beta1, config.beta2, config.eps)
    probe_kind = _probe_kind(kind)

    records: list[TrainRecord] = []
    start = time.perf_counter()
    for k in range(config.iterations):
        block = stream.next_block(config.tau)
        # overflow is caught right below and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = pde.loss_and_gradient(problem, theta, block)
            gnorm = float(np.linalg.norm(grad.g))
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            diag = {"k": k, "loss": loss, "grad_norm": gnorm, "max_abs_param": float(np.max(np.abs(theta)))}
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {k}", records, diag)
        rel = None
        if eval_set is not None and config.eval_every and k % config.eval_every == 0:
            rel = pde.relative_l2_error(problem, theta, eval_set)
        cov = None
        if config.cov_every and k % config.cov_every == 0:
            cov = covariance_trace_probe(problem, theta, probe_kind, config.tau, config.replicates,
                                         seed=derive_seed(config.seed, k), block_index=block.iteration)
        if callback is not None and callback_every and k % callback_every == 0:
            callback(k, theta)
        records.append(TrainRecord(k, loss, rel, gnorm, cov, (time.perf_counter() - start) * 1e3))
        if config.optimizer == "adam":
            state, theta = optim.adam_step(state, theta, grad)
        else:
            theta = optim.fixed_step(theta, grad, config.lr)
        if config.project_btheta is not None:
            theta = optim.project_inf_ball(theta, config.project_btheta)
    final = pde.relative_l2_error(problem, theta, eval_set) if eval_set is not None else None
    return TrainResult(config, records, theta, theta0, final)


def variance_study(problem_names: Sequence[str], taus: Sequence[int] = (5, 7, 9), *,
                   base: TrainConfig, probe_every: int = 100,
                   rqmc_kind: str = "rqmc-shift") -> list[dict]:
    """Average MC / RQMC covariance-trace ratio along one training run per (problem, n).

    Both traces are taken at the same parameters every ``probe_every`` steps,
    then the per-step ratios are averaged over the run.
    """
    rq = SamplerKind.parse(rqmc_kind)
    if not rq.is_sobol or not rq.randomized:
        raise ValueError("the RQMC side needs a randomized Sobol' sampler (rqmc-shift or rqmc-scramble)")
    if probe_every < 1:
        raise ValueError("probe_every must be positive")

    def one(job):
        name, tau = job
        cfg = TrainConfig(**{**asdict(base), "problem": name, "tau": tau, "cov_every": 0})
        problem = pde.make_problem(cfg.problem, cfg.d)
        mc_tr, rq_tr = [], []

        def probe(k, theta):
            mc_tr.append(covariance_trace_probe(problem, theta, SamplerKind.MC, tau, cfg.replicates,
                                                seed=derive_seed(cfg.seed, k, 0)))
            rq_tr.append(covariance_trace_probe(problem, theta, rq, tau, cfg.replicates,
                                                seed=derive_seed(cfg.seed, k, 1), block_index=k))

        train(cfg, callback=probe, callback_every=probe_every)
        mc_arr, rq_arr = np.array(mc_tr), np.array(rq_tr)
        return {
            "problem": name, "n": 1 << tau, "mean_ratio": float(np.mean(mc_arr / rq_arr)),
            "probes": len(mc_arr), "mean_mc_trace": float(mc_arr.mean()),
            "mean_rqmc_trace": float(rq_arr.mean()),
        }

    return _map(one, [(p, t) for p in problem_names for t in taus])


def _default_h(x):
    return np.sin(2.0 * np.pi * x) + x


@dataclass(frozen=True)
class Surrogate:
    """Scalar loss ``0.5 * int_0^1 (theta - h(x))^2 dx`` with known minimizer."""

    h: Callable[[np.ndarray], np.ndarray] = _default_h
    theta_star: float = 0.5

    def gap(self, theta):
        return 0.5 * (np.asarray(theta) - self.theta_star) ** 2


@dataclass
class OrderProbeResult:
    n_grid: list[int]
    gaps: dict[str, list[float]]
    slopes: dict[str, float]
    config: dict = field(default_factory=dict)


class ProbeDiverged(RuntimeError):
    pass


def _surrogate_run(surrogate: Surrogate, kind: SamplerKind, n: int, seed: int, alpha: float,
                   iterations: int, window: int, theta0: float) -> float:
    stream = SampleStream(kind, 1, seed=seed)
    chunk = max(1, (1 << 20) // n)
    theta = np.float64(theta0)
    late = []
    done = 0
    limit = 1e6 * (1.0 + abs(theta0 - surrogate.theta_star))
    while done < iterations:
        c = min(chunk, iterations - done)
        pts = stream.points(stream.cursor, c * n)
        stream.seek(stream.cursor + c * n)
        means = surrogate.h(pts[:, 0]).reshape(c, n).mean(axis=1)
        for j, m in enumerate(means):
            theta = optim.fixed_step(theta, theta - m, alpha)
            if done + j >= iterations - window:
                late.append(float(surrogate.gap(theta)))
        if not np.isfinite(theta) or abs(theta - surrogate.theta_star) > limit:
            raise ProbeDiverged(f"surrogate descent diverged for n={n}, sampler={kind.value}")
        done += c
    return float(np.mean(late))


def convergence_order_probe(surrogate: Surrogate | None = None, alpha: float = 0.5,
                            n_grid: Iterable[int] = tuple(1 << t for t in range(4, 13)),
                            seeds: Sequence[int] = tuple(range(8)),
                            samplers: Sequence[str] = ("mc", "sobol"),
                            iterations: int = 4000, window_frac: float = 0.2,
                            theta0: float = 0.0) -> OrderProbeResult:
    """Fit ``log(limiting gap)`` against ``log(n)`` for fixed-step SGD on the surrogate.

    Each run averages the analytic gap over the last ``window_frac`` of its
    iterations; randomized samplers are further averaged over ``seeds``.
    """
    surrogate = surrogate or Surrogate()
    n_grid = [int(n) for n in n_grid]
    if any(n < 1 or n & (n - 1) for n in n_grid):
        raise ValueError("n grid must hold powers of two")
    if not alpha > 0:
        raise ValueError("step size must be positive")
    window = max(1, int(round(window_frac * iterations)))
    kinds = [SamplerKind.parse(s) for s in samplers]

    def one(job):
        kind, n = job
        run_seeds = seeds if kind.randomized else seeds[:1]
        return float(np.mean([_surrogate_run(surrogate, kind, n, s, alpha, iterations, window, theta0)
                              for s in run_seeds]))

    jobs = [(k, n) for k in kinds for n in n_grid]
    flat = _map(one, jobs)
    gaps, slopes = {}, {}
    logn = np.log(np.array(n_grid, dtype=np.float64))
    for i, kind in enumerate(kinds):
        g = flat[i * len(n_grid):(i + 1) * len(n_grid)]
        gaps[kind.value] = g
        ga = np.array(g)
        slopes[kind.value] = float(np.polyfit(logn, np.log(ga), 1)[0]) if np.all(ga > 0) and len(g) > 1 else float("nan")
    cfg = {"alpha": alpha, "iterations": iterations, "window": window, "seeds": list(seeds),
           "theta0": theta0, "theta_star": surrogate.theta_star}
    return OrderProbeResult(n_grid, gaps, slopes, cfg)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_records(path: Path, records: Sequence[TrainRecord]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_records(path) -> list[TrainRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            def opt(key):
                return float(row[key]) if row[key] != "" else None
            out.append(TrainRecord(int(row["k"]), float(row["loss"]), opt("rel_l2"),
                                   float(row["grad_norm"]), opt("cov_trace"), float(row["wall_time_ms"])))
    return out


def run_metadata(config=None, extra: dict | None = None) -> dict:
    meta = {
        "code_version": __version__,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        "direction_numbers": DirectionNumbers.default().version,
        "layout_version": net.LAYOUT_VERSION,
    }
    if config is not None:
        meta["config"] = asdict(config)
        meta["seeds"] = {k: v for k, v in asdict(config).items() if "seed" in k}
    if extra:
        meta.update(extra)
    return meta


def emit_results(records: Sequence[TrainRecord], path, config: TrainConfig | None = None,
                 probes: dict | None = None, extra: dict | None = None) -> dict[str, Path]:
    """Write ``records.csv`` and ``run.json`` under the directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "records.csv", out / "run.json"
    _write_records(csv_path, records)
    meta = run_metadata(config, extra)
    if probes:
        meta["probes"] = probes
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"records": csv_path, "metadata": json_path}
