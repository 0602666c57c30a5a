"""Fast oracle suite behind ``qmc-ritz check``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import net, pde
from .sampler import DirectionNumbers, SampleStream, SamplerKind, sobol_points, one_dim_projection_balance

SUITES = ("gradients", "pde", "sobol")


@dataclass(frozen=True)
class CheckResult:
    check_id: str
    passed: bool
    detail: str


def fd_gradient(fn: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences with per-parameter step ``h * max(1, |theta_i|)``."""
    out = np.empty_like(theta)
    for i in range(theta.size):
        step = h * max(1.0, abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        out[i] = (fn(tp) - fn(tm)) / (2.0 * step)
    return out


def rel_err(a, b) -> float:
    """Max absolute deviation scaled by the reference's largest entry."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def _check_net_gradients(rng) -> CheckResult:
    worst = 0.0
    for d in (1, 3, 5):
        shape = net.NetShape(d)
        theta = rng.normal(0.0, 0.6, shape.D)
        x = rng.random(d)
        full = net.evaluate_full(theta, shape, x)
        worst = max(worst, rel_err(full.grad_theta, fd_gradient(lambda t: net.evaluate(t, shape, x), theta)))
        for j in range(d):
            fd = fd_gradient(lambda t: net.evaluate_with_spatial_grad(t, shape, x).grad_x[j], theta)
            worst = max(worst, rel_err(full.grad_theta_grad_x[:, j], fd))
    return CheckResult("gradients.network", worst < 1e-5, f"max relative error {worst:.2e}")


def _check_estimator(rng) -> CheckResult:
    worst = 0.0
    for problem in (pde.poisson_example(3), pde.schroedinger_example(3)):
        theta = rng.normal(0.0, 0.6, problem.shape.D)
        X = rng.random((8, 3))
        g = pde.gradient_estimator(problem, theta, X).g
        fd = fd_gradient(lambda t: pde.empirical_loss(problem, t, X), theta)
        worst = max(worst, rel_err(g, fd))
    return CheckResult("gradients.estimator", worst < 1e-6, f"max relative error {worst:.2e}")


def _check_residuals(rng) -> list[CheckResult]:
    out = []
    for problem in (pde.poisson_example(20), pde.schroedinger_example(20)):
        pts = 0.01 + 0.98 * rng.random((20, 20))
        worst = max(pde.pde_residual_check(problem, x, 1e-3) for x in pts)
        out.append(CheckResult(f"pde.residual.{problem.kind.value}", worst < 1e-4, f"max residual {worst:.2e}"))
    return out


def _check_neumann(rng) -> CheckResult:
    bad = 0
    for problem in (pde.poisson_example(5), pde.schroedinger_example(5)):
        for k in range(5):
            for face in (0.0, 1.0):
                x = rng.random((4, 5))
                x[:, k] = face
                bad += int(np.any(problem.exact_grad(x)[:, k] != 0.0))
    return CheckResult("pde.neumann", bad == 0, f"{bad} faces with nonzero normal derivative")


def _check_van_der_corput(table) -> CheckResult:
    got = sobol_points(1, 0, 8, table)[:, 0]
    want = np.array([0, 0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125])
    return CheckResult("sobol.van_der_corput", bool(np.array_equal(got, want)), f"first points {got.tolist()}")


def _check_stratification(table) -> CheckResult:
    d = min(20, table.max_dim)
    failures = []
    for tau in range(1, 7):
        stream = SampleStream(SamplerKind.QMC_SOBOL, d, table=table)
        for k in range(17):
            block = stream.next_block(tau)
            for j in range(d):
                if one_dim_projection_balance(block, j, 1) != 0:
                    failures.append(f"tau={tau} k={k} dim={j + 1} level=1")
            if one_dim_projection_balance(block, 0, tau) != 0:
                failures.append(f"tau={tau} k={k} dim=1 level={tau}")
    detail = "all blocks stratified" if not failures else f"{len(failures)} failures, first: {failures[0]}"
    return CheckResult("sobol.stratification", not failures, detail)


def run_checks(only: str | None = None, table: DirectionNumbers | None = None, seed: int = 0) -> list[CheckResult]:
    if only is not None and only not in SUITES:
        raise ValueError(f"unknown suite {only!r}; expected one of {', '.join(SUITES)}")
    rng = np.random.default_rng(seed)
    table = table or DirectionNumbers.default()
    results: list[CheckResult] = []
    if only in (None, "gradients"):
        results += [_check_net_gradients(rng), _check_estimator(rng)]
    if only in (None, "pde"):
        results += _check_residuals(rng) + [_check_neumann(rng)]
    if only in (None, "sobol"):
        results += [_check_van_der_corput(table), _check_stratification(table)]
    return results
