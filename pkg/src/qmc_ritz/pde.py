"""Neumann problems on the unit cube, their Ritz energies and error metrics.

Two problem families are supported:

* Poisson, ``-Lap u = f`` with ``int f = 0``; energy
  ``mean(0.5 |grad v|^2 - f v) + 0.5 mean(v)^2``.
* Static Schroedinger, ``-Lap u + V u = g``; energy
  ``mean(0.5 |grad v|^2 - g v + 0.5 V v^2)``.

All coefficient handles take an ``(n, d)`` array of points and return ``(n,)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import net
from .net import DualEval, NetShape
from .sampler import SampleBlock, SampleStream, SamplerKind

__all__ = [
    "ProblemKind",
    "Problem",
    "GradEstimate",
    "EvalSet",
    "poisson_example",
    "schroedinger_example",
    "make_problem",
    "PROBLEMS",
    "mu_P",
    "mu_S",
    "loss_terms",
    "empirical_loss",
    "loss_and_gradient",
    "gradient_estimator",
    "exact_solution",
    "make_eval_set",
    "relative_l2_error",
    "relative_l2_error_values",
    "pde_residual_check",
]

PointFn = Callable[[np.ndarray], np.ndarray]


class ProblemKind(enum.Enum):
    POISSON = "poisson"
    SCHROEDINGER = "schroedinger"


@dataclass(frozen=True, eq=False)
class Problem:
    kind: ProblemKind
    d: int
    f: PointFn | None = None
    V: PointFn | None = None
    g: PointFn | None = None
    exact: PointFn | None = None
    exact_grad: PointFn | None = None
    V_min: float | None = None
    V_max: float | None = None
    name: str = "custom"
    exact_l2_norm_sq_analytic: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.kind is ProblemKind.POISSON and self.f is None:
            raise ValueError("a Poisson problem needs a source f")
        if self.kind is ProblemKind.SCHROEDINGER:
            if self.V is None or self.g is None:
                raise ValueError("a Schroedinger problem needs V and g")
            if self.V_min is None or self.V_min <= 0 or (self.V_max is not None and self.V_max < self.V_min):
                raise ValueError("a Schroedinger problem needs 0 < V_min <= V_max")

    @property
    def shape(self) -> NetShape:
        return NetShape(self.d)

    @cached_property
    def exact_l2_norm_sq(self) -> float:
        """``int u*^2`` by scrambled-Sobol' quadrature on 2**16 points."""
        if self.exact is None:
            raise ValueError(f"problem {self.name!r} has no exact solution")
        pts = SampleStream(SamplerKind.RQMC_SCRAMBLE, self.d, seed=0).points(0, 1 << 16)
        return float(np.mean(self.exact(pts) ** 2))

    def validate(self, log2_points: int = 12) -> None:
        """Quadrature checks of the standing assumptions on the coefficients."""
        pts = SampleStream(SamplerKind.RQMC_SCRAMBLE, self.d, seed=0).points(0, 1 << log2_points)
        if self.kind is ProblemKind.POISSON:
            fv = self.f(pts)
            if abs(fv.mean()) > 1e-2 * (np.sqrt(np.mean(fv**2)) + 1e-12):
                raise ValueError(f"source of {self.name!r} does not integrate to zero (mean {fv.mean():.3g})")
        else:
            Vv = self.V(pts)
            vmax = np.inf if self.V_max is None else self.V_max
            if np.any(Vv < self.V_min) or np.any(Vv > vmax):
                raise ValueError(f"potential of {self.name!r} leaves [V_min, V_max]")


def _sinpi(x):
    # sin(pi x), exactly zero at integers
    r = np.remainder(x, 2.0)
    sign = np.where(r >= 1.0, -1.0, 1.0)
    r = np.where(r >= 1.0, r - 1.0, r)
    r = np.minimum(r, 1.0 - r)
    return sign * np.sin(np.pi * r)


def _cospi(x):
    return _sinpi(np.asarray(x) + 0.5)


def poisson_example(d: int = 20) -> Problem:
    """Polynomial Poisson problem with ``u* = S(x)^2 - c``, ``S = sum(x^3/3 - x^2/2)``.

    ``c = d * 17/5040 + (d/12)^2`` makes ``u*`` mean-zero (717/252 at d = 20).
    """
    const = d * 17.0 / 5040.0 + (d / 12.0) ** 2

    def S(X):
        return np.sum(X**3 / 3.0 - X**2 / 2.0, axis=1)

    def f(X):
        return -(2.0 * np.sum((X**2 - X) ** 2, axis=1) + np.sum(4.0 * X - 2.0, axis=1) * S(X))

    def exact(X):
        return S(X) ** 2 - const

    def exact_grad(X):
        return 2.0 * S(X)[:, None] * (X**2 - X)

    return Problem(ProblemKind.POISSON, d, f=f, exact=exact, exact_grad=exact_grad,
                   name=f"poisson{d}", meta={"mean_zero_constant": const})


def schroedinger_example(d: int = 20) -> Problem:
    """``-Lap u + pi^2 u = 2 pi^2 sum cos(pi x_k)`` with ``u* = sum cos(pi x_k)``."""
    pi2 = np.pi**2

    def V(X):
        return np.full(X.shape[0], pi2)

    def g(X):
        return 2.0 * pi2 * np.sum(_cospi(X), axis=1)

    def exact(X):
        return np.sum(_cospi(X), axis=1)

    def exact_grad(X):
        return -np.pi * _sinpi(X)

    return Problem(ProblemKind.SCHROEDINGER, d, V=V, g=g, exact=exact, exact_grad=exact_grad,
                   V_min=pi2, V_max=pi2, name=f"schroedinger{d}",
                   exact_l2_norm_sq_analytic=d / 2.0)


PROBLEMS = {"poisson20": poisson_example, "schroedinger20": schroedinger_example}


def make_problem(name: str, d: int | None = None) -> Problem:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; expected one of {', '.join(PROBLEMS)}") from None
    return factory(20 if d is None else d)


@dataclass(frozen=True)
class GradEstimate:
    g: np.ndarray
    k: int | None = None
    n: int | None = None
    sampler: str | None = None


def mu_P(x, e: DualEval, f_val: float) -> float:
    return 0.5 * float(np.dot(e.grad_x, e.grad_x)) - f_val * e.value


def mu_S(x, e: DualEval, V_val: float, g_val: float) -> float:
    return 0.5 * float(np.dot(e.grad_x, e.grad_x)) - g_val * e.value + 0.5 * V_val * e.value**2


def _points(problem: Problem, block) -> tuple[np.ndarray, dict]:
    if isinstance(block, SampleBlock):
        pts, meta = block.points, {"k": block.iteration, "n": block.n, "sampler": block.kind.value}
    else:
        pts = np.atleast_2d(np.asarray(block, dtype=np.float64))
        meta = {"k": None, "n": pts.shape[0], "sampler": None}
    if pts.shape[1] != problem.d:
        raise ValueError(f"block has dimension {pts.shape[1]}, problem {problem.name!r} has {problem.d}")
    if pts.shape[0] == 0:
        raise ValueError("empty block")
    return pts, meta


def _pointwise(problem: Problem, fw: net.Forward, X: np.ndarray):
    """Per-point energy density and the value cotangent of the data term."""
    v, gx = fw.value, fw.grad_x
    half_grad_sq = 0.5 * np.sum(gx * gx, axis=1)
    if problem.kind is ProblemKind.POISSON:
        fv = problem.f(X)
        return half_grad_sq - fv * v, -fv
    Vv, gv = problem.V(X), problem.g(X)
    return half_grad_sq - gv * v + 0.5 * Vv * v * v, Vv * v - gv


def loss_terms(problem: Problem, theta, block) -> tuple[float, float]:
    """``(mean energy density, penalty)``; the penalty is 0 for Schroedinger."""
    X, _ = _points(problem, block)
    fw = net.forward(theta, problem.shape, X)
    mu, _ = _pointwise(problem, fw, X)
    penalty = 0.5 * float(np.mean(fw.value)) ** 2 if problem.kind is ProblemKind.POISSON else 0.0
    return float(np.mean(mu)), penalty


def empirical_loss(problem: Problem, theta, block) -> float:
    data, penalty = loss_terms(problem, theta, block)
    return data + penalty


def loss_and_gradient(problem: Problem, theta, block) -> tuple[float, GradEstimate]:
    """Empirical loss and its exact parameter gradient from one shared forward pass.

    The gradient is assembled as a single reverse sweep with per-point
    cotangents ``grad_x v / n`` on the spatial gradient and ``c_j / n`` on the
    value, where ``c_j = -f_j + mean(v)`` (Poisson, the second part from the
    squared-mean penalty) or ``c_j = V_j v_j - g_j`` (Schroedinger).
    """
    X, meta = _points(problem, block)
    fw = net.forward(theta, problem.shape, X)
    n = X.shape[0]
    mu, cv = _pointwise(problem, fw, X)
    loss = float(np.mean(mu))
    if problem.kind is ProblemKind.POISSON:
        mean_v = float(np.mean(fw.value))
        loss += 0.5 * mean_v**2
        cv = cv + mean_v
    g = net.backward(fw, cv / n, fw.grad_x / n)
    return loss, GradEstimate(g, **meta)


def gradient_estimator(problem: Problem, theta, block) -> GradEstimate:
    return loss_and_gradient(problem, theta, block)[1]


def exact_solution(problem: Problem, x) -> float:
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    x = np.asarray(x, dtype=np.float64)
    return float(problem.exact(x[None, :])[0])


@dataclass(frozen=True, eq=False)
class EvalSet:
    points: np.ndarray
    exact_values: np.ndarray

    @cached_property
    def exact_l2_sq(self) -> float:
        return float(np.mean(self.exact_values**2))


def make_eval_set(problem: Problem, log2_points: int = 14, seed: int = 0) -> EvalSet:
    """Frozen scrambled-Sobol' point set used for every relative-error evaluation."""
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    pts = SampleStream(SamplerKind.RQMC_SCRAMBLE, problem.d, seed=seed).points(0, 1 << log2_points)
    return EvalSet(pts, problem.exact(pts))


def relative_l2_error_values(v: np.ndarray, eval_set: EvalSet) -> float:
    denom = eval_set.exact_l2_sq
    if not denom > 0:
        raise ValueError("exact solution has non-positive squared norm on the evaluation set")
    return float(np.sqrt(np.mean((v - eval_set.exact_values) ** 2) / denom))


def relative_l2_error(problem: Problem, theta, eval_set: EvalSet) -> float:
    return relative_l2_error_values(net.values(theta, problem.shape, eval_set.points), eval_set)


def pde_residual_check(problem: Problem, x, h: float = 1e-3) -> float:
    """Strong-form residual of ``u*`` at ``x`` with a central second-difference Laplacian."""
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.d,):
        raise ValueError(f"expected a point of dimension {problem.d}")
    if h <= 0 or np.any(x < h) or np.any(x > 1.0 - h):
        raise ValueError(f"point must keep a margin of {h} from the boundary")
    d = problem.d
    steps = h * np.eye(d)
    stencil = np.vstack([x[None, :], x + steps, x - steps])
    u = problem.exact(stencil)
    lap = np.sum(u[1 : d + 1] - 2.0 * u[0] + u[d + 1 :]) / h**2
    X = x[None, :]
    if problem.kind is ProblemKind.POISSON:
        return float(abs(-lap - problem.f(X)[0]))
    return float(abs(-lap + problem.V(X)[0] * u[0] - problem.g(X)[0]))
