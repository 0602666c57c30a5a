"""Width-4 residual swish network with exact nested derivatives.

The network is ``v(x) = T_out(f2(f1(T_in(x))))`` with residual blocks
``f(s) = swish(T_b(swish(T_a(s)))) + s``.  Spatial gradients are carried
forward as a ``(4, d)`` tangent matrix per point; parameter gradients of the
value and of the spatial gradient come from one reverse sweep over the
tangent-augmented forward pass, driven by cotangents on both outputs.

Parameter layout (layout version 1), all maps ``s -> A s + B``:
``A_in`` (4 x d, row-major), ``B_in`` (4), then for each block
``A_a`` (4 x 4), ``B_a`` (4), ``A_b`` (4 x 4), ``B_b`` (4), then
``A_out`` (4) and ``B_out`` (1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

__all__ = [
    "LAYOUT_VERSION",
    "NetShape",
    "DualEval",
    "FullEval",
    "Forward",
    "swish",
    "init_params",
    "check_params",
    "forward",
    "backward",
    "values",
    "evaluate",
    "evaluate_with_spatial_grad",
    "evaluate_full",
    "save_params",
    "load_params",
]

LAYOUT_VERSION = 1
WIDTH = 4
BLOCKS = 2


@dataclass(frozen=True)
class NetShape:
    d: int
    hidden_width: int = WIDTH
    num_blocks: int = BLOCKS

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"input dimension must be a positive integer, got {self.d!r}")
        if self.hidden_width != WIDTH or self.num_blocks != BLOCKS:
            raise ValueError(f"only hidden_width={WIDTH} and num_blocks={BLOCKS} are supported")

    @property
    def D(self) -> int:
        w = self.hidden_width
        return w * self.d + w + self.num_blocks * 2 * (w * w + w) + w + 1

    def slices(self) -> dict[str, slice]:
        """Named slices into the flat parameter vector, in layout order."""
        return dict(_layout(self))


@lru_cache(maxsize=None)
def _layout(shape: NetShape) -> tuple[tuple[str, slice], ...]:
    w, d = shape.hidden_width, shape.d
    sizes = [("A_in", w * d), ("B_in", w)]
    for b in range(shape.num_blocks):
        sizes += [(f"A{2 * b + 1}", w * w), (f"B{2 * b + 1}", w),
                  (f"A{2 * b + 2}", w * w), (f"B{2 * b + 2}", w)]
    sizes += [("A_out", w), ("B_out", 1)]
    out, pos = [], 0
    for name, size in sizes:
        out.append((name, slice(pos, pos + size)))
        pos += size
    return tuple(out)


class _Weights(NamedTuple):
    A_in: np.ndarray
    B_in: np.ndarray
    blocks: list
    A_out: np.ndarray
    B_out: np.ndarray


def _unpack(theta: np.ndarray, shape: NetShape) -> _Weights:
    sl = shape.slices()
    w, d = shape.hidden_width, shape.d
    blocks = []
    for b in range(shape.num_blocks):
        i, j = 2 * b + 1, 2 * b + 2
        blocks.append((theta[sl[f"A{i}"]].reshape(w, w), theta[sl[f"B{i}"]],
                       theta[sl[f"A{j}"]].reshape(w, w), theta[sl[f"B{j}"]]))
    return _Weights(theta[sl["A_in"]].reshape(w, d), theta[sl["B_in"]], blocks,
                    theta[sl["A_out"]], theta[sl["B_out"]])


def swish(x):
    """``x / (1 + exp(-x))``, evaluated through a stable logistic."""
    return x * expit(x)


def _swish_and_derivs(z: np.ndarray):
    s = expit(z)
    ds = s * (1.0 - s)
    return z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s))


def check_params(theta, shape: NetShape) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (shape.D,):
        raise ValueError(f"expected {shape.D} parameters for d={shape.d}, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector has non-finite entries")
    return theta


def init_params(shape: NetShape, seed: int) -> np.ndarray:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(shape.D)
    sl = shape.slices()
    w = shape.hidden_width
    fans = {"A_in": (shape.d, w), "A_out": (w, 1)}
    for name, s in sl.items():
        if not name.startswith("A"):
            continue
        fan_in, fan_out = fans.get(name, (w, w))
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        theta[s] = rng.uniform(-limit, limit, size=s.stop - s.start)
    return theta


@dataclass
class Forward:
    """Forward-pass record kept for the reverse sweep."""

    shape: NetShape
    weights: _Weights
    x: np.ndarray
    value: np.ndarray
    grad_x: np.ndarray | None
    tape: list
    h_out: np.ndarray
    J_out: np.ndarray | None


def forward(theta, shape: NetShape, X, tangents: bool = True) -> Forward:
    """Evaluate at the rows of ``X``; with ``tangents`` also carry ``d/dx`` forward."""
    theta = check_params(theta, shape)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != shape.d:
        raise ValueError(f"points have dimension {X.shape[1]}, network expects {shape.d}")
    wts = _unpack(theta, shape)
    n = X.shape[0]
    h = X @ wts.A_in.T + wts.B_in
    J = np.broadcast_to(wts.A_in, (n,) + wts.A_in.shape) if tangents else None
    tape = []
    for A1, B1, A2, B2 in wts.blocks:
        z1 = h @ A1.T + B1
        s1, p1, q1 = _swish_and_derivs(z1)
        z2 = s1 @ A2.T + B2
        s2, p2, q2 = _swish_and_derivs(z2)
        rec = {"h": h, "s1": s1, "p1": p1, "q1": q1, "p2": p2, "q2": q2, "J": J}
        h = s2 + h
        if tangents:
            T1 = np.matmul(A1, J)
            Js1 = p1[:, :, None] * T1
            T2 = np.matmul(A2, Js1)
            rec.update(T1=T1, Js1=Js1, T2=T2)
            J = p2[:, :, None] * T2 + J
        tape.append(rec)
    value = h @ wts.A_out + wts.B_out[0]
    grad_x = np.matmul(wts.A_out, J) if tangents else None
    return Forward(shape, wts, X, value, grad_x, tape, h, J)


def _outer(a, b, per_point):
    # sum_n a[n, i] b[n, j]
    if per_point:
        return a[:, :, None] * b[:, None, :]
    return a.T @ b


def _contract(a, b, per_point):
    # sum_{n, k} a[n, i, k] b[n, j, k]
    if per_point:
        return np.matmul(a, np.swapaxes(b, -1, -2))
    return np.tensordot(a, b, axes=([0, 2], [0, 2]))


def backward(fw: Forward, cv, cg=None, per_point: bool = False) -> np.ndarray:
    """Reverse sweep: ``sum_n cv[n] dv_n/dtheta + sum_n cg[n] . d(grad_x v_n)/dtheta``.

    ``cv`` has one entry per cotangent row and ``cg`` (optional) is ``(rows, d)``.
    Rows may outnumber the forward points when the forward pass holds a single
    point; the cache then broadcasts.  With ``per_point`` the result keeps one
    gradient row per cotangent row instead of summing.
    """
    wts, shape = fw.weights, fw.shape
    use_tangents = cg is not None
    if use_tangents and fw.J_out is None:
        raise ValueError("spatial-gradient cotangents need a forward pass with tangents")
    cv = np.asarray(cv, dtype=np.float64)
    rows = cv.shape[0]
    grads: dict[str, np.ndarray] = {}

    def red(a):
        return a if per_point else a.sum(axis=0)

    h_out = np.broadcast_to(fw.h_out, (rows,) + fw.h_out.shape[1:])
    grads["A_out"] = cv[:, None] * h_out
    grads["B_out"] = cv[:, None]
    bar_h = cv[:, None] * wts.A_out
    bar_J = None
    if use_tangents:
        cg = np.asarray(cg, dtype=np.float64)
        J_out = np.broadcast_to(fw.J_out, (rows,) + fw.J_out.shape[1:])
        grads["A_out"] = grads["A_out"] + np.einsum("nik,nk->ni", J_out, cg)
        bar_J = wts.A_out[None, :, None] * cg[:, None, :]
    grads["A_out"] = red(grads["A_out"])
    grads["B_out"] = red(grads["B_out"])

    for b in reversed(range(shape.num_blocks)):
        A1, _, A2, _ = wts.blocks[b]
        r = fw.tape[b]
        bar_z2 = bar_h * r["p2"]
        if use_tangents:
            bar_z2 = bar_z2 + (bar_J * r["T2"]).sum(axis=-1) * r["q2"]
            bar_T2 = r["p2"][:, :, None] * bar_J
        dA2 = _outer(bar_z2, np.broadcast_to(r["s1"], bar_z2.shape), per_point)
        if use_tangents:
            dA2 = dA2 + _contract(bar_T2, np.broadcast_to(r["Js1"], bar_T2.shape), per_point)
        bar_z1 = (bar_z2 @ A2) * r["p1"]
        if use_tangents:
            bar_Js1 = np.matmul(A2.T, bar_T2)
            bar_z1 = bar_z1 + (bar_Js1 * r["T1"]).sum(axis=-1) * r["q1"]
            bar_T1 = r["p1"][:, :, None] * bar_Js1
        dA1 = _outer(bar_z1, np.broadcast_to(r["h"], bar_z1.shape), per_point)
        if use_tangents:
            dA1 = dA1 + _contract(bar_T1, np.broadcast_to(r["J"], bar_T1.shape), per_point)
            bar_J = bar_J + np.matmul(A1.T, bar_T1)
        bar_h = bar_h + bar_z1 @ A1
        i, j = 2 * b + 1, 2 * b + 2
        grads[f"A{i}"], grads[f"B{i}"] = dA1, red(bar_z1)
        grads[f"A{j}"], grads[f"B{j}"] = dA2, red(bar_z2)

    X = np.broadcast_to(fw.x, (rows, shape.d))
    grads["A_in"] = _outer(bar_h, X, per_point)
    if use_tangents:
        grads["A_in"] = grads["A_in"] + red(bar_J)
    grads["B_in"] = red(bar_h)

    out = np.empty((rows, shape.D) if per_point else (shape.D,))
    for name, s in shape.slices().items():
        g = grads[name]
        out[..., s] = g.reshape(rows, -1) if per_point else g.ravel()
    return out


class DualEval(NamedTuple):
    value: float
    grad_x: np.ndarray


class FullEval(NamedTuple):
    value: float
    grad_x: np.ndarray
    grad_theta: np.ndarray
    grad_theta_grad_x: np.ndarray  # (D, d); column j is d(grad_x[j])/dtheta


def values(theta, shape: NetShape, X) -> np.ndarray:
    """Network values at the rows of ``X`` (no derivatives)."""
    return forward(theta, shape, X, tangents=False).value


def _single(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (shape.d,):
        raise ValueError(f"expected a point of dimension {shape.d}, got shape {x.shape}")
    return x[None, :]


def evaluate(theta, shape: NetShape, x) -> float:
    return float(forward(theta, shape, _single(x, shape), tangents=False).value[0])


def evaluate_with_spatial_grad(theta, shape: NetShape, x) -> DualEval:
    fw = forward(theta, shape, _single(x, shape))
    return DualEval(float(fw.value[0]), fw.grad_x[0].copy())


def evaluate_full(theta, shape: NetShape, x) -> FullEval:
    fw = forward(theta, shape, _single(x, shape))
    d = shape.d
    cv = np.zeros(d + 1)
    cv[0] = 1.0
    cg = np.vstack([np.zeros(d), np.eye(d)])
    jac = backward(fw, cv, cg, per_point=True)
    return FullEval(float(fw.value[0]), fw.grad_x[0].copy(), jac[0], jac[1:].T.copy())


def save_params(path, theta, shape: NetShape) -> None:
    theta = check_params(theta, shape)
    doc = {
        "d": shape.d,
        "hidden_width": shape.hidden_width,
        "num_blocks": shape.num_blocks,
        "layout_version": LAYOUT_VERSION,
        "theta": [float(t) for t in theta],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path) -> tuple[np.ndarray, NetShape]:
    doc = json.loads(Path(path).read_text())
    if doc.get("layout_version") != LAYOUT_VERSION:
        raise ValueError(f"unsupported layout version {doc.get('layout_version')!r}")
    shape = NetShape(doc["d"], doc["hidden_width"], doc["num_blocks"])
    return check_params(np.array(doc["theta"], dtype=np.float64), shape), shape
