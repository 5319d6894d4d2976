"""Reverse-mode differentiation over flat parameter vectors.

The engine is a small operation tape: dense matmul plus elementwise ops,
enough for fully-connected networks.  Backward passes are themselves built
out of tape ops, so gradients can be differentiated again; hvp() is an exact
reverse-over-reverse Hessian-vector product, and meta_grad() backpropagates
an outer gradient through an unrolled sequence of inner gradient-descent
steps (the (I - rate * H) chain, applied in reverse step order).

Everything is float64.  ReLU uses subgradient 0 at the kink and contributes
nothing to second derivatives, which is the usual almost-everywhere
convention; finite-difference checks must stay away from kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericError(RuntimeError):
    """A computation produced a non-finite value."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat float64 parameter vector; the unit of differentiation."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ContractError(f"ParamVector must be 1-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("ParamVector entries must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def minus_scaled(self, g: "ParamVector", rate: float) -> "ParamVector":
        """theta - rate * g, the one arithmetic form used for descent and replay."""
        if len(g) != len(self):
            raise ContractError(f"length mismatch: {len(self)} vs {len(g)}")
        return ParamVector(self.values - rate * g.values)

    def scaled(self, c: float) -> "ParamVector":
        return ParamVector(self.values * c)

    def add(self, other: "ParamVector") -> "ParamVector":
        if len(other) != len(self):
            raise ContractError(f"length mismatch: {len(self)} vs {len(other)}")
        return ParamVector(self.values + other.values)

    def allclose(self, other: "ParamVector", tol: float = 0.0) -> bool:
        if tol == 0.0:
            return np.array_equal(self.values, other.values)
        return bool(np.allclose(self.values, other.values, rtol=tol, atol=tol))

    @staticmethod
    def zeros(n: int) -> "ParamVector":
        return ParamVector(np.zeros(n))


# ---------------------------------------------------------------------------
# tape nodes and operations
# ---------------------------------------------------------------------------


class Node:
    """One tape entry: a value plus vjp closures toward its parents."""

    __slots__ = ("value", "parents", "vjps", "needs_grad")

    def __init__(self, value, parents=(), vjps=(), needs_grad=False):
        self.value = np.asarray(value)
        self.parents = parents
        self.vjps = vjps
        self.needs_grad = needs_grad


def constant(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64))


def leaf(x) -> Node:
    return Node(np.asarray(x, dtype=np.float64), needs_grad=True)


def _op(value, *pairs) -> Node:
    live = tuple((p, f) for p, f in pairs if p.needs_grad)
    if not live:
        return Node(value)
    return Node(value, tuple(p for p, _ in live), tuple(f for _, f in live), True)


def add(a: Node, b: Node) -> Node:
    return _op(a.value + b.value, (a, lambda g: g), (b, lambda g: g))


def sub(a: Node, b: Node) -> Node:
    return _op(a.value - b.value, (a, lambda g: g), (b, lambda g: neg(g)))


def neg(a: Node) -> Node:
    return _op(-a.value, (a, lambda g: neg(g)))


def mul(a: Node, b: Node) -> Node:
    return _op(a.value * b.value, (a, lambda g: mul(g, b)), (b, lambda g: mul(g, a)))


def div(a: Node, b: Node) -> Node:
    return _op(
        a.value / b.value,
        (a, lambda g: div(g, b)),
        (b, lambda g: neg(div(mul(g, a), mul(b, b)))),
    )


def smul(a: Node, c: float) -> Node:
    return _op(a.value * c, (a, lambda g: smul(g, c)))


def sadd(a: Node, c: float) -> Node:
    return _op(a.value + c, (a, lambda g: g))


def matmul(a: Node, b: Node) -> Node:
    return _op(
        a.value @ b.value,
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    )


def transpose(a: Node) -> Node:
    return _op(a.value.T, (a, lambda g: transpose(g)))


def relu(a: Node) -> Node:
    # Mask is detached: subgradient 0 at the kink, zero curvature a.e.
    mask = constant((a.value > 0.0).astype(np.float64))
    return _op(np.maximum(a.value, 0.0), (a, lambda g: mul(g, mask)))


def exp(a: Node) -> Node:
    out = _op(np.exp(a.value), (a, lambda g: g))
    if out.needs_grad:
        out.vjps = (lambda g: mul(g, out),)
    return out


def log(a: Node) -> Node:
    return _op(np.log(a.value), (a, lambda g: div(g, a)))


def asum(a: Node) -> Node:
    shape = a.value.shape
    return _op(np.sum(a.value), (a, lambda g: expand(g, shape)))


def mean(a: Node) -> Node:
    n = a.value.size
    shape = a.value.shape
    return _op(np.sum(a.value) / n, (a, lambda g: smul(expand(g, shape), 1.0 / n)))


def expand(s: Node, shape) -> Node:
    return _op(np.full(shape, float(s.value)), (s, lambda g: asum(g)))


def sum_rows(m: Node) -> Node:
    """Sum over axis 0: (n, k) -> (k,)."""
    nrows = m.value.shape[0]
    return _op(m.value.sum(axis=0), (m, lambda g: expand_rows(g, nrows)))


def sum_cols(m: Node) -> Node:
    """Sum over axis 1: (n, k) -> (n,)."""
    ncols = m.value.shape[1]
    return _op(m.value.sum(axis=1), (m, lambda g: expand_cols(g, ncols)))


def expand_rows(v: Node, nrows: int) -> Node:
    """(k,) -> (nrows, k) by row repetition."""
    return _op(np.tile(v.value, (nrows, 1)), (v, lambda g: sum_rows(g)))


def expand_cols(v: Node, ncols: int) -> Node:
    """(n,) -> (n, ncols) by column repetition."""
    return _op(np.repeat(v.value[:, None], ncols, axis=1), (v, lambda g: sum_cols(g)))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return _op(a.value.reshape(shape), (a, lambda g: reshape(g, old)))


def slice1d(v: Node, start: int, stop: int) -> Node:
    n = v.value.shape[0]
    return _op(v.value[start:stop], (v, lambda g: pad1d(g, start, n)))


def pad1d(v: Node, start: int, total: int) -> Node:
    k = v.value.shape[0]
    out = np.zeros(total)
    out[start : start + k] = v.value
    return _op(out, (v, lambda g: slice1d(g, start, start + k)))


def slice_rows(m: Node, start: int, stop: int) -> Node:
    n = m.value.shape[0]
    return _op(m.value[start:stop], (m, lambda g: pad_rows(g, start, n)))


def pad_rows(m: Node, start: int, total: int) -> Node:
    k = m.value.shape[0]
    out = np.zeros((total, m.value.shape[1]))
    out[start : start + k] = m.value
    return _op(out, (m, lambda g: slice_rows(g, start, start + k)))


def add_rowvec(m: Node, v: Node) -> Node:
    return add(m, expand_rows(v, m.value.shape[0]))


def dot(a: Node, b: Node) -> Node:
    return asum(mul(a, b))


def log_softmax(logits: Node) -> Node:
    """Row-wise log softmax; the per-row max shift is detached."""
    k = logits.value.shape[1]
    shift = constant(logits.value.max(axis=1))
    centered = sub(logits, expand_cols(shift, k))
    lse = log(sum_cols(exp(centered)))
    return sub(centered, expand_cols(lse, k))


# ---------------------------------------------------------------------------
# backward pass (graph-building, so it is differentiable again)
# ---------------------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen or not node.needs_grad:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order  # parents before consumers


def backward(out: Node, wrt: Sequence[Node]) -> list[Node]:
    """Gradients of a scalar node w.r.t. each node in wrt, as tape nodes."""
    if out.value.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {out.value.shape}")
    if not out.needs_grad:
        return [constant(np.zeros_like(w.value)) for w in wrt]
    grads: dict[int, Node] = {id(out): constant(np.float64(1.0))}
    for node in reversed(_toposort(out)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    return [grads.get(id(w)) or constant(np.zeros_like(w.value)) for w in wrt]


# ---------------------------------------------------------------------------
# loss-level API
# ---------------------------------------------------------------------------

# A loss function maps (params node, batch) -> scalar node and must be pure:
# identical (params, batch) give an identical tape.
LossFn = Callable[[Node, object], Node]


def _loss_name(f: LossFn) -> str:
    return getattr(f, "loss_name", getattr(f, "__name__", "loss"))


def loss_value(f: LossFn, theta: ParamVector, batch) -> float:
    """Evaluate the loss only (constant-folded, no gradient machinery)."""
    out = f(constant(theta.values), batch)
    val = float(out.value)
    if not np.isfinite(val):
        raise NumericError(f"non-finite loss ({val}) in {_loss_name(f)}")
    return val


def value_and_grad(f: LossFn, theta: ParamVector, batch) -> tuple[float, ParamVector]:
    p = leaf(theta.values)
    out = f(p, batch)
    val = float(out.value)
    if not np.isfinite(val):
        raise NumericError(f"non-finite loss ({val}) in {_loss_name(f)}")
    g = backward(out, [p])[0]
    if not np.all(np.isfinite(g.value)):
        raise NumericError(f"non-finite gradient in {_loss_name(f)}")
    return val, ParamVector(g.value)


def grad(f: LossFn, theta: ParamVector, batch) -> ParamVector:
    """First-order gradient of f at theta; does not mutate theta."""
    return value_and_grad(f, theta, batch)[1]


def hvp(f: LossFn, theta: ParamVector, v: ParamVector, batch) -> ParamVector:
    """Exact Hessian-vector product H @ v at theta (reverse-over-reverse)."""
    if len(v) != len(theta):
        raise ContractError(f"hvp direction length {len(v)} != parameter length {len(theta)}")
    p = leaf(theta.values)
    out = f(p, batch)
    if not np.isfinite(float(out.value)):
        raise NumericError(f"non-finite loss ({float(out.value)}) in {_loss_name(f)}")
    g = backward(out, [p])[0]
    s = asum(mul(g, constant(v.values)))
    h = backward(s, [p])[0]
    if not np.all(np.isfinite(h.value)):
        raise NumericError(f"non-finite hvp in {_loss_name(f)}")
    return ParamVector(h.value)


# ---------------------------------------------------------------------------
# inner adaptation and meta-gradients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptStep:
    gradient: ParamVector
    rate: float


@dataclass(frozen=True)
class AdaptTrace:
    """Replayable record of plain gradient-descent steps at a fixed rate.

    Invariant: final equals initial with each step's rate * gradient
    subtracted in sequence (exact float replay).  loss_fn/batch are kept so
    meta_grad can re-differentiate the same inner objective.
    """

    initial: ParamVector
    steps: tuple[AdaptStep, ...]
    final: ParamVector
    loss_fn: LossFn | None = None
    batch: object = None
    losses: tuple[float, ...] = ()  # loss before each step, then at final
    diverged: bool = False

    def replay_points(self) -> list[ParamVector]:
        """Parameters before each step, reproduced bit-exactly."""
        points = [self.initial]
        p = self.initial
        for s in self.steps[:-1] if self.steps else []:
            p = p.minus_scaled(s.gradient, s.rate)
            points.append(p)
        return points[: len(self.steps)]


def identity_trace(theta: ParamVector) -> AdaptTrace:
    """Zero-step trace: adaptation that leaves parameters untouched."""
    return AdaptTrace(initial=theta, steps=(), final=theta)


_DIVERGENCE_FACTOR = 10.0


def inner_adapt(
    f: LossFn,
    theta: ParamVector,
    rate: float,
    batch,
    steps: int,
) -> AdaptTrace:
    """`steps` full-batch gradient-descent steps at fixed rate.

    rate == 0 is allowed and returns theta bitwise unchanged.  If the loss
    grows by more than 10x over the trace the result is flagged as diverged
    (never clipped); training code surfaces the flag in metrics.
    """
    if steps < 1:
        raise ContractError(f"inner_adapt needs steps >= 1, got {steps}")
    if rate < 0:
        raise ContractError(f"inner_adapt needs rate >= 0, got {rate}")
    p = theta
    recorded: list[AdaptStep] = []
    losses: list[float] = []
    for _ in range(steps):
        val, g = value_and_grad(f, p, batch)
        losses.append(val)
        recorded.append(AdaptStep(gradient=g, rate=rate))
        p = p.minus_scaled(g, rate)
    final_loss = loss_value(f, p, batch)
    losses.append(final_loss)
    floor = max(abs(losses[0]), 1e-300)
    diverged = any(l > _DIVERGENCE_FACTOR * floor for l in losses[1:])
    return AdaptTrace(
        initial=theta,
        steps=tuple(recorded),
        final=p,
        loss_fn=f,
        batch=batch,
        losses=tuple(losses),
        diverged=diverged,
    )


def meta_grad(
    trace: AdaptTrace,
    g_outer: ParamVector,
    f_inner: LossFn | None = None,
    batches_inner: Sequence | None = None,
    mode: str = "exact",
) -> ParamVector:
    """Gradient of the outer loss w.r.t. the trace's initial parameters.

    Exact mode backpropagates g_outer through every inner step:
    v <- v - rate * H(theta_j) v, visited in reverse step order, where
    H(theta_j) is the inner-loss Hessian at the parameters before step j.
    First-order mode returns g_outer unchanged.
    """
    if mode not in ("exact", "first_order"):
        raise ContractError(f"unknown meta_grad mode {mode!r}")
    if len(g_outer) != len(trace.final):
        raise ContractError(
            f"outer gradient length {len(g_outer)} != parameter length {len(trace.final)}"
        )
    if mode == "first_order" or not trace.steps:
        return g_outer
    f = f_inner if f_inner is not None else trace.loss_fn
    if f is None:
        raise ContractError("meta_grad exact mode needs the inner loss function")
    if batches_inner is None:
        batches = [trace.batch] * len(trace.steps)
    elif len(batches_inner) == len(trace.steps):
        batches = list(batches_inner)
    else:
        raise ContractError(
            f"got {len(batches_inner)} inner batches for {len(trace.steps)} steps"
        )
    points = trace.replay_points()
    v = g_outer
    for j in reversed(range(len(trace.steps))):
        rate = trace.steps[j].rate
        if rate == 0.0:
            continue
        h = hvp(f, points[j], v, batches[j])
        v = v.minus_scaled(h, rate)
    return v
