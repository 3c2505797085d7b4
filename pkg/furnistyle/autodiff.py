# furnistyle/autodiff.py
"""
Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every op records its parents and a backward closure on the output tensor.
`backward(root)` orders the reachable graph topologically and applies the
chain rule once per node, summing gradients across fan-out.

Shape rules: no broadcasting. The only mixed-shape op is `scale`
(python scalar times tensor). A bias over a row batch is written as
matmul(ones(N, 1), b(1, out)).

Subgradient rule: relu / max_with_zero / clamp_min / sqrt pass gradient 0
exactly at their kink.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .config import DTYPE
from .errors import ContractError, DomainError, NumericsError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# -------------------------
# Tensor
# -------------------------
class Tensor:
    """Dense row-major float64 array node in a computation graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_op", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "leaf",
        _backward: Optional[BackwardFn] = None,
    ):
        arr = np.asarray(values, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericsError(f"non-finite values produced by '{_op}'")
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._op = _op
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    # ── operators ───────────────────────────────────────────────────
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _node(values: np.ndarray, parents: Tuple[Tensor, ...], op: str, fn: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, _parents=parents, _op=op, _backward=fn if needs else None)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -------------------------
# Ops
# -------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _node(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _node(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.values * c, (a,), "scale", lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _node(np.where(mask, a.values, 0.0), (a,), "relu", lambda g: (g * mask,))


def max_with_zero(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _node(np.where(mask, a.values, 0.0), (a,), "max_with_zero", lambda g: (g * mask,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.values > floor
    return _node(np.where(mask, a.values, floor), (a,), "clamp_min", lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _node(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.values)
    return _node(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (row-wise for matrices)."""
    if a.values.ndim not in (1, 2):
        raise ShapeError(f"softmax: expected 1-D or 2-D input, got {a.shape}")
    y = special.softmax(a.values, axis=-1)

    def _bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (a,), "softmax", _bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise DomainError("log: input has non-positive entries")
    x = a.values
    return _node(np.log(x), (a,), "log", lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise DomainError("sqrt: input has negative entries")
    y = np.sqrt(a.values)

    def _bw(g):
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g / (2.0 * safe), 0.0),)

    return _node(y, (a,), "sqrt", _bw)


def square(a: Tensor) -> Tensor:
    x = a.values
    return _node(x * x, (a,), "square", lambda g: (2.0 * x * g,))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _node(np.sum(a.values), (a,), "sum", lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _check_axis("sum", a, axis)
    return _node(
        np.sum(a.values, axis=axis),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = float(a.values.size)
        return _node(np.mean(a.values), (a,), "mean", lambda g: (np.broadcast_to(g / n, shape).copy(),))
    axis = _check_axis("mean", a, axis)
    n = float(shape[axis])
    return _node(
        np.mean(a.values, axis=axis),
        (a,),
        "mean",
        lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),),
    )


def _check_axis(op: str, a: Tensor, axis: int) -> int:
    nd = a.values.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % nd


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _node(np.dot(av, bv), (a, b), "dot", lambda g: (g * bv, g * av))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].values.ndim
    for t in tensors:
        if t.values.ndim != nd:
            raise ShapeError("concat: inputs differ in rank")
        rest = [s for i, s in enumerate(t.shape) if i != axis % nd]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != axis % nd]
        if rest != ref:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    axis = axis % nd
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), "concat", _bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got {a.shape}")
    return _node(a.values.T.copy(), (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {old} -> {shape}: {e}") from None
    return _node(out.copy(), (a,), "reshape", lambda g: (g.reshape(old),))


_OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "sum": sum,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "dot": dot,
    "max_with_zero": max_with_zero,
    "clamp_min": clamp_min,
    "transpose": transpose,
    "reshape": reshape,
}

KINK_OPS = ("relu", "max_with_zero", "clamp_min", "sqrt")


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Apply op `kind` by name. Extra keyword params: axis, c, floor, shape."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ContractError(f"unknown op kind '{kind}'")
    return fn(*inputs, **params)


# -------------------------
# Graph + backward
# -------------------------
@dataclass
class Graph:
    """Topologically ordered view of everything reachable from a root."""

    nodes: List[Tensor] = field(default_factory=list)
    parent_indices: List[Tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        index: Dict[int, int] = {}
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in index:
                continue
            if expanded:
                index[id(node)] = len(order)
                order.append(node)
                continue
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in index:
                    stack.append((p, False))
        parents = [tuple(index[id(p)] for p in n._parents) for n in order]
        return cls(order, parents)

    def kinds(self) -> List[str]:
        return [n._op for n in self.nodes]

    def kink_signature(self) -> Tuple[bytes, ...]:
        """Active/inactive pattern of every kinked op's input."""
        sig = []
        for n in self.nodes:
            if n._op in ("relu", "max_with_zero", "sqrt"):
                sig.append(np.packbits(n._parents[0].values.reshape(-1) > 0).tobytes())
            elif n._op == "clamp_min":
                # clamped entries are the ones where input < output
                sig.append(np.packbits(n._parents[0].values.reshape(-1) >= n.values.reshape(-1)).tobytes())
        return tuple(sig)


def backward(root: Tensor) -> Graph:
    """
    Accumulate d(root)/d(t) into `t.grad` for every requires_grad tensor
    reachable from `root`. Returns the graph that was traversed.
    """
    if root.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    graph = Graph.from_root(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# -------------------------
# Gradient check
# -------------------------
@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped_kinks: int
    skipped_unresolved: int
    passed: bool


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    n_samples: int = 100,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare analytic gradients against central differences on randomly
    ordered parameter coordinates until n_samples of them have been checked
    (or the coordinates run out).

    Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    A coordinate is skipped when the +eps and -eps evaluations cross a kink
    (their kink signatures differ), or when both derivatives sit below the
    rounding resolution of a central difference at this loss magnitude.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")

    for t in params.values():
        t.zero_grad()
    loss = loss_fn(params)
    f0 = _scalar_loss(loss)
    backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.values)).copy() for name, t in params.items()}

    coords = [(name, i) for name in sorted(params) for i in range(params[name].values.size)]
    order = np.random.default_rng(seed).permutation(len(coords))

    resolution = 1e-6 * max(1.0, abs(f0))
    worst = 0.0
    checked = kinks = unresolved = 0
    for k in order:
        if checked == n_samples:
            break
        name, i = coords[k]
        flat = params[name].values.reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = flat[i]
        plus = loss_fn(params)
        f_plus, sig_plus = _scalar_loss(plus), Graph.from_root(plus).kink_signature()
        flat[i] = orig - epsilon
        lo = flat[i]
        minus = loss_fn(params)
        f_minus, sig_minus = _scalar_loss(minus), Graph.from_root(minus).kink_signature()
        flat[i] = orig
        if sig_plus != sig_minus:
            kinks += 1
            continue
        numeric = (f_plus - f_minus) / (hi - lo)
        a = float(analytic[name].reshape(-1)[i])
        if max(abs(a), abs(numeric)) < resolution:
            unresolved += 1
            continue
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1

    for t in params.values():
        t.zero_grad()
    return GradCheckResult(worst, checked, kinks, unresolved, worst <= tolerance)


def _scalar_loss(t: Tensor) -> float:
    if t.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {t.shape}")
    v = float(t.values.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericsError("loss is not finite")
    return v
