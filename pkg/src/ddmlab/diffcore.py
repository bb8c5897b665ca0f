"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the lab needs are provided: arithmetic with
broadcasting, matmul, pow, exp, sqrt, sin/cos, silu, reductions and
concatenation. Gradients are accumulated in a fixed order (reverse creation
order of graph nodes) so repeated runs are bit-identical.

Besides :class:`Tensor` and :func:`grad` the module holds
:func:`checkpoint_segment` (recompute-on-backward) and :class:`Adam`.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ContractError",
    "NonFiniteError",
    "NondeterminismError",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "backward",
    "concat",
    "checkpoint_segment",
    "AdamConfig",
    "AdamState",
    "Adam",
    "adam_step",
]


class ContractError(ValueError):
    """A caller broke an operation's precondition (shape, scalar-ness, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or inf."""


class NondeterminismError(RuntimeError):
    """A checkpointed segment recomputed to a different value."""


_grad_enabled = True
_node_counter = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _enable_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: its inputs and a vector-Jacobian product.

    ``vjp`` receives one upstream gradient per output and returns one
    gradient (or ``None``) per input.
    """

    __slots__ = ("inputs", "vjp", "shapes", "seq", "op")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp, shapes):
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.shapes = tuple(shapes)
        self.seq = next(_node_counter)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "index", "name")

    # make numpy scalars/arrays defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.index = 0
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic --------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return _record("add", self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self.shape, other.shape
        return _record("sub", self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __neg__(self):
        return _record("neg", -self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = self._coerce(other)
        x, y = self.data, other.data
        return _record("mul", x * y, (self, other),
                       lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        x, y = self.data, other.data
        out = x / y

        def vjp(g):
            gx = g / y
            return _unbroadcast(gx, x.shape), _unbroadcast(-gx * out, y.shape)

        return _record("div", out, (self, other), vjp)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        p = float(exponent)
        x = self.data
        return _record("pow", x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        other = self._coerce(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2:
            raise ContractError(f"matmul expects 2-D operands, got {x.shape} @ {y.shape}")
        if x.shape[1] != y.shape[0]:
            raise ContractError(f"matmul shape mismatch {x.shape} @ {y.shape}")
        return _record("matmul", x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def __rmatmul__(self, other):
        return self._coerce(other) @ self

    # -- elementwise functions ---------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _record("exp", out, (self,), lambda g: (g * out,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _record("sqrt", out, (self,), lambda g: (g * 0.5 / out,))

    def sin(self):
        x = self.data
        return _record("sin", np.sin(x), (self,), lambda g: (g * np.cos(x),))

    def cos(self):
        x = self.data
        return _record("cos", np.cos(x), (self,), lambda g: (-g * np.sin(x),))

    def silu(self):
        x = self.data
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = x * s
        return _record("silu", out, (self,), lambda g: (g * (s + out * (1.0 - s)),))

    # -- shape / reductions ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record("sum", np.sum(self.data, axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record("reshape", self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self):
        if self.ndim != 2:
            raise ContractError("transpose expects a 2-D tensor")
        return _record("transpose", self.data.T, (self,), lambda g: (g.T,))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != np.dtype(dtype):
            raise ContractError(f"tensor dtype {x.dtype} != requested {np.dtype(dtype)}")
        return x
    return Tensor(x, dtype=dtype)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = np.asarray(out)
    _check_finite(op, out)
    t = Tensor(out)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, lambda gs: vjp(gs[0]), (out.shape,))
    return t


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- backward ----------------------------------------------------------------

def _collect_nodes(roots: Sequence[Tensor]) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [t.node for t in roots if t.node is not None]
    while stack:
        node = stack.pop()
        if node.seq in seen:
            continue
        seen[node.seq] = node
        for inp in node.inputs:
            if inp.node is not None and inp.node.seq not in seen:
                stack.append(inp.node)
    # creation order is a topological order
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(outputs: Sequence[Tensor], seeds: Sequence[np.ndarray],
             wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Vector-Jacobian product of ``outputs`` (weighted by ``seeds``) w.r.t. ``wrt``.

    Unreachable entries of ``wrt`` get zero gradients.
    """
    # gradients keyed by tensor identity; leaves and node outputs alike
    grads: dict[int, np.ndarray] = {}
    keep: dict[int, Tensor] = {}

    def acc(t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in grads:
            grads[k] = grads[k] + g
        else:
            grads[k] = g
            keep[k] = t

    for out, seed in zip(outputs, seeds):
        seed = np.asarray(seed, dtype=out.dtype)
        if seed.shape != out.shape:
            raise ContractError(f"seed shape {seed.shape} != output shape {out.shape}")
        acc(out, seed)

    # node -> its output tensors that received gradient
    produced: dict[int, list[Tensor]] = {}
    for k, t in list(keep.items()):
        if t.node is not None:
            produced.setdefault(t.node.seq, []).append(t)

    wanted = {id(t) for t in wrt}
    for node in _collect_nodes(outputs):
        outs = produced.get(node.seq)
        if not outs:
            continue
        upstream = [None] * len(node.shapes)
        for t in outs:
            g = grads.pop(id(t))
            if id(t) not in wanted:
                keep.pop(id(t), None)
            else:
                grads[id(t)] = g
            upstream[t.index] = g
        for i, shp in enumerate(node.shapes):
            if upstream[i] is None:
                upstream[i] = np.zeros(shp, dtype=outs[0].dtype)
        in_grads = node.vjp(upstream)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            first = id(inp) not in grads
            acc(inp, g)
            if first and inp.node is not None:
                produced.setdefault(inp.node.seq, []).append(inp)

    return [grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)) for t in wrt]


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    return backward([output], [np.ones(output.shape, dtype=output.dtype)], wrt)


# -- checkpointing -----------------------------------------------------------

def checkpoint_segment(segment: Callable[..., Tensor | Sequence[Tensor]],
                       *inputs: Tensor) -> Tensor | tuple[Tensor, ...]:
    """Evaluate ``segment(*inputs)`` without storing its internal graph.

    The forward pass runs with recording disabled. On backward the segment
    is replayed from the saved inputs with recording enabled and the inner
    graph is differentiated. Every tensor the segment depends on (including
    trainable parameters) must be passed through ``inputs``; any randomness
    must be an explicit input as well. A replay that does not reproduce the
    forward output bit-for-bit raises :class:`NondeterminismError`.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    with no_grad():
        result = segment(*inputs)
    single = isinstance(result, Tensor)
    outs = (result,) if single else tuple(result)
    out_data = [o.data for o in outs]

    if not (_grad_enabled and any(x.requires_grad for x in inputs)):
        return outs[0] if single else outs

    def vjp(upstream):
        fresh = [Tensor(x.data, requires_grad=x.requires_grad) for x in inputs]
        with _enable_grad():
            replay = segment(*fresh)
        replay = (replay,) if isinstance(replay, Tensor) else tuple(replay)
        for a, b in zip(replay, out_data):
            if a.data.shape != b.shape or not np.array_equal(a.data, b):
                raise NondeterminismError(
                    "checkpointed segment recomputed a different value; "
                    "pass every random draw in as an explicit input")
        live = [r for r in replay if r.requires_grad]
        seeds = [g for r, g in zip(replay, upstream) if r.requires_grad]
        targets = [f for f in fresh if f.requires_grad]
        gs = iter(backward(live, seeds, targets)) if live else iter(())
        return [next(gs, None) if f.requires_grad else None for f in fresh]

    node = Node("checkpoint", inputs, vjp, [d.shape for d in out_data])
    wrapped = []
    for i, d in enumerate(out_data):
        t = Tensor(d, requires_grad=True)
        t.node = node
        t.index = i
        wrapped.append(t)
    return wrapped[0] if single else tuple(wrapped)


# -- Adam --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    config: AdamConfig = field(default_factory=AdamConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if params.keys() != grads.keys():
        raise ContractError("params and grads must have the same keys")
    cfg = state.config
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k in params:
        p, g = params[k], np.asarray(grads[k])
        if p.shape != g.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape} for {k!r}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} != param shape {p.shape} for {k!r}")
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = (p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(cfg, new_m, new_v, t)


class Adam:
    """Stateful wrapper around :func:`adam_step` for training loops."""

    def __init__(self, config: AdamConfig | None = None):
        self.state = AdamState(config or AdamConfig())

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        params, self.state = adam_step(params, grads, self.state)
        return params
