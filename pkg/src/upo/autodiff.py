"""Small reverse-mode autodiff over flat float64 parameter vectors.

A :class:`Graph` is a list of primitive nodes in creation order, which is
also a valid topological order. ``forward`` evaluates it against a
:class:`ParamVector` and named input arrays; ``backward`` walks it in
reverse and scatters gradients back into a vector with the same layout.

Dropout is a first-class node: masks are supplied per call, keyed by site
name, and treated as constants during differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "ParamVector",
    "DropoutMask",
    "Graph",
    "OptState",
    "forward",
    "backward",
    "grad_check",
    "sample_dropout_masks",
    "opt_step",
    "make_opt_state",
    "learning_rate",
]


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    """Raised when a node cannot be evaluated with the shapes it receives."""

    def __init__(self, node: "Node", detail: str):
        self.node_name = node.name
        super().__init__(f"node {node.name!r} ({node.op}): {detail}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 array plus a ``name -> (offset, shape)`` layout."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise AutodiffError("ParamVector values must be 1-d")
        spans = sorted((off, off + _size(shape)) for off, shape in self.layout.values())
        cursor = 0
        for start, stop in spans:
            if start != cursor:
                raise AutodiffError("layout segments must be disjoint and contiguous")
            cursor = stop
        if cursor != self.values.size:
            raise AutodiffError(
                f"layout covers {cursor} entries but vector has {self.values.size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise AutodiffError("parameter vector contains non-finite values")

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Sequence[int]], fill: float = 0.0) -> "ParamVector":
        layout = {}
        offset = 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            layout[name] = (offset, shape)
            offset += _size(shape)
        return cls(np.full(offset, fill, dtype=np.float64), layout)

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.values[offset : offset + _size(shape)].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), dict(self.layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), dict(self.layout))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        if other.layout != self.layout:
            raise AutodiffError("cannot add ParamVectors with different layouts")
        return self.with_values(self.values + other.values)

    def layout_json(self) -> list:
        return [[name, off, list(shape)] for name, (off, shape) in self.layout.items()]

    @classmethod
    def layout_from_json(cls, rows) -> dict[str, tuple[int, tuple[int, ...]]]:
        return {name: (int(off), tuple(int(s) for s in shape)) for name, off, shape in rows}


def _size(shape: Sequence[int]) -> int:
    return int(math.prod(shape)) if len(shape) else 1


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout scale factors: every entry is 0 or 1/(1-rate)."""

    bits: np.ndarray
    rate: float
    seed: int

    @classmethod
    def sample(cls, shape: Sequence[int], rate: float, seed: int, stream: Sequence[int] = ()) -> "DropoutMask":
        if not 0.0 <= rate < 1.0:
            raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))
        keep = rng.random(tuple(shape)) >= rate
        bits = keep * (1.0 / (1.0 - rate))
        bits.setflags(write=False)
        return cls(bits, float(rate), int(seed))


def sample_dropout_masks(
    layout: Mapping[str, Sequence[int]], rate: float, seed: int, count: int
) -> list[dict[str, DropoutMask]]:
    """Draw ``count`` independent mask sets, one mask per dropout site.

    Each set is one sampled weight configuration; the same
    ``(seed, layout, rate)`` always reproduces the same masks.
    """
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if count < 1:
        raise AutodiffError("need at least one mask set")
    sets = []
    for t in range(count):
        sets.append(
            {
                site: DropoutMask.sample(shape, rate, seed, stream=(t, k))
                for k, (site, shape) in enumerate(sorted(layout.items()))
            }
        )
    return sets


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    name: str
    attrs: dict = field(default_factory=dict)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# Each op: forward(attrs, *xs) -> y ; vjp(attrs, g, y, *xs) -> tuple of input grads
# (None for inputs that carry no gradient).


def _fwd_take(a, table, idx):
    return table[idx]


def _vjp_take(a, g, y, table, idx):
    out = np.zeros_like(table)
    np.add.at(out, idx, g)
    return out, None


def _fwd_take_last(a, x, idx):
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]


def _vjp_take_last(a, g, y, x, idx):
    out = np.zeros_like(x)
    np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
    return out, None


def _fwd_select_rows(a, x, idx):
    return x[np.arange(x.shape[0]), idx]


def _vjp_select_rows(a, g, y, x, idx):
    out = np.zeros_like(x)
    out[np.arange(x.shape[0]), idx] = g
    return out, None


def _fwd_sum(a, x):
    return np.sum(x, axis=a.get("axis"), keepdims=a.get("keepdims", False))


def _expand_reduced(a, g, x):
    axis = a.get("axis")
    if axis is not None and not a.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _vjp_sum(a, g, y, x):
    return (np.array(_expand_reduced(a, g, x)),)


def _fwd_mean(a, x):
    return np.mean(x, axis=a.get("axis"), keepdims=a.get("keepdims", False))


def _vjp_mean(a, g, y, x):
    axis = a.get("axis")
    n = x.size if axis is None else x.shape[axis]
    return (np.array(_expand_reduced(a, g, x)) / n,)


def _fwd_concat(a, *xs):
    return np.concatenate(xs, axis=a["axis"])


def _vjp_concat(a, g, y, *xs):
    cuts = np.cumsum([x.shape[a["axis"]] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=a["axis"]))


def _vjp_matmul(a, g, y, x, w):
    gx = g @ np.swapaxes(w, -1, -2)
    if x.ndim == 1:
        gw = np.outer(x, g) if w.ndim == 2 else x * g
    else:
        gw = np.swapaxes(x, -1, -2) @ g
    return _unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)


def _vjp_softmax(a, g, y, x):
    axis = a.get("axis", -1)
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _vjp_log_softmax(a, g, y, x):
    axis = a.get("axis", -1)
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, x, y: x + y, lambda a, g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))),
    "sub": (lambda a, x, y: x - y, lambda a, g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))),
    "mul": (lambda a, x, y: x * y, lambda a, g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))),
    "div": (lambda a, x, y: x / y, lambda a, g, out, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / y**2, y.shape))),
    "neg": (lambda a, x: -x, lambda a, g, out, x: (-g,)),
    "matmul": (lambda a, x, w: x @ w, _vjp_matmul),
    "sigmoid": (lambda a, x: _sigmoid(x), lambda a, g, out, x: (g * out * (1.0 - out),)),
    "log_sigmoid": (lambda a, x: _log_sigmoid(x), lambda a, g, out, x: (g * _sigmoid(-x),)),
    "log": (lambda a, x: np.log(x), lambda a, g, out, x: (g / x,)),
    "exp": (lambda a, x: np.exp(x), lambda a, g, out, x: (g * out,)),
    "abs": (lambda a, x: np.abs(x), lambda a, g, out, x: (g * np.sign(x),)),
    "maximum_const": (lambda a, x: np.maximum(x, a["value"]), lambda a, g, out, x: (g * (x > a["value"]),)),
    "relu": (lambda a, x: np.maximum(x, 0.0), lambda a, g, out, x: (g * (x > 0.0),)),
    "softmax": (lambda a, x: np.exp(_log_softmax(x, a.get("axis", -1))), _vjp_softmax),
    "log_softmax": (lambda a, x: _log_softmax(x, a.get("axis", -1)), _vjp_log_softmax),
    "sum": (_fwd_sum, _vjp_sum),
    "mean": (_fwd_mean, _vjp_mean),
    "cumsum": (lambda a, x: np.cumsum(x, axis=a["axis"]), lambda a, g, out, x: (np.flip(np.cumsum(np.flip(g, a["axis"]), axis=a["axis"]), a["axis"]),)),
    "concat": (_fwd_concat, _vjp_concat),
    "take": (_fwd_take, _vjp_take),
    "take_last": (_fwd_take_last, _vjp_take_last),
    "select_rows": (_fwd_select_rows, _vjp_select_rows),
}


class Graph:
    """Builder for a static computation graph.

    Methods return integer node handles. Parameters refer to named segments
    of the :class:`ParamVector` passed to :func:`forward`; inputs are looked
    up by name in the input mapping; dropout sites by name in the mask set.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: set[str] = set()

    def _push(self, op: str, inputs: Iterable[int], name: str | None = None, **attrs) -> int:
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise AutodiffError(f"{op}: input {i} does not precede the node")
        name = name or f"{op}_{len(self.nodes)}"
        if name in self._names:
            raise AutodiffError(f"duplicate node name {name!r}")
        self._names.add(name)
        self.nodes.append(Node(op, inputs, name, attrs))
        return len(self.nodes) - 1

    # leaves
    def param(self, segment: str) -> int:
        """Leaf for a parameter segment; asking twice returns the same node."""
        for i, node in enumerate(self.nodes):
            if node.op == "param" and node.attrs["segment"] == segment:
                return i
        return self._push("param", (), name=f"param:{segment}", segment=segment)

    def input(self, key: str, ndim: int | None = None, integer: bool = False) -> int:
        return self._push("input", (), name=f"input:{key}", key=key, ndim=ndim, integer=integer)

    def const(self, value, name: str | None = None) -> int:
        value = np.asarray(value, dtype=np.float64)
        return self._push("const", (), name=name, value=value)

    def dropout(self, x: int, site: str) -> int:
        return self._push("dropout", (x,), name=f"dropout:{site}", site=site)

    def op(self, kind: str, *inputs: int, name: str | None = None, **attrs) -> int:
        if kind not in _OPS:
            raise AutodiffError(f"unknown op {kind!r}")
        return self._push(kind, inputs, name=name, **attrs)

    def __getattr__(self, kind: str):
        # g.add(a, b), g.relu(x), g.sum(x, axis=1) ...
        if kind in _OPS:
            return lambda *inputs, name=None, **attrs: self.op(kind, *inputs, name=name, **attrs)
        raise AttributeError(kind)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def dropout_sites(self) -> list[str]:
        return [n.attrs["site"] for n in self.nodes if n.op == "dropout"]


def forward(
    graph: Graph,
    params: ParamVector,
    inputs: Mapping[str, np.ndarray],
    dropout: Mapping[str, DropoutMask] | None = None,
) -> list[np.ndarray]:
    """Evaluate every node; returns values indexed by node handle."""
    values: list[np.ndarray] = []
    for node in graph.nodes:
        if node.op == "param":
            try:
                v = params[node.attrs["segment"]]
            except KeyError:
                raise ShapeError(node, "segment missing from parameter layout") from None
        elif node.op == "input":
            if node.attrs["key"] not in inputs:
                raise ShapeError(node, "input not supplied")
            v = np.asarray(inputs[node.attrs["key"]])
            ndim = node.attrs["ndim"]
            if ndim is not None and v.ndim != ndim:
                raise ShapeError(node, f"expected {ndim}-d input, got shape {v.shape}")
            if node.attrs["integer"]:
                if not np.issubdtype(v.dtype, np.integer):
                    raise ShapeError(node, f"expected integer input, got {v.dtype}")
            else:
                v = v.astype(np.float64, copy=False)
        elif node.op == "const":
            v = node.attrs["value"]
        elif node.op == "dropout":
            x = values[node.inputs[0]]
            mask = None if dropout is None else dropout.get(node.attrs["site"])
            if mask is None:
                v = x
            else:
                try:
                    v = x * mask.bits
                except ValueError as exc:
                    raise ShapeError(node, str(exc)) from None
                if v.shape != x.shape:
                    raise ShapeError(node, f"mask shape {mask.bits.shape} widens input {x.shape}")
        else:
            fwd, _ = _OPS[node.op]
            args = [values[i] for i in node.inputs]
            try:
                with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                    v = fwd(node.attrs, *args)
            except (ValueError, IndexError) as exc:
                shapes = ", ".join(str(np.shape(a)) for a in args)
                raise ShapeError(node, f"{exc} (input shapes {shapes})") from None
        values.append(v)
    return values


def backward(
    graph: Graph,
    loss: int,
    values: Sequence[np.ndarray],
    params: ParamVector,
    dropout: Mapping[str, DropoutMask] | None = None,
) -> ParamVector:
    """Gradient of a scalar node with respect to every parameter segment."""
    if np.ndim(values[loss]) != 0:
        raise AutodiffError(f"loss node {graph.nodes[loss].name!r} is not scalar: shape {np.shape(values[loss])}")
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss] = np.ones((), dtype=np.float64)
    out = params.zeros_like()
    for idx in range(loss, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = graph.nodes[idx]
        if node.op == "param":
            out[node.attrs["segment"]] += g
            continue
        if node.op in ("input", "const"):
            continue
        if node.op == "dropout":
            mask = None if dropout is None else dropout.get(node.attrs["site"])
            in_grads = (g if mask is None else g * mask.bits,)
        else:
            _, vjp = _OPS[node.op]
            args = [values[i] for i in node.inputs]
            in_grads = vjp(node.attrs, g, values[idx], *args)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
    return out


def grad_check(
    loss_fn: Callable[[ParamVector], tuple[float, ParamVector]],
    params: ParamVector,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst component-wise relative error of analytic vs central-difference gradient.

    ``loss_fn`` returns ``(loss, grad)``. The relative error of a component
    is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise AutodiffError(f"eps must be in (0, 1e-2], got {eps}")
    loss, grad = loss_fn(params)
    if not np.isfinite(loss):
        raise AutodiffError("loss is not finite")
    work = params.copy()
    numeric = np.empty_like(params.values)
    for k in range(params.values.size):
        orig = work.values[k]
        work.values[k] = orig + eps
        up, _ = loss_fn(work)
        work.values[k] = orig - eps
        down, _ = loss_fn(work)
        work.values[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise AutodiffError(f"loss is not finite near component {k}")
        numeric[k] = (up - down) / (2.0 * eps)
    analytic = grad.values
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptState:
    """Adam moments plus a linear warmup / linear decay schedule.

    ``total_steps=None`` disables the schedule (constant rate, no warmup).
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    warmup_frac: float = 0.0
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def make_opt_state(params: ParamVector, lr: float, warmup_frac: float = 0.0, total_steps: int | None = None, **kw) -> OptState:
    zeros = np.zeros_like(params.values)
    return OptState(zeros, zeros.copy(), 0, float(lr), float(warmup_frac), total_steps, **kw)


def learning_rate(state: OptState) -> float:
    """Rate applied at the state's current step (0-based)."""
    s = state.step
    if state.total_steps is None:
        return state.lr
    total = max(int(state.total_steps), 1)
    warm = int(math.ceil(state.warmup_frac * total))
    if s < warm:
        return state.lr * (s + 1) / warm
    return state.lr * max(0.0, (total - s) / max(total - warm, 1))


def opt_step(params: ParamVector, grads: ParamVector, state: OptState) -> tuple[ParamVector, OptState]:
    g = grads.values
    if g.shape != params.values.shape:
        raise AutodiffError(f"gradient shape {g.shape} does not match parameters {params.values.shape}")
    if not np.all(np.isfinite(g)):
        raise AutodiffError(f"non-finite gradient at step {state.step}")
    lr = learning_rate(state)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new_values), replace(state, m=m, v=v, step=t)
