"""Reverse-mode differentiation over numpy arrays.

Every trainable network in the package is an MLP whose weights live in a flat
:class:`ParameterBlock`. Ops accept either plain arrays or :class:`Var` nodes;
when any input is a ``Var`` the result is recorded on that node's tape,
otherwise the op runs as ordinary numpy (inference mode).

    >>> tape = Tape()
    >>> x = tape.watch(np.array(3.0))
    >>> loss = x * x
    >>> float(backward(tape, loss, x))
    6.0
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "identity")


class Var:
    """A node on a :class:`Tape`: value, accumulated gradient and a backward rule."""

    __slots__ = ("value", "grad", "tape", "parents", "backward_fn")

    def __init__(self, value, tape: "Tape", parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of the nodes created during one forward pass.

    Creation order is a valid topological order because a node can only be
    built from nodes that already exist.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def watch(self, value) -> Var:
        """Register a leaf whose gradient is wanted."""
        return Var(np.array(value, dtype=np.float64), self)

    def __len__(self):
        return len(self.nodes)


def backward(tape: Tape, loss: Var, wrt=None):
    """Back-propagate from scalar ``loss``.

    Returns the gradient of ``wrt`` (a leaf or a sequence of leaves), or None
    when ``wrt`` is omitted; gradients stay readable on ``node.grad``.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss is not a node of this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    stop = tape.nodes.index(loss)
    for node in reversed(tape.nodes[: stop + 1]):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if parent is None or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    if wrt is None:
        return None
    if isinstance(wrt, Var):
        return _grad_or_zeros(wrt)
    return [_grad_or_zeros(w) for w in wrt]


def _grad_or_zeros(v: Var):
    return np.zeros_like(v.value) if v.grad is None else v.grad


# ---------------------------------------------------------------- op plumbing


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value, inputs, backward_fn):
    """Wrap ``value`` as a tape node if any input is a Var, else return it."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x if isinstance(x, Var) else None for x in inputs)
    return Var(value, tape, parents, backward_fn)


def const(x):
    return _val(x)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = _val(a), _val(b)
    return _node(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _node(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _node(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def neg(a):
    return _node(-_val(a), (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _node(av * av, (a,), lambda g: (2.0 * av * g,))


def abs_(a):
    av = _val(a)
    return _node(np.abs(av), (a,), lambda g: (np.sign(av) * g,))


def exp(a):
    out = np.exp(_val(a))
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    return _node(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(_val(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(_val(a))
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    av = _val(a)
    mask = av > 0
    return _node(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(_val(a))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(a)) without overflow."""
    av = _val(a)
    out = np.minimum(av, 0.0) - np.log1p(np.exp(-np.abs(av)))
    return _node(out, (a,), lambda g: (g * _sigmoid(-av),))


def clip(a, lo, hi):
    av = _val(a)
    inside = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def activate(x, name: str):
    if name == "tanh":
        return tanh(x)
    if name == "relu":
        return relu(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------- linear algebra & shape


def matmul(a, b):
    av, bv = _val(a), _val(b)

    if av.ndim != 2 and bv.ndim != 2:
        raise ValueError("matmul needs at least one matrix operand")

    def bw(g):
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), bw)


def transpose(a):
    return _node(_val(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = _val(a)
    return _node(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)


def take(a, index):
    """Basic or fancy indexing; gradient scatters back (``np.add.at`` for fancy)."""
    av = _val(a)
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros_like(av)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(av[index], (a,), bw)


def scatter_rows(a, rows, n_rows: int):
    """Place the rows of ``a`` at positions ``rows`` of an ``n_rows`` zero matrix."""
    av = _val(a)
    out = np.zeros((n_rows,) + av.shape[1:])
    out[rows] = av
    return _node(out, (a,), lambda g: (g[rows],))


def concat(parts: Sequence, axis: int = -1):
    vals = [_val(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate(vals, axis=axis), tuple(parts), bw)


def sum_(a, axis=None, keepdims=False):
    av = _val(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _node(np.sum(av, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12):
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    return div(a, sqrt(add(sum_(square(a), axis=axis, keepdims=True), eps)))


def softmax(a, axis: int = -1):
    """Max-subtracted softmax."""
    av = _val(a)
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)


def log_softmax(a, axis: int = -1):
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw)


# ---------------------------------------------------------------- parameters


@dataclass
class MLPSpec:
    """Layer widths ``[in, h1, ..., out]``, one activation per hidden layer and one on the output."""

    widths: list[int]
    activations: list[str] = field(default_factory=list)
    output: str = "identity"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        n_hidden = len(self.widths) - 2
        if not self.activations:
            self.activations = ["tanh"] * n_hidden
        if len(self.activations) != n_hidden:
            raise ValueError(f"expected {n_hidden} hidden activations, got {len(self.activations)}")
        for a in [*self.activations, self.output]:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((f"W{i}", (a, b)))
            out.append((f"b{i}", (b,)))
        return out


class ParameterBlock:
    """Flat f64 parameter vector with named, shaped views."""

    def __init__(self, values, shapes, rng_seed: int = 0):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.shapes = [(str(n), tuple(int(d) for d in dims)) for n, dims in shapes]
        self.rng_seed = int(rng_seed)
        total = sum(math.prod(d) for _, d in self.shapes)
        if total != self.values.size:
            raise ValueError(f"shapes describe {total} values but {self.values.size} were given")
        self._offsets = {}
        start = 0
        for name, dims in self.shapes:
            n = math.prod(dims)
            self._offsets[name] = (start, start + n, dims)
            start += n

    @classmethod
    def for_mlp(cls, spec: MLPSpec, seed: int) -> "ParameterBlock":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for name, dims in spec.shapes():
            if name.startswith("W"):
                a = math.sqrt(6.0 / (dims[0] + dims[1]))
                chunks.append(rng.uniform(-a, a, size=dims).ravel())
            else:
                chunks.append(np.zeros(dims))
        return cls(np.concatenate(chunks), spec.shapes(), seed)

    def __len__(self):
        return self.values.size

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.values.copy(), self.shapes, self.rng_seed)

    def view(self, name: str) -> np.ndarray:
        lo, hi, dims = self._offsets[name]
        return self.values[lo:hi].reshape(dims)

    def unpack(self, flat=None) -> dict:
        """Named views of ``flat`` (defaults to the stored values).

        ``flat`` may be a tape leaf, in which case the views are tape nodes.
        """
        flat = self.values if flat is None else flat
        out = {}
        for name, (lo, hi, dims) in self._offsets.items():
            out[name] = reshape(take(flat, slice(lo, hi)), dims) if isinstance(flat, Var) \
                else flat[lo:hi].reshape(dims)
        return out

    def bind(self, tape: Tape) -> tuple[Var, dict]:
        """Watch the flat vector on ``tape``; return the leaf and its named views."""
        leaf = tape.watch(self.values)
        return leaf, self.unpack(leaf)

    def save(self, path) -> None:
        """Write ``<path>.bin`` (little-endian f64) and ``<path>.json``."""
        path = Path(path)
        self.values.astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {"shapes": [[n, list(d)] for n, d in self.shapes], "rng_seed": self.rng_seed}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "ParameterBlock":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        return cls(values, [(n, tuple(d)) for n, d in meta["shapes"]], meta["rng_seed"])


def mlp_forward(params, spec: MLPSpec, x):
    """Evaluate an MLP on a vector or a batch of row vectors.

    ``params`` is a :class:`ParameterBlock` or the dict returned by
    :meth:`ParameterBlock.unpack` / :meth:`ParameterBlock.bind`.
    """
    weights = params.unpack() if isinstance(params, ParameterBlock) else params
    width = _val(x).shape[-1] if _val(x).ndim else 0
    if width != spec.n_in:
        raise ValueError(f"input width mismatch: expected {spec.n_in}, got {width}")
    h = x
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = add(matmul(h, weights[f"W{i}"]), weights[f"b{i}"])
        h = activate(h, spec.activations[i] if i < n_layers - 1 else spec.output)
    return h


def mlp_reference(params: ParameterBlock, spec: MLPSpec, x) -> np.ndarray:
    """Loop-based forward pass kept independent of the tape ops (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    n_layers = len(spec.widths) - 1
    h = list(x)
    for i in range(n_layers):
        W = params.view(f"W{i}")
        b = params.view(f"b{i}")
        nxt = []
        for j in range(W.shape[1]):
            s = b[j]
            for k in range(W.shape[0]):
                s += h[k] * W[k, j]
            act = spec.activations[i] if i < n_layers - 1 else spec.output
            s = math.tanh(s) if act == "tanh" else (max(s, 0.0) if act == "relu" else s)
            nxt.append(s)
        h = nxt
    return np.array(h)


class Net:
    """An MLP and its parameters; the unit the training loop optimizes."""

    def __init__(self, spec: MLPSpec, seed: int, frozen: bool = False):
        self.spec = spec
        self.params = ParameterBlock.for_mlp(spec, seed)
        self.frozen = frozen
        self._bound: dict[int, tuple[Tape, Var, dict]] = {}

    def __call__(self, x, tape: Tape | None = None):
        if tape is None or self.frozen:
            return mlp_forward(self.params, self.spec, x)
        return mlp_forward(self.bound(tape)[1], self.spec, x)

    def bound(self, tape: Tape) -> tuple[Var, dict]:
        cached = self._bound.get(id(tape))
        if cached is None or cached[0] is not tape:
            leaf, views = self.params.bind(tape)
            self._bound = {id(tape): (tape, leaf, views)}
            return leaf, views
        return cached[1], cached[2]

    def grad(self, tape: Tape) -> np.ndarray:
        cached = self._bound.get(id(tape))
        if cached is None or cached[0] is not tape:
            return np.zeros_like(self.params.values)
        return _grad_or_zeros(cached[1])


# ---------------------------------------------------------------- verification


def finite_diff_check(f: Callable, params: ParameterBlock, h: float = 1e-5, grad=None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a flat parameter vector (array or tape leaf) to a scalar.
    ``grad`` overrides the analytic gradient (used for fault injection).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = params.values.astype(np.float64).copy()
    if grad is None:
        tape = Tape()
        leaf = tape.watch(x0)
        loss = f(leaf)
        if not np.isfinite(_val(loss)).all():
            raise FloatingPointError("f returned a non-finite value")
        grad = backward(tape, loss, leaf)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        fp, fm = float(_val(f(xp))), float(_val(f(xm)))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"f is non-finite near parameter {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(grad[i] - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: ParameterBlock, grads, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One in-place Adam update. Returns False (and skips) on non-finite gradients."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.isfinite(grads).all():
        state.skipped += 1
        logger.warning("adam: skipped step with non-finite gradient (%d skipped so far)", state.skipped)
        return False
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    params.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True
