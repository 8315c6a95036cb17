"""Minimal reverse-mode differentiation over dense float64 arrays.

Every op accepts plain arrays or :class:`Node` objects. When none of the
inputs is a node the op is evaluated eagerly and a plain ``ndarray`` comes
back, so value-only passes (oracles, Monte-Carlo estimates, sampling) pay no
bookkeeping cost. Once a node is involved the result is recorded on that
node's :class:`Tape` and :func:`backward` can replay it.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, InputError, StateError

CHECKPOINT_FORMAT_VERSION = 1


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "param_name")

    def __init__(self, value, parents=(), backward_fn=None, tape=None, param_name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, param={self.param_name})"


class Tape:
    """Ordered record of recorded ops; parameters enter through :meth:`watch`."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[tuple[Node, "ParamStore"]] = []

    def watch(self, store: "ParamStore") -> dict[str, Node]:
        bound = {}
        for name, value in store.params.items():
            leaf = Node(value, tape=self, param_name=name)
            self.nodes.append(leaf)
            self.leaves.append((leaf, store))
            bound[name] = leaf
        return bound

    def constant(self, value) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), tape=self)
        self.nodes.append(node)
        return node


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _record(value, parents: Sequence, backward_fn: Callable):
    tape = None
    for p in parents:
        if isinstance(p, Node):
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise StateError("inputs recorded on different tapes")
    if tape is None:
        return value
    node = Node(value, tuple(parents), backward_fn, tape)
    tape.nodes.append(node)
    return node


def backward(tape: Tape, output) -> None:
    """Accumulate d(output)/d(param) into the gradient buffers of watched stores.

    Intermediate gradients are reset on each call; parameter buffers are not,
    so repeated calls add up.
    """
    if not tape.nodes:
        raise StateError("backward called before any forward computation was recorded")
    if not isinstance(output, Node):
        return  # constant objective: zero contribution
    if output.tape is not tape:
        raise StateError("output was not recorded on this tape")
    if output.value.size != 1:
        raise ConfigurationError(f"backward needs a scalar output, got shape {output.value.shape}")
    for node in tape.nodes:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not isinstance(parent, Node):
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    for leaf, store in tape.leaves:
        if leaf.grad is not None:
            store.grads[leaf.param_name] += leaf.grad


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def matmul(x, w):
    """``x @ w`` with ``x`` of shape (..., n) and ``w`` of shape (n, k)."""
    xv, wv = value_of(x), value_of(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {xv.shape} @ {wv.shape}")

    def back(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _record(xv @ wv, (x, w), back)


def tanh(x):
    v = np.tanh(value_of(x))
    return _record(v, (x,), lambda g: (g * (1.0 - v * v),))


def exp(x):
    v = np.exp(value_of(x))
    return _record(v, (x,), lambda g: (g * v,))


def sum_(x, axis=None):
    xv = value_of(x)
    shape = xv.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(xv, axis=axis), (x,), back)


def mean(x, axis=None):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape):
    xv = value_of(x)
    old = xv.shape
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, index):
    xv = value_of(x)

    def back(g):
        out = np.zeros_like(xv)
        np.add.at(out, index, g)
        return (out,)

    return _record(xv[index], (x,), back)


def take_last(x, idx):
    """Gather along the last axis: ``out[..., j] = x[..., idx[..., j]]``.

    ``idx`` must have the same rank as ``x``; leading axes broadcast.
    """
    xv = value_of(x)
    idx = np.asarray(idx)
    if idx.ndim != xv.ndim:
        raise ConfigurationError(f"take_last index rank {idx.ndim} != input rank {xv.ndim}")
    idx = np.broadcast_to(idx, xv.shape[:-1] + idx.shape[-1:])
    out = np.take_along_axis(xv, idx, axis=-1)

    def back(g):
        full = np.zeros_like(xv)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _record(out, (x,), back)


def where(cond, x, fill=0.0):
    """Select ``x`` where ``cond`` holds and the constant ``fill`` elsewhere."""
    cond = np.asarray(cond, dtype=bool)
    xv = value_of(x)
    out = np.where(cond, xv, fill)

    def back(g):
        return (_unbroadcast(np.where(cond, g, 0.0), np.shape(xv)),)

    return _record(out, (x,), back)


def stop_gradient(x):
    return np.array(value_of(x), dtype=np.float64, copy=True)


def log_softmax(logits):
    xv = value_of(logits)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (logits,), back)


def masked_log_softmax(logits, active):
    """Log-softmax along the last axis restricted to ``active`` entries.

    Inactive entries are left out of the normaliser and come back as ``-inf``;
    they carry no gradient. Callers combine results through :func:`where`
    so no infinite value enters further arithmetic.
    """
    xv = value_of(logits)
    active = np.broadcast_to(np.asarray(active, dtype=bool), xv.shape)
    if not active.any(axis=-1).all():
        raise DomainError("masked_log_softmax needs a non-empty active set in every row")
    masked = np.where(active, xv, -np.inf)
    shift = masked.max(axis=-1, keepdims=True)
    e = np.where(active, np.exp(np.where(active, xv - shift, 0.0)), 0.0)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + shift
    out = np.where(active, xv - lse, -np.inf)
    p = np.where(active, np.exp(np.where(active, out, 0.0)), 0.0)

    def back(g):
        g = np.where(active, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (logits,), back)


def categorical_entropy(logits, active=None):
    """Entropy in nats of softmax(logits) along the last axis.

    ``active`` optionally restricts the support (e.g. per-dimension vocabulary).
    """
    xv = value_of(logits)
    if not np.all(np.isfinite(xv)):
        raise InputError("categorical_entropy received non-finite logits")
    if active is None:
        active = np.ones(xv.shape, dtype=bool)
    active = np.broadcast_to(np.asarray(active, dtype=bool), xv.shape)
    masked = np.where(active, xv, -np.inf)
    shift = masked.max(axis=-1, keepdims=True)
    e = np.where(active, np.exp(np.where(active, xv - shift, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    p = e / z
    logp = np.where(active, xv - shift - np.log(z), 0.0)
    h = -(p * logp).sum(axis=-1)

    def back(g):
        # dH/dl_j = -p_j (log p_j + H)
        return (-np.expand_dims(g, -1) * p * (logp + np.expand_dims(h, -1)),)

    return _record(h, (logits,), back)


def logsumexp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    m = values.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.exp(values - m).sum()))


# ------------------------------------------------------------ parameter store


class ParamStore:
    """Named float64 parameters with gradient buffers of identical shape."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InputError(f"parameter {name!r} is not finite")
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()]) if self.params else np.zeros(0)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()]) if self.grads else np.zeros(0)

    def set_flat(self, vector: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            p[...] = vector[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k][...] = v

    def save(self, path) -> None:
        path = Path(path)
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
        arrays["__names__"] = np.array(list(self.params), dtype=np.str_)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def load(self, path) -> None:
        """Load values saved by :meth:`save` into the already-declared parameters."""
        with np.load(Path(path), allow_pickle=False) as data:
            version = int(data["__format_version__"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise InputError(f"unsupported checkpoint format version {version}")
            names = [str(n) for n in data["__names__"]]
            if set(names) != set(self.params):
                missing = sorted(set(self.params) ^ set(names))
                raise ConfigurationError(f"checkpoint parameters do not match model: {missing}")
            for name in names:
                arr = data[f"param/{name}"]
                if arr.shape != self.params[name].shape:
                    raise ConfigurationError(
                        f"shape mismatch for {name!r}: {arr.shape} vs {self.params[name].shape}"
                    )
                self.params[name][...] = arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class FeedForwardNet:
    """Stack of affine layers with tanh between them.

    Parameters live in a shared :class:`ParamStore` under ``{prefix}.W{j}`` /
    ``{prefix}.b{j}``. ``activate_output`` also applies tanh to the last layer,
    which is how the torso feeding several heads is built.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        activate_output: bool = False,
        zero_init: bool = False,
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigurationError(f"invalid layer sizes {sizes}")
        self.store = store
        self.prefix = prefix
        self.sizes = tuple(int(s) for s in sizes)
        self.activate_output = activate_output
        rng = rng if rng is not None else np.random.default_rng(0)
        for j, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = np.zeros((fan_in, fan_out)) if zero_init else glorot_uniform(rng, fan_in, fan_out)
            store.add(f"{prefix}.W{j}", w)
            store.add(f"{prefix}.b{j}", np.zeros(fan_out))

    @property
    def input_width(self) -> int:
        return self.sizes[0]

    @property
    def output_width(self) -> int:
        return self.sizes[-1]

    def param_names(self) -> list[str]:
        names = []
        for j in range(len(self.sizes) - 1):
            names += [f"{self.prefix}.W{j}", f"{self.prefix}.b{j}"]
        return names

    def __call__(self, x, params: Mapping | None = None):
        return forward(self, x, params)


def forward(net: FeedForwardNet, x, params: Mapping | None = None):
    """Evaluate ``net`` on ``x`` of shape (..., input_width).

    ``params`` maps names to arrays or tape nodes; defaults to the store's
    current arrays (value-only evaluation).
    """
    params = net.store.params if params is None else params
    xv = value_of(x)
    if np.shape(xv)[-1:] != (net.input_width,):
        raise ConfigurationError(f"expected input width {net.input_width}, got shape {np.shape(xv)}")
    if not np.all(np.isfinite(xv)):
        raise InputError("non-finite network input")
    h = x
    n_layers = len(net.sizes) - 1
    for j in range(n_layers):
        h = add(matmul(h, params[f"{net.prefix}.W{j}"]), params[f"{net.prefix}.b{j}"])
        if j < n_layers - 1 or net.activate_output:
            h = tanh(h)
    return h


def numeric_gradient(fn: Callable[[], float], arrays: Iterable[np.ndarray], eps: float = 1e-5):
    """Central differences of ``fn()`` w.r.t. every entry of the given arrays (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = fn()
            arr[idx] = orig - eps
            fm = fn()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
