"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active, so plain
forward evaluation (embedding extraction, probing) carries no bookkeeping::

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the differentiable operations executed while active.

    Nodes are appended in execution order, which is a topological order of
    the graph; :func:`backward` walks the list once in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    t.op = op
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = backward_fn
        _ACTIVE_TAPES[-1].nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, "sqrt", (x,), lambda g: (g / (2.0 * out),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam`` times the gradient backward."""
    if lam < 0:
        raise ValueError(f"GRL lambda must be nonnegative, got {lam}")
    return _make(x.data, "grl", (x,), lambda g: (-lam * g,))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), "concat", xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather ``x.ravel()[flat_index]``; the result has ``flat_index``'s shape."""
    flat_index = np.asarray(flat_index)

    def back(g):
        out = np.zeros(x.data.size)
        np.add.at(out, flat_index.ravel(), g.ravel())
        return (out.reshape(x.shape),)

    return _make(x.data.reshape(-1)[flat_index], "take", (x,), back)


def pool_std(x: Tensor, axis: int) -> Tensor:
    """Population standard deviation along ``axis``.

    Where the deviation is exactly zero the subgradient 0 is used, so a
    single-frame input pools to zeros without producing infinities.
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    n = x.shape[axis]
    std = np.sqrt((centered * centered).mean(axis=axis))

    def back(g):
        s = np.expand_dims(std, axis)
        safe = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, np.expand_dims(g, axis) / (n * safe), 0.0)
        return (coef * centered,)

    return _make(std, "pool_std", (x,), back)


# ---------------------------------------------------------------- losses and geometry


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("degenerate embedding")
    out = x.data / norms

    def back(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _make(out, "l2_normalize", (x,), back)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= 1e-12 or nv <= 1e-12:
        raise ValueError("degenerate embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Class-weighted mean cross-entropy, normalised by the total sample weight."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    if class_weights is None:
        class_weights = np.ones(c)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (c,) or np.any(class_weights <= 0):
        raise ValueError("class_weights must be positive with one entry per class")
    w = class_weights[labels]
    total = w.sum()
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / total

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), back)


# ---------------------------------------------------------------- backward pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) through the tape; return gradients of all leaves.

    Leaf gradients are also stored on ``tensor.grad`` (overwritten, not
    accumulated across calls).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    leaves: dict[Tensor, None] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.backward_fn is None:
                leaves[parent] = None
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = np.asarray(pg, dtype=np.float64)
    out = {}
    for leaf in leaves:
        leaf.grad = grads[leaf]
        out[leaf] = grads[leaf]
    return out


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              max_grad_norm: float | None = None):
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    if max_grad_norm is not None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > max_grad_norm:
            grads = {k: g * (max_grad_norm / norm) for k, g in grads.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DSEB1"


def save_checkpoint(path, params: dict[str, np.ndarray | Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))


def dump_checkpoint(params: dict[str, np.ndarray | Tensor]) -> bytes:
    chunks = [CHECKPOINT_MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a DSEB1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return out


def parameters_of(*modules) -> dict[str, Tensor]:
    """Merge the ``named_parameters()`` of several modules, prefixing by position-free names."""
    merged: dict[str, Tensor] = {}
    for mod in modules:
        for name, p in mod.named_parameters().items():
            if name in merged:
                raise ValueError(f"duplicate parameter name {name}")
            merged[name] = p
    return merged


def numeric_gradient(f: Callable[[], float], params: Iterable[Tensor], h: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of ``f`` with respect to each entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
