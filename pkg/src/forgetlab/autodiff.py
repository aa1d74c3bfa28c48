"""Small define-by-run reverse-mode autodiff over dense float64 numpy arrays.

Usage::

    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(x @ w, labels)
    backward(tape, loss)
    w.grad  # dloss/dw

Ops only record when a tape is active and at least one input requires a
gradient, so frozen forward passes (teachers, evaluation) cost nothing extra.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "TapeError",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "tanh",
    "sum",
    "mean",
    "l2_norm_sq",
    "l2_normalize",
    "concat",
    "split",
    "take_rows",
    "logsumexp",
    "log_softmax",
    "softmax_cross_entropy",
    "soft_cross_entropy",
    "cosine_similarity",
]

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    saved: dict = field(default_factory=dict)
    tensor: "Tensor | None" = None  # set for leaves only


class Tape:
    """Ordered record of the ops executed while the tape is active.

    A tape supports a single backward traversal; build a new one per step.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _leaf_id(self, t: "Tensor") -> int:
        if t._tape is self:
            return t._node
        node = _Node("leaf", (), len(self.nodes), None, tensor=t)
        self.nodes.append(node)
        t._tape, t._node = self, node.output
        return node.output

    def _record(self, kind, inputs, out, backward_fn) -> None:
        ids = tuple(
            -1 if not t.requires_grad else (t._node if t._tape is self else self._leaf_id(t))
            for t in inputs
        )
        node = _Node(kind, ids, len(self.nodes), backward_fn)
        self.nodes.append(node)
        out._tape, out._node = self, node.output

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, _copy: bool = True) -> None:
        arr = np.array(data, dtype=np.float64) if _copy else data
        if arr.size == 0:
            raise ShapeError(f"tensor with empty shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None
        self._node = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind}: non-finite output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=False, _copy=False)
    tape = _active_tape() if needs else None
    if tape is not None:
        if tape._consumed:
            raise TapeError("tape already traversed; build a new one")
        out.requires_grad = True
        tape._record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


# -- reductions ----------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim
    return _make(
        "sum", a.data.sum(axis=ax), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l2_norm_sq(a: Tensor) -> Tensor:
    """Sum of squares of every entry, as a scalar."""
    ad = a.data
    return _make("l2_norm_sq", np.asarray(np.dot(ad.ravel(), ad.ravel())), (a,), lambda g: (2.0 * g * ad,))


def l2_normalize(a: Tensor) -> Tensor:
    """Rows scaled to unit norm along the last axis; norms below 1e-12 are clamped."""
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True))
    denom = np.maximum(norm, NORM_EPS)
    y = ad / denom
    clamped = norm < NORM_EPS

    def bw(g):
        # d(x/n)/dx = (g - y (y.g)) / n where the norm is live; plain g / eps where clamped.
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(clamped, g, g - y * proj) / denom,)

    return _make("l2_normalize", y, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:-1] != ref[:-1]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ outside the last axis")
    if axis not in (-1, len(ref) - 1):
        raise ShapeError("concat: only the last axis is supported")
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=-1), tensors, bw)


def _slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make("slice", a.data[..., start:stop].copy(), (a,), bw)


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along the last axis."""
    if int(np.sum(sizes)) != a.shape[-1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to last dim of {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(_slice_last(a, start, start + n))
        start += n
    return out


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d tensor, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", a.data[idx], (a,), bw)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _make("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * p,))


def log_softmax(a: Tensor) -> Tensor:
    ad = a.data
    z = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def _check_logits(kind: str, logits: Tensor) -> None:
    if logits.data.ndim != 2:
        raise ShapeError(f"{kind}: logits must be 2-d, got shape {logits.shape}")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Computed from shifted logits; probabilities are only formed for the
    backward pass.
    """
    _check_logits("softmax_cross_entropy", logits)
    y = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, y])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _make("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


def soft_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-sum_k targets[k] * log_softmax(logits)[k]``."""
    _check_logits("soft_cross_entropy", logits)
    q = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if q.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: logits {logits.shape} vs targets {q.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -np.sum(q * logp) / n
    qsum = q.sum(axis=1, keepdims=True)

    def bw(g):
        return ((np.exp(logp) * qsum - q) * (g / n),)

    return _make("soft_cross_entropy", np.asarray(loss), (logits,), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosine similarities between rows of ``a`` (n x d) and ``b`` (m x d)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# -- traversal -------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every grad-requiring leaf seen on ``tape``.

    Returns the gradient for every node reached, keyed by node id.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("backward: loss was not produced on this tape")
    if tape._consumed:
        raise TapeError("backward: tape already traversed; rebuild the forward pass")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None or node.backward is None:
            continue
        for i, gi in zip(node.inputs, node.backward(g)):
            if i < 0 or gi is None:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    for node in tape.nodes:
        if node.tensor is None:
            continue
        t = node.tensor
        t._tape, t._node = None, -1
        g = grads.get(node.output)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"backward: non-finite gradient for leaf node {node.output}")
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad = t.grad + g.reshape(t.shape)
    return grads


GRAD_CHECK_FLOOR = 1e-3


def grad_check(
    function: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    fd_step: float = 1e-6,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``function`` must rebuild its graph from ``parameters`` on every call.
    With ``max_probes`` set, that many coordinates are sampled (across all
    parameters) instead of checking every entry.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    for p in parameters:
        p.zero_grad()
    with Tape() as tape:
        loss = function()
    if loss.requires_grad:
        backward(tape, loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in parameters]

    coords = [(pi, j) for pi, p in enumerate(parameters) for j in range(p.size)]
    if max_probes is not None and max_probes < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_probes, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for pi, j in coords:
        flat = parameters[pi].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + fd_step
        up = function().item()
        flat[j] = orig - fd_step
        down = function().item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * fd_step)
        a = analytic[pi].reshape(-1)[j]
        if not (np.isfinite(numeric) and np.isfinite(a)):
            raise NumericError("grad_check: non-finite value")
        # floor keeps near-zero true gradients from turning rounding noise into O(1) error
        err = abs(a - numeric) / max(GRAD_CHECK_FLOOR, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
