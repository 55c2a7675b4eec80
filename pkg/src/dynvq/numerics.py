"""Dense float64 arrays with a small define-by-run reverse-mode tape.

Every differentiable operation produces a :class:`Tensor` and, when a
:class:`Tape` is active and some input requires a gradient, appends a node to
that tape.  Nodes are appended in creation order, so walking the tape
backwards is a valid reverse topological order.

The operation set is deliberately narrow: it covers exactly what the
autoencoder, the codebook posterior and the CTC loss need.  Sequential loops
(the tanh recurrence) run in numba kernels.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

# Finite stand-in for log(0); keeps every tensor finite while exp() of it is 0.
LOG_ZERO = -1.0e30


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a probe evaluation is NaN or infinite."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded.  Outside any tape, operations run forward only.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: Tensor) -> None:
        node._seq = len(self.nodes)
        node._tape = self
        self.nodes.append(node)


def record_op(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``value`` as the output of an operation on ``parents``.

    ``backward(g)`` must return one gradient (or ``None``) per parent, each
    shaped like that parent.  This is the extension hook used by modules that
    define fused operations (e.g. the CTC loss).
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError("forward pass produced a non-finite value")
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        tape._record(out)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` starting from the scalar ``loss``.

    Returns a mapping from every leaf tensor with ``requires_grad`` that the
    loss depends on to its gradient; the same array is stored on ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = seed
            return {loss: seed}
        return {}
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    grads[id(loss)] = seed
    for node in reversed(tape.nodes[: loss._seq + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                if parent._tape is not tape or parent._seq >= node._seq:
                    raise TapeError("tape is not acyclic in creation order")
            else:
                leaves[id(parent)] = parent
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


# ----------------------------------------------------------------------------
# elementwise and linear algebra
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def total(a) -> Tensor:
    a = as_tensor(a)
    return record_op(np.sum(a.data), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return record_op(np.mean(a.data), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def stop_gradient(a) -> Tensor:
    """Identity forward, zero derivative backward."""
    a = as_tensor(a)
    return record_op(a.data.copy(), (a,), lambda g: (None,))


def take_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def _bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return record_op(a.data[index], (a,), _bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return record_op(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


def mse(a, b) -> Tensor:
    """Mean squared difference over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return record_op(
        np.mean(diff * diff),
        (a, b),
        lambda g: (2.0 * float(g) * diff / n, -2.0 * float(g) * diff / n),
    )


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return record_op(out, (a,), _bw)


def group_logsumexp(a, groups, n_groups: int) -> Tensor:
    """Row-wise log-sum-exp of the columns sharing a group id.

    ``groups[j]`` names the output column that input column ``j`` feeds.
    Output columns with no members hold ``LOG_ZERO``.
    """
    a = as_tensor(a)
    groups = np.asarray(groups, dtype=np.int64)
    m, _ = a.shape
    out = np.full((m, n_groups), LOG_ZERO)
    weights = np.zeros_like(a.data)
    for k in range(n_groups):
        cols = np.flatnonzero(groups == k)
        if cols.size == 0:
            continue
        block = a.data[:, cols]
        top = block.max(axis=1, keepdims=True)
        e = np.exp(block - top)
        s = e.sum(axis=1, keepdims=True)
        out[:, k] = (top + np.log(s))[:, 0]
        weights[:, cols] = e / s

    def _bw(g):
        return (weights * g[:, groups],)

    return record_op(out, (a,), _bw)


def pairwise_distance(z, book) -> Tensor:
    """Euclidean (not squared) distance between every row of ``z`` and of ``book``."""
    z, book = as_tensor(z), as_tensor(book)
    diff = z.data[:, None, :] - book.data[None, :, :]
    d = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
    safe = np.where(d > 0.0, d, 1.0)

    def _bw(g):
        w = np.where(d > 0.0, g / safe, 0.0)
        unit = w[:, :, None] * diff
        return (unit.sum(axis=1), -unit.sum(axis=0))

    return record_op(d, (z, book), _bw)


def straight_through(z, b) -> Tensor:
    """Fused ``z + b - stop_gradient(z)``.

    The forward value is ``b`` bit for bit; the upstream gradient reaches
    both ``z`` and ``b`` unchanged.
    """
    z, b = as_tensor(z), as_tensor(b)
    if z.shape != b.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {b.shape}")
    return record_op(b.data.copy(), (z, b), lambda g: (g, g))


# ----------------------------------------------------------------------------
# sequence operations over concatenated utterances
# ----------------------------------------------------------------------------


def segment_mean(a, starts) -> Tensor:
    """Mean of consecutive row blocks; ``starts`` are the block start rows."""
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.diff(np.append(starts, a.shape[0]))
    out = np.add.reduceat(a.data, starts, axis=0) / lengths[:, None]

    def _bw(g):
        return (np.repeat(g / lengths[:, None], lengths, axis=0),)

    return record_op(out, (a,), _bw)


def repeat_rows(a, counts) -> Tensor:
    a = as_tensor(a)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape[0] != a.shape[0] or (counts < 1).any():
        raise ValueError("repeat counts must be positive, one per row")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return record_op(
        np.repeat(a.data, counts, axis=0),
        (a,),
        lambda g: (np.add.reduceat(g, starts, axis=0),),
    )


def edge_conv1d(x, weight, bias, seq_starts) -> Tensor:
    """Length-preserving 1-D convolution over time with edge replication.

    ``x`` is (M, F) holding several sequences back to back; ``seq_starts`` are
    their first rows.  ``weight`` is (k, F, C) with odd k.  Padding repeats
    each sequence's first/last frame, so a constant input stays constant.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k, f, c = weight.shape
    m = x.shape[0]
    seq_starts = np.asarray(seq_starts, dtype=np.int64)
    seq_ends = np.append(seq_starts[1:], m)
    owner = np.repeat(np.arange(seq_starts.size), seq_ends - seq_starts)
    lo, hi = seq_starts[owner], seq_ends[owner] - 1
    half = k // 2
    rows = np.arange(m)[:, None] + np.arange(-half, half + 1)[None, :]
    rows = np.clip(rows, lo[:, None], hi[:, None])
    cols = x.data[rows].reshape(m, k * f)
    wmat = weight.data.reshape(k * f, c)
    out = cols @ wmat + bias.data

    def _bw(g):
        gcols = (g @ wmat.T).reshape(m, k, f)
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows.ravel(), gcols.reshape(m * k, f))
        return (gx, (cols.T @ g).reshape(k, f, c), g.sum(axis=0))

    return record_op(out, (x, weight, bias), _bw)


@numba.njit(cache=True)
def _recur_forward(pre, wh, is_start):
    m, h = pre.shape
    out = np.empty((m, h))
    for t in range(m):
        for j in range(h):
            acc = pre[t, j]
            if not is_start[t]:
                for i in range(h):
                    acc += out[t - 1, i] * wh[i, j]
            out[t, j] = np.tanh(acc)
    return out


@numba.njit(cache=True)
def _recur_backward(g, out, wh, is_start):
    m, h = out.shape
    dpre = np.zeros((m, h))
    dwh = np.zeros((h, h))
    carry = np.zeros(h)
    for t in range(m - 1, -1, -1):
        for j in range(h):
            dpre[t, j] = (g[t, j] + carry[j]) * (1.0 - out[t, j] * out[t, j])
        carry[:] = 0.0
        if not is_start[t]:
            for i in range(h):
                acc = 0.0
                for j in range(h):
                    dwh[i, j] += out[t - 1, i] * dpre[t, j]
                    acc += wh[i, j] * dpre[t, j]
                carry[i] = acc
    return dpre, dwh


def tanh_recurrence(pre, w_rec, seq_starts) -> Tensor:
    """h_t = tanh(pre_t + h_{t-1} @ w_rec), with h reset to zero at each sequence start."""
    pre, w_rec = as_tensor(pre), as_tensor(w_rec)
    m = pre.shape[0]
    is_start = np.zeros(m, dtype=np.bool_)
    is_start[np.asarray(seq_starts, dtype=np.int64)] = True
    out = _recur_forward(np.ascontiguousarray(pre.data), np.ascontiguousarray(w_rec.data), is_start)

    def _bw(g):
        dpre, dwh = _recur_backward(np.ascontiguousarray(g), out, np.ascontiguousarray(w_rec.data), is_start)
        return (dpre, dwh)

    return record_op(out, (pre, w_rec), _bw)


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)

    def value(arr):
        try:
            out = f(Tensor(arr))
        except NonFiniteError as exc:
            raise NonFiniteError("function is not finite at a probe point") from exc
        v = float(np.asarray(out.data).reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("function is not finite at a probe point")
        return v

    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function is not finite at x")
    analytic = backward(tape, out).get(leaf, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        probe = x0.copy().reshape(-1)
        probe[i] += step
        up = value(probe.reshape(x0.shape))
        probe[i] -= 2.0 * step
        down = value(probe.reshape(x0.shape))
        flat[i] = (up - down) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, name: str, shape: tuple[int, ...]) -> None:
        """Create zero moments for ``name`` or pad them along axis 0 after the parameter grew."""
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
            return
        old = self.m[name].shape
        if old == tuple(shape):
            return
        if old[1:] != tuple(shape[1:]) or shape[0] < old[0]:
            raise ValueError(f"cannot resize moments of {name} from {old} to {shape}")
        pad = [(0, shape[0] - old[0])] + [(0, 0)] * (len(shape) - 1)
        self.m[name] = np.pad(self.m[name], pad)
        self.v[name] = np.pad(self.v[name], pad)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    Coordinates whose gradient is exactly zero are left untouched, moments
    included, so unused codebook rows do not drift on stale momentum.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name} {np.shape(p)}")
        if name in state.m and state.m[name].shape != np.shape(p):
            raise ValueError(f"optimizer moments for {name} have shape {state.m[name].shape}, parameter {np.shape(p)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        state.ensure(name, np.shape(p))
        live = g != 0.0
        m = np.where(live, state.beta1 * state.m[name] + (1.0 - state.beta1) * g, state.m[name])
        v = np.where(live, state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g, state.v[name])
        state.m[name], state.v[name] = m, v
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = np.where(live, p - upd, p)
    return new
