"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Tensors wrap contiguous numpy arrays and are treated as immutable values
(the underlying buffer is marked read-only). Operations compute eagerly
with numpy; while a Tape is active, any op whose inputs participate in
differentiation records a backward closure onto the tape. The tape holds
result tensors in creation order, so parents always precede children and
a single reverse sweep implements the chain rule.

A tape is single-owner: build one per training episode, call backward()
once, throw it away. With no tape active the ops run at plain numpy speed
and record nothing, which is the evaluation path.

Every completed op checks its output for NaN/Inf and raises instead of
propagating poison. Broadcasting is deliberately limited to the documented
cases (bias over leading axes, scalar scaling); anything else is a shape
error.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of tensors produced while the tape was active."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "node", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data or arr.base is not None or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr).copy() if not arr.flags.c_contiguous \
                else arr.copy()  # never adopt caller-owned or view storage
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor holds non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Internal fast path: adopt a known-finite contiguous f64 array."""
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.node = None
        out._parents = ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording it when differentiation is active.

    `data` is always an array the op just produced (or a view of immutable
    parent storage), so it is adopted without a defensive copy; the
    non-finite check still runs on every completed op.
    """
    if not np.all(np.isfinite(data)):
        raise ContractError("operation produced non-finite values")
    out = Tensor._wrap(np.asarray(data, dtype=np.float64))
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.node = len(tape.nodes)
        tape.nodes.append(out)
    return out


class Gradients:
    """Gradient lookup produced by backward(); keys are tensor identities."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def wrt(self, t: Tensor) -> np.ndarray:
        """Gradient of the output w.r.t. t; zeros if t had no influence."""
        g = self._table.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Reverse sweep over the tape from a scalar output.

    Returns gradients for every leaf reachable from the output; leaves
    that did not influence it read back as zeros.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output.node is None and output._backward is None:
        raise ContractError("output was not recorded on a tape")
    table: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for t in reversed(tape.nodes):
        g = table.pop(id(t), None)
        if g is None or t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = table.get(id(parent))
            table[id(parent)] = pg if acc is None else acc + pg
    return Gradients(table)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError.mismatch("add", a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError.mismatch("sub", a.shape, b.shape)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError.mismatch("mul", a.shape, b.shape)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with a 1-D bias broadcast over all leading axes of x."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError.mismatch("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeError.mismatch("reshape", x.shape, shape)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got shape {x.shape}")
    return swapaxes(x, -1, -2)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError.mismatch("concat", a.shape, b.shape)
    axis = axis % a.ndim
    for i, (da, db) in enumerate(zip(a.shape, b.shape)):
        if i != axis and da != db:
            raise ShapeError.mismatch("concat", a.shape, b.shape)
    split = a.shape[axis]

    def _bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _result(np.concatenate([a.data, b.data], axis=axis), (a, b), _bwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    d = x.shape[-1]
    if not (0 <= start < stop <= d):
        raise ShapeError(f"slice_last [{start}:{stop}] out of range for shape {x.shape}")

    def _bwd(g):
        out = np.zeros(x.shape)
        out[..., start:stop] = g
        return (out,)

    return _result(x.data[..., start:stop], (x,), _bwd)


def take_rows(w: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds into the table."""
    if w.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got shape {w.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows needs a 1-D index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[0]):
        raise IndexError(f"row index out of range [0, {w.shape[0]}): {idx}")

    def _bwd(g):
        out = np.zeros(w.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(w.data[idx], (w,), _bwd)


def tile_first(x: Tensor, n: int) -> Tensor:
    """Repeat x along a new leading axis; backward sums the copies."""
    if n < 1:
        raise ContractError(f"tile_first needs n >= 1, got {n}")
    data = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _result(data, (x,), lambda g: (g.sum(axis=0),))


def select_token(x: Tensor, pos: int) -> Tensor:
    """Select one position along axis 1 of a (B, T, d) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"select_token needs rank 3, got shape {x.shape}")
    pos = pos % x.shape[1]

    def _bwd(g):
        out = np.zeros(x.shape)
        out[:, pos, :] = g
        return (out,)

    return _result(x.data[:, pos, :], (x,), _bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, np.float64(g) / n),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (..., M, K) @ (K, N) and same-batch stacks."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError.mismatch("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError.mismatch("matmul", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError.mismatch("matmul", a.shape, b.shape)

    def _bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = np.matmul(
                a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1])
            )
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), _bwd)


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis; rows sum to one."""
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def _bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _result(p, (x,), _bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError(f"layer_norm over empty last axis of shape {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError.mismatch("layer_norm affine", x.shape, gamma.shape)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _result(out, (x, gamma, beta), _bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    phi = 0.5 * (1.0 + _erf(x.data / _SQRT2))
    out = x.data * phi

    def _bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _result(out, (x,), _bwd)


def _logsumexp(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True)))[..., 0]


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of one class; always >= 0."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-D logit vector, got {logits.shape}")
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range [0, {n})")
    lse = _logsumexp(logits.data)
    loss = lse - logits.data[label]

    def _bwd(g):
        p = np.exp(logits.data - lse)
        p[label] -= 1.0
        return (np.float64(g) * p,)

    return _result(np.asarray(loss), (logits,), _bwd)


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of a (B, N) logit batch against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_mean needs (B, N) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError.mismatch("cross_entropy_mean labels", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"label out of range [0, {n}): {labels}")
    lse = _logsumexp(logits.data)
    picked = logits.data[np.arange(b), labels]
    loss = (lse - picked).mean()

    def _bwd(g):
        p = np.exp(logits.data - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (np.float64(g) * p / b,)

    return _result(np.asarray(loss), (logits,), _bwd)
