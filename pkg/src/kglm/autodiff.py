"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; differentiation is a dynamic tape: every op
executed inside a ``Tape`` context appends one record, and because records
are appended in execution order the tape is already topologically sorted.
``Tape.backward`` walks it once in reverse. Ops executed with no tape
active are plain numpy math (the evaluation path).

All ops raise :class:`ShapeError` naming the op and the offending shapes.
Set ``DEBUG_FINITE = True`` to assert after every op that finite inputs
produced finite outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

DEBUG_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "node")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.node = None  # back-reference to the tape record that produced it

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; every route goes through the taped ops below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return tslice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed ops; cleared explicitly between steps."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Repeated calls without clearing accumulate additively, so running
        backward twice doubles every gradient exactly.
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.data.shape)
        if not self._records:
            raise ShapeError("backward", ())
        # flows are private to this call; only the final sums land in .grad,
        # which is what makes a second backward add exactly the same amount
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            out_grad = flows.get(id(rec.output))
            if out_grad is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(out_grad)):
                if grad is None:
                    continue
                key = id(tensor)
                if key in flows:
                    flows[key] = flows[key] + grad
                else:
                    flows[key] = grad
                    holders[key] = tensor
        for key, grad in flows.items():
            t = holders[key]
            t.grad = grad if t.grad is None else t.grad + grad


_TAPES: list[Tape] = []


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> Tensor:
    if DEBUG_FINITE and all(np.isfinite(t.data).all() for t in inputs):
        assert np.isfinite(out.data).all(), f"{op}: non-finite output from finite inputs"
    if _TAPES:
        rec = _Record(op, tuple(inputs), out, backward)
        _TAPES[-1]._records.append(rec)
        out.node = rec
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _record("add", (a, b), Tensor(data), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _record("sub", (a, b), Tensor(data), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), Tensor(-a.data), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _record("mul", (a, b), Tensor(data), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    return _record("div", (a, b), Tensor(data), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), Tensor(data), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if a.data.ndim < 2:
        raise ShapeError("transpose", a.shape)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inverse = np.argsort(axes)
    return _record("transpose", (a,), Tensor(np.transpose(a.data, axes)),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _record("reshape", (a,), Tensor(data),
                   lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", ())
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", tuple(tensors), Tensor(data), backward)


def tslice(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record("slice", (a,), Tensor(data), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), Tensor(data), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _record("mean", (a,), Tensor(data), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    return _record("relu", (a,), Tensor(np.maximum(a.data, 0.0)),
                   lambda g: (g * (a.data > 0.0),))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi_cdf + x * pdf),)

    return _record("gelu", (a,), Tensor(out), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflowing exp
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record("sigmoid", (a,), Tensor(out),
                   lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", (a,), Tensor(out),
                   lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), Tensor(out), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), Tensor(out), backward)


# ---------------------------------------------------------------------------
# lookup and losses


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, ids.shape)
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding_lookup", (table,), Tensor(out), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood, fused with log-softmax over the last axis.

    ``targets`` holds integer class ids with the same shape as the logits
    minus the class axis; positions equal to ``ignore_id`` contribute
    nothing to the mean.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    flat_logits = logits.data.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    mask = np.ones_like(flat_targets, dtype=bool) if ignore_id is None \
        else flat_targets != ignore_id
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    safe_targets = np.where(mask, flat_targets, 0)
    picked = shifted[np.arange(flat_targets.size), safe_targets]
    nll = (lse - picked) * mask
    loss = nll.sum() / count

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(flat_targets.size), safe_targets] -= 1.0
        probs *= (mask / count)[:, None] * g
        return (probs.reshape(logits.shape),)

    return _record("cross_entropy", (logits,), Tensor(loss), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    out = loss.mean()
    n = z.size

    def backward(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((sig - targets) * (g / n),)

    return _record("bce_with_logits", (logits,), Tensor(out), backward)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    """Outcome of comparing analytic against central-difference gradients."""

    def __init__(self, max_rel_error: float, failures: list, tol: float):
        self.max_rel_error = max_rel_error
        self.failures = failures  # (flat index, analytic, numeric, rel error)
        self.tol = tol

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        status = "ok" if self.passed else f"{len(self.failures)} failing"
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, {status})"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check df/dx of a scalar-valued ``f`` at ``x`` coordinate by coordinate.

    Failures are collected in the report, never raised.
    """
    with Tape() as tape:
        out = f(x)
        x.zero_grad()
        tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    for idx in np.ndindex(x.data.shape):
        # indexed writes work on any memory layout; reshape(-1) silently
        # copies (and drops the perturbation) for non-contiguous arrays
        orig = x.data[idx]
        x.data[idx] = orig + eps
        f_plus = float(f(x).data)
        x.data[idx] = orig - eps
        f_minus = float(f(x).data)
        x.data[idx] = orig
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    failures = [(int(i), float(analytic.reshape(-1)[i]), float(numeric.reshape(-1)[i]),
                 float(rel.reshape(-1)[i]))
                for i in np.flatnonzero(rel.reshape(-1) >= tol)]
    return GradCheckReport(max_rel, failures, tol)
