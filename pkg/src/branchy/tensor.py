"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each operation that consumes a tensor requiring gradients records its
parents and a closure mapping the upstream gradient to one gradient per
parent.  ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates into the ``grad`` slot of every leaf
that requires gradients.  The graph is released afterwards, so calling
``backward`` twice on the same loss raises instead of double-counting.

Matrix products report their multiply-accumulate count to any active
:func:`count_macs` context; the cost model is checked against that.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import BackwardError, CalibrationError, ConfigError, DimensionError, NumericalError

EPS = 1e-12

_grad_enabled = True
_mac_counters = []


class MacCounter:
    def __init__(self):
        self.total = 0

    def __repr__(self):
        return f"MacCounter(total={self.total})"


@contextmanager
def count_macs():
    """Count multiply-accumulates performed inside the block."""
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def record_macs(n):
    for counter in _mac_counters:
        counter.total += int(n)


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._released = False
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"{op} produced non-finite values")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self):
        if self._released:
            raise BackwardError(
                "backward already ran on this graph; gradients would be accumulated twice"
            )
        if self.data.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise BackwardError("loss does not depend on any tensor requiring gradients")
        if not self._parents:
            self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
            return

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._released = True
                node._parents = ()
                node._backward = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return Tensor._result(
        data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    return Tensor._result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def neg(a):
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def tsum(a):
    shape = a.shape
    return Tensor._result(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def getitem(a, index):
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._result(np.array(a.data[index]), (a,), backward, "getitem")


def _check_matmul(a, b, what):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"{what}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a, b):
    """``a @ b`` for ``a`` of shape [in] or [batch x in] and ``b`` of shape [in x out]."""
    _check_matmul(a, b, "matmul")
    rows = 1 if a.ndim == 1 else a.shape[0]
    record_macs(rows * b.shape[0] * b.shape[1])
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = np.outer(ad, g) if ad.ndim == 1 else ad.T @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def affine(x, W, b):
    """``x @ W + b``; ``x`` may be a single vector or a batch of rows."""
    _check_matmul(x, W, "affine")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match weight shape {W.shape}")
    rows = 1 if x.ndim == 1 else x.shape[0]
    record_macs(rows * W.shape[0] * W.shape[1])
    xd, Wd = x.data, W.data

    def backward(g):
        gx = g @ Wd.T
        if xd.ndim == 1:
            return gx, np.outer(xd, g), g
        return gx, xd.T @ g, g.sum(axis=0)

    return Tensor._result(xd @ Wd + b.data, (x, W, b), backward, "affine")


def relu(x):
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    t = np.tanh(x.data)
    return Tensor._result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def softmax(logits):
    """Softmax over the last axis, shifted by the row maximum for stability."""
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got shape {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (logits,), backward, "softmax")


def cross_entropy(probs, label):
    """Mean of ``-ln(p[label] + EPS)`` over rows.

    ``probs`` is one distribution [C] with an integer label, or a batch
    [B x C] with one label per row.
    """
    p = probs.data
    labels = np.atleast_1d(np.asarray(label))
    rows = p.reshape(-1, p.shape[-1])
    n_classes = rows.shape[1]
    if labels.shape != (rows.shape[0],):
        raise DimensionError(f"cross_entropy: {labels.size} labels for probabilities of shape {p.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"class labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"class label out of range [0, {n_classes})")
    idx = np.arange(rows.shape[0])
    picked = rows[idx, labels] + EPS
    n = rows.shape[0]

    def backward(g):
        out = np.zeros_like(rows)
        out[idx, labels] = -g / (picked * n)
        return (out.reshape(p.shape),)

    return Tensor._result(np.asarray(-np.log(picked).mean()), (probs,), backward, "cross_entropy")


def take_rows(table, indices):
    """Gather rows of a [V x D] table; result shape is ``indices.shape + (D,)``."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(table.data[idx], (table,), backward, "take_rows")


def mean_rows(table, index_lists):
    """Row b of the result is the mean of ``table[index_lists[b]]``."""
    flat = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in index_lists])
    lengths = np.array([len(ix) for ix in index_lists], dtype=np.int64)
    owner = np.repeat(np.arange(len(index_lists)), lengths)
    weights = 1.0 / lengths
    out = np.zeros((len(index_lists), table.shape[1]))
    np.add.at(out, owner, table.data[flat])
    out *= weights[:, None]
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, flat, g[owner] * weights[owner, None])
        return (grad,)

    return Tensor._result(out, (table,), backward, "mean_rows")


def sgd_step(params, lr):
    """In-place ``p -= lr * p.grad`` for each parameter, then clear the gradients."""
    if lr < 0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be a non-negative finite number, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise CalibrationError(f"parameter of shape {p.shape} has no gradient; run backward first")
    for p in params:
        if lr:
            p.data -= lr * p.grad
        p.grad = None
