"""Dense float64 tensors with reverse-mode automatic differentiation.

Every backward rule is written in terms of tensor ops, so a backward pass can
itself be recorded (``create_graph=True``). That is what the gradient penalty
needs: the gradient of an input-gradient norm with respect to parameters.

The tape is implicit: each tensor keeps references to its parents and the
closure computing its input gradients. :func:`grad` linearises the graph into
topological order before walking it backwards.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Dict, List, Sequence

import numpy as np

DTYPE = np.float64

_recording = contextvars.ContextVar("amtnn_recording", default=True)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(data, parents, backward, op):
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite result from op '{op}'")
    out = Tensor(data)
    out.op = op
    if _recording.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_or_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# shape plumbing

def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + k for k, n in enumerate(shape) if n == 1 and a.shape[lead + k] != 1)
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = a.shape
    return _make(data, (a,), lambda g, out: (broadcast_to(g, src),), "sum_to")


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, out: (sum_to(g, src),), "broadcast_to")


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, out: (reshape(g, src),), "reshape")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g, out: (transpose(g),), "transpose")


def _slice(a, axis, start, stop):
    src = a.shape

    def backward(g, out):
        return (_pad(g, axis, start, src),)

    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return _make(a.data[tuple(index)].copy(), (a,), backward, "slice")


def _pad(a, axis, start, shape):
    stop = start + a.shape[axis]
    data = np.zeros(shape)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    data[tuple(index)] = a.data
    return _make(data, (a,), lambda g, out: (_slice(g, axis, start, stop),), "pad")


def concat(tensors: Sequence, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, out):
        return tuple(_slice(g, axis, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    return _make(data, tensors, backward, "concat")


def take_rows(a, index):
    """Gather rows ``a[index]``; rows may repeat."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g, out: (_scatter_rows(g, index, n),), "take_rows")


def _scatter_rows(g, index, n):
    data = np.zeros((n,) + g.shape[1:])
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda gg, out: (take_rows(gg, index),), "scatter_rows")


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g, out: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g, out: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g, out: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul")


def scalar_mul(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g, out: (scalar_mul(g, c),), "scalar_mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "div")
    sa, sb = a.shape, b.shape

    def backward(g, out):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, out)), sb)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _make(data, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, out: (neg(g),), "neg")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, out: (mul(g, scalar_mul(a, 2.0)),), "square")


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _make(data, (a,), lambda g, out: (div(scalar_mul(g, 0.5), out),), "sqrt")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), lambda g, out: (mul(g, out),), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g, out: (div(g, a),), "log")


# --------------------------------------------------------------------------
# activations

def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(DTYPE)
    return _make(a.data * mask, (a,), lambda g, out: (mul(g, mask),), "relu")


def elu(a):
    """ELU with alpha fixed at 1."""
    a = as_tensor(a)
    neg_mask = (a.data <= 0).astype(DTYPE)
    data = np.where(a.data > 0, a.data, np.expm1(np.minimum(a.data, 0.0)))
    # slope is 1 on the positive side and out + 1 on the negative side
    return _make(data, (a,),
                 lambda g, out: (mul(g, add(mul(out, neg_mask), 1.0)),), "elu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    return _make(data, (a,), lambda g, out: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), lambda g, out: (mul(g, sigmoid(a)),), "softplus")


def log_sigmoid(a):
    return neg(softplus(neg(a)))


def logsumexp(a, axis=-1):
    """Row-wise log-sum-exp, keeping the reduced axis."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    shape = a.shape
    return _make(data, (a,),
                 lambda g, out: (mul(broadcast_to(g, shape), exp(sub(a, out))),), "logsumexp")


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


def gradient_reversal(a):
    """Identity on the forward pass; negates the gradient on the way back."""
    a = as_tensor(a)
    return _make(a.data.copy(), (a,), lambda g, out: (neg(g),), "gradient_reversal")


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def affine(x, weight, bias):
    return add(matmul(x, weight), bias)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, out):
        if axis is not None and not keepdims:
            kept = list(src)
            for ax in np.atleast_1d(axis):
                kept[ax % len(src)] = 1
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _make(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scalar_mul(sum_(a, axis, keepdims), 1.0 / count)


def l2norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    data = np.sqrt((a.data * a.data).sum(axis=axis))
    zero = (data == 0).astype(DTYPE)

    def backward(g, out):
        scale = expand_dims(div(g, add(out, zero)), axis)
        return (mul(a, scale),)

    return _make(data, (a,), backward, "l2norm")


def expand_dims(a, axis):
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


OPS: Dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "affine": affine, "transpose": transpose,
    "relu": relu, "elu": elu, "sigmoid": sigmoid, "softplus": softplus,
    "softmax": softmax, "log_softmax": log_softmax, "logsumexp": logsumexp,
    "log": log, "exp": exp, "mean": mean, "sum": sum_, "square": square,
    "sqrt": sqrt, "l2norm": l2norm, "concat": lambda *ts, axis=0: concat(ts, axis),
    "scalar-mul": scalar_mul, "reshape": reshape, "take_rows": take_rows,
    "gradient_reversal": gradient_reversal,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op, e.g. ``forward("matmul", a, b)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op '{op_kind}'") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# reverse pass

def topological_order(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` that carry gradients, inputs before outputs."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph=False) -> List[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned gradients are themselves differentiable.
    Inputs that ``root`` does not depend on get zero gradients.
    """
    if root.size != 1:
        raise ValueError(f"root must be a scalar, got shape {root.shape}")
    inputs = list(inputs)
    zeros = [Tensor(np.zeros(t.shape)) for t in inputs]
    if not root.requires_grad:
        return zeros
    order = topological_order(root)
    input_ids = {id(t) for t in inputs}

    # only nodes with a path down to some input need a gradient
    relevant = set()
    for node in order:
        if id(node) in input_ids or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))

    token = _recording.set(bool(create_graph))
    try:
        grads = {id(root): Tensor(np.ones(root.shape))}
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g, node)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    finally:
        _recording.reset(token)

    return [grads.get(id(t), z) for t, z in zip(inputs, zeros)]


def backward(root: Tensor, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """Gradient map ``name -> d root / d param`` for every named parameter."""
    if root.size != 1:
        raise ValueError(f"root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("empty tape: root was not computed from any parameter")
    names = list(params)
    grads = grad(root, [params[n] for n in names])
    return {n: Tensor(g.data) for n, g in zip(names, grads)}


def finite_difference_gradient(objective: Callable[[Dict[str, np.ndarray]], float],
                               params: Dict[str, np.ndarray], h: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    out = {}
    for name, value in work.items():
        g = np.zeros_like(value)
        flat, gflat = value.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(objective(work))
            flat[k] = orig - h
            fm = float(objective(work))
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"objective is not finite near {name}[{k}]")
            gflat[k] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-8) -> float:
    """Largest componentwise |a - n| / max(|a|, |n|, floor) over a gradient map."""
    worst = 0.0
    for name in numeric:
        a = np.asarray(analytic[name].data if isinstance(analytic[name], Tensor) else analytic[name])
        n = np.asarray(numeric[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
