"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to the active
:class:`Graph` when at least one input requires a gradient.  Because nodes
are only ever appended, the node list is already in topological order and
:func:`backward` simply walks it in reverse.

Graphs are thread-confined.  Each thread has its own stack of graphs plus a
default graph that is replaced after every ``backward`` call on it, so a
plain training loop never accumulates stale nodes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import LabelError, NumericError, ShapeError

DTYPE = np.float64


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]


@dataclass(eq=False)
class Graph:
    nodes: list = field(default_factory=list)

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        output._graph = self

    def __enter__(self):
        _local().stack.append(self)
        return self

    def __exit__(self, *exc):
        _local().stack.pop()
        return False


_state = threading.local()


def _local():
    if not hasattr(_state, "stack"):
        _state.stack = []
        _state.default = Graph()
        _state.enabled = True
    return _state


def current_graph() -> Graph:
    st = _local()
    return st.stack[-1] if st.stack else st.default


@contextmanager
def no_grad():
    """Run operations without recording them."""
    st = _local()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op, value, inputs, backward):
    """Wrap ``value`` and record the node if any input needs a gradient."""
    value = np.asarray(value, dtype=DTYPE)
    if not np.isfinite(value).all():
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out._graph = None
    st = _local()
    out.requires_grad = st.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_graph().record(op, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _scalar_operand(b):
    """Return (tensor, is_scalar) for the right-hand operand."""
    if isinstance(b, Tensor):
        return b, b.data.ndim == 0
    if np.ndim(b) == 0:
        return Tensor(float(b)), True
    return Tensor(b), False


def _binary(op, a, b, fwd, grad_a, grad_b):
    a = as_tensor(a)
    b, scalar = _scalar_operand(b)
    if not scalar and a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    out = fwd(a.data, b.data)

    def backward(g):
        ga = grad_a(g, a.data, b.data)
        gb = grad_b(g, a.data, b.data)
        if scalar:
            gb = np.sum(gb)
        return ga, gb

    return _result(op, out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, x, y: g,
                   lambda g, x, y: np.broadcast_to(g, g.shape))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; on ties the whole gradient goes to ``a``."""
    return _binary("max", a, b, np.maximum,
                   lambda g, x, y: g * (x >= y),
                   lambda g, x, y: g * (x < y))


def elementwise(op_tag: str, a, b) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "max": maximum}
    if op_tag not in ops:
        raise ValueError(f"unknown elementwise op {op_tag!r}")
    return ops[op_tag](a, b)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result("sum", np.sum(a.data), (a,),
                   lambda g: (np.full(shape, g, dtype=DTYPE),))


def index(a: Tensor, i: int) -> Tensor:
    """Select ``a[i]`` along the first axis."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape, dtype=DTYPE)
        ga[i] = g
        return (ga,)

    return _result("index", a.data[i], (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            s != r for d, (s, r) in enumerate(zip(t.shape, ref)) if d != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return _result("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias: ``[N, K] + [K]`` or ``[N, C, H, W] + [C]``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _result("bias_add", x.data + bias.data.reshape(view), (x, bias),
                   lambda g: (g, g.sum(axis=axes)))


def _windows(xp, kh, kw, stride, ho, wo):
    """Read-only view ``[n, c, ho, wo, kh, kw]`` of the strided windows of ``xp``."""
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=xp.shape[:2] + (ho, wo, kh, kw),
                      strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=DTYPE)
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    win = _windows(xp, kh, kw, stride, ho, wo)
    # patches laid out (n, ho, wo, kh, kw, c): one contiguous copy, reused by
    # the weight gradient, and channel-contiguous slices for the input gradient
    cols = win[:, :, :ho, :wo].transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    hp, wp = xp.shape[2:]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gw
        dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, hp, wp, c), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw

    return _result("conv2d", np.ascontiguousarray(out), (x, w), backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; ties route the gradient to the first max."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d expects [N, C, H, W]")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ShapeError(f"maxpool2d: kernel {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = _windows(np.ascontiguousarray(x.data), kernel, kernel, stride, ho, wo)
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * hit
        return (gx,)

    return _result("maxpool2d", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects [N, C, H, W]")
    n, c, h, w = x.shape
    return _result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def batchless_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel learned affine map ``x * scale[c] + shift[c]``."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.data.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"batchless_norm: parameters do not match input {x.shape}")
    s = scale.data[None, :, None, None]
    b = shift.data[None, :, None, None]
    xd = x.data

    def backward(g):
        return g * s, (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result("batchless_norm", xd * s + b, (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# probabilities and losses


def _check_labels(labels, n, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    return labels


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    loss = np.mean(np.log(s[:, 0]) - z[np.arange(n), labels])
    p = e / s

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _result("softmax_cross_entropy", loss, (logits,), backward)


def nll_of_probs(probs: Tensor, labels) -> Tensor:
    """Mean ``-log p[label]`` for rows of already-normalised probabilities."""
    probs = as_tensor(probs)
    if probs.data.ndim != 2:
        raise ShapeError("nll_of_probs expects [N, K] probabilities")
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    picked = probs.data[np.arange(n), labels]
    if np.any(picked <= 0):
        raise NumericError("nll_of_probs: zero probability for a true label")

    def backward(g):
        d = np.zeros(probs.shape, dtype=DTYPE)
        d[np.arange(n), labels] = -g / (n * picked)
        return (d,)

    return _result("nll_of_probs", -np.mean(np.log(picked)), (probs,), backward)


# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring tensor reachable from ``loss``."""
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise ValueError("loss is not attached to a graph")
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            elif inp._graph is graph:
                grads[key] = np.array(gi, dtype=DTYPE)
            else:
                # leaf: accumulate across calls until the caller clears it
                gi = np.array(gi, dtype=DTYPE).reshape(inp.shape)
                inp.grad = gi if inp.grad is None else inp.grad + gi
    st = _local()
    if graph is st.default:
        st.default = Graph()
