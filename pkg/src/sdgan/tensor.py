"""Minimal reverse-mode autodiff over numpy arrays.

Every operation records a closure computing the vector-Jacobian product for
its inputs; ``Tensor.backward`` walks the recorded graph in reverse
topological order.  Parameters and activations default to float32.  Passing
``dtype=np.float64`` at construction keeps a whole graph in double precision,
which the gradient checks rely on.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _result(cls, data, parents, backward):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.name = None
        t.requires_grad = any(p.requires_grad for p in parents)
        if t.requires_grad:
            # freeze the routing at creation so later flag changes cannot leak gradients
            t._parents = tuple(p if p.requires_grad else None for p in parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    # basic properties

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # graph traversal

    def backward(self):
        """Populate ``.grad`` on every tensor reachable from this scalar.

        Gradients accumulate into existing ``.grad`` buffers; callers clear
        them between steps.  The graph is released afterwards.
        """
        if self.data.size != 1:
            _not_scalar(self)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for node in order:
            node._parents = ()
            node._backward = None

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


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
        for p in node._parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic


def add(a, b):
    b = _lift(b, a)
    a = _lift(a, b)
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    b = _lift(b, a)
    a = _lift(a, b)
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    b = _lift(b, a)
    a = _lift(a, b)

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if need_a else None
        gb = _unbroadcast(g * a.data, b.shape) if need_b else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b):
    b = _lift(b, a)
    a = _lift(a, b)
    out = a.data / b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if need_a else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if need_b else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def power(x, exponent):
    p = float(exponent)
    out = x.data**p
    return Tensor._result(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def log(x):
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g / (2 * out),))


def absolute(x):
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# reductions and reshaping


def reduce_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return Tensor._result(np.asarray(out, dtype=x.dtype), (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return reduce_sum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),))


# activations


def sigmoid(x):
    out = expit(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x):
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, alpha=0.2):
    if not 0 < alpha < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return Tensor._result(x.data * slope, (x,), lambda g: (g * slope,))


def activation(x, kind, alpha=0.2):
    """Apply a named elementwise nonlinearity (``sigmoid``, ``tanh``, ``relu``,
    ``leaky_relu``, or ``linear``)."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind in ("linear", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


# layers


def dense(x, weight, bias=None):
    """``x @ weight + bias`` for x of shape (N, D) and weight (D, M)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense inner dimensions differ: input axis 1 is {x.shape[1]}, weight axis 0 is {weight.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias shape {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x, need_w = x.requires_grad, weight.requires_grad

    def backward(g):
        gx = g @ weight.data.T if need_x else None
        gw = x.data.T @ g if need_w else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._result(out, parents, backward)


def _conv_checks(x, kernel, bias):
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-d (N, C, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-d (F, C, kH, kW), got shape {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {kernel.shape[0]} filters")


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of an (N, C, H, W) batch with (F, C, kH, kW) kernels.

    Zero padding only.  Implemented as an im2col matrix product with the
    column matrix laid out channel-major.
    """
    _conv_checks(x, kernel, bias)
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} or padding {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"channel axis mismatch: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {h + 2 * padding} (axis 2)")
    if kw > w + 2 * padding:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {w + 2 * padding} (axis 3)")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + hi : stride, j : j + wi : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        gk = (gm @ cols.T).reshape(kernel.shape) if need_k else None
        gx = None
        if need_x:
            dcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxc = np.zeros(xc.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxc[:, :, i : i + hi : stride, j : j + wi : stride] += dcols[:, i, j]
            if padding:
                dxc = dxc[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(dxc.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=1)

    return Tensor._result(out, parents, backward)


def upsample_zeros(x, factor):
    """Place each pixel at the top-left of a factor x factor block of zeros."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * factor, w * factor), dtype=x.dtype)
    out[:, :, ::factor, ::factor] = x.data
    return Tensor._result(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, ::factor, ::factor]),))


def conv_transpose2d(x, kernel, bias=None, stride=2):
    """Learnable upsampling by ``stride`` with exact shape restoration.

    Numerically identical to ``conv2d(upsample_zeros(x, stride), kernel,
    padding=k // 2)`` for a square odd kernel of side k, but it scatters the
    input through the kernel directly instead of convolving the zeros, so an
    (H, W) input becomes (stride*H, stride*W) at a quarter of the cost.
    """
    _conv_checks(x, kernel, bias)
    n, c, h, w = x.shape
    f, kc, k, kw = kernel.shape
    if k % 2 == 0 or k != kw:
        raise DimensionError(f"transposed conv needs a square odd kernel, got {k}x{kw}")
    if kc != c:
        raise DimensionError(f"channel axis mismatch: input has {c} channels, kernel expects {kc}")
    s, pad = stride, k // 2
    ho, wo = s * h, s * w
    span_h, span_w = s * (h - 1) + 1, s * (w - 1) + 1
    # output row y receives input row a through tap i when y = s*a - i + pad;
    # buffers are offset by k so every tap writes at a non-negative index
    starts = [pad - i + k for i in range(k)]
    buf_shape = (f, n, ho + 2 * k, wo + 2 * k)

    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, -1)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(f * k * k, c)
    z = (kmat @ xm).reshape(f, k, k, n, h, w)
    buf = np.zeros(buf_shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, :, starts[i] : starts[i] + span_h : s, starts[j] : starts[j] + span_w : s] += z[:, i, j]
    out = buf[:, :, k : k + ho, k : k + wo]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward(g):
        gpad = np.zeros(buf_shape, dtype=g.dtype)
        gpad[:, :, k : k + ho, k : k + wo] = g.transpose(1, 0, 2, 3)
        taps = np.empty((f, k, k, n, h, w), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                taps[:, i, j] = gpad[:, :, starts[i] : starts[i] + span_h : s, starts[j] : starts[j] + span_w : s]
        taps = taps.reshape(f * k * k, -1)
        gx = None
        if need_x:
            gx = np.ascontiguousarray((kmat.T @ taps).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        gk = None
        if need_k:
            gk = np.ascontiguousarray((taps @ xm.T).reshape(f, k, k, c).transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, parents, backward)


def avg_pool2d(x, size, stride=None):
    """Mean over size x size windows taken every ``stride`` pixels."""
    stride = stride or size
    n, c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError(f"window {size} larger than image {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    scale = 1.0 / (size * size)
    if stride == size:
        cropped = x.data[:, :, : ho * size, : wo * size]
        out = cropped.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            block = np.broadcast_to((g * scale)[:, :, :, None, :, None], (n, c, ho, size, wo, size))
            gx[:, :, : ho * size, : wo * size] = block.reshape(n, c, ho * size, wo * size)
            return (gx,)

    else:
        windows = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
        out = windows.mean(axis=(-2, -1))

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            gs = g * scale
            for i in range(size):
                for j in range(size):
                    gx[:, :, i : i + hi : stride, j : j + wi : stride] += gs
            return (gx,)

    return Tensor._result(np.asarray(out, dtype=x.dtype), (x,), backward)
