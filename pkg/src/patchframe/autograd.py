"""Small reverse-mode autodiff over float64 numpy arrays.

Every differentiable pipeline in this package (patch compositing, frame
compositing, bilinear resize, the toy detector, the losses) is built from
the ops below. A `Var` wraps an ndarray; ops record backward closures only
when some input requires gradients, so inference over constant inputs runs
at plain-numpy cost.

Gradient conventions worth knowing:
  * `clip` passes gradients on the closed interval [lo, hi].
  * `vmax` routes the gradient to the first argmax element.
  * `sqrt` has zero gradient at exactly 0 (used by the palette distance).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .backend import kernels as K


class Var:
    """Node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate gradients of a scalar output into every leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._bwd is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._bwd(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, pow_scalar(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order[::-1]


def _make(data, parents, bwd):
    out = Var(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise -------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def pow_scalar(a, p):
    a = as_var(a)
    p = float(p)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a):
    a = as_var(a)
    out = np.sqrt(a.data)
    scale = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
    return _make(out, (a,), lambda g: (g * scale,))


def exp(a):
    a = as_var(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_var(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def vabs(a):
    a = as_var(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = as_var(a)
    z = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, alpha=0.1):
    a = as_var(a)
    mask = np.where(a.data > 0.0, 1.0, alpha)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def maximum_scalar(a, c):
    a = as_var(a)
    c = float(c)
    mask = (a.data > c).astype(np.float64)
    return _make(np.maximum(a.data, c), (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    a = as_var(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# reductions --------------------------------------------------------


def ssum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def smean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(ssum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def vmax(a):
    """Global maximum with subgradient routed to the first argmax."""
    a = as_var(a)
    flat = int(np.argmax(a.data))
    out = a.data.reshape(-1)[flat]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga.reshape(-1)[flat] = g
        return (ga,)

    return _make(np.asarray(out), (a,), bwd)


def amin_axis(a, axis):
    """Minimum along one axis, gradient to the first argmin."""
    a = as_var(a)
    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), bwd)


# shape -------------------------------------------------------------


def reshape(a, shape):
    a = as_var(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def getitem(a, idx):
    a = as_var(a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _make(a.data[idx], (a,), bwd)


def stack(items, axis=0):
    items = [as_var(v) for v in items]
    data = np.stack([v.data for v in items], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(data, tuple(items), bwd)


def embed(a, out_h, out_w, top, left, fill=0.0):
    """Place an HxWxC image into a larger canvas filled with `fill`."""
    a = as_var(a)
    h, w, c = a.data.shape
    canvas = np.full((out_h, out_w, c), float(fill), dtype=np.float64)
    canvas[top : top + h, left : left + w] = a.data
    return _make(canvas, (a,), lambda g: (g[top : top + h, left : left + w].copy(),))


# linear algebra ----------------------------------------------------


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x, w, b, stride=1, pad=0, dil=1):
    """NHWC convolution with (kh, kw, cin, cout) weights, bias and dilation."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    y = K.conv2d_forward(np.ascontiguousarray(x.data), np.ascontiguousarray(w.data), stride, pad, dil)
    y = y + b.data

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = K.conv2d_grad_input(g, w.data, x.data.shape, stride, pad, dil) if x.requires_grad else None
        gw = (
            K.conv2d_grad_weights(g, np.ascontiguousarray(x.data), w.data.shape, stride, pad, dil)
            if w.requires_grad
            else None
        )
        gb = g.sum(axis=(0, 1, 2)) if b.requires_grad else None
        return (gx, gw, gb)

    return _make(y, (x, w, b), bwd)


# bilinear sampling -------------------------------------------------


def _point_taps(ys, xs, h, w):
    """4-tap bilinear stencil (flat indices + weights) for float points."""
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    return np.ascontiguousarray(idx), np.ascontiguousarray(wts)


@lru_cache(maxsize=64)
def _resize_taps(h, w, oh, ow):
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * w / ow - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _point_taps(yy.ravel(), xx.ravel(), h, w)


def gather4(p, idx, wts):
    """out[k] = sum_j wts[k, j] * p[idx[k, j], :] on a (S, C) buffer."""
    p = as_var(p)
    rows = p.data.shape[0]
    data = K.gather4(np.ascontiguousarray(p.data), idx, wts)
    return _make(data, (p,), lambda g: (K.gather4_grad(idx, wts, np.ascontiguousarray(g), rows),))


def sample_points(img, ys, xs):
    """Bilinear samples of an HxWxC image at float (ys, xs); (K, C) output."""
    img = as_var(img)
    h, w, c = img.data.shape
    idx, wts = _point_taps(np.asarray(ys, dtype=np.float64), np.asarray(xs, dtype=np.float64), h, w)
    return gather4(reshape(img, (h * w, c)), idx, wts)


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-centered bilinear resize; identity when sizes match."""
    img = as_var(img)
    h, w, c = img.data.shape
    if (h, w) == (out_h, out_w):
        return _make(img.data.copy(), (img,), lambda g: (g,))
    idx, wts = _resize_taps(h, w, out_h, out_w)
    flat = gather4(reshape(img, (h * w, c)), idx, wts)
    return reshape(flat, (out_h, out_w, c))


def scatter_rows(base, vals, rows):
    """Overwrite flat spatial rows of `base` with `vals` (both (., C)).

    Gradients flow to the untouched part of `base` and to `vals`; the
    overwritten rows of `base` receive zero gradient.
    """
    base, vals = as_var(base), as_var(vals)
    shape = base.data.shape
    c = shape[-1]
    flat = base.data.reshape(-1, c).copy()
    flat[rows] = vals.data
    out = flat.reshape(shape)

    def bwd(g):
        gf = g.reshape(-1, c)
        gb = None
        if base.requires_grad:
            gb = gf.copy()
            gb[rows] = 0.0
            gb = gb.reshape(shape)
        gv = gf[rows].copy() if vals.requires_grad else None
        return (gb, gv)

    return _make(out, (base, vals), bwd)
