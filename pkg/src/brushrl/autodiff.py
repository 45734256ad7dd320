"""Reverse-mode automatic differentiation over dense numpy tensors.

Backward functions are themselves written in terms of the primitives in this
module, so calling ``grad(..., create_graph=True)`` yields gradients that are
part of the graph and can be differentiated again.  That is what the
Lipschitz penalty training relies on.

Internal compute defaults to float32; the gradient-check suite runs the same
graphs at float64.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "constant",
    "grad",
    "add",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "relu",
    "tanh",
    "sigmoid",
    "log_softmax",
    "concat",
    "take",
    "gather_cols",
    "scatter_cols",
    "im2col",
    "col2im",
    "conv2d",
    "fc",
    "lstm_step",
    "softmax_categorical",
    "numeric_gradient",
]


class ShapeError(ValueError):
    pass


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


class Tensor:
    """A dense n-d float array with an optional gradient slot.

    ``data`` is a row-major numpy array.  ``grad`` is populated on leaf
    tensors with ``requires_grad`` after a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_pairs")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._pairs: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return not self._pairs

    def backward(self, grad_output: "Tensor | None" = None) -> None:
        leaves = _collect_leaves(self)
        gmap = _backprop(self, grad_output, create_graph=False)
        for leaf in leaves:
            g = gmap.get(id(leaf))
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = g.data.copy()
            else:
                leaf.grad = leaf.grad + g.data

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, pairs) -> Tensor:
    """Build an op result.  ``pairs`` is ((parent, backward_fn), ...)."""
    track = _grad_enabled() and any(
        p.requires_grad or p._pairs for p, _ in pairs
    )
    out = Tensor(data, requires_grad=False)
    if track:
        out.requires_grad = True
        out._pairs = tuple(
            (p, fn) for p, fn in pairs if p.requires_grad or p._pairs
        )
    return out


def _collect_leaves(root: Tensor) -> list:
    leaves, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._pairs:
            stack.extend(p for p, _ in node._pairs)
        elif node.requires_grad:
            leaves.append(node)
    return leaves


def _backprop(root: Tensor, grad_output, create_graph: bool):
    if grad_output is None:
        grad_output = Tensor(np.ones_like(root.data))
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._pairs:
            if parent.requires_grad or parent._pairs:
                stack.append((parent, False))
    gmap: dict[int, Tensor] = {id(root): grad_output}
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for node in reversed(topo):
            g = gmap.get(id(node))
            if g is None:
                continue
            for parent, fn in node._pairs:
                pg = fn(g)
                prev = gmap.get(id(parent))
                gmap[id(parent)] = pg if prev is None else add(prev, pg)
    return gmap


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` w.r.t. ``inputs``.

    With ``create_graph`` the returned tensors stay attached to the graph and
    can be differentiated further.
    """
    gmap = _backprop(output, grad_output, create_graph)
    out = []
    for t in inputs:
        g = gmap.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    cur = g
    if extra > 0:
        cur = tsum(cur, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (a, b) in enumerate(zip(cur.shape, shape)) if b == 1 and a != 1
    )
    if axes:
        cur = tsum(cur, axis=axes, keepdims=True)
    if cur.shape != shape:
        cur = reshape(cur, shape)
    return cur


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    return _result(
        a.data + b.data,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
    )


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    return _result(
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast(mul(g, b), a.shape)),
            (b, lambda g: _unbroadcast(mul(g, a), b.shape)),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _result(
        a.data / b.data,
        (
            (a, lambda g: _unbroadcast(div(g, b), a.shape)),
            (b, lambda g: _unbroadcast(mul(g, div(mul(a, -1.0), mul(b, b))), b.shape)),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    return _result(
        np.matmul(a.data, b.data),
        (
            (a, lambda g: _unbroadcast(matmul(g, _swap_last(b)), a.shape)),
            (b, lambda g: _unbroadcast(matmul(_swap_last(a), g), b.shape)),
        ),
    )


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes),
        ((a, lambda g: transpose(g, inv)),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result(
        a.data.reshape(shape),
        ((a, lambda g: reshape(g, old)),),
    )


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result(
        np.broadcast_to(a.data, shape).copy(),
        ((a, lambda g: _unbroadcast(g, old)),),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        old = a.shape

        def back(g):
            return broadcast_to(reshape(g, (1,) * len(old)), old)

        return _result(a.data.sum(keepdims=keepdims), ((a, back),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    old = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))

    def back(g):
        return broadcast_to(reshape(g, kept), old)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), ((a, back),))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.data.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(total))


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data), ())
    _attach(out, a, lambda g: mul(g, out))
    return out


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), ((a, lambda g: div(g, a)),))


def sqrt(a: Tensor) -> Tensor:
    out = _result(np.sqrt(a.data), ())
    _attach(out, a, lambda g: div(g, mul(out, 2.0)))
    return out


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.dtype))
    return _result(a.data * mask.data, ((a, lambda g: mul(g, mask)),))


def tanh(a: Tensor) -> Tensor:
    out = _result(np.tanh(a.data), ())
    _attach(out, a, lambda g: mul(g, add(Tensor(np.ones_like(out.data)), mul(mul(out, out), -1.0))))
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _result(1.0 / (1.0 + np.exp(-a.data)), ())
    _attach(out, a, lambda g: mul(g, mul(out, add(Tensor(np.ones_like(out.data)), mul(out, -1.0)))))
    return out


def _attach(out: Tensor, parent: Tensor, fn: Callable) -> None:
    """Wire a backward pair for ops whose backward references the output."""
    if _grad_enabled() and (parent.requires_grad or parent._pairs):
        out.requires_grad = True
        out._pairs = ((parent, fn),)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logits")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _result(shifted - lse, ())

    def back(g):
        p = exp(out)
        return add(g, mul(mul(p, tsum(g, axis=axis, keepdims=True)), -1.0))

    _attach(out, a, back)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    pairs = []
    offset = 0
    for t in tensors:
        size = t.shape[axis]
        start = offset

        def back(g, start=start, size=size):
            return take(g, axis, start, start + size)

        pairs.append((t, back))
        offset += size
    return _result(data, tuple(pairs))


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    before, after = start, a.shape[axis] - stop
    return _result(
        a.data[tuple(idx)].copy(),
        ((a, lambda g: _pad_axis(g, axis, before, after)),),
    )


def _pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    start, stop = before, before + a.shape[axis]
    return _result(
        np.pad(a.data, widths),
        ((a, lambda g: take(g, axis, start, stop)),),
    )


def gather_cols(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-D tensor.  Returns shape (N,)."""
    idx = np.asarray(idx, dtype=np.int64)
    n, k = a.shape
    rows = np.arange(n)
    return _result(
        a.data[rows, idx],
        ((a, lambda g: scatter_cols(g, idx, k)),),
    )


def scatter_cols(a: Tensor, idx: np.ndarray, k: int) -> Tensor:
    """Adjoint of gather_cols: place a length-N vector into (N, k) zeros."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    data = np.zeros((n, k), dtype=a.dtype)
    data[np.arange(n), idx] = a.data
    return _result(data, ((a, lambda g: gather_cols(g, idx)),))


# ---------------------------------------------------------------------------
# convolution via im2col / col2im (mutually adjoint linear primitives)


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int):
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + kh - h, 0)
    pad_w = max((out_w - 1) * stride + kw - w, 0)
    return out_h, out_w, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def _patch_indices(c, h, w, kh, kw, stride, pads):
    key = (c, h, w, kh, kw, stride, pads)
    cached = _PATCH_CACHE.get(key)
    if cached is not None:
        return cached
    (pt, pb), (pl, pr) = pads
    hp, wp = h + pt + pb, w + pl + pr
    out_h, out_w = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    i0 = np.repeat(np.arange(kh), kw)
    j0 = np.tile(np.arange(kw), kh)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    rows = i1[:, None] + i0[None, :]
    cols = j1[:, None] + j0[None, :]
    flat = rows * wp + cols  # (L, kh*kw)
    chan = (np.arange(c) * hp * wp)[None, :, None]
    idx = (flat[:, None, :] + chan).reshape(out_h * out_w, c * kh * kw)
    _PATCH_CACHE[key] = idx
    return idx


_PATCH_CACHE: dict = {}


def im2col(a: Tensor, kh: int, kw: int, stride: int, pads) -> Tensor:
    """Extract sliding patches: (N,C,H,W) -> (N, L, C*kh*kw)."""
    n, c, h, w = a.shape
    idx = _patch_indices(c, h, w, kh, kw, stride, pads)
    (pt, pb), (pl, pr) = pads
    xp = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    flat = xp.reshape(n, -1)
    geometry = (c, h, w, kh, kw, stride, pads)
    return _result(
        flat[:, idx],
        ((a, lambda g: col2im(g, geometry)),),
    )


def col2im(a: Tensor, geometry) -> Tensor:
    """Adjoint of im2col: scatter-add patches back to (N,C,H,W)."""
    c, h, w, kh, kw, stride, pads = geometry
    (pt, pb), (pl, pr) = pads
    hp, wp = h + pt + pb, w + pl + pr
    idx = _patch_indices(c, h, w, kh, kw, stride, pads)
    n = a.shape[0]
    plane = c * hp * wp
    offsets = (np.arange(n) * plane)[:, None, None]
    all_idx = (idx[None] + offsets).ravel()
    flat = np.bincount(all_idx, weights=a.data.astype(np.float64).ravel(), minlength=n * plane)
    flat = flat.astype(a.dtype).reshape(n, c, hp, wp)
    out = flat[:, :, pt : pt + h, pl : pl + w]

    def back(g):
        return im2col(g, kh, kw, stride, pads)

    return _result(np.ascontiguousarray(out), ((a, back),))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, transpose_op: bool = False) -> Tensor:
    """Same-padded 2-D (transpose-)convolution on NCHW tensors.

    Forward kernels are (out_c, in_c, kh, kw); transpose kernels are
    (in_c, out_c, kh, kw) and upsample spatial dims by ``stride``.
    """
    if stride not in (1, 2, 4):
        raise ShapeError(f"unsupported stride {stride}")
    if transpose_op:
        return _conv2d_transpose(x, kernel, stride)
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    out_h, out_w, ph, pw = _conv_geometry(h, w, kh, kw, stride)
    cols = im2col(x, kh, kw, stride, (ph, pw))  # (N, L, C*kh*kw)
    cols2d = reshape(cols, (n * out_h * out_w, ic * kh * kw))
    kmat = reshape(kernel, (oc, ic * kh * kw))
    out = matmul(cols2d, _swap_last2d(kmat))  # (N*L, oc)
    out = transpose(reshape(out, (n, out_h * out_w, oc)), (0, 2, 1))
    return reshape(out, (n, oc, out_h, out_w))


def _swap_last2d(t: Tensor) -> Tensor:
    return transpose(t, (1, 0))


def _conv2d_transpose(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    n, c, h, w = x.shape
    ic, oc, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(
            f"transpose conv channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    out_h, out_w = h * stride, w * stride
    # Adjoint of a same-padded forward conv mapping (oc,out_h,out_w)->(c,h,w).
    eh, ew, ph, pw = _conv_geometry(out_h, out_w, kh, kw, stride)
    if (eh, ew) != (h, w):
        raise ShapeError(
            f"transpose conv geometry mismatch: {x.shape} with kernel {kernel.shape}"
        )
    kmat = reshape(kernel, (c, oc * kh * kw))  # (c, oc*kh*kw)
    flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    cols = reshape(matmul(flat, kmat), (n, h * w, oc * kh * kw))
    return col2im(cols, (oc, out_h, out_w, kh, kw, stride, (ph, pw)))


# ---------------------------------------------------------------------------
# composites


def fc(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map (N, D) @ (D, K) + (K,)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"fc dimension mismatch: {x.shape} @ {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def lstm_step(x: Tensor, state: tuple, params: dict) -> tuple:
    """One gated recurrent update.

    ``params`` holds the 8 weight matrices wxi, whi, wxf, whf, wxg, whg,
    wxo, who and biases bi, bf, bg, bo.
    """
    h, c = state
    if h.shape != c.shape or h.shape[0] != x.shape[0]:
        raise ShapeError(f"lstm state shape mismatch: h {h.shape}, c {c.shape}, x {x.shape}")
    i = sigmoid(add(add(fc(x, params["wxi"]), fc(h, params["whi"])), params["bi"]))
    f = sigmoid(add(add(fc(x, params["wxf"]), fc(h, params["whf"])), params["bf"]))
    g = tanh(add(add(fc(x, params["wxg"]), fc(h, params["whg"])), params["bg"]))
    o = sigmoid(add(add(fc(x, params["wxo"]), fc(h, params["who"])), params["bo"]))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def softmax_categorical(logits: Tensor, rng: np.random.Generator):
    """Sample one index per row of (N, K) logits.

    Returns (probs, samples, log_probs) where probs and log_probs remain in
    the graph.
    """
    ls = log_softmax(logits, axis=-1)
    probs = exp(ls)
    p = probs.data
    p = p / p.sum(axis=-1, keepdims=True)
    n, k = logits.shape
    u = rng.random(n)
    cdf = np.cumsum(p, axis=-1)
    samples = (u[:, None] > cdf[:, :-1]).sum(axis=-1) if k > 1 else np.zeros(n, dtype=np.int64)
    samples = np.asarray(samples, dtype=np.int64)
    log_probs = gather_cols(ls, samples)
    return probs, samples, log_probs


# ---------------------------------------------------------------------------
# finite differences


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at float64."""
    x = x.astype(np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)
