"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects wrapping numpy arrays.
The graph is recorded implicitly: an op output keeps references to its
inputs and a closure that maps the output gradient to input gradients.
:func:`backward` walks that graph once in reverse topological order.

Ops accept optional leading batch axes wherever that is unambiguous
(``linear``, ``conv1d``, ``conv2d``, pooling, softmax), which is what keeps
training affordable without a compiled backend.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StaleGraphError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_stale")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}")
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._stale = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def assign(self, value) -> None:
        """Replace a leaf's buffer (optimizer updates, finite differences)."""
        if not self.is_leaf:
            raise RuntimeError("only leaf tensors can be reassigned")
        arr = np.array(value, dtype=self.data.dtype, copy=True)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _fail_item(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result into a graph node.

    ``backward(g)`` must return one gradient (or None) per parent, each shaped
    like that parent.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    if data.flags.writeable:
        data.flags.writeable = False
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._stale = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------- graph walk

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._stale:
            raise StaleGraphError("graph already consumed by a previous backward(); run forward again")
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> dict:
    """Backpropagate a scalar loss.

    Gradients are accumulated into ``.grad`` of every reachable leaf. The
    returned dict maps each leaf (or each of ``inputs``, zero-filled when
    unreachable) to the gradient contributed by this call. The graph is
    released afterwards, so a second call on the same loss raises
    :class:`StaleGraphError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._stale:
        raise StaleGraphError("graph already consumed by a previous backward(); run forward again")
    result: dict = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                result[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._stale = True
    loss._stale = True
    if inputs is not None:
        return {p: result.get(p, np.zeros(p.shape, dtype=p.dtype)) for p in inputs}
    return result


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return custom_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each entry with probability ``p``, scale the rest by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1 - p)
    return custom_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, tanh, sigmoid, clamp, scale."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op_kind in binary:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind == "tanh":
        return tanh(a)
    if op_kind == "sigmoid":
        return sigmoid(a)
    if op_kind == "clamp":
        return clamp(a, kw.get("lo", 0.0), kw.get("hi", 1.0))
    if op_kind == "scale":
        return scale(a, kw["c"])
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ----------------------------------------------------------------- shaping

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return custom_op(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return custom_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert ``axis`` and repeat ``a`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return custom_op(out, (a,), lambda g: (g.sum(axis=axis),), "expand")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return custom_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[...] = a[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx)[..., None]
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return custom_op(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), bw, "take")


def weighted_row_sum(w: Tensor, x: Tensor) -> Tensor:
    """Contract the row axis: ``out[..., *rest] = sum_h w[..., h] * x[..., h, *rest]``."""
    lead = w.shape[:-1]
    h = w.shape[-1]
    if x.shape[: len(lead) + 1] != w.shape:
        raise ShapeError(f"weighted_row_sum: weights {w.shape} vs rows {x.shape}")
    rest = x.shape[len(lead) + 1:]
    xm = x.data.reshape(lead + (h, -1))
    wd = w.data[..., None, :]
    out = (wd @ xm)[..., 0, :].reshape(lead + rest)

    def bw(g):
        gm = g.reshape(lead + (1, -1))
        gw = (gm @ np.swapaxes(xm, -1, -2))[..., 0, :]
        gx = (np.swapaxes(wd, -1, -2) @ gm).reshape(x.shape)
        return gw, gx

    return custom_op(out, (w, x), bw, "weighted_row_sum")


# -------------------------------------------------------------- linear maps

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return custom_op(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[..., c_in] @ w + b`` with the bias broadcast over leading axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        return g @ wd.T, xd.reshape(-1, wd.shape[0]).T @ g2, g2.sum(axis=0)

    return custom_op(out, (x, w, b), bw, "linear")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: x {x.shape}, b {b.shape}")
    n = b.shape[0]
    return custom_op(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the length axis of ``x[..., L, C_in]``.

    ``kernel`` is ``[C_out, C_in, k]``; zero padding of ``padding`` on both
    ends; output ``[..., L_out, C_out]`` with
    ``L_out = (L + 2*padding - k) // stride + 1``.
    """
    c_out, c_in, k = kernel.shape
    if x.ndim < 2 or x.shape[-1] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv1d: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    if stride < 1:
        raise ShapeError("conv1d: stride must be >= 1")
    length = x.shape[-2]
    if k > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {length + 2 * padding}")
    lead = x.shape[:-2]
    l_out = (length + 2 * padding - k) // stride + 1
    pad = [(0, 0)] * len(lead) + [(padding, padding), (0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    cols = sliding_window_view(xp, k, axis=-2)[..., : stride * (l_out - 1) + 1: stride, :, :]
    cols2 = cols.reshape(-1, c_in * k)
    wm = kernel.data.reshape(c_out, c_in * k).T
    out = (cols2 @ wm + bias.data).reshape(lead + (l_out, c_out))

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols2.T @ g2).T.reshape(kernel.shape)
        if not x.requires_grad:
            return None, gk, g2.sum(axis=0)
        gcols = (g2 @ wm.T).reshape(lead + (l_out, c_in, k))
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(k):
            gxp[..., j: j + stride * (l_out - 1) + 1: stride, :] += gcols[..., j]
        gx = gxp[..., padding: padding + length, :]
        return gx, gk, g2.sum(axis=0)

    return custom_op(out, (x, kernel, bias), bw, "conv1d")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of ``x[..., H, W, C_in]`` with ``kernel[C_out, C_in, kh, kw]``."""
    c_out, c_in, kh, kw = kernel.shape
    sh, sw = stride
    ph, pw = padding
    if x.ndim < 3 or x.shape[-1] != c_in or bias.shape != (c_out,):
        raise ShapeError(f"conv2d: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    h, w = x.shape[-3:-1]
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    lead = x.shape[:-3]
    h_out = (h + 2 * ph - kh) // sh + 1
    w_out = (w + 2 * pw - kw) // sw + 1
    pad = [(0, 0)] * len(lead) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad) if (ph or pw) else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    cols = cols[..., : sh * (h_out - 1) + 1: sh, : sw * (w_out - 1) + 1: sw, :, :, :]
    cols2 = cols.reshape(-1, c_in * kh * kw)
    wm = kernel.data.reshape(c_out, -1).T
    out = (cols2 @ wm + bias.data).reshape(lead + (h_out, w_out, c_out))

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gk = (cols2.T @ g2).T.reshape(kernel.shape)
        if not x.requires_grad:
            return None, gk, g2.sum(axis=0)
        gcols = (g2 @ wm.T).reshape(lead + (h_out, w_out, c_in, kh, kw))
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[..., i: i + sh * (h_out - 1) + 1: sh, j: j + sw * (w_out - 1) + 1: sw, :] += gcols[..., i, j]
        gx = gxp[..., ph: ph + h, pw: pw + w, :]
        return gx, gk, g2.sum(axis=0)

    return custom_op(out, (x, kernel, bias), bw, "conv2d")


def pool_bins(width: int, target_w: int) -> list[tuple[int, int]]:
    """Bin ``i`` spans ``[floor(i*W/T), ceil((i+1)*W/T))``."""
    return [((i * width) // target_w, -((-(i + 1) * width) // target_w)) for i in range(target_w)]


def adaptive_max_pool_width(x: Tensor, target_w: int) -> Tensor:
    """Max-pool ``x[..., H, W, C]`` down to ``target_w`` columns.

    Ties route the gradient to the lowest index.
    """
    if target_w < 1:
        raise ShapeError("target_w must be >= 1")
    width = x.shape[-2]
    if target_w > width:
        raise ShapeError(f"adaptive_max_pool_width: target {target_w} exceeds width {width}")
    xd = x.data
    if width == target_w:
        return custom_op(xd.copy(), (x,), lambda g: (g,), "adaptive_max_pool_width")
    bins = pool_bins(width, target_w)
    outs, args = [], []
    for s, e in bins:
        seg = xd[..., s:e, :]
        a = seg.argmax(axis=-2)
        args.append(a)
        outs.append(np.take_along_axis(seg, a[..., None, :], axis=-2))
    out = np.concatenate(outs, axis=-2)

    def bw(g):
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        for i, ((s, e), a) in enumerate(zip(bins, args)):
            part = np.zeros(xd[..., s:e, :].shape, dtype=xd.dtype)
            np.put_along_axis(part, a[..., None, :], g[..., i: i + 1, :], axis=-2)
            gx[..., s:e, :] += part
        return (gx,)

    return custom_op(out, (x,), bw, "adaptive_max_pool_width")


# ---------------------------------------------------------- normalisations

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; ``mask`` (True = keep) drives excluded entries to exactly 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return custom_op(y, (x,), bw, "log_softmax")


# ------------------------------------------------------------------- LSTM

def lstm_sequence(x: Tensor, h0: Tensor, c0: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over ``x[B, T, C_in]`` as a single graph node.

    Gate layout along the ``4H`` axis is (input, forget, cell, output).
    Returns ``[B, T, 2H]``: hidden states in the first half of the last
    axis, cell states in the second half.
    """
    bsz, steps, _ = x.shape
    hid = wh.shape[0]
    if wx.shape != (x.shape[-1], 4 * hid) or wh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(f"lstm_sequence: Wx {wx.shape}, Wh {wh.shape}, b {b.shape}, x {x.shape}")
    if h0.shape != (bsz, hid) or c0.shape != (bsz, hid):
        raise ShapeError(f"lstm_sequence: state shapes {h0.shape}, {c0.shape}")
    xd, whd = x.data, wh.data
    zx = xd @ wx.data + b.data
    out = np.empty((bsz, steps, 2 * hid), dtype=xd.dtype)
    gates = np.empty((bsz, steps, 4 * hid), dtype=xd.dtype)
    tcs = np.empty((bsz, steps, hid), dtype=xd.dtype)
    h, c = h0.data, c0.data
    for t in range(steps):
        z = zx[:, t] + h @ whd
        act = gates[:, t]
        act[:] = _sigmoid(z)
        act[:, 2 * hid: 3 * hid] = np.tanh(z[:, 2 * hid: 3 * hid])
        i, f, gc, o = act[:, :hid], act[:, hid: 2 * hid], act[:, 2 * hid: 3 * hid], act[:, 3 * hid:]
        c = f * c + i * gc
        tc = np.tanh(c)
        h = o * tc
        tcs[:, t] = tc
        out[:, t, :hid], out[:, t, hid:] = h, c

    def bw(g):
        dz = np.empty_like(gates)
        dh_next = np.zeros((bsz, hid), dtype=xd.dtype)
        dc_next = np.zeros((bsz, hid), dtype=xd.dtype)
        for t in range(steps - 1, -1, -1):
            i, f = gates[:, t, :hid], gates[:, t, hid: 2 * hid]
            gc, o = gates[:, t, 2 * hid: 3 * hid], gates[:, t, 3 * hid:]
            tc = tcs[:, t]
            c_prev = out[:, t - 1, hid:] if t else c0.data
            dh = g[:, t, :hid] + dh_next
            dc = g[:, t, hid:] + dc_next + dh * o * (1 - tc * tc)
            dzt = dz[:, t]
            dzt[:, :hid] = dc * gc * i * (1 - i)
            dzt[:, hid: 2 * hid] = dc * c_prev * f * (1 - f)
            dzt[:, 2 * hid: 3 * hid] = dc * i * (1 - gc * gc)
            dzt[:, 3 * hid:] = dh * tc * o * (1 - o)
            dh_next = dzt @ whd.T
            dc_next = dc * f
        dz2 = dz.reshape(-1, 4 * hid)
        h_prev = np.concatenate([h0.data[:, None], out[:, :-1, :hid]], axis=1)
        dwh = h_prev.reshape(-1, hid).T @ dz2
        dx = dz @ wx.data.T
        dwx = xd.reshape(-1, xd.shape[-1]).T @ dz2
        return dx, dh_next, dc_next, dwx, dwh, dz2.sum(axis=0)

    return custom_op(out, (x, h0, c0, wx, wh, b), bw, "lstm_sequence")
