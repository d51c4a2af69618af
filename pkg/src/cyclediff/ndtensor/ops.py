"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and, when a tape is active and
an input is tracked, records a closure that maps the output gradient to input
gradients.  Shape requirements are listed per op.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, default_dtype, record


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=default_dtype())
    if like is not None and arr.ndim == 0:
        arr = arr.reshape((1,) * like.ndim)
    return Tensor._wrap(arr)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {list(a)} vs {list(b)}")
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {list(a)} and {list(b)} are not unit-axis broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape, op)
    return a, b


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.data / b.data

    def backward(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return record(out, (a, b), backward)


def binary(op: str, a, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``div``."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op]
    except KeyError:
        raise ValueError(f"unknown binary op {op!r}") from None
    return fn(a, b)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n] -> [m,n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")

    def backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return record(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[b,i] @ w[i,o] (+ bias[1,o])."""
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    x: [b,c,h,w], w: [o,c,kh,kw] with odd kh, kw.  Stride-1 convolutions over
    enough channels use shifted matrix products on a flattened padded buffer;
    the rest go through an im2col buffer.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x [b,c,h,w] and kernel [o,c,kh,kw]")
    b, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d: kernel expects {ck} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError("conv2d: kernel larger than padded input")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if stride == 1 and c >= 4 and (kh > 1 or kw > 1):
        return _conv_shift(x, w, pad)
    if stride > 1 and c >= 4:
        return _conv_phases(x, w, stride, pad)
    return _conv_im2col(x, w, stride, pad)


def _conv_shift(x: Tensor, w: Tensor, pad: int) -> Tensor:
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    oh, ow = hp - kh + 1, wp - kw + 1
    dt = x.data.dtype
    # channel-major padded buffer, flattened over (b, hp, wp)
    xp = np.zeros((c, b, hp, wp), dtype=dt)
    xp[:, :, pad:pad + h, pad:pad + wd] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    n = xf.shape[1]
    span = n - ((kh - 1) * wp + (kw - 1))
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # [kh,kw,o,c]
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    acc = _shifted_products(taps.reshape(kh * kw, o, c), xf, offsets, span, n)
    out = acc.reshape(o, b, hp, wp)[:, :, :oh, :ow].transpose(1, 0, 2, 3)

    def backward(g, needs):
        gp = np.zeros((o, b, hp, wp), dtype=g.dtype)
        gp[:, :, :oh, :ow] = g.transpose(1, 0, 2, 3)
        gf = gp.reshape(o, -1)[:, :span]
        gw = np.empty((kh, kw, o, c), dtype=g.dtype) if needs[1] else None
        gx = dx = None
        if needs[0] and o < 4:
            # few output channels: one im2col pass beats c*kh*kw-wide accumulations
            flipped = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _correlate(g, flipped, kh - 1 - pad)
        elif needs[0]:
            dx = _scattered_products(taps.reshape(kh * kw, o, c).transpose(0, 2, 1), gf, offsets, n)
        if gw is not None:
            for i in range(kh):
                for j in range(kw):
                    off = i * wp + j
                    gw[i, j] = gf @ xf[:, off:off + span].T
        if dx is not None:
            gx = dx.reshape(c, b, hp, wp)[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
        return gx, (gw.transpose(2, 3, 0, 1) if gw is not None else None)

    return record(out, (x, w), backward)


_STACK_LIMIT = 1 << 26  # elements; larger tap stacks fall back to one product per tap


def _shifted_products(taps: np.ndarray, xf: np.ndarray, offsets, span: int, n: int) -> np.ndarray:
    """sum_k taps[k] @ xf[:, off_k:off_k + span], written into [o, n] (tail zero).

    All taps share one matrix product when the stacked result fits the limit."""
    k, o, c = taps.shape
    acc = np.zeros((o, n), dtype=xf.dtype)
    if k * o * n <= _STACK_LIMIT:
        y = taps.reshape(k * o, c) @ xf
        for t, off in enumerate(offsets):
            acc[:, :span] += y[t * o:(t + 1) * o, off:off + span]
    else:
        for t, off in enumerate(offsets):
            acc[:, :span] += taps[t] @ xf[:, off:off + span]
    return acc


def _scattered_products(taps_t: np.ndarray, gf: np.ndarray, offsets, n: int) -> np.ndarray:
    """sum_k of taps_t[k] @ gf placed at columns off_k:off_k + span of a [c, n] buffer."""
    k, c, o = taps_t.shape
    span = gf.shape[1]
    dx = np.zeros((c, n), dtype=gf.dtype)
    if k * c * span <= _STACK_LIMIT:
        y = np.ascontiguousarray(taps_t).reshape(k * c, o) @ gf
        for t, off in enumerate(offsets):
            dx[:, off:off + span] += y[t * c:(t + 1) * c]
    else:
        for t, off in enumerate(offsets):
            dx[:, off:off + span] += taps_t[t] @ gf
    return dx


def _conv_phases(x: Tensor, w: Tensor, s: int, pad: int) -> Tensor:
    """Strided convolution as a sum of stride-1 convolutions over the s*s
    polyphase components of the padded input (tap (i, j) reads phase
    (i % s, j % s) at offset (i // s, j // s))."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out(h, kh, s, pad), _conv_out(wd, kw, s, pad)
    hq, wq = oh + (kh - 1) // s, ow + (kw - 1) // s  # phase grid, common to all phases
    dt = x.data.dtype
    xp = np.zeros((c, b, s * hq, s * wq), dtype=dt)
    rows, cols = min(h, s * hq - pad), min(wd, s * wq - pad)
    xp[:, :, pad:pad + rows, pad:pad + cols] = x.data.transpose(1, 0, 2, 3)[:, :, :rows, :cols]
    n = b * hq * wq
    groups = []  # (phase buffer [c, n], tap indices, offsets)
    for a in range(s):
        for e in range(s):
            taps = [(i, j) for i in range(a, kh, s) for j in range(e, kw, s)]
            if not taps:
                continue
            buf = np.ascontiguousarray(xp[:, :, a::s, e::s]).reshape(c, n)
            groups.append((buf, taps, [(i // s) * wq + j // s for i, j in taps]))
    span = n - max(max(g[2]) for g in groups)
    acc = np.zeros((o, n), dtype=dt)
    for buf, taps, offs in groups:
        tw = np.stack([w.data[:, :, i, j] for i, j in taps])
        acc += _shifted_products(tw, buf, offs, span, n)
    out = acc.reshape(o, b, hq, wq)[:, :, :oh, :ow].transpose(1, 0, 2, 3)

    def backward(g, needs):
        gp = np.zeros((o, b, hq, wq), dtype=g.dtype)
        gp[:, :, :oh, :ow] = g.transpose(1, 0, 2, 3)
        gf = gp.reshape(o, -1)[:, :span]
        gw = np.empty((o, c, kh, kw), dtype=g.dtype) if needs[1] else None
        dxp = np.zeros_like(xp) if needs[0] else None
        for buf, taps, offs in groups:
            if gw is not None:
                for (i, j), off in zip(taps, offs):
                    gw[:, :, i, j] = gf @ buf[:, off:off + span].T
            if dxp is not None:
                tw = np.stack([w.data[:, :, i, j].T for i, j in taps])
                a, e = taps[0][0] % s, taps[0][1] % s
                dxp[:, :, a::s, e::s] += _scattered_products(tw, gf, offs, n).reshape(c, b, hq, wq)
        gx = None
        if dxp is not None:
            gx = np.zeros((c, b, h, wd), dtype=g.dtype)
            gx[:, :, :rows, :cols] = dxp[:, :, pad:pad + rows, pad:pad + cols]
            gx = gx.transpose(1, 0, 2, 3)
        return gx, gw

    return record(out, (x, w), backward)


def _correlate(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Plain stride-1 cross-correlation on arrays (no tape)."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    return (w.reshape(o, -1) @ cols).reshape(o, b, oh, ow).transpose(1, 0, 2, 3)


def _conv_im2col(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh, ow = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # columns stored transposed: [c*kh*kw, b*oh*ow]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    wm = w.data.reshape(o, c * kh * kw)
    out = (wm @ cols).reshape(o, b, oh, ow).transpose(1, 0, 2, 3)

    def backward(g, needs):
        gm = g.transpose(1, 0, 2, 3).reshape(o, b * oh * ow)
        gw = (gm @ cols.T).reshape(w.shape) if needs[1] else None
        gx = None
        if needs[0]:
            dcols = (wm.T @ gm).reshape(c, kh, kw, b, oh, ow)
            dxp = np.zeros((c, b, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
        return gx, gw

    return record(out, (x, w), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    src = x.shape

    def backward(g, needs):
        return (g.reshape(src),)

    return record(x.data.reshape(shape), (x,), backward)


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(xs)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)] if needs[i] else None)
        return out

    return record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """[b,c,h,w] -> [b,c,h*f,w*f] by pixel repetition."""
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor)).reshape(b, c, h * factor, w * factor)

    def backward(g, needs):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), backward)


# -- unary nonlinearities -----------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g, needs):
        return (g * mask,)

    return record(x.data * mask, (x,), backward)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # tanh form is stable in both tails and needs a single transcendental call
    s = np.tanh(d * 0.5)
    s += 1
    s *= 0.5
    return s


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g, needs):
        return (g * s * (1 - s),)

    return record(s, (x,), backward)


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)
    out = s * d

    def backward(g, needs):
        # d/dx x*s(x) = s + x*s*(1-s) = s*(1 + x - out)
        t = 1 + d
        t -= out
        t *= s
        t *= g
        return (t,)

    return record(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g, needs):
        return (g * out,)

    return record(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive entries")

    def backward(g, needs):
        return (g / x.data,)

    return record(np.log(x.data), (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g, needs):
        return (g * np.sign(x.data),)

    return record(np.abs(x.data), (x,), backward)


def pow(x: Tensor, p: float) -> Tensor:  # noqa: A001
    """x**p for a constant exponent; non-integer p needs x >= 0."""
    p = float(p)
    if not p.is_integer() and np.any(x.data < 0):
        raise ValueError("pow: non-integer exponent of negative entries")
    out = np.power(x.data, p)

    def backward(g, needs):
        return (g * p * np.power(x.data, p - 1),)

    return record(out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative entries")
    out = np.sqrt(x.data)

    def backward(g, needs):
        return (g * 0.5 / out,)

    return record(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g, needs):
        return (g * inside,)

    return record(np.clip(x.data, lo, hi), (x,), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    kept = x.data.sum(axis=axes, keepdims=True).shape

    def backward(g, needs):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return record(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g, needs):
        return (np.broadcast_to(g.reshape(kept) / n, x.shape).copy(),)

    return record(out, (x,), backward)


def avg_pool(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k average pooling; h and w must be divisible by k."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool: extents {h}x{w} not divisible by {k}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g, needs):
        gg = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (b, c, h // k, k, w // k, k))
        return (gg.reshape(b, c, h, w),)

    return record(out, (x,), backward)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize [b,c,...] to zero mean / unit variance within channel groups.

    No affine parameters here; scale and shift are applied by the caller.
    """
    b, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(b, groups, -1)
    xhat = xg - xg.mean(axis=2, keepdims=True)
    var = np.einsum("bgi,bgi->bg", xhat, xhat)[:, :, None] / xhat.shape[2]
    inv = (1.0 / np.sqrt(var + eps)).astype(xhat.dtype)
    xhat *= inv

    def backward(g, needs):
        gg = g.reshape(b, groups, -1)
        dx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        return (dx.reshape(x.shape),)

    return record(xhat.reshape(x.shape), (x,), backward)


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits (targets are constants)."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.data.dtype)
    y = y.reshape(logits.shape)
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    loss = np.logaddexp(0, -np.abs(z)) + np.maximum(z, 0) - z * y
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g, needs):
        return ((g / z.size) * (s - y),)

    return record(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward)


def nonlinear(op: str, x: Tensor, *args, **kwargs) -> Tensor:
    """Dispatch a unary op by name (relu, silu, sigmoid, group_norm, mean, sum, pow, sqrt, avg_pool, ...)."""
    table = {
        "relu": relu, "silu": silu, "sigmoid": sigmoid, "group_norm": group_norm,
        "mean": mean, "sum": sum, "pow": pow, "sqrt": sqrt, "avg_pool": avg_pool,
        "exp": exp, "log": log, "abs": abs, "clip": clip,
    }
    if op not in table:
        raise ValueError(f"unknown op {op!r}")
    return table[op](x, *args, **kwargs)
