"""Dense float32 tensors with taped reverse-mode differentiation.

This is the whole numeric substrate of the detector: NCHW convolutions, the
two normalizations, a handful of activations, broadcasting arithmetic,
pooling/resampling, reductions, and a GradTape that records forward ops and
replays them backward. Everything is numpy underneath; setting MNX_DEBUG=1
adds a finiteness assertion after every forward op.

Gradients are only recorded while a GradTape is active (``with GradTape() as
tape: ...``) and at least one operand has requires_grad set. Inference code
therefore pays no taping cost. ``backward(tape, loss)`` populates ``.grad``
on every requires_grad leaf exactly once; intermediate grads are freed as the
replay walks the tape.

Broadcasting follows numpy's rules (trailing axes aligned, singleton axes
stretched); the backward pass sums gradients over the stretched axes.
"""

from __future__ import annotations

import os

import numpy as np

DEBUG = os.environ.get("MNX_DEBUG", "") not in ("", "0")

# Names of every op that participates in differentiation. The gradient test
# suite checks itself against this list so a new op cannot land untested.
DIFFERENTIABLE_OPS = [
    "add", "sub", "mul", "div", "neg",
    "exp", "atan", "sigmoid", "silu", "gelu", "softplus",
    "minimum", "maximum",
    "matmul", "conv2d", "batch_norm", "layer_norm",
    "maxpool2d", "upsample_nearest2x",
    "concat_channels", "reshape", "permute", "phase_slice", "slice_channel",
    "sum_", "mean_", "bce_with_logits",
    "selective_scan",  # lives in scan.py, taped through the same machinery
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axes."""


class NumericError(ArithmeticError):
    """An op produced non-finite values from finite inputs."""


class Tensor:
    """Dense float32 array, optionally participating in gradient taping.

    ``data`` is row-major float32. ``grad`` is filled by backward() for
    requires_grad leaves and left None otherwise. Tensors produced by ops are
    marked non-leaf; their grads are transient.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut loose from any tape."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; floats/arrays are wrapped as constant tensors.
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Execution-ordered record of ops, replayed in reverse by backward().

    The recording order is a topological order by construction (an op's
    inputs exist before its output). A tape is single-use: backward() marks
    it consumed.
    """

    def __init__(self):
        self.nodes = []  # (op name, input tensors, output tensor, backward fn)
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list = []


def _recording(*tensors) -> bool:
    return bool(_TAPES) and any(t.requires_grad for t in tensors)


def _trace(name, inputs, out, bw):
    out.requires_grad = True
    out.is_leaf = False
    _TAPES[-1].nodes.append((name, inputs, out, bw))


def _check(name, arr):
    if DEBUG and not np.isfinite(arr).all():
        raise NumericError(f"{name}: non-finite values in output")


def backward(tape: GradTape, loss: Tensor):
    """Replay the tape in reverse from ``loss``, filling leaf gradients.

    ``loss`` must be a scalar produced by this tape. Leaf ``.grad`` is
    overwritten (not accumulated across calls); non-leaf grads are freed as
    soon as their producing node has been processed.
    """
    if tape.consumed:
        raise ValueError("tape already consumed by a previous backward()")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not any(node[2] is loss for node in tape.nodes):
        raise ValueError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for name, inputs, out, bw in reversed(tape.nodes):
        gy = grads.pop(id(out), None)
        if gy is None:
            continue
        gins = bw(gy)
        for t, g in zip(inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=np.float32)
    tape.consumed = True


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)
    _check("add", out.data)
    if _recording(a, b):
        def bw(gy):
            return _unbroadcast(gy, a.shape), _unbroadcast(gy, b.shape)
        _trace("add", (a, b), out, bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data)
    _check("sub", out.data)
    if _recording(a, b):
        def bw(gy):
            return _unbroadcast(gy, a.shape), _unbroadcast(-gy, b.shape)
        _trace("sub", (a, b), out, bw)
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data)
    _check("mul", out.data)
    if _recording(a, b):
        def bw(gy):
            ga = _unbroadcast(gy * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(gy * a.data, b.shape) if b.requires_grad else None
            return ga, gb
        _trace("mul", (a, b), out, bw)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = Tensor(a.data / b.data)
    _check("div", out.data)
    if _recording(a, b):
        def bw(gy):
            ga = _unbroadcast(gy / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-gy * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb
        _trace("div", (a, b), out, bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    if _recording(a):
        _trace("neg", (a,), out, lambda gy: (-gy,))
    return out


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "minimum")
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    if _recording(a, b):
        def bw(gy):
            return (_unbroadcast(np.where(take_a, gy, 0.0), a.shape),
                    _unbroadcast(np.where(take_a, 0.0, gy), b.shape))
        _trace("minimum", (a, b), out, bw)
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "maximum")
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    if _recording(a, b):
        def bw(gy):
            return (_unbroadcast(np.where(take_a, gy, 0.0), a.shape),
                    _unbroadcast(np.where(take_a, 0.0, gy), b.shape))
        _trace("maximum", (a, b), out, bw)
    return out


# ---------------------------------------------------------------------------
# activations


def _sigmoid_np(x):
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    _check("exp", out.data)
    if _recording(a):
        _trace("exp", (a,), out, lambda gy: (gy * out.data,))
    return out


def atan(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.arctan(a.data))
    if _recording(a):
        _trace("atan", (a,), out, lambda gy: (gy / (1.0 + a.data * a.data),))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_np(a.data)
    out = Tensor(y)
    if _recording(a):
        _trace("sigmoid", (a,), out, lambda gy: (gy * y * (1.0 - y),))
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    out = Tensor(a.data * s)
    _check("silu", out.data)
    if _recording(a):
        def bw(gy):
            return (gy * (s * (1.0 + a.data * (1.0 - s))),)
        _trace("silu", (a,), out, bw)
    return out


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """tanh-approximate GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + np.float32(0.044715) * x * x * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))
    _check("gelu", out.data)
    if _recording(a):
        def bw(gy):
            dinner = _GELU_C * (1.0 + 3.0 * np.float32(0.044715) * x * x)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            return (gy * d,)
        _trace("gelu", (a,), out, bw)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), overflow-free and floored so the result is strictly
    positive even where float32 would round to zero; derivative is sigmoid."""
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data.astype(np.float64))
    out = Tensor(np.maximum(y, 1e-20))
    if _recording(a):
        _trace("softplus", (a,), out, lambda gy: (gy * _sigmoid_np(a.data),))
    return out


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits.

    Stable form max(x,0) - x*t + log(1 + e^-|x|); backward is sigmoid(x) - t.
    Targets are treated as constants.
    """
    logits = as_tensor(logits)
    t = as_tensor(targets).data
    x = logits.data
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))))
    _check("bce_with_logits", out.data)
    if _recording(logits):
        def bw(gy):
            return (gy * (_sigmoid_np(x) - t), None)
        _trace("bce_with_logits", (logits, as_tensor(targets)), out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _recording(a):
        def bw(gy):
            g = gy
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % a.ndim for ax in axes)
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, a.shape).astype(np.float32, copy=False),)
        _trace("sum_", (a,), out, bw)
    return out


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _recording(a):
        n = a.size / max(out.size, 1)
        def bw(gy):
            g = gy / np.float32(n)
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % a.ndim for ax in axes)
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, a.shape).astype(np.float32, copy=False),)
        _trace("mean_", (a,), out, bw)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if _recording(a):
        _trace("reshape", (a,), out, lambda gy: (gy.reshape(a.shape),))
    return out


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    if _recording(a):
        inv = np.argsort(axes)
        _trace("permute", (a,), out, lambda gy: (gy.transpose(inv),))
    return out


def flatten_hw(a) -> Tensor:
    """[N,C,H,W] -> [N,C,H*W]; exact inverse is unflatten_hw."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"flatten_hw expects 4-D NCHW, got {tuple(a.shape)}")
    n, c, h, w = a.shape
    return reshape(a, (n, c, h * w))


def unflatten_hw(a, h: int, w: int) -> Tensor:
    """[N,C,H*W] -> [N,C,H,W]; bitwise inverse of flatten_hw."""
    a = as_tensor(a)
    if a.ndim != 3 or a.shape[2] != h * w:
        raise ShapeError(f"unflatten_hw: cannot reshape {tuple(a.shape)} to h={h}, w={w}")
    n, c, _ = a.shape
    return reshape(a, (n, c, h, w))


def concat_channels(xs) -> Tensor:
    """Concatenate along the channel axis; all other axes must agree."""
    xs = [as_tensor(x) for x in xs]
    base = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if x.ndim != len(base) or x.shape[0] != base[0] or x.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels: input {i} has shape {tuple(x.shape)}, "
                f"incompatible with {tuple(base)} outside the channel axis"
            )
    out = Tensor(np.concatenate([x.data for x in xs], axis=1))
    if _recording(*xs):
        splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        def bw(gy):
            return tuple(np.split(gy, splits, axis=1))
        _trace("concat_channels", tuple(xs), out, bw)
    return out


def phase_slice(a, row_off: int, col_off: int) -> Tensor:
    """Stride-2 spatial subsampling x[:, :, row_off::2, col_off::2]."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"phase_slice expects 4-D NCHW, got {tuple(a.shape)}")
    out = Tensor(np.ascontiguousarray(a.data[:, :, row_off::2, col_off::2]))
    if _recording(a):
        def bw(gy):
            g = np.zeros(a.shape, dtype=np.float32)
            g[:, :, row_off::2, col_off::2] = gy
            return (g,)
        _trace("phase_slice", (a,), out, bw)
    return out


def slice_channel(a, c: int) -> Tensor:
    """Select channel ``c`` of [N,C,...] dropping the channel axis."""
    a = as_tensor(a)
    if not 0 <= c < a.shape[1]:
        raise ShapeError(f"slice_channel: channel {c} out of range for {tuple(a.shape)}")
    out = Tensor(np.ascontiguousarray(a.data[:, c]))
    if _recording(a):
        def bw(gy):
            g = np.zeros(a.shape, dtype=np.float32)
            g[:, c] = gy
            return (g,)
        _trace("slice_channel", (a,), out, bw)
    return out


def upsample_nearest2x(a) -> Tensor:
    """Repeat every pixel into a 2x2 block."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects 4-D NCHW, got {tuple(a.shape)}")
    out = Tensor(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3))
    if _recording(a):
        n, c, h, w = a.shape
        def bw(gy):
            return (gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
        _trace("upsample_nearest2x", (a,), out, bw)
    return out


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """a @ b where b is a 2-D weight [K, P]; a is [..., K]."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ShapeError(f"matmul: weight must be 2-D, got {tuple(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner axes disagree, {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    out = Tensor(a.data @ b.data)
    _check("matmul", out.data)
    _flops_add(2 * (a.size // a.shape[-1]) * b.shape[0] * b.shape[1])
    if _recording(a, b):
        def bw(gy):
            ga = gy @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, p = b.shape
                gb = a.data.reshape(-1, k).T @ gy.reshape(-1, p)
            return ga, gb
        _trace("matmul", (a, b), out, bw)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col(xp, kh, kw, stride, ho, wo):
    """[N,C,Hp,Wp] -> [N, C*kh*kw, ho*wo] patch matrix."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, kh, kw, ho, wo), dtype=np.float32)
    for i in range(kh):
        hi = i + (ho - 1) * stride + 1
        for j in range(kw):
            wj = j + (wo - 1) * stride + 1
            col[:, :, i, j] = xp[:, :, i:hi:stride, j:wj:stride]
    return col.reshape(n, c * kh * kw, ho * wo)


def _col2im_add(dxp, dcol, kh, kw, stride, ho, wo):
    n = dxp.shape[0]
    c = dxp.shape[1]
    d = dcol.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        hi = i + (ho - 1) * stride + 1
        for j in range(kw):
            wj = j + (wo - 1) * stride + 1
            dxp[:, :, i:hi:stride, j:wj:stride] += d[:, :, i, j]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW.

    x: [N, Cin, H, W]; w: [Cout, Cin/groups, kh, kw]; b: optional [Cout].
    groups=1 is a dense convolution, groups == Cin == Cout is depthwise,
    kh == kw == 1 with groups=1 is pointwise. Output spatial size is
    floor((H + 2*padding - kh)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and w, got {tuple(x.shape)}, {tuple(w.shape)}")
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"conv2d: channels (Cin={cin}, Cout={cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: weight axis 1 is {cg}, expected Cin/groups = {cin // groups}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {tuple(b.shape)} != ({cout},)")
    ho, wo = _conv_out_size(h, wd, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: spatial axes collapse, H={h} W={wd} with k=({kh},{kw}) "
            f"stride={stride} pad={padding} give output ({ho},{wo})"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    depthwise = groups == cin == cout

    if depthwise:
        y = np.zeros((n, cout, ho, wo), dtype=np.float32)
        for i in range(kh):
            hi = i + (ho - 1) * stride + 1
            for j in range(kw):
                wj = j + (wo - 1) * stride + 1
                y += xp[:, :, i:hi:stride, j:wj:stride] * w.data[None, :, 0, i, j, None, None]
        cols = None
    elif groups == 1:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        y = (w.data.reshape(cout, -1) @ cols).reshape(n, cout, ho, wo)
    else:
        cols = []
        ys = []
        og = cout // groups
        for g in range(groups):
            colg = _im2col(xp[:, g * cg:(g + 1) * cg], kh, kw, stride, ho, wo)
            wg = w.data[g * og:(g + 1) * og].reshape(og, -1)
            ys.append((wg @ colg).reshape(n, og, ho, wo))
            cols.append(colg)
        y = np.concatenate(ys, axis=1)
    if b is not None:
        y += b.data[None, :, None, None]
    _flops_add(2 * n * cout * (cin // groups) * kh * kw * ho * wo)
    out = Tensor(y)
    _check("conv2d", out.data)

    inputs = (x, w) if b is None else (x, w, b)
    if _recording(*inputs):
        def bw(gy):
            gyf = gy.reshape(n, cout, ho * wo)
            dx = dw = db = None
            if b is not None and b.requires_grad:
                db = gy.sum(axis=(0, 2, 3))
            need_dx = x.requires_grad
            if need_dx:
                dxp = np.zeros_like(xp)
            if depthwise:
                if w.requires_grad:
                    dw = np.zeros_like(w.data)
                for i in range(kh):
                    hi = i + (ho - 1) * stride + 1
                    for j in range(kw):
                        wj = j + (wo - 1) * stride + 1
                        patch = xp[:, :, i:hi:stride, j:wj:stride]
                        if w.requires_grad:
                            dw[:, 0, i, j] = (gy * patch).sum(axis=(0, 2, 3))
                        if need_dx:
                            dxp[:, :, i:hi:stride, j:wj:stride] += gy * w.data[None, :, 0, i, j, None, None]
            elif groups == 1:
                if w.requires_grad:
                    dw = np.einsum("ncl,nkl->ck", gyf, cols).reshape(w.shape)
                if need_dx:
                    dcol = np.matmul(w.data.reshape(cout, -1).T, gyf)
                    _col2im_add(dxp, dcol, kh, kw, stride, ho, wo)
            else:
                og = cout // groups
                if w.requires_grad:
                    dw = np.zeros_like(w.data)
                for g in range(groups):
                    gyg = gyf[:, g * og:(g + 1) * og]
                    if w.requires_grad:
                        dw[g * og:(g + 1) * og] = np.einsum(
                            "ncl,nkl->ck", gyg, cols[g]).reshape(og, cg, kh, kw)
                    if need_dx:
                        wg = w.data[g * og:(g + 1) * og].reshape(og, -1)
                        dcol = np.matmul(wg.T, gyg)
                        _col2im_add(dxp[:, g * cg:(g + 1) * cg], dcol, kh, kw, stride, ho, wo)
            if need_dx:
                dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            if b is None:
                return dx, dw
            return dx, dw, db
        _trace("conv2d", inputs, out, bw)
    return out


# ---------------------------------------------------------------------------
# normalizations


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.03, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with the batch's biased statistics and updates
    the running buffers in place (running = (1-momentum)*running +
    momentum*batch, unbiased variance into running_var). Eval mode
    normalizes with the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match {c} channels"
        )
    red = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        m = x.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        uvar = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * uvar
    else:
        mu = running_mean.astype(np.float32, copy=False)
        var = running_var.astype(np.float32, copy=False)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))
    _check("batch_norm", out.data)
    if _recording(x, gamma, beta):
        def bw(gy):
            dgamma = (gy * xhat).sum(axis=red) if gamma.requires_grad else None
            dbeta = gy.sum(axis=red) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = gy * gamma.data.reshape(bshape)
                if training:
                    m = x.size // c
                    s1 = dxhat.sum(axis=red, keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=red, keepdims=True)
                    dx = (invstd.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * invstd.reshape(bshape)
            return dx, dgamma, dbeta
        _trace("batch_norm", (x, gamma, beta), out, bw)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize across the channel axis (axis 1) at every other position."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match {c} channels"
        )
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))
    _check("layer_norm", out.data)
    if _recording(x, gamma, beta):
        red = (0,) + tuple(range(2, x.ndim))
        def bw(gy):
            dgamma = (gy * xhat).sum(axis=red) if gamma.requires_grad else None
            dbeta = gy.sum(axis=red) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = gy * gamma.data.reshape(bshape)
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                dx = invstd * (dxhat - m1 - xhat * m2)
            return dx, dgamma, dbeta
        _trace("layer_norm", (x, gamma, beta), out, bw)
    return out


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """k x k max pooling; padding uses -inf so it never wins."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D NCHW, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    ho, wo = _conv_out_size(h, w, kernel, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: output collapses for input {h}x{w}, k={kernel}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    win = np.empty((n, c, kernel * kernel, ho, wo), dtype=np.float32)
    for i in range(kernel):
        hi = i + (ho - 1) * stride + 1
        for j in range(kernel):
            wj = j + (wo - 1) * stride + 1
            win[:, :, i * kernel + j] = xp[:, :, i:hi:stride, j:wj:stride]
    idx = win.argmax(axis=2)
    out = Tensor(np.take_along_axis(win, idx[:, :, None], axis=2)[:, :, 0])
    if _recording(x):
        def bw(gy):
            dxp = np.zeros((n * c, hp * wp), dtype=np.float32)
            ii, jj = np.divmod(idx, kernel)
            hh = np.arange(ho)[:, None] * stride
            ww = np.arange(wo)[None, :] * stride
            flat = (ii + hh) * wp + (jj + ww)
            np.add.at(dxp, (np.arange(n * c)[:, None], flat.reshape(n * c, -1)),
                      gy.reshape(n * c, -1))
            dxp = dxp.reshape(n, c, hp, wp)
            return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)
        _trace("maxpool2d", (x,), out, bw)
    return out


# ---------------------------------------------------------------------------
# FLOP metering (forward only; used by the analysis module)

_FLOP_COUNTER: list = []


class flop_meter:
    """Context manager accumulating forward FLOPs of conv/matmul/scan ops."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _FLOP_COUNTER.append(self)
        return self

    def __exit__(self, *exc):
        _FLOP_COUNTER.pop()
        return False


def _flops_add(n: int):
    if _FLOP_COUNTER:
        _FLOP_COUNTER[-1].total += int(n)
