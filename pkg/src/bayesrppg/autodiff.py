"""Reverse-mode automatic differentiation on dense numpy arrays.

Covers exactly the operations the pulse-extraction network needs: 3D
convolution / transposed convolution, max pooling, batch normalization,
ELU, and the elementwise/reduction algebra the losses are built from.
Float32 is the training dtype; float64 exists for gradient verification.

The computation graph is recorded implicitly: each operation links its
output tensor to its parents together with a backward closure holding the
saved context. ``Tensor.backward()`` replays those closures in reverse
topological order and then frees them, so a second backward on the same
forward pass raises.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import GradCheckError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float array plus an optional gradient slot.

    ``data`` is always a numpy float32 or float64 array; ``grad`` has the
    same shape and dtype once ``backward`` has run.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray):
        # for backward closures that guarantee g is a fresh array nothing
        # else aliases; skips the defensive first-accumulation copy
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded graph.

        Without an explicit seed gradient the tensor must be a scalar.
        Each node's saved context is released after use; running backward
        a second time on the same forward pass raises ``RuntimeError``.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if self._parents and self._backward_fn is None:
            raise RuntimeError("backward() called twice on the same graph; rerun the forward pass")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")

        # Iterative post-order topological sort; graphs can be long chains.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)
                node._backward_fn = None  # free context; guards double backward

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Create an op output, recording the graph only when it can matter."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise algebra -------------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward)


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _make(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed without overflow for large x."""
    x = a.data
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        # d softplus / dx = sigmoid(x)
        sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
        a._accumulate(g * sig.astype(x.dtype, copy=False))

    return _make(out, (a,), backward)


def elu(a, alpha: float = 1.0) -> Tensor:
    """x for x >= 0, alpha*(e^x - 1) below; C1 at the origin when alpha=1."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    x = a.data
    neg_part = np.minimum(x, x.dtype.type(0.0))
    np.expm1(neg_part, out=neg_part)
    if alpha != 1.0:
        neg_part *= alpha
    out = np.maximum(x, x.dtype.type(0.0))
    out += neg_part

    def backward(g):
        # local slope: 1 for x>=0, alpha*e^x = neg_part + alpha below; with
        # alpha=1 both branches collapse to neg_part + 1
        if alpha == 1.0:
            slope = neg_part + x.dtype.type(1.0)
        else:
            slope = np.where(x >= 0.0, 1.0, neg_part + alpha).astype(x.dtype, copy=False)
        slope *= g
        a._accumulate_owned(slope)

    return _make(out, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def backward(g):
        inside = (a.data > lo) & (a.data < hi)
        a._accumulate(g * inside.astype(a.data.dtype))

    return _make(out, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
            return
        g_exp = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g_exp, a.data.shape).astype(a.data.dtype))

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tuple(tensors), backward)


# -- 3D convolution family -----------------------------------------------------


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected a triple, got {v!r}")
    return t


def _pad5(x: np.ndarray, pad: tuple) -> np.ndarray:
    pt, ph, pw = pad
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _offsets(kernel: tuple):
    kt, kh, kw = kernel
    return [(dt, dh, dw) for dt in range(kt) for dh in range(kh) for dw in range(kw)]


def _im2col(xp: np.ndarray, kernel: tuple, stride: tuple, out_sp: tuple) -> np.ndarray:
    """Unfold padded input (N,C,Tp,Hp,Wp) into columns of shape (C*K, N*To*Ho*Wo).

    Row index is channel-major over kernel offsets, matching the layout of
    ``weight.reshape(Cout, Cin*K)``. One vectorized copy per kernel offset
    keeps this memory-bandwidth rather than loop-overhead bound.
    """
    n, c = xp.shape[:2]
    st, sh, sw = stride
    to, ho, wo = out_sp
    k = len(_offsets(kernel))
    col = np.empty((c, k, n, to, ho, wo), dtype=xp.dtype)
    for j, (dt, dh, dw) in enumerate(_offsets(kernel)):
        src = xp[:, :, dt : dt + to * st : st, dh : dh + ho * sh : sh, dw : dw + wo * sw : sw]
        col[:, j] = src.transpose(1, 0, 2, 3, 4)
    return col.reshape(c * k, -1)


def _col2im(col: np.ndarray, xp_shape: tuple, kernel: tuple, stride: tuple, out_sp: tuple) -> np.ndarray:
    """Adjoint of ``_im2col``: fold columns back into a padded-input gradient."""
    n, c = xp_shape[:2]
    st, sh, sw = stride
    to, ho, wo = out_sp
    k = len(_offsets(kernel))
    xp = np.zeros(xp_shape, dtype=col.dtype)
    col = col.reshape(c, k, n, to, ho, wo)
    for j, (dt, dh, dw) in enumerate(_offsets(kernel)):
        dst = xp[:, :, dt : dt + to * st : st, dh : dh + ho * sh : sh, dw : dw + wo * sw : sw]
        dst += col[:, j].transpose(1, 0, 2, 3, 4)
    return xp


def _crop5(xp: np.ndarray, pad: tuple) -> np.ndarray:
    pt, ph, pw = pad
    if pt == ph == pw == 0:
        return xp
    return xp[
        :,
        :,
        pt : xp.shape[2] - pt or None,
        ph : xp.shape[3] - ph or None,
        pw : xp.shape[4] - pw or None,
    ]


def conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Cross-correlation of (N,Cin,T,H,W) with (Cout,Cin,kt,kh,kw).

    Output extent per axis is floor((in + 2p - k)/s) + 1.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d needs 5D input and weight, got {x.data.shape} and {weight.data.shape}")
    n, cin, *in_sp = x.data.shape
    cout, cin_w, *kernel = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d input has {cin} channels but weight expects {cin_w}")
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv3d stride components must be >= 1, got {stride}")
    out_sp = []
    for i, d in enumerate(in_sp):
        span = d + 2 * padding[i] - kernel[i]
        if span < 0:
            raise ShapeError(
                f"conv3d kernel {tuple(kernel)} exceeds padded input extent on axis {i} "
                f"({d} + 2*{padding[i]} < {kernel[i]})"
            )
        out_sp.append(span // stride[i] + 1)
    out_sp = tuple(out_sp)
    kernel = tuple(kernel)

    xp = _pad5(x.data, padding)
    col = _im2col(xp, kernel, stride, out_sp)  # (CK, P)
    w2d = weight.data.reshape(cout, -1)
    # (P, CK) @ (CK, Cout): BLAS sees both operands via transpose flags
    yp = col.T @ w2d.T
    y = np.ascontiguousarray(yp.reshape(n, *out_sp, cout).transpose(0, 4, 1, 2, 3))
    if bias is not None:
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv3d bias shape {bias.data.shape} != ({cout},)")
        y += bias.data.reshape(1, cout, 1, 1, 1)

    #ref kept only when a parameter actually needs the columns
    saved_col = col if (_grad_enabled and weight.requires_grad) else None

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(cout, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2d.sum(axis=1))
        if weight.requires_grad:
            weight._accumulate_owned((g2d @ saved_col.T).reshape(weight.data.shape))
        if x.requires_grad:
            gcol = w2d.T @ g2d
            gxp = _col2im(gcol, xp.shape, kernel, stride, out_sp)
            x._accumulate_owned(np.ascontiguousarray(_crop5(gxp, padding)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward)


def conv_transpose3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Adjoint of ``conv3d``: output extent per axis is (in-1)*s - 2p + k.

    Weight layout is (Cin, Cout, kt, kh, kw), mirroring the convolution it
    transposes.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv_transpose3d needs 5D input and weight, got {x.data.shape} and {weight.data.shape}")
    n, cin, *in_sp = x.data.shape
    cin_w, cout, *kernel = weight.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose3d input has {cin} channels but weight expects {cin_w}")
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv_transpose3d stride components must be >= 1, got {stride}")
    kernel = tuple(kernel)
    out_sp = tuple((in_sp[i] - 1) * stride[i] - 2 * padding[i] + kernel[i] for i in range(3))
    if any(d < 1 for d in out_sp):
        raise ShapeError(f"conv_transpose3d output extent {out_sp} is empty")

    # Scatter formulation: treat x as the "gradient" side of a conv whose
    # output is the (padded) result; _col2im does the strided accumulation.
    x2d = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(cin, -1)
    w2d = weight.data.reshape(cin, -1)  # (Cin, Cout*K)
    col = w2d.T @ x2d  # (Cout*K, N*Ti*Hi*Wi)
    yp_shape = (n, cout) + tuple(out_sp[i] + 2 * padding[i] for i in range(3))
    yp = _col2im(col, yp_shape, kernel, stride, tuple(in_sp))
    y = np.ascontiguousarray(_crop5(yp, padding))
    if bias is not None:
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"conv_transpose3d bias shape {bias.data.shape} != ({cout},)")
        y += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gp = _pad5(g, padding)
        gcol = _im2col(gp, kernel, stride, tuple(in_sp))  # (Cout*K, P)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            weight._accumulate_owned((x2d @ gcol.T).reshape(weight.data.shape))
        if x.requires_grad:
            gx2d = w2d @ gcol  # (Cin, P)
            gx = gx2d.reshape(cin, n, *in_sp).transpose(1, 0, 2, 3, 4)
            x._accumulate_owned(np.ascontiguousarray(gx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward)


def maxpool3d(x, kernel, stride=None) -> Tensor:
    """Windowed maximum over (T,H,W); gradient goes to the first argmax per window."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d needs a 5D input, got {x.data.shape}")
    n, c, *in_sp = x.data.shape
    for i in range(3):
        if kernel[i] > in_sp[i]:
            raise ShapeError(f"maxpool3d kernel {kernel} larger than input extent {tuple(in_sp)} on axis {i}")
    out_sp = tuple((in_sp[i] - kernel[i]) // stride[i] + 1 for i in range(3))

    track = _grad_enabled and x.requires_grad
    tiled = kernel == stride and all(in_sp[i] % kernel[i] == 0 for i in range(3))
    if tiled:
        kt, kh, kw = kernel
        to, ho, wo = out_sp
        blocked = x.data.reshape(n, c, to, kt, ho, kh, wo, kw)
        if not track:
            return _make(blocked.max(axis=(3, 5, 7)), (x,), None)
        win = blocked.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, to, ho, wo, -1)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gw = np.zeros_like(win)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            kt_, kh_, kw_ = kernel
            gx = gw.reshape(n, c, to, ho, wo, kt_, kh_, kw_).transpose(0, 1, 2, 5, 3, 6, 4, 7)
            x._accumulate_owned(np.ascontiguousarray(gx).reshape(x.data.shape))

        return _make(np.ascontiguousarray(y), (x,), backward)

    # general path: strided window view + explicit scatter
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(x.data, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    flat = win.reshape(n, c, *out_sp, -1)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        kt, kh, kw = kernel
        off = np.stack(np.unravel_index(idx, kernel), axis=0)  # (3, N, C, To, Ho, Wo)
        grid = np.indices((n, c) + out_sp)
        ti = grid[2] * stride[0] + off[0]
        hi = grid[3] * stride[1] + off[1]
        wi = grid[4] * stride[2] + off[2]
        np.add.at(gx, (grid[0], grid[1], ti, hi, wi), g)
        x._accumulate(gx)

    return _make(np.ascontiguousarray(y), (x,), backward)


def batch_norm3d(
    x,
    gamma,
    beta,
    eps: float = 1e-5,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel standardization over (N,T,H,W) with running-stat tracking.

    Train mode normalizes with batch statistics and updates the running
    buffers in place (``new = (1-momentum)*old + momentum*batch``); eval
    mode normalizes with the running buffers.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    if eps <= 0:
        raise ShapeError("batch_norm3d needs eps > 0")
    if x.data.ndim != 5:
        raise ShapeError(f"batch_norm3d needs a 5D input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm3d gamma/beta must have shape ({c},)")

    axes = (0, 2, 3, 4)
    m = x.data.size // c
    dt = x.data.dtype
    if not training:
        # eval: a fixed per-channel affine map, fused into one multiply-add
        if running_mean is None or running_var is None:
            raise ShapeError("batch_norm3d eval mode needs running statistics")
        mu = running_mean.astype(dt, copy=False)
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(dt, copy=False)
        scale = (gamma.data * invstd).reshape(1, c, 1, 1, 1)
        shift = (beta.data - gamma.data * invstd * mu).reshape(1, c, 1, 1, 1)
        y = x.data * scale + shift

        def backward_eval(g):
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=axes))
            if gamma.requires_grad:
                xhat = (x.data - mu.reshape(1, c, 1, 1, 1)) * invstd.reshape(1, c, 1, 1, 1)
                gamma._accumulate((g * xhat).sum(axis=axes))
            if x.requires_grad:
                x._accumulate_owned((g * scale).astype(dt, copy=False))

        return _make(y.astype(dt, copy=False), (x, gamma, beta), backward_eval)

    mu = x.data.mean(axis=axes)
    xhat = x.data - mu.reshape(1, c, 1, 1, 1)
    flat = xhat.reshape(x.data.shape[0], c, -1)
    var = np.einsum("ncp,ncp->c", flat, flat) / m  # biased, used for normalization
    if running_mean is not None:
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    invstd = (1.0 / np.sqrt(var + eps)).astype(dt, copy=False)
    xhat *= invstd.reshape(1, c, 1, 1, 1)  # in place: xhat owns its buffer
    y = gamma.data.reshape(1, c, 1, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1, 1)

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1, 1)
            s1 = gxhat.sum(axis=axes).reshape(1, c, 1, 1, 1)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1, 1)
            gx = (gxhat - s1 / m - xhat * s2 / m) * invstd.reshape(1, c, 1, 1, 1)
            x._accumulate_owned(gx.astype(dt, copy=False))

    return _make(y.astype(dt, copy=False), (x, gamma, beta), backward)


# -- gradient verification -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_err: float
    per_input: list = field(default_factory=list)
    n_checked: int = 0
    n_skipped: int = 0
    h: float = 1e-5
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(op, inputs, h: float = 1e-5, tol: float = 1e-4, skip=None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``op`` against central finite differences.

    ``op`` maps the given tensors to a tensor; the output is reduced to a
    scalar with a fixed random projection so one backward pass yields every
    gradient. Errors are scale-relative: |a-n| / max(1e-12, ||a||_inf,
    ||n||_inf) per input. Inputs must be float64. ``skip`` optionally gives
    one boolean mask per input marking elements to exclude (points where
    the op is not differentiable); skipped counts land in the report.
    """
    tensors = []
    for x in inputs:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        if t.data.dtype != np.float64:
            raise GradCheckError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
        tensors.append(t)
    if skip is None:
        skip = [None] * len(tensors)

    rng = np.random.default_rng(seed)
    y0 = op(*tensors)
    proj = rng.standard_normal(y0.data.shape)

    def scalar_now() -> float:
        # evaluates op at the tensors' current (possibly perturbed) data
        with no_grad():
            return float((op(*tensors).data * proj).sum())

    if not np.all(np.isfinite(y0.data)):
        raise GradCheckError("op produced non-finite forward values")
    loss = sum_(mul(y0, Tensor(proj, dtype=np.float64)))
    loss.backward()

    report = GradCheckReport(max_rel_err=0.0, h=h, tol=tol)
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError(f"analytic gradient of input {i} is non-finite")
        numeric = np.zeros_like(t.data)
        mask = np.zeros(t.data.shape, dtype=bool) if skip[i] is None else np.asarray(skip[i], dtype=bool)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        mask_flat = mask.reshape(-1)
        for j in range(flat.size):
            if mask_flat[j]:
                report.n_skipped += 1
                continue
            orig = flat[j]
            flat[j] = orig + h
            fp = scalar_now()
            flat[j] = orig - h
            fm = scalar_now()
            flat[j] = orig
            num_flat[j] = (fp - fm) / (2.0 * h)
            report.n_checked += 1
        if not np.all(np.isfinite(numeric)):
            raise GradCheckError(f"numeric gradient of input {i} is non-finite")
        valid = ~mask
        scale = max(
            np.abs(analytic[valid]).max(initial=0.0),
            np.abs(numeric[valid]).max(initial=0.0),
            1e-12,
        )
        err = float(np.abs(analytic[valid] - numeric[valid]).max(initial=0.0) / scale)
        report.per_input.append(err)
        report.max_rel_err = max(report.max_rel_err, err)
    return report
