"""Dense arrays with a reverse-mode gradient tape.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw numpy arrays and a ``backward`` that maps the output
gradient to one gradient per input.  Calling ``Function.apply`` records a
:class:`Node` whenever an input requires a gradient; :func:`backward` replays
the recorded nodes in reverse creation order.

Arrays are channels-last throughout the package (``H x W x C`` images,
``X x Y x Z x C`` volumes).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import IndexOutOfRange, NonFiniteValue, NonScalarLoss, ShapeMismatch

_state = threading.local()
_seq = itertools.count()

#: name -> Function subclass, used by the gradient-check suite
REGISTRY: dict[str, type[Function]] = {}


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
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
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis):
        return Max.apply(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def relu(self):
        return Relu.apply(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Context:
    """Scratch space shared between a forward and its backward."""

    def save(self, **kw):
        self.__dict__.update(kw)


class Node:
    __slots__ = ("fn", "ctx", "inputs", "output", "seq")

    def __init__(self, fn, ctx, inputs, output):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.output = output
        self.seq = next(_seq)


class Function:
    differentiable = True

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        REGISTRY[cls.__name__] = cls

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        like = next((t for t in inputs if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, like) for t in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteValue(f"{cls.__name__} produced a non-finite value")
        result = Tensor(out)
        if grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result.node = Node(cls, ctx, tensors, result)
        return result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeMismatch(f"shapes {shapes} are not broadcast-compatible") from None


# -- elementwise -------------------------------------------------------
class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        broadcast_shape(a.shape, b.shape)
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(g, ctx.sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        broadcast_shape(a.shape, b.shape)
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(-g, ctx.sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        broadcast_shape(a.shape, b.shape)
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        broadcast_shape(a.shape, b.shape)
        ctx.save(a=a, b=b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        ga = g / ctx.b
        gb = -g * ctx.a / (ctx.b * ctx.b)
        return _unbroadcast(ga, ctx.a.shape), _unbroadcast(gb, ctx.b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        y = np.exp(a)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.y,)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        y = np.sqrt(a)
        ctx.save(y=y)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx.y,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask=mask)
        return np.where(mask, a, 0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


# -- reductions and shape ops -------------------------------------------
class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Max(Function):
    """Max along one axis; the gradient goes to the lowest-index maximiser."""

    @staticmethod
    def forward(ctx, a, axis):
        idx = np.argmax(a, axis=axis)
        ctx.save(shape=a.shape, idx=np.expand_dims(idx, axis), axis=axis, dtype=a.dtype)
        return np.take_along_axis(a, ctx.idx, axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.put_along_axis(out, ctx.idx, np.expand_dims(g, ctx.axis), axis=ctx.axis)
        return (out,)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape=a.shape)
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        ctx.save(inv=tuple(np.argsort(axes)))
        return np.ascontiguousarray(a.transpose(axes))

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(ctx.inv),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=-1):
        ctx.save(sizes=[a.shape[axis] for a in arrays], axis=axis)
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=ctx.axis))


class Take(Function):
    """Gather entries of ``a`` along ``axis`` with an integer index array."""

    @staticmethod
    def forward(ctx, a, index, axis=0):
        index = np.asarray(index, dtype=np.int64)
        n = a.shape[axis]
        if index.size and (index.min() < -n or index.max() >= n):
            raise IndexOutOfRange(f"index out of range for axis of size {n}")
        index = np.where(index < 0, index + n, index)
        ctx.save(shape=a.shape, index=index, axis=axis % a.ndim)
        return np.take(a, index, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis = ctx.axis
        out = np.zeros(ctx.shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        gi = ctx.index.ndim
        gm = np.moveaxis(g, list(range(axis, axis + gi)), list(range(gi)))
        np.add.at(moved, ctx.index, gm)
        return (out,)


class IndexPut(Function):
    """Replace rows ``index`` of ``base`` (first axis) with ``values``."""

    @staticmethod
    def forward(ctx, base, values, index):
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= base.shape[0]):
            raise IndexOutOfRange(f"row index out of range for {base.shape[0]} rows")
        if values.shape != index.shape + base.shape[1:]:
            raise ShapeMismatch(f"values {values.shape} do not fit rows of {base.shape}")
        ctx.save(index=index)
        out = base.copy()
        out[index] = values
        return out

    @staticmethod
    def backward(ctx, g):
        gb = g.copy()
        gb[ctx.index] = 0
        return gb, g[ctx.index]


class ScatterSum(Function):
    """Sum rows of ``values`` into ``size`` output rows, in input order."""

    @staticmethod
    def forward(ctx, values, index, size):
        index = np.asarray(index, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= size):
            raise IndexOutOfRange("scatter target out of range")
        ctx.save(index=index)
        out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, index, values)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g[ctx.index],)


# -- contractions ----------------------------------------------------------
class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeMismatch(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        if a.ndim == 1:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.multiply.outer(a, g)
            return ga, _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _window_slices(offset, out_shape, stride):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_shape))


class ConvND(Function):
    """Channels-last N-d convolution.

    ``x`` is ``(*spatial, Cin)`` and ``w`` is ``(*kernel, Cin, Cout)``; zero
    padding ``pad`` on every spatial side.  Kernel offsets are accumulated in
    a fixed lexicographic order.
    """

    @staticmethod
    def forward(ctx, x, w, stride=1, pad=0):
        nsp = w.ndim - 2
        if x.ndim != nsp + 1:
            raise ShapeMismatch(f"kernel rank {nsp} does not match input {x.shape}")
        if x.shape[-1] != w.shape[-2]:
            raise ShapeMismatch(f"input channels {x.shape[-1]} != kernel {w.shape[-2]}")
        ksz = w.shape[:nsp]
        xp = np.pad(x, [(pad, pad)] * nsp + [(0, 0)]) if pad else x
        out_sp = tuple((n - k) // stride + 1 for n, k in zip(xp.shape[:nsp], ksz))
        if min(out_sp) < 1:
            raise ShapeMismatch(f"kernel {ksz} larger than padded input {xp.shape[:nsp]}")
        out = np.zeros(out_sp + (w.shape[-1],), dtype=np.result_type(x, w))
        for off in np.ndindex(*ksz):
            out += xp[_window_slices(off, out_sp, stride)] @ w[off]
        ctx.save(xp=xp, w=w, stride=stride, pad=pad, out_sp=out_sp, nsp=nsp)
        return out

    @staticmethod
    def backward(ctx, g):
        xp, w, s, nsp = ctx.xp, ctx.w, ctx.stride, ctx.nsp
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        g2 = g.reshape(-1, g.shape[-1])
        for off in np.ndindex(*w.shape[:nsp]):
            sl = _window_slices(off, ctx.out_sp, s)
            gxp[sl] += g @ w[off].T
            gw[off] = xp[sl].reshape(-1, xp.shape[-1]).T @ g2
        if ctx.pad:
            p = ctx.pad
            gxp = gxp[tuple(slice(p, n - p) for n in xp.shape[:nsp])]
        return gxp, gw


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return (y * (g - (g * y).sum(axis=ctx.axis, keepdims=True)),)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - a.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        ctx.save(y=y, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        return (g - np.exp(ctx.y) * g.sum(axis=ctx.axis, keepdims=True),)


class TrilinearSample(Function):
    """Sample a ``(S0, S1, S2, C)`` lattice at continuous coordinates.

    ``coords[..., i]`` indexes axis ``i`` of the lattice.  Lattice points
    outside the volume read as zero.
    """

    CORNERS = tuple(itertools.product((0, 1), repeat=3))

    @staticmethod
    def forward(ctx, volume, coords):
        if volume.ndim != 4 or coords.shape[-1] != 3:
            raise ShapeMismatch(f"expected (S0,S1,S2,C) volume and (...,3) coords, got {volume.shape}, {coords.shape}")
        lead = coords.shape[:-1]
        c = coords.reshape(-1, 3)
        base = np.floor(c)
        t = c - base
        i0 = base.astype(np.int64)
        dims = np.array(volume.shape[:3])
        flat = volume.reshape(-1, volume.shape[-1])
        strides = np.array([dims[1] * dims[2], dims[2], 1])
        out = np.zeros((c.shape[0], volume.shape[-1]), dtype=np.result_type(volume, coords))
        corners = []
        for corner in TrilinearSample.CORNERS:
            idx = i0 + corner
            valid = np.all((idx >= 0) & (idx < dims), axis=1)
            rows = np.where(valid, (np.clip(idx, 0, dims - 1) * strides).sum(axis=1), 0)
            fac = np.where(corner, t, 1.0 - t)
            wgt = fac.prod(axis=1) * valid
            vals = flat[rows] * valid[:, None]
            out += wgt[:, None] * vals
            corners.append((rows, valid, fac, vals))
        ctx.save(vshape=volume.shape, lead=lead, corners=corners, cshape=coords.shape)
        return out.reshape(lead + (volume.shape[-1],))

    @staticmethod
    def backward(ctx, g):
        C = ctx.vshape[-1]
        g2 = g.reshape(-1, C)
        gvol = np.zeros((int(np.prod(ctx.vshape[:3])), C), dtype=g.dtype)
        gc = np.zeros((g2.shape[0], 3), dtype=g.dtype)
        for corner, (rows, valid, fac, vals) in zip(TrilinearSample.CORNERS, ctx.corners):
            wgt = fac.prod(axis=1) * valid
            np.add.at(gvol, rows[valid], (wgt[:, None] * g2)[valid])
            gv = (g2 * vals).sum(axis=1)
            for ax in range(3):
                others = np.delete(fac, ax, axis=1).prod(axis=1)
                sign = 1.0 if corner[ax] else -1.0
                gc[:, ax] += sign * others * gv
        return gvol.reshape(ctx.vshape), gc.reshape(ctx.cshape)


# -- functional front-ends -------------------------------------------------
def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def elementwise(kind: str, a, b):
    """Binary elementwise op by name: ``add``, ``sub``, ``mul`` or ``div``."""
    return {"add": add, "sub": sub, "mul": mul, "div": div}[kind](a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def conv_nd(x, kernel, stride=1, pad=0, bias=None):
    out = ConvND.apply(x, kernel, stride=stride, pad=pad)
    return out if bias is None else out + bias


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis=-1):
    return LogSoftmax.apply(a, axis=axis)


def concat(tensors, axis=-1):
    return Concat.apply(*tensors, axis=axis)


def take(a, index, axis=0):
    return Take.apply(a, index=index, axis=axis)


def index_put(base, values, index):
    return IndexPut.apply(base, values, index=index)


def scatter_sum(values, index, size):
    return ScatterSum.apply(values, index=index, size=size)


def trilinear_sample(volume, coords):
    return TrilinearSample.apply(volume, coords)


def relu(a):
    return Relu.apply(a)


def layer_norm(x: Tensor, gamma=None, beta=None, eps=1e-5) -> Tensor:
    """Normalise over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / (var + eps).sqrt()
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


# -- the tape ----------------------------------------------------------------
class GradTape:
    """The recorded operations that a scalar loss depends on, in creation order."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        nodes = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in nodes:
                continue
            nodes[id(n)] = n
            stack.extend(n.inputs)
        self.ops: list[Node] = sorted(nodes.values(), key=lambda n: n.seq)

    def __len__(self):
        return len(self.ops)

    def replay(self) -> None:
        loss = self.loss
        grads = {id(loss): np.ones_like(loss.data)}
        keep = {id(loss): loss}
        for node in reversed(self.ops):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.fn.backward(node.ctx, g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = t
        for key, g in grads.items():
            t = keep[key]
            if t.node is None and t.requires_grad:
                t.grad = g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    GradTape(loss).replay()
