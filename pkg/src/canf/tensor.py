"""Dense tensors with reverse-mode automatic differentiation.

Values live in row-major numpy arrays (fp32 by default, fp64 for
verification). Every differentiable op records a backward closure; calling
``backward()`` on a scalar loss walks the graph once in reverse topological
order. Broadcasting is deliberately restricted to scalars, trailing-axis
bias vectors and the explicit ``broadcast_to`` op so shape mistakes fail
loudly instead of silently fanning out.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

DEFAULT_DTYPE = np.float32
SUPPORTED_DTYPES = (np.float32, np.float64)

_SCALARS = (int, float, np.integer, np.floating)

# per-thread so one worker's inference pass cannot detach another's training graph
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference / sampling)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in SUPPORTED_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense n-d array plus optional differentiation history."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, dtype=None, requires_grad=False):
        self.data = _as_array(data.data if isinstance(data, Tensor) else data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents) and _grad_enabled():
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def _accumulate(self, g):
        """Add a contribution the caller may still alias elsewhere."""
        if self.requires_grad:
            if self.grad is None:
                self.grad = g.copy()
            else:
                self.grad += g

    def _accumulate_owned(self, g):
        """Add a contribution the caller hands over (fresh array or a view of
        the consumed upstream gradient, which is dead after this closure)."""
        if self.requires_grad:
            if self.grad is None:
                self.grad = g
            else:
                self.grad += g

    # -- basic properties ------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array (read it, don't mutate it)."""
        return self.data

    def detach(self):
        """Same values, no graph: never accumulates gradient."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, _SCALARS):
            out = Tensor._result(self.data + self.dtype.type(other), (self,), None)
            out._backward_fn = lambda: self._accumulate_owned(out.grad)
            return out

        if not isinstance(other, Tensor):
            return NotImplemented
        a, b = self, other
        if a.shape == b.shape:
            out = Tensor._result(a.data + b.data, (a, b), None)

            def backward():
                a._accumulate_owned(out.grad)
                b._accumulate(out.grad)

            out._backward_fn = backward
            return out
        if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
            # bias add against the trailing axis
            out = Tensor._result(a.data + b.data, (a, b), None)

            def backward():
                a._accumulate_owned(out.grad)
                b._accumulate_owned(out.grad.reshape(-1, b.shape[0]).sum(axis=0))

            out._backward_fn = backward
            return out
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), None)
        out._backward_fn = lambda: self._accumulate_owned(-out.grad)
        return out

    def __sub__(self, other):
        if isinstance(other, _SCALARS):
            return self.__add__(-other)
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.shape != other.shape:
            raise ShapeError(f"sub: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other
        out = Tensor._result(a.data - b.data, (a, b), None)

        def backward():
            a._accumulate_owned(out.grad)
            b._accumulate_owned(-out.grad)

        out._backward_fn = backward
        return out

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, _SCALARS):
            c = self.dtype.type(other)
            out = Tensor._result(self.data * c, (self,), None)
            out._backward_fn = lambda: self._accumulate_owned(out.grad * c)
            return out
        if not isinstance(other, Tensor):
            return NotImplemented
        if self.shape != other.shape:
            raise ShapeError(f"mul: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other
        out = Tensor._result(a.data * b.data, (a, b), None)

        def backward():
            a._accumulate_owned(out.grad * b.data)
            b._accumulate_owned(out.grad * a.data)

        out._backward_fn = backward
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, _SCALARS):
            return self.__mul__(1.0 / other)
        return NotImplemented

    def __pow__(self, p):
        if not isinstance(p, _SCALARS):
            return NotImplemented
        out = Tensor._result(self.data ** p, (self,), None)
        out._backward_fn = lambda: self._accumulate_owned(out.grad * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- structural ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Tensor._result(self.data.reshape(shape), (self,), None)
        out._backward_fn = lambda: self._accumulate_owned(out.grad.reshape(old))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor._result(self.data.transpose(axes), (self,), None)
        out._backward_fn = lambda: self._accumulate_owned(out.grad.transpose(inv))
        return out

    def __getitem__(self, key):
        src = self
        out = Tensor._result(self.data[key], (self,), None)

        def backward():
            g = np.zeros_like(src.data)
            g[key] = out.grad
            src._accumulate_owned(g)

        out._backward_fn = backward
        return out

    def broadcast_to(self, shape):
        shape = tuple(shape)
        try:
            data = np.broadcast_to(self.data, shape)
        except ValueError as e:
            raise ShapeError(f"broadcast_to: cannot expand {self.shape} to {shape}") from e
        src = self
        out = Tensor._result(np.ascontiguousarray(data), (self,), None)

        def backward():
            g = out.grad
            extra = g.ndim - src.ndim
            if extra:
                g = g.sum(axis=tuple(range(extra)))
            axes = tuple(i for i, n in enumerate(src.shape) if n == 1 and g.shape[i] != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
            src._accumulate_owned(g)

        out._backward_fn = backward
        return out

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            src._accumulate(np.broadcast_to(g, src.shape).astype(src.dtype, copy=False))

        out._backward_fn = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities --------------------------------------------------------------

    def gelu(self):
        return gelu(self)

    # -- backward pass -----------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss; leaves accumulate ``.grad``.

        Nodes run once each, only after all their consumers have contributed
        (pending-consumer counting), so shared subgraphs accumulate correctly.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        pending = {}
        stack = [self]
        seen = {id(self)}
        while stack:
            node = stack.pop()
            for parent in node._parents:
                key = id(parent)
                pending[key] = pending.get(key, 0) + 1
                if key not in seen:
                    seen.add(key)
                    stack.append(parent)
        self.grad = np.ones_like(self.data)
        ready = [self]
        while ready:
            node = ready.pop()
            if node._backward_fn is not None:
                node._backward_fn()
            for parent in node._parents:
                key = id(parent)
                pending[key] -= 1
                if pending[key] == 0 and parent._parents:
                    ready.append(parent)


# -- free functions ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. For ndim > 2 the leading (batch) dims must match exactly."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects two Tensors")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._result(np.matmul(a.data, b.data), (a, b), None)

    def backward():
        a._accumulate_owned(np.matmul(out.grad, b.data.swapaxes(-1, -2)))
        b._accumulate_owned(np.matmul(a.data.swapaxes(-1, -2), out.grad))

    out._backward_fn = backward
    return out


def cat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("cat of an empty sequence")
    out = Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            t._accumulate_owned(g)

    out._backward_fn = backward
    return out


def take_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding): out[i] = table[idx[i]]."""
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("take_rows expects integer indices")
    out = Tensor._result(table.data[idx], (table,), None)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        table._accumulate_owned(g)

    out._backward_fn = backward
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """GELU (tanh approximation); smooth, which keeps finite differences honest."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = Tensor._result((0.5 * v * (1.0 + t)).astype(v.dtype, copy=False), (x,), None)

    def backward():
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        x._accumulate_owned(np.asarray(out.grad * d, dtype=v.dtype))

    out._backward_fn = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax along ``axis`` (max subtraction before exp)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(y, (x,), None)

    def backward():
        g = out.grad
        x._accumulate_owned(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward_fn = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = Tensor._result((xhat * gamma.data + beta.data).astype(x.dtype, copy=False), (x, gamma, beta), None)

    def backward():
        g = out.grad
        gxh = g * gamma.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        term = gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
        x._accumulate_owned(np.asarray(term * inv, dtype=x.dtype))
        lead = tuple(range(g.ndim - 1))
        gamma._accumulate_owned((g * xhat).sum(axis=lead))
        beta._accumulate_owned(g.sum(axis=lead))

    out._backward_fn = backward
    return out


# -- convolution -----------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Patch extraction: (B, C, H, W) -> contiguous (B, C*kh*kw, Ho*Wo)."""
    b, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    """Scatter-add patches back to image space (adjoint of _im2col)."""
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with channel groups.

    x: (B, Cin, H, W); w: (Cout, Cin/groups, kh, kw). groups=Cin=Cout gives a
    depthwise convolution; groups=B (after folding the batch into channels)
    is the fused per-sample execution path.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: kernel expects {cg} channels/group but input has {cin // groups} (groups={groups})")
    if x.dtype != w.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {w.dtype}")
    span_h = h + 2 * padding - kh
    span_w = wd + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} stride {stride} padding {padding} does not tile input {h}x{wd}"
        )

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    cols_g = cols.reshape(b, groups, cg * kh * kw, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, cg * kh * kw)
    out_data = np.matmul(w_g, cols_g).reshape(b, cout, ho, wo)
    out = Tensor._result(out_data, (x, w), None)

    def backward():
        g = out.grad.reshape(b, groups, cout // groups, ho * wo)
        if w.requires_grad:
            gw = np.einsum("bgok,bgik->goi", g, cols_g, optimize=True)
            w._accumulate_owned(np.asarray(gw.reshape(w.shape), dtype=w.dtype))
        if x.requires_grad:
            gcols = np.matmul(w_g.swapaxes(-1, -2), g).reshape(b, cin * kh * kw, ho * wo)
            x._accumulate_owned(_col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo))

    out._backward_fn = backward
    return out


# -- gradient access ----------------------------------------------------------------------


def gradients(loss: Tensor, params) -> list:
    """Run backward from ``loss`` and return one gradient array per parameter.

    Parameters the loss does not reach get zeros of the right shape.
    """
    for p in params:
        p.zero_grad()
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
