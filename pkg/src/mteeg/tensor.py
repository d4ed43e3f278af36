"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the encoder, adapters and heads need are provided. Every
op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the output gradient to
per-parent gradients. :meth:`Tensor.backward` walks the graph in reverse
topological order and accumulates (adds) into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import ndtr

from mteeg import _kernels


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
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
    """A float64 array plus an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialized
    ``grad`` of the same shape. Intermediate results never hold ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None) -> set:
        """Reverse sweep from this tensor; returns the set of leaves reached.

        ``grad`` defaults to 1 for scalar outputs. Leaf gradients accumulate,
        callers zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        reached = set()
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad += g
                reached.add(node)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        return reached

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never require gradients."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = bool(frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        self.requires_grad = not self.frozen
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# elementwise
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = ndtr(xd)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), bw)


# -----------------------------------------------------------------------------
# shape
# -----------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]`` (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], (table,), bw)


# -----------------------------------------------------------------------------
# reductions
# -----------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -----------------------------------------------------------------------------
# linear algebra
# -----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(ad @ bd, (a, b), bw)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every input index must appear in the other
    operand or in the output, so each gradient is itself an einsum."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated index in operand {s!r}")
        for c in s:
            if c not in other and c not in out:
                raise ShapeError(f"index {c!r} of {s!r} is summed within one operand")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bd) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, ad) if b.requires_grad else None
        return ga, gb

    return _make(np.einsum(spec, ad, bd), (a, b), bw)


# -----------------------------------------------------------------------------
# softmax and losses
# -----------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean multiclass cross-entropy of (B, K) logits against int labels."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    b = z.shape[0]
    loss = float(np.mean(lse - zs[np.arange(b), labels]))

    def bw(g):
        p = np.exp(zs - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), bw)


def binary_cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean BCE of (B,) or (B, 1) logits against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    # max(z,0) - z*y + log(1 + exp(-|z|))
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    n = z.size

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (sig - y) / n,)

    return _make(np.asarray(loss), (logits,), bw)


# -----------------------------------------------------------------------------
# normalization
# -----------------------------------------------------------------------------


def _rownorm(x2: Tensor, eps: float) -> Tensor:
    xd = np.ascontiguousarray(x2.data)
    xhat, rstd = _kernels.rownorm_fwd(xd, eps)
    return _make(
        xhat, (x2,), lambda g: (_kernels.rownorm_bwd(np.ascontiguousarray(g), xhat, rstd),)
    )


def layer_norm(x: Tensor, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature affine."""
    shape = x.shape
    y = reshape(_rownorm(reshape(x, (-1, shape[-1])), eps), shape)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def group_norm(x: Tensor, groups: int, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Group normalization of (N, C, L) input with per-channel affine."""
    n, c, length = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    y = reshape(_rownorm(reshape(x, (n * groups, (c // groups) * length)), eps), (n, c, length))
    if gamma is not None:
        y = mul(y, reshape(as_tensor(gamma), (c, 1)))
    if beta is not None:
        y = add(y, reshape(as_tensor(beta), (c, 1)))
    return y


def normalize(x: Tensor, mode: str = "layer", groups: int = 1, eps: float = 1e-5, affine=None) -> Tensor:
    """``mode`` is ``"layer"`` or ``"group"``; ``affine`` is (gamma, beta) or None."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma, beta = affine if affine is not None else (None, None)
    if mode == "layer":
        return layer_norm(x, gamma, beta, eps)
    if mode == "group":
        return group_norm(x, groups, gamma, beta, eps)
    raise ValueError(f"unknown normalization mode {mode!r}")


# -----------------------------------------------------------------------------
# convolution
# -----------------------------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, Cin, L) or (Cin, L) input with (Cout, Cin, k)."""
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, cin, length = x.shape
    cout, kcin, k = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    lp = length + 2 * padding
    if k > lp:
        raise ShapeError(f"kernel length {k} exceeds padded input length {lp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(kernel.data)
    out = _kernels.conv1d_fwd(xp, w, stride)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            gxp = _kernels.conv1d_bwd_input(g, w, stride, lp)
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        gw = _kernels.conv1d_bwd_weight(g, xp, k, stride) if kernel.requires_grad else None
        return gx, gw

    y = _make(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, reshape(as_tensor(bias), (cout, 1)))
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


# -----------------------------------------------------------------------------
# verification
# -----------------------------------------------------------------------------


def grad_check(f, params, h: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"{p!r} does not require grad")
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite function value")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite value perturbing {getattr(p, 'name', p)}[{i}]")
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            if not math.isfinite(a):
                raise NumericError("non-finite analytic gradient")
            worst = max(worst, abs(a - num) / max(1.0, abs(num)))
        p.zero_grad()
    return worst
