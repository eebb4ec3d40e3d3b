"""Dense float64 tensors with reverse-mode differentiation.

Everything downstream (backbone, heads, discriminators, losses) computes on
the Tensor type defined here. Three hard rules: 64-bit precision everywhere,
deterministic forward evaluation, and any NaN/Inf is an immediate error
rather than a silent poison value.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

EPS = 1e-12  # clamp for logs and divisions

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GradientCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value in result")


class Tensor:
    """A dense float64 array embedded in a reverse-mode graph.

    Treat .data as immutable once the tensor participates in a graph;
    in-place mutation of parameters is reserved for the optimizer, which
    only runs between passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = ()
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if not self.requires_grad:
            return
        _check_finite(g, f"{self._op}.grad")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Run the graph in exact reverse topological order from here."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward() on a tensor outside the graph")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return addc(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return addc(self, -float(other))

    def __rsub__(self, other):
        return addc(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, " \
               f"requires_grad={self.requires_grad})"


def constant(data):
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _make(data, prev, op, backward_factory):
    """Build an op output; attach the backward closure only when tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    _check_finite(data, op)
    track = _grad_enabled and any(p.requires_grad for p in prev)
    out.requires_grad = track
    out.grad = None
    out._op = op
    if track:
        out._prev = tuple(prev)
        out._backward = backward_factory(out)
    else:
        out._prev = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# -- arithmetic primitives ----------------------------------------------


def add(a, b):
    _same_shape(a, b, "add")

    def bw(out):
        def run():
            a._accum(out.grad)
            b._accum(out.grad)
        return run

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    _same_shape(a, b, "sub")

    def bw(out):
        def run():
            a._accum(out.grad)
            b._accum(-out.grad)
        return run

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    _same_shape(a, b, "mul")

    def bw(out):
        def run():
            a._accum(out.grad * b.data)
            b._accum(out.grad * a.data)
        return run

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(x, c):
    c = float(c)

    def bw(out):
        def run():
            x._accum(out.grad * c)
        return run

    return _make(x.data * c, (x,), "scale", bw)


def addc(x, c):
    c = float(c)

    def bw(out):
        def run():
            x._accum(out.grad)
        return run

    return _make(x.data + c, (x,), "addc", bw)


def div(a, b):
    """Elementwise a / b with the denominator clamped away from zero."""
    _same_shape(a, b, "div")
    denom = np.where(np.abs(b.data) < EPS, np.copysign(EPS, b.data), b.data)
    denom = np.where(denom == 0.0, EPS, denom)

    def bw(out):
        def run():
            a._accum(out.grad / denom)
            b._accum(-out.grad * a.data / (denom * denom))
        return run

    return _make(a.data / denom, (a, b), "div", bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul: expects 2-D operands")

    def bw(out):
        def run():
            a._accum(out.grad @ b.data.T)
            b._accum(a.data.T @ out.grad)
        return run

    return _make(a.data @ b.data, (a, b), "matmul", bw)


# -- nonlinearities -------------------------------------------------------


def relu(x):
    data = np.maximum(x.data, 0.0)

    def bw(out):
        def run():
            x._accum(out.grad * (out.data > 0.0))
        return run

    return _make(data, (x,), "relu", bw)


def sigmoid(x):
    data = expit(x.data)

    def bw(out):
        def run():
            x._accum(out.grad * out.data * (1.0 - out.data))
        return run

    return _make(data, (x,), "sigmoid", bw)


def exp(x):
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        data = np.exp(x.data)

    def bw(out):
        def run():
            x._accum(out.grad * out.data)
        return run

    return _make(data, (x,), "exp", bw)


def log(x):
    """Natural log with the argument clamped to at least EPS."""
    clamped = np.maximum(x.data, EPS)

    def bw(out):
        def run():
            x._accum(out.grad / clamped)
        return run

    return _make(np.log(clamped), (x,), "log", bw)


def pow_const(x, c):
    """x ** c for nonnegative x and fixed exponent c."""
    c = float(c)
    base = np.maximum(x.data, 0.0)
    data = np.power(base, c)

    def bw(out):
        def run():
            x._accum(out.grad * c * np.power(np.maximum(base, EPS), c - 1.0))
        return run

    return _make(data, (x,), "pow_const", bw)


def softmax(x, axis):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            x._accum((g - dot) * out.data)
        return run

    return _make(data, (x,), "softmax", bw)


# -- reductions and reshaping ---------------------------------------------


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def tsum(x, axis=None):
    data = x.data.sum(axis=axis)
    kshape = _keepdims_shape(x.data.shape, axis)

    def bw(out):
        def run():
            g = np.broadcast_to(out.grad.reshape(kshape), x.data.shape)
            x._accum(g)
        return run

    return _make(data, (x,), "sum", bw)


def tmean(x, axis=None):
    data = x.data.mean(axis=axis)
    kshape = _keepdims_shape(x.data.shape, axis)
    n = x.data.size / max(data.size, 1)

    def bw(out):
        def run():
            g = np.broadcast_to(out.grad.reshape(kshape), x.data.shape) / n
            x._accum(g)
        return run

    return _make(data, (x,), "mean", bw)


def concat(tensors, axis=0):
    """Concatenate along an axis (channelwise for CHW maps by default)."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(out):
        def run():
            start = 0
            for t, n in zip(tensors, sizes):
                sl = [slice(None)] * out.data.ndim
                sl[axis] = slice(start, start + n)
                t._accum(out.grad[tuple(sl)])
                start += n
        return run

    return _make(data, tuple(tensors), "concat", bw)


def slice_axis(x, axis, start, stop):
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = x.data[sl].copy()

    def bw(out):
        def run():
            g = np.zeros_like(x.data)
            g[sl] = out.grad
            x._accum(g)
        return run

    return _make(data, (x,), "slice_axis", bw)


def mask_mul(x, mask):
    """Multiply by a constant mask (broadcastable); the mask gets no gradient."""
    mask = np.asarray(mask, dtype=np.float64)
    data = x.data * mask

    def bw(out):
        def run():
            g = out.grad * mask
            if g.shape != x.data.shape:
                raise ValueError("mask_mul: mask may broadcast only over x")
            x._accum(g)
        return run

    return _make(data, (x,), "mask_mul", bw)


def gather_hw(x, flat_idx):
    """Gather spatial positions of a (C,H,W) map into (C,K) columns."""
    C = x.data.shape[0]
    flat = x.data.reshape(C, -1)
    idx = np.asarray(flat_idx, dtype=np.intp)
    data = flat[:, idx].copy()

    def bw(out):
        def run():
            g = np.zeros_like(flat)
            np.add.at(g, (slice(None), idx), out.grad)
            x._accum(g.reshape(x.data.shape))
        return run

    return _make(data, (x,), "gather_hw", bw)


# -- detector-specific primitives ------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution of a (Cin,H,W) map with (Cout,Cin,kh,kw) weights.

    Supports the envelope the detector needs: 1x1 or 3x3 kernels, stride
    1 or 2, zero padding. im2col keeps the reduction order fixed, so the
    forward pass is bit-deterministic.
    """
    cout, cin, kh, kw = w.data.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    if x.data.ndim != 3 or x.data.shape[0] != cin:
        raise ValueError(f"conv2d: input {x.data.shape} does not match "
                         f"weights {w.data.shape}")

    cols = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out_mat = wmat @ cols
    if b is not None:
        out_mat = out_mat + b.data[:, None]
    hp = x.data.shape[1] + 2 * padding
    wp = x.data.shape[2] + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    data = out_mat.reshape(cout, ho, wo)

    prev = (x, w) if b is None else (x, w, b)

    def bw(out):
        def run():
            g = out.grad.reshape(cout, -1)
            if w.requires_grad:
                w._accum((g @ cols.T).reshape(w.data.shape))
            if b is not None and b.requires_grad:
                b._accum(g.sum(axis=1))
            if x.requires_grad:
                dcols = wmat.T @ g
                x._accum(_col2im(dcols, x.data.shape, kh, kw, stride, padding))
        return run

    return _make(data, prev, "conv2d", bw)


def _im2col(x, kh, kw, stride, padding):
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride))
    return np.ascontiguousarray(view).reshape(c * kh * kw, ho * wo)


def _col2im(dcols, xshape, kh, kw, stride, padding):
    c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    d = dcols.reshape(c, kh, kw, ho, wo)
    dx = np.zeros((c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += d[:, i, j]
    return dx[:, padding:padding + h, padding:padding + w]


def outer_product_channels(f, q):
    """Channel outer product: out[d*N+i,u,v] = f[d,u,v] * q[i,u,v].

    q may be a plain array (conditioning treated as a constant, the
    default) or a Tensor (gradients then also flow into q).
    """
    qt = q if isinstance(q, Tensor) else constant(q)
    if f.data.shape[1:] != qt.data.shape[1:]:
        raise ValueError(f"outer_product_channels: spatial mismatch "
                         f"{f.data.shape} vs {qt.data.shape}")
    d, h, w = f.data.shape
    n = qt.data.shape[0]
    data = (f.data[:, None] * qt.data[None]).reshape(d * n, h, w)

    def bw(out):
        def run():
            g = out.grad.reshape(d, n, h, w)
            f._accum((g * qt.data[None]).sum(axis=1))
            qt._accum((g * f.data[:, None]).sum(axis=0))
        return run

    return _make(data, (f, qt), "outer_product_channels", bw)


def grad_reverse(x, lambda_grl):
    """Identity forward; backward delivers -lambda_grl times the gradient."""
    lam = float(lambda_grl)
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda_grl must be >= 0, got {lam}")

    def bw(out):
        def run():
            x._accum(-lam * out.grad)
        return run

    return _make(x.data.copy(), (x,), "grad_reverse", bw)


# -- composite losses -----------------------------------------------------
# Built from the primitives above so the gradient contract is inherited.


def minimum(a, b):
    """Elementwise min via relu: min(a,b) = a - relu(a-b)."""
    return sub(a, relu(sub(a, b)))


def binary_cross_entropy(p, target):
    """Elementwise BCE on probabilities against a constant target map."""
    t = np.asarray(target, dtype=np.float64)
    pos = mask_mul(log(p), t)
    neg = mask_mul(log(addc(scale(p, -1.0), 1.0)), 1.0 - t)
    return scale(add(pos, neg), -1.0)


def focal_loss(logits, target, alpha=0.25, gamma=2.0):
    """Elementwise sigmoid focal loss against a constant 0/1 target map.

    Positive part -alpha*(1-p)^gamma*log(p), negative part
    -(1-alpha)*p^gamma*log(1-p).
    """
    t = np.asarray(target, dtype=np.float64)
    p = sigmoid(logits)
    one_m_p = addc(scale(p, -1.0), 1.0)
    pos = scale(mul(pow_const(one_m_p, gamma), log(p)), -alpha)
    neg = scale(mul(pow_const(p, gamma), log(one_m_p)), -(1.0 - alpha))
    return add(mask_mul(pos, t), mask_mul(neg, 1.0 - t))


def iou_loss(pred, target):
    """Per-column -log(IoU) between predicted and target (l,t,r,b) offsets.

    pred is a (4,K) tensor of positive offsets; target is a constant
    (4,K) array. IoU of two boxes sharing the same anchor point.
    """
    tgt = np.asarray(target, dtype=np.float64)
    if pred.data.shape != tgt.shape or pred.data.shape[0] != 4:
        raise ValueError("iou_loss: expects matching (4,K) operands")
    l, t = slice_axis(pred, 0, 0, 1), slice_axis(pred, 0, 1, 2)
    r, b = slice_axis(pred, 0, 2, 3), slice_axis(pred, 0, 3, 4)
    lt, tt = constant(tgt[0:1]), constant(tgt[1:2])
    rt, bt = constant(tgt[2:3]), constant(tgt[3:4])

    iw = add(minimum(l, lt), minimum(r, rt))
    ih = add(minimum(t, tt), minimum(b, bt))
    inter = mul(iw, ih)
    area_p = mul(add(l, r), add(t, b))
    area_t = constant((tgt[0:1] + tgt[2:3]) * (tgt[1:2] + tgt[3:4]))
    union = sub(add(area_p, area_t), inter)
    return scale(log(div(inter, union)), -1.0)


# -- gradient checking ------------------------------------------------------


def grad_check(fn, inputs, eps=1e-5, tol=None, name="op"):
    """Compare analytic gradients of fn against central finite differences.

    fn maps a list of Tensors to a scalar Tensor. inputs are the seeded
    arrays to differentiate at. Returns the max relative error over all
    input entries (relative to max(|analytic|, |numeric|, 1)); raises
    GradientCheckError naming the failing entry when tol is exceeded.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar")
    out.backward()
    analytic = [np.zeros_like(a) if t.grad is None else t.grad.copy()
                for a, t in zip(arrays, tensors)]

    def value_at(points):
        with no_grad():
            return float(fn(*[Tensor(p) for p in points]).data)

    max_err = 0.0
    worst = None
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = value_at(arrays)
            flat[j] = orig - eps
            f_minus = value_at(arrays)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0)
            if err > max_err:
                max_err = err
                worst = (i, j, ana, numeric)
    if tol is not None and max_err > tol:
        i, j, ana, numeric = worst
        raise GradientCheckError(
            f"{name}: input {i} entry {j}: analytic {ana:.6g} vs "
            f"numeric {numeric:.6g} (rel err {max_err:.3g} > tol {tol:.3g})")
    return max_err
