"""numpy-backed tensors with a tape for reverse-mode gradients.

The engine is deliberately small: just enough primitives for attention
blocks, a toy UNet and Adam training. Forward values live in numpy arrays.
Every primitive that sees a gradient-tracked input appends one record to a
global tape; backward() replays the records in exact reverse registration
order, so no topological sort is needed (inputs always precede outputs).

Tensors are treated as immutable once created; the only sanctioned mutation
is the in-place parameter update inside adam_step, which runs strictly
after backward() has consumed and cleared the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class DisconnectedLoss(ValueError):
    pass


class Tensor:
    """Dense n-d float array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None  # tape record that produced this tensor, if any

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

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape

class _Record:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


_TAPE: list[_Record] = []
_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def tape_size():
    return len(_TAPE)


def reset_tape():
    _TAPE.clear()


def _track(out, inputs, backward_fn):
    if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(inputs, out, backward_fn)
        out._op = rec
        _TAPE.append(rec)
    return out


def backward(loss, clear=True):
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf tensor.

    loss must be a scalar produced by tape-recorded operations. The tape is
    cleared afterwards unless clear=False.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward() expects a Tensor")
    if loss.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if loss._op is None:
        raise DisconnectedLoss("loss tensor was not produced by any taped operation")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(_TAPE):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._op is None:  # leaf: deposit into .grad
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    if clear:
        reset_tape()


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(g, shape):
    # reduce a broadcast gradient back down to `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _track(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _track(out, (a, b), back)


def scale(x, s):
    x = as_tensor(x)
    s = float(s)
    out = Tensor(x.data * s)
    return _track(out, (x,), lambda g: (g * s,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank>=2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_broadcast_batch = True
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}") from None
    out = Tensor(np.matmul(a.data, b.data))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _track(out, (a, b), back)


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _track(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return _track(out, (x,), lambda g: (g.transpose(inv),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _track(out, (x,), back)


def silu(x):
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)

    def back(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _track(out, (x,), back)


def tsum(x):
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum()))
    return _track(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    x = as_tensor(x)
    n = x.size
    out = Tensor(np.asarray(x.data.mean()))
    return _track(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(out, tuple(ts), back)


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _track(out, (x,), back)


def conv2d(x, w, stride=1, pad=0):
    """2d convolution (cross-correlation), x (N,C,H,W), w (O,C,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d needs 4d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    s, p = int(stride), int(pad)
    out_h = (h + 2 * p - kh) // s + 1
    out_w = (wid + 2 * p - kw) // s + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatch(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * out_h : s, j : j + s * out_w : s]
    cols2 = cols.reshape(n, c * kh * kw, out_h * out_w)
    w2 = w.data.reshape(o, c * kh * kw)
    out = Tensor(np.matmul(w2, cols2).reshape(n, o, out_h, out_w))

    def back(g):
        g2 = g.reshape(n, o, out_h * out_w)
        gw = np.einsum("nol,nml->om", g2, cols2).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, out_h, out_w)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + h, p : p + wid] if p else gxp
        return gx, gw

    return _track(out, (x, w), back)


def _resize_axis(n_in, n_out):
    c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    c = np.clip(c, 0.0, n_in - 1.0)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, c - lo


def bilinear_resize(x, out_h, out_w):
    """Bilinear resample of (N,C,H,W) to (N,C,out_h,out_w), border clamped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"bilinear_resize needs 4d input, got {x.shape}")
    n, c, h, w = x.shape
    ly, hy, fy = _resize_axis(h, out_h)
    lx, hx, fx = _resize_axis(w, out_w)
    fy = fy[:, None].astype(x.dtype)
    fx = fx[None, :].astype(x.dtype)
    d = x.data
    top = d[:, :, ly][:, :, :, lx] * (1 - fx) + d[:, :, ly][:, :, :, hx] * fx
    bot = d[:, :, hy][:, :, :, lx] * (1 - fx) + d[:, :, hy][:, :, :, hx] * fx
    out = Tensor(top * (1 - fy) + bot * fy)

    def back(g):
        gx_ = np.zeros((n, c, h, out_w), dtype=g.dtype)
        np.add.at(gx_, (slice(None), slice(None), ly), g * (1 - fy))
        np.add.at(gx_, (slice(None), slice(None), hy), g * fy)
        gxx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gxx, (slice(None), slice(None), slice(None), lx), gx_ * (1 - fx))
        np.add.at(gxx, (slice(None), slice(None), slice(None), hx), gx_ * fx)
        return (gxx,)

    return _track(out, (x,), back)


def group_norm(x, groups, eps=1e-5):
    """Per-sample group normalization of (N,C,H,W), no affine."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"group_norm needs 4d input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeMismatch(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    out = Tensor(xhat.reshape(x.shape))

    def back(g):
        gg = g.reshape(n, groups, -1)
        gm = gg.mean(axis=2, keepdims=True)
        gxm = (gg * xhat).mean(axis=2, keepdims=True)
        gx = inv * (gg - gm - xhat * gxm)
        return (gx.reshape(x.shape),)

    return _track(out, (x,), back)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        st = cls()
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place. params: name->Tensor, grads: name->ndarray."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape} for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# verification

def finite_diff_check(f, x, step=1e-6):
    """Max relative error between taped gradient of f at x and central differences.

    f maps a Tensor to a Tensor of any shape; a fixed random cotangent turns
    the output into the scalar sum(f(x) * u) so non-scalar fs are covered.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    u = np.random.default_rng(0x5EED).standard_normal(y.shape)
    loss = tsum(mul(y, Tensor(u)))
    backward(loss)
    analytic = np.zeros_like(base) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float((f(Tensor(base)).data * u).sum())
            flat[i] = orig - step
            lo = float((f(Tensor(base)).data * u).sum())
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
