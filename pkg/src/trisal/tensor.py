"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything is numpy underneath; the tape only stores enough to replay the
computation backwards. Ops are module-level functions (plus operator sugar on
``Tensor``). Recording happens when a ``Tape`` is active *and* at least one
input requires gradients; without an active tape the same functions run as
plain forward numerics, which is what evaluation and finite differencing use.
"""

import json
from collections import Counter

import numpy as np

from .errors import ContractError, DataError, NumericalError, ShapeError

_TAPES = []  # innermost active tape last

_NAN_CHECKS = False


def set_nan_checks(enabled):
    """Globally toggle per-op finiteness assertions on forward outputs."""
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is allocated eagerly for leaves created with
    ``requires_grad=True`` and is always the same shape as ``data``.
    Intermediate results carry ``requires_grad`` so recording propagates, but
    their gradients live only inside the backward pass.
    """

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _OpRecord:
    __slots__ = ("name", "inputs", "input_ids", "output_id", "out_data", "backward_fn")

    def __init__(self, name, inputs, input_ids, output_id, out_data, backward_fn):
        self.name = name
        self.inputs = inputs
        self.input_ids = input_ids
        self.output_id = output_id
        self.out_data = out_data
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; execution order is topological order.

    Use as a context manager around the forward pass, then call
    ``backward(loss)`` (or ``loss.backward()``). A tape can be consumed by
    backward exactly once.
    """

    def __init__(self):
        self.ops = []
        self.finished = False
        self._ids = {}  # id(tensor) -> node id, valid while records keep tensors alive
        self._produced = set()
        self._next_id = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def _node_id(self, t):
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[id(t)] = nid
            t.node_id = nid
        return nid

    def record(self, name, inputs, out, backward_fn):
        in_ids = tuple(self._node_id(t) for t in inputs)
        out_id = self._node_id(out)
        out.tape = self
        self._produced.add(out_id)
        self.ops.append(_OpRecord(name, inputs, in_ids, out_id, out.data, backward_fn))

    def op_counts(self):
        """Counter of op names recorded so far (instrumentation hook)."""
        return Counter(op.name for op in self.ops)

    def first_nonfinite(self):
        """Name and index of the first op whose output holds NaN/Inf, or None."""
        for i, op in enumerate(self.ops):
            if not np.all(np.isfinite(op.out_data)):
                return op.name, i
        return None

    def run_backward(self, loss):
        if self.finished:
            raise ContractError("tape already consumed by backward; record a fresh tape")
        if loss.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.finished = True
        grads = {self._ids[id(loss)]: np.ones((), dtype=np.float64)}
        for op in reversed(self.ops):
            g = grads.pop(op.output_id, None)
            if g is None:
                continue
            in_grads = op.backward_fn(g)
            for t, tid, gi in zip(op.inputs, op.input_ids, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if tid in self._produced:
                    if tid in grads:
                        grads[tid] = grads[tid] + gi
                    else:
                        grads[tid] = gi
                else:  # leaf: accumulate into its grad buffer
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gi


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def backward(loss):
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ContractError("loss was not produced under an active tape")
    loss.tape.run_backward(loss)


def _make(name, out_data, inputs, backward_fn):
    if _NAN_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericalError(f"non-finite output of op '{name}'")
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not align") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", out, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _make("div", out, (a, b), bwd)


def relu(x):
    """max(0, x); the subgradient at exactly 0 is defined as 0."""
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _make("relu", out, (x,), bwd)


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), bwd)


def log(x):
    out = np.log(x.data)
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _make("log", out, (x,), bwd)


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient is zero where the input was clipped."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (g * mask,)

    return _make("clamp", out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    old = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _make("reshape", out, (x,), bwd)


def transpose_last2(x):
    """Swap the last two axes (matrix transpose broadcast over leading dims)."""
    out = np.swapaxes(x.data, -1, -2)

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _make("transpose_last2", out, (x,), bwd)


def concat_channels(tensors):
    """Concatenate 4-D maps along the channel axis; B, H, W must match."""
    tensors = [_wrap(t) for t in tensors]
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: shapes {base} and {s} differ outside the channel axis")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _make("concat_channels", out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x):
    out = x.data.sum()
    shape = x.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum_all", np.asarray(out), (x,), bwd)


def mean_all(x):
    n = x.data.size
    out = x.data.mean()
    shape = x.data.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean_all", np.asarray(out), (x,), bwd)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D map, got {x.data.shape}")
    b, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _make("global_avg_pool", out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product; 2-D operands or 3-D with matching leading batch."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3) or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul: unsupported ranks for shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not align")
    out = np.matmul(ad, bd)

    def bwd(g):
        return (
            np.matmul(g, np.swapaxes(bd, -1, -2)),
            np.matmul(np.swapaxes(ad, -1, -2), g),
        )

    return _make("matmul", out, (a, b), bwd)


def softmax_rows(x):
    """Row-wise softmax over the last axis, with per-row max subtraction."""
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_rows", out, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, bias, stride=1, dilation=1, padding=0):
    """Cross-correlation of (B, C, H, W) with (O, C, k, k) plus per-channel bias."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {xd.shape} and {wd.shape}")
    b_, c, h, wid = xd.shape
    o, cw, k, k2 = wd.shape
    if k != k2 or cw != c:
        raise ShapeError(f"conv2d: kernel {wd.shape} does not match input {xd.shape}")
    out_h = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (wid + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: output extent {out_h}x{out_w} for input {xd.shape}, kernel {k}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = np.empty((b_, c, k, k, out_h, out_w), dtype=np.float64)
    for i in range(k):
        hi = i * dilation
        for j in range(k):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi : hi + stride * out_h : stride, wj : wj + stride * out_w : stride]
    cols_m = cols.reshape(b_, c * k * k, out_h * out_w)
    out = np.matmul(wd.reshape(o, c * k * k), cols_m).reshape(b_, o, out_h, out_w)
    out += bias.data[None, :, None, None]

    def bwd(g):
        gl = g.reshape(b_, o, out_h * out_w)
        dw = np.tensordot(gl, cols_m, axes=([0, 2], [0, 2])).reshape(o, c, k, k)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.matmul(wd.reshape(o, c * k * k).T, gl).reshape(b_, c, k, k, out_h, out_w)
        gxp = np.zeros_like(xp)
        for i in range(k):
            hi = i * dilation
            for j in range(k):
                wj = j * dilation
                gxp[:, :, hi : hi + stride * out_h : stride, wj : wj + stride * out_w : stride] += dcols[:, :, i, j]
        dx = gxp[:, :, padding : padding + h, padding : padding + wid] if padding else gxp
        return dx, dw, db

    return _make("conv2d", out, (x, w, bias), bwd)


def batchnorm2d(x, gamma, beta, running_stats, mode, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over (B, H, W).

    ``running_stats`` is a mutable (mean, var) pair of Tensors updated in
    train mode and read in eval mode. Variances are population (biased)
    statistics throughout.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-D map, got {xd.shape}")
    b_, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta for {c} channels, got {gamma.data.shape}/{beta.data.shape}")
    run_mean, run_var = running_stats
    if mode == "train":
        if b_ * h * w < 2:
            raise ContractError("batchnorm2d train mode needs batch*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        run_mean.data *= 1.0 - momentum
        run_mean.data += momentum * mu
        run_var.data *= 1.0 - momentum
        run_var.data += momentum * var
    elif mode == "eval":
        mu = run_mean.data
        var = run_var.data
    else:
        raise ContractError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    n = b_ * h * w

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gamma.data[None, :, None, None]
        if mode == "train":
            m1 = gx.mean(axis=(0, 2, 3))
            m2 = (gx * xhat).sum(axis=(0, 2, 3)) / n
            dx = inv[None, :, None, None] * (gx - m1[None, :, None, None] - xhat * m2[None, :, None, None])
        else:
            dx = gx * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _make("batchnorm2d", out, (x, gamma, beta), bwd)


def max_pool2d(x, k, stride):
    """Max pooling with square window k and the given stride; ties keep the first."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-D map, got {xd.shape}")
    b_, c, h, w = xd.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"max_pool2d: window {k} stride {stride} too large for {xd.shape}")
    wins = np.empty((b_, c, out_h, out_w, k * k), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            wins[:, :, :, :, i * k + j] = xd[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    arg = wins.argmax(axis=-1)
    out = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        onehot = (np.arange(k * k)[None, None, None, None, :] == arg[..., None]).astype(np.float64)
        contrib = onehot * g[..., None]
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += contrib[:, :, :, :, i * k + j]
        return (gx,)

    return _make("max_pool2d", out, (x,), bwd)


_BILINEAR_CACHE = {}


def _bilinear_matrix(n):
    """(2n, n) interpolation matrix for x2 upsampling with half-pixel centers."""
    m = _BILINEAR_CACHE.get(n)
    if m is None:
        src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        w1 = src - i0
        m = np.zeros((2 * n, n), dtype=np.float64)
        m[np.arange(2 * n), i0] += 1.0 - w1
        m[np.arange(2 * n), i1] += w1
        _BILINEAR_CACHE[n] = m
    return m


def upsample_bilinear_x2(x):
    """Double H and W by bilinear interpolation (half-pixel-centers convention)."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"upsample_bilinear_x2 expects a 4-D map, got {xd.shape}")
    h, w = xd.shape[2], xd.shape[3]
    mr = _bilinear_matrix(h)
    mc = _bilinear_matrix(w)
    out = np.matmul(np.matmul(mr, xd), mc.T)

    def bwd(g):
        return (np.matmul(np.matmul(mr.T, g), mc),)

    return _make("upsample_bilinear_x2", out, (x,), bwd)


def broadcast_hw(x, h, w):
    """Expand a (B, C, 1, 1) map to (B, C, h, w)."""
    xd = x.data
    if xd.ndim != 4 or xd.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_hw expects (B, C, 1, 1), got {xd.shape}")
    out = np.broadcast_to(xd, xd.shape[:2] + (h, w)).copy()

    def bwd(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return _make("broadcast_hw", out, (x,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be smooth at ``x`` (keep
    inputs away from relu kinks and pooling ties). The error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if x.grad is None:
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
    x.zero_grad()
    with Tape():
        y = f(x)
        y.backward()
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# serialization: one JSON header line, then raw little-endian float64


def save_tensor(path, t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(json.dumps({"shape": list(data.shape)}).encode() + b"\n")
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            shape = tuple(json.loads(header)["shape"])
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: bad tensor header at byte 0: {exc}") from None
        raw = fh.read()
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes after byte {len(header)}, got {len(raw)}")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
