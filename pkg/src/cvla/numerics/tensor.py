"""Dense tensors with reverse-mode differentiation on an explicit record.

Forward ops are plain numpy; when a GradRecord is active and an input is
tracked, the op appends an entry (tag, input node ids, output node id, backward
closure) to the record. backward() replays the entries in reverse and writes
.grad onto every leaf registered in the record (zeros for unreachable leaves).

Conventions kept throughout the package:
  - row-major dense buffers, dtype is "f32" or "f64" end-to-end per run;
  - matmul/linear/attention batch over arbitrary leading axes;
  - a record is confined to the thread that opened it.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from ..errors import ArgumentError, DimensionError, NumericError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A dense array plus optional gradient buffer and record node id."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, dtype=None, requires_grad=False):
        if dtype is not None and not isinstance(dtype, str):
            dtype = _NAMES[np.dtype(dtype)]
        arr = np.asarray(data, dtype=DTYPES[dtype] if dtype else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None  # (record serial, index) while tracked

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
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are untracked constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype="f32", requires_grad=False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype="f32", requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Gradient record
# ---------------------------------------------------------------------------

_tls = threading.local()
_serial_lock = threading.Lock()
_serial_next = [0]


def active_record():
    return getattr(_tls, "record", None)


class GradRecord:
    """Ordered tape of primitive applications for one forward pass.

    Entries are appended in execution order, which is topological by
    construction. Replaying backward over an unchanged record is bit-identical;
    calling backward twice without reset() is a StateError.
    """

    def __init__(self):
        with _serial_lock:
            self.serial = _serial_next[0]
            _serial_next[0] += 1
        self._entries = []  # (tag, in_ids tuple[int|None], out_id, backward_fn)
        self._leaves = []  # tensors with requires_grad tracked by this record
        self._next = 0
        self._consumed = False

    def __enter__(self):
        if active_record() is not None:
            raise StateError("GradRecord already active on this thread")
        _tls.record = self
        return self

    def __exit__(self, *exc):
        _tls.record = None
        return False

    def _new_id(self) -> int:
        nid = self._next
        self._next += 1
        return nid

    def track_leaf(self, t: Tensor) -> int:
        nid = self._new_id()
        t.node_id = (self.serial, nid)
        self._leaves.append(t)
        return nid

    def add(self, tag, in_ids, out: Tensor, backward_fn):
        out_id = self._new_id()
        out.node_id = (self.serial, out_id)
        self._entries.append((tag, in_ids, out_id, backward_fn))

    def reset(self):
        """Allow another backward pass over the same entries."""
        self._consumed = False
        for leaf in self._leaves:
            leaf.grad = None

    def backward(self, loss: Tensor):
        """Populate .grad on all leaves; unreachable leaves get zeros."""
        if self._consumed:
            raise StateError("backward already ran on this record; call reset() first")
        if loss.size != 1:
            raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id[0] != self.serial:
            raise StateError("loss was not produced under this record")
        self._consumed = True
        grads = {loss.node_id[1]: np.ones_like(loss.data)}
        for tag, in_ids, out_id, backward_fn in reversed(self._entries):
            g_out = grads.pop(out_id, None)
            if g_out is None:
                continue
            for nid, g in zip(in_ids, backward_fn(g_out)):
                if nid is None or g is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = g if acc is None else acc + g
        for leaf in self._leaves:
            nid = leaf.node_id[1]
            leaf.grad = grads.get(nid)
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def backward(loss: Tensor):
    """Run backward on the record currently active on this thread."""
    rec = active_record()
    if rec is None:
        raise StateError("no active GradRecord")
    rec.backward(loss)


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------


def _node_of(rec, t):
    """Node id of t under rec, registering requires_grad leaves on first use."""
    if t.node_id is not None and t.node_id[0] == rec.serial:
        return t.node_id[1]
    if t.requires_grad:
        return rec.track_leaf(t)
    return None


def _emit(tag, out_data, inputs, make_backward):
    """Wrap out_data in a Tensor, recording the op if any input is tracked.

    make_backward is called lazily (only when recording) and must return a
    closure g_out -> tuple of per-input gradients aligned with `inputs`.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.node_id = None
    rec = active_record()
    if rec is not None:
        ids = tuple(_node_of(rec, t) if isinstance(t, Tensor) else None for t in inputs)
        if any(i is not None for i in ids):
            rec.add(tag, ids, out, make_backward())
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over axes that were broadcast relative to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ArgumentError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "add")
    out = a.data + b.data
    ash, bsh = a.shape, b.shape
    return _emit("add", out, (a, b), lambda: lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "sub")
    out = a.data - b.data
    ash, bsh = a.shape, b.shape
    return _emit("sub", out, (a, b), lambda: lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh)))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit(
        "mul", out, (a, b),
        lambda: lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda: lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def mk():
        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, ash).copy(),)

        return bwd

    return _emit("sum", np.asarray(out), (a,), mk)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    ash = a.shape
    count = a.size if axis is None else int(np.prod([ash[i] for i in np.atleast_1d(axis)]))

    def mk():
        def bwd(g):
            gg = g / count
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, ash).copy(),)

        return bwd

    return _emit("mean", np.asarray(out), (a,), mk)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    _check_same_dtype(a, b, "matmul")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def mk():
        def bwd(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        return bwd

    return _emit("matmul", out, (a, b), mk)


def linear(x: Tensor, W: Tensor, B: Tensor | None = None) -> Tensor:
    """x @ W.T + B with x of shape [..., in], W [out, in], B [out].

    Fused so backward runs as two gemms over the flattened leading axes.
    """
    _check_same_dtype(x, W, "linear")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != W in-width {W.shape[1]}")
    out = np.matmul(x.data, W.data.T)
    if B is not None:
        out += B.data
    xd, wd = x.data, W.data

    def mk():
        def bwd(g):
            g2 = g.reshape(-1, wd.shape[0])
            x2 = xd.reshape(-1, wd.shape[1])
            gx = np.matmul(g, wd)
            gw = np.matmul(g2.T, x2)
            gb = None if B is None else g2.sum(axis=0)
            return gx, gw, gb

        return bwd

    return _emit("linear", out, (x, W, B) if B is not None else (x, W), mk)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table [V, w], integer ids [...] -> [..., w]."""
    ids = np.asarray(ids)
    out = table.data[ids]
    vshape = table.shape

    def mk():
        def bwd(g):
            gt = np.zeros(vshape, dtype=g.dtype)
            np.add.at(gt, ids.ravel(), g.reshape(-1, vshape[1]))
            return (gt,)

        return bwd

    return _emit("embed", out, (table,), mk)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; rejects NaN input."""
    m = x.data.max(axis=-1, keepdims=True)
    if np.isnan(m).any():
        raise NumericError("softmax: NaN in input")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)
    y = out

    def mk():
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        return bwd

    return _emit("softmax", out, (x,), mk)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, 0.5 x (1 + erf(x / sqrt 2))."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def mk():
        def bwd(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
            return (g * (cdf + xd * pdf),)

        return bwd

    return _emit("gelu", out, (x,), mk)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm: affine shapes {gain.shape}/{bias.shape} vs width {x.shape[-1]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data
    n = x.shape[-1]

    def mk():
        def bwd(g):
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
            axes = tuple(range(g.ndim - 1))
            ggain = (g * xhat).sum(axis=axes)
            gbias = g.sum(axis=axes)
            return gx, ggain, gbias

        return bwd

    return _emit("layernorm", out, (x, gain, bias), mk)


# ---------------------------------------------------------------------------
# Convolution and pooling (NHWC)
# ---------------------------------------------------------------------------


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    B, H, W, C = xd.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    v = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    v = v[:, ::stride, ::stride]  # [B, oh, ow, C, kh, kw]
    cols = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B, oh, ow, kh * kw * C)
    return cols, oh, ow


def conv2d(x: Tensor, W: Tensor, B: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, x [B,H,W,C], W [kh,kw,C,OC], B [OC]."""
    _check_same_dtype(x, W, "conv2d")
    kh, kw, cin, oc = W.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: channels {x.shape[-1]} != kernel in-channels {cin}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = W.data.reshape(-1, oc)
    out = np.matmul(cols.reshape(-1, kh * kw * cin), wmat).reshape(x.shape[0], oh, ow, oc)
    if B is not None:
        out += B.data
    xshape = x.shape

    def mk():
        def bwd(g):
            g2 = g.reshape(-1, oc)
            gw = np.matmul(cols.reshape(-1, kh * kw * cin).T, g2).reshape(W.shape)
            gb = None if B is None else g2.sum(axis=0)
            dcols = np.matmul(g2, wmat.T).reshape(g.shape[0], oh, ow, kh, kw, cin)
            if stride == kh == kw and padding == 0 and oh * kh == xshape[1] and ow * kw == xshape[2]:
                # non-overlapping patches: col2im is a pure transpose
                return dcols.transpose(0, 1, 3, 2, 4, 5).reshape(xshape), gw, gb
            Hp, Wp = xshape[1] + 2 * padding, xshape[2] + 2 * padding
            gx = np.zeros((xshape[0], Hp, Wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                gx = gx[:, padding:-padding, padding:-padding, :]
            return gx, gw, gb

        return bwd

    return _emit("conv2d", out, (x, W, B) if B is not None else (x, W), mk)


def mean_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling on [B,H,W,C]."""
    Bn, H, W, C = x.shape
    if H % k or W % k:
        raise DimensionError(f"mean_pool2d: spatial {H}x{W} not divisible by {k}")
    out = x.data.reshape(Bn, H // k, k, W // k, k, C).mean(axis=(2, 4))

    def mk():
        def bwd(g):
            gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
            return (gx,)

        return bwd

    return _emit("mean_pool2d", out, (x,), mk)


# ---------------------------------------------------------------------------
# Shape movement
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    xsh = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda: lambda g: (g.reshape(xsh),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    # view, not copy; downstream matmul/reshape handle strided inputs
    return _emit("swapaxes", np.swapaxes(x.data, a, b), (x,), lambda: lambda g: (np.swapaxes(g, a, b),))


def concat(parts, axis: int = -1) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def mk():
        def bwd(g):
            return tuple(np.ascontiguousarray(s) for s in np.split(g, np.cumsum(sizes)[:-1], axis=axis))

        return bwd

    return _emit("concat", out, tuple(parts), mk)


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    xsh = x.shape

    def mk():
        def bwd(g):
            gx = np.zeros(xsh, dtype=g.dtype)
            gx[idx] = g
            return (gx,)

        return bwd

    return _emit("take", out, (x,), mk)


# ---------------------------------------------------------------------------
# Random draws (constants w.r.t. differentiation)
# ---------------------------------------------------------------------------


def gaussian(stream, shape, dtype: str = "f32") -> Tensor:
    """I.i.d. standard normal tensor; advances the stream deterministically."""
    return Tensor(stream.normal(shape, dtype=DTYPES[dtype]))
