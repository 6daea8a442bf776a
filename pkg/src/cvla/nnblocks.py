"""Neural building blocks: linear layers, multi-head cross attention, the
dual-attention block with zero-initialized KV projections for object tokens,
sinusoidal coordinate encodings, small conv encoders, and transformer blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import (
    DTYPES,
    RngStream,
    Tensor,
    add,
    conv2d,
    gelu,
    layernorm,
    linear,
    matmul,
    mean_pool2d,
    mul,
    reshape,
    softmax,
    swapaxes,
    take,
    tensor,
    tmean,
)


def _param(stream: RngStream, label: str, shape, scale: float, dtype: str) -> Tensor:
    """Uniform(-scale, scale) parameter drawn from a label-derived stream.

    Per-parameter streams make initialization independent of construction
    order, so grafting and checkpoint reconstruction stay bit-reproducible.
    """
    u = stream.derive(label).uniform(shape)
    return tensor(((2.0 * u - 1.0) * scale).astype(DTYPES[dtype]), dtype, requires_grad=True)


def _zeros_param(shape, dtype: str) -> Tensor:
    return tensor(np.zeros(shape, dtype=DTYPES[dtype]), dtype, requires_grad=True)


# ---------------------------------------------------------------------------
# Linear layers
# ---------------------------------------------------------------------------


@dataclass
class LinearLayer:
    W: Tensor  # [out, in]
    B: Tensor  # [out]
    init_scheme: str = "fanin_uniform"

    @classmethod
    def create(cls, stream: RngStream, label: str, out_dim: int, in_dim: int, dtype: str = "f32"):
        scale = 1.0 / np.sqrt(in_dim)
        return cls(
            W=_param(stream, label + ".W", (out_dim, in_dim), scale, dtype),
            B=_param(stream, label + ".B", (out_dim,), scale, dtype),
        )

    @classmethod
    def zero(cls, out_dim: int, in_dim: int, dtype: str = "f32"):
        return cls(W=_zeros_param((out_dim, in_dim), dtype), B=_zeros_param((out_dim,), dtype), init_scheme="zeros")

    def apply(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.B)

    def named_params(self, prefix: str) -> dict:
        return {prefix + ".W": self.W, prefix + ".B": self.B}


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, width: int, dtype: str = "f32"):
        return cls(
            gain=tensor(np.ones(width, dtype=DTYPES[dtype]), dtype, requires_grad=True),
            bias=_zeros_param((width,), dtype),
        )

    def apply(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)

    def named_params(self, prefix: str) -> dict:
        return {prefix + ".g": self.gain, prefix + ".b": self.bias}


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, w] -> [..., heads, T, w/heads]."""
    *lead, T, w = x.shape
    return swapaxes(reshape(x, (*lead, T, heads, w // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, T, d = x.shape
    return reshape(swapaxes(x, -3, -2), (*lead, T, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(QK^T / sqrt(d)) V per head, heads re-concatenated."""
    d = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / np.sqrt(d))
    return _merge_heads(matmul(softmax(scores), vh))


class CrossAttentionBlock:
    """Queries from the action stream, keys/values from a context stream."""

    def __init__(self, q_proj: LinearLayer, kv_proj: LinearLayer, out_proj: LinearLayer, heads: int):
        width = q_proj.W.shape[0]
        if width % heads:
            raise DimensionError(f"width {width} not divisible by {heads} heads")
        self.q_proj = q_proj
        self.kv_proj = kv_proj  # produces K and V halves, [2w, w]
        self.out_proj = out_proj
        self.heads = heads
        self.d = width // heads
        self.width = width

    @classmethod
    def create(cls, stream: RngStream, label: str, width: int, heads: int, dtype: str = "f32"):
        return cls(
            q_proj=LinearLayer.create(stream, label + ".q", width, width, dtype),
            kv_proj=LinearLayer.create(stream, label + ".kv", 2 * width, width, dtype),
            out_proj=LinearLayer.create(stream, label + ".out", width, width, dtype),
            heads=heads,
        )

    def named_params(self, prefix: str) -> dict:
        out = {}
        out.update(self.q_proj.named_params(prefix + ".q"))
        out.update(self.kv_proj.named_params(prefix + ".kv"))
        out.update(self.out_proj.named_params(prefix + ".out"))
        return out


class DualCrossAttentionBlock:
    """A CrossAttentionBlock plus a zero-initialized KV projection for object
    tokens; the two attention terms share Q and are summed before out_proj."""

    def __init__(self, base: CrossAttentionBlock, z_kv_proj: LinearLayer):
        if z_kv_proj.W.shape[0] != base.kv_proj.W.shape[0]:
            raise DimensionError(
                f"z kv width {z_kv_proj.W.shape[0]} != base kv width {base.kv_proj.W.shape[0]}"
            )
        self.base = base
        self.z_kv_proj = z_kv_proj
        self.heads = base.heads
        self.width = base.width

    def named_params(self, prefix: str) -> dict:
        out = self.base.named_params(prefix)
        out.update(self.z_kv_proj.named_params(prefix + ".z_kv"))
        return out


def cross_attend(block: CrossAttentionBlock, A: Tensor, O: Tensor) -> Tensor:
    """Attention of action tokens A [..., t_a, w] over context tokens O [..., t_o, w]."""
    if A.shape[-1] != block.width or O.shape[-1] != block.width:
        raise DimensionError(f"token width {A.shape[-1]}/{O.shape[-1]} != block width {block.width}")
    q = block.q_proj.apply(A)
    kv = block.kv_proj.apply(O)
    k = take(kv, -1, 0, block.width)
    v = take(kv, -1, block.width, 2 * block.width)
    return block.out_proj.apply(_attend(q, k, v, block.heads))


def dual_attend(block: DualCrossAttentionBlock, A: Tensor, O: Tensor, Z: Tensor) -> Tensor:
    """Sum of base attention over O and zero-init-branch attention over Z.

    The object branch reuses the base Q and its own softmax; with W_z = B_z = 0
    the branch's values are identically zero, so the output equals
    cross_attend(base, A, O) exactly.
    """
    if Z.shape[-1] != block.width:
        raise DimensionError(f"object token width {Z.shape[-1]} != block width {block.width}")
    base = block.base
    if A.shape[-1] != base.width or O.shape[-1] != base.width:
        raise DimensionError(f"token width {A.shape[-1]}/{O.shape[-1]} != block width {base.width}")
    q = base.q_proj.apply(A)
    kv = base.kv_proj.apply(O)
    k = take(kv, -1, 0, base.width)
    v = take(kv, -1, base.width, 2 * base.width)
    kvz = block.z_kv_proj.apply(Z)
    kz = take(kvz, -1, 0, base.width)
    vz = take(kvz, -1, base.width, 2 * base.width)
    summed = add(_attend(q, k, v, base.heads), _attend(q, kz, vz, base.heads))
    return base.out_proj.apply(summed)


def graft_zero_branch(base: CrossAttentionBlock, dtype: str | None = None) -> DualCrossAttentionBlock:
    """Extend a trained block with a fresh all-zero object-token projection.

    The returned block shares the base's parameter storage; only z_kv is new.
    """
    dtype = dtype or base.q_proj.W.dtype
    return DualCrossAttentionBlock(base, LinearLayer.zero(2 * base.width, base.width, dtype))


class SelfAttentionBlock:
    """Multi-head attention of a token sequence over itself (fused QKV)."""

    def __init__(self, qkv_proj: LinearLayer, out_proj: LinearLayer, heads: int):
        self.qkv_proj = qkv_proj  # [3w, w]
        self.out_proj = out_proj
        self.heads = heads
        self.width = out_proj.W.shape[0]

    @classmethod
    def create(cls, stream: RngStream, label: str, width: int, heads: int, dtype: str = "f32"):
        return cls(
            qkv_proj=LinearLayer.create(stream, label + ".qkv", 3 * width, width, dtype),
            out_proj=LinearLayer.create(stream, label + ".out", width, width, dtype),
            heads=heads,
        )

    def apply(self, X: Tensor) -> Tensor:
        w = self.width
        qkv = self.qkv_proj.apply(X)
        q = take(qkv, -1, 0, w)
        k = take(qkv, -1, w, 2 * w)
        v = take(qkv, -1, 2 * w, 3 * w)
        return self.out_proj.apply(_attend(q, k, v, self.heads))

    def named_params(self, prefix: str) -> dict:
        out = {}
        out.update(self.qkv_proj.named_params(prefix + ".qkv"))
        out.update(self.out_proj.named_params(prefix + ".out"))
        return out


class FeedForward:
    def __init__(self, fc0: LinearLayer, fc1: LinearLayer):
        self.fc0 = fc0
        self.fc1 = fc1

    @classmethod
    def create(cls, stream: RngStream, label: str, width: int, hidden: int, dtype: str = "f32"):
        return cls(
            fc0=LinearLayer.create(stream, label + ".fc0", hidden, width, dtype),
            fc1=LinearLayer.create(stream, label + ".fc1", width, hidden, dtype),
        )

    def apply(self, x: Tensor) -> Tensor:
        return self.fc1.apply(gelu(self.fc0.apply(x)))

    def named_params(self, prefix: str) -> dict:
        out = self.fc0.named_params(prefix + ".fc0")
        out.update(self.fc1.named_params(prefix + ".fc1"))
        return out


class TransformerBlock:
    """Pre-norm block: self-attention over action tokens, cross-attention over
    context tokens (dual when grafted), then a feed-forward."""

    def __init__(self, ln1, self_attn, ln2, cross, ln3, mlp):
        self.ln1 = ln1
        self.self_attn = self_attn
        self.ln2 = ln2
        self.cross = cross  # CrossAttentionBlock or DualCrossAttentionBlock
        self.ln3 = ln3
        self.mlp = mlp

    @classmethod
    def create(cls, stream: RngStream, label: str, width: int, heads: int, mlp_ratio: int, dtype: str = "f32"):
        return cls(
            ln1=LayerNorm.create(width, dtype),
            self_attn=SelfAttentionBlock.create(stream, label + ".self", width, heads, dtype),
            ln2=LayerNorm.create(width, dtype),
            cross=CrossAttentionBlock.create(stream, label + ".cross", width, heads, dtype),
            ln3=LayerNorm.create(width, dtype),
            mlp=FeedForward.create(stream, label + ".mlp", width, width * mlp_ratio, dtype),
        )

    def apply(self, x: Tensor, ctx: Tensor, z: Tensor | None = None) -> Tensor:
        x = add(x, self.self_attn.apply(self.ln1.apply(x)))
        if isinstance(self.cross, DualCrossAttentionBlock):
            x = add(x, dual_attend(self.cross, self.ln2.apply(x), ctx, z))
        else:
            x = add(x, cross_attend(self.cross, self.ln2.apply(x), ctx))
        return add(x, self.mlp.apply(self.ln3.apply(x)))

    def named_params(self, prefix: str) -> dict:
        out = {}
        out.update(self.ln1.named_params(prefix + ".ln1"))
        out.update(self.self_attn.named_params(prefix + ".self"))
        out.update(self.ln2.named_params(prefix + ".ln2"))
        out.update(self.cross.named_params(prefix + ".cross"))
        out.update(self.ln3.named_params(prefix + ".ln3"))
        out.update(self.mlp.named_params(prefix + ".mlp"))
        return out


# ---------------------------------------------------------------------------
# Sinusoidal coordinate encoding
# ---------------------------------------------------------------------------


@dataclass
class SinusoidalEncoder:
    """Maps scalars in [0, 1] to interleaved (sin, cos) pairs at geometric
    frequencies; output length is dims_per_scalar per input coordinate."""

    dims_per_scalar: int = 32
    base: float = 10000.0

    def encode(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        D = self.dims_per_scalar
        j = np.arange(D // 2, dtype=np.float64)
        freq = self.base ** (-2.0 * j / D)
        ang = coords[:, None] * freq[None, :]
        out = np.empty((coords.size, D), dtype=np.float64)
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out.reshape(-1)


def sinus_encode(enc: SinusoidalEncoder, coords, dtype: str = "f32") -> Tensor:
    """Encoded coordinates as a constant tensor (no gradient path)."""
    return tensor(enc.encode(coords).astype(DTYPES[dtype]), dtype)


def step_embedding(k, dims: int, base: float = 10000.0, dtype: str = "f32") -> Tensor:
    """Index-based sinusoidal embedding for integer diffusion steps.

    Unlike SinusoidalEncoder (unit-interval coordinates), steps are encoded at
    their raw index so the fastest component oscillates across the schedule.
    Accepts a scalar or a vector of steps; returns [dims] or [n, dims].
    """
    ks = np.atleast_1d(np.asarray(k, dtype=np.float64))
    j = np.arange(dims // 2, dtype=np.float64)
    freq = base ** (-2.0 * j / dims)
    ang = ks[:, None] * freq[None, :]
    out = np.empty((ks.size, dims), dtype=DTYPES[dtype])
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return tensor(out[0] if np.isscalar(k) or np.asarray(k).ndim == 0 else out, dtype)


# ---------------------------------------------------------------------------
# Convolutional encoders
# ---------------------------------------------------------------------------


class ConvEncoder:
    """Fixed conv2d/GELU/pool stack over an RGB patch.

    Two output modes: a grid of patch tokens (for the policy's image encoder)
    or a single pooled feature vector (for per-object geometric features).
    """

    def __init__(self, layers, head: LinearLayer, tokens: bool, input_hw: int):
        self.layers = layers  # ("conv", W, B, stride, pad) or ("pool", k)
        self.head = head
        self.tokens = tokens
        self.input_hw = input_hw
        self.out_dim = head.W.shape[0]

    @classmethod
    def image_tokens(cls, stream: RngStream, label: str, width: int, dtype: str = "f32"):
        """64x64x3 -> 16 patch tokens of `width` channels.

        The 3x3 mixing conv runs on the pooled 4x4 grid to keep batched
        encoding cheap; attention does the long-range mixing anyway.
        """
        layers = [
            _conv_param(stream, label + ".conv0", 8, 3, 48, 8, 0, dtype),
            ("pool", 2),
            _conv_param(stream, label + ".conv1", 3, 48, 48, 1, 1, dtype),
        ]
        head = LinearLayer.create(stream, label + ".head", width, 48, dtype)
        return cls(layers, head, tokens=True, input_hw=64)

    @classmethod
    def geo_vector(cls, stream: RngStream, label: str, out_dim: int, dtype: str = "f32"):
        """32x32x3 masked crop -> feature vector of length out_dim."""
        layers = [
            _conv_param(stream, label + ".conv0", 4, 3, 32, 4, 0, dtype),
            _conv_param(stream, label + ".conv1", 3, 32, 48, 2, 1, dtype),
            ("pool", 4),
        ]
        head = LinearLayer.create(stream, label + ".head", out_dim, 48, dtype)
        return cls(layers, head, tokens=False, input_hw=32)

    def apply(self, x: Tensor) -> Tensor:
        """x: [B, H, W, 3] in [0, 1]. Returns [B, n_tokens, out] or [B, out]."""
        h = x
        for layer in self.layers:
            if layer[0] == "pool":
                h = mean_pool2d(h, layer[1])
            else:
                _, W, B, stride, pad = layer
                h = gelu(conv2d(h, W, B, stride=stride, padding=pad))
        Bn, gh, gw, c = h.shape
        if self.tokens:
            return self.head.apply(reshape(h, (Bn, gh * gw, c)))
        feat = reshape(h, (Bn, c)) if gh * gw == 1 else tmean(reshape(h, (Bn, gh * gw, c)), axis=1)
        return self.head.apply(feat)

    def named_params(self, prefix: str) -> dict:
        out = {}
        i = 0
        for layer in self.layers:
            if layer[0] == "conv":
                out[f"{prefix}.conv{i}.W"] = layer[1]
                out[f"{prefix}.conv{i}.B"] = layer[2]
                i += 1
        out.update(self.head.named_params(prefix + ".head"))
        return out


def _conv_param(stream, label, k, cin, cout, stride, pad, dtype):
    scale = 1.0 / np.sqrt(k * k * cin)
    W = _param(stream, label + ".W", (k, k, cin, cout), scale, dtype)
    B = _param(stream, label + ".B", (cout,), scale, dtype)
    return ("conv", W, B, stride, pad)
