"""Building blocks: norms, residual scaling, MLPs, rotary attention.

Parameters are plain dataclasses of :class:`~vit5.tensor.Tensor`; the forward
functions are pure. Shapes follow ``[..., tokens, dim]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import Rng
from .rope import RopeTables, TokenLayout
from .tensor import NumericError, ShapeError, Tensor


def _tensors(obj) -> list[Tensor]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, Tensor):
            out.append(v)
        elif hasattr(v, "tensors"):
            out.extend(v.tensors())
    return out


# ---------------------------------------------------------------- norms

@dataclass
class RmsNormParams:
    gain: Tensor
    eps: float = 1e-6

    def tensors(self):
        return [self.gain]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-6

    def tensors(self):
        return [self.gain, self.bias]


def _check_last(op: str, x: Tensor, v: Tensor) -> None:
    if x.shape[-1] != v.shape[-1]:
        raise ShapeError(op, x.shape, v.shape, detail="feature extents differ")


def rmsnorm(x: Tensor, p: RmsNormParams) -> Tensor:
    _check_last("rmsnorm", x, p.gain)
    return T.mul(T.rms_normalize(x, p.eps), p.gain)


def layernorm(x: Tensor, p: LayerNormParams) -> Tensor:
    _check_last("layernorm", x, p.gain)
    return T.add(T.mul(T.layer_normalize(x, p.eps), p.gain), p.bias)


def norm(x: Tensor, p) -> Tensor:
    return layernorm(x, p) if isinstance(p, LayerNormParams) else rmsnorm(x, p)


# ---------------------------------------------------------------- residual scaling

@dataclass
class LayerScaleParams:
    lam: Tensor

    def tensors(self):
        return [self.lam]


@dataclass
class PostNormParams:
    lambda_p: Tensor
    eps: float = 1e-6

    def tensors(self):
        return [self.lambda_p]


def layerscale_residual(x: Tensor, block_out: Tensor, p: LayerScaleParams) -> Tensor:
    """``x + block_out * lambda`` with lambda broadcast over tokens."""
    if x.shape != block_out.shape:
        raise ShapeError("layerscale_residual", x.shape, block_out.shape)
    return T.add(x, T.mul(block_out, p.lam))


def postnorm_residual(x: Tensor, block_out: Tensor, p: PostNormParams) -> Tensor:
    """``rmsnorm(x + block_out) * lambda_p``."""
    if x.shape != block_out.shape:
        raise ShapeError("postnorm_residual", x.shape, block_out.shape)
    return T.mul(T.rms_normalize(T.add(x, block_out), p.eps), p.lambda_p)


# ---------------------------------------------------------------- MLP

def swiglu_hidden_dim(dim: int, ratio: float = 4.0, multiple: int = 8) -> int:
    """Gated hidden width parameter-matched to a ``ratio * dim`` GeLU MLP."""
    h = int(math.floor(2 * ratio * dim / 3))
    return max(multiple, int(round(h / multiple)) * multiple)


@dataclass
class MlpParams:
    variant: str
    w_in: Tensor
    w_out: Tensor
    w_gate: Optional[Tensor] = None
    b_in: Optional[Tensor] = None
    b_out: Optional[Tensor] = None

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[1]

    def tensors(self):
        return _tensors(self)


def init_mlp(rng: Rng, dim: int, variant: str, std: float = 0.02, hidden_dim: int | None = None,
             ratio: float = 4.0) -> MlpParams:
    if variant == "gelu":
        h = hidden_dim or int(ratio * dim)
        return MlpParams("gelu", T.parameter(rng.split("w_in").trunc_normal((dim, h), std)),
                         T.parameter(rng.split("w_out").trunc_normal((h, dim), std)),
                         b_in=T.parameter(np.zeros(h)), b_out=T.parameter(np.zeros(dim)))
    if variant == "swiglu":
        h = hidden_dim or swiglu_hidden_dim(dim, ratio)
        return MlpParams("swiglu", T.parameter(rng.split("w_in").trunc_normal((dim, h), std)),
                         T.parameter(rng.split("w_out").trunc_normal((h, dim), std)),
                         w_gate=T.parameter(rng.split("w_gate").trunc_normal((dim, h), std)))
    raise ValueError(f"unknown MLP variant {variant!r}")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    if x.shape[-1] != p.w_in.shape[0]:
        raise ShapeError("mlp_forward", x.shape, p.w_in.shape)
    if p.variant == "gelu":
        return linear(T.gelu(linear(x, p.w_in, p.b_in)), p.w_out, p.b_out)
    gate = T.silu(T.matmul(x, p.w_gate))
    return T.matmul(T.mul(gate, T.matmul(x, p.w_in)), p.w_out)


def gating_sparsity(block_outputs, threshold: float = 1e-3) -> float:
    """Fraction of activations with ``|a| < threshold * RMS(a)``."""
    a = block_outputs.data if isinstance(block_outputs, Tensor) else np.asarray(block_outputs)
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return 0.0
    rms = math.sqrt(float(np.mean(a * a)))
    if rms == 0.0:
        return 1.0
    return float(np.mean(np.abs(a) < threshold * rms))


# ---------------------------------------------------------------- rotary

def apply_rope_2d(x: Tensor, layout: TokenLayout, tables: RopeTables) -> Tensor:
    """Rotate ``x[..., tokens, heads, d_head]`` by each token's 2D position."""
    if x.ndim < 3:
        raise ShapeError("apply_rope_2d", x.shape, detail="expected [..., tokens, heads, d_head]")
    if x.shape[-1] != tables.d_head:
        raise ShapeError("apply_rope_2d", x.shape, detail=f"d_head {tables.d_head} expected")
    if x.shape[-3] != layout.num_tokens:
        raise ShapeError("apply_rope_2d", x.shape, detail=f"{layout.num_tokens} tokens in layout")
    cos, sin = tables.cos_sin(layout)
    return T.rotate_pairs(x, cos[:, None, :], sin[:, None, :])


# ---------------------------------------------------------------- attention

@dataclass
class AttentionParams:
    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    q_norm: Optional[RmsNormParams] = None  # gains [heads, d_head]
    k_norm: Optional[RmsNormParams] = None

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.dim // self.heads

    def tensors(self):
        return _tensors(self)


def init_attention(rng: Rng, dim: int, heads: int, qk_norm: bool, qkv_bias: bool,
                   std: float = 0.02) -> AttentionParams:
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    dh = dim // heads

    def w(name):
        return T.parameter(rng.split(name).trunc_normal((dim, dim), std))

    p = AttentionParams(heads, w("w_q"), w("w_k"), w("w_v"), w("w_o"), T.parameter(np.zeros(dim)))
    if qkv_bias:
        p.b_q, p.b_k, p.b_v = (T.parameter(np.zeros(dim)) for _ in range(3))
    if qk_norm:
        p.q_norm = RmsNormParams(T.parameter(np.ones((heads, dh))))
        p.k_norm = RmsNormParams(T.parameter(np.ones((heads, dh))))
    return p


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return T.reshape(x, (*lead, t, heads, d // heads))


def attention_logits(x: Tensor, p: AttentionParams, tables: RopeTables | None,
                     layout: TokenLayout | None) -> tuple[Tensor, Tensor]:
    """Pre-softmax logits ``[..., heads, T, T]`` and values ``[..., heads, T, d_head]``."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError("attention", x.shape, detail="need at least one token")
    q = _split_heads(linear(x, p.w_q, p.b_q), p.heads)
    k = _split_heads(linear(x, p.w_k, p.b_k), p.heads)
    v = _split_heads(linear(x, p.w_v, p.b_v), p.heads)
    if p.q_norm is not None:
        q = rmsnorm(q, p.q_norm)
        k = rmsnorm(k, p.k_norm)
    if tables is not None:
        q = apply_rope_2d(q, layout, tables)
        k = apply_rope_2d(k, layout, tables)
    nd = q.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)  # [.., T, H, dh] -> [.., H, T, dh]
    q, k, v = T.transpose(q, perm), T.transpose(k, perm), T.transpose(v, perm)
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = T.scale(T.matmul(q, kt), 1.0 / math.sqrt(p.d_head))
    return logits, v


def qk_normalized_attention(x: Tensor, p: AttentionParams, tables: RopeTables | None,
                            layout: TokenLayout | None, layer: int | None = None,
                            capture: dict | None = None) -> Tensor:
    """Multi-head attention with optional QK-RMSNorm and 2D RoPE on Q and K.

    With ``capture`` given, stores ``"logits"`` and ``"weights"`` arrays in it.
    """
    logits, v = attention_logits(x, p, tables, layout)
    if not np.isfinite(logits.data).all():
        raise NumericError("attention logits", layer=layer)
    w = T.softmax_lastdim(logits)
    if capture is not None:
        capture["logits"] = logits.data
        capture["weights"] = w.data
    out = T.matmul(w, v)  # [.., H, T, dh]
    nd = out.ndim
    out = T.transpose(out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, t, h, dh = out.shape
    out = T.reshape(out, (*lead, t, h * dh))
    return linear(out, p.w_o, p.b_o)
