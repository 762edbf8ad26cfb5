"""ViT-5 assembly: patchify, APE, registers, class token, blocks, head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .rng import Rng
from .rope import RopeTables, TokenLayout
from .tensor import NumericError, ShapeError, Tensor


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # trunc | zeros | ones | lambda | postnorm


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every named tensor of the model, in build order."""
    d, h, dh = cfg.dim, cfg.heads, cfg.d_head
    gx, gy = cfg.grid
    specs = [ParamSpec("patch_embed.weight", (cfg.patch * cfg.patch * cfg.in_chans, d), "trunc"),
             ParamSpec("patch_embed.bias", (d,), "zeros")]
    if cfg.ape == "on":
        specs.append(ParamSpec("ape", (gx * gy, d), "trunc"))
    if cfg.registers:
        specs.append(ParamSpec("registers", (cfg.registers, d), "trunc"))
    if cfg.has_class_token:
        specs.append(ParamSpec("cls_token", (1, d), "trunc"))

    def norm(prefix):
        out = [ParamSpec(f"{prefix}.weight", (d,), "ones")]
        if cfg.norm == "layernorm":
            out.append(ParamSpec(f"{prefix}.bias", (d,), "zeros"))
        return out

    def scale(prefix):
        if cfg.layerscale == "on":
            return [ParamSpec(f"{prefix}.lambda", (d,), "lambda")]
        if cfg.layerscale == "postnorm":
            return [ParamSpec(f"{prefix}.postnorm_gain", (d,), "postnorm")]
        return []

    for i in range(cfg.layers):
        b = f"blocks.{i}"
        specs += norm(f"{b}.norm1")
        for w in ("q", "k", "v"):
            specs.append(ParamSpec(f"{b}.attn.{w}.weight", (d, d), "trunc"))
            if cfg.qkv_bias == "on":
                specs.append(ParamSpec(f"{b}.attn.{w}.bias", (d,), "zeros"))
        if cfg.qk_norm == "on":
            specs.append(ParamSpec(f"{b}.attn.q_norm.weight", (h, dh), "ones"))
            specs.append(ParamSpec(f"{b}.attn.k_norm.weight", (h, dh), "ones"))
        specs.append(ParamSpec(f"{b}.attn.proj.weight", (d, d), "trunc"))
        specs.append(ParamSpec(f"{b}.attn.proj.bias", (d,), "zeros"))
        specs += scale(f"{b}.scale1")
        specs += norm(f"{b}.norm2")
        if cfg.mlp == "gelu":
            hid = int(cfg.mlp_ratio * d)
            specs += [ParamSpec(f"{b}.mlp.fc1.weight", (d, hid), "trunc"),
                      ParamSpec(f"{b}.mlp.fc1.bias", (hid,), "zeros"),
                      ParamSpec(f"{b}.mlp.fc2.weight", (hid, d), "trunc"),
                      ParamSpec(f"{b}.mlp.fc2.bias", (d,), "zeros")]
        else:
            hid = nn.swiglu_hidden_dim(d, cfg.mlp_ratio)
            specs += [ParamSpec(f"{b}.mlp.w_in", (d, hid), "trunc"),
                      ParamSpec(f"{b}.mlp.w_gate", (d, hid), "trunc"),
                      ParamSpec(f"{b}.mlp.w_out", (hid, d), "trunc")]
        specs += scale(f"{b}.scale2")
    specs += norm("norm")
    specs += [ParamSpec("head.weight", (d, cfg.num_classes), "zeros"),
              ParamSpec("head.bias", (cfg.num_classes,), "zeros")]
    return specs


@dataclass
class Block:
    norm1: Union[nn.RmsNormParams, nn.LayerNormParams]
    attn: nn.AttentionParams
    scale1: Union[nn.LayerScaleParams, nn.PostNormParams, None]
    norm2: Union[nn.RmsNormParams, nn.LayerNormParams]
    mlp: nn.MlpParams
    scale2: Union[nn.LayerScaleParams, nn.PostNormParams, None]


class Vit5Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], seed: Optional[int] = None):
        self.config = config
        self.params = params
        self.seed = seed
        self.blocks = [self._block(i) for i in range(config.layers)]
        self.final_norm = self._norm("norm")
        self._layouts: dict[tuple[int, int], TokenLayout] = {}
        self.tables: RopeTables | None = None
        if config.rope == "on":
            pb, rb = config.rope_bases
            reg = rb if config.registers_rope == "high_base" else pb
            self.tables = RopeTables(config.d_head, patch_base=pb, reg_base=reg)

    def __repr__(self) -> str:
        return f"Vit5Model(layers={self.config.layers}, dim={self.config.dim}, params={self.num_parameters()})"

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def _norm(self, prefix):
        eps = self.config.norm_eps
        if self.config.norm == "layernorm":
            return nn.LayerNormParams(self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"], eps)
        return nn.RmsNormParams(self.params[f"{prefix}.weight"], eps)

    def _scale(self, prefix):
        if self.config.layerscale == "on":
            return nn.LayerScaleParams(self.params[f"{prefix}.lambda"])
        if self.config.layerscale == "postnorm":
            return nn.PostNormParams(self.params[f"{prefix}.postnorm_gain"], self.config.norm_eps)
        return None

    def _block(self, i: int) -> Block:
        p, b, cfg = self.params, f"blocks.{i}", self.config
        attn = nn.AttentionParams(
            cfg.heads, p[f"{b}.attn.q.weight"], p[f"{b}.attn.k.weight"], p[f"{b}.attn.v.weight"],
            p[f"{b}.attn.proj.weight"], p[f"{b}.attn.proj.bias"],
            p.get(f"{b}.attn.q.bias"), p.get(f"{b}.attn.k.bias"), p.get(f"{b}.attn.v.bias"))
        if cfg.qk_norm == "on":
            attn.q_norm = nn.RmsNormParams(p[f"{b}.attn.q_norm.weight"], cfg.norm_eps)
            attn.k_norm = nn.RmsNormParams(p[f"{b}.attn.k_norm.weight"], cfg.norm_eps)
        if cfg.mlp == "gelu":
            mlp = nn.MlpParams("gelu", p[f"{b}.mlp.fc1.weight"], p[f"{b}.mlp.fc2.weight"],
                               b_in=p[f"{b}.mlp.fc1.bias"], b_out=p[f"{b}.mlp.fc2.bias"])
        else:
            mlp = nn.MlpParams("swiglu", p[f"{b}.mlp.w_in"], p[f"{b}.mlp.w_out"], w_gate=p[f"{b}.mlp.w_gate"])
        return Block(self._norm(f"{b}.norm1"), attn, self._scale(f"{b}.scale1"),
                     self._norm(f"{b}.norm2"), mlp, self._scale(f"{b}.scale2"))

    def layout(self, grid: tuple[int, int]) -> TokenLayout:
        if grid not in self._layouts:
            cfg = self.config
            kind = TokenLayout.NONE if cfg.registers_rope == "none" else TokenLayout.REGISTER
            cls_kind = kind if cfg.class_token_rope else TokenLayout.NONE
            self._layouts[grid] = TokenLayout.for_sequence(grid, cfg.registers, cfg.has_class_token,
                                                           prefix_kind=kind, class_kind=cls_kind)
        return self._layouts[grid]

    @property
    def num_prefix(self) -> int:
        return self.config.registers + int(self.config.has_class_token)


def build(config: ModelConfig, rng: Rng | int) -> Vit5Model:
    """Materialize parameters; each tensor draws from its own named stream."""
    if isinstance(rng, int):
        rng = Rng(rng)
    params = {}
    for spec in param_specs(config):
        if spec.init == "trunc":
            data = rng.split(spec.name).trunc_normal(spec.shape, config.init_std)
        elif spec.init == "zeros":
            data = np.zeros(spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        elif spec.init == "postnorm":
            data = np.full(spec.shape, config.postnorm_init)
        else:
            data = np.full(spec.shape, config.lambda_init)
        params[spec.name] = T.parameter(data)
    return Vit5Model(config, params, seed=rng.seed)


# ---------------------------------------------------------------- forward

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, (H/p)*(W/p), p*p*C]``, patches row-major."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ShapeError("patchify", images.shape, detail=f"H and W must be divisible by patch {patch}")
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1 - f
        m[i, i1] += f
    return m


def ape_resize_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling matrix for a row-major ``src`` grid onto ``dst``."""
    return np.kron(_interp_matrix(src[0], dst[0]), _interp_matrix(src[1], dst[1]))


def _residual(x: Tensor, out: Tensor, s) -> Tensor:
    if s is None:
        return T.add(x, out)
    if isinstance(s, nn.PostNormParams):
        return nn.postnorm_residual(x, out, s)
    return nn.layerscale_residual(x, out, s)


def embed(model: Vit5Model, images) -> tuple[Tensor, tuple[int, int]]:
    """Token sequence ``[B, T, d]`` = ``[class?] ++ registers ++ patches``."""
    cfg = model.config
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    if imgs.ndim != 4 or imgs.shape[1] != cfg.in_chans:
        raise ShapeError("forward", imgs.shape, detail=f"expected [B, {cfg.in_chans}, H, W]")
    b, _, h, w = imgs.shape
    grid = (h // cfg.patch, w // cfg.patch)
    p = model.params
    x = nn.linear(Tensor(patchify(imgs, cfg.patch)), p["patch_embed.weight"], p["patch_embed.bias"])
    if cfg.ape == "on":
        ape = p["ape"]
        if grid != cfg.grid:
            ape = T.matmul(Tensor(ape_resize_matrix(cfg.grid, grid)), ape)
        x = T.add(x, ape)
    prefix = []
    zeros = None
    if cfg.has_class_token or cfg.registers:
        zeros = Tensor(np.zeros((b, 1, cfg.dim)))
    if cfg.has_class_token:
        prefix.append(T.add(zeros, p["cls_token"]))
    if cfg.registers:
        regs = Tensor(np.zeros((b, cfg.registers, cfg.dim)))
        prefix.append(T.add(regs, p["registers"]))
    if prefix:
        x = T.concat_tokens(prefix + [x])
    return x, grid


def forward(model: Vit5Model, images, capture: dict | None = None,
            capture_layers: set[int] | None = None) -> Tensor:
    """Class logits ``[B, num_classes]``.

    With ``capture`` given, attention weights of each layer (or only those in
    ``capture_layers``) are stored under ``capture[layer]``.
    """
    cfg = model.config
    x, grid = embed(model, images)
    layout = model.layout(grid)
    for i, blk in enumerate(model.blocks):
        cap = None
        if capture is not None and (capture_layers is None or i in capture_layers):
            cap = capture.setdefault(i, {})
        a = nn.qk_normalized_attention(nn.norm(x, blk.norm1), blk.attn, model.tables, layout, layer=i, capture=cap)
        x = _residual(x, a, blk.scale1)
        m = nn.mlp_forward(nn.norm(x, blk.norm2), blk.mlp)
        if cap is not None:
            cap["mlp_out"] = m.data
        x = _residual(x, m, blk.scale2)
        if not np.isfinite(x.data).all():
            raise NumericError("activation", layer=i)
    x = nn.norm(x, model.final_norm)
    if cfg.has_class_token:
        pooled = T.reshape(T.slice_tokens(x, 0, 1), (x.shape[0], cfg.dim))
    else:
        pooled = T.mean(T.slice_tokens(x, model.num_prefix, x.shape[1]), -2)
    return nn.linear(pooled, model.params["head.weight"], model.params["head.bias"])


def predict(model: Vit5Model, images, batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out.append(forward(model, images[i:i + batch]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def query_index(model: Vit5Model, query, grid: tuple[int, int]) -> int:
    """Token index for ``"class"``, ``"register_<k>"`` or a patch ``(row, col)``/``"patch_<r>_<c>"``."""
    cfg = model.config
    n_cls = int(cfg.has_class_token)
    if isinstance(query, str):
        if query == "class":
            if not cfg.has_class_token:
                raise ValueError("model has no class token (readout=mean_pool)")
            return 0
        if query.startswith("register_"):
            k = int(query.split("_", 1)[1])
            if not 0 <= k < cfg.registers:
                raise ValueError(f"register {k} out of range for {cfg.registers} registers")
            return n_cls + k
        if query.startswith("patch_"):
            _, r, c = query.split("_")
            query = (int(r), int(c))
        else:
            raise ValueError(f"unknown query {query!r}")
    r, c = query
    if not (0 <= r < grid[0] and 0 <= c < grid[1]):
        raise ValueError(f"patch ({r},{c}) outside grid {grid}")
    return model.num_prefix + r * grid[1] + c


def attention_row(model: Vit5Model, image, layer: int, head: int, query) -> tuple[np.ndarray, tuple[int, int]]:
    """Full softmax row (over all tokens) for ``query`` at ``layer``/``head``."""
    cfg = model.config
    if not 0 <= layer < cfg.layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.layers})")
    if not 0 <= head < cfg.heads:
        raise ValueError(f"head {head} out of range [0, {cfg.heads})")
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    cap: dict = {}
    with T.no_grad():
        forward(model, img[:1], capture=cap, capture_layers={layer})
    grid = (img.shape[2] // cfg.patch, img.shape[3] // cfg.patch)
    qi = query_index(model, query, grid)
    return cap[layer]["weights"][0, head, qi].astype(np.float64), grid


def attention_maps(model: Vit5Model, image, layer: int, head: int, query) -> np.ndarray:
    """Attention from ``query`` to patch tokens, shaped onto the patch grid."""
    row, grid = attention_row(model, image, layer, head, query)
    return row[model.num_prefix:].reshape(grid)
