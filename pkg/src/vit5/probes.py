"""Invariance and sensitivity probes for the positional machinery.

Each probe returns :class:`ProbeResult` records with the measured quantity,
the threshold it is held to and a verdict. ``passed`` is ``None`` for probes
that only report.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .config import ModelConfig
from .rng import Rng
from .rope import RopeTables, TokenLayout
from .tensor import Tensor

KINDS = ("translation", "flip", "rope-identity", "qk-bound", "register-coupling")


@dataclass
class ProbeResult:
    name: str
    measured: float
    threshold: Optional[float]
    relation: str  # "<", "<=", ">" or "report"
    passed: Optional[bool]
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        verdict = "REPORT" if self.passed is None else ("PASS" if self.passed else "FAIL")
        thr = "" if self.threshold is None else f" {self.relation} {self.threshold:.3g}"
        return f"{self.name}: {self.measured:.3e}{thr} {verdict}"


def _verdict(name, measured, relation, threshold, **details) -> ProbeResult:
    ok = {"<": measured < threshold, "<=": measured <= threshold, ">": measured > threshold}[relation]
    return ProbeResult(name, float(measured), float(threshold), relation, bool(ok), details)


def _layer0_logits(model: M.Vit5Model, images: np.ndarray) -> np.ndarray:
    cap: dict = {}
    with T.no_grad():
        M.forward(model, images, capture=cap, capture_layers={0})
    return cap[0]["logits"]


# ---------------------------------------------------------------- translation

def _content_indices(model: M.Vit5Model, grid: int, origin: tuple[int, int], size: int) -> np.ndarray:
    ox, oy = origin
    rows = np.arange(oy, oy + size)
    cols = np.arange(ox, ox + size)
    return model.num_prefix + (rows[:, None] * grid + cols[None, :]).ravel()


def translation_delta(cfg: ModelConfig, trials: int = 100, seed: int = 0) -> float:
    """Max change of layer-0 logits among content patches when the content is shifted.

    A random block of half the grid is pasted at one patch offset, then at a
    second offset; the logits between its own patches are compared.
    """
    g = cfg.grid[0]
    size = max(1, g // 2)
    p = cfg.patch
    rng = Rng(seed).split("translation")
    with T.precision("f64"):
        model = M.build(cfg, Rng(seed).split("init"))
        a = np.zeros((trials, cfg.in_chans, cfg.image_size, cfg.image_size))
        b = np.zeros_like(a)
        origins = []
        for n in range(trials):
            r = rng.split(n)
            while True:
                o1 = tuple(int(v) for v in r.integers(0, g - size + 1, size=2))
                o2 = tuple(int(v) for v in r.integers(0, g - size + 1, size=2))
                if o1 != o2:
                    break
            block = r.uniform(size=(cfg.in_chans, size * p, size * p))
            a[n, :, o1[1] * p:(o1[1] + size) * p, o1[0] * p:(o1[0] + size) * p] = block
            b[n, :, o2[1] * p:(o2[1] + size) * p, o2[0] * p:(o2[0] + size) * p] = block
            origins.append((o1, o2))
        la, lb = _layer0_logits(model, a), _layer0_logits(model, b)
        worst = 0.0
        for n, (o1, o2) in enumerate(origins):
            i1 = _content_indices(model, g, o1, size)
            i2 = _content_indices(model, g, o2, size)
            d = np.abs(la[n][:, i1][:, :, i1] - lb[n][:, i2][:, :, i2]).max()
            worst = max(worst, float(d))
    return worst


def probe_translation(cfg: ModelConfig, trials: int = 100, seed: int = 0) -> list[ProbeResult]:
    rope_only = cfg.replace(ape="off")
    with_ape = cfg.replace(ape="on")
    d0 = translation_delta(rope_only, trials, seed)
    d1 = translation_delta(with_ape, trials, seed)
    return [_verdict("translation[rope-only]", d0, "<", 1e-5, trials=trials, rope=cfg.rope),
            _verdict("translation[ape]", d1, ">", 1e-3, trials=trials, rope=cfg.rope)]


# ---------------------------------------------------------------- flip

def flip_delta(cfg: ModelConfig, samples: int = 16, seed: int = 0) -> float:
    """Max |logit(i, j) - logit(f(i), f(j))| at layer 0 under a patch-level mirror."""
    g, p = cfg.grid[0], cfg.patch
    with T.precision("f64"):
        model = M.build(cfg, Rng(seed).split("init"))
        imgs = Rng(seed).split("flip").uniform(size=(samples, cfg.in_chans, cfg.image_size, cfg.image_size))
        tiles = imgs.reshape(samples, cfg.in_chans, g, p, g, p)
        flipped = tiles[:, :, :, :, ::-1, :].reshape(imgs.shape)
        la, lb = _layer0_logits(model, imgs), _layer0_logits(model, np.ascontiguousarray(flipped))
        rows, cols = np.divmod(np.arange(g * g), g)
        src = model.num_prefix + np.arange(g * g)
        dst = model.num_prefix + rows * g + (g - 1 - cols)
        return float(np.abs(la[..., src[:, None], src[None, :]] - lb[..., dst[:, None], dst[None, :]]).max())


def probe_flip(cfg: ModelConfig, seed: int = 0) -> list[ProbeResult]:
    out = []
    for name, variant in (("rope-only", cfg.replace(rope="on", ape="off")),
                          ("ape+rope", cfg.replace(rope="on", ape="on")),
                          ("no-position", cfg.replace(rope="off", ape="off"))):
        out.append(ProbeResult(f"flip[{name}]", flip_delta(variant, seed=seed), None, "report", None))
    return out


# ---------------------------------------------------------------- rope identity

def probe_rope_identity(cfg: ModelConfig, seed: int = 0) -> list[ProbeResult]:
    dh = cfg.d_head
    tables = RopeTables(dh, *cfg.rope_bases)
    layout = TokenLayout(np.zeros((2, 2), dtype=np.int64),
                         np.array([TokenLayout.PATCH, TokenLayout.REGISTER], dtype=np.int64))
    with T.precision("f64"):
        x = Rng(seed).split("rope-identity").normal((2, cfg.heads, dh))
        y = nn.apply_rope_2d(Tensor(x), layout, tables).data
    return [_verdict("rope-identity", float(np.abs(y - x).max()), "<=", 1e-7)]


# ---------------------------------------------------------------- qk bound

def probe_qk_bound(cfg: ModelConfig, sets: int = 1000, seed: int = 0) -> list[ProbeResult]:
    """Unit-gain QK-Norm keeps every pre-softmax logit within ``sqrt(d_head)``."""
    dh = cfg.d_head
    tables = RopeTables(dh, *cfg.rope_bases) if cfg.rope == "on" else None
    root = Rng(seed).split("qk-bound")
    worst = 0.0
    with T.precision("f64"):
        for n in range(sets):
            r = root.split(n)
            tokens = int(r.integers(1, 17))
            std = 10.0 ** float(r.uniform(-2, 1))
            p = nn.init_attention(r.split("attn"), cfg.dim, cfg.heads, qk_norm=True,
                                  qkv_bias=cfg.qkv_bias == "on", std=std)
            x = Tensor(r.normal((tokens, cfg.dim), 10.0 ** float(r.uniform(-3, 3))))
            layout = TokenLayout(r.integers(0, 64, size=(tokens, 2)), np.zeros(tokens, dtype=np.int64))
            logits, _ = nn.attention_logits(x, p, tables, layout)
            worst = max(worst, float(np.abs(logits.data).max()))
    bound = math.sqrt(dh) + 1e-5
    return [_verdict("qk-bound", worst, "<=", bound, sets=sets, d_head=dh)]


# ---------------------------------------------------------------- register coupling

def positional_similarity(tables: RopeTables, layout: TokenLayout) -> np.ndarray:
    """``[prefix, patches]`` mean over channel pairs of ``cos(angle_patch - angle_prefix)``.

    This is the expected cosine similarity between a rotated prefix token and a
    rotated patch token that share content, so it isolates what position alone
    contributes to their attention logit.
    """
    cos, sin = tables.cos_sin(layout)
    pre = layout.kind != TokenLayout.PATCH
    pat = ~pre
    return (cos[pre] @ cos[pat].T + sin[pre] @ sin[pat].T) / cos.shape[1]


def coupling_score(sim: np.ndarray, layout: TokenLayout) -> float:
    """Mean over prefix tokens of |corr(similarity, Manhattan distance to its slot)|."""
    pre = layout.kind != TokenLayout.PATCH
    slots = layout.coords[pre]
    patches = layout.coords[~pre]
    scores = []
    for k, slot in enumerate(slots):
        dist = np.abs(patches - slot).sum(axis=1).astype(np.float64)
        s = sim[k]
        if s.std() == 0 or dist.std() == 0:
            scores.append(0.0)
            continue
        scores.append(abs(float(np.corrcoef(s, dist)[0, 1])))
    return float(np.mean(scores)) if scores else 0.0


def register_coupling(cfg: ModelConfig, variant: str) -> float:
    pb, rb = cfg.rope_bases
    tables = RopeTables(cfg.d_head, patch_base=pb, reg_base=rb if variant == "high_base" else pb)
    kind = TokenLayout.NONE if variant == "none" else TokenLayout.REGISTER
    layout = TokenLayout.for_sequence(cfg.grid, max(cfg.registers, 1), cfg.has_class_token, prefix_kind=kind)
    return coupling_score(positional_similarity(tables, layout), layout)


def probe_register_coupling(cfg: ModelConfig) -> list[ProbeResult]:
    """High-base register tables should couple less to patch geometry than same-base ones."""
    scores = {v: register_coupling(cfg, v) for v in ("none", "same_base", "high_base")}
    res = _verdict("register-coupling[high<same]", scores["high_base"], "<", scores["same_base"], **scores)
    return [ProbeResult(f"register-coupling[{v}]", s, None, "report", None) for v, s in scores.items()] + [res]


def run_probe(kind: str, cfg: ModelConfig | None = None, seed: int = 0) -> list[ProbeResult]:
    cfg = cfg or ModelConfig()
    if kind == "translation":
        return probe_translation(cfg, seed=seed)
    if kind == "flip":
        return probe_flip(cfg, seed=seed)
    if kind == "rope-identity":
        return probe_rope_identity(cfg, seed=seed)
    if kind == "qk-bound":
        return probe_qk_bound(cfg, seed=seed)
    if kind == "register-coupling":
        return probe_register_coupling(cfg)
    raise ValueError(f"unknown probe {kind!r}; expected one of {KINDS}")
