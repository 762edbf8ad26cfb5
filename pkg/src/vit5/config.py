"""Model configuration, named presets and the closed-form parameter counter."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .nn import swiglu_hidden_dim


class ConfigError(ValueError):
    """Config violates one or more constraints; ``violations`` lists them."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid config: " + "; ".join(violations))


CHOICES = {
    "layerscale": ("on", "off", "postnorm"),
    "norm": ("rmsnorm", "layernorm"),
    "mlp": ("gelu", "swiglu"),
    "rope": ("on", "off"),
    "ape": ("on", "off"),
    "registers_rope": ("none", "same_base", "high_base"),
    "qk_norm": ("on", "off"),
    "qkv_bias": ("on", "off"),
    "readout": ("class_token", "mean_pool"),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 2
    registers: int = 4
    patch: int = 4
    image_size: int = 32
    in_chans: int = 1
    num_classes: int = 4
    mlp_ratio: float = 4.0
    layerscale: str = "on"
    norm: str = "rmsnorm"
    mlp: str = "gelu"
    rope: str = "on"
    ape: str = "on"
    registers_rope: str = "high_base"
    qk_norm: str = "on"
    qkv_bias: str = "off"
    lambda_init: float = 1e-4
    postnorm_init: float = 1.0
    rope_bases: tuple[float, float] = (1e-4, 1e-1)
    readout: str = "class_token"
    class_token_rope: bool = True
    init_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "rope_bases", tuple(float(b) for b in self.rope_bases))
        problems = self.violations()
        if problems:
            raise ConfigError(problems)

    def violations(self) -> list[str]:
        out = []
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                out.append(f"{key}={getattr(self, key)!r} not in {allowed}")
        for key in ("layers", "dim", "heads", "patch", "image_size", "in_chans", "num_classes"):
            if int(getattr(self, key)) < 1:
                out.append(f"{key} must be >= 1")
        if self.registers < 0:
            out.append("registers must be >= 0")
        if self.heads >= 1 and self.dim % self.heads:
            out.append(f"dim {self.dim} not divisible by heads {self.heads}")
        elif self.rope == "on" and (self.dim // self.heads) % 4:
            out.append(f"d_head {self.dim // self.heads} must be divisible by 4 when rope=on")
        if self.patch >= 1 and self.image_size % self.patch:
            out.append(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if len(self.rope_bases) != 2 or any(b <= 0 for b in self.rope_bases):
            out.append("rope_bases must be two positive reals")
        if self.readout == "mean_pool" and self.image_size < self.patch:
            out.append("mean_pool needs at least one patch")
        return out

    @property
    def d_head(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return (g, g)

    @property
    def has_class_token(self) -> bool:
        return self.readout == "class_token"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rope_bases"] = list(self.rope_bases)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"unknown model key {k!r}" for k in unknown])
        d = dict(d)
        if "rope_bases" in d:
            d["rope_bases"] = tuple(d["rope_bases"])
        return cls(**d)

    def toggles(self) -> dict[str, str]:
        """The seven Table-9 style columns as booleans-in-words."""
        return {
            "LayerScale": self.layerscale,
            "RMSNorm": "on" if self.norm == "rmsnorm" else "off",
            "SwiGLU": "on" if self.mlp == "swiglu" else "off",
            "RoPE": self.rope,
            "Registers": "on" if self.registers > 0 else "off",
            "QK-Norm": self.qk_norm,
            "QKV-Bias": self.qkv_bias,
        }


# Full-size presets: (layers, dim, heads, registers) at 224px, patch 16, 1000 classes.
PRESETS = {
    "vit5-s": (12, 384, 6, 4),
    "vit5-b": (12, 768, 12, 4),
    "vit5-l": (24, 1024, 16, 4),
    "vit5-xl": (28, 1152, 16, 4),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Named configuration. ``vit5-tiny`` is the desk-scale default."""
    if name == "vit5-tiny":
        return ModelConfig(**overrides)
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS) + ['vit5-tiny']}")
    layers, dim, heads, registers = PRESETS[name]
    base = dict(layers=layers, dim=dim, heads=heads, registers=registers, patch=16,
                image_size=224, in_chans=3, num_classes=1000)
    base.update(overrides)
    return ModelConfig(**base)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count, written independently of the builder."""
    d, L, h = cfg.dim, cfg.layers, cfg.heads
    gx, gy = cfg.grid
    n_norm = 2 * d if cfg.norm == "layernorm" else d
    if cfg.mlp == "gelu":
        hid = int(cfg.mlp_ratio * d)
        mlp = 2 * d * hid + hid + d
    else:
        hid = swiglu_hidden_dim(d, cfg.mlp_ratio)
        mlp = 3 * d * hid
    attn = 4 * d * d + d
    if cfg.qkv_bias == "on":
        attn += 3 * d
    if cfg.qk_norm == "on":
        attn += 2 * h * (d // h)
    scale = 0 if cfg.layerscale == "off" else 2 * d
    block = 2 * n_norm + attn + mlp + scale
    total = L * block
    total += cfg.patch * cfg.patch * cfg.in_chans * d + d
    if cfg.ape == "on":
        total += gx * gy * d
    total += cfg.registers * d
    if cfg.has_class_token:
        total += d
    total += n_norm + d * cfg.num_classes + cfg.num_classes
    return total


def count_parameter_groups(cfg: ModelConfig) -> int:
    """Number of named tensors the builder creates."""
    n_norm = 2 if cfg.norm == "layernorm" else 1
    attn = 4 + 1 + (3 if cfg.qkv_bias == "on" else 0) + (2 if cfg.qk_norm == "on" else 0)
    mlp = 4 if cfg.mlp == "gelu" else 3
    scale = 0 if cfg.layerscale == "off" else 2
    block = 2 * n_norm + attn + mlp + scale
    top = 2 + (cfg.ape == "on") + (cfg.registers > 0) + cfg.has_class_token + n_norm + 2
    return cfg.layers * block + top
