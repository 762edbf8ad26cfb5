"""Axial 2D rotary tables for patch tokens and register/class tokens.

Head channels are split in two halves: the first half rotates with the x
coordinate, the second with the y coordinate. Within a half, channel pair
``i`` turns by ``coord * base ** (2i / (d_head / 2))``. Patch tokens use
``patch_base``; register and class tokens use ``reg_base`` at reserved
coordinates, or are left unrotated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TokenLayout:
    """Per-token rotary coordinates and which table (if any) rotates them."""

    PATCH = 0
    REGISTER = 1
    NONE = 2

    coords: np.ndarray  # [T, 2] integer (x, y)
    kind: np.ndarray  # [T] one of PATCH / REGISTER / NONE

    @property
    def num_tokens(self) -> int:
        return len(self.kind)

    @classmethod
    def for_sequence(cls, grid: tuple[int, int], registers: int, class_token: bool,
                     prefix_kind: int = REGISTER, class_kind: int | None = None,
                     patch_offset: tuple[int, int] = (0, 0)) -> "TokenLayout":
        """Layout of ``[class?] ++ registers ++ patches`` (patches row-major).

        Register ``k`` sits at ``(k, 0)`` and the class token at ``(registers, 0)``.
        """
        h, w = grid
        coords, kind = [], []
        if class_token:
            coords.append((registers, 0))
            kind.append(prefix_kind if class_kind is None else class_kind)
        for k in range(registers):
            coords.append((k, 0))
            kind.append(prefix_kind)
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ox, oy = patch_offset
        patch = np.stack([xs.ravel() + ox, ys.ravel() + oy], axis=1)
        coords = np.concatenate([np.array(coords, dtype=np.int64).reshape(-1, 2), patch]).astype(np.int64)
        kind = np.concatenate([np.array(kind, dtype=np.int64), np.zeros(h * w, dtype=np.int64)])
        return cls(coords, kind)

    @property
    def num_prefix(self) -> int:
        return int(np.count_nonzero(self.kind != self.PATCH))


@dataclass
class RopeTables:
    d_head: int
    patch_base: float = 1e-4
    reg_base: float = 1e-1
    _banks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.d_head % 4:
            raise ValueError(f"2D RoPE needs d_head divisible by 4, got {self.d_head}")

    @property
    def pairs_per_axis(self) -> int:
        return self.d_head // 4

    def frequencies(self, base: float) -> np.ndarray:
        i = np.arange(self.pairs_per_axis, dtype=np.float64)
        return base ** (2 * i / (self.d_head / 2))

    def bank(self, base: float, upto: int) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin of shape ``[n, pairs_per_axis]`` for coords ``0..n-1`` with ``n > upto``.

        Grows on demand; a request past the cached range rebuilds the bank.
        """
        cached = self._banks.get(base)
        if cached is None or cached[0].shape[0] <= upto:
            n = max(upto + 1, 2 * (cached[0].shape[0] if cached else 16))
            ang = np.arange(n, dtype=np.float64)[:, None] * self.frequencies(base)[None, :]
            cached = (np.cos(ang), np.sin(ang))
            self._banks[base] = cached
        return cached

    def cos_sin(self, layout: TokenLayout) -> tuple[np.ndarray, np.ndarray]:
        """Per-token cos/sin of shape ``[T, d_head // 2]`` (x pairs, then y pairs)."""
        coords = np.asarray(layout.coords)
        if (coords < 0).any():
            raise ValueError("rotary coordinates must be non-negative")
        t = layout.num_tokens
        m = self.pairs_per_axis
        cos = np.ones((t, 2 * m))
        sin = np.zeros((t, 2 * m))
        for kind, base in ((TokenLayout.PATCH, self.patch_base), (TokenLayout.REGISTER, self.reg_base)):
            sel = layout.kind == kind
            if not sel.any():
                continue
            c, s = self.bank(base, int(coords[sel].max()))
            for axis in (0, 1):
                idx = coords[sel, axis]
                cos[sel, axis * m:(axis + 1) * m] = c[idx]
                sin[sel, axis * m:(axis + 1) * m] = s[idx]
        return cos, sin
