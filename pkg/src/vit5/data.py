"""Synthetic shape images and binary PPM/PGM ingestion.

Scenes are drawn from integer geometry in units of 1/1024 of the image side,
then rasterized with 4x4 supersampling done entirely in integer arithmetic.
Rendering the same scene at another resolution keeps its geometry, so
resolution sweeps compare like with like.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import Rng

UNIT = 1024  # scene coordinates per image side
SUPERSAMPLE = 4
SHAPES = ("disk", "square", "triangle", "cross")
TASKS = ("shape_class", "shape_quadrant")


@dataclass(frozen=True)
class SynthSpec:
    task: str = "shape_class"
    resolution: int = 32
    num_classes: int = 4
    train_size: int = 4096
    eval_size: int = 512
    seed: int = 0
    noise_std: float = 0.05
    channels: int = 1
    min_size: int = 160  # half-extent range, scene units
    max_size: int = 288

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        expected = len(SHAPES) * (4 if self.task == "shape_quadrant" else 1)
        if self.num_classes != expected:
            raise ValueError(f"{self.task} has {expected} classes, got num_classes={self.num_classes}")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0 < self.min_size <= self.max_size < UNIT // 2:
            raise ValueError("need 0 < min_size <= max_size < UNIT/2")

    def split_size(self, split: str) -> int:
        if split == "train":
            return self.train_size
        if split == "eval":
            return self.eval_size
        raise ValueError(f"unknown split {split!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def for_task(cls, task: str, **kw) -> "SynthSpec":
        return cls(task=task, num_classes=len(SHAPES) * (4 if task == "shape_quadrant" else 1), **kw)


@dataclass(frozen=True)
class Scene:
    shape: int
    cx: int
    cy: int
    size: int

    def translated(self, dx: int, dy: int) -> "Scene":
        return dataclasses.replace(self, cx=self.cx + dx, cy=self.cy + dy)


@dataclass
class Batch:
    images: np.ndarray  # [B, C, H, W] in [0, 1], float32
    labels: np.ndarray  # [B] int64

    def __len__(self) -> int:
        return len(self.labels)


def quadrant(scene: Scene) -> int:
    return int(scene.cx >= UNIT // 2) + 2 * int(scene.cy >= UNIT // 2)


def label_of(scene: Scene, task: str) -> int:
    if task == "shape_class":
        return scene.shape
    if task == "shape_quadrant":
        return scene.shape * 4 + quadrant(scene)
    raise ValueError(f"unknown task {task!r}")


def scene_for(spec: SynthSpec, split: str, index: int) -> Scene:
    n = spec.split_size(split)
    if not 0 <= index < n:
        raise IndexError(f"index {index} outside {split} split of size {n}")
    r = Rng(spec.seed).split("scene", split, index)
    label = int(r.integers(0, spec.num_classes))
    size = int(r.integers(spec.min_size, spec.max_size + 1))
    if spec.task == "shape_class":
        shape = label
        lo, hi = size, UNIT - size
        cx, cy = (int(v) for v in r.integers(lo, hi + 1, size=2))
    else:
        shape, q = divmod(label, 4)
        half = UNIT // 2
        # centre strictly inside its quadrant, shape kept on the canvas
        x0 = half if q % 2 else 0
        y0 = half if q // 2 else 0
        cx = int(r.integers(max(x0, size), min(x0 + half, UNIT - size + 1)))
        cy = int(r.integers(max(y0, size), min(y0 + half, UNIT - size + 1)))
    return Scene(shape, cx, cy, size)


def coverage(scene: Scene, resolution: int) -> np.ndarray:
    """Fraction of each pixel inside the shape, exact multiples of 1/16."""
    s = SUPERSAMPLE
    d = 2 * s * resolution  # sample positions in units of 1/d of the side
    pos = np.arange(resolution * s, dtype=np.int64) * 2 + 1
    # compare sample*UNIT against centre*d: all integer
    dx = pos[None, :] * UNIT - scene.cx * d
    dy = pos[:, None] * UNIT - scene.cy * d
    r = scene.size * d
    adx, ady = np.abs(dx), np.abs(dy)
    if scene.shape == 0:
        inside = dx * dx + dy * dy <= r * r
    elif scene.shape == 1:
        inside = (adx <= r) & (ady <= r)
    elif scene.shape == 2:
        inside = (ady <= r) & (2 * adx <= dy + r)
    elif scene.shape == 3:
        inside = ((adx <= r) & (3 * ady <= r)) | ((3 * adx <= r) & (ady <= r))
    else:
        raise ValueError(f"unknown shape id {scene.shape}")
    counts = inside.reshape(resolution, s, resolution, s).sum(axis=(1, 3))
    return counts.astype(np.float64) / (s * s)


def render(spec: SynthSpec, split: str, index: int, resolution: int) -> np.ndarray:
    img = coverage(scene_for(spec, split, index), resolution)
    if spec.noise_std > 0:
        noise = Rng(spec.seed).split("noise", split, index, resolution).normal((resolution, resolution))
        img = np.clip(img + spec.noise_std * noise, 0.0, 1.0)
    img = img.astype(np.float32)
    return np.repeat(img[None], spec.channels, axis=0)


def generate(spec: SynthSpec, split: str, index_range, resolution: int | None = None,
             patch: int = 4) -> Batch:
    """Render samples ``index_range`` (a range or index array) of ``split``."""
    res = spec.resolution if resolution is None else resolution
    if res < 4 * patch:
        raise ValueError(f"resolution {res} below 4*patch={4 * patch}")
    idx = np.asarray(list(index_range) if isinstance(index_range, range) else index_range, dtype=np.int64)
    images = np.zeros((len(idx), spec.channels, res, res), dtype=np.float32)
    labels = np.zeros(len(idx), dtype=np.int64)
    for j, i in enumerate(idx):
        images[j] = render(spec, split, int(i), res)
        labels[j] = label_of(scene_for(spec, split, int(i)), spec.task)
    return Batch(images, labels)


# ---------------------------------------------------------------- PPM / PGM

class PnmError(ValueError):
    pass


class PnmMagicError(PnmError):
    pass


class PnmHeaderError(PnmError):
    pass


class LabelParseError(ValueError):
    pass


def _tokens(buf: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    out = []
    i = start
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise PnmHeaderError("header ended early")
        out.append(buf[i:j])
        i = j
    return out, i


def read_pnm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Binary P5/P6 file -> (``[C, H, W]`` uint array, maxval)."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmMagicError(f"{path}: unknown magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    try:
        toks, i = _tokens(buf, 3, 2)
        w, h, maxval = (int(t) for t in toks)
    except (ValueError, PnmHeaderError) as exc:
        raise PnmHeaderError(f"{path}: malformed header ({exc})") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PnmHeaderError(f"{path}: bad dimensions or maxval ({w}x{h}, {maxval})")
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise PnmHeaderError(f"{path}: missing whitespace after header")
    i += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    payload = buf[i:i + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise PnmHeaderError(f"{path}: pixel data truncated")
    px = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    return px.transpose(2, 0, 1).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pnm(path: str | os.PathLike, pixels: np.ndarray, maxval: int = 255) -> None:
    """Write ``[H, W]`` or ``[C, H, W]`` integer pixels as P5 (C=1) or P6 (C=3)."""
    px = np.asarray(pixels)
    if px.ndim == 2:
        px = px[None]
    c, h, w = px.shape
    if c not in (1, 3):
        raise PnmError(f"need 1 or 3 channels, got {c}")
    if px.min() < 0 or px.max() > maxval:
        raise PnmError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + px.transpose(1, 2, 0).astype(dtype).tobytes())


def resize_nearest(img: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbour resize of ``[C, H, W]`` to ``[C, res, res]``."""
    _, h, w = img.shape
    rows = (np.arange(resolution) * h) // resolution
    cols = (np.arange(resolution) * w) // resolution
    return img[:, rows][:, :, cols]


_NAME = re.compile(r"^(?P<label>[^_]+)_(?P<id>.+)\.(ppm|pgm)$", re.IGNORECASE)


def parse_label(name: str) -> int:
    m = _NAME.match(name)
    if not m:
        raise LabelParseError(f"{name!r} does not match <label>_<id>.ppm|pgm")
    try:
        return int(m.group("label"))
    except ValueError:
        raise LabelParseError(f"{name!r}: label {m.group('label')!r} is not an integer") from None


def load_ppm_dir(path: str | os.PathLike, resolution: int, batch_size: int = 64) -> Iterator[Batch]:
    """Stream batches from a directory of ``<label>_<id>.ppm|pgm`` files (sorted by name)."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    images, labels = [], []
    channels = None
    for f in files:
        label = parse_label(f.name)
        px, maxval = read_pnm(f)
        if channels is None:
            channels = px.shape[0]
        elif px.shape[0] != channels:
            raise PnmError(f"{f}: mixed channel counts in {path}")
        images.append(resize_nearest(px, resolution).astype(np.float32) / np.float32(maxval))
        labels.append(label)
        if len(images) == batch_size:
            yield Batch(np.stack(images), np.array(labels, dtype=np.int64))
            images, labels = [], []
    if images:
        yield Batch(np.stack(images), np.array(labels, dtype=np.int64))
