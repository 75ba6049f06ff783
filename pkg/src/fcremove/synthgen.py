"""Procedural object-removal scenes with shadows and reflections, plus the corpus file format.

Every scene is a pure function of ``(seed, CorpusConfig)``. Rendering order is
background, shadow stencil (multiplicative darkening), reflection stencil
(blend toward the attenuated object colour), then the opaque object. Effects
touch only their stencils, so the image equals the ground-truth background
everywhere outside ``m_obj_eff``.

Corpus file layout (all little-endian)::

    b"FCS1" | u32 count | count x record
    record = u64 seed | u16 H | u16 W | f32[H*W*3] image | f32[H*W*3] gt_background
             | packbits(m_obj) | packbits(m_obj_eff)

Masks are packed row-major with ``numpy.packbits`` (most significant bit first),
``ceil(H*W/8)`` bytes each.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

# The denoiser downsamples twice (32 -> 16 -> 8), so scenes must tile its coarsest grid.
TOKEN_GRID_FACTOR = 4

MAGIC = b"FCS1"
_MAGIC_FAMILY = b"FCS"
_HEADER = struct.Struct("<4sI")
_RECORD_HEAD = struct.Struct("<QHH")


class CorpusError(Exception):
    """Base class for corpus file problems."""


class CorpusFormatError(CorpusError):
    pass


class CorpusVersionError(CorpusError):
    pass


class CorpusTruncatedError(CorpusError):
    pass


SHAPES = ("circle", "rect", "triangle")


@dataclass(frozen=True)
class CorpusConfig:
    image_size: int = 32
    shapes: tuple[str, ...] = SHAPES
    object_size: tuple[int, int] = (4, 7)  # half-extent range in pixels
    shadow_prob: float = 0.7
    shadow_strength: tuple[float, float] = (0.35, 0.6)
    shadow_dx: tuple[int, int] = (2, 4)
    shadow_dy: tuple[int, int] = (2, 4)
    reflection_prob: float = 0.3
    reflection_strength: tuple[float, float] = (0.3, 0.5)
    reflection_axis: str = "vertical"
    texture: str = "mixed"  # "gradient" | "stripes" | "mixed"
    count: int = 512

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % TOKEN_GRID_FACTOR:
            raise ValueError(
                f"image_size {self.image_size} must be a positive multiple of {TOKEN_GRID_FACTOR}"
            )
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"unknown shape in palette {self.shapes}")
        lo, hi = self.object_size
        if not (2 <= lo <= hi) or 2 * hi + 2 >= self.image_size:
            raise ValueError(f"object_size {self.object_size} does not fit a {self.image_size}px scene")
        if self.reflection_axis != "vertical":
            raise ValueError(f"unsupported reflection axis {self.reflection_axis!r}")
        if self.texture not in ("gradient", "stripes", "mixed"):
            raise ValueError(f"unknown texture family {self.texture!r}")
        for name in ("shadow_prob", "reflection_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass(frozen=True)
class Layout:
    """Sampled scene parameters; rendering is deterministic given a Layout."""

    size: int
    shape: str
    cy: float
    cx: float
    ry: float
    rx: float
    color: tuple[float, float, float]
    bg_base: tuple[float, float, float]
    bg_grad: tuple[float, float]
    bg_stripe: tuple[float, float, float, float]  # amplitude, freq_y, freq_x, phase
    shadow: Optional[tuple[int, int, float]]  # dy, dx, strength
    reflection: Optional[float]


@dataclass(eq=False)
class Scene:
    image: np.ndarray  # H x W x 3 float32
    gt_background: np.ndarray  # H x W x 3 float32
    m_obj: np.ndarray  # H x W bool
    m_obj_eff: np.ndarray  # H x W bool
    seed: int

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bitwise equality of all fields."""
    return (
        a.seed == b.seed
        and a.image.dtype == b.image.dtype
        and np.array_equal(a.image, b.image)
        and np.array_equal(a.gt_background, b.gt_background)
        and np.array_equal(a.m_obj, b.m_obj)
        and np.array_equal(a.m_obj_eff, b.m_obj_eff)
    )


def sample_layout(seed: int, cfg: CorpusConfig) -> Layout:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    ry = float(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    rx = float(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    if shape == "circle":
        rx = ry
    margin_y, margin_x = ry + 1, rx + 1
    cy = float(rng.uniform(margin_y, n - margin_y))
    cx = float(rng.uniform(margin_x, n - margin_x))

    texture = cfg.texture
    if texture == "mixed":
        texture = "stripes" if rng.random() < 0.5 else "gradient"
    bg_base = tuple(float(v) for v in rng.uniform(0.3, 0.7, size=3))
    bg_grad = tuple(float(v) for v in rng.uniform(-0.15, 0.15, size=2))
    if texture == "stripes":
        amp = float(rng.uniform(0.05, 0.12))
        fy, fx = (float(v) for v in rng.uniform(-1.5, 1.5, size=2))
        phase = float(rng.uniform(0.0, 2 * math.pi))
    else:
        amp, fy, fx, phase = 0.0, 0.0, 0.0, 0.0
    # saturated object colour: one channel high, one low
    color = rng.uniform(0.0, 1.0, size=3)
    hi_ch, lo_ch = rng.permutation(3)[:2]
    color[hi_ch] = rng.uniform(0.85, 1.0)
    color[lo_ch] = rng.uniform(0.0, 0.15)

    shadow = None
    if rng.random() < cfg.shadow_prob:
        dy = int(rng.integers(cfg.shadow_dy[0], cfg.shadow_dy[1] + 1))
        dx = int(rng.integers(cfg.shadow_dx[0], cfg.shadow_dx[1] + 1))
        strength = float(rng.uniform(*cfg.shadow_strength))
        shadow = (dy, dx, strength)
    reflection = None
    if rng.random() < cfg.reflection_prob:
        reflection = float(rng.uniform(*cfg.reflection_strength))
    return Layout(
        size=n, shape=shape, cy=cy, cx=cx, ry=ry, rx=rx,
        color=tuple(float(c) for c in color),
        bg_base=bg_base, bg_grad=bg_grad, bg_stripe=(amp, fy, fx, phase),
        shadow=shadow, reflection=reflection,
    )


def rasterize_object(layout: Layout) -> np.ndarray:
    """Object stencil sampled at pixel centres."""
    n = layout.size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy = (ys - layout.cy) / layout.ry
    dx = (xs - layout.cx) / layout.rx
    if layout.shape == "circle":
        return dy * dy + dx * dx <= 1.0
    if layout.shape == "rect":
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
    if layout.shape == "triangle":
        # apex at the top, base at dy = 1
        return (dy <= 1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    raise ValueError(f"unknown shape {layout.shape!r}")


def shift_stencil(stencil: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(stencil)
    h, w = stencil.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = stencil[ys, xs]
    return out


def mirror_below(stencil: np.ndarray) -> np.ndarray:
    """Reflect the stencil about the horizontal line just below its lowest row."""
    rows = np.flatnonzero(stencil.any(axis=1))
    out = np.zeros_like(stencil)
    if rows.size == 0:
        return out
    bottom = rows[-1]
    h = stencil.shape[0]
    for y in range(bottom + 1, h):
        src = 2 * bottom + 1 - y
        if src < 0:
            break
        out[y] = stencil[src]
    return out


def render_background(layout: Layout) -> np.ndarray:
    n = layout.size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64) / n - 0.5
    amp, fy, fx, phase = layout.bg_stripe
    field_ = layout.bg_grad[0] * ys + layout.bg_grad[1] * xs
    field_ = field_ + amp * np.sin(2 * math.pi * (fy * ys + fx * xs) + phase)
    bg = np.asarray(layout.bg_base)[None, None, :] + field_[..., None] * np.array([1.0, 0.8, 0.6])
    return np.clip(bg, 0.0, 1.0)


def render(layout: Layout, seed: int) -> Scene:
    bg = render_background(layout)
    img = bg.copy()
    obj = rasterize_object(layout)
    eff = obj.copy()
    if layout.shadow is not None:
        dy, dx, strength = layout.shadow
        shadow = shift_stencil(obj, dy, dx) & ~obj
        img[shadow] *= 1.0 - strength
        eff |= shadow
    if layout.reflection is not None:
        refl = mirror_below(obj) & ~obj
        s = layout.reflection
        img[refl] = (1.0 - s) * img[refl] + s * np.asarray(layout.color)
        eff |= refl
    img[obj] = np.asarray(layout.color)
    return Scene(
        image=img.astype(np.float32),
        gt_background=bg.astype(np.float32),
        m_obj=obj,
        m_obj_eff=eff,
        seed=int(seed),
    )


def generate_scene(seed: int, cfg: CorpusConfig) -> Scene:
    return render(sample_layout(seed, cfg), seed)


def generate_corpus(seeds: Iterable[int], cfg: CorpusConfig) -> list[Scene]:
    return [generate_scene(s, cfg) for s in seeds]


def record_size(h: int, w: int) -> int:
    return _RECORD_HEAD.size + 2 * (h * w * 3 * 4) + 2 * math.ceil(h * w / 8)


def header_size() -> int:
    return _HEADER.size


def _encode(scene: Scene) -> bytes:
    h, w = scene.size
    parts = [
        _RECORD_HEAD.pack(scene.seed, h, w),
        np.ascontiguousarray(scene.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(scene.gt_background, dtype="<f4").tobytes(),
        np.packbits(scene.m_obj.reshape(-1)).tobytes(),
        np.packbits(scene.m_obj_eff.reshape(-1)).tobytes(),
    ]
    return b"".join(parts)


def write_corpus(scenes: Sequence[Scene], path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, len(scenes)))
        for scene in scenes:
            f.write(_encode(scene))


def read_corpus(path: str | os.PathLike) -> list[Scene]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        if data[:4] == MAGIC:
            raise CorpusTruncatedError(f"{path}: header truncated ({len(data)} bytes)")
        raise CorpusFormatError(f"{path}: not a corpus file")
    magic, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        if magic[:3] == _MAGIC_FAMILY:
            raise CorpusVersionError(f"{path}: unsupported corpus version {magic!r}, expected {MAGIC!r}")
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    off = _HEADER.size
    scenes = []
    for i in range(count):
        if off + _RECORD_HEAD.size > len(data):
            raise CorpusTruncatedError(f"{path}: record {i} header truncated")
        seed, h, w = _RECORD_HEAD.unpack_from(data, off)
        need = record_size(h, w)
        if off + need > len(data):
            raise CorpusTruncatedError(f"{path}: record {i} payload truncated")
        off += _RECORD_HEAD.size
        npx = h * w * 3
        image = np.frombuffer(data, dtype="<f4", count=npx, offset=off).reshape(h, w, 3).astype(np.float32)
        off += npx * 4
        gt = np.frombuffer(data, dtype="<f4", count=npx, offset=off).reshape(h, w, 3).astype(np.float32)
        off += npx * 4
        nbytes = math.ceil(h * w / 8)
        masks = []
        for _ in range(2):
            bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off))
            masks.append(bits[: h * w].reshape(h, w).astype(bool))
            off += nbytes
        scenes.append(Scene(image=image, gt_background=gt, m_obj=masks[0], m_obj_eff=masks[1], seed=int(seed)))
    if off != len(data):
        raise CorpusFormatError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    return scenes
