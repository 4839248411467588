"""Deterministic synthetic slides with controllable per-level discriminability.

Level 0 is painted region by region: white background, then each region's
class texture (base colour plus seeded per-pixel noise). Coarser levels are
2x2 box-filter reductions of that painted base. On top of every level a
zero-mean stripe overlay is added inside regions whose class carries a
stripe signal *at that level*. Tumor classes share base colour and noise, so
a class with stripes only at level ``k`` is pixel-identical to the plain
tumor texture everywhere except at level ``k``.

Stripes are horizontal bands of ``period`` pixels (half ``+amp``, half
``-amp``) aligned to the global level grid; any window whose height is a
multiple of ``period`` keeps its mean colour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .annotation_index import LabelPolicy, class_fractions, label_quad, points_in_polygon
from .classes import TUMOR_CLASSES, TissueClass
from .errors import InvalidSpec, IoFailure
from .pyramid import QuadKey, TPyramid
from .slide_io import AnnotationSet, Region, SlideImage

WHITE = (255, 255, 255)


@dataclass(frozen=True)
class ClassTexture:
    base: tuple[int, int, int]
    noise: int = 0
    channel: tuple[int, int, int] = (0, 0, 0)
    stripes: tuple[tuple[int, int, int], ...] = ()  # (level, period, amplitude)

    def stripe_at(self, level: int) -> tuple[int, int] | None:
        for lvl, period, amp in self.stripes:
            if lvl == level:
                return period, amp
        return None


def _default_textures() -> dict[str, ClassTexture]:
    tumor = (150, 70, 160)
    return {
        "normal": ClassTexture((228, 165, 196), noise=8),
        "benign": ClassTexture(tumor, noise=8, channel=(1, 0, 0), stripes=((2, 8, 40),)),
        "insitu": ClassTexture(tumor, noise=8, channel=(0, 1, 0), stripes=((1, 8, 40),)),
        "invasive": ClassTexture(tumor, noise=8, channel=(0, 0, 1), stripes=((0, 8, 40),)),
    }


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic slide.

    ``layout="blocks"`` places square regions on the aligned grid of depth
    ``block_depth`` quads (classes dealt round-robin, so the class mix is
    exact). ``layout="random"`` scatters axis-aligned rectangles, rotated
    rectangles and convex polygons.
    """

    size: int = 8192
    levels: int = 6
    tile: int = 256
    seed: int = 0
    layout: str = "blocks"
    regions: int = 18
    class_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)
    block_depth: int = 3
    normal_regions: int = 30
    size_range: tuple[float, float] = (0.05, 0.25)
    shapes: tuple[str, ...] = ("rect", "rotated", "convex")
    textures: Mapping[str, ClassTexture] = field(default_factory=_default_textures)

    def validate(self) -> None:
        if self.levels < 1 or self.tile < 1:
            raise InvalidSpec("levels and tile must be positive")
        if self.size != self.tile * 2 ** (self.levels - 1):
            raise InvalidSpec(f"size {self.size} must equal tile * 2^(levels-1) = {self.tile * 2 ** (self.levels - 1)}")
        if self.layout not in ("blocks", "random"):
            raise InvalidSpec(f"unknown layout {self.layout!r}")
        if self.regions < 0 or self.normal_regions < 0:
            raise InvalidSpec("region counts must be >= 0")
        if len(self.class_mix) != 3 or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise InvalidSpec("class_mix needs three nonnegative weights with positive sum")
        if self.layout == "blocks":
            if not 0 <= self.block_depth < self.levels:
                raise InvalidSpec("block_depth must lie in [0, levels)")
            if self.regions + self.normal_regions > 4**self.block_depth:
                raise InvalidSpec("more blocks requested than the block grid holds")
        else:
            lo, hi = self.size_range
            if not 0 < lo <= hi <= 1:
                raise InvalidSpec("size_range must satisfy 0 < min <= max <= 1")
            bad = set(self.shapes) - {"rect", "rotated", "convex"}
            if not self.shapes or bad:
                raise InvalidSpec(f"bad shapes {sorted(bad) or self.shapes}")
        for token in ("normal",) + tuple(c.token for c in TUMOR_CLASSES):
            if token not in self.textures:
                raise InvalidSpec(f"missing texture for {token!r}")
        for token, tex in self.textures.items():
            for lvl, period, amp in tex.stripes:
                if not 0 <= lvl < self.levels or period < 2 or period % 2 or amp < 0:
                    raise InvalidSpec(f"{token}: bad stripe ({lvl}, {period}, {amp})")
            if len(tex.base) != 3 or not all(0 <= v <= 255 for v in tex.base) or tex.noise < 0:
                raise InvalidSpec(f"{token}: bad base colour or noise")


@dataclass
class SynthResult:
    slide: SlideImage
    annotation: AnnotationSet
    labels: dict[QuadKey, TissueClass]
    painted: list[tuple[str, np.ndarray]] = field(repr=False, default_factory=list)

    def label_grid(self, depth: int | None = None) -> np.ndarray:
        depth = self.slide.level_count - 1 if depth is None else depth
        n = 2**depth
        grid = np.zeros((n, n), dtype=np.int64)
        for (d, gx, gy), label in self.labels.items():
            if d == depth:
                grid[gy, gx] = int(label)
        return grid


# --------------------------------------------------------------------------
# textures


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; wraps modulo 2^64 by design
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def coord_noise(seed: int, xs: np.ndarray, ys: np.ndarray, amplitude: int) -> np.ndarray:
    """Integer noise in ``[-amplitude, amplitude]`` per channel, a pure function of (seed, x, y)."""
    shape = np.broadcast(xs, ys).shape
    if amplitude == 0:
        return np.zeros(shape + (3,), dtype=np.int64)
    xs = np.broadcast_to(np.asarray(xs, dtype=np.uint64), shape)
    ys = np.broadcast_to(np.asarray(ys, dtype=np.uint64), shape)
    with np.errstate(over="ignore"):
        key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(0x9E3779B97F4A7C15))
        h = _mix64(key ^ (xs * np.uint64(0x100000001B3)))
        h = _mix64(h ^ ys)
        chans = np.stack([_mix64(h + np.uint64(c + 1)) for c in range(3)], axis=-1)
    return (chans % np.uint64(2 * amplitude + 1)).astype(np.int64) - amplitude


def stripe_signal(ys: np.ndarray, period: int, amplitude: int) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.int64)
    return np.where((ys // (period // 2)) % 2 == 0, amplitude, -amplitude)


def class_texture(
    texture: ClassTexture, level: int, seed: int, xs: np.ndarray, ys: np.ndarray
) -> np.ndarray:
    """Pixels of a class texture at ``level`` for level pixel coordinates.

    Level 0 carries base colour, noise and any level-0 stripes; coarser
    levels carry the base colour plus that level's stripes (noise averages
    away under the box filter).
    """
    xs, ys = np.broadcast_arrays(np.asarray(xs), np.asarray(ys))
    out = np.broadcast_to(np.asarray(texture.base, dtype=np.int64), xs.shape + (3,)).copy()
    if level == 0:
        out += coord_noise(seed, xs, ys, texture.noise)
    stripe = texture.stripe_at(level)
    if stripe is not None:
        out += stripe_signal(ys, *stripe)[..., None] * np.asarray(texture.channel, dtype=np.int64)
    return np.clip(out, 0, 255).astype(np.uint8)


def box_downsample(raster: np.ndarray) -> np.ndarray:
    """2x2 box filter with round-half-up; odd edges replicate the last row/column."""
    h, w = raster.shape[:2]
    if h % 2 or w % 2:
        raster = np.pad(raster, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    r = raster.astype(np.uint16)
    s = r[0::2, 0::2] + r[1::2, 0::2] + r[0::2, 1::2] + r[1::2, 1::2]
    return ((s + 2) // 4).astype(np.uint8)


# --------------------------------------------------------------------------
# layout


def _layout_blocks(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    n = 2**spec.block_depth
    side = spec.size / n
    cells = rng.permutation(n * n)
    tumor_cells = cells[: spec.regions]
    normal_cells = cells[spec.regions : spec.regions + spec.normal_regions]
    tokens = _deal_classes(spec.regions, spec.class_mix)
    shapes: list[tuple[str, np.ndarray]] = []
    for cell in normal_cells:
        shapes.append(("normal", _cell_square(int(cell), n, side)))
    for cell, token in zip(tumor_cells, tokens):
        shapes.append((token, _cell_square(int(cell), n, side)))
    return shapes


def _cell_square(cell: int, n: int, side: float) -> np.ndarray:
    gx, gy = cell % n, cell // n
    x0, y0 = gx * side, gy * side
    return np.array([[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]])


def _deal_classes(count: int, mix: tuple[float, float, float]) -> list[str]:
    """Largest-remainder apportionment, then round-robin interleaving."""
    weights = np.asarray(mix, dtype=np.float64) / sum(mix)
    quotas = weights * count
    counts = np.floor(quotas).astype(int)
    for i in np.argsort(-(quotas - counts), kind="stable")[: count - counts.sum()]:
        counts[i] += 1
    tokens = []
    remaining = counts.copy()
    while remaining.sum():
        for i, c in enumerate(TUMOR_CLASSES):
            if remaining[i]:
                tokens.append(c.token)
                remaining[i] -= 1
    return tokens


def _random_shape(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.size_range
    size = spec.size
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    w = rng.uniform(lo, hi) * size
    h = rng.uniform(lo, hi) * size
    cx = rng.uniform(w / 2, size - w / 2) if kind == "rect" else rng.uniform(0, size)
    cy = rng.uniform(h / 2, size - h / 2) if kind == "rect" else rng.uniform(0, size)
    if kind == "rect":
        pts = np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2], [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])
    elif kind == "rotated":
        theta = rng.uniform(0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
        pts = corners @ np.array([[c, s], [-s, c]]) + [cx, cy]
    else:
        k = int(rng.integers(5, 10))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radii = rng.uniform(0.6, 1.0, size=k)
        pts = np.stack([cx + radii * np.cos(angles) * w / 2, cy + radii * np.sin(angles) * h / 2], axis=1)
        pts = _convex_hull(pts)
    pts = np.clip(pts, 0.0, float(size))
    # snap to 1/16 pixel so annotation text stays short and exact
    return np.round(pts * 16) / 16


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def _layout_random(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
    shapes: list[tuple[str, np.ndarray]] = []
    for _ in range(spec.normal_regions):
        shapes.append(("normal", _random_shape(spec, rng)))
    tokens = _deal_classes(spec.regions, spec.class_mix)
    order = rng.permutation(len(tokens))
    for i in order:
        pts = _random_shape(spec, rng)
        for _ in range(20):
            if abs(_shoelace(pts)) > 1.0:
                break
            pts = _random_shape(spec, rng)
        shapes.append((tokens[i], pts))
    return shapes


def _shoelace(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


# --------------------------------------------------------------------------
# painting

_ROW_CHUNK = 256


def _region_owner(shapes: list[tuple[str, np.ndarray]], width: int, height: int, scale: float) -> np.ndarray:
    """Index of the topmost shape covering each pixel centre (-1 for none)."""
    owner = np.full((height, width), -1, dtype=np.int32)
    for i, (_, pts) in enumerate(shapes):
        xmin, ymin = pts.min(axis=0) / scale
        xmax, ymax = pts.max(axis=0) / scale
        c0, c1 = max(0, int(math.floor(xmin - 0.5))), min(width, int(math.ceil(xmax + 0.5)))
        r0, r1 = max(0, int(math.floor(ymin - 0.5))), min(height, int(math.ceil(ymax + 0.5)))
        if c0 >= c1 or r0 >= r1:
            continue
        xs = (np.arange(c0, c1) + 0.5) * scale
        for start in range(r0, r1, _ROW_CHUNK):
            stop = min(r1, start + _ROW_CHUNK)
            ys = (np.arange(start, stop) + 0.5) * scale
            inside = points_in_polygon(xs[None, :], ys[:, None], pts)
            owner[start:stop, c0:c1][inside] = i
    return owner


def _paint_level0(spec: SynthSpec, shapes, owner: np.ndarray) -> np.ndarray:
    size = spec.size
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    for i, (token, _) in enumerate(shapes):
        tex = replace(spec.textures[token], stripes=())
        for start in range(0, size, _ROW_CHUNK):
            block = owner[start : start + _ROW_CHUNK]
            rows, cols = np.nonzero(block == i)
            if rows.size:
                img[start + rows, cols] = class_texture(tex, 0, spec.seed, cols, start + rows)
    return img


def _overlay(spec: SynthSpec, shapes, raster: np.ndarray, owner: np.ndarray, level: int) -> None:
    for i, (token, _) in enumerate(shapes):
        tex = spec.textures[token]
        stripe = tex.stripe_at(level)
        if stripe is None or not any(tex.channel):
            continue
        rows, cols = np.nonzero(owner == i)
        if not rows.size:
            continue
        delta = stripe_signal(rows, *stripe)[:, None] * np.asarray(tex.channel, dtype=np.int64)
        raster[rows, cols] = np.clip(raster[rows, cols].astype(np.int64) + delta, 0, 255).astype(np.uint8)


def make_synthetic_slide(spec: SynthSpec = SynthSpec(), policy: LabelPolicy = LabelPolicy()) -> SynthResult:
    """Paint a slide, its annotation and ground-truth labels for every quad.

    Quad labels come from the same sampled-area rule as the R-tree path but
    test every region directly, so they serve as an independent oracle.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shapes = _layout_blocks(spec, rng) if spec.layout == "blocks" else _layout_random(spec, rng)

    base = None
    levels = []
    for level in range(spec.levels):
        side = spec.size >> level
        owner = _region_owner(shapes, side, side, scale=2**level)
        if level == 0:
            base = _paint_level0(spec, shapes, owner)
        else:
            base = box_downsample(base)
        raster = base.copy()
        _overlay(spec, shapes, raster, owner, level)
        levels.append(raster)
    slide = SlideImage(levels=levels, tile=spec.tile)

    regions = tuple(
        Region(TissueClass.from_token(token), tuple((float(x), float(y)) for x, y in pts))
        for token, pts in shapes
        if token != "normal"
    )
    annotation = AnnotationSet(float(spec.size), float(spec.size), regions)
    labels: dict[QuadKey, TissueClass] = {}
    pyramid = TPyramid.build(spec.size, spec.size, spec.levels)
    for quad in pyramid:
        labels[quad.key] = label_quad(class_fractions(regions, quad.rect, policy.samples), policy)
    return SynthResult(slide, annotation, labels, painted=list(shapes))


# --------------------------------------------------------------------------
# spec files


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def parse_synth_spec(text: str, source: str = "<spec>") -> SynthSpec:
    """Parse a line-oriented ``key value`` spec; unknown keys are errors."""
    spec = SynthSpec()
    textures = dict(spec.textures)
    kwargs: dict = {}
    scalar = {"size": int, "levels": int, "tile": int, "seed": int, "regions": int,
              "block_depth": int, "normal_regions": int, "layout": str}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise InvalidSpec(f"{source}:{lineno}: expected 'key value'")
        key, value = parts[0], parts[1].strip()
        try:
            if key in scalar:
                kwargs[key] = scalar[key](value)
            elif key == "class_mix":
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif key == "size_range":
                lo, hi = (float(v) for v in value.split(","))
                kwargs[key] = (lo, hi)
            elif key == "shapes":
                kwargs[key] = tuple(v.strip() for v in value.split(","))
            elif "." in key:
                token, attr = key.split(".", 1)
                tex = textures[token]
                if attr == "base":
                    tex = replace(tex, base=_ints(value))
                elif attr == "noise":
                    tex = replace(tex, noise=int(value))
                elif attr == "channel":
                    tex = replace(tex, channel=_ints(value))
                elif attr == "stripes":
                    stripes = () if value == "none" else tuple(
                        tuple(int(v) for v in item.split(":")) for item in value.split(";") if item.strip()
                    )
                    tex = replace(tex, stripes=stripes)
                else:
                    raise KeyError(key)
                textures[token] = tex
            else:
                raise KeyError(key)
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidSpec(f"{source}:{lineno}: bad entry {line!r}") from exc
    result = replace(spec, textures=textures, **kwargs)
    result.validate()
    return result


def format_synth_spec(spec: SynthSpec) -> str:
    lines = [
        f"size {spec.size}", f"levels {spec.levels}", f"tile {spec.tile}", f"seed {spec.seed}",
        f"layout {spec.layout}", f"regions {spec.regions}",
        "class_mix " + ",".join(repr(float(v)) for v in spec.class_mix),
        f"block_depth {spec.block_depth}", f"normal_regions {spec.normal_regions}",
        f"size_range {spec.size_range[0]!r},{spec.size_range[1]!r}",
        "shapes " + ",".join(spec.shapes),
    ]
    for token in sorted(spec.textures):
        tex = spec.textures[token]
        lines.append(f"{token}.base " + ",".join(map(str, tex.base)))
        lines.append(f"{token}.noise {tex.noise}")
        lines.append(f"{token}.channel " + ",".join(map(str, tex.channel)))
        stripes = ";".join(":".join(map(str, s)) for s in tex.stripes) or "none"
        lines.append(f"{token}.stripes {stripes}")
    return "\n".join(lines) + "\n"


def read_synth_spec(path: str | Path) -> SynthSpec:
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    return parse_synth_spec(text, source=str(path))


def write_labels(labels: Mapping[QuadKey, TissueClass], path: str | Path) -> None:
    """Ground-truth quad labels as ``depth gx gy class`` lines."""
    lines = [f"{d} {gx} {gy} {labels[(d, gx, gy)].token}" for d, gx, gy in sorted(labels)]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def read_labels(path: str | Path) -> dict[QuadKey, TissueClass]:
    labels: dict[QuadKey, TissueClass] = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    for line in text.splitlines():
        if line.strip():
            d, gx, gy, token = line.split()
            labels[(int(d), int(gx), int(gy))] = TissueClass.from_token(token)
    return labels
