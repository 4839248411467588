"""Complete quadtree (T-pyramid) over a slide, patch extraction and quality.

Depth ``d`` of the tree partitions the slide into ``2^d x 2^d`` quads. A
depth-``d`` quad is read from pyramid level ``level_count - 1 - d``, so the
root comes from the coarsest raster and the leaves from finer ones. With the
usual layout (``level_{L-1}`` is ``tile x tile``) every quad maps onto exactly
``tile x tile`` pixels and no resampling happens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from .classes import TissueClass
from .errors import DepthExceedsLevels, NotALeaf, OutOfBounds, ValidationError
from .slide_io import SlideImage

QuadKey = tuple[int, int, int]  # (depth, grid_x, grid_y)


class Quality(Enum):
    TISSUE = "tissue"
    BACKGROUND = "background"


@dataclass(eq=False)
class Quad:
    depth: int
    grid_x: int
    grid_y: int
    rect: tuple[float, float, float, float]  # x, y, w, h in level-0 pixels
    quality: Quality | None = None
    tissue_fraction: float | None = None
    label: TissueClass | None = None
    predictions: np.ndarray | None = field(default=None, repr=False)

    @property
    def key(self) -> QuadKey:
        return (self.depth, self.grid_x, self.grid_y)


def quad_rect(width: float, height: float, depth: int, gx: int, gy: int) -> tuple[float, float, float, float]:
    # gx * W is an exact integer and 2**d a power of two, so these floats are exact
    n = 2**depth
    return (gx * width / n, gy * height / n, width / n, height / n)


@dataclass
class TPyramid:
    """Complete quadtree; ``nodes[d]`` holds the ``4^d`` depth-d quads row-major."""

    width: int
    height: int
    depth: int
    nodes: list[list[Quad]] = field(repr=False)

    @classmethod
    def build(cls, width: int, height: int, depth: int) -> "TPyramid":
        if depth < 1:
            raise ValidationError("T-pyramid depth must be >= 1")
        nodes = []
        for d in range(depth):
            n = 2**d
            nodes.append(
                [Quad(d, gx, gy, quad_rect(width, height, d, gx, gy)) for gy in range(n) for gx in range(n)]
            )
        return cls(width, height, depth, nodes)

    def __len__(self) -> int:
        return sum(len(level) for level in self.nodes)

    def __iter__(self) -> Iterator[Quad]:
        for level in self.nodes:
            yield from level

    @property
    def grid_size(self) -> int:
        """Side length of the leaf grid."""
        return 2 ** (self.depth - 1)

    @property
    def leaves(self) -> list[Quad]:
        return self.nodes[-1]

    def quad(self, depth: int, gx: int, gy: int) -> Quad:
        n = 2**depth
        if not (0 <= depth < self.depth and 0 <= gx < n and 0 <= gy < n):
            raise OutOfBounds(f"no quad ({depth}, {gx}, {gy}) in depth-{self.depth} pyramid")
        return self.nodes[depth][gy * n + gx]

    def __getitem__(self, key: QuadKey) -> Quad:
        return self.quad(*key)

    def parent(self, quad: Quad) -> Quad | None:
        if quad.depth == 0:
            return None
        return self.quad(quad.depth - 1, quad.grid_x // 2, quad.grid_y // 2)

    def children(self, quad: Quad) -> list[Quad]:
        if quad.depth + 1 >= self.depth:
            return []
        x, y = 2 * quad.grid_x, 2 * quad.grid_y
        d = quad.depth + 1
        return [self.quad(d, x, y), self.quad(d, x + 1, y), self.quad(d, x, y + 1), self.quad(d, x + 1, y + 1)]

    def ancestors(self, quad: Quad) -> list[Quad]:
        """Ancestor chain root first, ending with ``quad`` itself."""
        return [
            self.quad(d, quad.grid_x >> (quad.depth - d), quad.grid_y >> (quad.depth - d))
            for d in range(quad.depth + 1)
        ]

    def is_leaf(self, quad: Quad) -> bool:
        return quad.depth == self.depth - 1

    def label_grid(self) -> np.ndarray:
        """Leaf labels as an int grid (unset labels count as Normal)."""
        g = self.grid_size
        grid = np.zeros((g, g), dtype=np.int64)
        for q in self.leaves:
            grid[q.grid_y, q.grid_x] = int(q.label) if q.label is not None else 0
        return grid


def build_tpyramid(slide: SlideImage, depth: int) -> TPyramid:
    if depth > slide.level_count:
        raise DepthExceedsLevels(f"depth {depth} needs >= {depth} pyramid levels, slide has {slide.level_count}")
    return TPyramid.build(slide.level0_width, slide.level0_height, depth)


# --------------------------------------------------------------------------
# patches


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray = field(repr=False)  # (tile, tile, 3) uint8
    source_quad: QuadKey
    source_level: int


@dataclass(frozen=True, eq=False)
class PatchStack:
    """Ancestor-chain patches of one leaf, coarsest (root) first."""

    patches: tuple[Patch, ...]

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def leaf(self) -> QuadKey:
        return self.patches[-1].source_quad


def _nearest_indices(start: float, stop: float, n: int, limit: int) -> np.ndarray:
    step = (stop - start) / n
    idx = np.floor(start + (np.arange(n) + 0.5) * step).astype(np.int64)
    return np.clip(idx, 0, limit - 1)


def extract_patch(slide: SlideImage, quad: Quad, tile: int | None = None) -> Patch:
    """Read ``quad.rect`` from level ``level_count - 1 - depth`` as a tile x tile patch."""
    tile = slide.tile if tile is None else tile
    if not 0 <= quad.depth < slide.level_count:
        raise OutOfBounds(f"quad depth {quad.depth} has no pyramid level (slide has {slide.level_count})")
    x, y, w, h = quad.rect
    W, H = slide.level0_width, slide.level0_height
    if x < 0 or y < 0 or x + w > W or y + h > H or w <= 0 or h <= 0:
        raise OutOfBounds(f"quad rect {quad.rect} outside {W}x{H} slide")
    level = slide.level_count - 1 - quad.depth
    raster = slide.levels[level]
    lh, lw = raster.shape[:2]
    sx, sy = lw / W, lh / H
    x0, x1, y0, y1 = x * sx, (x + w) * sx, y * sy, (y + h) * sy
    if (
        x0.is_integer() and y0.is_integer()
        and x1 - x0 == tile and y1 - y0 == tile
        and x1 <= lw and y1 <= lh
    ):
        pixels = np.array(raster[int(y0) : int(y1), int(x0) : int(x1)])
    else:
        cols = _nearest_indices(x0, x1, tile, lw)
        rows = _nearest_indices(y0, y1, tile, lh)
        pixels = np.array(raster[rows[0] : rows[-1] + 1][:, cols[0] : cols[-1] + 1])
        pixels = pixels[np.ix_(rows - rows[0], cols - cols[0])]
    return Patch(pixels, quad.key, level)


def context_stack(slide: SlideImage, pyramid: TPyramid, leaf: Quad) -> PatchStack:
    if not pyramid.is_leaf(leaf):
        raise NotALeaf(f"quad {leaf.key} is not at leaf depth {pyramid.depth - 1}")
    return PatchStack(tuple(extract_patch(slide, q) for q in pyramid.ancestors(leaf)))


# --------------------------------------------------------------------------
# quality


@dataclass(frozen=True)
class QualityThresholds:
    brightness: int = 220  # background iff min(R, G, B) > brightness
    min_tissue: float = 0.10


def assess_quality(patch: Patch | np.ndarray, thresholds: QualityThresholds = QualityThresholds()) -> tuple[Quality, float]:
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    background = pixels.min(axis=2) > thresholds.brightness
    tissue_fraction = 1.0 - float(background.mean())
    quality = Quality.TISSUE if tissue_fraction >= thresholds.min_tissue else Quality.BACKGROUND
    return quality, tissue_fraction


def assess_pyramid(slide: SlideImage, pyramid: TPyramid, thresholds: QualityThresholds = QualityThresholds()) -> None:
    """Fill ``quality`` and ``tissue_fraction`` on every quad."""
    for quad in pyramid:
        quad.quality, quad.tissue_fraction = assess_quality(extract_patch(slide, quad), thresholds)
